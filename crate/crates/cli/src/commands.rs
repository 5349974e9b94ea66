use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rflav::analysis::{corpus_loop_rate, feature_drift, ClipReport, LoopConfig};
use rflav::check::{all_passed, default_suite};
use rflav::config::RunConfig;
use rflav::model::RFlavNetwork;
use rflav::rolling::{conditional_generate, generate_stream, Conditioning, NetworkField};
use rflav::toydata::{
    default_manifest, format_manifest, generate_clip, parse_manifest, read_clip, write_clip, Clip, ClipWriter,
};
use rflav::training::{evaluate, train_on_clips, TrainState};
use rflav::{Error, Result};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

pub const CLIP_EXT: &str = "rfav";

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// The effective configuration goes to stderr so stdout stays parseable.
fn echo(cfg: &RunConfig) {
    eprint!("# effective config\n{}", cfg.to_text());
}

fn clip_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == CLIP_EXT))
        .collect();
    files.sort();
    Ok(files)
}

fn clip_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn dataset(config: Option<&Path>, manifest: Option<&Path>, count: usize, length: usize, out: &Path) -> Result<u8> {
    let cfg = load_config(config)?;
    echo(&cfg);
    let entries = match manifest {
        Some(p) => parse_manifest(&fs::read_to_string(p)?)?,
        None => default_manifest(count, length, cfg.geometry.class_count),
    };
    if entries.is_empty() {
        return Err(Error::Format("manifest lists no clips".into()));
    }
    fs::create_dir_all(out)?;
    if manifest.is_none() {
        fs::write(out.join("manifest.txt"), format_manifest(&entries))?;
    }
    for (i, e) in entries.iter().enumerate() {
        let clip = generate_clip(&cfg.geometry, e.class_id, e.seed, e.length)?;
        let path = out.join(format!("clip_{i:04}.{CLIP_EXT}"));
        write_clip(&path, &clip)?;
        println!("{}\tclass {}\tseed {}\t{} frames", path.display(), e.class_id, e.seed, e.length);
    }
    Ok(EXIT_OK)
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub save_every: Option<u64>,
}

pub fn train(args: TrainArgs) -> Result<u8> {
    let cfg = load_config(args.config.as_deref())?;
    echo(&cfg);
    let tc = cfg.train();
    let files = clip_files(&args.data)?;
    if files.is_empty() {
        return Err(Error::Format(format!("no .{CLIP_EXT} clips in {}", args.data.display())));
    }
    let clips = files.iter().map(|p| read_clip(p)).collect::<Result<Vec<Clip>>>()?;
    let mut state = match &args.resume {
        Some(p) => {
            let s = TrainState::load(p)?;
            if s.net.config() != &tc.model {
                return Err(Error::Config("resumed checkpoint was trained with a different model config".into()));
            }
            s
        }
        None => TrainState::new(&tc)?,
    };
    fs::write(args.out.with_extension("config"), cfg.to_text())?;
    let log_path = args.log.unwrap_or_else(|| args.out.with_extension("metrics.csv"));
    let mut log = BufWriter::new(
        OpenOptions::new().create(true).write(true).append(args.resume.is_some()).truncate(args.resume.is_none()).open(&log_path)?,
    );
    let before = evaluate(&state.net, &clips, tc.schedule.window)?;
    while state.step < tc.steps {
        let loss = train_on_clips(&mut state, &tc, &clips)?;
        writeln!(log, "{},{},{}", state.step, loss.video, loss.audio)?;
        if args.save_every.is_some_and(|n| n > 0 && state.step % n == 0) {
            log.flush()?;
            state.save(&args.out)?;
        }
    }
    log.flush()?;
    state.save(&args.out)?;
    let after = evaluate(&state.net, &clips, tc.schedule.window)?;
    println!("steps\t{}", state.step);
    if let (Some(first), Some(last)) = (state.initial_loss, state.last_loss) {
        println!("train_loss\t{first:.6}\t{:.6}", last.total);
    }
    println!("eval_loss_v\t{:.6}\t{:.6}", before.video, after.video);
    println!("eval_loss_a\t{:.6}\t{:.6}", before.audio, after.audio);
    println!("checkpoint\t{}", args.out.display());
    println!("metrics\t{}", log_path.display());
    Ok(EXIT_OK)
}

pub struct GenerateArgs {
    pub config: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub frames: usize,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub class: Option<usize>,
    pub a2v: Option<PathBuf>,
    pub v2a: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn generate(args: GenerateArgs) -> Result<u8> {
    let mut cfg = load_config(args.config.as_deref())?;
    let net = RFlavNetwork::<f32>::load(&args.checkpoint)?;
    let m = net.config();
    let g = &mut cfg.geometry;
    (g.channels, g.height, g.width, g.segments_per_frame, g.mel_bins) =
        (m.channels, m.height, m.width, m.segments_per_frame, m.mel_bins);
    cfg.class_conditional = m.class_count.is_some();
    if let Some(n) = m.class_count {
        g.class_count = n;
    }
    if let Some(s) = args.steps {
        cfg.steps_per_frame = s;
    }
    if let Some(s) = args.seed {
        cfg.sample_seed = s;
    }
    if args.class.is_some() {
        cfg.class = args.class;
    }
    let guide = match (&args.a2v, &args.v2a) {
        (Some(p), _) => Some((Conditioning::AudioToVideo, p)),
        (_, Some(p)) => Some((Conditioning::VideoToAudio, p)),
        _ => None,
    };
    cfg.conditioning = guide.map_or(Conditioning::None, |(c, _)| c);
    cfg.validate()?;
    echo(&cfg);
    let sc = cfg.sampler();
    let geom = cfg.geometry;
    let mut field = NetworkField { net: &net, class: sc.class };
    let class_id = sc.class.unwrap_or(0) as u32;
    match guide {
        None => {
            let mut writer = ClipWriter::create(&args.out, &geom, class_id, sc.seed)?;
            let stats = generate_stream(&mut field, &sc, &geom, args.frames, &mut writer)?;
            writer.finish()?;
            println!("frames\t{}", stats.frames);
            println!("evaluations\t{}", stats.evaluations);
            println!("peak_state_bytes\t{}", stats.peak_state_bytes);
        }
        Some((mode, path)) => {
            let cond = read_clip(path)?;
            let truth = match mode {
                Conditioning::AudioToVideo => &cond.audio,
                _ => &cond.video,
            };
            let (video, audio) = conditional_generate(&mut field, &sc, &geom, truth, args.frames)?;
            let clip = Clip { video, audio, class_id, seed: sc.seed };
            write_clip(&args.out, &clip)?;
            println!("frames\t{}", clip.len());
            println!("conditioning\t{}\t{}", mode.tag(), path.display());
        }
    }
    println!("out\t{}", args.out.display());
    Ok(EXIT_OK)
}

pub fn analyze(config: Option<&Path>, path: &Path, loops: bool, drift: bool, threshold: Option<f64>) -> Result<u8> {
    let mut cfg = load_config(config)?;
    if let Some(t) = threshold {
        cfg.loop_threshold = t;
    }
    cfg.validate()?;
    echo(&cfg);
    let loop_cfg: LoopConfig = cfg.loop_config();
    let do_loop = loops || !drift;
    let dir_mode = path.is_dir();
    let files = if dir_mode { clip_files(path)? } else { vec![path.to_path_buf()] };
    if files.is_empty() {
        return Err(Error::Format(format!("no .{CLIP_EXT} clips in {}", path.display())));
    }
    let clips = files.iter().map(|p| Ok((clip_id(p), read_clip(p)?))).collect::<Result<Vec<_>>>()?;
    if do_loop {
        let report = corpus_loop_rate(clips.iter().map(|(id, c)| (id.clone(), &c.video)), &loop_cfg)?;
        println!("# clip\tis_loop\tperiod\tdominance");
        for c in &report.clips {
            println!("{c}");
        }
        if dir_mode {
            println!("loop_rate\t{:.4}\t{}/{}", report.loop_rate, loop_count(&report.clips), report.clips.len());
        }
    }
    if drift {
        println!("# clip\tdrift by window (window {}, stride {})", cfg.drift_window, cfg.drift_stride);
        for (id, c) in &clips {
            let d = feature_drift(&c.video, cfg.drift_window, cfg.drift_stride)?;
            let values: Vec<String> = d.drift.iter().map(|x| format!("{x:.6}")).collect();
            println!("{id}\t{}", values.join(" "));
        }
    }
    Ok(EXIT_OK)
}

fn loop_count(clips: &[ClipReport]) -> usize {
    clips.iter().filter(|c| c.report.is_loop).count()
}

pub fn check() -> Result<u8> {
    let outcomes = default_suite();
    for o in &outcomes {
        println!("{o}");
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} checks passed", outcomes.len());
    Ok(if all_passed(&outcomes) { EXIT_OK } else { EXIT_VERIFY })
}
