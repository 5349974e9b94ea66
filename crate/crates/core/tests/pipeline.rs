use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rflav::analysis::{analyze_video, feature_drift, LoopConfig};
use rflav::config::RunConfig;
use rflav::model::RFlavNetwork;
use rflav::numerics::Tensor;
use rflav::rolling::{conditional_generate, generate_stream, Conditioning, NetworkField, OracleField};
use rflav::toydata::{default_manifest, generate_clip, read_clip, write_clip, Clip, ClipWriter};
use rflav::training::{evaluate, train_on_clips, TrainState};

fn tiny() -> RunConfig {
    RunConfig::parse("hidden = 16\nheads = 2\nblocks = 1\nfreq_dim = 16\nwindow = 4\nsteps_per_frame = 8\nbatch_size = 2\nsteps = 30\n")
        .unwrap()
}

fn corpus(cfg: &RunConfig) -> Vec<Clip> {
    default_manifest(4, 16, cfg.geometry.class_count)
        .iter()
        .map(|e| generate_clip(&cfg.geometry, e.class_id, e.seed, e.length).unwrap())
        .collect()
}

#[test]
fn train_save_load_generate() {
    let cfg = tiny();
    let tc = cfg.train();
    let clips = corpus(&cfg);
    let mut state = TrainState::new(&tc).unwrap();
    let before = evaluate(&state.net, &clips, tc.schedule.window).unwrap();
    while state.step < tc.steps {
        train_on_clips(&mut state, &tc, &clips).unwrap();
    }
    let after = evaluate(&state.net, &clips, tc.schedule.window).unwrap();
    assert!(after.total() < before.total(), "{before:?} -> {after:?}");

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("net.rflv");
    state.save(&ckpt).unwrap();
    let net = RFlavNetwork::<f32>::load(&ckpt).unwrap();
    assert_eq!(evaluate(&net, &clips, tc.schedule.window).unwrap(), after);

    // Streaming to a file and to memory give the same frames.
    let sc = cfg.sampler();
    let path = dir.path().join("gen.rfav");
    let mut writer = ClipWriter::create(&path, &cfg.geometry, 0, sc.seed).unwrap();
    let stats = generate_stream(&mut NetworkField { net: &net, class: sc.class }, &sc, &cfg.geometry, 12, &mut writer).unwrap();
    writer.finish().unwrap();
    let mut frames = Vec::new();
    generate_stream(&mut NetworkField { net: &net, class: sc.class }, &sc, &cfg.geometry, 12, &mut frames).unwrap();
    let clip = read_clip(&path).unwrap();
    assert_eq!(stats.frames, 12);
    for (i, (v, a)) in frames.iter().enumerate() {
        assert_eq!(&clip.video.index0(i), v);
        assert_eq!(&clip.audio.index0(i), a);
    }
}

#[test]
fn conditioned_generation_clamps_the_guide() {
    let mut cfg = tiny();
    let net = RFlavNetwork::<f32>::new(cfg.model(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let truth = generate_clip(&cfg.geometry, 2, 5, 20).unwrap();
    for mode in [Conditioning::AudioToVideo, Conditioning::VideoToAudio] {
        cfg.conditioning = mode;
        let sc = cfg.sampler();
        let guide = if mode == Conditioning::AudioToVideo { &truth.audio } else { &truth.video };
        let (v, a) =
            conditional_generate(&mut NetworkField { net: &net, class: sc.class }, &sc, &cfg.geometry, guide, 10).unwrap();
        let kept = if mode == Conditioning::AudioToVideo { &a } else { &v };
        assert_eq!(kept, &guide.narrow0(0, 10).unwrap());
    }
}

#[test]
fn oracle_stream_reproduces_data_through_the_file_format() {
    let mut cfg = tiny();
    cfg.steps_per_frame = 40;
    let sc = cfg.sampler();
    let truth = generate_clip(&cfg.geometry, 1, 77, 80).unwrap();
    let (tv, ta) = (truth.video.clone(), truth.audio.clone());
    let mut field = OracleField::new(|j: usize| (tv.index0(j), ta.index0(j)));
    let mut frames: Vec<(Tensor<f32>, Tensor<f32>)> = Vec::new();
    generate_stream(&mut field, &sc, &cfg.geometry, 60, &mut frames).unwrap();
    let video = Tensor::stack(&frames.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>()).unwrap();
    let err = video.max_abs_diff(&truth.video.narrow0(0, 60).unwrap());
    assert!(err < 1e-4, "{err}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("oracle.rfav");
    write_clip(&path, &Clip { video: video.clone(), audio: truth.audio.narrow0(0, 60).unwrap(), class_id: 1, seed: 77 }).unwrap();
    let back = read_clip(&path).unwrap();
    assert_eq!(back.video, video);
    assert!(feature_drift(&back.video, 16, 16).unwrap().drift.iter().all(|d| d.is_finite()));
    assert!(analyze_video(&back.video, &LoopConfig::default()).unwrap().dominance.is_finite());
}
