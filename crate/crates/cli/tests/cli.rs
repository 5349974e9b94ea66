use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rflav::analysis::planted_loop_clip;
use rflav::numerics::Tensor;
use rflav::toydata::{read_clip, read_header, write_clip, Clip, ToyGeometry};

const TINY: &str = "hidden = 16\nheads = 2\nblocks = 1\nfreq_dim = 16\nwindow = 4\nsteps_per_frame = 8\nbatch_size = 2\nsteps = 4\n";

fn rflav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rflav")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn dataset_from_manifest_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.txt");
    fs::write(&manifest, "# three clips\n0,1,12\n1,2,20\n3,3,7\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = rflav(&["dataset", "--manifest", p(&manifest), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 3);
    let geom = ToyGeometry::default();
    for (name, frames) in [("clip_0000.rfav", 12), ("clip_0001.rfav", 20), ("clip_0002.rfav", 7)] {
        let (x, y) = (fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        assert_eq!(x, y);
        assert_eq!(x.len(), 44 + frames * (geom.frame_len() + geom.segment_len()) * 4);
        assert_eq!(read_header(&a.join(name)).unwrap().frames, frames);
    }
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&rflav(&["--help"])), 0);
    assert_eq!(code(&rflav(&["frobnicate"])), 1);
    assert_eq!(code(&rflav(&["generate", "--frames", "3"])), 1);

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour = blue\n").unwrap();
    let o = rflav(&["dataset", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let manifest = dir.path().join("m.txt");
    fs::write(&manifest, "0,1\n").unwrap();
    assert_eq!(code(&rflav(&["dataset", "--manifest", p(&manifest), "--out", p(dir.path())])), 2);

    let junk = dir.path().join("junk.rfav");
    fs::write(&junk, b"not a clip").unwrap();
    assert_eq!(code(&rflav(&["analyze", p(&junk)])), 2);
}

fn train(dir: &Path, cfg: &Path, data: &Path, out: &str, extra: &[&str]) -> Output {
    let out = dir.join(out);
    let mut args = vec!["train", "--config", p(cfg), "--data", p(data), "--out", p(&out)];
    args.extend_from_slice(extra);
    let o = rflav(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn train_generate_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    assert_eq!(code(&rflav(&["dataset", "--count", "3", "--length", "12", "--out", p(&data)])), 0);
    assert!(data.join("manifest.txt").exists());
    let cfg = d.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();

    let o = train(d, &cfg, &data, "a.rflv", &[]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hidden = 16"));
    assert!(stdout(&o).contains("steps\t4"));
    train(d, &cfg, &data, "b.rflv", &[]);
    assert_eq!(fs::read(d.join("a.rflv")).unwrap(), fs::read(d.join("b.rflv")).unwrap());
    let log = fs::read_to_string(d.join("a.metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("1,"));
    assert!(fs::read_to_string(d.join("a.config")).unwrap().contains("steps = 4"));

    // Two steps, then resume to four: same bytes as the straight run.
    let half = d.join("half.cfg");
    fs::write(&half, TINY.replace("steps = 4", "steps = 2")).unwrap();
    train(d, &half, &data, "c.rflv", &[]);
    let c = d.join("c.rflv");
    train(d, &cfg, &data, "c.rflv", &["--resume", p(&c)]);
    assert_eq!(fs::read(&c).unwrap(), fs::read(d.join("a.rflv")).unwrap());
    assert_eq!(fs::read_to_string(d.join("c.metrics.csv")).unwrap(), log);

    let ckpt = d.join("a.rflv");
    let out = d.join("gen.rfav");
    let o = rflav(&["generate", "--config", p(&cfg), "--checkpoint", p(&ckpt), "-n", "16", "--seed", "3", "--class", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let clip = read_clip(&out).unwrap();
    assert_eq!(clip.len(), 16);
    assert_eq!(clip.class_id, 1);
    assert!(stdout(&o).contains("evaluations\t40"), "{}", stdout(&o));

    let cond = data.join("clip_0001.rfav");
    let out = d.join("a2v.rfav");
    let o = rflav(&["generate", "--config", p(&cfg), "--checkpoint", p(&ckpt), "-n", "10", "--a2v", p(&cond), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (got, truth) = (read_clip(&out).unwrap(), read_clip(&cond).unwrap());
    assert_eq!(got.audio, truth.audio.narrow0(0, 10).unwrap());
    assert_ne!(got.video, truth.video.narrow0(0, 10).unwrap());

    let bad = rflav(&["generate", "--config", p(&cfg), "--checkpoint", p(&ckpt), "-n", "4", "--steps", "6", "--out", p(&out)]);
    assert_eq!(code(&bad), 1);
}

fn clip_from_video(video: Tensor<f32>) -> Clip {
    let n = video.shape()[0];
    Clip { video, audio: Tensor::zeros([n, 4, 16]), class_id: 0, seed: 0 }
}

#[test]
fn analyze_flags_loops_and_reports_rate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_clip(&d.join("looped.rfav"), &clip_from_video(planted_loop_clip(12, 240, 3, [4, 8, 8]))).unwrap();
    write_clip(&d.join("still.rfav"), &clip_from_video(Tensor::full([240, 4, 8, 8], 0.3))).unwrap();

    let o = rflav(&["analyze", p(&d.join("looped.rfav")), "--loop"]);
    assert_eq!(code(&o), 0);
    let line = stdout(&o).lines().find(|l| l.starts_with("looped")).unwrap().to_string();
    let fields: Vec<&str> = line.split('\t').collect();
    assert_eq!(fields[1], "true");
    let period: i64 = fields[2].parse().unwrap();
    assert!((period - 12).abs() <= 1, "{line}");

    let o = rflav(&["analyze", p(d), "--loop", "--drift"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("still\tfalse\t-")), "{out}");
    assert!(out.contains("loop_rate\t0.5000\t1/2"), "{out}");
    let drift = out.lines().find(|l| l.starts_with("still\t0.0")).unwrap();
    assert_eq!(drift.split('\t').nth(1).unwrap().split(' ').count(), 15);

    let o = rflav(&["analyze", p(d), "--threshold", "1e9"]);
    assert!(stdout(&o).contains("loop_rate\t0.0000"));
}

#[test]
fn check_suite_passes() {
    let o = rflav(&["check"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("[PASS] oracle sampler"));
    assert!(!out.contains("[FAIL]"));
}
