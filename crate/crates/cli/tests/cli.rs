use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use afcn_cli::config::RunConfig;
use afcn_core::checkpoint::save_checkpoint;
use afcn_core::data::{load_manifest, split_folds};
use afcn_core::dsp::{read_wav, spectrogram};
use afcn_core::train::{fit, prepare_features, Example, Trainer};
use afcn_core::build_model;
use tempfile::TempDir;

fn afcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afcn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn afcn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// 40 short synthetic utterances, two per speaker and class, plus a run config.
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let o = afcn(&[
            "synth",
            "--out",
            s(&corpus),
            "--seed",
            "3",
            "--per-class",
            "10",
            "--min-seconds",
            "0.5",
            "--max-seconds",
            "0.8",
        ]);
        assert!(o.status.success(), "{o:?}");
        let f = Self { dir };
        f.write_config(extra);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> PathBuf {
        self.path("run.cfg")
    }

    fn write_config(&self, extra: &str) {
        let text = format!(
            "manifest = corpus/manifest.csv\ncache_dir = cache\nstack = alexnet_fine\nchannel_scale = 0.125\n\
             lr = 0.01\naccumulate = 4\nmax_epochs = 2\nseed = 5\n{extra}"
        );
        fs::write(self.config(), text).unwrap();
    }

    fn extract(&self) {
        let o = afcn(&["extract", "--config", s(&self.config())]);
        assert!(o.status.success(), "{o:?}");
    }

    fn train(&self, out: &str) -> Output {
        afcn(&["train", "--config", s(&self.config()), "--fold", "0", "--out", s(&self.path(out))])
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn extract_is_idempotent() {
    let f = Fixture::new("");
    let full = read(&f.path("corpus/manifest.csv"));
    let small: Vec<&str> = full.lines().take(11).collect();
    let manifest = f.path("corpus/small.csv");
    fs::write(&manifest, small.join("\n") + "\n").unwrap();
    let out = f.path("small_cache");
    let config = f.config();
    let args = ["extract", "--config", s(&config), "--manifest", s(&manifest), "--out", s(&out)];

    let o = afcn(&args);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("10 written, 0 up to date, 0 failed"), "{}", stdout(&o));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 10);
    let before = fs::read(out.join("neutral_000.spg")).unwrap();

    let o = afcn(&args);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0 written, 10 up to date, 0 failed"), "{}", stdout(&o));
    assert_eq!(fs::read(out.join("neutral_000.spg")).unwrap(), before);
}

#[test]
fn extract_reports_unreadable_wav() {
    let f = Fixture::new("");
    fs::write(f.path("corpus/wav/happy_003.wav"), b"RIFF junk").unwrap();
    let o = afcn(&["extract", "--config", s(&f.config())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("happy_003"), "{err}");
    assert!(stdout(&o).contains("39 written, 0 up to date, 1 failed"), "{}", stdout(&o));
}

#[test]
fn train_without_cache_fails() {
    let f = Fixture::new("");
    let o = f.train("run");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run extract first"));
}

#[test]
fn train_is_deterministic_and_logged() {
    let f = Fixture::new("");
    f.extract();
    assert!(f.train("a").status.success());
    assert!(f.train("b").status.success());
    let log_a = read(&f.path("a/train_log.csv"));
    assert_eq!(log_a, read(&f.path("b/train_log.csv")));
    assert_eq!(fs::read(f.path("a/best.ckpt")).unwrap(), fs::read(f.path("b/best.ckpt")).unwrap());

    let mut lines = log_a.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_wa,val_ua"));
    assert_eq!(lines.count(), 2);

    // The run log replays to the same configuration.
    let run_log = read(&f.path("a/run.log"));
    assert!(run_log.contains("fold = 0"));
    assert!(run_log.contains("# epochs run = 2"));
    let replay: String = run_log
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("fold"))
        .map(|l| format!("{l}\n"))
        .collect();
    let original = RunConfig::load(&f.config()).unwrap();
    assert_eq!(RunConfig::parse(&replay, Path::new("/")).unwrap(), original);
}

#[test]
fn seed_flag_overrides_config() {
    let f = Fixture::new("max_epochs = 1\n");
    f.extract();
    let run = |out: &str, seed: &str| {
        let o = afcn(&[
            "train",
            "--config",
            s(&f.config()),
            "--seed",
            seed,
            "--out",
            s(&f.path(out)),
        ]);
        assert!(o.status.success(), "{o:?}");
        read(&f.path(&format!("{out}/train_log.csv")))
    };
    let a = run("a", "5");
    assert!(f.train("default").status.success());
    assert_eq!(a, read(&f.path("default/train_log.csv")));
    assert_ne!(a, run("b", "6"));
}

#[test]
fn patience_zero_stops_after_first_non_improving_epoch() {
    let f = Fixture::new("max_epochs = 15\npatience = 0\n");
    f.extract();
    assert!(f.train("run").status.success());
    let log = read(&f.path("run/train_log.csv"));
    let ua: Vec<f64> = log.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let n = ua.len();
    assert!(n >= 1);
    for i in 1..n - 1 {
        assert!(ua[i] > ua[i - 1], "epoch {} did not improve but training went on: {ua:?}", i + 1);
    }
    if n < 15 {
        assert!(n >= 2 && ua[n - 1] <= ua[n - 2], "{ua:?}");
    }
    assert!(read(&f.path("run/run.log")).contains(&format!("# epochs run = {n}")));
}

/// Fits the fold-0 training split with no validation data until every
/// utterance is classified correctly.
fn overfit(f: &Fixture) -> PathBuf {
    let cfg = RunConfig::load(&f.config()).unwrap();
    let utts = load_manifest(cfg.manifest.as_deref().unwrap()).unwrap();
    let plan = split_folds(&utts, 5).unwrap().swap_remove(0);
    let train: Vec<Example<f32>> = plan
        .train
        .iter()
        .map(|&i| {
            let spec = spectrogram(&read_wav(&utts[i].path).unwrap(), &cfg.spectrogram).unwrap();
            Example {
                id: utts[i].id.clone(),
                features: prepare_features(&spec, cfg.log_eps),
                label: utts[i].label,
            }
        })
        .collect();
    let mut tc = cfg.train.clone();
    tc.max_epochs = 200;
    tc.stop_at_perfect_train = true;
    let mut trainer = Trainer::new(build_model(&cfg.model, 1).unwrap(), tc).unwrap();
    let result = fit(&mut trainer, &train, &[], |_| {}).unwrap();
    let path = f.path("overfit.ckpt");
    save_checkpoint(&result.best, &path).unwrap();
    path
}

#[test]
fn eval_of_overfit_model_on_train_split() {
    let f = Fixture::new("");
    f.extract();
    let ckpt = overfit(&f);
    let eval = |out: &str| {
        let o = afcn(&[
            "eval",
            "--config",
            s(&f.config()),
            "--checkpoint",
            s(&ckpt),
            "--split",
            "train",
            "--out",
            s(&f.path(out)),
        ]);
        assert!(o.status.success(), "{o:?}");
    };
    eval("e1");
    eval("e2");
    let metrics = read(&f.path("e1/metrics.csv"));
    assert_eq!(metrics, read(&f.path("e2/metrics.csv")));
    assert_eq!(read(&f.path("e1/confusion.csv")), read(&f.path("e2/confusion.csv")));
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "0");
    assert_eq!(row[1], "1.000000");
    assert_eq!(row[2], "1.000000");
}

#[test]
fn eval_all_folds_pools() {
    let f = Fixture::new("max_epochs = 1\n");
    f.extract();
    for k in 0..5 {
        let o = afcn(&[
            "train",
            "--config",
            s(&f.config()),
            "--fold",
            &k.to_string(),
            "--out",
            s(&f.path(&format!("fold{k}"))),
        ]);
        assert!(o.status.success(), "{o:?}");
    }
    let pattern = f.path("fold{fold}/best.ckpt");
    let o = afcn(&[
        "eval",
        "--config",
        s(&f.config()),
        "--checkpoint",
        s(&pattern),
        "--fold",
        "all",
        "--out",
        s(&f.path("eval")),
    ]);
    assert!(o.status.success(), "{o:?}");
    let metrics = read(&f.path("eval/metrics.csv"));
    let folds: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(folds, ["0", "1", "2", "3", "4", "mean", "pooled"]);
    let confusion = read(&f.path("eval/confusion.csv"));
    let total: u64 = confusion
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>())
        .sum();
    // Each fold tests one speaker with one utterance per class.
    assert_eq!(total, 5 * 4);
}

#[test]
fn eval_missing_checkpoint_fails() {
    let f = Fixture::new("");
    f.extract();
    let o = afcn(&[
        "eval",
        "--config",
        s(&f.config()),
        "--checkpoint",
        s(&f.path("nope.ckpt")),
        "--out",
        s(&f.path("eval")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.ckpt"));
}

#[test]
fn eval_incompatible_checkpoint_names_tensors() {
    let f = Fixture::new("max_epochs = 1\n");
    f.extract();
    assert!(f.train("run").status.success());
    f.write_config("channel_scale = 0.25\n");
    let o = afcn(&[
        "eval",
        "--config",
        s(&f.config()),
        "--checkpoint",
        s(&f.path("run/best.ckpt")),
        "--out",
        s(&f.path("eval")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("conv1"), "{o:?}");
}

#[test]
fn attend_writes_normalized_alpha_and_images() {
    let f = Fixture::new("max_epochs = 1\n");
    f.extract();
    assert!(f.train("run").status.success());
    let wav = f.path("corpus/wav/sad_004.wav");
    let prefix = f.path("maps/sad");
    let o = afcn(&[
        "attend",
        "--config",
        s(&f.config()),
        "--checkpoint",
        s(&f.path("run/best.ckpt")),
        "--wav",
        s(&wav),
        "--out",
        s(&prefix),
    ]);
    assert!(o.status.success(), "{o:?}");
    let csv = read(&f.path("maps/sad_alpha.csv"));
    let total: f64 = csv.split([',', '\n']).filter(|v| !v.is_empty()).map(|v| v.parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6, "{total}");

    let frames = spectrogram(&read_wav(&wav).unwrap(), &Default::default()).unwrap().num_frames();
    for name in ["maps/sad_attention.pgm", "maps/sad_spectrogram.pgm"] {
        let img = fs::read(f.path(name)).unwrap();
        let header = format!("P5\n{frames} 200\n255\n");
        assert!(img.starts_with(header.as_bytes()), "{name}");
        assert_eq!(img.len(), header.len() + 200 * frames);
    }
    let att = fs::read(f.path("maps/sad_attention.pgm")).unwrap();
    assert!(att.contains(&255));
}

#[test]
fn attend_rejects_too_short_input() {
    let f = Fixture::new("max_epochs = 1\n");
    f.extract();
    assert!(f.train("run").status.success());
    let wav = f.path("short.wav");
    let samples = afcn_core::dsp::SampleBuffer {
        samples: vec![0.01; 16000 / 5],
        sample_rate_hz: 16000,
    };
    afcn_core::dsp::write_wav(&wav, &samples).unwrap();
    let o = afcn(&[
        "attend",
        "--config",
        s(&f.config()),
        "--checkpoint",
        s(&f.path("run/best.ckpt")),
        "--wav",
        s(&wav),
        "--out",
        s(&f.path("short")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let o = afcn(&["gradcheck"]);
    assert!(o.status.success(), "{o:?}");
    let report = stdout(&o);
    let rows: Vec<&str> = report.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert_eq!(rows.len(), 11, "{report}");
    for layer in ["conv2d", "maxpool", "lrn", "relu", "linear", "softmax_ce", "attention", "end_to_end"] {
        assert!(rows.iter().any(|r| r.contains(layer)), "{layer} missing from\n{report}");
    }

    let o = afcn(&["gradcheck", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(afcn(&[]).status.code(), Some(2));
    assert_eq!(afcn(&["train", "--fold", "x"]).status.code(), Some(2));
    assert_eq!(afcn(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_fails() {
    let f = Fixture::new("lamda = 0.5\n");
    let o = afcn(&["extract", "--config", s(&f.config())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key \"lamda\""));
}
