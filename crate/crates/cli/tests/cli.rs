use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rave_core::dsp::Waveform;
use rave_core::formats::{read_checkpoint, read_wav, write_wav, LatentFile, WavFormat};

const TINY: &str = "\
preset = desk
model.sample_rate = 8000
model.bands = 2
model.pqmf_taps = 64
model.encoder_hidden = 3,4
model.encoder_strides = 2,2
model.latent_dim = 2
model.decoder_hidden = 4,3,3
model.decoder_ratios = 2,2
model.residual_dilations = 1,3
model.noise_bands = 2
model.noise_ratios = 2
model.discriminator_scales = 2
model.discriminator_channels = 4,4,8
model.discriminator_kernel = 5
train.stage1_steps = 4
train.beta_warmup_steps = 2
train.stage2_steps = 2
train.batch_size = 2
train.crop = 512
train.spectral_scales = 128,64,32
train.lr = 0.001
train.checkpoint_every = 2
corpus.n_clips = 4
corpus.duration = 0.5
corpus.f0_max = 1000
holdout = 1
";

fn rave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rave"))
        .args(args)
        .output()
        .expect("spawn rave")
}

fn ok(args: &[&str]) -> String {
    let out = rave(args);
    assert!(
        out.status.success(),
        "rave {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit status and the single stderr line of a failing command.
fn fails(args: &[&str]) -> String {
    let out = rave(args);
    assert!(!out.status.success(), "rave {args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "multi-line error: {err}");
    err.trim_end().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    out
}

fn sine(len: usize) -> Waveform {
    let x = (0..len)
        .map(|t| (0.5 * (t as f64 * 0.07).sin()) as f32)
        .collect();
    Waveform::new(x, 8000).unwrap()
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let a = trained(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    let b = dir.path().join("again");
    ok(&["train", "--config", s(&cfg), "--out", s(&b)]);
    let log_a = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(
        log_a,
        std::fs::read_to_string(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(log_a.lines().count(), 1 + 6);

    let ck = read_checkpoint(&a.join("checkpoint.rave")).unwrap();
    assert_eq!(ck.training.unwrap().state.step, 6);

    // Resuming a finished run does nothing and keeps the log.
    ok(&["train", "--config", s(&cfg), "--out", s(&a), "--resume"]);
    assert_eq!(
        log_a,
        std::fs::read_to_string(a.join("metrics.csv")).unwrap()
    );

    let c = dir.path().join("seeded");
    ok(&["train", "--config", s(&cfg), "--out", s(&c), "--seed", "5"]);
    assert_ne!(
        log_a,
        std::fs::read_to_string(c.join("metrics.csv")).unwrap()
    );
}

#[test]
fn bad_configs_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(
        &cfg,
        format!("{TINY}train.learning_rate = 1\nmodel.colour = red\n"),
    )
    .unwrap();
    let err = fails(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(err.starts_with("ConfigError:"), "{err}");
    assert!(
        err.contains("train.learning_rate") && err.contains("model.colour"),
        "{err}"
    );

    std::fs::write(&cfg, "data = /nonexistent/wavs\n").unwrap();
    let err = fails(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(err.starts_with("DataError:"), "{err}");

    let err = fails(&["encode", "--checkpoint", "/nonexistent.rave"]);
    assert!(err.starts_with("UsageError:"), "{err}");
}

#[test]
fn encode_decode_analyze_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path());
    let ckpt = run.join("checkpoint.rave");
    let wav = dir.path().join("in.wav");
    write_wav(&wav, &sine(8 * 40), WavFormat::Float32).unwrap();

    let lat = dir.path().join("z.ravl");
    ok(&[
        "encode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&wav),
        "--output",
        s(&lat),
    ]);
    let file = LatentFile::read(&lat).unwrap();
    assert_eq!((file.dim(), file.frames(), file.compact), (2, 40, false));
    assert_eq!(file.frame_rate_millihz, 1_000_000);

    let err = fails(&[
        "encode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&wav),
        "--output",
        s(&lat),
        "--fidelity",
        "0.9",
    ]);
    assert!(
        err.starts_with("ConfigError:") && err.contains("basis"),
        "{err}"
    );

    let full = dir.path().join("full.wav");
    ok(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&lat),
        "--output",
        s(&full),
        "--format",
        "f32",
    ]);
    let y = read_wav(&full).unwrap();
    assert_eq!(y.len(), 8 * 40);

    let corpus = dir.path().join("corpus.spec");
    std::fs::write(
        &corpus,
        "sample_rate = 8000\nn_clips = 3\nduration = 0.5\nf0_max = 1000\n",
    )
    .unwrap();
    let out = dir.path().join("analysis");
    let t1 = ok(&[
        "analyze",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--output",
        s(&out),
        "--fidelities",
        "0.8,0.9,0.99",
    ]);
    let table = std::fs::read_to_string(out.join("fidelity.csv")).unwrap();
    let ranks: Vec<usize> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(ranks.len(), 3);
    assert!(ranks.windows(2).all(|w| w[0] <= w[1]), "{ranks:?}");
    assert!(std::fs::read_to_string(out.join("kl.csv"))
        .unwrap()
        .starts_with("rank,dim,kl\n"));
    let ck = read_checkpoint(&ckpt).unwrap();
    assert!(ck.basis.is_some() && ck.training.is_some());
    let t2 = ok(&[
        "analyze",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--output",
        s(&out),
        "--fidelities",
        "0.8,0.9,0.99",
    ]);
    assert_eq!(t1, t2);

    // Full fidelity keeps every coordinate, so decoding matches the plain path.
    let compact = dir.path().join("c.ravl");
    ok(&[
        "encode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&wav),
        "--output",
        s(&compact),
        "--fidelity",
        "1.0",
    ]);
    let cf = LatentFile::read(&compact).unwrap();
    assert!(cf.compact);
    assert_eq!(cf.dim(), 2);
    let back = dir.path().join("back.wav");
    ok(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&compact),
        "--output",
        s(&back),
        "--format",
        "f32",
    ]);
    let yb = read_wav(&back).unwrap();
    let err = y
        .samples
        .iter()
        .zip(&yb.samples)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(err < 1e-5, "max abs {err}");

    // Compact decode with a fixed seed is repeatable.
    let low = dir.path().join("low.ravl");
    ok(&[
        "encode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&wav),
        "--output",
        s(&low),
        "--fidelity",
        "0.5",
    ]);
    let o1 = dir.path().join("o1.wav");
    let o2 = dir.path().join("o2.wav");
    ok(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&low),
        "--output",
        s(&o1),
        "--seed",
        "3",
    ]);
    ok(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&low),
        "--output",
        s(&o2),
        "--seed",
        "3",
    ]);
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());

    let tr = dir.path().join("tr.wav");
    let text = ok(&[
        "transfer",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&wav),
        "--output",
        s(&tr),
    ]);
    assert!(text.contains("mean KL"));
    assert_eq!(read_wav(&tr).unwrap().len(), 8 * 40);

    let wrong = dir.path().join("wrong.wav");
    write_wav(
        &wrong,
        &Waveform::new(vec![0.0; 64], 16_000).unwrap(),
        WavFormat::Pcm16,
    )
    .unwrap();
    let err = fails(&[
        "transfer",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&wrong),
        "--output",
        s(&tr),
    ]);
    assert!(
        err.starts_with("DataError:") && err.contains("16000"),
        "{err}"
    );

    let csv = ok(&["bench", "--checkpoint", s(&ckpt), "--trials", "3"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("mean,"));
}

#[test]
fn synth_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("c.spec");
    std::fs::write(&spec, "corpus.seed = 4\nn_clips = 3\nduration = 0.25\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth-corpus", "--spec", s(&spec), "--out", s(&a)]);
    ok(&["synth-corpus", "--spec", s(&spec), "--out", s(&b)]);
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for n in names {
        assert_eq!(
            std::fs::read(a.join(&n)).unwrap(),
            std::fs::read(b.join(&n)).unwrap()
        );
    }
    assert_eq!(read_wav(&a.join("clip_00000.wav")).unwrap().len(), 4000);

    std::fs::write(&spec, "n_clips = 3\nvoices = 2\n").unwrap();
    let err = fails(&["synth-corpus", "--spec", s(&spec), "--out", s(&a)]);
    assert!(
        err.starts_with("ConfigError:") && err.contains("voices"),
        "{err}"
    );
}
