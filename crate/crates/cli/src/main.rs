use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rave_core::dsp::Waveform;
use rave_core::formats::{
    apply_corpus_key, read_checkpoint, read_wav, read_wav_dir, synthesize_corpus, write_checkpoint,
    write_corpus, write_wav, CorpusSpec, DataSource, KeyValues, LatentFile, RunConfig, WavFormat,
};
use rave_core::latent::{
    collect_latents, fit_basis, kl_report, project_tensor, reconstruct_tensor, DEFAULT_BASIS_FRAMES,
};
use rave_core::model::{ModelConfig, Rave};
use rave_core::runtime::{bench_throughput, timbre_transfer, BenchMode, DEFAULT_TRIALS};
use rave_core::train::{Dataset, Trainer};
use rave_core::{formats, Error, Result};

const CHECKPOINT_NAME: &str = "checkpoint.rave";

#[derive(Parser)]
#[command(
    name = "rave",
    version,
    about = "Realtime audio variational autoencoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both stages from a config file.
    Train(TrainArgs),
    /// WAV to latent file.
    Encode(EncodeArgs),
    /// Latent file to WAV.
    Decode(DecodeArgs),
    /// Fit the fidelity basis, write the rank table and KL report.
    Analyze(AnalyzeArgs),
    /// Reconstruct a WAV through a model.
    Transfer(TransferArgs),
    /// Decoder throughput.
    Bench(BenchArgs),
    /// Write a synthetic corpus.
    SynthCorpus(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides both model.seed and train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from `<out>/checkpoint.rave`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Keep only the leading principal coordinates reaching this fidelity.
    #[arg(long)]
    fidelity: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pcm16,
    F32,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "pcm16")]
    format: Format,
    /// Seeds the decoder noise and the refill of discarded coordinates.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Folder of mono WAV files.
    #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
    data: Option<PathBuf>,
    /// Synthetic corpus spec file.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.9,0.95,0.99,1.0")]
    fidelities: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for fidelity.csv and kl.csv; defaults to the checkpoint's.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "pcm16")]
    format: Format,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Studio,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    NoMultiband,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    checkpoint: Option<PathBuf>,
    /// Untrained model of a preset shape.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, value_enum, default_value = "full")]
    mode: Mode,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; printed to stdout otherwise.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// key=value corpus spec (`corpus.` prefix optional).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("UsageError: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Analyze(a) => analyze(a),
        Command::Transfer(a) => transfer(a),
        Command::Bench(a) => bench(a),
        Command::SynthCorpus(a) => synth_corpus(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_clips(source: &DataSource) -> Result<Vec<Waveform>> {
    let clips = match source {
        DataSource::WavDir(dir) => {
            if !dir.is_dir() {
                return Err(Error::Data(format!(
                    "dataset folder {} does not exist",
                    dir.display()
                )));
            }
            read_wav_dir(dir)?
        }
        DataSource::Synthetic(spec) => synthesize_corpus(spec)?,
    };
    if clips.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    Ok(clips)
}

fn parse_corpus_spec(text: &str) -> Result<CorpusSpec> {
    let kv = KeyValues::parse(text)?;
    let rate = match kv.get("sample_rate").or(kv.get("corpus.sample_rate")) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("sample_rate: cannot parse {v:?}")))?,
        None => 16_000,
    };
    let mut spec = CorpusSpec::desk(rate);
    let mut unknown = Vec::new();
    for (k, v) in &kv.pairs {
        let key = k.strip_prefix("corpus.").unwrap_or(k);
        if !apply_corpus_key(&mut spec, key, v)? {
            unknown.push(k.clone());
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "unknown corpus keys: {}",
            unknown.join(", ")
        )));
    }
    spec.validate()?;
    Ok(spec)
}

fn write_audio(path: &Path, wave: &Waveform, format: Format) -> Result<()> {
    let f = match format {
        Format::Pcm16 => WavFormat::Pcm16,
        Format::F32 => WavFormat::Float32,
    };
    write_wav(path, wave, f)
}

fn check_rate(model: &Rave, wave: &Waveform) -> Result<()> {
    if wave.sample_rate != model.config.sample_rate {
        return Err(Error::Data(format!(
            "input rate {} differs from model rate {}",
            wave.sample_rate, model.config.sample_rate
        )));
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::parse(&read_text(&a.config)?)?;
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    let clips = load_clips(&cfg.data)?;
    if cfg.holdout >= clips.len() {
        return Err(Error::Config(format!(
            "holdout {} leaves no training clips out of {}",
            cfg.holdout,
            clips.len()
        )));
    }
    let data = Dataset::new(clips[..clips.len() - cfg.holdout].to_vec())?;
    create_dir(&a.out)?;
    let ckpt = a.out.join(CHECKPOINT_NAME);
    let mut trainer = if a.resume && ckpt.exists() {
        read_checkpoint(&ckpt)?.into_trainer()?
    } else {
        write_text(&a.out.join("config.txt"), &cfg.render())?;
        Trainer::new(Rave::new(cfg.model.clone())?, cfg.train.clone())?
    };
    let start = trainer.state.step;
    let rows = trainer.run(&data, Some(&a.out))?;
    let last = rows.last().map(|m| m.total).unwrap_or(f64::NAN);
    println!(
        "trained steps {start}..{} ({} parameters), last total loss {last}",
        trainer.state.step,
        trainer.model.parameter_count()
    );
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let model = &ckpt.model;
    let wave = read_wav(&a.input)?;
    check_rate(model, &wave)?;
    let f = model.config.total_downsampling();
    let mut x = wave.samples;
    x.resize(x.len().div_ceil(f).max(1) * f, 0.0);
    let (mean, _) = model.encode(&[&x])?;
    let (latents, compact) = match a.fidelity {
        None => (mean, false),
        Some(fid) => {
            let basis = ckpt.basis.as_ref().ok_or_else(|| {
                Error::Config("--fidelity needs a checkpoint with a basis (run analyze)".into())
            })?;
            let rank = basis.rank(fid)?;
            (project_tensor(&mean, basis, rank)?, true)
        }
    };
    let file = LatentFile {
        compact,
        frame_rate_millihz: formats::millihz(model.config.latent_rate()),
        latents,
    };
    file.write(&a.output)?;
    println!("{} frames of dim {}", file.frames(), file.dim());
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let model = &ckpt.model;
    let file = LatentFile::read(&a.input)?;
    let d = model.config.latent_dim;
    let z = if file.compact {
        let basis = ckpt.basis.as_ref().ok_or_else(|| {
            Error::Config("compact latents need a checkpoint with a basis".into())
        })?;
        if file.dim() > d {
            return Err(Error::Shape(format!(
                "compact dim {} exceeds latent dim {d}",
                file.dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        reconstruct_tensor(&file.latents, basis, &mut rng)?
    } else {
        if file.dim() != d {
            return Err(Error::Shape(format!(
                "latent file has dim {}, model expects {d}",
                file.dim()
            )));
        }
        file.latents
    };
    let y = model.decode(&z, a.seed)?;
    let wave = Waveform::new(y.into_data(), model.config.sample_rate)?;
    write_audio(&a.output, &wave, a.format)?;
    println!("{} samples", wave.len());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let source = match (&a.data, &a.corpus) {
        (Some(dir), _) => DataSource::WavDir(dir.clone()),
        (None, Some(spec)) => DataSource::Synthetic(parse_corpus_spec(&read_text(spec)?)?),
        (None, None) => return Err(Error::Config("give --data or --corpus".into())),
    };
    let clips = load_clips(&source)?;
    for c in &clips {
        check_rate(&ckpt.model, c)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let frames = collect_latents(&ckpt.model, &clips, DEFAULT_BASIS_FRAMES, &mut rng)?;
    let basis = fit_basis(&frames)?;
    let mut table = String::from("fidelity,rank\n");
    for &f in &a.fidelities {
        table.push_str(&format!("{f},{}\n", basis.rank(f)?));
    }
    let kl = kl_report(&ckpt.model, &clips)?;
    let out = match a.output {
        Some(dir) => dir,
        None => a
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    create_dir(&out)?;
    write_text(&out.join("fidelity.csv"), &table)?;
    write_text(&out.join("kl.csv"), &kl.csv())?;
    let training = ckpt.training.as_ref().map(|t| (&t.config, &t.state));
    write_checkpoint(&a.checkpoint, &ckpt.model, training, Some(&basis))?;
    print!("{table}");
    println!(
        "{} frames, mean KL {:.4}, {} dims above 0.1",
        frames.len(),
        kl.mean(),
        kl.count_above(0.1)
    );
    Ok(())
}

fn transfer(a: TransferArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let wave = read_wav(&a.input)?;
    let t = timbre_transfer(&ckpt.model, &wave, a.seed)?;
    write_audio(&a.output, &t.output, a.format)?;
    print!("{}", t.kl.csv());
    println!("mean KL {}", t.kl.mean());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = match (&a.checkpoint, a.preset) {
        (Some(path), _) => read_checkpoint(path)?.model,
        (None, Some(Preset::Desk)) => Rave::new(ModelConfig::desk())?,
        (None, Some(Preset::Studio)) => Rave::new(ModelConfig::studio())?,
        (None, None) => return Err(Error::Config("give --checkpoint or --preset".into())),
    };
    let mode = match a.mode {
        Mode::Full => BenchMode::Full,
        Mode::NoMultiband => BenchMode::NoMultiband,
    };
    let report = bench_throughput(&model, mode, a.trials, a.seed)?;
    match &a.output {
        Some(path) => write_text(path, &report.csv())?,
        None => print!("{}", report.csv()),
    }
    eprintln!("{}", report.summary());
    Ok(())
}

fn synth_corpus(a: SynthArgs) -> Result<()> {
    let spec = parse_corpus_spec(&read_text(&a.spec)?)?;
    let hash = write_corpus(&spec, &a.out)?;
    println!("{} clips, spec sha256 {hash}", spec.n_clips);
    Ok(())
}
