use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nsf_core::dsp::{spectrogram, StftConfig, WaveformBuffer, DEFAULT_EPS};
use nsf_core::gradcheck::run_suite;
use nsf_core::source::{clean_sine, sine_excitation, upsample_f0, F0Track};
use nsf_core::train::ablation::{run_ablation, Variant};
use nsf_core::train::data::{read_features, read_waveform, write_waveform, DEFAULT_FRAME_SHIFT, DEFAULT_SAMPLE_RATE};
use nsf_core::train::{make_toy_data, train_with, Checkpoint, Dataset, TrainConfig, Vocoder};
use nsf_core::NsfError;

#[derive(Parser)]
#[command(name = "nsf", version, about = "Neural source-filter vocoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Generate a waveform from a checkpoint and a feature file.
    Synth(SynthArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train one ablation variant and report its metrics.
    Ablate(AblateArgs),
    /// Write the sine excitation for an F0 track.
    Excite(ExciteArgs),
    /// Write a toy corpus.
    MakeData(MakeDataArgs),
    /// Export a log-power spectrogram as CSV.
    Spectrogram(SpectrogramArgs),
    /// Measure generation speed.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory; defaults to `data.train` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `schedule.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `schedule.max_steps`.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Per-step loss log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fail unless the checkpoint was trained with this config's architecture.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Takes the STFT configurations from this config; defaults to the standard three.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// base, L1-L4, S1-S3, N1 or N2
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Held-out set for the metrics; defaults to the training data.
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Where to write the trained variant's checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExciteArgs {
    /// Feature file (`.feat` with `.meta`) or text file of per-frame F0 values.
    #[arg(long)]
    f0: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Noise-free sine (zero where unvoiced).
    #[arg(long)]
    no_noise: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial phase in radians.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    phase: f64,
    /// Frame shift for text F0 files.
    #[arg(long, default_value_t = DEFAULT_FRAME_SHIFT)]
    frame_shift: usize,
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Seconds per utterance.
    #[arg(long, default_value_t = 0.5)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpectrogramArgs {
    #[arg(long)]
    wav: PathBuf,
    /// `dft_bins,frame_len,frame_shift`; defaults to 5 ms frames with a 2.5 ms shift.
    #[arg(long)]
    cfg: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Seconds of audio per utterance.
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    /// Constant F0 of the benchmark track.
    #[arg(long, default_value_t = 200.0)]
    f0: f64,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Verification(String),
    Runtime(NsfError),
}

impl From<NsfError> for Failure {
    fn from(e: NsfError) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Excite(a) => cmd_excite(a),
        Command::MakeData(a) => cmd_make_data(a),
        Command::Spectrogram(a) => cmd_spectrogram(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), NsfError> {
    fs::write(path, text).map_err(|source| NsfError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.schedule.seed = seed;
    }
    if a.max_steps.is_some() {
        cfg.schedule.max_steps = a.max_steps;
    }
    let dir = a
        .data
        .or_else(|| cfg.data.train.clone())
        .ok_or_else(|| NsfError::Config("no dataset: pass --data or set data.train".into()))?;
    let data = Dataset::load(&dir)?;
    let mut log = String::from("step,epoch,utterance,total,grad_norm\n");
    let outcome = train_with(Vocoder::new(cfg)?, &data, &mut |r| {
        let _ = writeln!(log, "{},{},{},{},{}", r.step, r.epoch, r.utterance, r.report.total, r.grad_norm);
    })?;
    for e in &outcome.epochs {
        println!("epoch {} steps {} mean_loss {:.6}", e.epoch, e.steps, e.mean_total());
    }
    if let Some(path) = a.log {
        write_text(&path, &log)?;
    }
    outcome.checkpoint.save(&a.out)?;
    println!("wrote {} after {} steps", a.out.display(), outcome.checkpoint.step);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    if let Some(path) = a.config {
        let cfg = TrainConfig::load(&path)?;
        let arch = |c: &TrainConfig| (c.layers.clone(), c.switches, c.features.clone(), c.source.num_harmonics);
        if arch(&cfg) != arch(&ckpt.config) {
            return Err(NsfError::CheckpointMismatch(format!(
                "{} describes a different architecture than {}",
                path.display(),
                a.ckpt.display()
            ))
            .into());
        }
    }
    let (track, _) = read_features(&a.features)?;
    let out = Vocoder::from_checkpoint(ckpt)?.synthesize(&track, a.seed)?;
    write_waveform(&a.out, &out.wave)?;
    println!(
        "wrote {} samples to {} ({} forward pass)",
        out.wave.len(),
        a.out.display(),
        out.forward_passes
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let configs = match a.config {
        Some(path) => TrainConfig::load(&path)?.loss.configs,
        None => StftConfig::standard_set().to_vec(),
    };
    let results = run_suite(&configs, a.seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<44} rel_err {:.3e} tol {:.0e} {verdict}", r.name, r.rel_error, r.tolerance);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failed.join(", ")))
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: NsfError| e.to_string())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let variant = a.variant;
    let cfg = TrainConfig::load(&a.config)?;
    let data = Dataset::load(&a.data)?;
    let heldout = match &a.heldout {
        Some(dir) => Dataset::load(dir)?,
        None => data.clone(),
    };
    let row = run_ablation(&cfg, variant, &data, &heldout)?;
    println!("variant,description,train_loss,heldout_loss,periodicity,inter_harmonic,flatness");
    println!(
        "{},{},{},{},{},{},{}",
        variant.id(),
        variant.description(),
        row.final_train_loss,
        row.heldout.total,
        row.metrics.periodicity,
        row.metrics.inter_harmonic,
        row.metrics.flatness
    );
    if let Some(out) = a.out {
        let (config, params) = row.vocoder.into_parts();
        Checkpoint::new(config, params, 0, cfg.schedule.seed)?.save(&out)?;
    }
    Ok(())
}

fn read_f0_track(path: &Path, frame_shift: usize) -> Result<F0Track, NsfError> {
    if path.extension().is_some_and(|e| e == "feat") {
        return Ok(read_features(path)?.0);
    }
    let text = fs::read_to_string(path).map_err(|source| NsfError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let f0 = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| NsfError::Format {
                path: path.to_path_buf(),
                reason: format!("not a number: {t:?}"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    F0Track::new(f0, frame_shift)
}

fn cmd_excite(a: ExciteArgs) -> CmdResult {
    let track = read_f0_track(&a.f0, a.frame_shift)?;
    let cfg = nsf_core::source::SourceConfig::default();
    let f = upsample_f0(&track);
    let samples = if a.no_noise {
        if let Some(bad) = f.iter().find(|&&v| v >= cfg.nyquist()) {
            return Err(NsfError::InvalidArgument(format!("F0 {bad} Hz is at or above Nyquist")).into());
        }
        clean_sine(&f, &cfg, a.phase, 1.0)
    } else {
        sine_excitation(&f, &cfg, a.phase, a.seed)?
    };
    let wave = WaveformBuffer::new(samples, cfg.sample_rate)?;
    write_waveform(&a.out, &wave)?;
    println!("wrote {} samples to {}", wave.len(), a.out.display());
    Ok(())
}

fn cmd_make_data(a: MakeDataArgs) -> CmdResult {
    let data = make_toy_data(a.n, a.duration, a.seed, &a.out)?;
    println!("wrote {} utterances to {}", data.len(), a.out.display());
    Ok(())
}

fn parse_stft(spec: &str) -> Result<StftConfig, NsfError> {
    let parts = spec
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| NsfError::InvalidArgument(format!("--cfg expects K,M,shift, got {spec:?}")))?;
    match parts[..] {
        [k, m, s] => StftConfig::new(k, m, s),
        _ => Err(NsfError::InvalidArgument(format!("--cfg expects K,M,shift, got {spec:?}"))),
    }
}

fn cmd_spectrogram(a: SpectrogramArgs) -> CmdResult {
    let wave = read_waveform(&a.wav, DEFAULT_SAMPLE_RATE)?;
    let cfg = match &a.cfg {
        Some(s) => parse_stft(s)?,
        None => StftConfig::fine_analysis(wave.sample_rate())?,
    };
    let spec = spectrogram(&wave, &cfg, DEFAULT_EPS)?;
    let mut csv = String::from("frame,bin,log_amp\n");
    for n in 0..spec.frames {
        for (b, v) in spec.row(n).iter().enumerate() {
            let _ = writeln!(csv, "{n},{b},{v}");
        }
    }
    write_text(&a.out, &csv)?;
    println!("wrote {} frames x {} bins to {}", spec.frames, spec.bins, a.out.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let vocoder = Vocoder::from_checkpoint(Checkpoint::load(&a.ckpt)?)?;
    let cfg = vocoder.config();
    let shift = cfg.features.frame_shift;
    let frames = ((a.seconds * cfg.source.sample_rate as f64) / shift as f64).round().max(1.0) as usize;
    let dims = cfg.features.spectral_dims;
    let track = F0Track::with_features(vec![a.f0; frames], shift, dims, vec![0.0; frames * dims])?;
    let mut best = f64::INFINITY;
    let mut passes = 0;
    for r in 0..a.repeats.max(1) {
        let start = Instant::now();
        let out = vocoder.synthesize(&track, a.seed.wrapping_add(r as u64))?;
        best = best.min(start.elapsed().as_secs_f64());
        passes = out.forward_passes;
    }
    let samples = frames * shift;
    println!("samples {samples}");
    println!("forward_passes_per_utterance {passes}");
    println!("seconds {best:.6}");
    println!("samples_per_second {:.1}", samples as f64 / best.max(1e-9));
    Ok(())
}
