//! Training loop, evaluation and synthesis entry points.

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::Dataset;
use super::optim::Optimizer;
use super::vocoder::{streams, SourceInputs, Synthesis, Vocoder};
use crate::dsp::WaveformBuffer;
use crate::error::{NsfError, Result};
use crate::loss::{LossConfig, LossReport, PreparedReference, SpectralLoss};
use crate::source::{derive_seed, F0Track};

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 0-based index of the update this loss was measured before.
    pub step: usize,
    pub epoch: usize,
    pub utterance: String,
    pub report: LossReport,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Term values summed over the epoch's steps.
    pub report: LossReport,
}

impl EpochRecord {
    pub fn mean_total(&self) -> f64 {
        self.report.total / self.steps.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Per-utterance inputs that stay fixed across epochs.
struct Prepared {
    inputs: SourceInputs,
    reference: PreparedReference,
}

fn check_dataset(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(NsfError::InvalidArgument("dataset is empty".into()));
    }
    let needed = cfg.loss.min_length();
    for u in &data.utterances {
        if u.target.len() < needed {
            return Err(NsfError::InsufficientLength {
                needed,
                got: u.target.len(),
            });
        }
        if u.target.sample_rate() != cfg.source.sample_rate {
            return Err(NsfError::Config(format!(
                "utterance {} is at {} Hz, config expects {}",
                u.id,
                u.target.sample_rate(),
                cfg.source.sample_rate
            )));
        }
    }
    Ok(())
}

fn prepare(vocoder: &Vocoder, loss: &SpectralLoss, data: &Dataset, seed: u64) -> Result<Vec<Prepared>> {
    data.utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let inputs = vocoder.training_inputs(
                &u.track,
                &u.target,
                derive_seed(seed, streams::UTT_NOISE + i as u64),
                derive_seed(seed, streams::UTT_PHASE + i as u64),
            )?;
            Ok(Prepared {
                inputs,
                reference: loss.prepare(&u.target)?,
            })
        })
        .collect()
}

fn output_wave(samples: Vec<f64>, sample_rate: u32, step: usize) -> Result<WaveformBuffer> {
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(NsfError::Diverged { step, loss: *bad });
    }
    WaveformBuffer::new(samples, sample_rate)
}

/// Trains from freshly initialized parameters.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(Vocoder::new(cfg.clone())?, data, &mut |_| {})
}

/// Trains `vocoder` in place, one utterance per update in dataset order,
/// calling `on_step` after every update.
pub fn train_with(mut vocoder: Vocoder, data: &Dataset, on_step: &mut dyn FnMut(&StepRecord)) -> Result<TrainOutcome> {
    let cfg = vocoder.config().clone();
    cfg.validate()?;
    check_dataset(&cfg, data)?;
    let loss = SpectralLoss::new(cfg.loss.clone())?;
    let seed = cfg.schedule.seed;
    let prepared = prepare(&vocoder, &loss, data, seed)?;
    let sr = cfg.source.sample_rate;
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let max_steps = cfg.schedule.max_steps.unwrap_or(usize::MAX);

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    'epochs: for epoch in 0..cfg.schedule.epochs {
        let mut epoch_report = LossReport::default();
        let mut epoch_steps = 0;
        for (u, p) in data.utterances.iter().zip(&prepared) {
            if steps.len() >= max_steps {
                break;
            }
            let step = steps.len();
            let ex = vocoder.excitation(&p.inputs)?;
            let pass = vocoder.forward(&u.track, &ex.merged)?;
            let gen = output_wave(pass.output.clone(), sr, step)?;
            let (report, grad) = loss.loss_and_gradient(&gen, &p.reference)?;
            if !report.total.is_finite() {
                return Err(NsfError::Diverged {
                    step,
                    loss: report.total,
                });
            }
            vocoder.params_mut().zero_grads();
            vocoder.backward(&grad, &pass, &ex)?;
            let info = {
                let mut named = vocoder.params_mut().named_mut();
                let mut params: Vec<_> = named.iter_mut().map(|(_, p)| &mut **p).collect();
                opt.step(&mut params).map_err(|e| match e {
                    NsfError::Diverged { loss, .. } => NsfError::Diverged { step, loss },
                    other => other,
                })?
            };
            epoch_report.accumulate(&report);
            epoch_steps += 1;
            let record = StepRecord {
                step,
                epoch,
                utterance: u.id.clone(),
                report,
                grad_norm: info.grad_norm,
            };
            on_step(&record);
            steps.push(record);
        }
        if epoch_steps > 0 {
            epochs.push(EpochRecord {
                epoch,
                steps: epoch_steps,
                report: epoch_report,
            });
        }
        if steps.len() >= max_steps {
            break 'epochs;
        }
    }
    let (config, params) = vocoder.into_parts();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(config, params, steps.len() as u64, seed)?,
        steps,
        epochs,
    })
}

/// Mean per-utterance loss with training-time excitation (best phase,
/// fixed per-utterance noise).
pub fn evaluate(vocoder: &Vocoder, data: &Dataset) -> Result<LossReport> {
    evaluate_with(vocoder, data, &vocoder.config().loss)
}

/// [`evaluate`] under a different loss config.
pub fn evaluate_with(vocoder: &Vocoder, data: &Dataset, loss_cfg: &LossConfig) -> Result<LossReport> {
    let cfg = vocoder.config();
    check_dataset(cfg, data)?;
    let loss = SpectralLoss::new(loss_cfg.clone())?;
    if data.utterances.iter().any(|u| u.target.len() < loss_cfg.min_length()) {
        return Err(NsfError::InsufficientLength {
            needed: loss_cfg.min_length(),
            got: data.utterances.iter().map(|u| u.target.len()).min().unwrap_or(0),
        });
    }
    let prepared = prepare(vocoder, &loss, data, cfg.schedule.seed)?;
    let mut total = LossReport::default();
    for (u, p) in data.utterances.iter().zip(&prepared) {
        let ex = vocoder.excitation(&p.inputs)?;
        let pass = vocoder.infer(&u.track, &ex.merged)?;
        let gen = output_wave(pass.output, cfg.source.sample_rate, 0)?;
        total.accumulate(&loss.loss(&gen, &p.reference)?);
    }
    total.scale(1.0 / data.len() as f64);
    Ok(total)
}

/// Generates a waveform from a checkpoint with random phase and noise from `seed`.
pub fn synthesize(ckpt: &Checkpoint, track: &F0Track, seed: u64) -> Result<Synthesis> {
    Vocoder::from_checkpoint(ckpt.clone())?.synthesize(track, seed)
}
