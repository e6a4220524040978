//! Ablation variants: loss subsets (L*), excitation (S*) and the
//! transformation scale `b` (N*).

use std::fmt;
use std::str::FromStr;

use super::config::TrainConfig;
use super::data::Dataset;
use super::trainer::{evaluate_with, train};
use super::vocoder::Vocoder;
use crate::dsp::StftConfig;
use crate::error::{NsfError, Result};
use crate::filter::BMode;
use crate::loss::LossReport;
use crate::metrics::{inter_harmonic_ratio, periodicity, spectral_flatness};
use crate::source::ExcitationMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Base,
    L1,
    L2,
    L3,
    L4,
    S1,
    S2,
    S3,
    N1,
    N2,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Base,
        Variant::L1,
        Variant::L2,
        Variant::L3,
        Variant::L4,
        Variant::S1,
        Variant::S2,
        Variant::S3,
        Variant::N1,
        Variant::N2,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::L1 => "L1",
            Variant::L2 => "L2",
            Variant::L3 => "L3",
            Variant::L4 => "L4",
            Variant::S1 => "S1",
            Variant::S2 => "S2",
            Variant::S3 => "S3",
            Variant::N1 => "N1",
            Variant::N2 => "N2",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            Variant::Base => "all three amplitude distances",
            Variant::L1 => "without the third amplitude distance",
            Variant::L2 => "without the second amplitude distance",
            Variant::L3 => "first amplitude distance only",
            Variant::L4 => "amplitude and phase distances",
            Variant::S1 => "no harmonics",
            Variant::S2 => "no harmonics, random initial phase",
            Variant::S3 => "noise-only excitation",
            Variant::N1 => "b fixed to 1",
            Variant::N2 => "b fixed to 0",
        }
    }

    /// The base config with this variant's changes applied.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let amp = |on: [bool; 3]| on.to_vec();
        match self {
            Variant::Base => {}
            Variant::L1 => cfg.loss.amplitude_terms = amp([true, true, false]),
            Variant::L2 => cfg.loss.amplitude_terms = amp([true, false, true]),
            Variant::L3 => cfg.loss.amplitude_terms = amp([true, false, false]),
            Variant::L4 => {
                cfg.loss.amplitude_terms = amp([true, true, true]);
                cfg.loss.phase_terms = amp([true, true, true]);
            }
            Variant::S1 => cfg.switches.excitation_mode = ExcitationMode::NoHarmonics,
            Variant::S2 => cfg.switches.excitation_mode = ExcitationMode::NoHarmonicsNoPhase,
            Variant::S3 => cfg.switches.excitation_mode = ExcitationMode::NoiseOnly,
            Variant::N1 => cfg.switches.b_mode = BMode::FixedOne,
            Variant::N2 => cfg.switches.b_mode = BMode::FixedZero,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = NsfError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| NsfError::UnknownVariant(s.to_string()))
    }
}

/// Objective measures averaged over held-out utterances synthesized with
/// random phase and noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudioMetrics {
    pub periodicity: f64,
    pub inter_harmonic: f64,
    pub flatness: f64,
}

pub fn audio_metrics(vocoder: &Vocoder, data: &Dataset, seed: u64) -> Result<AudioMetrics> {
    let flat_cfg = StftConfig::standard_set()[0];
    let sr = vocoder.config().source.sample_rate;
    let (mut per, mut per_n, mut inter, mut inter_n, mut flat) = (0.0, 0, 0.0, 0, 0.0);
    for (i, u) in data.utterances.iter().enumerate() {
        let out = vocoder.synthesize(&u.track, seed.wrapping_add(i as u64))?;
        let x = out.wave.samples();
        if let Some(p) = periodicity(x, &u.track, sr) {
            per += p;
            per_n += 1;
        }
        if let Some(r) = inter_harmonic_ratio(x, &u.track, sr) {
            inter += r;
            inter_n += 1;
        }
        flat += spectral_flatness(&out.wave, &flat_cfg)?;
    }
    let mean = |v: f64, n: usize| if n > 0 { v / n as f64 } else { f64::NAN };
    Ok(AudioMetrics {
        periodicity: mean(per, per_n),
        inter_harmonic: mean(inter, inter_n),
        flatness: mean(flat, data.len()),
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    /// The variant's own training loss, mean over the last epoch.
    pub final_train_loss: f64,
    /// Held-out loss under the base loss config, so rows compare directly.
    pub heldout: LossReport,
    pub metrics: AudioMetrics,
    pub vocoder: Vocoder,
}

/// Trains `variant` on `train_data` and scores it on `heldout`.
pub fn run_ablation(base: &TrainConfig, variant: Variant, train_data: &Dataset, heldout: &Dataset) -> Result<AblationRow> {
    let cfg = variant.apply(base);
    let outcome = train(&cfg, train_data)?;
    let final_train_loss = outcome.epochs.last().map(|e| e.mean_total()).unwrap_or(f64::NAN);
    let vocoder = Vocoder::from_checkpoint(outcome.checkpoint)?;
    let heldout_loss = evaluate_with(&vocoder, heldout, &base.loss)?;
    let metrics = audio_metrics(&vocoder, heldout, base.schedule.seed)?;
    Ok(AblationRow {
        variant,
        final_train_loss,
        heldout: heldout_loss,
        metrics,
        vocoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_ids() {
        assert_eq!("l3".parse::<Variant>().unwrap(), Variant::L3);
        assert_eq!("S3".parse::<Variant>().unwrap(), Variant::S3);
        assert!(matches!("L5".parse::<Variant>(), Err(NsfError::UnknownVariant(_))));
    }

    #[test]
    fn deltas() {
        let base = TrainConfig::default();
        assert_eq!(Variant::L3.apply(&base).loss.amplitude_terms, vec![true, false, false]);
        assert_eq!(Variant::S3.apply(&base).switches.excitation_mode, ExcitationMode::NoiseOnly);
        assert_eq!(Variant::N1.apply(&base).switches.b_mode, BMode::FixedOne);
        assert_eq!(Variant::L4.apply(&base).loss.phase_terms, vec![true; 3]);
        assert_eq!(Variant::Base.apply(&base), base);
    }
}
