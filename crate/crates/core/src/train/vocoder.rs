//! Source module + filter network bound to a training config.

use std::cell::Cell;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{model_dims, Checkpoint};
use super::config::TrainConfig;
use crate::dsp::WaveformBuffer;
use crate::error::{NsfError, Result};
use crate::filter::{model_backward, model_forward, model_infer, ForwardPass, ModelParams};
use crate::source::{
    best_phase_search, derive_seed, excitation_components, merge_backward, merge_excitation, upsample_f0,
    ExcitationSignal, F0Track,
};

/// Stream ids for [`derive_seed`].
pub mod streams {
    pub const PARAMS: u64 = 0x5041_5241;
    pub const UTT_NOISE: u64 = 0x4e4f_0000;
    pub const UTT_PHASE: u64 = 0x5048_0000;
    pub const GEN_NOISE: u64 = 0x474e_0001;
    pub const GEN_PHASE: u64 = 0x4750_0001;
}

/// Pre-merge excitation inputs and the initial phase they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceInputs {
    pub base: Vec<f64>,
    pub harmonics: Vec<Vec<f64>>,
    pub phase: f64,
}

/// Generated audio plus instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub wave: WaveformBuffer,
    /// Network forward passes spent on this utterance.
    pub forward_passes: u64,
    pub macs: u64,
}

#[derive(Debug, Clone)]
pub struct Vocoder {
    config: TrainConfig,
    params: ModelParams,
    passes: Cell<u64>,
}

fn random_phase(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).random_range(-PI..PI)
}

impl Vocoder {
    /// Fresh parameters seeded from the schedule seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = derive_seed(config.schedule.seed, streams::PARAMS);
        let params = ModelParams::init(&config.layers, model_dims(&config), seed)?;
        Ok(Self {
            config,
            params,
            passes: Cell::new(0),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.check_shapes()?;
        Ok(Self {
            config: ckpt.config,
            params: ckpt.params,
            passes: Cell::new(0),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_parts(self) -> (TrainConfig, ModelParams) {
        (self.config, self.params)
    }

    /// Total network forward passes run by this vocoder.
    pub fn forward_passes(&self) -> u64 {
        self.passes.get()
    }

    /// Rejects tracks whose layout differs from what the model was built for.
    pub fn check_track(&self, track: &F0Track) -> Result<()> {
        let f = &self.config.features;
        if track.spectral_dims() != f.spectral_dims || track.frame_shift() != f.frame_shift {
            return Err(NsfError::CheckpointMismatch(format!(
                "model expects {} spectral dims at frame shift {}, features have {} at {}",
                f.spectral_dims,
                f.frame_shift,
                track.spectral_dims(),
                track.frame_shift()
            )));
        }
        Ok(())
    }

    /// Training-time inputs: best phase against `target` when the mode uses
    /// it, otherwise a phase drawn from `phase_seed`.
    pub fn training_inputs(
        &self,
        track: &F0Track,
        target: &WaveformBuffer,
        noise_seed: u64,
        phase_seed: u64,
    ) -> Result<SourceInputs> {
        self.check_track(track)?;
        let f = upsample_f0(track);
        let mode = self.config.switches.excitation_mode;
        let phase = if mode.uses_best_phase() {
            best_phase_search(&f, target, &self.config.source)?.phase
        } else {
            random_phase(phase_seed)
        };
        let (base, harmonics) = excitation_components(&f, &self.config.source, mode, phase, noise_seed)?;
        Ok(SourceInputs { base, harmonics, phase })
    }

    /// Generation-time inputs: random phase and noise, both from `seed`.
    pub fn generation_inputs(&self, track: &F0Track, seed: u64) -> Result<SourceInputs> {
        self.check_track(track)?;
        let f = upsample_f0(track);
        let phase = random_phase(derive_seed(seed, streams::GEN_PHASE));
        let noise_seed = derive_seed(seed, streams::GEN_NOISE);
        let mode = self.config.switches.excitation_mode;
        let (base, harmonics) = excitation_components(&f, &self.config.source, mode, phase, noise_seed)?;
        Ok(SourceInputs { base, harmonics, phase })
    }

    pub fn excitation(&self, inputs: &SourceInputs) -> Result<ExcitationSignal> {
        let merge = &self.params.merge;
        let merged = merge_excitation(&inputs.base, &inputs.harmonics, &merge.weight.value, merge.bias.value[0])?;
        Ok(ExcitationSignal {
            base: inputs.base.clone(),
            harmonics: inputs.harmonics.clone(),
            merged,
        })
    }

    /// Forward pass that records a cache for [`Vocoder::backward`].
    pub fn forward(&self, track: &F0Track, excitation: &[f64]) -> Result<ForwardPass> {
        self.passes.set(self.passes.get() + 1);
        model_forward(track, excitation, &self.params, &self.config.switches)
    }

    pub fn infer(&self, track: &F0Track, excitation: &[f64]) -> Result<ForwardPass> {
        self.passes.set(self.passes.get() + 1);
        model_infer(track, excitation, &self.params, &self.config.switches)
    }

    /// Accumulates gradients of every parameter, merge layer included.
    pub fn backward(&mut self, grad_out: &[f64], pass: &ForwardPass, excitation: &ExcitationSignal) -> Result<()> {
        let de = model_backward(grad_out, pass, &mut self.params, &self.config.switches)?;
        let (dw, db) = merge_backward(&excitation.base, &excitation.harmonics, &excitation.merged, &de);
        let merge = &mut self.params.merge;
        merge.weight.grad.iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
        merge.bias.grad[0] += db;
        Ok(())
    }

    /// One parallel forward pass over the whole track; output clamped to [-1, 1].
    pub fn synthesize(&self, track: &F0Track, seed: u64) -> Result<Synthesis> {
        let before = self.forward_passes();
        let inputs = self.generation_inputs(track, seed)?;
        let ex = self.excitation(&inputs)?;
        let pass = self.infer(track, &ex.merged)?;
        let samples = pass.output.iter().map(|v| v.clamp(-1.0, 1.0)).collect::<Vec<_>>();
        if samples.iter().any(|v| v.is_nan()) {
            return Err(NsfError::InvalidArgument("model produced NaN samples".into()));
        }
        Ok(Synthesis {
            wave: WaveformBuffer::new(samples, self.config.source.sample_rate)?,
            forward_passes: self.forward_passes() - before,
            macs: pass.macs,
        })
    }
}
