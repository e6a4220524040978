//! Condition module and neural filter module.
//!
//! The condition module maps each frame's `[F0, spectral features]` through a
//! tanh feedforward layer; its output stays at frame rate and every dilated
//! layer adds its own 1x1 projection of it, duplicated over the frame's
//! samples. Each filter stage lifts the incoming signal to `channels`
//! channels, runs a stack of dilated convolutions with gated activations and
//! residual connections, projects the sum of the gated outputs to `a` and
//! `b~`, and emits `e * exp(b~) + a`.

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NsfError, Result};
use crate::source::{ExcitationMode, F0Track};
use layers::{gated_activation, gated_backward, Dense, DilatedConv, Gated, Param};

/// F0 enters the condition layer in units of this many Hz.
pub const F0_INPUT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub stages: usize,
    pub layers_per_stage: usize,
    pub filter_width: usize,
    pub channels: usize,
    /// Layer `k` uses dilation `2^(k mod dilation_cycle)`.
    pub dilation_cycle: usize,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self {
            stages: 5,
            layers_per_stage: 10,
            filter_width: 3,
            channels: 64,
            dilation_cycle: 10,
        }
    }
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.layers_per_stage == 0 || self.channels == 0 || self.dilation_cycle == 0 {
            return Err(NsfError::Config("layer counts, channels and dilation cycle must be positive".into()));
        }
        if self.filter_width.is_multiple_of(2) {
            return Err(NsfError::Config(format!("filter width must be odd, got {}", self.filter_width)));
        }
        Ok(())
    }

    pub fn dilation(&self, layer: usize) -> usize {
        1 << (layer % self.dilation_cycle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BMode {
    /// `b = exp(b~)`
    #[default]
    Learned,
    /// `b = 1`: each stage is an additive residual.
    FixedOne,
    /// `b = 0`: each stage outputs `a` only.
    FixedZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSwitches {
    #[serde(default)]
    pub b_mode: BMode,
    #[serde(default)]
    pub excitation_mode: ExcitationMode,
}

/// Input sizes the parameter shapes depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// `1 + spectral_dims`
    pub cond_inputs: usize,
    pub merge_inputs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DilatedLayer {
    pub conv: DilatedConv,
    pub cond: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    /// `[channels, 1]`: lifts the scalar signal.
    pub input: Dense,
    pub layers: Vec<DilatedLayer>,
    /// `[2, channels]`: row 0 gives `a`, row 1 gives `b~`.
    pub output: Dense,
}

/// Every trainable tensor of the vocoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub condition: Dense,
    /// `[1, merge_inputs]` map of the source merge layer.
    pub merge: Dense,
    pub stages: Vec<StageParams>,
    version: u64,
}

impl ModelParams {
    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases, zero output
    /// projections (every stage starts as the identity).
    pub fn init(spec: &LayerSpec, dims: ModelDims, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.channels;
        let condition = Dense::uniform(c, dims.cond_inputs, &mut rng);
        let merge = Dense::uniform(1, dims.merge_inputs, &mut rng);
        let stages = (0..spec.stages)
            .map(|_| StageParams {
                input: Dense::uniform(c, 1, &mut rng),
                layers: (0..spec.layers_per_stage)
                    .map(|k| DilatedLayer {
                        conv: DilatedConv::uniform(2 * c, c, spec.filter_width, spec.dilation(k), &mut rng),
                        cond: Dense::uniform(2 * c, c, &mut rng),
                    })
                    .collect(),
                output: Dense::zeros(2, c),
            })
            .collect();
        Ok(Self {
            condition,
            merge,
            stages,
            version: 0,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            cond_inputs: self.condition.in_dim(),
            merge_inputs: self.merge.in_dim(),
        }
    }

    pub fn channels(&self) -> usize {
        self.condition.out_dim()
    }

    /// Incremented whenever values change through [`ModelParams::named_mut`].
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn named(&self) -> Vec<(String, &Param)> {
        let mut out = vec![
            ("condition.weight".to_string(), &self.condition.weight),
            ("condition.bias".to_string(), &self.condition.bias),
            ("merge.weight".to_string(), &self.merge.weight),
            ("merge.bias".to_string(), &self.merge.bias),
        ];
        for (s, st) in self.stages.iter().enumerate() {
            out.push((format!("stage{s}.input.weight"), &st.input.weight));
            out.push((format!("stage{s}.input.bias"), &st.input.bias));
            for (l, layer) in st.layers.iter().enumerate() {
                out.push((format!("stage{s}.layer{l}.conv.weight"), &layer.conv.weight));
                out.push((format!("stage{s}.layer{l}.conv.bias"), &layer.conv.bias));
                out.push((format!("stage{s}.layer{l}.cond.weight"), &layer.cond.weight));
                out.push((format!("stage{s}.layer{l}.cond.bias"), &layer.cond.bias));
            }
            out.push((format!("stage{s}.output.weight"), &st.output.weight));
            out.push((format!("stage{s}.output.bias"), &st.output.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.version += 1;
        let mut out = vec![
            ("condition.weight".to_string(), &mut self.condition.weight),
            ("condition.bias".to_string(), &mut self.condition.bias),
            ("merge.weight".to_string(), &mut self.merge.weight),
            ("merge.bias".to_string(), &mut self.merge.bias),
        ];
        for (s, st) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{s}.input.weight"), &mut st.input.weight));
            out.push((format!("stage{s}.input.bias"), &mut st.input.bias));
            for (l, layer) in st.layers.iter_mut().enumerate() {
                out.push((format!("stage{s}.layer{l}.conv.weight"), &mut layer.conv.weight));
                out.push((format!("stage{s}.layer{l}.conv.bias"), &mut layer.conv.bias));
                out.push((format!("stage{s}.layer{l}.cond.weight"), &mut layer.cond.weight));
                out.push((format!("stage{s}.layer{l}.cond.bias"), &mut layer.cond.bias));
            }
            out.push((format!("stage{s}.output.weight"), &mut st.output.weight));
            out.push((format!("stage{s}.output.bias"), &mut st.output.bias));
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_mut() {
            p.zero_grad();
        }
        // gradient resets do not invalidate cached forward passes
        self.version -= 1;
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, p)| p.len()).sum()
    }

    /// Flattened gradient vector in [`ModelParams::named`] order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.named().iter().flat_map(|(_, p)| p.grad.iter().copied()).collect()
    }
}

/// Condition-layer input at frame rate, `cond_inputs x frames`.
fn condition_inputs(track: &F0Track, cond_inputs: usize) -> Result<Vec<f64>> {
    let dims = track.spectral_dims();
    if dims + 1 != cond_inputs {
        return Err(NsfError::ShapeMismatch(format!(
            "model expects {} spectral features per frame, track has {dims}",
            cond_inputs - 1
        )));
    }
    let b = track.frames();
    let mut u = vec![0.0; cond_inputs * b];
    for (frame, f) in track.f0().iter().enumerate() {
        u[frame] = f / F0_INPUT_SCALE;
        for (j, v) in track.spectral_row(frame).iter().enumerate() {
            u[(j + 1) * b + frame] = *v;
        }
    }
    Ok(u)
}

/// Frame-rate condition features, `channels x frames`.
fn condition_frames(track: &F0Track, params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let u = condition_inputs(track, params.condition.in_dim())?;
    let mut c = params.condition.forward(&u, track.frames());
    c.iter_mut().for_each(|v| *v = v.tanh());
    Ok((u, c))
}

/// Condition features duplicated to sample rate, time-major `T x channels`.
pub fn condition_forward(track: &F0Track, params: &ModelParams) -> Result<Vec<f64>> {
    let (_, c) = condition_frames(track, params)?;
    let (frames, shift, ch) = (track.frames(), track.frame_shift(), params.channels());
    let mut out = Vec::with_capacity(frames * shift * ch);
    for frame in 0..frames {
        for _ in 0..shift {
            out.extend((0..ch).map(|k| c[k * frames + frame]));
        }
    }
    Ok(out)
}

/// Adds frame-rate `rows x frames` values onto a sample-rate `rows x len` block.
fn add_upsampled(z: &mut [f64], frame_vals: &[f64], rows: usize, frames: usize, shift: usize, len: usize) {
    for r in 0..rows {
        let zr = &mut z[r * len..(r + 1) * len];
        for (frame, chunk) in zr.chunks_mut(shift).enumerate().take(frames) {
            let v = frame_vals[r * frames + frame];
            chunk.iter_mut().for_each(|x| *x += v);
        }
    }
}

/// Sums a sample-rate block over each frame's samples.
fn sum_per_frame(z: &[f64], rows: usize, frames: usize, shift: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * frames];
    for r in 0..rows {
        for (frame, chunk) in z[r * len..(r + 1) * len].chunks(shift).enumerate().take(frames) {
            out[r * frames + frame] = chunk.iter().sum();
        }
    }
    out
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    gate: Gated,
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Vec<f64>,
    layers: Vec<LayerCache>,
    skip: Vec<f64>,
    b: Vec<f64>,
}

/// Intermediate values recorded by [`model_forward`] for [`model_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    len: usize,
    frames: usize,
    shift: usize,
    cond_inputs: Vec<f64>,
    cond: Vec<f64>,
    stages: Vec<StageCache>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Vec<f64>,
    /// Multiply-accumulate operations performed.
    pub macs: u64,
    pub cache: Option<ForwardCache>,
}

fn run_forward(
    track: &F0Track,
    excitation: &[f64],
    params: &ModelParams,
    switches: &AblationSwitches,
    keep_cache: bool,
) -> Result<ForwardPass> {
    let len = excitation.len();
    if len != track.num_samples() {
        return Err(NsfError::ShapeMismatch(format!(
            "excitation has {len} samples, track covers {}",
            track.num_samples()
        )));
    }
    let (frames, shift) = (track.frames(), track.frame_shift());
    let ch = params.channels();
    let (u, cond) = condition_frames(track, params)?;
    let mut macs = params.condition.macs(frames);

    let mut signal = excitation.to_vec();
    let mut stage_caches = Vec::new();
    for st in &params.stages {
        let mut x = st.input.forward(&signal, len);
        macs += st.input.macs(len);
        let mut skip = vec![0.0; ch * len];
        let mut layer_caches = Vec::new();
        for layer in &st.layers {
            let mut z = layer.conv.forward(&x, len);
            let proj = layer.cond.forward(&cond, frames);
            add_upsampled(&mut z, &proj, 2 * ch, frames, shift, len);
            macs += layer.conv.macs(len) + layer.cond.macs(frames);
            let gate = gated_activation(&z, ch, len);
            let input = keep_cache.then(|| x.clone());
            for ((xv, sv), h) in x.iter_mut().zip(skip.iter_mut()).zip(&gate.out) {
                *xv += h;
                *sv += h;
            }
            if let Some(input) = input {
                layer_caches.push(LayerCache { input, gate });
            }
        }
        let ab = st.output.forward(&skip, len);
        macs += st.output.macs(len);
        let (a, b_tilde) = ab.split_at(len);
        let b: Vec<f64> = match switches.b_mode {
            BMode::Learned => b_tilde.iter().map(|v| v.exp()).collect(),
            BMode::FixedOne => vec![1.0; len],
            BMode::FixedZero => vec![0.0; len],
        };
        let out: Vec<f64> = signal.iter().zip(&b).zip(a).map(|((e, b), a)| e * b + a).collect();
        if keep_cache {
            stage_caches.push(StageCache {
                input: std::mem::replace(&mut signal, out),
                layers: layer_caches,
                skip,
                b,
            });
        } else {
            signal = out;
        }
    }
    let cache = keep_cache.then(|| ForwardCache {
        version: params.version(),
        len,
        frames,
        shift,
        cond_inputs: u,
        cond,
        stages: stage_caches,
    });
    Ok(ForwardPass {
        output: signal,
        macs,
        cache,
    })
}

/// Runs the condition module and every filter stage on excitation `e`,
/// recording what the reverse pass needs.
pub fn model_forward(
    track: &F0Track,
    excitation: &[f64],
    params: &ModelParams,
    switches: &AblationSwitches,
) -> Result<ForwardPass> {
    run_forward(track, excitation, params, switches, true)
}

/// Forward pass without recording intermediates.
pub fn model_infer(
    track: &F0Track,
    excitation: &[f64],
    params: &ModelParams,
    switches: &AblationSwitches,
) -> Result<ForwardPass> {
    run_forward(track, excitation, params, switches, false)
}

/// Accumulates `dL/dtheta` into the gradient buffers of `params` and returns
/// `dL/de` for the excitation that entered the first stage.
pub fn model_backward(
    grad_out: &[f64],
    pass: &ForwardPass,
    params: &mut ModelParams,
    switches: &AblationSwitches,
) -> Result<Vec<f64>> {
    let cache = pass
        .cache
        .as_ref()
        .ok_or_else(|| NsfError::StaleCache("forward pass was run without a cache".into()))?;
    if cache.version != params.version() {
        return Err(NsfError::StaleCache(format!(
            "cache recorded at parameter version {}, parameters are at {}",
            cache.version,
            params.version()
        )));
    }
    if grad_out.len() != cache.len || cache.stages.len() != params.stages.len() {
        return Err(NsfError::StaleCache(format!(
            "gradient of length {} for a cached pass of length {}",
            grad_out.len(),
            cache.len
        )));
    }
    let (len, frames, shift) = (cache.len, cache.frames, cache.shift);
    let ch = params.channels();
    let mut dcond = vec![0.0; ch * frames];
    let mut dy = grad_out.to_vec();

    for (st, sc) in params.stages.iter_mut().zip(&cache.stages).rev() {
        let mut de: Vec<f64> = dy.iter().zip(&sc.b).map(|(g, b)| g * b).collect();
        let mut dab = vec![0.0; 2 * len];
        dab[..len].copy_from_slice(&dy);
        if switches.b_mode == BMode::Learned {
            for t in 0..len {
                dab[len + t] = dy[t] * sc.input[t] * sc.b[t];
            }
        }
        let dskip = st.output.backward(&sc.skip, len, &dab);
        let mut dx = vec![0.0; ch * len];
        for (layer, lc) in st.layers.iter_mut().zip(&sc.layers).rev() {
            let dh: Vec<f64> = dx.iter().zip(&dskip).map(|(a, b)| a + b).collect();
            let dz = gated_backward(&lc.gate, &dh);
            let dproj = sum_per_frame(&dz, 2 * ch, frames, shift, len);
            let dc = layer.cond.backward(&cache.cond, frames, &dproj);
            dcond.iter_mut().zip(&dc).for_each(|(a, b)| *a += b);
            let dconv = layer.conv.backward(&lc.input, len, &dz);
            dx.iter_mut().zip(&dconv).for_each(|(a, b)| *a += b);
        }
        let de_lift = st.input.backward(&sc.input, len, &dx);
        de.iter_mut().zip(&de_lift).for_each(|(a, b)| *a += b);
        dy = de;
    }

    let dpre: Vec<f64> = dcond.iter().zip(&cache.cond).map(|(g, c)| g * (1.0 - c * c)).collect();
    params.condition.backward(&cache.cond_inputs, frames, &dpre);
    Ok(dy)
}
