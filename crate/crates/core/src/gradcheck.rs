//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{StftConfig, WaveformBuffer};
use crate::error::Result;
use crate::filter::{model_backward, model_forward, AblationSwitches, BMode, LayerSpec, ModelDims, ModelParams};
use crate::loss::{loss_and_waveform_gradient, loss_value, LossConfig, LossTerm, TermKind};
use crate::source::{derive_seed, F0Track, SourceConfig};
use crate::train::{data::Utterance, FeatureSpec, TrainConfig, Vocoder};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// `||analytic - numeric|| / ||numeric||`
    pub rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance
    }
}

pub fn relative_l2(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum();
    let norm: f64 = numeric.iter().map(|b| b * b).sum();
    diff.sqrt() / norm.sqrt().max(f64::MIN_POSITIVE)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for each `i` in `indices`.
pub fn central_differences(
    x: &mut [f64],
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x)?;
        x[i] = orig - h;
        let minus = f(x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

pub fn gaussian(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Signal length for checking `cfg`: 1024 samples, or two frames when a
/// frame is longer than that.
pub fn check_length(cfg: &StftConfig) -> usize {
    1024.max(cfg.frame_len + cfg.frame_shift)
}

/// Single-term loss gradient over every sample of a random signal pair.
pub fn loss_gradient_check(cfg: StftConfig, kind: TermKind, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = check_length(&cfg);
    let mut gen = gaussian(len, 0.3, &mut rng);
    let reference = WaveformBuffer::new(gaussian(len, 0.3, &mut rng), 16000)?;
    let loss_cfg = LossConfig {
        configs: vec![cfg],
        amplitude_terms: vec![kind == TermKind::Amplitude],
        phase_terms: vec![kind == TermKind::Phase],
        ..LossConfig::default()
    };
    let (_, analytic) = loss_and_waveform_gradient(&WaveformBuffer::new(gen.clone(), 16000)?, &reference, &loss_cfg)?;
    let all: Vec<usize> = (0..len).collect();
    let numeric = central_differences(&mut gen, &all, FD_STEP, |x| {
        Ok(loss_value(&WaveformBuffer::new(x.to_vec(), 16000)?, &reference, &loss_cfg)?.total)
    })?;
    let label = match kind {
        TermKind::Amplitude => "amplitude",
        TermKind::Phase => "phase",
    };
    Ok(CheckResult {
        name: format!("{label} distance {}/{}/{}", cfg.dft_bins, cfg.frame_len, cfg.frame_shift),
        rel_error: relative_l2(&analytic, &numeric),
        tolerance: 1e-4,
        coordinates: len,
    })
}

fn small_spec() -> LayerSpec {
    LayerSpec {
        stages: 2,
        layers_per_stage: 3,
        filter_width: 3,
        channels: 4,
        dilation_cycle: 10,
    }
}

/// Randomizes the zero-initialized output projections so every path carries gradient.
fn randomize_outputs(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    for st in &mut params.stages {
        for v in st.output.weight.value.iter_mut().chain(st.output.bias.value.iter_mut()) {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

fn random_track(frames: usize, shift: usize, dims: usize, rng: &mut ChaCha8Rng) -> Result<F0Track> {
    let f0 = (0..frames)
        .map(|n| if n % 5 == 4 { 0.0 } else { rng.random_range(80.0..400.0) })
        .collect();
    let spectral = gaussian(frames * dims, 1.0, rng);
    F0Track::with_features(f0, shift, dims, spectral)
}

/// Filter network with loss `sum(o^2) / 2` (T = 64, C = 4): every parameter
/// and the excitation input.
pub fn model_gradient_check(b_mode: BMode, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        cond_inputs: 3,
        merge_inputs: 1,
    };
    let mut params = ModelParams::init(&small_spec(), dims, derive_seed(seed, 1))?;
    randomize_outputs(&mut params, &mut rng);
    let switches = AblationSwitches {
        b_mode,
        ..AblationSwitches::default()
    };
    let track = random_track(8, 8, 2, &mut rng)?;
    let e = gaussian(64, 0.5, &mut rng);
    let objective = |p: &ModelParams, e: &[f64]| -> Result<f64> {
        let out = model_forward(&track, e, p, &switches)?.output;
        Ok(out.iter().map(|v| v * v).sum::<f64>() / 2.0)
    };

    let pass = model_forward(&track, &e, &params, &switches)?;
    params.zero_grads();
    let de = model_backward(&pass.output, &pass, &mut params, &switches)?;
    let mut analytic = params.flat_grads();
    analytic.extend_from_slice(&de);

    let mut numeric = Vec::with_capacity(analytic.len());
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for name in &names {
        let len = params.named().into_iter().find(|(n, _)| n == name).map(|(_, p)| p.len()).unwrap_or(0);
        for i in 0..len {
            let probe = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                if let Some((_, t)) = p.named_mut().into_iter().find(|(n, _)| n == name) {
                    t.value[i] += delta;
                }
                objective(&p, &e)
            };
            numeric.push((probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP));
        }
    }
    let all: Vec<usize> = (0..e.len()).collect();
    numeric.extend(central_differences(&mut e.clone(), &all, FD_STEP, |x| objective(&params, x))?);
    Ok(CheckResult {
        name: format!("filter network sum(o^2)/2, b {b_mode:?}"),
        rel_error: relative_l2(&analytic, &numeric),
        tolerance: 1e-5,
        coordinates: numeric.len(),
    })
}

/// Source merge layer, filter network and the first amplitude distance:
/// every merge-layer coordinate plus 10 random others.
pub fn end_to_end_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrainConfig {
        loss: LossConfig::default().only(LossTerm {
            kind: TermKind::Amplitude,
            config: 0,
        }),
        layers: small_spec(),
        source: SourceConfig {
            num_harmonics: 3,
            ..SourceConfig::default()
        },
        features: FeatureSpec {
            spectral_dims: 2,
            frame_shift: 80,
        },
        ..TrainConfig::default()
    };
    let mut vocoder = Vocoder::new(cfg.clone())?;
    randomize_outputs(vocoder.params_mut(), &mut rng);
    let track = random_track(8, 80, 2, &mut rng)?;
    let target = WaveformBuffer::new(gaussian(640, 0.1, &mut rng), 16000)?;
    let utt = Utterance::new("probe", track, target)?;
    let inputs = vocoder.training_inputs(&utt.track, &utt.target, 11, 12)?;

    let loss_of = |v: &Vocoder| -> Result<(f64, Vec<f64>)> {
        let ex = v.excitation(&inputs)?;
        let out = v.forward(&utt.track, &ex.merged)?.output;
        let (report, grad) = loss_and_waveform_gradient(&WaveformBuffer::new(out, 16000)?, &utt.target, &cfg.loss)?;
        Ok((report.total, grad))
    };

    let ex = vocoder.excitation(&inputs)?;
    let pass = vocoder.forward(&utt.track, &ex.merged)?;
    let (_, grad) = loss_and_waveform_gradient(&WaveformBuffer::new(pass.output.clone(), 16000)?, &utt.target, &cfg.loss)?;
    vocoder.params_mut().zero_grads();
    vocoder.backward(&grad, &pass, &ex)?;
    let flat = vocoder.params().flat_grads();

    let merge_start = vocoder.params().condition.weight.len() + vocoder.params().condition.bias.len();
    let merge_len = vocoder.params().merge.weight.len() + 1;
    let mut picks: Vec<usize> = (merge_start..merge_start + merge_len).collect();
    picks.extend((0..10).map(|_| rng.random_range(0..flat.len())));
    let analytic: Vec<f64> = picks.iter().map(|&i| flat[i]).collect();
    let mut numeric = Vec::with_capacity(picks.len());
    for &flat_index in &picks {
        let probe = |delta: f64| -> Result<f64> {
            let mut v = vocoder.clone();
            let mut offset = 0;
            for (_, p) in v.params_mut().named_mut() {
                if flat_index < offset + p.len() {
                    p.value[flat_index - offset] += delta;
                    break;
                }
                offset += p.len();
            }
            Ok(loss_of(&v)?.0)
        };
        numeric.push((probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP));
    }
    Ok(CheckResult {
        name: "merge + filter + ls1, merge layer and 10 parameters".into(),
        rel_error: relative_l2(&analytic, &numeric),
        tolerance: 1e-4,
        coordinates: picks.len(),
    })
}

/// Every check: both distances on each of `configs`, the filter network in
/// each `b` mode, and the end-to-end chain.
pub fn run_suite(configs: &[StftConfig], seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        for (j, kind) in [TermKind::Amplitude, TermKind::Phase].into_iter().enumerate() {
            out.push(loss_gradient_check(*c, kind, derive_seed(seed, (2 * i + j) as u64))?);
        }
    }
    for (i, mode) in [BMode::Learned, BMode::FixedOne, BMode::FixedZero].into_iter().enumerate() {
        out.push(model_gradient_check(mode, derive_seed(seed, 100 + i as u64))?);
    }
    out.push(end_to_end_check(derive_seed(seed, 200))?);
    Ok(out)
}
