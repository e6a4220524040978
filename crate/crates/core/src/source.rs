//! Sine-based excitation: F0 upsampling, noisy sine with voiced/unvoiced
//! switching, best initial phase search, harmonic stack and the merge layer.

use std::f64::consts::{PI, TAU};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::WaveformBuffer;
use crate::error::{NsfError, Result};

/// Frame-rate F0 track (Hz, 0 = unvoiced) with optional spectral features.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    f0: Vec<f64>,
    frame_shift: usize,
    spectral_dims: usize,
    /// row-major `frames x spectral_dims`
    spectral: Vec<f64>,
}

impl F0Track {
    pub fn new(f0: Vec<f64>, frame_shift: usize) -> Result<Self> {
        Self::with_features(f0, frame_shift, 0, Vec::new())
    }

    pub fn with_features(f0: Vec<f64>, frame_shift: usize, spectral_dims: usize, spectral: Vec<f64>) -> Result<Self> {
        if f0.is_empty() {
            return Err(NsfError::InvalidArgument("F0 track is empty".into()));
        }
        if frame_shift == 0 {
            return Err(NsfError::InvalidArgument("frame shift must be positive".into()));
        }
        if let Some(i) = f0.iter().position(|f| !f.is_finite() || *f < 0.0) {
            return Err(NsfError::InvalidArgument(format!("F0 at frame {i} is {}", f0[i])));
        }
        if spectral.len() != f0.len() * spectral_dims {
            return Err(NsfError::ShapeMismatch(format!(
                "{} spectral values for {} frames x {spectral_dims} dims",
                spectral.len(),
                f0.len()
            )));
        }
        if spectral.iter().any(|v| !v.is_finite()) {
            return Err(NsfError::InvalidArgument("spectral features must be finite".into()));
        }
        Ok(Self {
            f0,
            frame_shift,
            spectral_dims,
            spectral,
        })
    }

    pub fn f0(&self) -> &[f64] {
        &self.f0
    }

    pub fn frames(&self) -> usize {
        self.f0.len()
    }

    pub fn frame_shift(&self) -> usize {
        self.frame_shift
    }

    pub fn spectral_dims(&self) -> usize {
        self.spectral_dims
    }

    pub fn spectral_row(&self, frame: usize) -> &[f64] {
        &self.spectral[frame * self.spectral_dims..(frame + 1) * self.spectral_dims]
    }

    /// Number of waveform samples this track covers.
    pub fn num_samples(&self) -> usize {
        self.f0.len() * self.frame_shift
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Standard deviation of the additive Gaussian noise.
    pub sigma: f64,
    /// Sine amplitude.
    pub alpha: f64,
    pub num_harmonics: usize,
    pub sample_rate: u32,
    /// Number of uniformly spaced candidates for the best-phase search.
    pub phase_grid: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            sigma: 0.003,
            alpha: 0.1,
            num_harmonics: 7,
            sample_rate: 16000,
            phase_grid: 64,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(NsfError::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(NsfError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.sample_rate == 0 || self.phase_grid == 0 {
            return Err(NsfError::Config("sample_rate and phase_grid must be positive".into()));
        }
        Ok(())
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }
}

/// What the source module feeds into the merge layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcitationMode {
    /// Sine plus harmonics, best phase during training.
    #[default]
    Full,
    /// Single sine, best phase during training.
    NoHarmonics,
    /// Single sine with a random phase in training and generation.
    NoHarmonicsNoPhase,
    /// Gaussian noise only.
    NoiseOnly,
}

impl ExcitationMode {
    /// Number of signals entering the merge layer.
    pub fn merge_inputs(&self, num_harmonics: usize) -> usize {
        match self {
            ExcitationMode::Full => num_harmonics + 1,
            _ => 1,
        }
    }

    pub fn uses_best_phase(&self) -> bool {
        matches!(self, ExcitationMode::Full | ExcitationMode::NoHarmonics)
    }
}

/// Base signal, harmonics and the merged excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationSignal {
    pub base: Vec<f64>,
    pub harmonics: Vec<Vec<f64>>,
    pub merged: Vec<f64>,
}

impl ExcitationSignal {
    /// Inputs of the merge layer in order: base first, then harmonics.
    pub fn components(&self) -> impl Iterator<Item = &[f64]> {
        std::iter::once(self.base.as_slice()).chain(self.harmonics.iter().map(|h| h.as_slice()))
    }
}

/// Derives an independent stream seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_noise(len: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated positive");
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

/// Repeats each frame's F0 over its `frame_shift` samples.
pub fn upsample_f0(track: &F0Track) -> Vec<f64> {
    track
        .f0()
        .iter()
        .flat_map(|&f| std::iter::repeat_n(f, track.frame_shift()))
        .collect()
}

/// Noise-free sine at `multiplier * f_t`: `alpha sin(sum_{k<=t} 2 pi m f_k / fs + phi)`
/// where voiced and below Nyquist, 0 elsewhere.
pub fn clean_sine(f: &[f64], cfg: &SourceConfig, phi: f64, multiplier: f64) -> Vec<f64> {
    let fs = cfg.sample_rate as f64;
    let nyq = cfg.nyquist();
    let mut phase = 0.0f64;
    f.iter()
        .map(|&ft| {
            let freq = multiplier * ft;
            phase = (phase + TAU * freq / fs) % TAU;
            if ft > 0.0 && freq < nyq {
                cfg.alpha * (phase + phi).sin()
            } else {
                0.0
            }
        })
        .collect()
}

fn noisy_sine(f: &[f64], cfg: &SourceConfig, phi: f64, multiplier: f64, seed: u64) -> Vec<f64> {
    let nyq = cfg.nyquist();
    let clean = clean_sine(f, cfg, phi, multiplier);
    let noise = gaussian_noise(f.len(), cfg.sigma, seed);
    let unvoiced_gain = 1.0 / (3.0 * cfg.sigma);
    f.iter()
        .zip(clean)
        .zip(noise)
        .map(|((&ft, s), n)| {
            if ft > 0.0 && multiplier * ft < nyq {
                s + n
            } else {
                n * unvoiced_gain
            }
        })
        .collect()
}

fn check_nyquist(f: &[f64], cfg: &SourceConfig) -> Result<()> {
    let nyquist = cfg.nyquist();
    match f.iter().position(|&ft| !(ft >= 0.0 && ft < nyquist)) {
        Some(index) => Err(NsfError::Aliasing {
            index,
            freq: f[index],
            nyquist,
        }),
        None => Ok(()),
    }
}

/// The base excitation `e<0>`: noisy sine where voiced, `n_t / (3 sigma)`
/// where unvoiced. The phase keeps accumulating through unvoiced samples.
pub fn sine_excitation(f: &[f64], cfg: &SourceConfig, phi: f64, noise_seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_nyquist(f, cfg)?;
    Ok(noisy_sine(f, cfg, phi, 1.0, noise_seed))
}

/// Harmonic `h` (1-based) runs at `(h + 1) f_t`; samples at or above Nyquist
/// fall back to unvoiced noise for that harmonic.
pub fn harmonic_stack(f: &[f64], cfg: &SourceConfig, phi: f64, noise_seed: u64) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    check_nyquist(f, cfg)?;
    Ok((1..=cfg.num_harmonics)
        .map(|h| noisy_sine(f, cfg, phi, (h + 1) as f64, derive_seed(noise_seed, h as u64)))
        .collect())
}

/// Pure noise excitation, the unvoiced branch applied to every sample.
pub fn noise_excitation(len: usize, cfg: &SourceConfig, noise_seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let gain = 1.0 / (3.0 * cfg.sigma);
    Ok(gaussian_noise(len, cfg.sigma, noise_seed)
        .into_iter()
        .map(|n| n * gain)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSearch {
    pub phase: f64,
    pub correlation: f64,
    /// Set when the target or the sine has zero variance; `phase` is then 0.
    pub degenerate: bool,
}

/// Candidate `i` of an `n`-point grid: `-pi + 2 pi i / n`.
pub fn phase_candidate(i: usize, n: usize) -> f64 {
    -PI + TAU * i as f64 / n as f64
}

/// Picks the grid phase maximizing the Pearson correlation between the
/// noise-free base sine and `target`. Ties go to the smallest grid index.
pub fn best_phase_search(f: &[f64], target: &WaveformBuffer, cfg: &SourceConfig) -> Result<PhaseSearch> {
    cfg.validate()?;
    check_nyquist(f, cfg)?;
    let o = target.samples();
    if o.len() != f.len() {
        return Err(NsfError::ShapeMismatch(format!(
            "F0 covers {} samples but target has {}",
            f.len(),
            o.len()
        )));
    }
    let degenerate = PhaseSearch {
        phase: 0.0,
        correlation: 0.0,
        degenerate: true,
    };

    // e(phi) = s cos(phi) + c sin(phi) with s = alpha sin(theta), c = alpha cos(theta),
    // so every candidate's correlation follows from a handful of moments.
    let s = clean_sine(f, cfg, 0.0, 1.0);
    let c = clean_sine(f, cfg, PI / 2.0, 1.0);
    let n = o.len() as f64;
    let mean = |x: &[f64]| x.iter().sum::<f64>() / n;
    let (ms, mc, mo) = (mean(&s), mean(&c), mean(o));
    let (mut vss, mut vcc, mut vsc, mut vso, mut vco, mut voo) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for t in 0..o.len() {
        let (ds, dc, d_o) = (s[t] - ms, c[t] - mc, o[t] - mo);
        vss += ds * ds;
        vcc += dc * dc;
        vsc += ds * dc;
        vso += ds * d_o;
        vco += dc * d_o;
        voo += d_o * d_o;
    }
    if voo <= 0.0 || vss + vcc <= 0.0 {
        return Ok(degenerate);
    }

    let mut best: Option<(usize, f64)> = None;
    for i in 0..cfg.phase_grid {
        let phi = phase_candidate(i, cfg.phase_grid);
        let (cp, sp) = (phi.cos(), phi.sin());
        let cov = cp * vso + sp * vco;
        let var_e = cp * cp * vss + sp * sp * vcc + 2.0 * sp * cp * vsc;
        let corr = if var_e > 0.0 { cov / (var_e * voo).sqrt() } else { 0.0 };
        if best.is_none_or(|(_, b)| corr > b) {
            best = Some((i, corr));
        }
    }
    let (i, correlation) = best.expect("phase_grid > 0");
    Ok(PhaseSearch {
        phase: phase_candidate(i, cfg.phase_grid),
        correlation,
        degenerate: false,
    })
}

/// Builds the pre-merge components for the given mode.
pub fn excitation_components(
    f: &[f64],
    cfg: &SourceConfig,
    mode: ExcitationMode,
    phi: f64,
    noise_seed: u64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    match mode {
        ExcitationMode::NoiseOnly => Ok((noise_excitation(f.len(), cfg, noise_seed)?, Vec::new())),
        ExcitationMode::Full => Ok((
            sine_excitation(f, cfg, phi, noise_seed)?,
            harmonic_stack(f, cfg, phi, noise_seed)?,
        )),
        ExcitationMode::NoHarmonics | ExcitationMode::NoHarmonicsNoPhase => {
            Ok((sine_excitation(f, cfg, phi, noise_seed)?, Vec::new()))
        }
    }
}

/// Trainable `(H + 1) -> 1` linear map followed by tanh.
pub fn merge_excitation(base: &[f64], harmonics: &[Vec<f64>], weights: &[f64], bias: f64) -> Result<Vec<f64>> {
    if weights.len() != harmonics.len() + 1 {
        return Err(NsfError::ShapeMismatch(format!(
            "{} merge weights for {} inputs",
            weights.len(),
            harmonics.len() + 1
        )));
    }
    if let Some(h) = harmonics.iter().find(|h| h.len() != base.len()) {
        return Err(NsfError::ShapeMismatch(format!(
            "harmonic of length {} vs base of length {}",
            h.len(),
            base.len()
        )));
    }
    let mut pre = vec![bias; base.len()];
    let inputs = std::iter::once(base).chain(harmonics.iter().map(|h| h.as_slice()));
    for (w, x) in weights.iter().zip(inputs) {
        for (p, v) in pre.iter_mut().zip(x) {
            *p += w * v;
        }
    }
    Ok(pre.into_iter().map(f64::tanh).collect())
}

/// Gradients of the merge layer given `dL/de` and the merged output.
/// Returns `(dL/dweights, dL/dbias)`.
pub fn merge_backward(
    base: &[f64],
    harmonics: &[Vec<f64>],
    merged: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, f64) {
    let pre_grad: Vec<f64> = merged
        .iter()
        .zip(grad_out)
        .map(|(e, g)| g * (1.0 - e * e))
        .collect();
    let inputs = std::iter::once(base).chain(harmonics.iter().map(|h| h.as_slice()));
    let weight_grads = inputs
        .map(|x| x.iter().zip(&pre_grad).map(|(a, b)| a * b).sum())
        .collect();
    (weight_grads, pre_grad.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SourceConfig {
        SourceConfig {
            sigma: 1e-12,
            ..SourceConfig::default()
        }
    }

    #[test]
    fn upsampling_duplicates_frames() {
        let t = F0Track::new(vec![100.0, 0.0], 80).unwrap();
        let f = upsample_f0(&t);
        assert_eq!(f.len(), 160);
        assert!(f[..80].iter().all(|&v| v == 100.0));
        assert!(f[80..].iter().all(|&v| v == 0.0));
        assert_eq!(upsample_f0(&F0Track::new(vec![220.0], 1).unwrap()), vec![220.0]);
        assert!(F0Track::new(vec![], 80).is_err());
        assert!(F0Track::new(vec![-1.0], 80).is_err());
    }

    #[test]
    fn sine_closed_form_sample() {
        let f = vec![100.0; 200];
        let e = sine_excitation(&f, &quiet(), 0.0, 1).unwrap();
        // 1-based t = 40 is a quarter period.
        assert!((e[39] - 0.1).abs() < 1e-9, "{}", e[39]);
    }

    #[test]
    fn sine_rejects_aliasing() {
        let cfg = SourceConfig::default();
        assert!(matches!(
            sine_excitation(&[100.0, 8000.0], &cfg, 0.0, 0),
            Err(NsfError::Aliasing { index: 1, .. })
        ));
    }

    #[test]
    fn excitation_is_deterministic() {
        let f: Vec<f64> = (0..500).map(|t| if t < 250 { 150.0 } else { 0.0 }).collect();
        let cfg = SourceConfig::default();
        assert_eq!(
            harmonic_stack(&f, &cfg, 0.4, 9).unwrap(),
            harmonic_stack(&f, &cfg, 0.4, 9).unwrap()
        );
        assert_ne!(
            sine_excitation(&f, &cfg, 0.4, 9).unwrap(),
            sine_excitation(&f, &cfg, 0.4, 10).unwrap()
        );
    }

    #[test]
    fn harmonic_at_nyquist_is_noise() {
        let cfg = SourceConfig::default();
        let f = vec![1000.0; 4000];
        let h = harmonic_stack(&f, &cfg, 0.0, 3).unwrap();
        assert_eq!(h.len(), 7);
        // Harmonic 7 runs at 8 kHz: pure unvoiced noise with std 1/3.
        let noise = gaussian_noise(4000, cfg.sigma, derive_seed(3, 7));
        for (a, n) in h[6].iter().zip(noise) {
            assert!((a - n / (3.0 * cfg.sigma)).abs() < 1e-12);
        }
        // Harmonic 6 (7 kHz) is still a sine.
        let clean = clean_sine(&f, &cfg, 0.0, 7.0);
        assert!(clean.iter().any(|v| v.abs() > 0.09));
    }

    #[test]
    fn unvoiced_track_gives_noise_harmonics() {
        let cfg = SourceConfig::default();
        let f = vec![0.0; 1000];
        for h in harmonic_stack(&f, &cfg, 0.0, 1).unwrap() {
            let std = (h.iter().map(|v| v * v).sum::<f64>() / 1000.0).sqrt();
            assert!(std > 0.25 && std < 0.42, "{std}");
        }
    }

    #[test]
    fn best_phase_handles_degenerate_targets() {
        let cfg = SourceConfig::default();
        let f = vec![100.0; 800];
        let zero = WaveformBuffer::new(vec![0.0; 800], 16000).unwrap();
        let r = best_phase_search(&f, &zero, &cfg).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.phase, 0.0);
    }

    #[test]
    fn best_phase_inverted_target() {
        let cfg = SourceConfig::default();
        let f = vec![100.0; 800];
        let neg: Vec<f64> = clean_sine(&f, &cfg, 0.0, 1.0).iter().map(|v| -v).collect();
        let r = best_phase_search(&f, &WaveformBuffer::new(neg, 16000).unwrap(), &cfg).unwrap();
        let step = TAU / cfg.phase_grid as f64;
        assert!(PI - r.phase.abs() <= step, "{}", r.phase);
        assert!(!r.degenerate);
    }

    #[test]
    fn merge_identity_and_zero() {
        let base: Vec<f64> = (0..50).map(|t| 0.01 * (t as f64 * 0.3).sin()).collect();
        let harm = vec![vec![0.02; 50], vec![-0.01; 50]];
        let e = merge_excitation(&base, &harm, &[1.0, 0.0, 0.0], 0.0).unwrap();
        for (a, b) in e.iter().zip(&base) {
            assert!((a - b).abs() <= b.abs().powi(3) / 3.0 + 1e-18);
        }
        let z = merge_excitation(&base, &harm, &[0.0; 3], 0.0).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(merge_excitation(&base, &harm, &[0.0; 2], 0.0).is_err());
    }

    #[test]
    fn merge_gradient_matches_finite_differences() {
        let base: Vec<f64> = (0..40).map(|t| (t as f64 * 0.7).sin()).collect();
        let harm = vec![(0..40).map(|t| (t as f64 * 1.3).cos()).collect::<Vec<_>>()];
        let w = [0.4, -0.3];
        let b = 0.1;
        // loss = sum(e * r) for a fixed random-ish r
        let r: Vec<f64> = (0..40).map(|t| ((t * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let loss = |w: &[f64], b: f64| -> f64 {
            merge_excitation(&base, &harm, w, b)
                .unwrap()
                .iter()
                .zip(&r)
                .map(|(e, r)| e * r)
                .sum()
        };
        let e = merge_excitation(&base, &harm, &w, b).unwrap();
        let (gw, gb) = merge_backward(&base, &harm, &e, &r);
        let h = 1e-6;
        for i in 0..2 {
            let mut wp = w;
            let mut wm = w;
            wp[i] += h;
            wm[i] -= h;
            let fd = (loss(&wp, b) - loss(&wm, b)) / (2.0 * h);
            assert!((fd - gw[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "w{i}: {fd} vs {}", gw[i]);
        }
        let fd = (loss(&w, b + h) - loss(&w, b - h)) / (2.0 * h);
        assert!((fd - gb).abs() <= 1e-6 * fd.abs().max(1e-3));
    }
}
