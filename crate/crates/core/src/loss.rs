//! Spectral amplitude and phase distances and their analytic waveform
//! gradients.
//!
//! For one framing/DFT configuration the gradient of a distance with respect
//! to the generated waveform is computed in four steps: the per-bin gradient
//! `dL/dRe(y) + j dL/dIm(y)` is formed for every frame, the rows (which are
//! conjugate-symmetric) are passed through an unnormalized inverse DFT, the
//! zero-padding tail of each row is dropped, and the per-frame gradients are
//! scattered back onto the waveform through the window. Terms from several
//! configurations are simply added.

use serde::{Deserialize, Serialize};

use crate::dsp::{
    deframe_with_window, dft_frames, frame_with_window, idft_hermitian, SpectralFrameSet,
    StftConfig, WaveformBuffer, DEFAULT_EPS,
};
use crate::error::{NsfError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub configs: Vec<StftConfig>,
    pub amplitude_terms: Vec<bool>,
    pub phase_terms: Vec<bool>,
    pub eps: f64,
}

impl Default for LossConfig {
    /// Amplitude distances on all three standard resolutions, no phase terms.
    fn default() -> Self {
        Self {
            configs: StftConfig::standard_set().to_vec(),
            amplitude_terms: vec![true; 3],
            phase_terms: vec![false; 3],
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Amplitude,
    Phase,
}

/// One enabled distance: a kind applied under one STFT configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerm {
    pub kind: TermKind,
    /// Index into [`LossConfig::configs`].
    pub config: usize,
}

impl LossTerm {
    pub fn name(&self) -> String {
        match self.kind {
            TermKind::Amplitude => format!("ls{}", self.config + 1),
            TermKind::Phase => format!("lp{}", self.config + 1),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.configs.len();
        if self.amplitude_terms.len() != n || self.phase_terms.len() != n {
            return Err(NsfError::Config(format!(
                "{n} stft configs but {} amplitude and {} phase flags",
                self.amplitude_terms.len(),
                self.phase_terms.len()
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(NsfError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        for c in &self.configs {
            c.validate()?;
        }
        if self.terms().is_empty() {
            return Err(NsfError::Config("no loss term enabled".into()));
        }
        Ok(())
    }

    /// Enabled terms, amplitude terms first, each group in config order.
    pub fn terms(&self) -> Vec<LossTerm> {
        let amp = self
            .amplitude_terms
            .iter()
            .enumerate()
            .filter(|(_, on)| **on)
            .map(|(i, _)| LossTerm {
                kind: TermKind::Amplitude,
                config: i,
            });
        let phase = self
            .phase_terms
            .iter()
            .enumerate()
            .filter(|(_, on)| **on)
            .map(|(i, _)| LossTerm {
                kind: TermKind::Phase,
                config: i,
            });
        amp.chain(phase).collect()
    }

    /// Shortest waveform every enabled term can frame.
    pub fn min_length(&self) -> usize {
        self.terms()
            .iter()
            .map(|t| self.configs[t.config].frame_len)
            .max()
            .unwrap_or(1)
    }

    /// Same configuration with only the given term switched on.
    pub fn only(&self, term: LossTerm) -> LossConfig {
        let mut out = self.clone();
        out.amplitude_terms.iter_mut().for_each(|f| *f = false);
        out.phase_terms.iter_mut().for_each(|f| *f = false);
        match term.kind {
            TermKind::Amplitude => out.amplitude_terms[term.config] = true,
            TermKind::Phase => out.phase_terms[term.config] = true,
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermValue {
    pub name: String,
    pub value: f64,
    /// frames x bins summed over, for normalized reporting
    pub cells: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_term: Vec<TermValue>,
}

impl LossReport {
    fn from_terms(per_term: Vec<TermValue>) -> Self {
        let total = per_term.iter().map(|t| t.value).sum();
        Self { total, per_term }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.per_term.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// Each term divided by the number of (frame, bin) cells it sums over.
    /// Reporting only; training always uses the summed values.
    pub fn normalized_total(&self) -> f64 {
        self.per_term
            .iter()
            .map(|t| t.value / t.cells.max(1) as f64)
            .sum()
    }

    /// Multiplies every term (and the total) by `factor`.
    pub fn scale(&mut self, factor: f64) {
        self.per_term.iter_mut().for_each(|t| t.value *= factor);
        self.total = self.per_term.iter().map(|t| t.value).sum();
    }

    /// Adds another report term by term (names must line up).
    pub fn accumulate(&mut self, other: &LossReport) {
        if self.per_term.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.per_term.iter_mut().zip(&other.per_term) {
            debug_assert_eq!(a.name, b.name);
            a.value += b.value;
            a.cells += b.cells;
        }
        self.total = self.per_term.iter().map(|t| t.value).sum();
    }
}

/// Log spectral amplitude distance
/// `1/2 sum_n sum_k [log((|y|^2 + eps) / (|y_hat|^2 + eps))]^2`.
pub fn amplitude_distance(gen: &SpectralFrameSet, reference: &SpectralFrameSet, eps: f64) -> Result<f64> {
    gen.same_shape(reference)?;
    let mut sum = 0.0;
    for i in 0..gen.re.len() {
        let pg = gen.re[i] * gen.re[i] + gen.im[i] * gen.im[i] + eps;
        let pr = reference.re[i] * reference.re[i] + reference.im[i] * reference.im[i] + eps;
        let d = (pr / pg).ln();
        sum += d * d;
    }
    Ok(0.5 * sum)
}

/// Phase distance `sum_n sum_k [1 - cos(theta_hat - theta)]`, with both
/// magnitudes floored at `sqrt(eps)`.
pub fn phase_distance(gen: &SpectralFrameSet, reference: &SpectralFrameSet, eps: f64) -> Result<f64> {
    gen.same_shape(reference)?;
    let floor = eps.sqrt();
    let mut sum = 0.0;
    for i in 0..gen.re.len() {
        let (gr, gi) = (gen.re[i], gen.im[i]);
        let (rr, ri) = (reference.re[i], reference.im[i]);
        let mag_g = gr.hypot(gi).max(floor);
        let mag_r = rr.hypot(ri).max(floor);
        sum += 1.0 - (gr * rr + gi * ri) / (mag_g * mag_r);
    }
    Ok(sum)
}

/// Per-bin gradient of [`amplitude_distance`] with respect to the generated
/// spectrum, packed as `dL/dRe + j dL/dIm`.
pub fn amplitude_spectral_gradient(
    gen: &SpectralFrameSet,
    reference: &SpectralFrameSet,
    eps: f64,
) -> Result<SpectralFrameSet> {
    gen.same_shape(reference)?;
    let mut g = SpectralFrameSet::zeros(gen.frames, gen.bins);
    for i in 0..gen.re.len() {
        let pg = gen.re[i] * gen.re[i] + gen.im[i] * gen.im[i] + eps;
        let pr = reference.re[i] * reference.re[i] + reference.im[i] * reference.im[i] + eps;
        let scale = 2.0 * (pg.ln() - pr.ln()) / pg;
        g.re[i] = scale * gen.re[i];
        g.im[i] = scale * gen.im[i];
    }
    Ok(g)
}

/// Per-bin gradient of [`phase_distance`] with respect to the generated
/// spectrum.
pub fn phase_spectral_gradient(
    gen: &SpectralFrameSet,
    reference: &SpectralFrameSet,
    eps: f64,
) -> Result<SpectralFrameSet> {
    gen.same_shape(reference)?;
    let floor = eps.sqrt();
    let mut g = SpectralFrameSet::zeros(gen.frames, gen.bins);
    for i in 0..gen.re.len() {
        let (gr, gi) = (gen.re[i], gen.im[i]);
        let (rr, ri) = (reference.re[i], reference.im[i]);
        let mag_g = gr.hypot(gi);
        let mag_r = rr.hypot(ri).max(floor);
        if mag_g > floor {
            // d/dRe = -cross*Im/(|y||y_hat|^3), d/dIm = cross*Re/(|y||y_hat|^3)
            let cross = rr * gi - ri * gr;
            let denom = mag_r * mag_g * mag_g * mag_g;
            g.re[i] = -cross * gi / denom;
            g.im[i] = cross * gr / denom;
        } else {
            let denom = mag_r * floor;
            g.re[i] = -rr / denom;
            g.im[i] = -ri / denom;
        }
    }
    Ok(g)
}

/// Reference spectra computed once per target waveform.
#[derive(Debug, Clone)]
pub struct PreparedReference {
    len: usize,
    spectra: Vec<Option<SpectralFrameSet>>,
}

/// Evaluates a [`LossConfig`] against fixed reference waveforms.
#[derive(Debug, Clone)]
pub struct SpectralLoss {
    cfg: LossConfig,
    terms: Vec<LossTerm>,
    windows: Vec<Vec<f64>>,
}

impl SpectralLoss {
    pub fn new(cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        let terms = cfg.terms();
        let windows = cfg.configs.iter().map(|c| c.window()).collect();
        Ok(Self { cfg, terms, windows })
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn terms(&self) -> &[LossTerm] {
        &self.terms
    }

    fn check_length(&self, len: usize) -> Result<()> {
        let needed = self.cfg.min_length();
        if len < needed {
            return Err(NsfError::InsufficientLength { needed, got: len });
        }
        Ok(())
    }

    fn spectra(&self, wave: &WaveformBuffer, config: usize) -> Result<SpectralFrameSet> {
        let c = &self.cfg.configs[config];
        let frames = frame_with_window(wave.samples(), &self.windows[config], c.frame_shift)?;
        dft_frames(&frames, c.dft_bins)
    }

    pub fn prepare(&self, reference: &WaveformBuffer) -> Result<PreparedReference> {
        self.check_length(reference.len())?;
        let mut spectra = vec![None; self.cfg.configs.len()];
        for t in &self.terms {
            if spectra[t.config].is_none() {
                spectra[t.config] = Some(self.spectra(reference, t.config)?);
            }
        }
        Ok(PreparedReference {
            len: reference.len(),
            spectra,
        })
    }

    fn per_config_gen(&self, gen: &WaveformBuffer, reference: &PreparedReference) -> Result<Vec<Option<SpectralFrameSet>>> {
        if gen.len() != reference.len {
            return Err(NsfError::ShapeMismatch(format!(
                "generated length {} vs reference length {}",
                gen.len(),
                reference.len
            )));
        }
        let mut out = vec![None; self.cfg.configs.len()];
        for t in &self.terms {
            if out[t.config].is_none() {
                out[t.config] = Some(self.spectra(gen, t.config)?);
            }
        }
        Ok(out)
    }

    /// Loss values only.
    pub fn loss(&self, gen: &WaveformBuffer, reference: &PreparedReference) -> Result<LossReport> {
        let gen_spec = self.per_config_gen(gen, reference)?;
        let mut per_term = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let g = gen_spec[t.config].as_ref().expect("computed above");
            let r = reference.spectra[t.config].as_ref().expect("prepared");
            let value = match t.kind {
                TermKind::Amplitude => amplitude_distance(g, r, self.cfg.eps)?,
                TermKind::Phase => phase_distance(g, r, self.cfg.eps)?,
            };
            per_term.push(TermValue {
                name: t.name(),
                value,
                cells: g.frames * g.bins,
            });
        }
        Ok(LossReport::from_terms(per_term))
    }

    /// Loss values plus `dL/d gen` summed over all enabled terms.
    pub fn loss_and_gradient(
        &self,
        gen: &WaveformBuffer,
        reference: &PreparedReference,
    ) -> Result<(LossReport, Vec<f64>)> {
        let gen_spec = self.per_config_gen(gen, reference)?;
        let mut grad = vec![0.0; gen.len()];
        let mut per_term = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let c = &self.cfg.configs[t.config];
            let g = gen_spec[t.config].as_ref().expect("computed above");
            let r = reference.spectra[t.config].as_ref().expect("prepared");
            let (value, spec_grad) = match t.kind {
                TermKind::Amplitude => (
                    amplitude_distance(g, r, self.cfg.eps)?,
                    amplitude_spectral_gradient(g, r, self.cfg.eps)?,
                ),
                TermKind::Phase => (
                    phase_distance(g, r, self.cfg.eps)?,
                    phase_spectral_gradient(g, r, self.cfg.eps)?,
                ),
            };
            let frame_grads = idft_hermitian(&spec_grad)?.truncated(c.frame_len);
            let wave_grad = deframe_with_window(
                &frame_grads,
                &self.windows[t.config],
                c.frame_shift,
                gen.len(),
            )?;
            for (acc, v) in grad.iter_mut().zip(&wave_grad) {
                *acc += v;
            }
            per_term.push(TermValue {
                name: t.name(),
                value,
                cells: g.frames * g.bins,
            });
        }
        Ok((LossReport::from_terms(per_term), grad))
    }
}

/// Loss report and `dL/d gen_wave` for one generated/reference pair.
pub fn loss_and_waveform_gradient(
    gen_wave: &WaveformBuffer,
    ref_wave: &WaveformBuffer,
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<f64>)> {
    if gen_wave.len() != ref_wave.len() {
        return Err(NsfError::ShapeMismatch(format!(
            "generated length {} vs reference length {}",
            gen_wave.len(),
            ref_wave.len()
        )));
    }
    let loss = SpectralLoss::new(cfg.clone())?;
    let prepared = loss.prepare(ref_wave)?;
    loss.loss_and_gradient(gen_wave, &prepared)
}

/// Loss values only, for the same inputs as [`loss_and_waveform_gradient`].
pub fn loss_value(gen_wave: &WaveformBuffer, ref_wave: &WaveformBuffer, cfg: &LossConfig) -> Result<LossReport> {
    let loss = SpectralLoss::new(cfg.clone())?;
    let prepared = loss.prepare(ref_wave)?;
    loss.loss(gen_wave, &prepared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(rng: &mut ChaCha8Rng, frames: usize, bins: usize) -> SpectralFrameSet {
        // Conjugate-symmetric by construction: the DFT of random real frames.
        let data = (0..frames * bins).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fs = crate::dsp::FrameSet {
            frames,
            width: bins,
            data,
        };
        dft_frames(&fs, bins).unwrap()
    }

    fn scaled(s: &SpectralFrameSet, re_factor: f64, im_factor: f64, swap: bool) -> SpectralFrameSet {
        let mut out = s.clone();
        for i in 0..s.re.len() {
            let (r, im) = (s.re[i], s.im[i]);
            if swap {
                // multiply by j
                out.re[i] = -im;
                out.im[i] = r;
            } else {
                out.re[i] = r * re_factor;
                out.im[i] = im * im_factor;
            }
        }
        out
    }

    #[test]
    fn distances_vanish_on_identical_spectra() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_spec(&mut rng, 3, 16);
        assert_eq!(amplitude_distance(&y, &y, DEFAULT_EPS).unwrap(), 0.0);
        assert!(phase_distance(&y, &y, DEFAULT_EPS).unwrap().abs() < 1e-12);
        let g = amplitude_spectral_gradient(&y, &y, DEFAULT_EPS).unwrap();
        assert!(g.re.iter().chain(&g.im).all(|v| *v == 0.0));
        let g = phase_spectral_gradient(&y, &y, DEFAULT_EPS).unwrap();
        assert!(g.re.iter().chain(&g.im).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn amplitude_distance_of_scaled_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random_spec(&mut rng, 2, 8);
        let e = std::f64::consts::E;
        let y_hat = scaled(&y, e, e, false);
        let d = amplitude_distance(&y_hat, &y, DEFAULT_EPS).unwrap();
        assert!((d - 2.0 * 2.0 * 8.0).abs() < 1e-8, "{d}");
    }

    #[test]
    fn phase_distance_of_rotated_spectra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random_spec(&mut rng, 2, 8);
        let neg = scaled(&y, -1.0, -1.0, false);
        let d = phase_distance(&neg, &y, DEFAULT_EPS).unwrap();
        assert!((d - 2.0 * 16.0).abs() < 1e-9, "{d}");
        let rot = scaled(&y, 0.0, 0.0, true);
        let d = phase_distance(&rot, &y, DEFAULT_EPS).unwrap();
        assert!((d - 16.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn gradients_are_exactly_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for bins in [8, 64, 512] {
            let a = random_spec(&mut rng, 3, bins);
            let b = random_spec(&mut rng, 3, bins);
            let ga = amplitude_spectral_gradient(&a, &b, DEFAULT_EPS).unwrap();
            let gp = phase_spectral_gradient(&a, &b, DEFAULT_EPS).unwrap();
            assert_eq!(ga.hermitian_deviation().2, 0.0);
            assert_eq!(gp.hermitian_deviation().2, 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = SpectralFrameSet::zeros(2, 8);
        let b = SpectralFrameSet::zeros(3, 8);
        assert!(amplitude_distance(&a, &b, DEFAULT_EPS).is_err());
        assert!(phase_spectral_gradient(&a, &b, DEFAULT_EPS).is_err());
    }

    #[test]
    fn config_requires_a_term() {
        let mut cfg = LossConfig::default();
        cfg.amplitude_terms = vec![false; 3];
        assert!(cfg.validate().is_err());
        cfg.phase_terms[1] = true;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.terms()[0].name(), "lp2");
        assert_eq!(cfg.min_length(), 80);
    }

    #[test]
    fn loss_rejects_short_or_mismatched_waves() {
        let cfg = LossConfig::default();
        let short = WaveformBuffer::new(vec![0.1; 1000], 16000).unwrap();
        assert!(matches!(
            loss_and_waveform_gradient(&short, &short, &cfg),
            Err(NsfError::InsufficientLength { needed: 1920, .. })
        ));
        let a = WaveformBuffer::new(vec![0.1; 2000], 16000).unwrap();
        let b = WaveformBuffer::new(vec![0.1; 2001], 16000).unwrap();
        assert!(loss_and_waveform_gradient(&a, &b, &cfg).is_err());
    }
}
