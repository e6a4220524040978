//! Framing, windowing, DFT/iDFT and the deframing accumulator.
//!
//! Frames are left-aligned: frame `n` (0-based) covers samples
//! `n * shift .. n * shift + M`. Samples after the last full frame are
//! dropped, which keeps [`deframe_accumulate`] the exact adjoint of
//! [`frame_and_window`]. Transforms are unnormalized in both directions.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{NsfError, Result};

/// Relative tolerance used when validating conjugate symmetry.
pub const HERMITIAN_TOL: f64 = 1e-9;

/// Default floor added inside logarithms and denominators.
pub const DEFAULT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl WaveformBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(NsfError::InvalidArgument("waveform must hold at least one sample".into()));
        }
        if sample_rate == 0 {
            return Err(NsfError::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(NsfError::InvalidArgument(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
}

/// One framing + DFT configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub dft_bins: usize,
    pub frame_len: usize,
    pub frame_shift: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl StftConfig {
    pub fn new(dft_bins: usize, frame_len: usize, frame_shift: usize) -> Result<Self> {
        let cfg = Self {
            dft_bins,
            frame_len,
            frame_shift,
            window: WindowKind::Hann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            dft_bins: k,
            frame_len: m,
            frame_shift: s,
            ..
        } = *self;
        if k < 2 || !k.is_power_of_two() {
            return Err(NsfError::InvalidArgument(format!(
                "dft_bins must be an even power of two, got {k}"
            )));
        }
        if m == 0 || m > k {
            return Err(NsfError::InvalidArgument(format!(
                "frame_len must be in 1..={k}, got {m}"
            )));
        }
        if s == 0 || s > m {
            return Err(NsfError::InvalidArgument(format!(
                "frame_shift must be in 1..={m}, got {s}"
            )));
        }
        Ok(())
    }

    /// The three multi-resolution settings used for training at 16 kHz:
    /// 20 ms / 5 ms / 120 ms frames.
    pub fn standard_set() -> [StftConfig; 3] {
        [
            StftConfig::new(512, 320, 80).unwrap(),
            StftConfig::new(128, 80, 40).unwrap(),
            StftConfig::new(2048, 1920, 640).unwrap(),
        ]
    }

    /// 5 ms frames with a 2.5 ms shift, for spectrogram inspection.
    pub fn fine_analysis(sample_rate: u32) -> Result<StftConfig> {
        let frame_len = (sample_rate as usize * 5 / 1000).max(1);
        let shift = (frame_len / 2).max(1);
        StftConfig::new(frame_len.next_power_of_two().max(2), frame_len, shift)
    }

    /// Number of full frames that fit into `len` samples.
    pub fn num_frames(&self, len: usize) -> Result<usize> {
        if len < self.frame_len {
            return Err(NsfError::InsufficientLength {
                needed: self.frame_len,
                got: len,
            });
        }
        Ok((len - self.frame_len) / self.frame_shift + 1)
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Hann => hann_window(self.frame_len).expect("validated frame_len"),
        }
    }
}

/// Row-major block of real frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub frames: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FrameSet {
    pub fn zeros(frames: usize, width: usize) -> Self {
        Self {
            frames,
            width,
            data: vec![0.0; frames * width],
        }
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.width..(n + 1) * self.width]
    }

    pub fn row_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.width..(n + 1) * self.width]
    }

    /// Keeps the first `width` entries of every row.
    pub fn truncated(&self, width: usize) -> FrameSet {
        let width = width.min(self.width);
        let mut out = FrameSet::zeros(self.frames, width);
        for n in 0..self.frames {
            out.row_mut(n).copy_from_slice(&self.row(n)[..width]);
        }
        out
    }
}

/// `frames` complex spectra of `bins` points, stored as split real/imag rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrameSet {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl SpectralFrameSet {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            re: vec![0.0; frames * bins],
            im: vec![0.0; frames * bins],
        }
    }

    pub fn re_row(&self, n: usize) -> &[f64] {
        &self.re[n * self.bins..(n + 1) * self.bins]
    }

    pub fn im_row(&self, n: usize) -> &[f64] {
        &self.im[n * self.bins..(n + 1) * self.bins]
    }

    pub fn same_shape(&self, other: &SpectralFrameSet) -> Result<()> {
        if self.frames != other.frames || self.bins != other.bins {
            return Err(NsfError::ShapeMismatch(format!(
                "spectra {}x{} vs {}x{}",
                self.frames, self.bins, other.frames, other.bins
            )));
        }
        Ok(())
    }

    /// Largest deviation from conjugate symmetry over all rows, relative to
    /// each row's peak magnitude. Returns `(row, bin, deviation)`.
    pub fn hermitian_deviation(&self) -> (usize, usize, f64) {
        let k = self.bins;
        let mut worst = (0, 0, 0.0);
        for n in 0..self.frames {
            let re = self.re_row(n);
            let im = self.im_row(n);
            let scale = re
                .iter()
                .chain(im)
                .fold(0.0f64, |acc, v| acc.max(v.abs()))
                .max(f64::MIN_POSITIVE);
            let mut check = |bin: usize, d: f64| {
                let rel = d / scale;
                if rel > worst.2 {
                    worst = (n, bin, rel);
                }
            };
            check(0, im[0].abs());
            check(k / 2, im[k / 2].abs());
            for b in 1..k / 2 {
                check(b, (re[b] - re[k - b]).abs());
                check(b, (im[b] + im[k - b]).abs());
            }
        }
        worst
    }
}

/// Periodic Hann window `0.5 - 0.5 cos(2 pi m / M)`.
pub fn hann_window(len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(NsfError::InvalidArgument("window length must be positive".into()));
    }
    let m = len as f64;
    Ok((0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / m).cos())
        .collect())
}

/// Frames `samples` with an explicit window; frame length is `window.len()`.
pub fn frame_with_window(samples: &[f64], window: &[f64], shift: usize) -> Result<FrameSet> {
    let m = window.len();
    if m == 0 || shift == 0 {
        return Err(NsfError::InvalidArgument("empty window or zero shift".into()));
    }
    if samples.len() < m {
        return Err(NsfError::InsufficientLength {
            needed: m,
            got: samples.len(),
        });
    }
    let frames = (samples.len() - m) / shift + 1;
    let mut out = FrameSet::zeros(frames, m);
    for n in 0..frames {
        let src = &samples[n * shift..n * shift + m];
        for ((dst, &x), &w) in out.row_mut(n).iter_mut().zip(src).zip(window) {
            *dst = x * w;
        }
    }
    Ok(out)
}

pub fn frame_and_window(wave: &WaveformBuffer, cfg: &StftConfig) -> Result<FrameSet> {
    cfg.validate()?;
    frame_with_window(wave.samples(), &cfg.window(), cfg.frame_shift)
}

/// Adjoint of [`frame_with_window`]: scatters per-frame gradients back onto
/// `len` samples, weighting each by the window coefficient it was framed with.
pub fn deframe_with_window(
    frame_grads: &FrameSet,
    window: &[f64],
    shift: usize,
    len: usize,
) -> Result<Vec<f64>> {
    let m = window.len();
    if frame_grads.width != m {
        return Err(NsfError::InvalidArgument(format!(
            "frame gradient width {} does not match frame length {m}",
            frame_grads.width
        )));
    }
    if len < m || shift == 0 {
        return Err(NsfError::InvalidArgument(format!(
            "cannot deframe into {len} samples with frame length {m}"
        )));
    }
    let expected = (len - m) / shift + 1;
    if frame_grads.frames != expected {
        return Err(NsfError::InvalidArgument(format!(
            "expected {expected} frames for length {len}, got {}",
            frame_grads.frames
        )));
    }
    let mut out = vec![0.0; len];
    for n in 0..frame_grads.frames {
        let dst = &mut out[n * shift..n * shift + m];
        for ((o, &g), &w) in dst.iter_mut().zip(frame_grads.row(n)).zip(window) {
            *o += g * w;
        }
    }
    Ok(out)
}

pub fn deframe_accumulate(frame_grads: &FrameSet, cfg: &StftConfig, len: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    deframe_with_window(frame_grads, &cfg.window(), cfg.frame_shift, len)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Zero-pads every frame to `dft_bins` points and takes an unnormalized DFT.
///
/// Only bins `0..=K/2` are computed; the upper half is filled by mirroring,
/// so every output row is conjugate-symmetric bit for bit.
pub fn dft_frames(frames: &FrameSet, dft_bins: usize) -> Result<SpectralFrameSet> {
    let k = dft_bins;
    if k < 2 || !k.is_multiple_of(2) {
        return Err(NsfError::InvalidArgument(format!("dft_bins must be even, got {k}")));
    }
    if frames.width > k {
        return Err(NsfError::InvalidArgument(format!(
            "frame width {} exceeds dft_bins {k}",
            frames.width
        )));
    }
    let fft = plan(k, false);
    let mut out = SpectralFrameSet::zeros(frames.frames, k);
    let mut buf = vec![Complex::new(0.0, 0.0); k];
    for n in 0..frames.frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (c, &x) in buf.iter_mut().zip(frames.row(n)) {
            c.re = x;
        }
        fft.process(&mut buf);
        let re = &mut out.re[n * k..(n + 1) * k];
        let im = &mut out.im[n * k..(n + 1) * k];
        for b in 0..=k / 2 {
            re[b] = buf[b].re;
            im[b] = buf[b].im;
        }
        im[0] = 0.0;
        im[k / 2] = 0.0;
        for b in 1..k / 2 {
            re[k - b] = re[b];
            im[k - b] = -im[b];
        }
    }
    Ok(out)
}

/// Unnormalized K-point inverse DFT of arbitrary complex rows; returns the
/// real and imaginary parts of the result, row-major.
pub fn idft_complex(spec: &SpectralFrameSet) -> (FrameSet, FrameSet) {
    let k = spec.bins;
    let fft = plan(k, true);
    let mut re_out = FrameSet::zeros(spec.frames, k);
    let mut im_out = FrameSet::zeros(spec.frames, k);
    let mut buf = vec![Complex::new(0.0, 0.0); k];
    for n in 0..spec.frames {
        for (b, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(spec.re[n * k + b], spec.im[n * k + b]);
        }
        fft.process(&mut buf);
        for (b, c) in buf.iter().enumerate() {
            re_out.data[n * k + b] = c.re;
            im_out.data[n * k + b] = c.im;
        }
    }
    (re_out, im_out)
}

/// Unnormalized inverse DFT of conjugate-symmetric rows. The result has
/// `K`-wide rows; entries past the frame length belong to the zero padding.
pub fn idft_hermitian(grad_spec: &SpectralFrameSet) -> Result<FrameSet> {
    let (row, bin, deviation) = grad_spec.hermitian_deviation();
    if deviation > HERMITIAN_TOL {
        return Err(NsfError::SymmetryViolation {
            row,
            bin,
            deviation,
        });
    }
    Ok(idft_complex(grad_spec).0)
}

/// Log power spectrogram, `frames x (K/2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.bins + bin]
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.bins..(frame + 1) * self.bins]
    }
}

pub fn spectrogram(wave: &WaveformBuffer, cfg: &StftConfig, eps: f64) -> Result<Spectrogram> {
    let frames = frame_and_window(wave, cfg)?;
    let spec = dft_frames(&frames, cfg.dft_bins)?;
    let half = cfg.dft_bins / 2 + 1;
    let mut values = Vec::with_capacity(spec.frames * half);
    for n in 0..spec.frames {
        let re = spec.re_row(n);
        let im = spec.im_row(n);
        values.extend((0..half).map(|b| (re[b] * re[b] + im[b] * im[b] + eps).ln()));
    }
    Ok(Spectrogram {
        frames: spec.frames,
        bins: half,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; k];
        let mut im = vec![0.0; k];
        for b in 0..k {
            for (m, &v) in x.iter().enumerate() {
                let ang = 2.0 * PI * (b * m % k) as f64 / k as f64;
                re[b] += v * ang.cos();
                im[b] -= v * ang.sin();
            }
        }
        (re, im)
    }

    fn single_frame(x: &[f64]) -> FrameSet {
        FrameSet {
            frames: 1,
            width: x.len(),
            data: x.to_vec(),
        }
    }

    #[test]
    fn hann_values() {
        let w = hann_window(4).unwrap();
        let expected = [0.0, 0.5, 1.0, 0.5];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((hann_window(320).unwrap()[160] - 1.0).abs() < 1e-15);
        for m in [2, 3, 80, 320, 1920] {
            let s: f64 = hann_window(m).unwrap().iter().sum();
            assert!((s - m as f64 / 2.0).abs() < 1e-9, "M={m}: {s}");
        }
        assert!(hann_window(0).is_err());
    }

    #[test]
    fn frame_counts() {
        let cfg = StftConfig::new(512, 320, 80).unwrap();
        let w = |t| WaveformBuffer::new(vec![0.5; t], 16000).unwrap();
        assert_eq!(frame_and_window(&w(320), &cfg).unwrap().frames, 1);
        assert_eq!(frame_and_window(&w(400), &cfg).unwrap().frames, 2);
        assert_eq!(frame_and_window(&w(479), &cfg).unwrap().frames, 2);
        assert!(matches!(
            frame_and_window(&w(319), &cfg),
            Err(NsfError::InsufficientLength { needed: 320, got: 319 })
        ));
    }

    #[test]
    fn dft_small_cases() {
        let cases: [([f64; 4], [f64; 4]); 3] = [
            ([1.0, 1.0, 1.0, 1.0], [4.0, 0.0, 0.0, 0.0]),
            ([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]),
            ([1.0, 0.0, -1.0, 0.0], [0.0, 2.0, 0.0, 2.0]),
        ];
        for (x, want) in cases {
            let s = dft_frames(&single_frame(&x), 4).unwrap();
            for b in 0..4 {
                assert!((s.re[b] - want[b]).abs() < 1e-12);
                assert!(s.im[b].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dft_matches_direct_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for k in [4usize, 8, 128, 512] {
            let m = (k * 3 / 4).max(1);
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = dft_frames(&single_frame(&x), k).unwrap();
            let (re, im) = naive_dft(&x, k);
            let scale = re.iter().chain(&im).fold(0.0f64, |a, v| a.max(v.abs()));
            for b in 0..k {
                assert!((s.re[b] - re[b]).abs() <= 1e-9 * scale, "K={k} bin {b}");
                assert!((s.im[b] - im[b]).abs() <= 1e-9 * scale, "K={k} bin {b}");
            }
            assert_eq!(s.hermitian_deviation().2, 0.0);
        }
    }

    #[test]
    fn idft_dc_and_symmetry_violation() {
        let mut g = SpectralFrameSet::zeros(1, 4);
        g.re[0] = 4.0;
        let b = idft_hermitian(&g).unwrap();
        assert_eq!(b.data, vec![4.0; 4]);
        g.im[0] = 0.1;
        assert!(matches!(idft_hermitian(&g), Err(NsfError::SymmetryViolation { .. })));
    }

    #[test]
    fn idft_round_trip_scales_by_k() {
        let x = [0.3, -0.7, 0.2, 0.9, -0.1];
        let s = dft_frames(&single_frame(&x), 8).unwrap();
        let back = idft_hermitian(&s).unwrap();
        for (m, &v) in x.iter().enumerate() {
            assert!((back.data[m] - 8.0 * v).abs() < 1e-12);
        }
        for m in x.len()..8 {
            assert!(back.data[m].abs() < 1e-12);
        }
    }

    #[test]
    fn deframe_overlap_counts() {
        let ones = FrameSet {
            frames: 1,
            width: 4,
            data: vec![1.0; 4],
        };
        let g = deframe_with_window(&ones, &[1.0; 4], 2, 5).unwrap();
        assert_eq!(g, vec![1.0, 1.0, 1.0, 1.0, 0.0]);

        let two = FrameSet {
            frames: 2,
            width: 4,
            data: vec![1.0; 8],
        };
        let g = deframe_with_window(&two, &[1.0; 4], 2, 6).unwrap();
        assert_eq!(g, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0]);
        assert!(deframe_with_window(&two, &[1.0; 4], 2, 9).is_err());
        assert!(deframe_with_window(&two, &[1.0; 3], 2, 6).is_err());
    }

    #[test]
    fn silent_spectrogram_is_log_eps() {
        let cfg = StftConfig::new(128, 80, 40).unwrap();
        let wave = WaveformBuffer::new(vec![0.0; 400], 16000).unwrap();
        let s = spectrogram(&wave, &cfg, DEFAULT_EPS).unwrap();
        assert_eq!(s.bins, 65);
        assert!(s.values.iter().all(|&v| v == DEFAULT_EPS.ln()));
    }

    #[test]
    fn waveform_rejects_bad_input() {
        assert!(WaveformBuffer::new(vec![], 16000).is_err());
        assert!(WaveformBuffer::new(vec![f64::NAN], 16000).is_err());
        assert!(WaveformBuffer::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::new(500, 320, 80).is_err());
        assert!(StftConfig::new(256, 320, 80).is_err());
        assert!(StftConfig::new(512, 320, 400).is_err());
        assert_eq!(StftConfig::fine_analysis(16000).unwrap(), StftConfig::new(128, 80, 40).unwrap());
    }
}
