//! Objective measures on generated audio: periodicity at the F0 lag,
//! inter-harmonic energy, spectral flatness and a pitch estimator.

use crate::dsp::{dft_frames, hann_window, spectrogram, FrameSet, StftConfig, WaveformBuffer};
use crate::error::Result;
use crate::source::F0Track;

/// A run of frames with the same nonzero F0, in samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoicedSegment {
    pub start: usize,
    pub len: usize,
    pub f0: f64,
}

impl VoicedSegment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

pub fn voiced_segments(track: &F0Track) -> Vec<VoicedSegment> {
    let shift = track.frame_shift();
    let mut out: Vec<VoicedSegment> = Vec::new();
    let mut prev = 0.0;
    for (n, &f) in track.f0().iter().enumerate() {
        if f > 0.0 {
            match out.last_mut() {
                Some(seg) if f == prev && seg.start + seg.len == n * shift => seg.len += shift,
                _ => out.push(VoicedSegment {
                    start: n * shift,
                    len: shift,
                    f0: f,
                }),
            }
        }
        prev = f;
    }
    out
}

/// Mean-removed normalized autocorrelation at `lag`.
pub fn normalized_autocorr(x: &[f64], lag: usize) -> f64 {
    if lag >= x.len() {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let (a, b) = (&x[..x.len() - lag], &x[lag..]);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (u, v) in a.iter().zip(b) {
        let (u, v) = (u - mean, v - mean);
        ab += u * v;
        aa += u * u;
        bb += v * v;
    }
    if aa <= 0.0 || bb <= 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// Length-weighted mean over voiced segments of the peak normalized
/// autocorrelation within one sample of the F0 lag. `None` when no segment
/// spans at least two periods.
pub fn periodicity(wave: &[f64], track: &F0Track, sample_rate: u32) -> Option<f64> {
    let (mut acc, mut weight) = (0.0, 0.0);
    for seg in voiced_segments(track) {
        let lag = (sample_rate as f64 / seg.f0).round() as usize;
        if seg.len < 2 * (lag + 1) || seg.start + seg.len > wave.len() {
            continue;
        }
        let x = &wave[seg.range()];
        let peak = (lag.saturating_sub(1).max(1)..=lag + 1)
            .map(|l| normalized_autocorr(x, l))
            .fold(f64::NEG_INFINITY, f64::max);
        acc += peak * seg.len as f64;
        weight += seg.len as f64;
    }
    (weight > 0.0).then(|| acc / weight)
}

/// Autocorrelation pitch estimate with parabolic peak refinement. Picks the
/// shortest lag whose correlation is within 10% of the maximum.
pub fn estimate_f0(x: &[f64], sample_rate: u32, fmin: f64, fmax: f64) -> Option<f64> {
    let fs = sample_rate as f64;
    let lo = (fs / fmax).floor().max(2.0) as usize;
    let hi = (fs / fmin).ceil() as usize;
    if hi + 1 >= x.len() || lo >= hi {
        return None;
    }
    let r: Vec<f64> = (lo - 1..=hi + 1).map(|l| normalized_autocorr(x, l)).collect();
    let inner = 1..r.len() - 1;
    let top = inner.clone().map(|i| r[i]).fold(f64::NEG_INFINITY, f64::max);
    if top <= 0.0 {
        return None;
    }
    let i = inner.clone().find(|&i| r[i] >= 0.9 * top && r[i] >= r[i - 1] && r[i] >= r[i + 1])?;
    let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
    let denom = a - 2.0 * b + c;
    let delta = if denom < 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    let lag = (lo - 1 + i) as f64 + delta;
    Some(fs / lag)
}

/// Ratio of mean power between harmonics to mean power on harmonics, over
/// voiced segments (each analyzed as one Hann-windowed frame). Higher means
/// more energy between partials.
pub fn inter_harmonic_ratio(wave: &[f64], track: &F0Track, sample_rate: u32) -> Option<f64> {
    let fs = sample_rate as f64;
    let top = 0.45 * fs;
    let (mut on, mut on_n, mut off, mut off_n) = (0.0, 0usize, 0.0, 0usize);
    for seg in voiced_segments(track) {
        if seg.start + seg.len > wave.len() {
            continue;
        }
        let m = seg.len;
        let resolution = fs / m as f64;
        let near = resolution;
        let far = (2.5 * resolution).max(0.3 * seg.f0);
        if far >= 0.5 * seg.f0 {
            continue;
        }
        let k = (2 * m).next_power_of_two();
        let win = hann_window(m).ok()?;
        let frame: Vec<f64> = wave[seg.range()].iter().zip(&win).map(|(x, w)| x * w).collect();
        let spec = dft_frames(
            &FrameSet {
                frames: 1,
                width: m,
                data: frame,
            },
            k,
        )
        .ok()?;
        for b in 0..=k / 2 {
            let freq = b as f64 * fs / k as f64;
            if freq < 0.5 * seg.f0 || freq > top {
                continue;
            }
            let d = (freq - (freq / seg.f0).round() * seg.f0).abs();
            let p = spec.re[b] * spec.re[b] + spec.im[b] * spec.im[b];
            if d <= near {
                on += p;
                on_n += 1;
            } else if d >= far {
                off += p;
                off_n += 1;
            }
        }
    }
    (on_n > 0 && off_n > 0 && on > 0.0).then(|| (off / off_n as f64) / (on / on_n as f64))
}

/// Mean over frames of geometric / arithmetic mean of the power spectrum.
pub fn spectral_flatness(wave: &WaveformBuffer, cfg: &StftConfig) -> Result<f64> {
    let eps = 1e-12;
    let spec = spectrogram(wave, cfg, eps)?;
    let mut acc = 0.0;
    for n in 0..spec.frames {
        // values are ln(|Y|^2 + eps)
        let row = spec.row(n);
        let geo = (row.iter().sum::<f64>() / row.len() as f64).exp();
        let arith = row.iter().map(|v| v.exp()).sum::<f64>() / row.len() as f64;
        acc += geo / arith;
    }
    Ok(acc / spec.frames as f64)
}

/// Bin with the largest power averaged over all frames.
pub fn dominant_bin(wave: &WaveformBuffer, cfg: &StftConfig) -> Result<usize> {
    let spec = spectrogram(wave, cfg, 1e-12)?;
    let mut power = vec![0.0; spec.bins];
    for n in 0..spec.frames {
        for (p, v) in power.iter_mut().zip(spec.row(n)) {
            *p += v.exp();
        }
    }
    Ok(power
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn sine(f: f64, n: usize) -> Vec<f64> {
        (0..n).map(|t| (TAU * f * t as f64 / 16000.0).sin()).collect()
    }

    #[test]
    fn segments_split_on_f0_changes() {
        let track = F0Track::new(vec![0.0, 100.0, 100.0, 150.0, 0.0, 150.0], 10).unwrap();
        let segs = voiced_segments(&track);
        assert_eq!(segs.len(), 3);
        assert_eq!((segs[0].start, segs[0].len), (10, 20));
        assert_eq!((segs[1].start, segs[1].len), (30, 10));
        assert_eq!(segs[2].start, 50);
    }

    #[test]
    fn pitch_of_sines() {
        for f in [80.0, 123.4, 200.0, 399.0] {
            let est = estimate_f0(&sine(f, 2000), 16000, 70.0, 450.0).unwrap();
            assert!((est - f).abs() / f < 0.005, "{f} -> {est}");
        }
    }

    #[test]
    fn sine_is_periodic_noise_is_not() {
        let track = F0Track::new(vec![200.0; 20], 80).unwrap();
        assert!(periodicity(&sine(200.0, 1600), &track, 16000).unwrap() > 0.99);
        let mut s = 1u64;
        let noise: Vec<f64> = (0..1600)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        assert!(periodicity(&noise, &track, 16000).unwrap() < 0.2);
    }

    #[test]
    fn harmonic_signal_has_little_inter_harmonic_energy() {
        let track = F0Track::new(vec![200.0; 20], 80).unwrap();
        let clean: Vec<f64> = (0..1600)
            .map(|t| (1..10).map(|k| (TAU * 200.0 * k as f64 * t as f64 / 16000.0).sin() / k as f64).sum())
            .collect();
        let clicks: Vec<f64> = (0..1600).map(|t| if t % 37 == 0 { 1.0 } else { 0.0 }).collect();
        let a = inter_harmonic_ratio(&clean, &track, 16000).unwrap();
        let b = inter_harmonic_ratio(&clicks, &track, 16000).unwrap();
        assert!(a < 1e-3 && b > 10.0 * a, "{a} {b}");
    }
}
