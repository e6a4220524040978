//! Feature/waveform files, datasets and the toy corpus generator.
//!
//! A dataset directory holds `index.txt` (one utterance id per line) and per
//! utterance `<id>.feat` + `<id>.meta` (features) and `<id>.wav` (target).

use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::WaveformBuffer;
use crate::error::{NsfError, Result};
use crate::source::{derive_seed, F0Track};

pub const DEFAULT_SAMPLE_RATE: u32 = 16000;
pub const DEFAULT_FRAME_SHIFT: usize = 80;
pub const TOY_SPECTRAL_DIMS: usize = 10;
pub const INDEX_FILE: &str = "index.txt";

/// Header of a feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMeta {
    pub rows: usize,
    pub cols: usize,
    pub frame_shift: usize,
    pub sample_rate: u32,
}

impl FeatureMeta {
    fn render(&self) -> String {
        format!(
            "rows={}\ncols={}\nframe_shift={}\nsample_rate={}\n",
            self.rows, self.cols, self.frame_shift, self.sample_rate
        )
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| NsfError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let (mut rows, mut cols, mut shift, mut sr) = (None, None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            let value = value.trim();
            let num = || value.parse::<usize>().map_err(|_| bad(format!("{key}: not an integer: {value:?}")));
            match key.trim() {
                "rows" => rows = Some(num()?),
                "cols" => cols = Some(num()?),
                "frame_shift" => shift = Some(num()?),
                "sample_rate" => sr = Some(num()? as u32),
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let need = |v: Option<usize>, k: &str| v.ok_or_else(|| bad(format!("missing {k}")));
        let meta = FeatureMeta {
            rows: need(rows, "rows")?,
            cols: need(cols, "cols")?,
            frame_shift: need(shift, "frame_shift")?,
            sample_rate: sr.ok_or_else(|| bad("missing sample_rate".into()))?,
        };
        if meta.rows == 0 || meta.cols == 0 || meta.frame_shift == 0 || meta.sample_rate == 0 {
            return Err(bad("rows, cols, frame_shift and sample_rate must be positive".into()));
        }
        Ok(meta)
    }
}

/// Sidecar path: `<dir>/<stem>.meta`.
pub fn meta_path(feature_path: &Path) -> PathBuf {
    feature_path.with_extension("meta")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| NsfError::io(path, e))?;
    f.write_all(bytes).map_err(|e| NsfError::io(path, e))
}

fn f32_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn read_f32s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| NsfError::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(NsfError::Format {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a whole number of f32 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes `[F0, spectral...]` rows and the `.meta` sidecar.
pub fn write_features(path: &Path, track: &F0Track, sample_rate: u32) -> Result<()> {
    let cols = 1 + track.spectral_dims();
    let values = (0..track.frames()).flat_map(|n| {
        std::iter::once(track.f0()[n]).chain(track.spectral_row(n).iter().copied())
    });
    write_file(path, &f32_bytes(values))?;
    let meta = FeatureMeta {
        rows: track.frames(),
        cols,
        frame_shift: track.frame_shift(),
        sample_rate,
    };
    write_file(&meta_path(path), meta.render().as_bytes())
}

/// Reads a feature file written by [`write_features`].
pub fn read_features(path: &Path) -> Result<(F0Track, FeatureMeta)> {
    let mpath = meta_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| NsfError::io(&mpath, e))?;
    let meta = FeatureMeta::parse(&text, &mpath)?;
    let values = read_f32s(path)?;
    if values.len() != meta.rows * meta.cols {
        return Err(NsfError::Format {
            path: path.to_path_buf(),
            reason: format!("{} values, meta says {}x{}", values.len(), meta.rows, meta.cols),
        });
    }
    let mut f0 = Vec::with_capacity(meta.rows);
    let mut spectral = Vec::with_capacity(meta.rows * (meta.cols - 1));
    for row in values.chunks_exact(meta.cols) {
        f0.push(row[0]);
        spectral.extend_from_slice(&row[1..]);
    }
    let track = F0Track::with_features(f0, meta.frame_shift, meta.cols - 1, spectral).map_err(|e| NsfError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((track, meta))
}

/// 16-bit quantization used for every integer export.
pub fn quantize_i16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes `.wav` as 16-bit PCM mono; any other extension as raw f32.
pub fn write_waveform(path: &Path, wave: &WaveformBuffer) -> Result<()> {
    if !is_wav(path) {
        return write_file(path, &f32_bytes(wave.samples().iter().copied()));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| NsfError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &x in wave.samples() {
        w.write_sample(quantize_i16(x)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Reads a mono 16-bit `.wav` or a raw f32 file (`sample_rate` applies to
/// raw files only).
pub fn read_waveform(path: &Path, sample_rate: u32) -> Result<WaveformBuffer> {
    let bad = |reason: String| NsfError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if !is_wav(path) {
        return WaveformBuffer::new(read_f32s(path)?, sample_rate).map_err(|e| bad(e.to_string()));
    }
    let wav_err = |source| NsfError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(bad(format!(
            "expected 16-bit mono PCM, got {} channel(s) of {}-bit {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    WaveformBuffer::new(samples, spec.sample_rate).map_err(|e| bad(e.to_string()))
}

fn is_wav(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub track: F0Track,
    pub target: WaveformBuffer,
}

impl Utterance {
    pub fn new(id: impl Into<String>, track: F0Track, target: WaveformBuffer) -> Result<Self> {
        let id = id.into();
        if target.len() != track.num_samples() {
            return Err(NsfError::ShapeMismatch(format!(
                "utterance {id}: {} frames x {} shift = {} samples, target has {}",
                track.frames(),
                track.frame_shift(),
                track.num_samples(),
                target.len()
            )));
        }
        Ok(Self { id, track, target })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Self { utterances }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index).map_err(|e| NsfError::io(&index, e))?;
        let mut utterances = Vec::new();
        for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (track, meta) = read_features(&dir.join(format!("{id}.feat")))?;
            let target = read_waveform(&dir.join(format!("{id}.wav")), meta.sample_rate)?;
            if target.sample_rate() != meta.sample_rate {
                return Err(NsfError::Format {
                    path: dir.join(format!("{id}.wav")),
                    reason: format!("sample rate {} but features say {}", target.sample_rate(), meta.sample_rate),
                });
            }
            utterances.push(Utterance::new(id, track, target)?);
        }
        Ok(Self { utterances })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| NsfError::io(dir, e))?;
        let mut index = String::new();
        for u in &self.utterances {
            write_features(&dir.join(format!("{}.feat", u.id)), &u.track, u.target.sample_rate())?;
            write_waveform(&dir.join(format!("{}.wav", u.id)), &u.target)?;
            index.push_str(&u.id);
            index.push('\n');
        }
        write_file(&dir.join(INDEX_FILE), index.as_bytes())
    }
}

/// Per-utterance description of a toy voice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyVoice {
    /// Partial `k` at frequency `k f` has amplitude `gain * exp(-k f / tilt)`.
    pub tilt: f64,
    pub gain: f64,
    pub voiced_noise: f64,
    pub unvoiced_noise: f64,
}

impl ToyVoice {
    pub fn amplitude(&self, freq: f64) -> f64 {
        self.gain * (-freq / self.tilt).exp()
    }
}

/// Highest partial frequency in the toy targets.
const TOY_BAND_LIMIT: f64 = 7000.0;

/// Envelope sample points of the spectral features.
fn feature_freqs(sample_rate: u32) -> Vec<f64> {
    let nyq = sample_rate as f64 / 2.0;
    (0..TOY_SPECTRAL_DIMS)
        .map(|j| (j as f64 + 0.5) * nyq / TOY_SPECTRAL_DIMS as f64)
        .collect()
}

/// Piecewise-constant F0 in [80, 400] Hz: voiced runs of 15-40 frames
/// separated by unvoiced gaps of 4-12 frames.
fn toy_f0(frames: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut f0 = Vec::with_capacity(frames);
    let mut voiced = rng.random_bool(0.7);
    while f0.len() < frames {
        let (run, value) = if voiced {
            (rng.random_range(15..=40), rng.random_range(80.0..=400.0))
        } else {
            (rng.random_range(4..=12), 0.0)
        };
        f0.extend(std::iter::repeat_n(value, run));
        voiced = !voiced;
    }
    f0.truncate(frames);
    f0
}

/// Generates utterance `index` of a toy corpus in memory.
pub fn make_toy_utterance(index: usize, duration_s: f64, seed: u64) -> Result<Utterance> {
    let sr = DEFAULT_SAMPLE_RATE;
    let shift = DEFAULT_FRAME_SHIFT;
    let frames = (duration_s * sr as f64 / shift as f64).round() as usize;
    if frames == 0 {
        return Err(NsfError::InvalidArgument(format!("duration {duration_s} s is shorter than one frame")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
    let voice = ToyVoice {
        tilt: rng.random_range(250.0..700.0),
        gain: rng.random_range(0.2..0.35),
        voiced_noise: 0.003,
        unvoiced_noise: 0.02,
    };
    // stored values are f32, so generate from exactly what a reload sees
    let f0: Vec<f64> = toy_f0(frames, &mut rng).into_iter().map(|f| f as f32 as f64).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let fs = sr as f64;
    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(frames * shift);
    for &f in &f0 {
        for _ in 0..shift {
            phase = (phase + TAU * f / fs) % TAU;
            let n: f64 = normal.sample(&mut rng);
            let x = if f > 0.0 {
                let mut s = 0.0;
                let mut k = 1;
                while k as f64 * f < TOY_BAND_LIMIT {
                    s += voice.amplitude(k as f64 * f) * (k as f64 * phase).sin();
                    k += 1;
                }
                s + voice.voiced_noise * n
            } else {
                voice.unvoiced_noise * n
            };
            samples.push(quantize_i16(x) as f64 / 32768.0);
        }
    }

    let freqs = feature_freqs(sr);
    let mut spectral = Vec::with_capacity(frames * TOY_SPECTRAL_DIMS);
    for &f in &f0 {
        for &q in &freqs {
            let level = if f > 0.0 { voice.amplitude(q) } else { voice.unvoiced_noise };
            spectral.push(level.ln() as f32 as f64);
        }
    }
    let track = F0Track::with_features(f0, shift, TOY_SPECTRAL_DIMS, spectral)?;
    Utterance::new(format!("utt{index:04}"), track, WaveformBuffer::new(samples, sr)?)
}

/// `n` toy utterances in memory.
pub fn toy_dataset(n: usize, duration_s: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(NsfError::InvalidArgument("need at least one utterance".into()));
    }
    (0..n)
        .map(|i| make_toy_utterance(i, duration_s, seed))
        .collect::<Result<Vec<_>>>()
        .map(Dataset::new)
}

/// Writes a toy corpus to `out_dir` and returns it.
pub fn make_toy_data(n: usize, duration_s: f64, seed: u64, out_dir: &Path) -> Result<Dataset> {
    let data = toy_dataset(n, duration_s, seed)?;
    data.save(out_dir)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shapes() {
        let u = make_toy_utterance(0, 0.5, 3).unwrap();
        assert_eq!(u.track.frames(), 100);
        assert_eq!(u.target.len(), 8000);
        assert_eq!(u.track.spectral_dims(), TOY_SPECTRAL_DIMS);
        assert!(u.track.f0().iter().all(|&f| f == 0.0 || (80.0..=400.0).contains(&f)));
        assert!(u.track.f0().contains(&0.0) || u.track.f0().iter().all(|&f| f > 0.0));
    }

    #[test]
    fn meta_rejects_garbage() {
        let p = Path::new("x.meta");
        assert!(FeatureMeta::parse("rows=2\ncols=3\nframe_shift=80\n", p).is_err());
        assert!(FeatureMeta::parse("rows=2\ncols=x\nframe_shift=80\nsample_rate=1\n", p).is_err());
        assert!(FeatureMeta::parse("rows=2\ncols=3\nframe_shift=80\nsample_rate=16000\nfoo=1\n", p).is_err());
        let m = FeatureMeta::parse("rows=2\ncols=3\nframe_shift=80\nsample_rate=16000\n", p).unwrap();
        assert_eq!(FeatureMeta::parse(&m.render(), p).unwrap(), m);
    }

    #[test]
    fn quantizer_clamps() {
        assert_eq!(quantize_i16(1.0), 32767);
        assert_eq!(quantize_i16(-1.0), -32768);
        assert_eq!(quantize_i16(-2.0), -32768);
        assert_eq!(quantize_i16(0.5), 16384);
    }
}
