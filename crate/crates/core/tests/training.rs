use std::path::PathBuf;

use nsf_core::dsp::StftConfig;
use nsf_core::loss::loss_and_waveform_gradient;
use nsf_core::metrics::dominant_bin;
use nsf_core::source::{derive_seed, F0Track};
use nsf_core::train::vocoder::streams;
use nsf_core::train::*;
use nsf_core::NsfError;

fn smoke() -> TrainConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    TrainConfig::load(&path).unwrap()
}

fn short(cfg: &mut TrainConfig, epochs: usize, steps: usize) {
    cfg.schedule.epochs = epochs;
    cfg.schedule.max_steps = Some(steps);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut cfg = smoke();
    cfg.optimizer.learning_rate = 0.0;
    short(&mut cfg, 3, 100);
    let data = toy_dataset(2, 0.25, 3).unwrap();
    let start = Vocoder::new(cfg.clone()).unwrap();
    let out = train(&cfg, &data).unwrap();
    assert_eq!(out.steps.len(), 6);
    assert_eq!(out.epochs.len(), 3);
    for e in &out.epochs[1..] {
        assert_eq!(e.report, out.epochs[0].report);
    }
    for ((_, a), (_, b)) in start.params().named().iter().zip(out.checkpoint.params.named()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let mut cfg = smoke();
    short(&mut cfg, 2, 6);
    let data = toy_dataset(3, 0.25, 4).unwrap();
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(a.steps, b.steps);
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!(x.report.total.to_bits(), y.report.total.to_bits());
    }
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());

    cfg.schedule.seed = 2;
    let c = train(&cfg, &data).unwrap();
    assert_ne!(a.steps[0].report.total, c.steps[0].report.total);
}

#[test]
fn first_logged_loss_is_the_untrained_loss() {
    let mut cfg = smoke();
    short(&mut cfg, 1, 1);
    let data = toy_dataset(1, 0.25, 5).unwrap();
    let u = &data.utterances[0];
    let v = Vocoder::new(cfg.clone()).unwrap();
    let seed = cfg.schedule.seed;
    let inputs = v
        .training_inputs(
            &u.track,
            &u.target,
            derive_seed(seed, streams::UTT_NOISE),
            derive_seed(seed, streams::UTT_PHASE),
        )
        .unwrap();
    let ex = v.excitation(&inputs).unwrap();
    let out = v.infer(&u.track, &ex.merged).unwrap().output;
    let gen = nsf_core::dsp::WaveformBuffer::new(out, 16000).unwrap();
    let (report, _) = loss_and_waveform_gradient(&gen, &u.target, &cfg.loss).unwrap();

    let trained = train(&cfg, &data).unwrap();
    assert_eq!(trained.steps[0].report, report);
    assert_eq!(evaluate(&v, &data).unwrap(), report);
}

#[test]
fn nan_parameters_stop_training() {
    let mut cfg = smoke();
    short(&mut cfg, 1, 2);
    let data = toy_dataset(1, 0.25, 6).unwrap();
    let mut v = Vocoder::new(cfg).unwrap();
    v.params_mut().named_mut()[0].1.value[0] = f64::NAN;
    match train_with(v, &data, &mut |_| {}) {
        Err(NsfError::Diverged { step: 0, .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.steps.len())),
    }
}

#[test]
fn single_utterance_overfits_then_synthesizes_its_pitch() {
    let mut cfg = smoke();
    short(&mut cfg, 200, 200);
    let data = toy_dataset(1, 0.5, 8).unwrap();
    let before = evaluate(&Vocoder::new(cfg.clone()).unwrap(), &data).unwrap().total;
    let mut seen = 0;
    let out = train_with(Vocoder::new(cfg.clone()).unwrap(), &data, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 200);
    assert_eq!(out.checkpoint.step, 200);
    let after = evaluate(&Vocoder::from_checkpoint(out.checkpoint.clone()).unwrap(), &data).unwrap().total;
    assert!(after <= 0.5 * before, "{before} -> {after}");

    let frames = 50;
    let spectral = data.utterances[0].track.spectral_row(10).repeat(frames);
    let track = F0Track::with_features(vec![200.0; frames], 80, 10, spectral).unwrap();
    let syn = synthesize(&out.checkpoint, &track, 3).unwrap();
    assert_eq!(syn.wave.len(), frames * 80);
    assert_eq!(syn.forward_passes, 1);
    let cfg512 = StftConfig::new(512, 320, 80).unwrap();
    // 200 steps fit the level and the harmonic grid but not the balance
    // between the lowest partials, so the peak may sit on any partial.
    let bin = dominant_bin(&syn.wave, &cfg512).unwrap() as f64;
    let spacing = 200.0 * 512.0 / 16000.0;
    let k = (bin / spacing).round().max(1.0);
    assert!((bin - k * spacing).abs() <= 1.0, "dominant bin {bin} is off the 200 Hz grid");
}
