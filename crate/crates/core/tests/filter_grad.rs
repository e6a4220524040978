use nsf_core::filter::*;
use nsf_core::gradcheck::{end_to_end_check, model_gradient_check};
use nsf_core::source::F0Track;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> LayerSpec {
    LayerSpec {
        stages: 2,
        layers_per_stage: 5,
        filter_width: 3,
        channels: 8,
        dilation_cycle: 10,
    }
}

fn dims() -> ModelDims {
    ModelDims {
        cond_inputs: 3,
        merge_inputs: 8,
    }
}

fn track(frames: usize, shift: usize, rng: &mut ChaCha8Rng) -> F0Track {
    let f0 = (0..frames).map(|n| if n % 4 == 3 { 0.0 } else { rng.random_range(90.0..300.0) }).collect();
    let spectral = (0..frames * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    F0Track::with_features(f0, shift, 2, spectral).unwrap()
}

fn switches(b_mode: BMode) -> AblationSwitches {
    AblationSwitches {
        b_mode,
        ..AblationSwitches::default()
    }
}

#[test]
fn gradients_match_differences_in_every_b_mode() {
    for (i, mode) in [BMode::Learned, BMode::FixedOne, BMode::FixedZero].into_iter().enumerate() {
        let r = model_gradient_check(mode, 40 + i as u64).unwrap();
        assert!(r.passed(), "{}: {:e}", r.name, r.rel_error);
    }
}

#[test]
fn end_to_end_gradient_matches_differences() {
    let r = end_to_end_check(9).unwrap();
    assert!(r.passed(), "{:e}", r.rel_error);
}

#[test]
fn fresh_model_is_identity_with_unit_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(&spec(), dims(), 3).unwrap();
    let t = track(6, 40, &mut rng);
    let e: Vec<f64> = (0..240).map(|_| rng.random_range(-1.0..1.0)).collect();
    for mode in [BMode::FixedOne, BMode::Learned] {
        let sw = switches(mode);
        assert_eq!(model_infer(&t, &e, &params, &sw).unwrap().output, e);
        let d: Vec<f64> = (0..240).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-5;
        let shifted = |s: f64| -> Vec<f64> {
            let x: Vec<f64> = e.iter().zip(&d).map(|(a, b)| a + s * b).collect();
            model_infer(&t, &x, &params, &sw).unwrap().output
        };
        let (plus, minus) = (shifted(h), shifted(-h));
        for i in 0..240 {
            let jd = (plus[i] - minus[i]) / (2.0 * h);
            assert!((jd - d[i]).abs() < 1e-8, "{mode:?} sample {i}: {jd} vs {}", d[i]);
        }
    }
    let zero = model_infer(&t, &e, &params, &switches(BMode::FixedZero)).unwrap().output;
    assert!(zero.iter().all(|v| *v == 0.0));
}

#[test]
fn output_length_matches_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ModelParams::init(&spec(), dims(), 4).unwrap();
    for (len, shift) in [(160, 80), (1024, 64), (16000, 80)] {
        let t = track(len / shift, shift, &mut rng);
        let e: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = model_forward(&t, &e, &params, &switches(BMode::Learned)).unwrap();
        assert_eq!(out.output.len(), len);
    }
    let t = track(2, 80, &mut rng);
    assert!(model_infer(&t, &[0.0; 159], &params, &AblationSwitches::default()).is_err());
}

#[test]
fn work_is_linear_in_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ModelParams::init(&spec(), dims(), 5).unwrap();
    let macs = |frames: usize, rng: &mut ChaCha8Rng| {
        let t = track(frames, 80, rng);
        model_infer(&t, &vec![0.1; frames * 80], &params, &AblationSwitches::default()).unwrap().macs
    };
    let (a, b) = (macs(10, &mut rng), macs(20, &mut rng));
    assert!(a > 0);
    assert_eq!(b, 2 * a);
}

#[test]
fn learned_scale_preserves_sign_when_shift_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = ModelParams::init(&spec(), dims(), 6).unwrap();
    // row 0 of each output projection (a) stays zero; row 1 (b~) is random
    for st in &mut params.stages {
        let c = st.output.in_dim();
        for v in &mut st.output.weight.value[c..] {
            *v = rng.random_range(-0.5..0.5);
        }
        st.output.bias.value[1] = rng.random_range(-0.5..0.5);
    }
    let t = track(8, 80, &mut rng);
    let e: Vec<f64> = (0..640).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out = model_infer(&t, &e, &params, &AblationSwitches::default()).unwrap().output;
    assert_ne!(out, e);
    for (o, x) in out.iter().zip(&e) {
        assert_eq!(o.signum(), x.signum());
    }
}

#[test]
fn backward_rejects_stale_cache() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ModelParams::init(&spec(), dims(), 7).unwrap();
    let t = track(2, 80, &mut rng);
    let sw = AblationSwitches::default();
    let infer = model_infer(&t, &[0.2; 160], &params, &sw).unwrap();
    assert!(model_backward(&[1.0; 160], &infer, &mut params, &sw).is_err());

    let pass = model_forward(&t, &[0.2; 160], &params, &sw).unwrap();
    params.zero_grads();
    assert!(model_backward(&[1.0; 160], &pass, &mut params, &sw).is_ok());
    params.named_mut()[0].1.value[0] += 1.0;
    assert!(model_backward(&[1.0; 160], &pass, &mut params, &sw).is_err());
}
