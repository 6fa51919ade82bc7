//! End-to-end flows across modules: quantize, store, reload, analyze and
//! simulate.

use qkit::bias::CorrectionMode;
use qkit::calibration::{calibrate, quantize_activations, CalibrationMode};
use qkit::datapath::{overhead_report, simulate_rows, DatapathConfig};
use qkit::distribution::{DistributionKind, DistributionModel};
use qkit::format;
use qkit::recipe::{analyze, quantize_tensor, AnalyzeOptions, Reconstruction, Recipe, SchemeKind};
use qkit::solver::BreakpointMethod;
use qkit::{Granularity, Tensor};

fn conv_weights(channels: usize, per_channel: usize, seed: u64) -> Tensor {
    let mut data = Vec::with_capacity(channels * per_channel);
    for c in 0..channels {
        let sigma = 0.02 * (1.0 + c as f64);
        let t = DistributionModel::gaussian(sigma, 10.0 * sigma).unwrap().sample(per_channel, seed + c as u64).unwrap();
        data.extend(t.into_data());
    }
    Tensor::with_channel_axis(vec![channels, per_channel], data, 0).unwrap()
}

#[test]
fn stored_tensor_reproduces_reported_mse() {
    let t = conv_weights(6, 1024, 1);
    let dir = tempfile::tempdir().unwrap();
    for scheme in [SchemeKind::Uniform, SchemeKind::Pwlq] {
        let recipe = Recipe { scheme, bias_correction: Some(CorrectionMode::MeanAndVariance), ..Recipe::default() };
        let out = quantize_tensor(&t, &recipe).unwrap();
        let path = dir.path().join("w.qtnq");
        format::save_quantized(&path, &out.quantized).unwrap();
        let back = format::load_quantized(&path).unwrap();
        assert_eq!(back, out.quantized);
        let a = analyze(&t, Reconstruction::Quantized(&back), &AnalyzeOptions::default()).unwrap();
        assert!((a.mse - out.mse).abs() <= 1e-12 * out.mse);
        assert_eq!(a.channels.len(), 6);
        for (c, r) in a.channels.iter().zip(&out.channels) {
            assert!((c.mse - r.mse).abs() <= 1e-12 * r.mse.max(1e-30));
        }
    }
}

#[test]
fn pwlq_beats_uniform_per_channel_at_every_bit_width() {
    let t = conv_weights(4, 4096, 7);
    for b in 3..=8 {
        let mse = |scheme| {
            let r = Recipe { scheme, bit_width: b, granularity: Granularity::PerChannel, ..Recipe::default() };
            quantize_tensor(&t, &r).unwrap().mse
        };
        let (u, p) = (mse(SchemeKind::Uniform), mse(SchemeKind::Pwlq));
        assert!(p < u, "b={b}: pwlq {p} vs uniform {u}");
    }
}

#[test]
fn every_breakpoint_method_produces_a_valid_quantizer() {
    let t = conv_weights(3, 2048, 3);
    let mut errors = Vec::new();
    for method in [BreakpointMethod::GradientDescent, BreakpointMethod::ClosedFormGaussian, BreakpointMethod::EmpiricalGrid] {
        let r = Recipe { breakpoint_method: method, ..Recipe::default() };
        let out = quantize_tensor(&t, &r).unwrap();
        for c in &out.channels {
            assert_eq!(c.breakpoints.len(), 1);
            assert!(c.breakpoints[0] > 0.0 && c.breakpoints[0] < c.bound / 2.0 + 1e-12);
        }
        errors.push(out.mse);
    }
    // Model-based choices stay close to the data-driven optimum; the gap is
    // the model mismatch of a fitted Gaussian on 2048 samples.
    for e in &errors[..2] {
        assert!(*e <= errors[2] * 1.10, "{errors:?}");
    }
}

#[test]
fn laplacian_model_is_usable_end_to_end() {
    let flat = DistributionModel::laplacian(0.05, 1.0).unwrap().sample(8192, 5).unwrap();
    let r = Recipe { distribution: DistributionKind::Laplacian, granularity: Granularity::PerLayer, ..Recipe::default() };
    let out = quantize_tensor(&flat, &r).unwrap();
    let uniform = quantize_tensor(&flat, &Recipe { scheme: SchemeKind::Uniform, ..r.clone() }).unwrap();
    assert!(out.mse < uniform.mse);
}

#[test]
fn calibrated_activations_drive_the_datapath() {
    let w = conv_weights(4, 256, 9);
    let weights = quantize_tensor(&w, &Recipe::default()).unwrap().quantized;
    let baseline =
        quantize_tensor(&w, &Recipe { scheme: SchemeKind::Uniform, ..Recipe::default() }).unwrap().quantized;

    let relu = |seed| {
        let t = DistributionModel::gaussian(1.0, 6.0).unwrap().sample(256, seed).unwrap();
        Tensor::from_vec(t.data().iter().map(|v| v.max(0.0)).collect()).unwrap()
    };
    let samples: Vec<Tensor> = (0..8).map(relu).collect();
    let range = calibrate(&samples, 10, CalibrationMode::Pooled).unwrap();
    assert_eq!(range.min, 0.0);
    let x = quantize_activations(&relu(100), &range, 8).unwrap();

    let cfg = DatapathConfig::default();
    let rows = simulate_rows(&weights, &x, &cfg).unwrap();
    let base = simulate_rows(&baseline, &x, &cfg).unwrap();
    assert_eq!(rows.len(), 4);
    for ((v, reference, trace), (bv, bref, btrace)) in rows.iter().zip(&base) {
        assert!((v - reference).abs() <= 1e-9 * reference.abs().max(1e-3));
        assert!((bv - bref).abs() <= 1e-10 * bref.abs().max(1e-3));
        let o = overhead_report(btrace, trace);
        assert!(o.macs_equal);
        assert_eq!(o.extra_storage_bits_per_weight, 1);
        assert_eq!(o.pwlq_fp_constants, 5);
    }
}

#[test]
fn per_layer_weights_must_be_row_aligned_for_simulation() {
    let w = conv_weights(2, 100, 4);
    let weights = quantize_tensor(&w, &Recipe::default()).unwrap().quantized;
    let x = quantize_activations(
        &Tensor::from_vec(vec![0.5; 64]).unwrap(),
        &qkit::calibration::CalibrationRange { min: 0.0, max: 1.0, k: 1, samples: 1, count: 64, degraded: false },
        8,
    )
    .unwrap();
    assert!(simulate_rows(&weights, &x, &DatapathConfig::default()).is_err());
}
