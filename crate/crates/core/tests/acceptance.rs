//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Every check is seeded and deterministic.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use qkit::bias::{correct_tensor, CorrectionMode};
use qkit::datapath::{overhead_report, reference_dot, DatapathConfig, PwlqDatapath, PwlqWeights, UniformDatapath};
use qkit::distribution::{DistributionKind, DistributionModel};
use qkit::error_analysis::{
    bound_ratio, expected_pwlq_error, expected_uniform_symmetric_error, optimal_error_closed_form,
    pwlq_error_derivatives, stationarity_residual, STATIONARITY_TOLERANCE,
};
use qkit::pwlq::{breakpoint_sweep, empirical_mse, quantize_pwlq, PwlqParams, Scheme};
use qkit::recipe::{analyze, perturbation_study, quantize_tensor, AnalyzeOptions, Reconstruction, Recipe};
use qkit::solver::{solve_breakpoint, solve_multi, BreakpointMethod, SolverConfig};
use qkit::uniform::{QuantParams, Signedness};
use qkit::{Granularity, Tensor};

/// An empirical MSE curve counts as unimodal when, away from its minimum,
/// it never moves against the trend by more than this fraction of the
/// minimum. Finite samples and the discrete code grid make the measured
/// curve a slightly jagged version of the smooth expected curve.
const UNIMODAL_SLACK: f64 = 0.005;

/// Per-case datapath verdicts: pwlq ok, uniform ok, MACs equal, one extra
/// storage bit, then the two relative errors.
type DatapathCase = (bool, bool, bool, bool, f64, f64);

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn models() -> Vec<DistributionModel> {
    let mut out = Vec::new();
    for m in [2.0, 3.0, 4.0] {
        out.push(DistributionModel::gaussian(1.0, m).unwrap());
        out.push(DistributionModel::laplacian(1.0, m).unwrap());
    }
    out
}

fn label(d: &DistributionModel) -> String {
    let kind = match d.kind() {
        DistributionKind::Gaussian => "gaussian",
        DistributionKind::Laplacian => "laplacian",
    };
    format!("{kind}(m={})", d.bound())
}

fn gd() -> SolverConfig {
    SolverConfig::default()
}

/// Largest move against the descending-then-ascending trend, relative to the minimum.
fn unimodality_violation(curve: &[f64]) -> f64 {
    let (argmin, &min) = curve.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let mut worst = 0.0f64;
    for i in 0..curve.len() - 1 {
        let rise = curve[i + 1] - curve[i];
        let against = if i < argmin { rise } else { -rise };
        worst = worst.max(against);
    }
    worst / min
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn criterion_1() -> Outcome {
    let models = models();
    let mut min_second = f64::INFINITY;
    let mut analytic_ok = true;
    for d in &models {
        for b in 2..=8 {
            for i in 1..=50 {
                let p = 0.5 * d.bound() * i as f64 / 51.0;
                let (_, second) = pwlq_error_derivatives(d, b, p).unwrap();
                // Scale out C(b-1) so values are comparable across bit widths.
                let normalized = second / qkit::uniform::error_constant(b - 1);
                min_second = min_second.min(normalized);
                analytic_ok &= second > 0.0;
            }
        }
    }
    let cases: Vec<(usize, u8)> = (0..models.len()).flat_map(|i| (2..=8).map(move |b| (i, b))).collect();
    let samples: Vec<Tensor> =
        models.par_iter().enumerate().map(|(i, d)| d.sample_truncated(1_000_000, 100 + i as u64).unwrap()).collect();
    let violations: Vec<(String, u8, f64)> = cases
        .par_iter()
        .map(|&(i, b)| {
            let d = &models[i];
            let curve: Vec<f64> =
                breakpoint_sweep(samples[i].data(), b, d.bound(), 100).unwrap().iter().map(|s| s.mse).collect();
            (label(d), b, unimodality_violation(&curve))
        })
        .collect();
    let worst = violations.iter().max_by(|a, b| a.2.total_cmp(&b.2)).unwrap();
    let empirical_ok = worst.2 <= UNIMODAL_SLACK;
    outcome(
        analytic_ok && empirical_ok,
        format!(
            "min normalized E''={min_second:.4} over {} points; worst empirical violation {:.2e} of min ({} b={}) over {} curves",
            models.len() * 7 * 50,
            worst.2,
            worst.0,
            worst.1,
            violations.len()
        ),
    )
}

fn criterion_2() -> Outcome {
    let models = models();
    let mut analytic_ok = true;
    let mut worst_analytic = 0.0f64;
    let mut worst_empirical = 0.0f64;
    let samples: Vec<Tensor> =
        models.par_iter().enumerate().map(|(i, d)| d.sample_truncated(1_000_000, 200 + i as u64).unwrap()).collect();
    let mut empirical_ok = true;
    for (d, t) in models.iter().zip(&samples) {
        for b in 2..=8 {
            let ratio = bound_ratio(b).unwrap();
            let p = solve_breakpoint(d, b, &gd()).unwrap().breakpoints[0];
            let e_pw = expected_pwlq_error(d, b, p).unwrap();
            let e_uni = expected_uniform_symmetric_error(b, d.bound()).unwrap();
            analytic_ok &= e_pw < ratio * e_uni;
            worst_analytic = worst_analytic.max(e_pw / (ratio * e_uni));

            let emp_pw = empirical_mse(t.data(), &Scheme::Pwlq(PwlqParams::single(b, d.bound(), p).unwrap())).unwrap();
            let emp_uni =
                empirical_mse(t.data(), &Scheme::Uniform(QuantParams::symmetric(b, d.bound()).unwrap())).unwrap();
            let r = emp_pw / (ratio * emp_uni);
            empirical_ok &= r <= 1.05;
            worst_empirical = worst_empirical.max(r);
        }
    }
    let nine_sixteenths = bound_ratio(2).unwrap() == 9.0 / 16.0;
    outcome(
        analytic_ok && empirical_ok && nine_sixteenths,
        format!(
            "max E_pw/(bound·E_uni): analytic {worst_analytic:.4} (<1), empirical {worst_empirical:.4} (≤1.05); ratio(b=2)={}",
            bound_ratio(2).unwrap()
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut worst_residual = 0.0f64;
    let mut worst_rel = 0.0f64;
    let mut ok = true;
    for d in models() {
        for b in 2..=8 {
            let sol = solve_breakpoint(&d, b, &gd()).unwrap();
            let p = sol.breakpoints[0];
            let residual = stationarity_residual(&d, p).abs();
            worst_residual = worst_residual.max(residual);
            ok &= residual <= STATIONARITY_TOLERANCE;
            match optimal_error_closed_form(&d, b, p) {
                Ok(closed) => {
                    let r = rel(closed, expected_pwlq_error(&d, b, p).unwrap());
                    worst_rel = worst_rel.max(r);
                    ok &= r <= 1e-9;
                }
                Err(_) => ok = false,
            }
        }
    }
    outcome(ok, format!("max stationarity residual {worst_residual:.2e} (≤1e-6); max relative gap {worst_rel:.2e} (≤1e-9)"))
}

fn criterion_4() -> Outcome {
    let t = DistributionModel::gaussian(1.0, 100.0).unwrap().sample(1_000_000, 4).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for b in [4u8, 6, 8] {
        let recipe = Recipe { bit_width: b, granularity: Granularity::PerLayer, ..Recipe::default() };
        let q = quantize_tensor(&t, &recipe).unwrap().quantized;
        let a = analyze(&t, Reconstruction::Quantized(&q), &AnalyzeOptions { bit_width: b, ..AnalyzeOptions::default() })
            .unwrap();
        let ch = &a.channels[0];
        let curve: Vec<f64> = ch.sweep.iter().map(|s| s.mse).collect();
        let min = curve.iter().copied().fold(f64::INFINITY, f64::min);
        let violation = unimodality_violation(&curve);
        let ratio = min / ch.uniform_mse;
        ok &= curve.len() == 100 && violation <= UNIMODAL_SLACK && min < ch.uniform_mse;
        if b == 4 {
            ok &= ratio <= 0.35;
        }
        parts.push(format!("b={b}: min/uniform {ratio:.3}, violation {violation:.1e}"));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_5() -> Outcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    for r in [2.0, 2.5, 3.0, 3.5, 4.0] {
        let d = DistributionModel::gaussian(1.0, r).unwrap();
        for b in 2..=8 {
            let closed = solve_breakpoint(&d, b, &SolverConfig { method: BreakpointMethod::ClosedFormGaussian, ..gd() })
                .unwrap();
            let opt = solve_breakpoint(&d, b, &gd()).unwrap();
            ok &= !closed.fallback;
            let gap = closed.error / opt.error - 1.0;
            worst = worst.max(gap);
            ok &= gap <= 0.01;
        }
    }
    outcome(ok, format!("max excess error of closed form over gradient descent {:.3}% (≤1%)", worst * 100.0))
}

fn criterion_6() -> Outcome {
    // 64 output channels with varied spread, 2048 weights each.
    let mut data = Vec::with_capacity(64 * 2048);
    for c in 0..64u64 {
        let sigma = 0.01 * (1.0 + (c % 8) as f64);
        data.extend(DistributionModel::gaussian(sigma, 100.0 * sigma).unwrap().sample(2048, 600 + c).unwrap().into_data());
    }
    let t = Tensor::with_channel_axis(vec![64, 2048], data, 0).unwrap();
    let recipe = Recipe { seed: 6, ..Recipe::default() };
    let levels = [0.0, 0.05, 0.10, 0.20, 0.30];
    let report = perturbation_study(&t, &recipe, &levels, 100).unwrap();
    let medians: Vec<f64> = report.levels.iter().map(|l| l.mse.median).collect();
    let monotone = medians.windows(2).all(|w| w[1] >= w[0]);
    let zero_exact = report.levels[0].mse.min == report.baseline_mse && report.levels[0].mse.max == report.baseline_mse;
    let margin = medians[4] - report.baseline_mse;
    outcome(
        monotone && zero_exact && margin > 0.0,
        format!(
            "medians relative to level 0: {}; level-30% margin {margin:.3e}",
            medians.iter().map(|m| format!("{:.4}", m / report.baseline_mse)).collect::<Vec<_>>().join(" ≤ ")
        ),
    )
}

fn criterion_7() -> Outcome {
    let d = DistributionModel::gaussian(1.0, 3.0).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for b in [3u8, 4, 5] {
        let e: Vec<f64> = (1..=3).map(|k| solve_multi(&d, b, k, &gd()).unwrap().error).collect();
        ok &= e[2] <= e[1] && e[1] <= e[0];
        parts.push(format!("b={b}: {:.4e} ≥ {:.4e} ≥ {:.4e}", e[0], e[1], e[2]));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let cfg = DatapathConfig::default();
    let cases = 10_000;
    let results: Vec<DatapathCase> = (0..cases)
        .into_par_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(800);
            rng.set_stream(case as u64);
            let b: u8 = if case % 2 == 0 { 4 } else { 8 };
            let n = rng.random_range(8..=512);
            let sigma = rng.random_range(0.01..2.0);
            let w = DistributionModel::gaussian(sigma, 100.0 * sigma).unwrap().sample(n, rng.random()).unwrap();
            let w: Vec<f64> = w.data().iter().map(|&v| f64::from(v)).collect();
            let m = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let lo = rng.random_range(-3.0..0.0);
            let hi = rng.random_range(0.5..4.0);
            let act = QuantParams::asymmetric(b, lo, hi).unwrap();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(lo - 0.5..hi + 0.5)).collect();
            let xq: Vec<i32> = x.iter().map(|&v| act.quantize(v)).collect();
            let x_hat: Vec<f64> = xq.iter().map(|&c| act.dequantize(c)).collect();

            // PWLQ path, one breakpoint anywhere in (0, m/2).
            let p = m * rng.random_range(0.02..0.5);
            let params = PwlqParams::single(b, m, p).unwrap();
            let pw = PwlqWeights::encode(&params, &w);
            let w_hat: Vec<f64> = (0..n)
                .map(|i| params.decode(usize::from(pw.regions[i]), pw.negative[i], pw.codes[i].abs()))
                .collect();
            let dp = PwlqDatapath::new(act, params, &pw).unwrap();
            let (v, trace) = dp.inner_product(&xq, &pw, &cfg).unwrap();
            let reference = reference_dot(&x_hat, &w_hat);
            let pw_rel = rel(v, reference);

            // Uniform path on the same weights.
            let uq = QuantParams::symmetric(b, m).unwrap();
            let wq: Vec<i32> = w.iter().map(|&v| uq.quantize(v)).collect();
            let wu_hat: Vec<f64> = wq.iter().map(|&c| uq.dequantize(c)).collect();
            let udp = UniformDatapath::new(act, uq, &wq).unwrap();
            let (u, utrace) = udp.inner_product(&xq, &wq, &cfg).unwrap();
            let u_rel = rel(u, reference_dot(&x_hat, &wu_hat));

            let o = overhead_report(&utrace, &trace);
            (pw_rel <= 1e-9, u_rel <= 1e-10, o.macs_equal, o.extra_storage_bits_per_weight == 1, pw_rel, u_rel)
        })
        .collect();
    let count = |f: fn(&DatapathCase) -> bool| results.iter().filter(|r| !f(r)).count();
    let (pw_fail, u_fail, mac_fail, bit_fail) = (count(|r| r.0), count(|r| r.1), count(|r| r.2), count(|r| r.3));
    let worst_pw = results.iter().map(|r| r.4).fold(0.0, f64::max);
    let worst_u = results.iter().map(|r| r.5).fold(0.0, f64::max);
    outcome(
        pw_fail + u_fail + mac_fail + bit_fail == 0,
        format!(
            "{cases} cases: pwlq max rel {worst_pw:.1e} ({pw_fail} over 1e-9), uniform max rel {worst_u:.1e} ({u_fail} over 1e-10), \
             MAC mismatches {mac_fail}, storage-overhead mismatches {bit_fail}"
        ),
    )
}

fn criterion_9() -> Outcome {
    const CASES: u64 = 100_000;
    let eps = 1e-9;
    let failures: Vec<[u64; 5]> = (0..CASES)
        .into_par_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(900);
            rng.set_stream(case);
            let mut f = [0u64; 5];
            let b: u8 = rng.random_range(2..=8);
            let width = rng.random_range(1e-3..100.0);
            let lo = rng.random_range(-50.0..50.0);
            let sign = if rng.random_bool(0.5) { Signedness::SymmetricSigned } else { Signedness::AsymmetricUnsigned };
            let (rl, ru) = if sign == Signedness::SymmetricSigned { (-width, width) } else { (lo, lo + width) };
            let q = QuantParams::new(b, rl, ru, sign).unwrap();
            let r1 = rng.random_range(rl - width..ru + width);
            let r2 = rng.random_range(rl - width..ru + width);

            // Round trip within half a step of the clamped input.
            let c1 = q.quantize(r1);
            if (q.dequantize(c1) - q.clamp(r1)).abs() > q.scale / 2.0 + eps * width {
                f[0] += 1;
            }
            // Code-domain containment.
            if !q.contains_code(c1) {
                f[1] += 1;
            }
            // Monotone codes.
            let (a, c) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            if q.quantize(a) > q.quantize(c) {
                f[2] += 1;
            }

            // PWLQ: containment, round trip and sign symmetry.
            let m = width;
            let k = rng.random_range(1..=3);
            let mut u: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..0.99)).collect();
            u.sort_by(f64::total_cmp);
            u.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
            let p = PwlqParams::new(b, m, u.iter().map(|v| v * m).collect()).unwrap();
            let r = rng.random_range(-1.5 * m..1.5 * m);
            let code = p.encode(r);
            let region = &p.regions[usize::from(code.region)];
            if !region.contains_code(code.magnitude) {
                f[1] += 1;
            }
            let err = (p.decode(usize::from(code.region), code.negative, code.magnitude) - r.clamp(-m, m)).abs();
            if err > region.scale / 2.0 + eps * m {
                f[3] += 1;
            }
            if p.reconstruct(-r) != -p.reconstruct(r) {
                f[4] += 1;
            }
            f
        })
        .collect();
    let mut total = [0u64; 5];
    for f in &failures {
        for (t, v) in total.iter_mut().zip(f) {
            *t += v;
        }
    }
    outcome(
        total.iter().all(|&v| v == 0),
        format!(
            "{CASES} cases × 7 checks: failures round-trip {}, domain {}, monotone {}, pwlq round-trip {}, sign symmetry {}",
            total[0], total[1], total[2], total[3], total[4]
        ),
    )
}

fn criterion_10() -> Outcome {
    const CHANNELS: u64 = 1000;
    let results: Vec<(f64, bool, bool)> = (0..CHANNELS)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000);
            rng.set_stream(c);
            let n = rng.random_range(64..=2048);
            let sigma = rng.random_range(0.005..1.0);
            let kind = if rng.random_bool(0.5) { DistributionKind::Gaussian } else { DistributionKind::Laplacian };
            let d = DistributionModel::new(kind, sigma, 100.0 * sigma).unwrap();
            let t = d.sample(n, rng.random()).unwrap();
            let w: Vec<f64> = t.data().iter().map(|&v| f64::from(v)).collect();
            let mean_w = w.iter().sum::<f64>() / n as f64;
            let std_w = (w.iter().map(|v| (v - mean_w).powi(2)).sum::<f64>() / n as f64).sqrt();

            let m = t.stats().unwrap().absmax;
            let p = solve_breakpoint(&DistributionModel::fit(&t, kind).unwrap(), 4, &gd()).unwrap().breakpoints[0];
            let q = quantize_pwlq(&t, &PwlqParams::single(4, m, p).unwrap()).unwrap();
            let mse = |decoded: &[f64]| decoded.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
            let base = mse(&q.reconstruct());

            let (mean_only, _) = correct_tensor(&t, &q, CorrectionMode::MeanOnly).unwrap();
            let decoded = mean_only.reconstruct();
            let residual = (decoded.iter().sum::<f64>() / n as f64 - mean_w).abs() / std_w;
            // Variance matching is reported but not gated: it restores the
            // spread, which is not the same as minimizing MSE.
            let (full, _) = correct_tensor(&t, &q, CorrectionMode::MeanAndVariance).unwrap();
            (residual, mse(&decoded) <= base, mse(&full.reconstruct()) <= base)
        })
        .collect();
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let mean_only = results.iter().filter(|r| r.1).count() as f64 / CHANNELS as f64;
    let full = results.iter().filter(|r| r.2).count() as f64 / CHANNELS as f64;
    outcome(
        worst <= 1e-6 && mean_only >= 0.9,
        format!(
            "max normalized mean residual {worst:.1e} (≤1e-6); MSE not worse after mean-only correction on {:.1}% of {CHANNELS} channels (≥90%); mean+variance (informational) {:.1}%",
            mean_only * 100.0,
            full * 100.0
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("convexity of the expected error in the breakpoint", criterion_1),
        ("piecewise error bound relative to uniform", criterion_2),
        ("stationarity of the solved breakpoint", criterion_3),
        ("MSE-vs-breakpoint sweep below the uniform line", criterion_4),
        ("closed-form Gaussian breakpoint accuracy", criterion_5),
        ("breakpoint perturbation trend", criterion_6),
        ("multi-breakpoint monotonicity", criterion_7),
        ("integer datapath equivalence", criterion_8),
        ("quantizer contracts", criterion_9),
        ("bias correction", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("criterion {:>2} {status} {name} — {} [{:.1}s]", i + 1, o.detail, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
