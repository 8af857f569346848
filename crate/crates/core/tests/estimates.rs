//! Importance-sampling estimators against enumerated targets.

use sss_core::montecarlo::{estimate_expectation, estimate_logz, weigh, weight_diagnostics};
use sss_core::{
    DrawResult, ExactSampler, Family, IsingModel, SaSchedule, SamplerParams, SimulatedAnnealing, StateSpaceSampler,
};

/// Every state of an 8-spin model, scored by a fixed non-uniform proposal:
/// the exact second moment of `w / Z` under that proposal must be
/// `sum pi^2 / q - 1`, which is what the weight variance estimates.
#[test]
fn weight_variance_identity_on_enumeration() {
    let beta = 0.7;
    let model = IsingModel::generate(Family::Chain { m: 8 }, 3).unwrap();
    let e = model.enumerate(beta).unwrap();
    // q proportional to exp(-E / 2): a flattened target.
    let flat = model.enumerate(beta / 2.0).unwrap();
    let draws: Vec<DrawResult> = flat
        .states()
        .map(|(y, q)| DrawResult {
            state: y,
            log_q: q.ln(),
            refresh_calls: 0,
            fallback: false,
        })
        .collect();
    let w = weigh(&draws, &model, beta).unwrap();
    let mut mean = 0.0;
    let mut second = 0.0;
    for (s, (_, q)) in w.iter().zip(flat.states()) {
        let r = (s.log_w - e.log_z).exp();
        mean += q * r;
        second += q * r * r;
    }
    let closed: f64 = e
        .states()
        .zip(flat.states())
        .map(|((_, p), (_, q))| p * p / q)
        .sum::<f64>()
        - 1.0;
    assert!((mean - 1.0).abs() < 1e-12);
    assert!((second - mean * mean - closed).abs() < 1e-10);
}

#[test]
fn mean_energy_from_exact_heuristic_draws() {
    let beta = 1.0;
    let model = IsingModel::generate(Family::Chain { m: 8 }, 4).unwrap();
    let e = model.enumerate(beta).unwrap();
    let exact_mean: f64 = e.states().map(|(y, p)| p * model.energy(&y).unwrap()).sum();
    let heuristic = ExactSampler::new(beta);
    let params = SamplerParams {
        seed: 40,
        ..SamplerParams::default()
    };
    let mut sampler = StateSpaceSampler::new(&model, &heuristic, params).unwrap();
    let draws: Vec<DrawResult> = (0..2000).map(|_| sampler.draw().unwrap()).collect();
    let w = weigh(&draws, &model, beta).unwrap();
    let estimate = estimate_expectation(&w, |y| model.energy(y).unwrap()).unwrap();
    // Delta-method standard error of the self-normalised estimate.
    let shift = w.iter().map(|s| s.log_w).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = w.iter().map(|s| (s.log_w - shift).exp()).collect();
    let total: f64 = raw.iter().sum();
    let se = raw
        .iter()
        .zip(&w)
        .map(|(r, s)| (r / total).powi(2) * (model.energy(&s.state).unwrap() - estimate).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!((estimate - exact_mean).abs() <= 3.0 * se, "{estimate} vs {exact_mean} (se {se})");
}

#[test]
fn dense_model_logz_covered() {
    let beta = 0.5;
    let model = IsingModel::generate(Family::Sk { m: 10 }, 5).unwrap();
    let log_z = model.enumerate(beta).unwrap().log_z;
    let sa = SimulatedAnnealing::new(SaSchedule::linear(0.1, beta, 10, 1)).unwrap();
    let params = SamplerParams {
        beta,
        population_size: 500,
        seed: 41,
        ..SamplerParams::default()
    };
    let mut sampler = StateSpaceSampler::new(&model, &sa, params).unwrap();
    let draws: Vec<DrawResult> = (0..2000).map(|_| sampler.draw().unwrap()).collect();
    let w = weigh(&draws, &model, beta).unwrap();
    let est = estimate_logz(&w).unwrap();
    // Z_hat +- 3 se must cover Z.
    let ratio = (log_z - est.log_z).exp();
    assert!(
        (ratio - 1.0).abs() <= 3.0 * est.relative_std_error,
        "log Z {log_z} vs {} (relative se {})",
        est.log_z,
        est.relative_std_error
    );
    let diag = weight_diagnostics(&w).unwrap();
    assert!(diag.ess > 0.0 && diag.ess <= 2000.0);
}
