//! Importance-sampling estimates of the partition function on a small
//! chain, where the exact value is known.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sss_core::montecarlo::weigh;
use sss_core::sampler::scp_basic;
use sss_core::{DrawResult, ExactSampler, Family, IsingModel, SamplerParams, SeedStream, SimulatedAnnealing, SaSchedule};

fn ratio_mean_and_se(model: &IsingModel, beta: f64, draws: &[DrawResult]) -> (f64, f64) {
    let log_z = model.exact_logz_chain(beta).unwrap();
    let w: Vec<f64> = weigh(draws, model, beta)
        .unwrap()
        .iter()
        .map(|s| (s.log_w - log_z).exp())
        .collect();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn basic_constraining_process_is_unbiased() {
    let beta = 1.0;
    let model = IsingModel::generate(Family::Chain { m: 8 }, 11).unwrap();
    let exact = ExactSampler::new(beta);
    let params = SamplerParams {
        population_size: 2000,
        ..SamplerParams::default()
    };
    let mut seeds = SeedStream::new(31);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let draws: Vec<DrawResult> = (0..500)
        .map(|_| scp_basic(&model, &exact, &params, &mut seeds, &mut rng).unwrap())
        .collect();
    assert!(draws.iter().all(|d| d.refresh_calls == 8));
    let (mean, se) = ratio_mean_and_se(&model, beta, &draws);
    assert!((mean - 1.0).abs() <= 3.0 * se, "Z_hat / Z = {mean} +- {se}");
}

/// A poor heuristic only inflates the variance.
#[test]
fn short_annealing_is_unbiased_with_small_populations() {
    let beta = 1.0;
    let model = IsingModel::generate(Family::Chain { m: 8 }, 12).unwrap();
    let sa = SimulatedAnnealing::new(SaSchedule::linear(0.1, beta, 1, 1)).unwrap();
    let params = SamplerParams {
        population_size: 30,
        seed: 32,
        tree_mode: sss_core::TreeMode::Fresh,
        ..SamplerParams::default()
    };
    let mut sampler = sss_core::StateSpaceSampler::new(&model, &sa, params).unwrap();
    let draws: Vec<DrawResult> = (0..4000).map(|_| sampler.draw().unwrap()).collect();
    let (mean, se) = ratio_mean_and_se(&model, beta, &draws);
    assert!((mean - 1.0).abs() <= 3.0 * se, "Z_hat / Z = {mean} +- {se}");
}
