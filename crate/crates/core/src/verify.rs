//! Self-checks behind `flora-sim verify`.
//!
//! Each check builds seeded inputs, runs the library, and compares against a
//! direct dense computation.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::aggregation::{
    aggregate_fedit, aggregate_flora, aggregate_zero_padding, fedit_noise, oracle_delta, shuffled_stack, weighted,
    WeightedUpdate,
};
use crate::comm::{summarize, CommLedger, Protocol};
use crate::config::{ExperimentConfig, HETERO_RANKS};
use crate::data::{gen_task, partition, SkewKind, SkewSpec};
use crate::fed_sim::{run_strategy, Executor, Strategy};
use crate::lora::{stack_adapters, trainable_fraction, BaseWeights, Dim, LoraAdapter, Matrix};
use crate::rng::{derive_seed, rng_from_seed, SimRng};
use crate::training::{loss_and_grads, product_step, LossKind, ToyModel, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name,
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &'static str, r: crate::Result<(bool, String)>) -> Self {
        match r {
            Ok((ok, detail)) => Check::new(name, ok, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

type CheckFn = fn() -> crate::Result<(bool, String)>;

fn gaussian(rng: &mut SimRng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn random_updates(dim: Dim, ranks: &[usize], seed: u64) -> crate::Result<Vec<WeightedUpdate>> {
    let mut rng = rng_from_seed(seed);
    let adapters = ranks
        .iter()
        .map(|&r| LoraAdapter::new(gaussian(&mut rng, r, dim.n), gaussian(&mut rng, dim.m, r)))
        .collect::<crate::Result<Vec<_>>>()?;
    let raw: Vec<f64> = ranks.iter().map(|&r| r as f64 + 1.0).collect();
    let total: f64 = raw.iter().sum();
    weighted(adapters, &raw.iter().map(|w| w / total).collect::<Vec<_>>())
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Dense `Σ_k B_k A_k`, accumulated one rank-1 term at a time.
fn naive_sum(adapters: &[LoraAdapter]) -> Matrix {
    let dim = adapters[0].dim();
    let mut out = Matrix::zeros((dim.m, dim.n));
    for ad in adapters {
        for j in 0..ad.rank() {
            for i in 0..dim.m {
                for c in 0..dim.n {
                    out[[i, c]] += ad.b()[[i, j]] * ad.a()[[j, c]];
                }
            }
        }
    }
    out
}

fn stacking_is_exact() -> crate::Result<(bool, String)> {
    let dim = Dim::new(24, 20)?;
    let ups = random_updates(dim, &HETERO_RANKS, 11)?;
    let adapters: Vec<LoraAdapter> = ups.iter().map(|u| u.adapter.clone()).collect();
    let stacked = stack_adapters(&adapters)?;
    let err = max_abs(&(stacked.delta() - naive_sum(&adapters)));
    let total_rank: usize = HETERO_RANKS.iter().sum();
    let bound = 8.0 * f64::EPSILON * total_rank as f64 * 16.0;
    Ok((stacked.rank() == 160 && err <= bound, format!("rank {}, max error {err:.3e}", stacked.rank())))
}

fn flora_matches_oracle() -> crate::Result<(bool, String)> {
    let ups = random_updates(Dim::new(12, 9)?, &[3, 1, 5, 2], 12)?;
    let err = max_abs(&(aggregate_flora(&ups)?.delta() - oracle_delta(&ups)?));
    Ok((err <= 1e-12, format!("max error {err:.3e}")))
}

fn fedit_decomposes() -> crate::Result<(bool, String)> {
    let ups = random_updates(Dim::new(10, 8)?, &[4; 5], 13)?;
    let report = fedit_noise(&ups)?;
    let fedit = aggregate_fedit(&ups)?.delta();
    let err = max_abs(&(&report.signal + &report.cross - &fedit));
    let pass = err <= 1e-12 && report.relative_noise > 0.0;
    Ok((pass, format!("recomposition error {err:.3e}, relative noise {:.4}", report.relative_noise)))
}

fn zero_padding_reduces_to_fedit() -> crate::Result<(bool, String)> {
    let ups = random_updates(Dim::new(7, 6)?, &[3; 4], 14)?;
    let same = aggregate_zero_padding(&ups)? == aggregate_fedit(&ups)?;
    Ok((same, "homogeneous ranks give identical factors".into()))
}

fn shuffle_preserves_delta() -> crate::Result<(bool, String)> {
    let ups = random_updates(Dim::new(9, 11)?, &[4, 2, 6], 15)?;
    let reference = aggregate_flora(&ups)?.delta();
    let worst = (0..5u64)
        .map(|s| shuffled_stack(&ups, s).map(|a| max_abs(&(a.delta() - &reference))))
        .collect::<crate::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok((worst <= 1e-10, format!("worst deviation over 5 seeds {worst:.3e}")))
}

fn product_identity_holds() -> crate::Result<(bool, String)> {
    let dim = Dim::new(5, 4)?;
    let task = gen_task(dim, 40, 0.1, 16)?;
    let mut rng = rng_from_seed(17);
    let adapter = LoraAdapter::new(gaussian(&mut rng, 2, dim.n), gaussian(&mut rng, dim.m, 2))?;
    let model = ToyModel::new(task.base.clone(), adapter.clone())?;
    let batch: Vec<_> = task.train.iter().take(8).collect();
    let grads = loss_and_grads(&model, &batch, LossKind::SquaredError)?;
    let step = product_step(&adapter, &grads, 0.1)?;
    let ok = step
        .actual
        .iter()
        .zip(&step.predicted)
        .zip(&step.scale)
        .all(|((a, p), s)| (a - p).abs() <= 64.0 * f64::EPSILON * s.max(1.0));
    Ok((ok, format!("second-order norm {:.3e}", max_abs(&step.second_order))))
}

fn comm_matches_closed_form() -> crate::Result<(bool, String)> {
    let dim = Dim::new(4096, 4096)?;
    let (k, r, t) = (10usize, 16usize, 3usize);
    let mut ok = true;
    let mut detail = Vec::new();
    for protocol in [Protocol::Flora, Protocol::Fedit, Protocol::FullFineTuning] {
        let mut ledger = CommLedger::new();
        for round in 0..t {
            ledger.charge_round(protocol, dim, &vec![r; k], k, round)?;
        }
        let mn = (dim.m * dim.n) as u64;
        let rmn = (r * (dim.m + dim.n)) as u64;
        let per_round = match protocol {
            Protocol::Flora => rmn + k as u64 * rmn,
            Protocol::Fedit => 2 * rmn,
            _ => 2 * mn,
        };
        let expect = k as u64 * (mn + t as u64 * per_round);
        let ratio = summarize(&ledger, t)?.ratio(protocol).unwrap_or(f64::NAN);
        ok &= ledger.total(protocol) == expect;
        detail.push(format!("{} {:.4}", protocol.name(), ratio));
    }
    let frac = trainable_fraction(dim, 16)?;
    ok &= (frac - 0.0078125).abs() < 1e-15;
    Ok((ok, format!("ratios to full FT: {}", detail.join(", "))))
}

fn partition_covers_train_set() -> crate::Result<(bool, String)> {
    let task = gen_task(Dim::new(6, 6)?, 400, 0.1, 18)?;
    let spec = SkewSpec::single(SkewKind::SizeSkew, 1.0, 19);
    let shards = partition(&task, 7, &spec)?;
    let mut ids: Vec<usize> = shards.iter().flat_map(|s| s.samples.iter().map(|x| x.id)).collect();
    ids.sort_unstable();
    let mut expect: Vec<usize> = task.train.iter().map(|s| s.id).collect();
    expect.sort_unstable();
    Ok((ids == expect, format!("{} samples over {} shards", ids.len(), shards.len())))
}

fn small_config(seed: u64) -> crate::Result<ExperimentConfig> {
    Ok(ExperimentConfig {
        dim: Dim::new(8, 8)?,
        k_clients: 4,
        ranks: vec![2; 4],
        rounds: 2,
        samples: 200,
        train: TrainConfig {
            learning_rate: 0.02,
            batch_size: 8,
            ..TrainConfig::default()
        },
        seed,
        ..ExperimentConfig::default()
    })
}

fn single_client_collapses() -> crate::Result<(bool, String)> {
    let cfg = ExperimentConfig {
        k_clients: 1,
        ranks: vec![3],
        ..small_config(20)?
    };
    let flora = run_strategy(&cfg, Strategy::Flora, &Executor::Serial)?.final_base;
    let fedit = run_strategy(&cfg, Strategy::Fedit, &Executor::Serial)?.final_base;
    let err = max_abs(&(flora.w() - fedit.w()));
    Ok((err <= 8.0 * f64::EPSILON * max_abs(flora.w()).max(1.0), format!("max difference {err:.3e}")))
}

fn runs_are_deterministic() -> crate::Result<(bool, String)> {
    let cfg = small_config(derive_seed(&[21]))?;
    let a = run_strategy(&cfg, Strategy::Flora, &Executor::Serial)?;
    let b = run_strategy(&cfg, Strategy::Flora, &Executor::Ambient)?;
    let same = a.rounds == b.rounds && a.final_base == b.final_base;
    Ok((same, format!("final weights {}", &a.final_base.fingerprint()[..16])))
}

fn base_untouched_at_zero_lr() -> crate::Result<(bool, String)> {
    let mut cfg = small_config(22)?;
    cfg.train.learning_rate = 0.0;
    let rep = run_strategy(&cfg, Strategy::Flora, &Executor::Serial)?;
    let start: &BaseWeights = &crate::fed_sim::build_setup(&cfg)?.task.base;
    Ok((&rep.final_base == start, "lr = 0 leaves the global weights bit-identical".into()))
}

/// Runs every check in a fixed order.
pub fn run_checks() -> Vec<Check> {
    let checks: [(&'static str, CheckFn); 11] = [
        ("stacking_exact", stacking_is_exact),
        ("flora_equals_weighted_sum", flora_matches_oracle),
        ("fedit_signal_plus_cross", fedit_decomposes),
        ("zero_padding_homogeneous", zero_padding_reduces_to_fedit),
        ("shuffle_invariance", shuffle_preserves_delta),
        ("one_step_product_identity", product_identity_holds),
        ("comm_closed_form", comm_matches_closed_form),
        ("partition_covers_train", partition_covers_train_set),
        ("single_client_collapse", single_client_collapses),
        ("determinism", runs_are_deterministic),
        ("zero_lr_identity", base_untouched_at_zero_lr),
    ];
    checks.iter().map(|(name, f)| Check::from_result(name, f())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_checks() {
            assert!(c.passed, "{}", c.line());
        }
    }
}
