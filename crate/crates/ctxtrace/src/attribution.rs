//! Per-unit attribution methods over a value function.
//!
//! A *unit* is a group of text indices (possibly a singleton). Every method
//! here reduces to calls of v(·) on subsets of the units' indices:
//!
//! - `stc`: each unit scored alone.
//! - `loo`: drop in value when a unit is removed from the full set.
//! - `shapley_mc`: Monte-Carlo permutation sampling with top-β denoising.
//! - `shapley_enumerated`: every permutation, for small unit counts.
//! - `shapley_exact`: exact values by subset enumeration; the test oracle.
//! - `lime_surrogate`: L1-regularized linear surrogate fit on random masks.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::value::{SubsetKey, ValueEngine};

/// Maximum unit count for exact subset enumeration (2^m values).
pub const EXACT_UNIT_LIMIT: usize = 20;
/// Maximum unit count for full permutation enumeration (m! walks).
pub const ENUMERATED_UNIT_LIMIT: usize = 10;

/// An ordered set of text indices scored as one unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    indices: Vec<usize>,
}

impl Group {
    pub fn new(indices: Vec<usize>) -> Self {
        assert!(!indices.is_empty(), "a group must contain at least one text");
        Group { indices }
    }

    pub fn singleton(index: usize) -> Self {
        Group {
            indices: vec![index],
        }
    }

    /// Singleton groups for `0..n`.
    pub fn singletons(n: usize) -> Vec<Group> {
        (0..n).map(Group::singleton).collect()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Smallest contained text index; used for stable tie-breaking.
    pub fn leading_index(&self) -> usize {
        self.indices.iter().copied().min().unwrap()
    }
}

/// Scores aligned with the unit list that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub method: String,
    /// Backend queries consumed while scoring (cache hits excluded).
    pub queries_used: u64,
}

/// The units of one permutation walk and the marginal each unit earned.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationSample {
    /// Unit ids in arrival order.
    pub order: Vec<usize>,
    /// Marginal contribution per unit id (same indexing as the unit list).
    pub marginals: Vec<f64>,
}

/// A Bernoulli(1/2) inclusion mask over units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    pub bits: Vec<bool>,
}

/// Fitted surrogate model: per-unit weight, intercept, and the penalty the
/// fit actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateWeights {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub l1_penalty: f64,
}

/// L1 penalty selection for the surrogate fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LimePenalty {
    Fixed(f64),
    /// Smallest penalty on a 10-point logarithmic grid whose fit keeps at
    /// most this many nonzero weights.
    Grid { max_nonzero: usize },
}

fn union_key<'a, I: IntoIterator<Item = &'a Group>>(units: I) -> SubsetKey {
    SubsetKey::new(
        units
            .into_iter()
            .flat_map(|g| g.indices().iter().copied()),
    )
}

fn require_units(units: &[Group]) -> Result<()> {
    if units.is_empty() {
        return Err(Error::InvalidConfig("no units to score".into()));
    }
    Ok(())
}

/// Rank unit positions by descending score; ties go to the unit with the
/// lower position (callers order units by leading text index).
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Mean of the top `max(1, ceil(beta * len))` marginals.
///
/// `beta = 1` is computed in sample order and is exactly the plain
/// Monte-Carlo mean; smaller fractions average a sorted prefix.
pub fn denoised_mean(marginals: &[f64], beta: f64) -> f64 {
    assert!(!marginals.is_empty());
    let n = marginals.len();
    let keep = ((beta * n as f64).ceil() as usize).clamp(1, n);
    if keep == n {
        return marginals.iter().sum::<f64>() / n as f64;
    }
    let mut sorted = marginals.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[..keep].iter().sum::<f64>() / keep as f64
}

/// Single-text contribution: each unit scored in isolation.
pub fn stc(engine: &ValueEngine, units: &[Group]) -> Result<ScoreVector> {
    require_units(units)?;
    let before = engine.cache_stats().total_queries;
    let mut scores = Vec::with_capacity(units.len());
    for unit in units {
        let key = SubsetKey::new(unit.indices().iter().copied());
        scores.push(engine.eval(&key)?.value);
    }
    Ok(ScoreVector {
        scores,
        method: "stc".into(),
        queries_used: engine.cache_stats().total_queries - before,
    })
}

/// Leave-one-out: value drop when a unit is removed from the full set.
pub fn loo(engine: &ValueEngine, units: &[Group]) -> Result<ScoreVector> {
    require_units(units)?;
    let before = engine.cache_stats().total_queries;
    let full = union_key(units);
    let full_value = engine.eval(&full)?.value;
    let mut scores = Vec::with_capacity(units.len());
    for unit in units {
        let without = full.without(unit.indices());
        scores.push(full_value - engine.eval(&without)?.value);
    }
    Ok(ScoreVector {
        scores,
        method: "loo".into(),
        queries_used: engine.cache_stats().total_queries - before,
    })
}

/// Monte-Carlo Shapley with top-β denoising.
///
/// Draws `permutations` uniform orderings (with replacement) from a seeded
/// generator, walks each one accumulating marginal contributions, then
/// scores each unit as the mean of its top-β marginals.
pub fn shapley_mc(
    engine: &ValueEngine,
    units: &[Group],
    permutations: usize,
    beta: f64,
    seed: u64,
) -> Result<ScoreVector> {
    shapley_mc_detailed(engine, units, permutations, beta, seed).map(|(scores, _)| scores)
}

/// As [`shapley_mc`], also returning the raw permutation samples.
pub fn shapley_mc_detailed(
    engine: &ValueEngine,
    units: &[Group],
    permutations: usize,
    beta: f64,
    seed: u64,
) -> Result<(ScoreVector, Vec<PermutationSample>)> {
    require_units(units)?;
    validate_beta(beta)?;
    if permutations == 0 {
        return Err(Error::InvalidConfig("permutations must be >= 1".into()));
    }
    let before = engine.cache_stats().total_queries;
    let m = units.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(permutations);
    let mut per_unit: Vec<Vec<f64>> = vec![Vec::with_capacity(permutations); m];
    let mut order: Vec<usize> = (0..m).collect();
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        let marginals = walk_permutation(engine, units, &order)?;
        for (u, &marginal) in marginals.iter().enumerate() {
            per_unit[u].push(marginal);
        }
        samples.push(PermutationSample {
            order: order.clone(),
            marginals,
        });
    }
    let scores = per_unit
        .iter()
        .map(|ms| denoised_mean(ms, beta))
        .collect();
    Ok((
        ScoreVector {
            scores,
            method: "shapley_mc".into(),
            queries_used: engine.cache_stats().total_queries - before,
        },
        samples,
    ))
}

/// Shapley estimate over *every* permutation of the units. Permutation-route
/// counterpart to [`shapley_exact`]; they must agree for `beta = 1`.
pub fn shapley_enumerated(engine: &ValueEngine, units: &[Group], beta: f64) -> Result<ScoreVector> {
    require_units(units)?;
    validate_beta(beta)?;
    let m = units.len();
    if m > ENUMERATED_UNIT_LIMIT {
        return Err(Error::TooManyUnits {
            got: m,
            limit: ENUMERATED_UNIT_LIMIT,
        });
    }
    let before = engine.cache_stats().total_queries;
    let mut per_unit: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut order: Vec<usize> = (0..m).collect();
    permute_all(&mut order, 0, &mut |order| {
        let marginals = walk_permutation(engine, units, order)?;
        for (u, &marginal) in marginals.iter().enumerate() {
            per_unit[u].push(marginal);
        }
        Ok(())
    })?;
    let scores = per_unit
        .iter()
        .map(|ms| denoised_mean(ms, beta))
        .collect();
    Ok(ScoreVector {
        scores,
        method: "shapley_enumerated".into(),
        queries_used: engine.cache_stats().total_queries - before,
    })
}

/// Exact Shapley values by subset enumeration.
///
/// φ_i = Σ_{R ⊆ U∖{i}} [ v(R ∪ {i}) − v(R) ] / (m · C(m−1, |R|)), evaluated
/// over all 2^m subsets. Exponential: guarded at [`EXACT_UNIT_LIMIT`].
pub fn shapley_exact(engine: &ValueEngine, units: &[Group]) -> Result<ScoreVector> {
    require_units(units)?;
    let m = units.len();
    if m > EXACT_UNIT_LIMIT {
        return Err(Error::TooManyUnits {
            got: m,
            limit: EXACT_UNIT_LIMIT,
        });
    }
    let before = engine.cache_stats().total_queries;
    let mut table = vec![0.0_f64; 1 << m];
    for mask in 0..(1usize << m) {
        let key = union_key((0..m).filter(|&u| mask & (1 << u) != 0).map(|u| &units[u]));
        table[mask] = engine.eval(&key)?.value;
    }
    // weight by coalition size: 1 / (m * C(m-1, r))
    let weights: Vec<f64> = (0..m)
        .map(|r| 1.0 / (m as f64 * binomial(m - 1, r)))
        .collect();
    let mut scores = vec![0.0_f64; m];
    for (u, score) in scores.iter_mut().enumerate() {
        let bit = 1usize << u;
        let mut acc = 0.0;
        for mask in 0..(1usize << m) {
            if mask & bit == 0 {
                let r = mask.count_ones() as usize;
                acc += weights[r] * (table[mask | bit] - table[mask]);
            }
        }
        *score = acc;
    }
    Ok(ScoreVector {
        scores,
        method: "shapley_exact".into(),
        queries_used: engine.cache_stats().total_queries - before,
    })
}

/// Sparse linear surrogate: sample Bernoulli(1/2) masks, evaluate each
/// masked subset, and fit L1-regularized least squares with a uniform
/// sample weighting. The fitted weight per unit is its score.
pub fn lime_surrogate(
    engine: &ValueEngine,
    units: &[Group],
    samples: usize,
    seed: u64,
    penalty: LimePenalty,
) -> Result<ScoreVector> {
    lime_surrogate_detailed(engine, units, samples, seed, penalty).map(|(scores, _)| scores)
}

/// As [`lime_surrogate`], also returning the fitted surrogate.
pub fn lime_surrogate_detailed(
    engine: &ValueEngine,
    units: &[Group],
    samples: usize,
    seed: u64,
    penalty: LimePenalty,
) -> Result<(ScoreVector, SurrogateWeights)> {
    require_units(units)?;
    let m = units.len();
    if samples < m {
        return Err(Error::InvalidConfig(format!(
            "need at least {m} samples for {m} units, got {samples}"
        )));
    }
    let before = engine.cache_stats().total_queries;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<MaskVector> = (0..samples)
        .map(|_| MaskVector {
            bits: (0..m).map(|_| rng.random_bool(0.5)).collect(),
        })
        .collect();
    if masks.windows(2).all(|w| w[0] == w[1]) && samples > 1 {
        return Err(Error::DegenerateDesign);
    }
    let mut values = Vec::with_capacity(samples);
    for mask in &masks {
        let key = union_key(
            mask.bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(u, _)| &units[u]),
        );
        values.push(engine.eval(&key)?.value);
    }
    let surrogate = fit_lasso(&masks, &values, penalty)?;
    Ok((
        ScoreVector {
            scores: surrogate.weights.clone(),
            method: "lime".into(),
            queries_used: engine.cache_stats().total_queries - before,
        },
        surrogate,
    ))
}

fn validate_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "beta must be in (0, 1], got {beta}"
        )));
    }
    Ok(())
}

/// Evaluate prefixes of one permutation, returning the marginal of each
/// unit id.
fn walk_permutation(
    engine: &ValueEngine,
    units: &[Group],
    order: &[usize],
) -> Result<Vec<f64>> {
    let mut marginals = vec![0.0_f64; units.len()];
    let mut prefix = SubsetKey::empty();
    let mut prev = engine.eval(&prefix)?.value;
    for &u in order {
        prefix = prefix.union(units[u].indices().iter().copied());
        let current = engine.eval(&prefix)?.value;
        marginals[u] = current - prev;
        prev = current;
    }
    Ok(marginals)
}

/// Heap's algorithm, calling `visit` on every permutation of `items`.
fn permute_all<F: FnMut(&[usize]) -> Result<()>>(
    items: &mut Vec<usize>,
    k: usize,
    visit: &mut F,
) -> Result<()> {
    let n = items.len();
    if k == n.saturating_sub(1) || n == 0 {
        return visit(items);
    }
    for i in k..n {
        items.swap(k, i);
        permute_all(items, k + 1, visit)?;
        items.swap(k, i);
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k.min(n));
    let mut result = 1.0_f64;
    for i in 0..k {
        result = result * (n - i) as f64 / (i + 1) as f64;
    }
    result
}

/// Cyclic coordinate descent for
/// min_w 1/(2s)·‖y − Xw − b‖² + λ‖w‖₁ with binary design X from `masks`.
/// Columns and target are centered, so the intercept is recovered at the
/// end. Zero-variance columns keep weight 0.
fn fit_lasso(masks: &[MaskVector], values: &[f64], penalty: LimePenalty) -> Result<SurrogateWeights> {
    let s = masks.len();
    let m = masks[0].bits.len();
    let x_mean: Vec<f64> = (0..m)
        .map(|j| masks.iter().filter(|mk| mk.bits[j]).count() as f64 / s as f64)
        .collect();
    let y_mean = values.iter().sum::<f64>() / s as f64;
    // centered design, column-major
    let cols: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            masks
                .iter()
                .map(|mk| (if mk.bits[j] { 1.0 } else { 0.0 }) - x_mean[j])
                .collect()
        })
        .collect();
    let yc: Vec<f64> = values.iter().map(|&v| v - y_mean).collect();
    let col_sq: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();

    let lambda_max = (0..m)
        .map(|j| {
            cols[j]
                .iter()
                .zip(&yc)
                .map(|(x, y)| x * y)
                .sum::<f64>()
                .abs()
                / s as f64
        })
        .fold(0.0_f64, f64::max);

    let lambdas: Vec<f64> = match penalty {
        LimePenalty::Fixed(l) => vec![l],
        LimePenalty::Grid { .. } => {
            if lambda_max == 0.0 {
                vec![0.0]
            } else {
                // 10 points, log-spaced over four decades below lambda_max
                (0..10)
                    .map(|i| lambda_max * 10f64.powf(-4.0 * i as f64 / 9.0))
                    .collect()
            }
        }
    };

    let mut chosen: Option<(f64, Vec<f64>)> = None;
    for &lambda in &lambdas {
        let w = coordinate_descent(&cols, &yc, &col_sq, s, lambda);
        let nonzero = w.iter().filter(|v| v.abs() > 1e-12).count();
        let fits_cap = match penalty {
            LimePenalty::Fixed(_) => true,
            LimePenalty::Grid { max_nonzero } => nonzero <= max_nonzero,
        };
        if fits_cap {
            chosen = Some((lambda, w));
        }
    }
    // The grid is descending, so the last qualifying entry is the smallest
    // penalty meeting the cap; lambda_max itself always qualifies (all-zero).
    let (l1_penalty, weights) =
        chosen.unwrap_or_else(|| (lambdas[0], coordinate_descent(&cols, &yc, &col_sq, s, lambdas[0])));
    let intercept = y_mean
        - weights
            .iter()
            .zip(&x_mean)
            .map(|(w, xm)| w * xm)
            .sum::<f64>();
    Ok(SurrogateWeights {
        weights,
        intercept,
        l1_penalty,
    })
}

fn coordinate_descent(
    cols: &[Vec<f64>],
    yc: &[f64],
    col_sq: &[f64],
    s: usize,
    lambda: f64,
) -> Vec<f64> {
    let m = cols.len();
    let mut w = vec![0.0_f64; m];
    let mut residual = yc.to_vec();
    let threshold = lambda * s as f64;
    for _ in 0..10_000 {
        let mut max_delta = 0.0_f64;
        for j in 0..m {
            if col_sq[j] == 0.0 {
                continue;
            }
            let old = w[j];
            // rho = x_j . residual + old * ||x_j||^2
            let rho: f64 = cols[j]
                .iter()
                .zip(residual.iter())
                .map(|(x, r)| x * r)
                .sum::<f64>()
                + old * col_sq[j];
            let new = soft_threshold(rho, threshold) / col_sq[j];
            if new != old {
                let delta = new - old;
                for (r, x) in residual.iter_mut().zip(cols[j].iter()) {
                    *r -= delta * x;
                }
                w[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < 1e-12 {
            break;
        }
    }
    w
}

fn soft_threshold(value: f64, threshold: f64) -> f64 {
    if value > threshold {
        value - threshold
    } else if value < -threshold {
        value + threshold
    } else {
        0.0
    }
}
