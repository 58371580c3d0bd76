//! Informed search for the top-K responsible texts.
//!
//! The context is recursively halved into contiguous groups until there are
//! more than K of them. Then, per iteration: score every group with the
//! configured attribution method, keep the K highest-scoring groups, and
//! halve any survivor with more than one text. The loop ends when every
//! survivor is a single text. Scoring a group measures its joint
//! contribution, so a group containing any responsible text keeps a high
//! score and is never pruned under the oracle-game conditions.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::attribution::{
    self, Group, LimePenalty, ScoreVector,
};
use crate::error::{Error, Result};
use crate::value::{OracleGame, ScoreSpace, ValueEngine};

/// Attribution method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Stc,
    Loo,
    /// Monte-Carlo Shapley with top-β denoising.
    ShapleyMc,
    /// Exact Shapley by subset enumeration; exponential in group count.
    ShapleyExact,
    Lime,
    /// Scaled per-text maximum over stc, loo, and shapley_mc.
    Ensemble,
}

impl MethodChoice {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "stc" => Ok(MethodChoice::Stc),
            "loo" => Ok(MethodChoice::Loo),
            "shapley" => Ok(MethodChoice::ShapleyMc),
            "shapley-exact" => Ok(MethodChoice::ShapleyExact),
            "lime" => Ok(MethodChoice::Lime),
            "ensemble" => Ok(MethodChoice::Ensemble),
            _ => Err(Error::InvalidConfig(format!("unknown method {name:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodChoice::Stc => "stc",
            MethodChoice::Loo => "loo",
            MethodChoice::ShapleyMc => "shapley",
            MethodChoice::ShapleyExact => "shapley-exact",
            MethodChoice::Lime => "lime",
            MethodChoice::Ensemble => "ensemble",
        }
    }
}

/// Knobs for one traceback run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Number of texts to return.
    pub k: usize,
    pub method: MethodChoice,
    /// Permutations per scoring pass for `shapley`.
    pub permutations: usize,
    /// Fraction of largest marginals averaged by denoising, in (0, 1].
    pub beta: f64,
    /// Scale applied to leave-one-out scores inside the ensemble.
    pub loo_scale: f64,
    pub seed: u64,
    pub score_space: ScoreSpace,
    /// Mask samples per scoring pass for `lime`.
    pub lime_samples: usize,
    /// Fixed L1 penalty for `lime`; `None` selects from the built-in grid.
    pub lime_penalty: Option<f64>,
    /// Maximum rounds for the iterative re-run procedure.
    pub round_cap: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            k: 5,
            method: MethodChoice::ShapleyMc,
            permutations: 20,
            beta: 0.2,
            loo_scale: 2.0,
            seed: 0,
            score_space: ScoreSpace::LogProbSum,
            lime_samples: 200,
            lime_penalty: None,
            round_cap: 10,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must be in (0, 1], got {}",
                self.beta
            )));
        }
        if self.permutations == 0 {
            return Err(Error::InvalidConfig("permutations must be >= 1".into()));
        }
        if self.loo_scale < 0.0 {
            return Err(Error::InvalidConfig("loo-scale must be >= 0".into()));
        }
        if self.round_cap == 0 {
            return Err(Error::InvalidConfig("round cap must be >= 1".into()));
        }
        Ok(())
    }

    fn lime_penalty(&self) -> LimePenalty {
        match self.lime_penalty {
            Some(l) => LimePenalty::Fixed(l),
            None => LimePenalty::Grid {
                max_nonzero: 2 * self.k,
            },
        }
    }
}

/// The groups alive at one iteration of the search.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub iteration: usize,
    pub groups: Vec<Group>,
}

impl GroupState {
    pub fn m(&self) -> usize {
        self.groups.len()
    }

    /// All text indices alive in this state, ascending.
    pub fn union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .groups
            .iter()
            .flat_map(|g| g.indices().iter().copied())
            .collect();
        all.sort_unstable();
        all
    }
}

/// One ranked text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopText {
    pub index: usize,
    pub score: f64,
}

/// Result of one traceback run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    /// Up to K texts, descending score; ties rank the lower index first.
    pub topk: Vec<TopText>,
    /// Distinct backend queries consumed by this run.
    pub queries_used: u64,
    /// Scoring iterations executed.
    pub iterations: usize,
    /// Per-method scaled top-K scores, present for ensemble runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_method_scores: Option<BTreeMap<String, BTreeMap<usize, f64>>>,
}

impl TraceResult {
    pub fn indices(&self) -> Vec<usize> {
        self.topk.iter().map(|t| t.index).collect()
    }
}

/// Split every group with two or more texts into two contiguous halves; odd
/// sizes give the extra text to the first half. Singletons pass through.
/// Ordering is preserved.
pub fn divide(groups: &[Group]) -> Vec<Group> {
    let mut out = Vec::with_capacity(groups.len() * 2);
    for group in groups {
        let len = group.len();
        if len < 2 {
            out.push(group.clone());
        } else {
            let mid = len.div_ceil(2);
            out.push(Group::new(group.indices()[..mid].to_vec()));
            out.push(Group::new(group.indices()[mid..].to_vec()));
        }
    }
    out
}

/// Trace back over the full context `0..n`.
pub fn trace(engine: &ValueEngine, n: usize, cfg: &TraceConfig) -> Result<TraceResult> {
    let universe: Vec<usize> = (0..n).collect();
    trace_over(engine, &universe, cfg)
}

/// Trace back over an explicit universe of text indices (ascending).
pub fn trace_over(engine: &ValueEngine, universe: &[usize], cfg: &TraceConfig) -> Result<TraceResult> {
    trace_states(engine, universe, cfg).map(|(result, _)| result)
}

/// As [`trace_over`], also returning every group state the search visited.
pub fn trace_states(
    engine: &ValueEngine,
    universe: &[usize],
    cfg: &TraceConfig,
) -> Result<(TraceResult, Vec<GroupState>)> {
    cfg.validate()?;
    if cfg.method == MethodChoice::Ensemble {
        return Err(Error::InvalidConfig(
            "ensemble runs through ensemble_trace".into(),
        ));
    }
    if universe.is_empty() {
        return Err(Error::InvalidConfig("context has no texts".into()));
    }
    let queries_before = engine.cache_stats().total_queries;

    let mut groups = vec![Group::new(universe.to_vec())];
    let mut t = 0;
    let mut states = vec![GroupState {
        iteration: t,
        groups: groups.clone(),
    }];
    while groups.len() <= cfg.k {
        let next = divide(&groups);
        if next.len() == groups.len() {
            break; // every group is a singleton already (n <= K)
        }
        groups = next;
        t += 1;
        states.push(GroupState {
            iteration: t,
            groups: groups.clone(),
        });
    }

    let mut iterations = 0;
    loop {
        let scores = score_units(engine, &groups, cfg, iterations)?;
        iterations += 1;
        let ranked = attribution::rank_desc(&scores.scores);
        let keep = cfg.k.min(groups.len());
        let survivors: Vec<(Group, f64)> = ranked[..keep]
            .iter()
            .map(|&pos| (groups[pos].clone(), scores.scores[pos]))
            .collect();
        if survivors.iter().all(|(g, _)| g.len() == 1) {
            let topk = survivors
                .into_iter()
                .map(|(g, score)| TopText {
                    index: g.indices()[0],
                    score,
                })
                .collect();
            let result = TraceResult {
                topk,
                queries_used: engine.cache_stats().total_queries - queries_before,
                iterations,
                per_method_scores: None,
            };
            return Ok((result, states));
        }
        // restore positional order before dividing so groups stay sorted by
        // leading index (rank_desc tie-breaking depends on it)
        let mut kept: Vec<Group> = survivors.into_iter().map(|(g, _)| g).collect();
        kept.sort_by_key(Group::leading_index);
        groups = divide(&kept);
        t += 1;
        states.push(GroupState {
            iteration: t,
            groups: groups.clone(),
        });
    }
}

fn score_units(
    engine: &ValueEngine,
    units: &[Group],
    cfg: &TraceConfig,
    iteration: usize,
) -> Result<ScoreVector> {
    match cfg.method {
        MethodChoice::Stc => attribution::stc(engine, units),
        MethodChoice::Loo => attribution::loo(engine, units),
        MethodChoice::ShapleyMc => attribution::shapley_mc(
            engine,
            units,
            cfg.permutations,
            cfg.beta,
            iteration_seed(cfg.seed, iteration),
        ),
        MethodChoice::ShapleyExact => attribution::shapley_exact(engine, units),
        MethodChoice::Lime => attribution::lime_surrogate(
            engine,
            units,
            cfg.lime_samples.max(units.len()),
            iteration_seed(cfg.seed, iteration),
            cfg.lime_penalty(),
        ),
        MethodChoice::Ensemble => Err(Error::InvalidConfig(
            "ensemble runs through ensemble_trace".into(),
        )),
    }
}

/// Distinct, reproducible seed per scoring iteration.
fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    mix_seed(seed, iteration as u64)
}

/// SplitMix-style mix of a base seed with a salt.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The method list of the default ensemble: stc and shapley at scale 1,
/// leave-one-out scaled by `loo_scale`.
pub fn default_ensemble(loo_scale: f64) -> Vec<(MethodChoice, f64)> {
    vec![
        (MethodChoice::Stc, 1.0),
        (MethodChoice::Loo, loo_scale),
        (MethodChoice::ShapleyMc, 1.0),
    ]
}

/// Run the search once per method and combine: each method contributes its
/// scaled top-K scores (every other text is 0), and a text's final score is
/// the maximum over methods. Returns the top-K texts by final score.
pub fn ensemble_trace(
    engine: &ValueEngine,
    universe: &[usize],
    cfg: &TraceConfig,
    methods: &[(MethodChoice, f64)],
) -> Result<TraceResult> {
    if methods.is_empty() {
        return Err(Error::InvalidConfig("ensemble needs at least one method".into()));
    }
    let queries_before = engine.cache_stats().total_queries;
    let mut per_method: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut combined: BTreeMap<usize, f64> = BTreeMap::new();
    let mut iterations = 0;
    for &(method, scale) in methods {
        if method == MethodChoice::Ensemble {
            return Err(Error::InvalidConfig("ensemble cannot nest".into()));
        }
        let mut method_cfg = cfg.clone();
        method_cfg.method = method;
        let result = trace_over(engine, universe, &method_cfg)?;
        iterations += result.iterations;
        let mut scaled: BTreeMap<usize, f64> = BTreeMap::new();
        for top in &result.topk {
            scaled.insert(top.index, top.score * scale);
        }
        for (&index, &score) in &scaled {
            let entry = combined.entry(index).or_insert(f64::NEG_INFINITY);
            if score > *entry {
                *entry = score;
            }
        }
        per_method.insert(method.name().to_string(), scaled);
    }
    let indices: Vec<usize> = combined.keys().copied().collect();
    let scores: Vec<f64> = combined.values().copied().collect();
    let ranked = attribution::rank_desc(&scores);
    let topk = ranked
        .into_iter()
        .take(cfg.k)
        .map(|pos| TopText {
            index: indices[pos],
            score: scores[pos],
        })
        .collect();
    Ok(TraceResult {
        topk,
        queries_used: engine.cache_stats().total_queries - queries_before,
        iterations,
        per_method_scores: Some(per_method),
    })
}

/// Dispatch on `cfg.method`, routing `Ensemble` through [`ensemble_trace`]
/// with the default method list.
pub fn trace_with_config(
    engine: &ValueEngine,
    universe: &[usize],
    cfg: &TraceConfig,
) -> Result<TraceResult> {
    if cfg.method == MethodChoice::Ensemble {
        ensemble_trace(engine, universe, cfg, &default_ensemble(cfg.loo_scale))
    } else {
        trace_over(engine, universe, cfg)
    }
}

/// Regenerates the output for a subset of texts; used by the iterative
/// re-run procedure to decide when every responsible text has been removed.
pub trait OutputGenerator: Send + Sync {
    fn generate_with(&self, included: &[usize]) -> Result<String>;
}

/// Deterministic generator driven by a game oracle: emits one string while
/// the game condition holds on the included texts and another once it
/// breaks.
pub struct OracleOutputGenerator {
    pub game: OracleGame,
    pub output_on: String,
    pub output_off: String,
}

impl OutputGenerator for OracleOutputGenerator {
    fn generate_with(&self, included: &[usize]) -> Result<String> {
        if self.game.holds(included.iter().copied()) {
            Ok(self.output_on.clone())
        } else {
            Ok(self.output_off.clone())
        }
    }
}

/// Result of the iterative re-run procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct IterativeOutcome {
    pub rounds: Vec<TraceResult>,
    /// Union of all rounds' top-K indices, ascending.
    pub identified: Vec<usize>,
    /// The round cap stopped the loop while the output was still unchanged.
    pub round_cap_hit: bool,
}

/// Run the search, remove the identified texts, and repeat while the
/// regenerated output still equals `output` (exact match after whitespace
/// normalization). Stops when the output changes, the context empties, or
/// `cfg.round_cap` rounds have run.
pub fn iterative_trace(
    engine: &ValueEngine,
    generator: &dyn OutputGenerator,
    n: usize,
    cfg: &TraceConfig,
    output: &str,
) -> Result<IterativeOutcome> {
    cfg.validate()?;
    let target = normalize_whitespace(output);
    let mut alive: Vec<usize> = (0..n).collect();
    let mut rounds = Vec::new();
    let mut identified = Vec::new();
    let mut round_cap_hit = false;
    loop {
        let result = trace_with_config(engine, &alive, cfg)?;
        let found = result.indices();
        identified.extend(found.iter().copied());
        alive.retain(|i| !found.contains(i));
        rounds.push(result);
        if alive.is_empty() {
            break;
        }
        let regenerated = generator.generate_with(&alive)?;
        if normalize_whitespace(&regenerated) != target {
            break;
        }
        if rounds.len() >= cfg.round_cap {
            round_cap_hit = true;
            break;
        }
    }
    identified.sort_unstable();
    identified.dedup();
    Ok(IterativeOutcome {
        rounds,
        identified,
        round_cap_hit,
    })
}

/// Trim and collapse every whitespace run to a single space.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::{GameKind, SubsetKey, ValueBackend};

    fn game_engine(kind: GameKind, critical: &[usize]) -> ValueEngine {
        ValueEngine::new(Box::new(
            OracleGame::new(kind, critical.iter().copied()).unwrap(),
        ))
    }

    fn exact_cfg(k: usize) -> TraceConfig {
        TraceConfig {
            k,
            method: MethodChoice::ShapleyExact,
            ..TraceConfig::default()
        }
    }

    #[test]
    fn divide_odd_gives_extra_to_first_half() {
        let out = divide(&[Group::new((0..5).collect())]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].indices(), &[0, 1, 2]);
        assert_eq!(out[1].indices(), &[3, 4]);
    }

    #[test]
    fn divide_passes_singletons_through() {
        let input = vec![Group::singleton(0), Group::singleton(1)];
        assert_eq!(divide(&input), input);
    }

    #[test]
    fn divide_three_times_reaches_singletons() {
        let mut groups = vec![Group::new((0..8).collect())];
        for _ in 0..3 {
            groups = divide(&groups);
        }
        assert_eq!(groups, Group::singletons(8));
    }

    #[test]
    fn trace_finds_existence_culprit() {
        let engine = game_engine(GameKind::Existence, &[5]);
        let result = trace(&engine, 16, &exact_cfg(2)).unwrap();
        assert_eq!(result.topk[0].index, 5);
        assert!(result.topk[0].score > 0.0);
    }

    #[test]
    fn trace_finds_unanimity_pair() {
        let engine = game_engine(GameKind::Unanimity, &[2, 11]);
        let result = trace(&engine, 16, &exact_cfg(2)).unwrap();
        let mut found = result.indices();
        found.sort_unstable();
        assert_eq!(found, vec![2, 11]);
    }

    #[test]
    fn trace_small_context_returns_all_texts() {
        let engine = game_engine(GameKind::Existence, &[1]);
        let result = trace(&engine, 3, &exact_cfg(5)).unwrap();
        assert_eq!(result.topk.len(), 3);
        assert_eq!(result.iterations, 1);
        assert_eq!(result.topk[0].index, 1);
    }

    #[test]
    fn trace_rejects_invalid_config() {
        let engine = game_engine(GameKind::Existence, &[0]);
        let bad = TraceConfig {
            k: 0,
            ..TraceConfig::default()
        };
        assert!(trace(&engine, 8, &bad).is_err());
    }

    #[test]
    fn trace_survivor_unions_shrink() {
        let engine = game_engine(GameKind::Unanimity, &[3, 12]);
        let (_, states) = trace_states(
            &engine,
            &(0..32).collect::<Vec<_>>(),
            &exact_cfg(3),
        )
        .unwrap();
        for pair in states.windows(2) {
            let prev = pair[0].union();
            let next = pair[1].union();
            assert!(next.iter().all(|i| prev.contains(i)));
        }
    }

    #[test]
    fn trace_terminates_within_log_bound() {
        for n in [1usize, 2, 7, 16, 33, 64] {
            let engine = game_engine(GameKind::Existence, &[n / 2]);
            let result = trace(&engine, n, &exact_cfg(4)).unwrap();
            let bound = (n as f64).log2().ceil() as usize + 1;
            assert!(
                result.iterations <= bound,
                "n={n}: {} > {bound}",
                result.iterations
            );
        }
    }

    #[test]
    fn trace_seed_determinism_with_mc() {
        let cfg = TraceConfig {
            k: 3,
            method: MethodChoice::ShapleyMc,
            permutations: 8,
            seed: 99,
            ..TraceConfig::default()
        };
        let a = trace(&game_engine(GameKind::Existence, &[7]), 24, &cfg).unwrap();
        let b = trace(&game_engine(GameKind::Existence, &[7]), 24, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ensemble_takes_scaled_maximum() {
        // backend where text 1 dominates; all methods agree, so the final
        // score must equal one of the scaled per-method scores
        let engine = game_engine(GameKind::Existence, &[1]);
        let cfg = TraceConfig {
            k: 2,
            ..TraceConfig::default()
        };
        let result =
            ensemble_trace(&engine, &(0..8).collect::<Vec<_>>(), &cfg, &default_ensemble(2.0))
                .unwrap();
        let per_method = result.per_method_scores.as_ref().unwrap();
        assert_eq!(per_method.len(), 3);
        for top in &result.topk {
            let max_over_methods = per_method
                .values()
                .filter_map(|m| m.get(&top.index))
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            assert_eq!(top.score, max_over_methods);
        }
        assert_eq!(result.topk[0].index, 1);
    }

    #[test]
    fn ensemble_single_method_matches_trace() {
        let cfg = exact_cfg(2);
        let solo = trace(&game_engine(GameKind::Existence, &[3]), 12, &cfg).unwrap();
        let ens = ensemble_trace(
            &game_engine(GameKind::Existence, &[3]),
            &(0..12).collect::<Vec<_>>(),
            &cfg,
            &[(MethodChoice::ShapleyExact, 1.0)],
        )
        .unwrap();
        assert_eq!(solo.topk, ens.topk);
    }

    #[test]
    fn ensemble_texts_outside_every_topk_score_zero() {
        let engine = game_engine(GameKind::Existence, &[1]);
        let cfg = TraceConfig {
            k: 2,
            ..TraceConfig::default()
        };
        let result =
            ensemble_trace(&engine, &(0..8).collect::<Vec<_>>(), &cfg, &default_ensemble(2.0))
                .unwrap();
        let per_method = result.per_method_scores.unwrap();
        let mentioned: std::collections::BTreeSet<usize> = per_method
            .values()
            .flat_map(|m| m.keys().copied())
            .collect();
        for index in 0..8 {
            if !mentioned.contains(&index) {
                assert!(!result.topk.iter().any(|t| t.index == index && t.score != 0.0));
            }
        }
    }

    #[test]
    fn iterative_trace_two_rounds_for_double_culprits() {
        // 10 independent culprits, K=5: one round removes five, the output
        // persists, a second round removes the rest.
        let culprits: Vec<usize> = vec![1, 4, 7, 10, 13, 16, 19, 22, 25, 28];
        let game = OracleGame::new(GameKind::Existence, culprits.iter().copied()).unwrap();
        let engine = ValueEngine::new(Box::new(game.clone()));
        let generator = OracleOutputGenerator {
            game,
            output_on: "attacked answer".into(),
            output_off: "clean answer".into(),
        };
        let cfg = exact_cfg(5);
        let outcome = iterative_trace(&engine, &generator, 32, &cfg, "attacked answer").unwrap();
        assert_eq!(outcome.rounds.len(), 2);
        assert!(!outcome.round_cap_hit);
        assert_eq!(outcome.identified, culprits);
    }

    #[test]
    fn iterative_trace_single_round_when_output_flips() {
        let game = OracleGame::new(GameKind::Existence, [3]).unwrap();
        let engine = ValueEngine::new(Box::new(game.clone()));
        let generator = OracleOutputGenerator {
            game,
            output_on: "bad".into(),
            output_off: "good".into(),
        };
        let outcome = iterative_trace(&engine, &generator, 16, &exact_cfg(5), "bad").unwrap();
        assert_eq!(outcome.rounds.len(), 1);
        assert!(outcome.identified.contains(&3));
    }

    #[test]
    fn iterative_trace_round_cap_reports_partial() {
        // generator that never flips: the cap must stop the loop
        struct Stuck;
        impl OutputGenerator for Stuck {
            fn generate_with(&self, _: &[usize]) -> Result<String> {
                Ok("same".into())
            }
        }
        let engine = game_engine(GameKind::Existence, &[0]);
        let cfg = TraceConfig {
            round_cap: 2,
            ..exact_cfg(2)
        };
        let outcome = iterative_trace(&engine, &Stuck, 16, &cfg, "same").unwrap();
        assert!(outcome.round_cap_hit);
        assert_eq!(outcome.rounds.len(), 2);
    }

    #[test]
    fn whitespace_normalization() {
        assert_eq!(normalize_whitespace("  a\t b\n\nc "), "a b c");
    }

    #[test]
    fn query_budget_within_logarithmic_bound() {
        // distinct evaluations stay below c * K * N * log2(n) for small c
        let (k, permutations) = (5usize, 10usize);
        for n in [64usize, 256] {
            let engine = game_engine(GameKind::Existence, &[n / 3]);
            let cfg = TraceConfig {
                k,
                method: MethodChoice::ShapleyMc,
                permutations,
                beta: 1.0,
                ..TraceConfig::default()
            };
            trace(&engine, n, &cfg).unwrap();
            let distinct = engine.cache_stats().misses;
            let bound = 4.0 * (k * permutations) as f64 * (n as f64).log2();
            assert!(
                (distinct as f64) <= bound,
                "n={n}: {distinct} > {bound}"
            );
        }
    }

    /// Flat Monte-Carlo Shapley over all n texts needs ~N*n evaluations;
    /// the search needs a small multiple of K*N*log2(n).
    #[test]
    fn search_beats_flat_shapley_on_queries() {
        let n = 256;
        let engine = game_engine(GameKind::Existence, &[100]);
        let cfg = TraceConfig {
            k: 5,
            method: MethodChoice::ShapleyMc,
            permutations: 10,
            ..TraceConfig::default()
        };
        trace(&engine, n, &cfg).unwrap();
        let search_queries = engine.cache_stats().misses;

        let flat_engine = game_engine(GameKind::Existence, &[100]);
        attribution::shapley_mc(&flat_engine, &Group::singletons(n), 10, 1.0, 0).unwrap();
        let flat_queries = flat_engine.cache_stats().misses;
        assert!(
            search_queries * 2 < flat_queries,
            "search {search_queries} vs flat {flat_queries}"
        );
    }

    #[test]
    fn oracle_generator_follows_game() {
        let generator = OracleOutputGenerator {
            game: OracleGame::new(GameKind::Unanimity, [0, 1]).unwrap(),
            output_on: "on".into(),
            output_off: "off".into(),
        };
        assert_eq!(generator.generate_with(&[0, 1, 5]).unwrap(), "on");
        assert_eq!(generator.generate_with(&[0, 5]).unwrap(), "off");
    }

    #[test]
    fn constant_value_keeps_tie_break_stable() {
        struct Flat;
        impl ValueBackend for Flat {
            fn evaluate(&self, _: &SubsetKey) -> Result<crate::value::BackendSample> {
                Ok(crate::value::BackendSample::free(0.5))
            }
            fn descriptor(&self) -> String {
                "flat".into()
            }
        }
        let engine = ValueEngine::new(Box::new(Flat));
        let result = trace(&engine, 16, &exact_cfg(3)).unwrap();
        // all scores tie at 0; the lowest-leading-index groups survive
        assert_eq!(result.indices(), vec![0, 1, 2]);
    }
}
