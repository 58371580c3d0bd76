//! The value function v(U) over text subsets.
//!
//! Every attribution method in this crate asks exactly one question: how
//! valuable is a given subset of texts for producing the output? This module
//! owns that abstraction: canonical subset keys, the caching engine with
//! query accounting, deterministic game oracles for verification, and the
//! BLEU scorer used by the black-box backend.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};

/// Whether log-probabilities are summed over output tokens or averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSpace {
    LogProbSum,
    PerTokenMean,
}

impl Default for ScoreSpace {
    fn default() -> Self {
        ScoreSpace::LogProbSum
    }
}

/// Canonical subset of text indices: sorted, deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubsetKey(Vec<usize>);

impl SubsetKey {
    pub fn new<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        let set: BTreeSet<usize> = indices.into_iter().collect();
        SubsetKey(set.into_iter().collect())
    }

    pub fn empty() -> Self {
        SubsetKey(Vec::new())
    }

    pub fn full(n: usize) -> Self {
        SubsetKey((0..n).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    /// Key with `other`'s indices added.
    pub fn union<I: IntoIterator<Item = usize>>(&self, other: I) -> Self {
        let mut set: BTreeSet<usize> = self.0.iter().copied().collect();
        set.extend(other);
        SubsetKey(set.into_iter().collect())
    }

    /// Key with `other`'s indices removed.
    pub fn without(&self, other: &[usize]) -> Self {
        let drop: BTreeSet<usize> = other.iter().copied().collect();
        SubsetKey(self.0.iter().copied().filter(|i| !drop.contains(i)).collect())
    }
}

/// Value of one subset plus cumulative accounting at the time of the call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueResult {
    pub value: f64,
    /// Backend calls issued by the engine so far (cache hits excluded).
    pub queries_used: u64,
    /// Tokens consumed so far; 0 for oracle and synthetic backends.
    pub tokens_used: u64,
}

/// Cumulative cache accounting for one engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    /// Backend calls only; equals `misses` while caching is enabled.
    pub total_queries: u64,
}

/// One backend evaluation: the raw value and tokens it consumed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackendSample {
    pub value: f64,
    pub tokens: u64,
}

impl BackendSample {
    pub fn free(value: f64) -> Self {
        BackendSample { value, tokens: 0 }
    }
}

/// Anything that can price a subset of texts. Implementations must be
/// deterministic for identical subsets within one engine lifetime.
pub trait ValueBackend: Send + Sync {
    fn evaluate(&self, subset: &SubsetKey) -> Result<BackendSample>;
    /// Stable identifier used in resolved-config echoes.
    fn descriptor(&self) -> String;
}

/// Caching, counting front-end over a [`ValueBackend`].
///
/// The cache key is the canonical subset; an engine is constructed per
/// (backend, query, score space), so that triple is implicit. Counters are
/// atomic and the cache is internally synchronized, so `eval` may be called
/// concurrently.
pub struct ValueEngine {
    backend: Box<dyn ValueBackend>,
    cache: Mutex<HashMap<SubsetKey, f64>>,
    caching: bool,
    hits: AtomicU64,
    misses: AtomicU64,
    tokens: AtomicU64,
}

impl ValueEngine {
    pub fn new(backend: Box<dyn ValueBackend>) -> Self {
        ValueEngine {
            backend,
            cache: Mutex::new(HashMap::new()),
            caching: true,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            tokens: AtomicU64::new(0),
        }
    }

    /// An engine that forwards every call to the backend.
    pub fn without_cache(backend: Box<dyn ValueBackend>) -> Self {
        let mut engine = Self::new(backend);
        engine.caching = false;
        engine
    }

    pub fn descriptor(&self) -> String {
        self.backend.descriptor()
    }

    /// v(subset), served from cache when possible.
    pub fn eval(&self, subset: &SubsetKey) -> Result<ValueResult> {
        if self.caching {
            let cached = self.cache.lock().unwrap().get(subset).copied();
            if let Some(value) = cached {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(self.result(value));
            }
        }
        let sample = self.backend.evaluate(subset)?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        self.tokens.fetch_add(sample.tokens, Ordering::Relaxed);
        if self.caching {
            self.cache
                .lock()
                .unwrap()
                .insert(subset.clone(), sample.value);
        }
        Ok(self.result(sample.value))
    }

    fn result(&self, value: f64) -> ValueResult {
        ValueResult {
            value,
            queries_used: self.misses.load(Ordering::Relaxed),
            tokens_used: self.tokens.load(Ordering::Relaxed),
        }
    }

    pub fn cache_stats(&self) -> CacheStats {
        let misses = self.misses.load(Ordering::Relaxed);
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses,
            total_queries: misses,
        }
    }

    pub fn tokens_used(&self) -> u64 {
        self.tokens.load(Ordering::Relaxed)
    }
}

// ---------------------------------------------------------------------------
// Game oracles
// ---------------------------------------------------------------------------

/// The two cooperative-game shapes an LLM generation can take when a
/// critical set of texts controls the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameKind {
    /// Output appears iff *all* critical texts are present.
    Unanimity,
    /// Output appears iff *at least one* critical text is present.
    Existence,
}

/// Indicator-valued oracle: v(U) = 1 iff the game condition holds on U.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleGame {
    pub kind: GameKind,
    critical: BTreeSet<usize>,
}

impl OracleGame {
    pub fn new<I: IntoIterator<Item = usize>>(kind: GameKind, critical: I) -> Result<Self> {
        let critical: BTreeSet<usize> = critical.into_iter().collect();
        if critical.is_empty() {
            return Err(Error::InvalidConfig(
                "oracle game needs a non-empty critical set".into(),
            ));
        }
        Ok(OracleGame { kind, critical })
    }

    pub fn critical_set(&self) -> &BTreeSet<usize> {
        &self.critical
    }

    /// 1.0 or 0.0 per the game definition.
    pub fn indicator(&self, subset: &SubsetKey) -> f64 {
        let holds = match self.kind {
            GameKind::Unanimity => self.critical.iter().all(|&i| subset.contains(i)),
            GameKind::Existence => self.critical.iter().any(|&i| subset.contains(i)),
        };
        if holds {
            1.0
        } else {
            0.0
        }
    }

    /// Whether the game condition holds for a plain index collection.
    pub fn holds<I: IntoIterator<Item = usize>>(&self, included: I) -> bool {
        self.indicator(&SubsetKey::new(included)) == 1.0
    }

    /// Parse the CLI spelling `unanimity:1,2` / `existence:5`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, rest) = spec
            .split_once(':')
            .ok_or_else(|| Error::InvalidConfig(format!("bad oracle spec {spec:?}")))?;
        let kind = match kind {
            "unanimity" => GameKind::Unanimity,
            "existence" => GameKind::Existence,
            _ => return Err(Error::InvalidConfig(format!("bad game kind {kind:?}"))),
        };
        let critical = rest
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad index {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        OracleGame::new(kind, critical)
    }
}

impl ValueBackend for OracleGame {
    fn evaluate(&self, subset: &SubsetKey) -> Result<BackendSample> {
        Ok(BackendSample::free(self.indicator(subset)))
    }

    fn descriptor(&self) -> String {
        let indices = self
            .critical
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",");
        match self.kind {
            GameKind::Unanimity => format!("oracle:unanimity:{indices}"),
            GameKind::Existence => format!("oracle:existence:{indices}"),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic backends for tests, examples, and no-attack cases
// ---------------------------------------------------------------------------

/// v(U) = base + Σ_{i∈U} coeffs[i]; exactly linear, so least-squares and
/// Shapley recover `coeffs` directly.
#[derive(Debug, Clone)]
pub struct AdditiveBackend {
    pub base: f64,
    pub coeffs: Vec<f64>,
}

impl ValueBackend for AdditiveBackend {
    fn evaluate(&self, subset: &SubsetKey) -> Result<BackendSample> {
        let sum: f64 = subset.indices().iter().map(|&i| self.coeffs[i]).sum();
        Ok(BackendSample::free(self.base + sum))
    }

    fn descriptor(&self) -> String {
        format!("synthetic:additive:{}", self.coeffs.len())
    }
}

/// Full lookup table over subsets; evaluating a missing key is a bug in the
/// caller, reported as a protocol error.
#[derive(Debug, Clone, Default)]
pub struct TableBackend {
    pub values: HashMap<SubsetKey, f64>,
}

impl ValueBackend for TableBackend {
    fn evaluate(&self, subset: &SubsetKey) -> Result<BackendSample> {
        self.values
            .get(subset)
            .copied()
            .map(BackendSample::free)
            .ok_or_else(|| Error::ProtocolError(format!("no table entry for {subset:?}")))
    }

    fn descriptor(&self) -> String {
        format!("synthetic:table:{}", self.values.len())
    }
}

/// v ≡ constant. Used for no-attack cases where no text moves the output.
#[derive(Debug, Clone, Copy)]
pub struct ConstantBackend(pub f64);

impl ValueBackend for ConstantBackend {
    fn evaluate(&self, _subset: &SubsetKey) -> Result<BackendSample> {
        Ok(BackendSample::free(self.0))
    }

    fn descriptor(&self) -> String {
        format!("synthetic:constant:{}", self.0)
    }
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

/// BLEU-4 with uniform n-gram weights, add-one smoothing on orders 2..4,
/// and the standard brevity penalty. Tokens are whitespace-delimited.
/// Returns a score in [0, 1].
pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    const MAX_ORDER: usize = 4;
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refr: Vec<&str> = reference.split_whitespace().collect();
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }

    let mut log_precision_sum = 0.0;
    for order in 1..=MAX_ORDER {
        let cand_counts = ngram_counts(&cand, order);
        let ref_counts = ngram_counts(&refr, order);
        let total: u64 = cand_counts.values().sum();
        let matched: u64 = cand_counts
            .iter()
            .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = if order == 1 {
            if total == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if precision == 0.0 {
            return 0.0;
        }
        log_precision_sum += precision.ln() / MAX_ORDER as f64;
    }

    let c = cand.len() as f64;
    let r = refr.len() as f64;
    let brevity = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    brevity * log_precision_sum.exp()
}

fn ngram_counts<'a>(tokens: &[&'a str], order: usize) -> HashMap<Vec<&'a str>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= order {
        for window in tokens.windows(order) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine(backend: impl ValueBackend + 'static) -> ValueEngine {
        ValueEngine::new(Box::new(backend))
    }

    #[test]
    fn subset_key_canonicalizes() {
        let a = SubsetKey::new([3, 1, 2, 1]);
        let b = SubsetKey::new([1, 2, 3]);
        assert_eq!(a, b);
        assert_eq!(a.indices(), &[1, 2, 3]);
    }

    #[test]
    fn unanimity_branches() {
        let game = OracleGame::new(GameKind::Unanimity, [1, 2]).unwrap();
        assert_eq!(game.indicator(&SubsetKey::new([1, 2, 5])), 1.0);
        assert_eq!(game.indicator(&SubsetKey::new([1])), 0.0);
    }

    #[test]
    fn existence_branches() {
        let game = OracleGame::new(GameKind::Existence, [3]).unwrap();
        assert_eq!(game.indicator(&SubsetKey::new([0, 3])), 1.0);
        assert_eq!(game.indicator(&SubsetKey::new([0, 1])), 0.0);
        assert_eq!(game.indicator(&SubsetKey::empty()), 0.0);
    }

    #[test]
    fn game_totality_partitions_lattice() {
        // Every subset of a 4-element universe maps to exactly 0 or 1.
        let game = OracleGame::new(GameKind::Unanimity, [0, 2]).unwrap();
        for bits in 0u32..16 {
            let subset = SubsetKey::new((0..4).filter(|i| bits & (1 << i) != 0));
            let v = game.indicator(&subset);
            assert!(v == 0.0 || v == 1.0);
            let expected = subset.contains(0) && subset.contains(2);
            assert_eq!(v == 1.0, expected);
        }
    }

    #[test]
    fn empty_critical_set_rejected() {
        assert!(OracleGame::new(GameKind::Existence, []).is_err());
    }

    #[test]
    fn oracle_spec_parsing() {
        let g = OracleGame::parse("unanimity:1,2").unwrap();
        assert_eq!(g.kind, GameKind::Unanimity);
        assert_eq!(g.critical_set().iter().copied().collect::<Vec<_>>(), vec![1, 2]);
        let g = OracleGame::parse("existence:5").unwrap();
        assert_eq!(g.kind, GameKind::Existence);
        assert!(OracleGame::parse("nonsense:1").is_err());
        assert!(OracleGame::parse("existence:").is_err());
    }

    #[test]
    fn fresh_engine_has_zero_stats() {
        let e = engine(ConstantBackend(1.0));
        assert_eq!(e.cache_stats(), CacheStats::default());
    }

    #[test]
    fn repeated_eval_hits_cache_and_keeps_queries_unchanged() {
        let e = engine(AdditiveBackend {
            base: 0.0,
            coeffs: vec![1.0, 2.0],
        });
        let key = SubsetKey::new([0, 1]);
        let first = e.eval(&key).unwrap();
        let second = e.eval(&key).unwrap();
        assert_eq!(first.value, second.value);
        assert_eq!(first.queries_used, 1);
        assert_eq!(second.queries_used, 1);
        let stats = e.cache_stats();
        assert_eq!((stats.hits, stats.misses, stats.total_queries), (1, 1, 1));
    }

    #[test]
    fn distinct_subsets_each_miss() {
        let e = engine(AdditiveBackend {
            base: 0.0,
            coeffs: vec![1.0, 2.0, 4.0],
        });
        for i in 0..3 {
            e.eval(&SubsetKey::new([i])).unwrap();
        }
        assert_eq!(e.cache_stats().misses, 3);
    }

    #[test]
    fn subset_order_independence() {
        let e = engine(AdditiveBackend {
            base: 0.5,
            coeffs: vec![1.0, 2.0, 4.0],
        });
        let a = e.eval(&SubsetKey::new([2, 0])).unwrap().value;
        let b = e.eval(&SubsetKey::new([0, 2])).unwrap().value;
        assert_eq!(a, b);
        assert_eq!(e.cache_stats().misses, 1);
    }

    #[test]
    fn cache_transparency_for_deterministic_backends() {
        let game = OracleGame::new(GameKind::Existence, [1]).unwrap();
        let cached = engine(game.clone());
        let raw = ValueEngine::without_cache(Box::new(game));
        for bits in 0u32..8 {
            let subset = SubsetKey::new((0..3).filter(|i| bits & (1 << i) != 0));
            let a = cached.eval(&subset).unwrap().value;
            let b = raw.eval(&subset).unwrap().value;
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn additive_backend_monotone_step() {
        // +1 per critical text present, nothing else.
        let e = engine(AdditiveBackend {
            base: 0.0,
            coeffs: vec![1.0, 0.0, 0.0],
        });
        let with = e.eval(&SubsetKey::new([0])).unwrap().value;
        let without = e.eval(&SubsetKey::empty()).unwrap().value;
        assert_eq!(with - without, 1.0);
    }

    #[test]
    fn bleu_self_match_is_one() {
        assert_eq!(bleu4("the cat sat on the mat", "the cat sat on the mat"), 1.0);
    }

    #[test]
    fn bleu_disjoint_unigrams_is_zero() {
        assert_eq!(bleu4("x y z w", "a b c d"), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty_hand_value() {
        // candidate "a b c d" vs reference "a b c d e":
        // p1 = 4/4; p2..p4 all fully matched, add-one keeps them at 1;
        // brevity = exp(1 - 5/4). Hand value frozen below.
        let got = bleu4("a b c d", "a b c d e");
        let expected = 0.7788007830714049_f64; // exp(-0.25)
        assert!((got - expected).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn bleu_empty_candidate_is_zero() {
        assert_eq!(bleu4("", "a b"), 0.0);
        assert_eq!(bleu4("   ", "a b"), 0.0);
    }

    #[test]
    fn bleu_partial_overlap_hand_value() {
        // candidate "a b x d" vs reference "a b c d":
        // p1 = 3/4
        // bigrams cand: ab, bx, xd -> matched ab only: (1+1)/(3+1) = 1/2
        // trigrams: abx, bxd -> none: (0+1)/(2+1) = 1/3
        // 4-grams: abxd -> none: (0+1)/(1+1) = 1/2
        // BP = 1 (equal length)
        // bleu = (0.75 * 0.5 * (1/3) * 0.5)^(1/4)
        let expected = (0.75_f64 * 0.5 * (1.0 / 3.0) * 0.5).powf(0.25);
        let got = bleu4("a b x d", "a b c d");
        assert!((got - expected).abs() < 1e-12, "got {got}");
    }
}
