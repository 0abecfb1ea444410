//! Shapley-value importance of concepts.
//!
//! The characteristic function is normalized accuracy (globally) or
//! normalized recall (per class) of a fixed surrogate head when only a subset
//! of concept scores is kept and the rest are zeroed.

use std::collections::{HashMap, HashSet};
use std::sync::RwLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cav_bank::CavSet;
use crate::discovery::{MaskedEvaluator, SurrogateHead};
use crate::error::{Error, Result};
use crate::tensor_store::DumpBundle;

pub const DEFAULT_EXACT_LIMIT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapSettings {
    /// Largest concept count evaluated by full subset enumeration.
    pub exact_limit: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for ShapSettings {
    fn default() -> Self {
        Self {
            exact_limit: DEFAULT_EXACT_LIMIT,
            mc_samples: 2048,
            seed: 0,
        }
    }
}

impl ShapSettings {
    pub fn validate(&self) -> Result<()> {
        if self.exact_limit > 30 {
            return Err(Error::Config("shap: exact_limit above 30 is not supported".into()));
        }
        if self.mc_samples < 2 {
            return Err(Error::Config("shap: mc_samples must be at least 2".into()));
        }
        Ok(())
    }
}

fn mask_to_flags(mask: u64, m: usize) -> Vec<bool> {
    (0..m).map(|j| mask & (1 << j) != 0).collect()
}

/// `|S|! (m - |S| - 1)! / m!` for every `|S|` in `0..m`.
fn subset_weights(m: usize) -> Vec<f64> {
    let fact: Vec<f64> = (0..=m).scan(1.0, |acc, i| {
        if i > 0 {
            *acc *= i as f64;
        }
        Some(*acc)
    })
    .collect();
    (0..m).map(|s| fact[s] * fact[m - s - 1] / fact[m]).collect()
}

/// Shapley values of one or more games sharing the same table of subsets.
/// `values[mask]` holds one entry per game.
fn exact_from_table(m: usize, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let games = values.first().map_or(0, |v| v.len());
    let weights = subset_weights(m);
    let mut phi = vec![vec![0.0; m]; games];
    for j in 0..m {
        let bit = 1u64 << j;
        for mask in 0..(1u64 << m) {
            if mask & bit != 0 {
                continue;
            }
            let w = weights[mask.count_ones() as usize];
            let (with, without) = (&values[(mask | bit) as usize], &values[mask as usize]);
            for g in 0..games {
                phi[g][j] += w * (with[g] - without[g]);
            }
        }
    }
    phi
}

fn check_exact(m: usize, limit: usize) -> Result<()> {
    if m > limit || m > 30 {
        return Err(Error::TooManyConcepts { m, limit });
    }
    Ok(())
}

fn exact_multi<F>(m: usize, limit: usize, eta: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[bool]) -> Vec<f64> + Sync,
{
    check_exact(m, limit)?;
    let table: Vec<Vec<f64>> = (0..(1u64 << m))
        .into_par_iter()
        .map(|mask| eta(&mask_to_flags(mask, m)))
        .collect();
    Ok(exact_from_table(m, &table))
}

/// Exact Shapley values by enumerating all `2^m` subsets, each evaluated once.
pub fn shapley_exact<F>(m: usize, limit: usize, eta: F) -> Result<Vec<f64>>
where
    F: Fn(&[bool]) -> f64 + Sync,
{
    Ok(exact_multi(m, limit, |s| vec![eta(s)])?.remove(0))
}

/// Exact Shapley values from a table indexed by subset bitmask
/// (bit `j` set means concept `j` is present).
pub fn shapley_exact_table(table: &[f64]) -> Result<Vec<f64>> {
    let m = table.len().trailing_zeros() as usize;
    if table.len() != 1usize << m {
        return Err(Error::ShapeMismatch(format!(
            "characteristic table has {} entries, expected a power of two",
            table.len()
        )));
    }
    check_exact(m, DEFAULT_EXACT_LIMIT)?;
    let rows: Vec<Vec<f64>> = table.iter().map(|&v| vec![v]).collect();
    Ok(exact_from_table(m, &rows).remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

/// Cached characteristic function; each subset is evaluated at most once
/// per key in the common case, and always yields the same value.
struct Memo<'a, F> {
    eta: &'a F,
    m: usize,
    table: RwLock<HashMap<u64, Vec<f64>>>,
}

impl<F> Memo<'_, F>
where
    F: Fn(&[bool]) -> Vec<f64> + Sync,
{
    fn get(&self, mask: u64) -> Vec<f64> {
        if let Some(v) = self.table.read().expect("memo lock").get(&mask) {
            return v.clone();
        }
        let v = (self.eta)(&mask_to_flags(mask, self.m));
        self.table
            .write()
            .expect("memo lock")
            .entry(mask)
            .or_insert(v)
            .clone()
    }
}

/// Permutations for the sampler.
///
/// Cyclic orders (permutations up to rotation) are drawn uniformly without
/// replacement, and each contributes all `m` of its rotations. Every
/// rotation is a uniform permutation, so averages stay unbiased; within a
/// block every concept occupies every position once, and once all `m!`
/// permutations have been drawn the next block starts a fresh pass.
fn sample_permutations(m: usize, samples: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = (1..m).try_fold(1u64, |acc, i| acc.checked_mul(i as u64)).unwrap_or(u64::MAX);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut perms = Vec::with_capacity(samples);
    let mut tail: Vec<usize> = (1..m).collect();
    while perms.len() < samples {
        if seen.len() as u64 == classes {
            seen.clear();
        }
        tail.shuffle(&mut rng);
        let mut base = Vec::with_capacity(m);
        base.push(0);
        base.extend_from_slice(&tail);
        if !seen.insert(base.clone()) {
            continue;
        }
        for r in 0..m {
            if perms.len() == samples {
                break;
            }
            perms.push((0..m).map(|p| base[(p + r) % m]).collect());
        }
    }
    perms
}

fn mc_multi<F>(m: usize, samples: usize, seed: u64, eta: &F) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>
where
    F: Fn(&[bool]) -> Vec<f64> + Sync,
{
    if samples < 2 {
        return Err(Error::Config("Monte Carlo Shapley needs at least 2 samples".into()));
    }
    if m > 64 {
        return Err(Error::TooManyConcepts { m, limit: 64 });
    }
    let memo = Memo {
        eta,
        m,
        table: RwLock::new(HashMap::new()),
    };
    let games = memo.get(0).len();
    let perms = sample_permutations(m, samples, seed);
    // contributions[s][g][j]
    let contributions: Vec<Vec<Vec<f64>>> = perms
        .par_iter()
        .map(|perm| {
            let mut out = vec![vec![0.0; m]; games];
            let mut mask = 0u64;
            let mut prev = memo.get(mask);
            for &j in perm {
                mask |= 1 << j;
                let next = memo.get(mask);
                for g in 0..games {
                    out[g][j] = next[g] - prev[g];
                }
                prev = next;
            }
            out
        })
        .collect();
    let n = samples as f64;
    let mut values = vec![vec![0.0; m]; games];
    let mut stderr = vec![vec![0.0; m]; games];
    for g in 0..games {
        for j in 0..m {
            // mean taken relative to the first sample
            let first = contributions[0][g][j];
            let mean = first + contributions.iter().map(|c| c[g][j] - first).sum::<f64>() / n;
            let var = contributions.iter().map(|c| (c[g][j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            values[g][j] = mean;
            stderr[g][j] = var.sqrt() / n.sqrt();
        }
    }
    Ok((values, stderr))
}

/// Monte Carlo Shapley values over `samples` permutations.
///
/// The standard error is the sample standard deviation of the
/// per-permutation marginal contributions over `sqrt(samples)`. The
/// permutations are position-balanced and drawn without replacement, so this
/// overstates the actual error; with `samples >= m!` the estimate is exact.
pub fn shapley_mc<F>(m: usize, samples: usize, seed: u64, eta: F) -> Result<McEstimate>
where
    F: Fn(&[bool]) -> f64 + Sync,
{
    let (mut values, mut stderr) = mc_multi(m, samples, seed, &|s: &[bool]| vec![eta(s)])?;
    Ok(McEstimate {
        values: values.remove(0),
        stderr: stderr.remove(0),
        samples,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapMethod {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdErrors {
    pub global: Vec<f64>,
    pub per_class: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub global: Vec<f64>,
    /// `[K, m]`.
    pub per_class: Vec<Vec<f64>>,
    pub quality: Vec<f64>,
    pub method: ShapMethod,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub stderrs: Option<StdErrors>,
    /// Completeness with all concepts kept.
    pub completeness: f64,
    pub per_class_measure: String,
}

impl ImportanceReport {
    /// Concept indices by descending importance for class `c`, ties to the smaller index.
    pub fn ranking_for_class(&self, c: usize) -> Vec<usize> {
        rank_desc(&self.per_class[c])
    }

    pub fn global_ranking(&self) -> Vec<usize> {
        rank_desc(&self.global)
    }
}

fn rank_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

struct Games<'a> {
    eval: MaskedEvaluator<'a>,
    chance: f64,
    a_orig: f64,
}

impl Games<'_> {
    fn new<'a>(cavs: &CavSet, head: &'a SurrogateHead, bundle: &DumpBundle) -> Result<Games<'a>> {
        let eval = MaskedEvaluator::new(cavs, head, bundle)?;
        if let Some(c) = eval.class_counts().iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(c));
        }
        let chance = 1.0 / bundle.num_classes() as f64;
        let a_orig = bundle.meta().a_orig;
        if a_orig <= chance {
            return Err(Error::DegenerateOriginal { a_orig, chance });
        }
        Ok(Games { eval, chance, a_orig })
    }

    fn gain(&self, score: f64) -> f64 {
        ((score - self.chance) / (self.a_orig - self.chance)).max(0.0)
    }

    /// Global value followed by one value per class.
    fn values(&self, active: &[bool]) -> Vec<f64> {
        let k = self.eval.class_counts().len();
        if !active.iter().any(|&a| a) {
            return vec![0.0; k + 1];
        }
        let correct = self.eval.correct_by_class(active);
        let total: usize = self.eval.class_counts().iter().sum();
        let mut out = Vec::with_capacity(k + 1);
        out.push(self.gain(correct.iter().sum::<usize>() as f64 / total as f64));
        for (c, &n) in correct.iter().zip(self.eval.class_counts()) {
            out.push(self.gain(*c as f64 / n as f64));
        }
        out
    }
}

/// Global and per-class Shapley importance of every concept.
pub fn class_importance(
    cavs: &CavSet,
    head: &SurrogateHead,
    bundle: &DumpBundle,
    settings: &ShapSettings,
) -> Result<ImportanceReport> {
    settings.validate()?;
    let games = Games::new(cavs, head, bundle)?;
    let m = cavs.len();
    let full = games.values(&vec![true; m]);
    let eta = |s: &[bool]| games.values(s);
    let (phi, method, stderrs) = if m <= settings.exact_limit {
        (exact_multi(m, settings.exact_limit, eta)?, ShapMethod::Exact, None)
    } else {
        let (values, errs) = mc_multi(m, settings.mc_samples, settings.seed, &eta)?;
        let mut errs = errs.into_iter();
        let stderrs = StdErrors {
            global: errs.next().expect("global game"),
            per_class: errs.collect(),
        };
        (values, ShapMethod::MonteCarlo, Some(stderrs))
    };
    let mut phi = phi.into_iter();
    let sampled = method == ShapMethod::MonteCarlo;
    Ok(ImportanceReport {
        global: phi.next().expect("global game"),
        per_class: phi.collect(),
        quality: full[1..].to_vec(),
        method,
        samples: sampled.then_some(settings.mc_samples),
        seed: sampled.then_some(settings.seed),
        stderrs,
        completeness: full[0],
        per_class_measure: "recall".into(),
    })
}

/// Per-class normalized recall with all concepts kept, clamped at 0.
pub fn explanation_quality(cavs: &CavSet, head: &SurrogateHead, bundle: &DumpBundle) -> Result<Vec<f64>> {
    let games = Games::new(cavs, head, bundle)?;
    Ok(games.values(&vec![true; cavs.len()])[1..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cav_bank::CavOrigin;
    use crate::discovery::{completeness, fit_head, DiscoveryConfig};
    use crate::synthetic::bare_bundle;
    use rand::Rng;

    /// Average marginal contribution over all `m!` orderings.
    fn permutation_oracle(table: &[f64], m: usize) -> Vec<f64> {
        fn orderings(m: usize) -> Vec<Vec<usize>> {
            if m == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for rest in orderings(m - 1) {
                for pos in 0..=rest.len() {
                    let mut p = rest.clone();
                    p.insert(pos, m - 1);
                    out.push(p);
                }
            }
            out
        }
        let all = orderings(m);
        let mut phi = vec![0.0; m];
        for p in &all {
            let mut mask = 0usize;
            for &j in p {
                let before = table[mask];
                mask |= 1 << j;
                phi[j] += table[mask] - before;
            }
        }
        phi.iter().map(|v| v / all.len() as f64).collect()
    }

    fn three_player_table() -> Vec<f64> {
        // bit 0 = concept 1, bit 1 = concept 2, bit 2 = concept 3
        let mut t = vec![0.0; 8];
        t[0b001] = 0.5;
        t[0b010] = 0.2;
        t[0b100] = 0.0;
        t[0b011] = 0.8;
        t[0b101] = 0.5;
        t[0b110] = 0.2;
        t[0b111] = 1.0;
        t
    }

    #[test]
    fn three_player_example() {
        let t = three_player_table();
        let phi = shapley_exact_table(&t).unwrap();
        let oracle = permutation_oracle(&t, 3);
        for j in 0..3 {
            assert!((phi[j] - oracle[j]).abs() < 1e-12);
        }
        assert!((phi[0] - 0.616_666_666_666_666_7).abs() < 1e-12);
        assert!((phi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closure_and_table_agree() {
        let t = three_player_table();
        let phi = shapley_exact(3, 16, |s| {
            let mask: usize = s.iter().enumerate().map(|(j, &b)| (b as usize) << j).sum();
            t[mask]
        })
        .unwrap();
        assert_eq!(phi, shapley_exact_table(&t).unwrap());
    }

    #[test]
    fn dummy_and_symmetric_players() {
        // player 2 never matters; players 0 and 1 are interchangeable
        let v = |s: &[bool]| {
            let k = s[0] as u8 + s[1] as u8;
            [0.0, 0.3, 0.9][k as usize] + if s[3] { 0.05 } else { 0.0 }
        };
        let phi = shapley_exact(4, 16, v).unwrap();
        assert_eq!(phi[2], 0.0);
        assert!((phi[0] - phi[1]).abs() < 1e-12);
        assert!((phi[3] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn too_many_concepts() {
        assert!(matches!(
            shapley_exact(17, 16, |_| 0.0),
            Err(Error::TooManyConcepts { m: 17, limit: 16 })
        ));
        assert!(shapley_exact_table(&[0.0; 6]).is_err());
    }

    #[test]
    fn single_player_monte_carlo_is_exact() {
        for samples in [2, 3, 100] {
            let est = shapley_mc(1, samples, 9, |s| if s[0] { 0.7 } else { 0.1 }).unwrap();
            assert_eq!(est.values, vec![0.7 - 0.1]);
            assert_eq!(est.stderr, vec![0.0]);
        }
        assert!(shapley_mc(1, 1, 0, |_| 0.0).is_err());
    }

    fn random_table(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        let mut t: Vec<f64> = (0..1usize << m).map(|_| rng.random_range(0.0..1.0)).collect();
        t[0] = 0.0;
        t
    }

    #[test]
    fn monte_carlo_is_deterministic_and_within_three_stderr() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_table(&mut rng, 8);
        let lookup = |s: &[bool]| t[s.iter().enumerate().map(|(j, &b)| (b as usize) << j).sum::<usize>()];
        let exact = shapley_exact_table(&t).unwrap();
        let a = shapley_mc(8, 4096, 5, lookup).unwrap();
        let b = shapley_mc(8, 4096, 5, lookup).unwrap();
        assert_eq!(a, b);
        for j in 0..8 {
            assert!((a.values[j] - exact[j]).abs() <= 3.0 * a.stderr[j]);
        }
    }

    #[test]
    fn monte_carlo_error_shrinks_with_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut errors = [0.0; 3];
        for _ in 0..10 {
            let t = random_table(&mut rng, 8);
            let lookup = |s: &[bool]| t[s.iter().enumerate().map(|(j, &b)| (b as usize) << j).sum::<usize>()];
            let exact = shapley_exact_table(&t).unwrap();
            for (e, samples) in errors.iter_mut().zip([256, 1024, 4096]) {
                let est = shapley_mc(8, samples, 1, lookup).unwrap();
                *e += est.values.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    }

    #[test]
    fn rotation_blocks_are_position_balanced() {
        let perms = sample_permutations(4, 8, 3);
        for block in perms.chunks(4) {
            for pos in 0..4 {
                let mut seen: Vec<usize> = block.iter().map(|p| p[pos]).collect();
                seen.sort();
                assert_eq!(seen, vec![0, 1, 2, 3]);
            }
        }
    }

    #[test]
    fn full_budget_covers_every_permutation_once() {
        let mut perms = sample_permutations(4, 24, 7);
        perms.sort();
        perms.dedup();
        assert_eq!(perms.len(), 24);
        // a second pass starts once every permutation was used
        let twice = sample_permutations(3, 12, 1);
        let mut first: Vec<_> = twice[..6].to_vec();
        first.sort();
        first.dedup();
        assert_eq!(first.len(), 6);
    }

    #[test]
    fn exhaustive_budget_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = random_table(&mut rng, 4);
        let lookup = |s: &[bool]| t[s.iter().enumerate().map(|(j, &b)| (b as usize) << j).sum::<usize>()];
        let est = shapley_mc(4, 24, 0, lookup).unwrap();
        let exact = shapley_exact_table(&t).unwrap();
        for j in 0..4 {
            assert!((est.values[j] - exact[j]).abs() < 1e-12);
        }
    }

    /// Two classes keyed on the sign of concept 0's score; concept 1 is noise.
    fn two_class_setup() -> (DumpBundle, CavSet, SurrogateHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 200;
        let mut acts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i % 2) as i32;
            labels.push(y);
            let a = if y == 1 { 1.0 } else { 0.0 };
            acts.extend([a, rng.random_range(0.0..1.0)]);
        }
        let b = bare_bundle(acts, n, (1, 1), 2, labels, 2, 1.0);
        let cavs = CavSet::normalize(&[1.0, 0.0, 0.0, 1.0], 2, CavOrigin::Imported, "l").unwrap();
        let cfg = DiscoveryConfig {
            m: 2,
            beta: 0.0,
            epochs: 60,
            learning_rate: 0.05,
            batch_size: 16,
            ..Default::default()
        };
        let (head, _) = fit_head(&b, &cavs, &cfg).unwrap();
        (b, cavs, head)
    }

    #[test]
    fn importance_on_fitted_head() {
        let (b, cavs, head) = two_class_setup();
        let report = class_importance(&cavs, &head, &b, &ShapSettings::default()).unwrap();
        assert_eq!(report.method, ShapMethod::Exact);
        assert_eq!(report.per_class.len(), 2);
        let eta = completeness(&cavs, &head, &b, &[true, true]).unwrap();
        assert!((report.completeness - eta).abs() < 1e-12);
        assert!((report.global.iter().sum::<f64>() - eta).abs() < 1e-9);
        for (c, row) in report.per_class.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - report.quality[c]).abs() < 1e-9);
        }
        assert!(report.global[0] > report.global[1]);
        assert_eq!(report.global_ranking()[0], 0);
        assert_eq!(report.per_class_measure, "recall");
        let json = serde_json::to_value(&report).unwrap();
        for key in ["global", "per_class", "quality", "method", "samples", "seed"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(explanation_quality(&cavs, &head, &b).unwrap(), report.quality);
    }

    #[test]
    fn per_class_rows_match_brute_force() {
        let (b, cavs, head) = two_class_setup();
        let report = class_importance(&cavs, &head, &b, &ShapSettings::default()).unwrap();
        let eval = MaskedEvaluator::new(&cavs, &head, &b).unwrap();
        let counts = eval.class_counts().to_vec();
        for c in 0..2 {
            let table: Vec<f64> = (0..4u64)
                .map(|mask| {
                    if mask == 0 {
                        return 0.0;
                    }
                    let recall = eval.correct_by_class(&mask_to_flags(mask, 2))[c] as f64 / counts[c] as f64;
                    ((recall - 0.5) / 0.5).max(0.0)
                })
                .collect();
            let oracle = permutation_oracle(&table, 2);
            for j in 0..2 {
                assert!((report.per_class[c][j] - oracle[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monte_carlo_mode_above_limit() {
        let (b, cavs, head) = two_class_setup();
        let settings = ShapSettings {
            exact_limit: 1,
            mc_samples: 64,
            seed: 4,
        };
        let report = class_importance(&cavs, &head, &b, &settings).unwrap();
        assert_eq!(report.method, ShapMethod::MonteCarlo);
        assert_eq!((report.samples, report.seed), (Some(64), Some(4)));
        let errs = report.stderrs.as_ref().unwrap();
        assert_eq!(errs.per_class.len(), 2);
        assert_eq!(class_importance(&cavs, &head, &b, &settings).unwrap(), report);
    }

    #[test]
    fn constant_head_describes_no_class_on_average() {
        // a head that ignores its inputs and always predicts class 2
        let k = 4;
        let n = 40;
        let b = bare_bundle(vec![0.5; n], n, (1, 1), 1, (0..n as i32).map(|i| i % k).collect(), k as usize, 0.9);
        let cavs = CavSet::normalize(&[1.0], 1, CavOrigin::Imported, "l").unwrap();
        let head = SurrogateHead::constant(1, k as usize, 2);
        let q = explanation_quality(&cavs, &head, &b).unwrap();
        let chance = 1.0 / k as f64;
        for (c, &v) in q.iter().enumerate() {
            let expected = if c == 2 { (1.0 - chance) / (0.9 - chance) } else { 0.0 };
            assert!((v - expected).abs() < 1e-12);
        }
        // recall averaged over classes equals chance, so the unclamped mean gain is zero
        let eval = MaskedEvaluator::new(&cavs, &head, &b).unwrap();
        let correct = eval.correct_by_class(&[true]);
        let mean_recall: f64 = correct
            .iter()
            .zip(eval.class_counts())
            .map(|(&c, &n)| c as f64 / n as f64)
            .sum::<f64>()
            / k as f64;
        assert!((mean_recall - chance).abs() < 1e-12);
        let report = class_importance(&cavs, &head, &b, &ShapSettings::default()).unwrap();
        assert!(report.per_class.iter().enumerate().all(|(c, row)| c == 2 || row[0] == 0.0));
    }

    #[test]
    fn empty_class_is_an_error() {
        let b = bare_bundle(vec![0.5; 4], 4, (1, 1), 1, vec![0, 0, 2, 2], 3, 0.9);
        let cavs = CavSet::normalize(&[1.0], 1, CavOrigin::Imported, "l").unwrap();
        let head = SurrogateHead::constant(1, 3, 0);
        assert!(matches!(explanation_quality(&cavs, &head, &b), Err(Error::EmptyClass(1))));
    }
}
