//! Concept discovery with a completeness-style objective.
//!
//! Concepts are unit vectors `c_j` in channel space. Each image is summarised
//! by thresholded max-pooled concept scores `z_ij = g_ij * [g_ij > beta]`
//! with `g_ij = max_f <x_if, c_j>`, and a one-hidden-layer surrogate head
//! classifies from `z`. Training minimises
//!
//! ```text
//! CE(head(z), y) - lambda1 * R1 + lambda2 * R2
//! ```
//!
//! where `R1` is the mean (over concepts) score of each concept's
//! `top_m_images` best local feature vectors, re-selected every epoch, and
//! `R2` is the mean `|c_j . c_j'|` over ordered pairs `j != j'`. Optimisation
//! is mini-batch Adam; CAV rows are renormalized after every step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cav_bank::{CavOrigin, CavSet};
use crate::error::{Error, Result};
use crate::tensor_store::DumpBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoveryConfig {
    /// Number of concepts.
    pub m: usize,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub top_m_images: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub head_hidden: usize,
    /// Fraction of images held out for the test accuracy in the log.
    pub test_fraction: f64,
    /// Score with unit-normalized local feature vectors instead of raw ones.
    pub normalized_scores: bool,
    /// Independent initializations; the run with the lowest final training
    /// objective is kept. Restart 0 uses `seed` itself.
    pub restarts: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            m: 20,
            beta: 0.18,
            lambda1: 0.2,
            lambda2: 0.2,
            top_m_images: 100,
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.01,
            seed: 0,
            head_hidden: 32,
            test_fraction: 0.2,
            normalized_scores: false,
            restarts: 1,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("discovery: {msg}")));
        if self.m == 0 {
            return bad("m must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1)");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if self.top_m_images == 0
            || self.epochs == 0
            || self.batch_size == 0
            || self.head_hidden == 0
            || self.restarts == 0
        {
            return bad("counts must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Concept scores `values[i, f, j]`, row-major `[n, F, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    n: usize,
    positions: usize,
    m: usize,
    values: Vec<f64>,
}

impl ScoreField {
    pub fn new(n: usize, positions: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * positions * m {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for [{n}, {positions}, {m}]",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("score field".into()));
        }
        Ok(Self {
            n,
            positions,
            m,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn concepts(&self) -> usize {
        self.m
    }

    pub fn get(&self, image: usize, position: usize, concept: usize) -> f64 {
        self.values[(image * self.positions + position) * self.m + concept]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Local feature vectors as seen by the scoring function, optionally
/// scaled to unit length.
pub(crate) struct LocalFeatures<'a> {
    bundle: &'a DumpBundle,
    inv_norms: Option<Vec<f64>>,
}

impl<'a> LocalFeatures<'a> {
    pub(crate) fn new(bundle: &'a DumpBundle, normalized: bool) -> Self {
        let inv_norms = normalized.then(|| {
            bundle
                .activation_data()
                .chunks_exact(bundle.channels())
                .map(|x| {
                    let n = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                    if n > 0.0 {
                        1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect()
        });
        Self { bundle, inv_norms }
    }

    fn scale(&self, image: usize, position: usize) -> f64 {
        self.inv_norms
            .as_ref()
            .map_or(1.0, |s| s[image * self.bundle.positions() + position])
    }

    pub(crate) fn score(&self, image: usize, position: usize, cav: &[f64]) -> f64 {
        dot32(self.bundle.local_vector(image, position), cav) * self.scale(image, position)
    }

    /// Adds `weight * x_if` (scaled as scored) into `acc`.
    fn accumulate(&self, image: usize, position: usize, weight: f64, acc: &mut [f64]) {
        let w = weight * self.scale(image, position);
        for (a, &x) in acc.iter_mut().zip(self.bundle.local_vector(image, position)) {
            *a += w * x as f64;
        }
    }

    /// Max score over positions and the first position attaining it.
    pub(crate) fn max_score(&self, image: usize, cav: &[f64]) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for f in 0..self.bundle.positions() {
            let s = self.score(image, f, cav);
            if s > best.0 {
                best = (s, f);
            }
        }
        best
    }
}

fn dot32(x: &[f32], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(&a, &b)| a as f64 * b).sum()
}

fn check_dims(bundle: &DumpBundle, cavs: &CavSet) -> Result<()> {
    if cavs.dim() != bundle.channels() {
        return Err(Error::DimensionMismatch {
            expected: bundle.channels(),
            found: cavs.dim(),
        });
    }
    Ok(())
}

/// Raw scalar products between every local feature vector and every CAV.
pub fn concept_scores(bundle: &DumpBundle, cavs: &CavSet) -> Result<ScoreField> {
    concept_scores_with(bundle, cavs, false)
}

pub fn concept_scores_with(bundle: &DumpBundle, cavs: &CavSet, normalized: bool) -> Result<ScoreField> {
    check_dims(bundle, cavs)?;
    let feats = LocalFeatures::new(bundle, normalized);
    let (n, f, m) = (bundle.n(), bundle.positions(), cavs.len());
    let mut values = Vec::with_capacity(n * f * m);
    for i in 0..n {
        for p in 0..f {
            for j in 0..m {
                values.push(feats.score(i, p, cavs.row(j)));
            }
        }
    }
    ScoreField::new(n, f, m, values)
}

/// Thresholded max-pooled concept activations `[n, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledScores {
    pub n: usize,
    pub m: usize,
    pub values: Vec<f64>,
}

impl PooledScores {
    pub fn row(&self, image: usize) -> &[f64] {
        &self.values[image * self.m..(image + 1) * self.m]
    }
}

fn threshold(g: f64, beta: f64) -> f64 {
    if g > beta {
        g
    } else {
        0.0
    }
}

pub fn threshold_pool(field: &ScoreField, beta: f64) -> PooledScores {
    let (n, f, m) = (field.n, field.positions, field.m);
    let mut values = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let g = (0..f)
                .map(|p| field.get(i, p, j))
                .fold(f64::NEG_INFINITY, f64::max);
            values[i * m + j] = threshold(g, beta);
        }
    }
    PooledScores { n, m, values }
}

/// Pooled scores computed straight from the bundle without materialising
/// the full score field.
pub(crate) fn pool_bundle(bundle: &DumpBundle, cavs: &CavSet, beta: f64, normalized: bool) -> Result<PooledScores> {
    check_dims(bundle, cavs)?;
    let feats = LocalFeatures::new(bundle, normalized);
    let (n, m) = (bundle.n(), cavs.len());
    let mut values = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            values[i * m + j] = threshold(feats.max_score(i, cavs.row(j)).0, beta);
        }
    }
    Ok(PooledScores { n, m, values })
}

/// `relu(z W1^T + b1) W2^T + b2`, mapping pooled concept scores to class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateHead {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Threshold applied to pooled scores before the head.
    pub beta: f64,
    pub normalized_scores: bool,
    /// `[hidden, inputs]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[classes, hidden]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl SurrogateHead {
    /// Head that ignores its inputs and always predicts `class`.
    pub fn constant(inputs: usize, classes: usize, class: usize) -> Self {
        let mut b2 = vec![0.0; classes];
        b2[class] = 1.0;
        Self {
            inputs,
            hidden: 1,
            classes,
            beta: 0.0,
            normalized_scores: false,
            w1: vec![0.0; inputs],
            b1: vec![0.0],
            w2: vec![0.0; classes],
            b2,
        }
    }

    fn init(inputs: usize, hidden: usize, classes: usize, beta: f64, normalized: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut he = |fan_in: usize, len: usize| -> Vec<f64> {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let w1 = he(inputs, hidden * inputs);
        let w2 = he(hidden, classes * hidden);
        Self {
            inputs,
            hidden,
            classes,
            beta,
            normalized_scores: normalized,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; classes],
        }
    }

    fn hidden_pre(&self, z: &[f64], active: Option<&[bool]>) -> Vec<f64> {
        let mut pre = self.b1.clone();
        for (h, out) in pre.iter_mut().enumerate() {
            let w = &self.w1[h * self.inputs..(h + 1) * self.inputs];
            for j in 0..self.inputs {
                if active.is_none_or(|a| a[j]) {
                    *out += w[j] * z[j];
                }
            }
        }
        pre
    }

    fn logits_from_hidden(&self, hidden: &[f64]) -> Vec<f64> {
        let mut logits = self.b2.clone();
        for (c, out) in logits.iter_mut().enumerate() {
            let w = &self.w2[c * self.hidden..(c + 1) * self.hidden];
            *out += w.iter().zip(hidden).map(|(a, b)| a * b).sum::<f64>();
        }
        logits
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self.hidden_pre(z, None).into_iter().map(|x| x.max(0.0)).collect();
        self.logits_from_hidden(&hidden)
    }

    /// Argmax class with concepts outside `active` zeroed.
    pub fn predict_masked(&self, z: &[f64], active: &[bool]) -> usize {
        let hidden: Vec<f64> = self
            .hidden_pre(z, Some(active))
            .into_iter()
            .map(|x| x.max(0.0))
            .collect();
        argmax(&self.logits_from_hidden(&hidden))
    }

    pub fn predict(&self, z: &[f64]) -> usize {
        argmax(&self.logits(z))
    }

    fn param_count_ok(&self) -> bool {
        self.w1.len() == self.hidden * self.inputs
            && self.b1.len() == self.hidden
            && self.w2.len() == self.classes * self.hidden
            && self.b2.len() == self.classes
            && [&self.w1, &self.b1, &self.w2, &self.b2]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn check(&self, cavs: &CavSet, bundle: &DumpBundle) -> Result<()> {
        if !self.param_count_ok() {
            return Err(Error::Config("surrogate head parameters are malformed".into()));
        }
        if self.inputs != cavs.len() {
            return Err(Error::DimensionMismatch {
                expected: cavs.len(),
                found: self.inputs,
            });
        }
        if self.classes != bundle.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: bundle.num_classes(),
                found: self.classes,
            });
        }
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub r1: f64,
    pub r2: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub seed: u64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Seed of the kept run.
    pub seed: u64,
    pub restart: usize,
    /// Final training objective `CE - lambda1 * R1 + lambda2 * R2` of every restart.
    pub objectives: Vec<f64>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain numbers serialize") + "\n")
            .collect()
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone)]
pub struct Discovery {
    pub cavs: CavSet,
    pub head: SurrogateHead,
    pub log: TrainLog,
}

/// Learns `cfg.m` CAVs together with a surrogate head.
pub fn train_discovery(bundle: &DumpBundle, cfg: &DiscoveryConfig) -> Result<Discovery> {
    cfg.validate()?;
    let runs: Vec<Result<(CavSet, SurrogateHead, TrainLog, f64)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = restart_seed(cfg.seed, r);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = bundle.channels();
            let raw: Vec<f64> = (0..cfg.m * k).map(|_| rng.sample(StandardNormal)).collect();
            let cavs = CavSet::normalize(&raw, k, CavOrigin::Discovered, &bundle.meta().layer)?;
            Trainer::new(bundle, cfg, cavs, true, seed, rng)?.run()
        })
        .collect();
    let mut best: Option<(usize, CavSet, SurrogateHead, TrainLog)> = None;
    let mut objectives = Vec::with_capacity(runs.len());
    for (r, run) in runs.into_iter().enumerate() {
        let (cavs, head, log, objective) = run?;
        let better = objectives.iter().all(|&o: &f64| objective < o);
        objectives.push(objective);
        if better {
            best = Some((r, cavs, head, log));
        }
    }
    let (restart, cavs, head, mut log) = best.expect("at least one restart");
    if cfg.restarts > 1 {
        log::info!("discovery: kept restart {restart} of {}, objectives {objectives:?}", cfg.restarts);
    }
    log.restart = restart;
    log.objectives = objectives;
    Ok(Discovery { cavs, head, log })
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains only the surrogate head on top of fixed CAVs.
pub fn fit_head(bundle: &DumpBundle, cavs: &CavSet, cfg: &DiscoveryConfig) -> Result<(SurrogateHead, TrainLog)> {
    cfg.validate()?;
    check_dims(bundle, cavs)?;
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (_, head, mut log, objective) = Trainer::new(bundle, cfg, cavs.clone(), false, cfg.seed, rng)?.run()?;
    log.objectives = vec![objective];
    Ok((head, log))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: i32) {
        let c1 = 1.0 - Self::B1.powi(t);
        let c2 = 1.0 - Self::B2.powi(t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grads[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grads[i] * grads[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

struct Trainer<'a> {
    bundle: &'a DumpBundle,
    cfg: &'a DiscoveryConfig,
    feats: LocalFeatures<'a>,
    cavs: Vec<f64>,
    template: CavSet,
    head: SurrogateHead,
    train_cavs: bool,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    seed: u64,
    rng: ChaCha8Rng,
}

struct Grads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    cavs: Vec<f64>,
}

impl<'a> Trainer<'a> {
    fn new(
        bundle: &'a DumpBundle,
        cfg: &'a DiscoveryConfig,
        cavs: CavSet,
        train_cavs: bool,
        seed: u64,
        mut rng: ChaCha8Rng,
    ) -> Result<Self> {
        let n = bundle.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_test = ((n as f64) * cfg.test_fraction).floor() as usize;
        let (test, train) = if n_test == 0 || n_test >= n {
            (order.clone(), order)
        } else {
            let (a, b) = order.split_at(n_test);
            (a.to_vec(), b.to_vec())
        };
        if train.is_empty() {
            return Err(Error::EmptyBundle);
        }
        let head = SurrogateHead::init(
            cavs.len(),
            cfg.head_hidden,
            bundle.num_classes(),
            cfg.beta,
            cfg.normalized_scores,
            &mut rng,
        );
        Ok(Self {
            bundle,
            cfg,
            feats: LocalFeatures::new(bundle, cfg.normalized_scores),
            cavs: cavs.rows().to_vec(),
            template: cavs,
            head,
            train_cavs,
            train_idx: train,
            test_idx: test,
            seed,
            rng,
        })
    }

    fn m(&self) -> usize {
        self.template.len()
    }

    fn k(&self) -> usize {
        self.template.dim()
    }

    fn cav(&self, j: usize) -> &[f64] {
        &self.cavs[j * self.k()..(j + 1) * self.k()]
    }

    fn run(mut self) -> Result<(CavSet, SurrogateHead, TrainLog, f64)> {
        let started = Instant::now();
        let (m, k) = (self.m(), self.k());
        let mut adam_w1 = Adam::new(self.head.w1.len());
        let mut adam_b1 = Adam::new(self.head.b1.len());
        let mut adam_w2 = Adam::new(self.head.w2.len());
        let mut adam_b2 = Adam::new(self.head.b2.len());
        let mut adam_c = Adam::new(m * k);
        let mut step = 0i32;
        let mut epochs = Vec::with_capacity(self.cfg.epochs);

        for epoch in 0..self.cfg.epochs {
            let r1_dirs = if self.train_cavs && self.cfg.lambda1 > 0.0 {
                Some(self.top_directions())
            } else {
                None
            };

            let mut order = self.train_idx.clone();
            order.shuffle(&mut self.rng);
            let mut ce_sum = 0.0;
            for batch in order.chunks(self.cfg.batch_size) {
                let mut g = self.batch_grads(batch, &mut ce_sum);
                if self.train_cavs {
                    self.add_regularizer_grads(&mut g.cavs, r1_dirs.as_ref().map(|(d, _)| d.as_slice()));
                }
                step += 1;
                let lr = self.cfg.learning_rate;
                adam_w1.step(&mut self.head.w1, &g.w1, lr, step);
                adam_b1.step(&mut self.head.b1, &g.b1, lr, step);
                adam_w2.step(&mut self.head.w2, &g.w2, lr, step);
                adam_b2.step(&mut self.head.b2, &g.b2, lr, step);
                if self.train_cavs {
                    adam_c.step(&mut self.cavs, &g.cavs, lr, step);
                    self.renormalize(epoch)?;
                }
            }

            let cross_entropy = ce_sum / self.train_idx.len() as f64;
            if !cross_entropy.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let r1 = match &r1_dirs {
                Some((_, value)) => *value,
                None => self.top_directions().1,
            };
            epochs.push(EpochLog {
                epoch,
                cross_entropy,
                r1,
                r2: self.pairwise_similarity(),
                train_accuracy: self.accuracy(&self.train_idx),
                test_accuracy: self.accuracy(&self.test_idx),
                seed: self.seed,
                elapsed_secs: started.elapsed().as_secs_f64(),
            });
        }

        let objective = self.objective();
        if !objective.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.cfg.epochs.saturating_sub(1),
            });
        }
        let cavs = CavSet::normalize(&self.cavs, k, self.template.origin(), self.template.layer())?;
        let cavs = match self.template.labels() {
            Some(l) => cavs.with_labels(l.to_vec())?,
            None => cavs,
        };
        Ok((
            cavs,
            self.head,
            TrainLog {
                seed: self.seed,
                restart: 0,
                objectives: Vec::new(),
                epochs,
            },
            objective,
        ))
    }

    /// `CE - lambda1 * R1 + lambda2 * R2` over the whole training split.
    fn objective(&self) -> f64 {
        let m = self.m();
        let mut z = vec![0.0; m];
        let mut ce = 0.0;
        for &i in &self.train_idx {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = threshold(self.feats.max_score(i, self.cav(j)).0, self.head.beta);
            }
            let probs = softmax(&self.head.logits(&z));
            ce -= probs[self.bundle.label(i)].max(f64::MIN_POSITIVE).ln();
        }
        ce / self.train_idx.len() as f64 - self.cfg.lambda1 * self.top_directions().1
            + self.cfg.lambda2 * self.pairwise_similarity()
    }

    fn renormalize(&mut self, epoch: usize) -> Result<()> {
        let k = self.k();
        for row in self.cavs.chunks_exact_mut(k) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(())
    }

    /// Per concept: mean of its top-scoring training local feature vectors
    /// (the gradient of R1 w.r.t. that CAV), plus the current R1 value.
    fn top_directions(&self) -> (Vec<f64>, f64) {
        let (m, k) = (self.m(), self.k());
        let f = self.bundle.positions();
        let mut dirs = vec![0.0; m * k];
        let mut total = 0.0;
        for j in 0..m {
            let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(self.train_idx.len() * f);
            for &i in &self.train_idx {
                for p in 0..f {
                    scored.push((self.feats.score(i, p, self.cav(j)), i, p));
                }
            }
            let top = self.cfg.top_m_images.min(scored.len());
            let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
                b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            };
            if top < scored.len() {
                scored.select_nth_unstable_by(top - 1, cmp);
            }
            let chosen = &mut scored[..top];
            chosen.sort_by(cmp);
            let dir = &mut dirs[j * k..(j + 1) * k];
            let mut mean_score = 0.0;
            for &(s, i, p) in chosen.iter() {
                mean_score += s;
                self.feats.accumulate(i, p, 1.0 / top as f64, dir);
            }
            total += mean_score / top as f64;
        }
        (dirs, total / m as f64)
    }

    fn pairwise_similarity(&self) -> f64 {
        let m = self.m();
        if m < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    sum += crate::cav_bank::dot(self.cav(a), self.cav(b)).abs();
                }
            }
        }
        sum / (m * (m - 1)) as f64
    }

    fn add_regularizer_grads(&self, grad: &mut [f64], r1_dirs: Option<&[f64]>) {
        let (m, k) = (self.m(), self.k());
        if let Some(dirs) = r1_dirs {
            let w = self.cfg.lambda1 / m as f64;
            for (g, d) in grad.iter_mut().zip(dirs) {
                *g -= w * d;
            }
        }
        if self.cfg.lambda2 > 0.0 && m > 1 {
            let w = self.cfg.lambda2 * 2.0 / (m * (m - 1)) as f64;
            for a in 0..m {
                for b in 0..m {
                    if a == b {
                        continue;
                    }
                    let d = crate::cav_bank::dot(self.cav(a), self.cav(b));
                    let sign = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    for t in 0..k {
                        grad[a * k + t] += w * sign * self.cav(b)[t];
                    }
                }
            }
        }
    }

    /// Cross-entropy gradients averaged over the batch; adds the summed batch
    /// loss into `ce_sum`.
    fn batch_grads(&self, batch: &[usize], ce_sum: &mut f64) -> Grads {
        let (m, k) = (self.m(), self.k());
        let head = &self.head;
        let (hd, nc) = (head.hidden, head.classes);
        let mut g = Grads {
            w1: vec![0.0; head.w1.len()],
            b1: vec![0.0; hd],
            w2: vec![0.0; head.w2.len()],
            b2: vec![0.0; nc],
            cavs: vec![0.0; m * k],
        };
        let scale = 1.0 / batch.len() as f64;
        let mut z = vec![0.0; m];
        let mut argmax_pos = vec![0usize; m];
        for &i in batch {
            for j in 0..m {
                let (gmax, f) = self.feats.max_score(i, self.cav(j));
                z[j] = threshold(gmax, head.beta);
                argmax_pos[j] = f;
            }
            let pre = head.hidden_pre(&z, None);
            let hidden: Vec<f64> = pre.iter().map(|x| x.max(0.0)).collect();
            let logits = head.logits_from_hidden(&hidden);
            let probs = softmax(&logits);
            let y = self.bundle.label(i);
            *ce_sum -= probs[y].max(f64::MIN_POSITIVE).ln();

            let dlogits: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(c, p)| (p - (c == y) as u8 as f64) * scale)
                .collect();
            let mut dhidden = vec![0.0; hd];
            for c in 0..nc {
                g.b2[c] += dlogits[c];
                for h in 0..hd {
                    g.w2[c * hd + h] += dlogits[c] * hidden[h];
                    dhidden[h] += dlogits[c] * head.w2[c * hd + h];
                }
            }
            let mut dz = vec![0.0; m];
            for h in 0..hd {
                if pre[h] <= 0.0 {
                    continue;
                }
                g.b1[h] += dhidden[h];
                for j in 0..m {
                    g.w1[h * m + j] += dhidden[h] * z[j];
                    dz[j] += dhidden[h] * head.w1[h * m + j];
                }
            }
            if self.train_cavs {
                for j in 0..m {
                    if z[j] != 0.0 {
                        self.feats
                            .accumulate(i, argmax_pos[j], dz[j], &mut g.cavs[j * k..(j + 1) * k]);
                    }
                }
            }
        }
        g
    }

    #[cfg(test)]
    fn shallow(&self) -> Trainer<'a> {
        Trainer {
            bundle: self.bundle,
            cfg: self.cfg,
            feats: LocalFeatures::new(self.bundle, self.cfg.normalized_scores),
            cavs: self.cavs.clone(),
            template: self.template.clone(),
            head: self.head.clone(),
            train_cavs: self.train_cavs,
            train_idx: self.train_idx.clone(),
            test_idx: self.test_idx.clone(),
            seed: self.seed,
            rng: self.rng.clone(),
        }
    }

    fn accuracy(&self, idx: &[usize]) -> f64 {
        let m = self.m();
        let mut z = vec![0.0; m];
        let correct = idx
            .iter()
            .filter(|&&i| {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = threshold(self.feats.max_score(i, self.cav(j)).0, self.head.beta);
                }
                self.head.predict(&z) == self.bundle.label(i)
            })
            .count();
        correct as f64 / idx.len() as f64
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Evaluates a head on precomputed pooled scores under concept masks.
pub struct MaskedEvaluator<'a> {
    head: &'a SurrogateHead,
    pooled: PooledScores,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
}

impl<'a> MaskedEvaluator<'a> {
    pub fn new(cavs: &CavSet, head: &'a SurrogateHead, bundle: &DumpBundle) -> Result<Self> {
        head.check(cavs, bundle)?;
        let pooled = pool_bundle(bundle, cavs, head.beta, head.normalized_scores)?;
        Ok(Self {
            head,
            pooled,
            labels: bundle.labels().iter().map(|&l| l as usize).collect(),
            class_counts: bundle.class_counts(),
        })
    }

    pub fn concepts(&self) -> usize {
        self.pooled.m
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// Correct predictions per class with only `active` concepts visible.
    pub fn correct_by_class(&self, active: &[bool]) -> Vec<usize> {
        let mut correct = vec![0; self.class_counts.len()];
        for (i, &y) in self.labels.iter().enumerate() {
            if self.head.predict_masked(self.pooled.row(i), active) == y {
                correct[y] += 1;
            }
        }
        correct
    }

    pub fn accuracy(&self, active: &[bool]) -> f64 {
        self.correct_by_class(active).iter().sum::<usize>() as f64 / self.labels.len() as f64
    }
}

/// `(score - chance) / (a_orig - chance)`, clamped below at zero.
pub fn normalized_gain(score: f64, chance: f64, a_orig: f64) -> Result<f64> {
    if a_orig <= chance {
        return Err(Error::DegenerateOriginal { a_orig, chance });
    }
    Ok(((score - chance) / (a_orig - chance)).max(0.0))
}

/// Completeness of the concepts selected by `mask`; the empty set scores 0.
pub fn completeness(cavs: &CavSet, head: &SurrogateHead, bundle: &DumpBundle, mask: &[bool]) -> Result<f64> {
    if mask.len() != cavs.len() {
        return Err(Error::DimensionMismatch {
            expected: cavs.len(),
            found: mask.len(),
        });
    }
    let chance = 1.0 / bundle.num_classes() as f64;
    let a_orig = bundle.meta().a_orig;
    if a_orig <= chance {
        return Err(Error::DegenerateOriginal { a_orig, chance });
    }
    if !mask.iter().any(|&b| b) {
        return Ok(0.0);
    }
    let eval = MaskedEvaluator::new(cavs, head, bundle)?;
    normalized_gain(eval.accuracy(mask), chance, a_orig)
}
