//! Ranking catalog texts for a set of weighted images.
//!
//! Texts are scored with SoftWPMI over the image-text cosine similarity
//! matrix: a soft-set log-likelihood of the text given the relevant images,
//! penalized by the text's marginal probability over a background set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::Strategy;
use crate::tensor_store::Tensor;

/// Cosine similarities, row-major `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "similarity matrix has {} values, expected {rows} x {cols}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-6) {
            return Err(Error::RangeError("similarities must be finite and within [-1, 1]".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.cols + t]
    }

    /// Matrix made of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<SimilarityMatrix> {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            if r >= self.rows {
                return Err(Error::IndexOutOfRange { index: r, len: self.rows });
            }
            values.extend_from_slice(self.row(r));
        }
        Ok(SimilarityMatrix {
            rows: rows.len(),
            cols: self.cols,
            values,
        })
    }
}

fn matrix_rows<'a>(t: &'a Tensor, which: &'static str) -> Result<(&'a [f32], usize, usize)> {
    let data = t
        .as_f32()
        .ok_or_else(|| Error::UnsupportedDtype(format!("{which} embeddings must be float32")))?;
    match *t.shape() {
        [rows, dim] => Ok((data, rows, dim)),
        _ => Err(Error::ShapeMismatch(format!(
            "{which} embeddings must be 2-d, got shape {:?}",
            t.shape()
        ))),
    }
}

fn unit_rows(data: &[f32], rows: usize, dim: usize, which: &'static str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        let row = &data[r * dim..(r + 1) * dim];
        let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::ZeroNormEmbedding { which, row: r });
        }
        out.extend(row.iter().map(|&x| x as f64 / norm));
    }
    Ok(out)
}

/// `P[i, t] = cos(image_i, text_t)`.
pub fn similarity_matrix(image_embs: &Tensor, text_embs: &Tensor) -> Result<SimilarityMatrix> {
    let (img, n, d) = matrix_rows(image_embs, "image")?;
    let (txt, s, dt) = matrix_rows(text_embs, "text")?;
    if d != dt {
        return Err(Error::DimensionMismatch { expected: d, found: dt });
    }
    let img = unit_rows(img, n, d, "image")?;
    let txt = unit_rows(txt, s, d, "text")?;
    let mut values = Vec::with_capacity(n * s);
    for i in 0..n {
        let x = &img[i * d..(i + 1) * d];
        for t in 0..s {
            let y = &txt[t * d..(t + 1) * d];
            let c: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            values.push(c.clamp(-1.0, 1.0));
        }
    }
    Ok(SimilarityMatrix { rows: n, cols: s, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WpmiParams {
    /// Weight of the marginal penalty.
    pub lambda: f64,
    /// Logit scale `a` of `p(t|x) = softmax(a * P[x, :])`.
    pub temperature_a: f64,
    pub soft_low: f64,
    pub soft_high: f64,
}

impl Default for WpmiParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            temperature_a: 100.0,
            soft_low: 0.5,
            soft_high: 1.0,
        }
    }
}

impl WpmiParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("wpmi: lambda must be non-negative".into()));
        }
        if !(self.temperature_a > 0.0 && self.temperature_a.is_finite()) {
            return Err(Error::Config("wpmi: temperature_a must be positive".into()));
        }
        if !(0.0 < self.soft_low && self.soft_low <= self.soft_high && self.soft_high <= 1.0) {
            return Err(Error::Config("wpmi: need 0 < soft_low <= soft_high <= 1".into()));
        }
        Ok(())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))`.
fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log p(t|x)` for one similarity row.
pub fn log_conditional(row: &[f64], temperature_a: f64) -> Vec<f64> {
    let logits: Vec<f64> = row.iter().map(|&p| temperature_a * p).collect();
    let lse = log_sum_exp(logits.iter().copied());
    logits.into_iter().map(|l| l - lse).collect()
}

/// `log p̄(t)`: log of the mean of `p(t|x)` over the background rows.
pub fn log_marginal(background: &SimilarityMatrix, temperature_a: f64) -> Result<Vec<f64>> {
    if background.rows == 0 {
        return Err(Error::Config("background set for the text marginal is empty".into()));
    }
    let s = background.cols;
    let logs: Vec<Vec<f64>> = (0..background.rows)
        .map(|i| log_conditional(background.row(i), temperature_a))
        .collect();
    let log_n = (background.rows as f64).ln();
    Ok((0..s)
        .map(|t| log_sum_exp(logs.iter().map(|l| l[t])) - log_n)
        .collect())
}

/// Affine rescale of the weights onto `[low, high]`; all-equal weights map to `high`.
pub fn inclusion_probabilities(weights: &[f64], low: f64, high: f64) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    Ok(weights
        .iter()
        .map(|&w| {
            if span > 0.0 {
                low + (w - min) / span * (high - low)
            } else {
                high
            }
        })
        .collect())
}

/// SoftWPMI score of every text, with the background marginal computed here.
pub fn soft_wpmi(
    relevant: &SimilarityMatrix,
    weights: &[f64],
    background: &SimilarityMatrix,
    params: &WpmiParams,
) -> Result<Vec<f64>> {
    let marginal = log_marginal(background, params.temperature_a)?;
    soft_wpmi_with_marginal(relevant, weights, &marginal, params)
}

/// `score(t) = sum_i log(1 - pi_i + pi_i * p(t|x_i)) - lambda * log p̄(t)`.
pub fn soft_wpmi_with_marginal(
    relevant: &SimilarityMatrix,
    weights: &[f64],
    log_marginal: &[f64],
    params: &WpmiParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    if relevant.rows == 0 {
        return Err(Error::Config("relevance set is empty".into()));
    }
    if weights.len() != relevant.rows {
        return Err(Error::DimensionMismatch {
            expected: relevant.rows,
            found: weights.len(),
        });
    }
    if log_marginal.len() != relevant.cols {
        return Err(Error::DimensionMismatch {
            expected: relevant.cols,
            found: log_marginal.len(),
        });
    }
    let pi = inclusion_probabilities(weights, params.soft_low, params.soft_high)?;
    let mut scores = vec![0.0; relevant.cols];
    for (i, &p) in pi.iter().enumerate() {
        let log_p = log_conditional(relevant.row(i), params.temperature_a);
        let (log_out, log_in) = ((1.0 - p).ln(), p.ln());
        for (acc, lp) in scores.iter_mut().zip(log_p) {
            *acc += log_add_exp(log_out, log_in + lp);
        }
    }
    for (acc, lm) in scores.iter_mut().zip(log_marginal) {
        *acc -= params.lambda * lm;
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextScore {
    pub index: usize,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRef {
    pub index: usize,
    pub text: String,
}

/// The `k` highest scores, ties to the smaller index.
pub fn top_k(scores: &[f64], texts: &[String], k: usize) -> Result<Vec<TextScore>> {
    let s = scores.len();
    if k == 0 || k > s {
        return Err(Error::KOutOfRange { k, s });
    }
    if texts.len() != s {
        return Err(Error::DimensionMismatch {
            expected: s,
            found: texts.len(),
        });
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|t| TextScore {
            index: t,
            text: texts[t].clone(),
            score: scores[t],
        })
        .collect())
}

/// Catalog text closest to the score-weighted centroid of the top-k texts.
///
/// Negative scores count as zero. When every weight is zero, or the
/// weighted vectors cancel out, the rank-1 entry is returned.
pub fn common_description(
    ranking: &[TextScore],
    text_embs: &Tensor,
    texts: &[String],
    unit_normalize: bool,
) -> Result<TextRef> {
    let first = ranking
        .first()
        .ok_or_else(|| Error::Config("common description needs at least one ranked text".into()))?;
    let (data, s, d) = matrix_rows(text_embs, "text")?;
    if texts.len() != s {
        return Err(Error::DimensionMismatch {
            expected: s,
            found: texts.len(),
        });
    }
    let fallback = TextRef {
        index: first.index,
        text: first.text.clone(),
    };
    let units = unit_rows(data, s, d, "text")?;
    let raw: Vec<f64> = data.iter().map(|&x| x as f64).collect();
    let basis = if unit_normalize { &units } else { &raw };

    let weights: Vec<f64> = ranking.iter().map(|e| e.score.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Ok(fallback);
    }
    let mut centroid = vec![0.0; d];
    for (entry, w) in ranking.iter().zip(&weights) {
        if entry.index >= s {
            return Err(Error::IndexOutOfRange { index: entry.index, len: s });
        }
        for (c, e) in centroid.iter_mut().zip(&basis[entry.index * d..(entry.index + 1) * d]) {
            *c += w * e / total;
        }
    }
    let norm = centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Ok(fallback);
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for t in 0..s {
        let cos: f64 = centroid.iter().zip(&units[t * d..(t + 1) * d]).map(|(a, b)| a * b).sum::<f64>() / norm;
        if cos > best.0 {
            best = (cos, t);
        }
    }
    Ok(TextRef {
        index: best.1,
        text: texts[best.1].clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRanking {
    pub cav: usize,
    pub strategy: Strategy,
    pub params: WpmiParams,
    pub topk: Vec<TextScore>,
    pub common: TextRef,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(rows: &[&[f32]]) -> Tensor {
        Tensor::from_f32(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    fn strings(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    /// `log E_B[prod_{i in B} p_i]` with `B` drawn by independent inclusion,
    /// by enumerating all subsets.
    fn exhaustive_soft_term(p: &[f64], pi: &[f64]) -> f64 {
        let n = p.len();
        let terms: Vec<f64> = (0u32..1 << n)
            .map(|mask| {
                (0..n)
                    .map(|i| {
                        if mask & (1 << i) != 0 {
                            pi[i].ln() + p[i].ln()
                        } else {
                            (1.0 - pi[i]).ln()
                        }
                    })
                    .sum::<f64>()
            })
            .collect();
        log_sum_exp(terms.iter().copied())
    }

    #[test]
    fn cosine_basics() {
        let p = similarity_matrix(&tensor(&[&[1.0, 0.0]]), &tensor(&[&[2.0, 0.0], &[0.0, 3.0]])).unwrap();
        assert_eq!(p.get(0, 0), 1.0);
        assert_eq!(p.get(0, 1), 0.0);
    }

    #[test]
    fn cosine_matches_naive_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a: Vec<f32> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = similarity_matrix(&tensor(&[&a]), &tensor(&[&b])).unwrap();
            let dot: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
            let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((p.get(0, 0) - dot / (na * nb)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_norm_and_dim_errors() {
        assert!(matches!(
            similarity_matrix(&tensor(&[&[0.0, 0.0]]), &tensor(&[&[1.0, 0.0]])),
            Err(Error::ZeroNormEmbedding { which: "image", row: 0 })
        ));
        assert!(matches!(
            similarity_matrix(&tensor(&[&[1.0, 0.0]]), &tensor(&[&[1.0, 0.0, 0.0]])),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn single_image_reduces_to_conditional_likelihood() {
        let p = SimilarityMatrix::new(1, 4, vec![0.1, 0.3, -0.2, 0.25]).unwrap();
        let params = WpmiParams { lambda: 0.0, ..Default::default() };
        let s = soft_wpmi(&p, &[1.0], &p, &params).unwrap();
        let lp = log_conditional(p.row(0), 100.0);
        for t in 0..4 {
            assert!((s[t] - lp[t]).abs() < 1e-12);
        }
        let ranked: Vec<usize> = top_k(&s, &strings(4), 4).unwrap().iter().map(|e| e.index).collect();
        assert_eq!(ranked, vec![1, 3, 0, 2]);
    }

    #[test]
    fn full_inclusion_is_hard_wpmi() {
        let q = SimilarityMatrix::new(2, 3, vec![0.2, 0.1, -0.1, 0.05, 0.3, 0.0]).unwrap();
        let bg = SimilarityMatrix::new(3, 3, vec![0.2, 0.1, -0.1, 0.05, 0.3, 0.0, 0.0, 0.0, 0.4]).unwrap();
        let params = WpmiParams::default();
        let s = soft_wpmi(&q, &[0.7, 0.7], &bg, &params).unwrap();
        for t in 0..3 {
            let cond = |row: &[f64]| {
                let e: Vec<f64> = row.iter().map(|x| (100.0 * x).exp()).collect();
                e[t] / e.iter().sum::<f64>()
            };
            let pbar = (0..3).map(|i| cond(bg.row(i))).sum::<f64>() / 3.0;
            let hard = cond(q.row(0)).ln() + cond(q.row(1)).ln() - pbar.ln();
            assert!((s[t] - hard).abs() < 1e-9, "{} vs {hard}", s[t]);
            let p: Vec<f64> = (0..2).map(|i| cond(q.row(i))).collect();
            assert!((exhaustive_soft_term(&p, &[1.0, 1.0]) - pbar.ln() - s[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_term_equals_exhaustive_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=8 {
            let s = 5;
            let vals: Vec<f64> = (0..n * s).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = SimilarityMatrix::new(n, s, vals).unwrap();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let params = WpmiParams {
                lambda: 0.0,
                temperature_a: 5.0,
                ..Default::default()
            };
            let scores = soft_wpmi(&q, &w, &q, &params).unwrap();
            let pi = inclusion_probabilities(&w, 0.5, 1.0).unwrap();
            for t in 0..s {
                let p: Vec<f64> = (0..n).map(|i| log_conditional(q.row(i), 5.0)[t].exp()).collect();
                assert!((scores[t] - exhaustive_soft_term(&p, &pi)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inclusion_rescale() {
        assert_eq!(inclusion_probabilities(&[1.0, 3.0, 2.0], 0.5, 1.0).unwrap(), vec![0.5, 1.0, 0.75]);
        assert_eq!(inclusion_probabilities(&[0.2, 0.2], 0.5, 1.0).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(
            inclusion_probabilities(&[f64::NAN], 0.5, 1.0),
            Err(Error::DegenerateWeights)
        ));
    }

    #[test]
    fn params_validation() {
        assert!(WpmiParams::default().validate().is_ok());
        for bad in [
            WpmiParams { lambda: -1.0, ..Default::default() },
            WpmiParams { temperature_a: 0.0, ..Default::default() },
            WpmiParams { soft_low: 0.0, ..Default::default() },
            WpmiParams { soft_low: 0.9, soft_high: 0.8, ..Default::default() },
            WpmiParams { soft_high: 1.5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn top_k_cases() {
        let t = strings(4);
        let picked: Vec<usize> = top_k(&[0.3, 0.9, 0.9, 0.1], &t, 2).unwrap().iter().map(|e| e.index).collect();
        assert_eq!(picked, vec![1, 2]);
        let all: Vec<usize> = top_k(&[0.3, 0.9, 0.9, 0.1], &t, 4).unwrap().iter().map(|e| e.index).collect();
        assert_eq!(all, vec![1, 2, 0, 3]);
        assert_eq!(top_k(&[0.3, 0.9, 0.95, 0.1], &t, 1).unwrap()[0].index, 2);
        assert!(matches!(top_k(&[0.3], &t[..1], 2), Err(Error::KOutOfRange { k: 2, s: 1 })));
        assert!(matches!(top_k(&[0.3], &t[..1], 0), Err(Error::KOutOfRange { k: 0, s: 1 })));
    }

    fn entry(index: usize, score: f64) -> TextScore {
        TextScore {
            index,
            text: format!("t{index}"),
            score,
        }
    }

    #[test]
    fn common_of_single_entry_is_itself() {
        let e = tensor(&[&[1.0, 0.0], &[0.0, 1.0], &[0.7, 0.7]]);
        let c = common_description(&[entry(1, 3.0)], &e, &strings(3), true).unwrap();
        assert_eq!(c.index, 1);
    }

    #[test]
    fn common_searches_full_catalog_and_clips_negatives() {
        // top-2 are e0 and e1; the best match for their centroid is t2,
        // which is outside the top-k; the negative entry is ignored
        let e = tensor(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.6], &[-1.0, 0.0]]);
        let ranking = [entry(0, 2.0), entry(1, 2.0), entry(3, -5.0)];
        let c = common_description(&ranking, &e, &strings(4), true).unwrap();
        assert_eq!(c, TextRef { index: 2, text: "t2".into() });
        let all_negative = [entry(3, -1.0), entry(0, -2.0)];
        assert_eq!(common_description(&all_negative, &e, &strings(4), true).unwrap().index, 3);
    }

    #[test]
    fn unit_normalization_flag_matters() {
        // t0 is long: without normalization it dominates the centroid
        let e = tensor(&[&[10.0, 0.0], &[0.0, 1.0], &[0.6, 0.8], &[0.9, 0.1]]);
        let ranking = [entry(0, 1.0), entry(1, 1.0)];
        let t = strings(4);
        let unit = common_description(&ranking, &e, &t, true).unwrap();
        let raw = common_description(&ranking, &e, &t, false).unwrap();
        assert_eq!(unit.index, 2);
        assert_eq!(raw.index, 3);
    }

    proptest! {
        #[test]
        fn row_shift_invariance(
            vals in proptest::collection::vec(-0.5f64..0.5, 12),
            shift in -0.4f64..0.4,
            row in 0usize..3,
        ) {
            let q = SimilarityMatrix::new(3, 4, vals.clone()).unwrap();
            let mut shifted = vals;
            shifted[row * 4..row * 4 + 4].iter_mut().for_each(|x| *x += shift);
            let q2 = SimilarityMatrix::new(3, 4, shifted).unwrap();
            let params = WpmiParams { temperature_a: 20.0, ..Default::default() };
            let marginal = log_marginal(&q, 20.0).unwrap();
            let a = soft_wpmi_with_marginal(&q, &[1.0, 2.0, 3.0], &marginal, &params).unwrap();
            let b = soft_wpmi_with_marginal(&q2, &[1.0, 2.0, 3.0], &marginal, &params).unwrap();
            for t in 0..4 {
                prop_assert!((a[t] - b[t]).abs() < 1e-9);
            }
        }

        #[test]
        fn raising_similarity_never_lowers_score(
            vals in proptest::collection::vec(-1.0f64..1.0, 12),
            weights in proptest::collection::vec(0.0f64..1.0, 3),
            row in 0usize..3,
            t in 0usize..4,
            bump in 0.0f64..0.5,
        ) {
            let q = SimilarityMatrix::new(3, 4, vals.clone()).unwrap();
            let mut raised = vals;
            raised[row * 4 + t] = (raised[row * 4 + t] + bump).min(1.0);
            let q2 = SimilarityMatrix::new(3, 4, raised).unwrap();
            let params = WpmiParams { temperature_a: 10.0, ..Default::default() };
            let marginal = log_marginal(&q, 10.0).unwrap();
            let a = soft_wpmi_with_marginal(&q, &weights, &marginal, &params).unwrap();
            let b = soft_wpmi_with_marginal(&q2, &weights, &marginal, &params).unwrap();
            prop_assert!(b[t] >= a[t] - 1e-12);
        }

        #[test]
        fn common_is_scale_invariant(
            scores in proptest::collection::vec(-1.0f64..3.0, 3),
            alpha in 0.01f64..100.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..6 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e = Tensor::from_f32(vec![6, 4], data).unwrap();
            let r1: Vec<TextScore> = scores.iter().enumerate().map(|(i, &s)| entry(i, s)).collect();
            let r2: Vec<TextScore> = scores.iter().enumerate().map(|(i, &s)| entry(i, s * alpha)).collect();
            let t = strings(6);
            prop_assert_eq!(
                common_description(&r1, &e, &t, true).unwrap(),
                common_description(&r2, &e, &t, true).unwrap()
            );
        }
    }
}
