//! Sets of concept activation vectors: normalization, deduplication,
//! class-derived construction and on-disk form (NPY + JSON sidecar).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{read_npy, write_npy, DumpBundle, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CavOrigin {
    Discovered,
    ClassDerived,
    Imported,
}

/// `m` unit vectors in the `k`-dimensional channel space of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CavSet {
    k: usize,
    rows: Vec<f64>,
    labels: Option<Vec<String>>,
    origin: CavOrigin,
    layer: String,
    source_index: Vec<usize>,
}

impl CavSet {
    /// Scales every row of the row-major `[m, k]` buffer to unit length.
    pub fn normalize(
        raw: &[f64],
        k: usize,
        origin: CavOrigin,
        layer: impl Into<String>,
    ) -> Result<Self> {
        if k == 0 || raw.is_empty() || !raw.len().is_multiple_of(k) {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not form rows of width {k}",
                raw.len()
            )));
        }
        let mut rows = raw.to_vec();
        for (j, row) in rows.chunks_exact_mut(k).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue(format!("CAV row {j}")));
            }
            let norm = norm(row);
            if norm == 0.0 {
                return Err(Error::ZeroVector(j));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let m = rows.len() / k;
        Ok(Self {
            k,
            rows,
            labels: None,
            origin,
            layer: layer.into(),
            source_index: (0..m).collect(),
        })
    }

    pub fn from_tensor(t: &Tensor, origin: CavOrigin, layer: impl Into<String>) -> Result<Self> {
        let data = t
            .as_f32()
            .ok_or_else(|| Error::ShapeMismatch("CAV tensor must hold floats".into()))?;
        if t.ndim() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "CAV tensor must be [m, k], got {:?}",
                t.shape()
            )));
        }
        let raw: Vec<f64> = data.iter().map(|&x| x as f64).collect();
        Self::normalize(&raw, t.shape()[1], origin, layer)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} CAVs",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.rows[j * self.k..(j + 1) * self.k]
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn label(&self, j: usize) -> Option<&str> {
        self.labels.as_ref().map(|l| l[j].as_str())
    }

    pub fn origin(&self) -> CavOrigin {
        self.origin
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    /// Row index of each CAV in the set it was deduplicated from.
    pub fn source_index(&self) -> &[usize] {
        &self.source_index
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(
            vec![self.len(), self.k],
            self.rows.iter().map(|&x| x as f32).collect(),
        )
        .expect("rows are a whole number of k-vectors")
    }

    /// Greedy first-wins deduplication: a row is kept iff its absolute dot
    /// product with every previously kept row is at most `threshold`.
    pub fn dedup(&self, threshold: f64) -> CavSet {
        let mut keep: Vec<usize> = Vec::new();
        for j in 0..self.len() {
            let row = self.row(j);
            if keep
                .iter()
                .all(|&kept| dot(row, self.row(kept)).abs() <= threshold)
            {
                keep.push(j);
            }
        }
        self.select(&keep)
    }

    fn select(&self, keep: &[usize]) -> CavSet {
        CavSet {
            k: self.k,
            rows: keep.iter().flat_map(|&j| self.row(j).to_vec()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| keep.iter().map(|&j| l[j].clone()).collect()),
            origin: self.origin,
            layer: self.layer.clone(),
            source_index: keep.iter().map(|&j| self.source_index[j]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassCavMethod {
    /// Class mean of spatially pooled activations minus the global mean.
    #[default]
    CenteredMean,
    /// Weight vector of a one-vs-rest logistic probe on pooled activations.
    LinearProbe,
}

/// One CAV per class, labelled with the class names.
pub fn class_cavs(bundle: &DumpBundle, method: ClassCavMethod) -> Result<CavSet> {
    let k_classes = bundle.num_classes();
    if k_classes < 2 {
        return Err(Error::Config("class CAVs need at least two classes".into()));
    }
    let counts = bundle.class_counts();
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }
    let pooled = pooled_activations(bundle);
    let c = bundle.channels();
    let n = bundle.n();

    let mut global = vec![0.0; c];
    for row in pooled.chunks_exact(c) {
        add_assign(&mut global, row);
    }
    global.iter_mut().for_each(|x| *x /= n as f64);

    let raw = match method {
        ClassCavMethod::CenteredMean => {
            let mut means = vec![0.0; k_classes * c];
            for (i, row) in pooled.chunks_exact(c).enumerate() {
                add_assign(&mut means[bundle.label(i) * c..][..c], row);
            }
            for (class, mean) in means.chunks_exact_mut(c).enumerate() {
                for (x, g) in mean.iter_mut().zip(&global) {
                    *x = *x / counts[class] as f64 - g;
                }
            }
            means
        }
        ClassCavMethod::LinearProbe => linear_probe(bundle, &pooled, &global),
    };
    let names = (0..k_classes).map(|cl| bundle.class_name(cl)).collect();
    CavSet::normalize(&raw, c, CavOrigin::ClassDerived, &bundle.meta().layer)?.with_labels(names)
}

/// Spatial mean of each image's local feature vectors, `[n * C]`.
fn pooled_activations(bundle: &DumpBundle) -> Vec<f64> {
    let (c, f) = (bundle.channels(), bundle.positions());
    let mut pooled = vec![0.0; bundle.n() * c];
    for (i, out) in pooled.chunks_exact_mut(c).enumerate() {
        for local in bundle.image_activations(i).chunks_exact(c) {
            for (o, &x) in out.iter_mut().zip(local) {
                *o += x as f64;
            }
        }
        out.iter_mut().for_each(|x| *x /= f as f64);
    }
    pooled
}

fn linear_probe(bundle: &DumpBundle, pooled: &[f64], global: &[f64]) -> Vec<f64> {
    const ITERS: usize = 500;
    const LR: f64 = 0.5;
    const L2: f64 = 1e-3;
    let c = bundle.channels();
    let n = bundle.n();
    let centered: Vec<f64> = pooled
        .chunks_exact(c)
        .flat_map(|row| row.iter().zip(global).map(|(x, g)| x - g))
        .collect();
    let rms = (centered.iter().map(|x| x * x).sum::<f64>() / centered.len() as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };

    let mut weights = vec![0.0; bundle.num_classes() * c];
    for (class, w) in weights.chunks_exact_mut(c).enumerate() {
        let mut bias = 0.0;
        for _ in 0..ITERS {
            let mut grad = vec![0.0; c];
            let mut grad_b = 0.0;
            for (i, row) in centered.chunks_exact(c).enumerate() {
                let z: f64 = bias + scale * dot(w, row);
                let target = (bundle.label(i) == class) as u8 as f64;
                let err = sigmoid(z) - target;
                for (g, &x) in grad.iter_mut().zip(row) {
                    *g += err * scale * x;
                }
                grad_b += err;
            }
            for (wi, g) in w.iter_mut().zip(&grad) {
                *wi -= LR * (g / n as f64 + L2 * *wi);
            }
            bias -= LR * grad_b / n as f64;
        }
    }
    weights
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    origin: CavOrigin,
    layer: String,
    #[serde(default)]
    labels: Option<Vec<String>>,
    #[serde(default)]
    source_index: Option<Vec<usize>>,
    #[serde(default)]
    dedup_threshold: Option<f64>,
}

fn sidecar_path(npy: &Path) -> PathBuf {
    npy.with_extension("json")
}

/// Writes the CAV rows as `<f4` NPY and a JSON sidecar next to it.
pub fn save_cavs(path: impl AsRef<Path>, cavs: &CavSet, dedup_threshold: Option<f64>) -> Result<()> {
    let path = path.as_ref();
    write_npy(path, &cavs.to_tensor())?;
    let sidecar = Sidecar {
        origin: cavs.origin,
        layer: cavs.layer.clone(),
        labels: cavs.labels.clone(),
        source_index: Some(cavs.source_index.clone()),
        dedup_threshold,
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json("CAV sidecar", e))?;
    fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

/// Reads CAVs written by [`save_cavs`] or any `[m, k]` float NPY file.
/// Without a sidecar the set is tagged as imported. Rows are renormalized.
pub fn load_cavs(path: impl AsRef<Path>) -> Result<CavSet> {
    let path = path.as_ref();
    let tensor = read_npy(path)?;
    let side = sidecar_path(path);
    if !side.is_file() {
        return CavSet::from_tensor(&tensor, CavOrigin::Imported, "");
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::json(side.display().to_string(), e))?;
    let mut cavs = CavSet::from_tensor(&tensor, sidecar.origin, sidecar.layer)?;
    if let Some(labels) = sidecar.labels {
        cavs = cavs.with_labels(labels)?;
    }
    if let Some(src) = sidecar.source_index {
        if src.len() != cavs.len() {
            return Err(Error::ShapeMismatch("sidecar source_index length".into()));
        }
        cavs.source_index = src;
    }
    Ok(cavs)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn add_assign(acc: &mut [f64], row: &[f64]) {
    acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::receptive_field::ArchSpec;
    use crate::tensor_store::BundleMeta;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_rows(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Vec<f64> {
        (0..m * k).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn bundle_from_pooled(h: usize, w: usize, c: usize, acts: Vec<f32>, labels: Vec<i32>, k: usize) -> DumpBundle {
        let n = labels.len();
        DumpBundle::new(
            Tensor::from_f32(vec![n, h, w, c], acts).unwrap(),
            Tensor::from_f32(vec![n, 1], vec![1.0; n]).unwrap(),
            Tensor::from_f32(vec![1, 1], vec![1.0]).unwrap(),
            vec!["t".into()],
            Tensor::from_i32(vec![n], labels).unwrap(),
            ArchSpec {
                input_hw: [h, w],
                layers: vec![],
            },
            BundleMeta {
                a_orig: 1.0,
                num_classes: k,
                layer: "l".into(),
                input_hw: None,
                class_names: None,
            },
            (0..n).map(|i| i.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn three_four_five() {
        let c = CavSet::normalize(&[3.0, 4.0], 2, CavOrigin::Imported, "l").unwrap();
        assert_eq!(c.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn unit_rows_are_unchanged() {
        let c = CavSet::normalize(&[0.0, 1.0, 1.0, 0.0], 2, CavOrigin::Imported, "l").unwrap();
        assert_eq!(c.rows(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_row_is_rejected() {
        assert!(matches!(
            CavSet::normalize(&[1.0, 0.0, 0.0, 0.0], 2, CavOrigin::Imported, "l"),
            Err(Error::ZeroVector(1))
        ));
    }

    #[test]
    fn random_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = random_rows(&mut rng, 50, 17);
        let c = CavSet::normalize(&raw, 17, CavOrigin::Imported, "l").unwrap();
        for j in 0..50 {
            let n: f64 = c.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_is_removed() {
        let c = CavSet::normalize(&[1.0, 2.0, 2.0, 1.0, 2.0, 4.0], 2, CavOrigin::Imported, "l")
            .unwrap();
        let d = c.dedup(0.95);
        assert_eq!(d.len(), 2);
        assert_eq!(d.source_index(), &[0, 1]);
    }

    #[test]
    fn negated_duplicate_is_removed() {
        let c = CavSet::normalize(&[1.0, 0.0, -1.0, 0.0], 2, CavOrigin::Imported, "l").unwrap();
        assert_eq!(c.dedup(0.95).len(), 1);
    }

    #[test]
    fn orthogonal_rows_survive() {
        let mut raw = vec![0.0; 25];
        for i in 0..5 {
            raw[i * 5 + i] = 1.0;
        }
        let c = CavSet::normalize(&raw, 5, CavOrigin::Imported, "l").unwrap();
        assert_eq!(c.dedup(0.95).len(), 5);
    }

    #[test]
    fn twenty_with_five_near_copies_leaves_fifteen() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let k = 64;
        let mut raw = random_rows(&mut rng, 15, k);
        for copy_of in [0usize, 3, 7, 9, 14] {
            let noisy: Vec<f64> = raw[copy_of * k..(copy_of + 1) * k]
                .iter()
                .map(|x| x + 0.05 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            raw.extend(noisy);
        }
        let c = CavSet::normalize(&raw, k, CavOrigin::Discovered, "l").unwrap();
        assert_eq!(c.len(), 20);
        let kept = c.dedup(0.95);
        assert_eq!(kept.len(), 15);
        assert_eq!(kept.source_index(), (0..15).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn symmetric_two_class_case() {
        // class 0 pools to +e1, class 1 to -e1
        let acts = vec![1.0, 0.0, -1.0, 0.0];
        let b = bundle_from_pooled(1, 1, 2, acts, vec![0, 1], 2);
        let c = class_cavs(&b, ClassCavMethod::CenteredMean).unwrap();
        assert_eq!(c.row(0), &[1.0, 0.0]);
        assert_eq!(c.row(1), &[-1.0, 0.0]);
        assert_eq!(c.labels().unwrap(), &["class_0", "class_1"]);
        assert_eq!(c.origin(), CavOrigin::ClassDerived);
    }

    #[test]
    fn class_cavs_match_naive_centered_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, h, w, c, k) = (30, 2, 3, 5, 3);
        let acts: Vec<f32> = (0..n * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<i32> = (0..n).map(|i| (i % k) as i32).collect();
        let b = bundle_from_pooled(h, w, c, acts.clone(), labels.clone(), k);
        let cavs = class_cavs(&b, ClassCavMethod::CenteredMean).unwrap();

        // naive double loop
        let f = h * w;
        let pooled = |i: usize, ch: usize| -> f64 {
            let mut s = 0.0;
            for p in 0..f {
                s += acts[(i * f + p) * c + ch] as f64;
            }
            s / f as f64
        };
        for class in 0..k {
            let mut v = vec![0.0; c];
            for ch in 0..c {
                let (mut cs, mut cn, mut gs) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    gs += pooled(i, ch);
                    if labels[i] as usize == class {
                        cs += pooled(i, ch);
                        cn += 1.0;
                    }
                }
                v[ch] = cs / cn - gs / n as f64;
            }
            let nv = norm(&v);
            for ch in 0..c {
                assert!((cavs.row(class)[ch] - v[ch] / nv).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_class_is_an_error() {
        let b = bundle_from_pooled(1, 1, 2, vec![1.0, 0.0, 0.5, 0.5], vec![0, 0], 2);
        assert!(matches!(
            class_cavs(&b, ClassCavMethod::CenteredMean),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn linear_probe_points_toward_its_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let mut acts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let sign = if class == 0 { 1.0 } else { -1.0 };
            acts.push(sign + rng.random_range(-0.3..0.3));
            acts.push(rng.random_range(-1.0..1.0));
            labels.push(class);
        }
        let b = bundle_from_pooled(1, 1, 2, acts, labels, 2);
        let c = class_cavs(&b, ClassCavMethod::LinearProbe).unwrap();
        assert!(c.row(0)[0] > 0.9);
        assert!(c.row(1)[0] < -0.9);
    }

    #[test]
    fn save_and_load_keep_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cavs.npy");
        let c = CavSet::normalize(&[3.0, 4.0, 0.0, 1.0, 1.0, 0.0], 2, CavOrigin::Discovered, "block1")
            .unwrap()
            .with_labels(vec!["a".into(), "b".into(), "c".into()])
            .unwrap()
            .dedup(0.5);
        save_cavs(&path, &c, Some(0.5)).unwrap();
        let back = load_cavs(&path).unwrap();
        assert_eq!(back.len(), c.len());
        assert_eq!(back.labels(), c.labels());
        assert_eq!(back.source_index(), c.source_index());
        assert_eq!(back.layer(), "block1");
        for (a, b) in back.rows().iter().zip(c.rows()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bare_npy_loads_as_imported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.npy");
        write_npy(&path, &Tensor::from_f32(vec![1, 2], vec![0.0, 2.0]).unwrap()).unwrap();
        let c = load_cavs(&path).unwrap();
        assert_eq!(c.origin(), CavOrigin::Imported);
        assert_eq!(c.row(0), &[0.0, 1.0]);
    }

    fn cav_set_strategy() -> impl Strategy<Value = CavSet> {
        (1usize..12, 2usize..6, any::<u64>()).prop_map(|(m, k, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut raw = random_rows(&mut rng, m, k);
            // plant some near duplicates
            for j in 1..m {
                if rng.random_bool(0.3) {
                    let src = rng.random_range(0..j);
                    for t in 0..k {
                        raw[j * k + t] = raw[src * k + t] + 0.01 * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            CavSet::normalize(&raw, k, CavOrigin::Imported, "l").unwrap()
        })
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent(c in cav_set_strategy(), t in 0.05f64..1.0) {
            let once = c.dedup(t);
            let twice = once.dedup(t);
            prop_assert!(!once.is_empty());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn dedup_shrinks_with_tighter_threshold(c in cav_set_strategy(), a in 0.05f64..1.0, b in 0.05f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(c.dedup(lo).len() <= c.dedup(hi).len());
        }

        #[test]
        fn class_cavs_ignore_image_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, c, k) = (12, 3, 3);
            let acts: Vec<f32> = (0..n * 2 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let labels: Vec<i32> = (0..n).map(|i| (i % k) as i32).collect();
            let b = bundle_from_pooled(1, 2, c, acts.clone(), labels.clone(), k);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pacts: Vec<f32> = perm.iter().flat_map(|&i| acts[i * 2 * c..(i + 1) * 2 * c].to_vec()).collect();
            let plabels: Vec<i32> = perm.iter().map(|&i| labels[i]).collect();
            let pb = bundle_from_pooled(1, 2, c, pacts, plabels, k);
            let x = class_cavs(&b, ClassCavMethod::CenteredMean).unwrap();
            let y = class_cavs(&pb, ClassCavMethod::CenteredMean).unwrap();
            for (a, b) in x.rows().iter().zip(y.rows()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
