//! Planted-concept fixtures.
//!
//! Generates bundles whose activations contain known orthonormal directions
//! at random positions, with labels given by which directions are present
//! (the presence bitmask), and a text catalog with a few synonyms per
//! direction plus distractors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cav_bank::CavSet;
use crate::receptive_field::{ArchSpec, LayerGeom};
use crate::tensor_store::{BundleMeta, DumpBundle, Tensor};

const CONCEPT_WORDS: [[&str; 3]; 6] = [
    ["striped", "stripes", "zebra"],
    ["spotted", "dots", "polka"],
    ["grass", "meadow", "lawn"],
    ["water", "ocean", "waves"],
    ["sky", "clouds", "azure"],
    ["fur", "furry", "hairy"],
];

const DISTRACTORS: [&str; 24] = [
    "table", "engine", "violin", "pencil", "bridge", "candle", "ladder", "helmet", "rocket",
    "saddle", "turbine", "anchor", "lantern", "compass", "teapot", "barrel", "kettle", "magnet",
    "tripod", "whistle", "scissors", "hammer", "shovel", "bucket",
];

#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub n: usize,
    pub grid_hw: (usize, usize),
    pub channels: usize,
    /// Number of planted orthonormal directions (at most 6).
    pub directions: usize,
    /// Standard deviation of the Gaussian channel noise.
    pub noise: f64,
    /// Probability that a direction is present in an image.
    pub presence: f64,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            grid_hw: (4, 4),
            channels: 32,
            directions: 4,
            noise: 0.1,
            presence: 0.5,
            embed_dim: 32,
            seed: 0,
        }
    }
}

/// Index of the first synonym of planted direction `j` in the text catalog.
pub fn concept_text_index(j: usize) -> usize {
    3 * j
}

/// Bundle with planted directions; also returns the directions.
pub fn planted_bundle(cfg: &PlantedSpec) -> (DumpBundle, Vec<Vec<f64>>) {
    assert!(cfg.directions >= 1 && cfg.directions <= CONCEPT_WORDS.len());
    assert!(cfg.directions <= cfg.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = cfg.grid_hw;
    let f = h * w;
    let c = cfg.channels;
    let planted = orthonormal(&mut rng, cfg.directions, c);

    let d = cfg.embed_dim;
    let anchors = orthonormal(&mut rng, cfg.directions + 1, d);
    let base = &anchors[cfg.directions];

    let mut acts = vec![0f32; cfg.n * f * c];
    let mut image_embs = Vec::with_capacity(cfg.n * d);
    let mut labels = Vec::with_capacity(cfg.n);
    let mut positions: Vec<usize> = (0..f).collect();
    for i in 0..cfg.n {
        let img = &mut acts[i * f * c..(i + 1) * f * c];
        for x in img.iter_mut() {
            *x = (cfg.noise * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
        positions.shuffle(&mut rng);
        let mut mask = 0i32;
        let mut emb: Vec<f64> = base.iter().map(|b| 0.5 * b).collect();
        for (j, dir) in planted.iter().enumerate() {
            if rng.random_bool(cfg.presence) {
                mask |= 1 << j;
                let p = positions[j % f];
                for (x, v) in img[p * c..(p + 1) * c].iter_mut().zip(dir) {
                    *x += *v as f32;
                }
                for (e, a) in emb.iter_mut().zip(&anchors[j]) {
                    *e += a;
                }
            }
        }
        for e in emb.iter_mut() {
            *e += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        image_embs.extend(emb.iter().map(|&x| x as f32));
        labels.push(mask);
    }

    let mut texts = Vec::new();
    let mut text_embs = Vec::new();
    for (j, words) in CONCEPT_WORDS.iter().take(cfg.directions).enumerate() {
        for word in words {
            texts.push(word.to_string());
            let mut e: Vec<f64> = anchors[j]
                .iter()
                .map(|a| a + 0.3 * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt())
                .collect();
            normalize(&mut e);
            text_embs.extend(e.iter().map(|&x| x as f32));
        }
    }
    for word in DISTRACTORS {
        texts.push(word.to_string());
        let mut e: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut e);
        text_embs.extend(e.iter().map(|&x| x as f32));
    }

    let classes = 1usize << cfg.directions;
    let class_names = (0..classes)
        .map(|mask| {
            let parts: Vec<&str> = (0..cfg.directions)
                .filter(|j| mask & (1 << j) != 0)
                .map(|j| CONCEPT_WORDS[j][0])
                .collect();
            if parts.is_empty() {
                "plain".to_string()
            } else {
                parts.join("+")
            }
        })
        .collect();
    let input_hw = [h * 8, w * 8];
    let bundle = DumpBundle::new(
        Tensor::from_f32(vec![cfg.n, h, w, c], acts).expect("sized"),
        Tensor::from_f32(vec![cfg.n, d], image_embs).expect("sized"),
        Tensor::from_f32(vec![texts.len(), d], text_embs).expect("sized"),
        texts,
        Tensor::from_i32(vec![cfg.n], labels).expect("sized"),
        ArchSpec {
            input_hw,
            layers: vec![LayerGeom::new(3, 2, 1); 3],
        },
        BundleMeta {
            a_orig: 1.0,
            num_classes: classes,
            layer: "planted".into(),
            input_hw: Some(input_hw),
            class_names: Some(class_names),
        },
        (0..cfg.n).map(|i| format!("planted_{i:05}")).collect(),
    )
    .expect("planted bundle is valid");
    (bundle, planted)
}

/// Minimal valid bundle around the given activations: identity arch,
/// one-dimensional embeddings and a single text.
pub fn bare_bundle(
    acts: Vec<f32>,
    n: usize,
    grid_hw: (usize, usize),
    channels: usize,
    labels: Vec<i32>,
    classes: usize,
    a_orig: f64,
) -> DumpBundle {
    let (h, w) = grid_hw;
    DumpBundle::new(
        Tensor::from_f32(vec![n, h, w, channels], acts).expect("sized"),
        Tensor::from_f32(vec![n, 1], vec![1.0; n]).expect("sized"),
        Tensor::from_f32(vec![1, 1], vec![1.0]).expect("sized"),
        vec!["text".into()],
        Tensor::from_i32(vec![n], labels).expect("sized"),
        ArchSpec {
            input_hw: [h, w],
            layers: vec![],
        },
        BundleMeta {
            a_orig,
            num_classes: classes,
            layer: "bare".into(),
            input_hw: None,
            class_names: None,
        },
        (0..n).map(|i| i.to_string()).collect(),
    )
    .expect("bare bundle is valid")
}

/// Greedy one-to-one matching of CAVs to reference directions by largest
/// `|cos|`. Returns the matched `|cos|` for each reference direction
/// (0 when there are fewer CAVs than directions).
pub fn greedy_match(cavs: &CavSet, directions: &[Vec<f64>]) -> Vec<f64> {
    let mut pairs = Vec::new();
    for j in 0..cavs.len() {
        for (d, dir) in directions.iter().enumerate() {
            let c: f64 = cavs.row(j).iter().zip(dir).map(|(a, b)| a * b).sum();
            let nd: f64 = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            pairs.push(((c / nd).abs(), j, d));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used_cav = vec![false; cavs.len()];
    let mut result = vec![0.0; directions.len()];
    let mut done = vec![false; directions.len()];
    for (c, j, d) in pairs {
        if !used_cav[j] && !done[d] {
            used_cav[j] = true;
            done[d] = true;
            result[d] = c;
        }
    }
    result
}

fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}
