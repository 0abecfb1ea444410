use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{read_npy, write_npy, DType, Tensor};
use crate::error::{Error, Result};
use crate::receptive_field::ArchSpec;

/// Keys understood in `manifest.json`. Anything else is ignored with a warning.
pub const MANIFEST_KEYS: [&str; 8] = [
    "activations",
    "image_embeddings",
    "text_embeddings",
    "texts",
    "labels",
    "arch",
    "meta",
    "image_ids",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    /// Accuracy of the inspected model on the probe labels, as a fraction.
    pub a_orig: f64,
    pub num_classes: usize,
    pub layer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hw: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

/// Everything one analysis run reads from disk. Constructed only through
/// [`DumpBundle::new`] or [`load_bundle`], both of which validate.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpBundle {
    activations: Tensor,
    image_embeddings: Tensor,
    text_embeddings: Tensor,
    texts: Vec<String>,
    labels: Tensor,
    arch: ArchSpec,
    meta: BundleMeta,
    image_ids: Vec<String>,
}

impl DumpBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        activations: Tensor,
        image_embeddings: Tensor,
        text_embeddings: Tensor,
        texts: Vec<String>,
        labels: Tensor,
        arch: ArchSpec,
        meta: BundleMeta,
        image_ids: Vec<String>,
    ) -> Result<Self> {
        let bundle = Self {
            activations,
            image_embeddings,
            text_embeddings,
            texts,
            labels,
            arch,
            meta,
            image_ids,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        let act = &self.activations;
        if act.ndim() != 4 || act.dtype() != DType::F32 {
            return Err(Error::ShapeMismatch(format!(
                "activations must be a 4-d float tensor [n, H, W, C], got {:?}",
                act.shape()
            )));
        }
        let [n, h, w, c] = [act.shape()[0], act.shape()[1], act.shape()[2], act.shape()[3]];
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::ShapeMismatch(format!(
                "activation dimensions must be positive, got {:?}",
                act.shape()
            )));
        }

        let img = &self.image_embeddings;
        let txt = &self.text_embeddings;
        for (name, t) in [("image_embeddings", img), ("text_embeddings", txt)] {
            if t.ndim() != 2 || t.dtype() != DType::F32 || t.shape()[1] == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "{name} must be a 2-d float tensor with d >= 1, got {:?}",
                    t.shape()
                )));
            }
        }
        if img.shape()[0] != n {
            return Err(Error::ShapeMismatch(format!(
                "image_embeddings has {} rows for {n} images",
                img.shape()[0]
            )));
        }
        if img.shape()[1] != txt.shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "embedding widths differ: images {}, texts {}",
                img.shape()[1],
                txt.shape()[1]
            )));
        }
        let s = txt.shape()[0];
        if s == 0 || self.texts.len() != s {
            return Err(Error::ShapeMismatch(format!(
                "{} texts for {s} text embeddings",
                self.texts.len()
            )));
        }

        let labels = self.labels.as_i32().ok_or_else(|| {
            Error::ShapeMismatch("labels must be an int32 tensor".into())
        })?;
        if self.labels.shape() != [n] {
            return Err(Error::ShapeMismatch(format!(
                "labels shape {:?}, expected [{n}]",
                self.labels.shape()
            )));
        }
        let k = self.meta.num_classes;
        if k == 0 {
            return Err(Error::RangeError("num_classes must be at least 1".into()));
        }
        if let Some((i, l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l < 0 || l as usize >= k)
        {
            return Err(Error::RangeError(format!(
                "label {l} of image {i} outside 0..{k}"
            )));
        }
        if !(self.meta.a_orig > 0.0 && self.meta.a_orig <= 1.0) {
            return Err(Error::RangeError(format!(
                "a_orig = {} outside (0, 1]",
                self.meta.a_orig
            )));
        }
        if let Some(names) = &self.meta.class_names {
            if names.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "{} class names for {k} classes",
                    names.len()
                )));
            }
        }
        if self.image_ids.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} image ids for {n} images",
                self.image_ids.len()
            )));
        }

        if let Some(hw) = self.meta.input_hw {
            if hw != self.arch.input_hw {
                return Err(Error::ShapeMismatch(format!(
                    "meta input_hw {hw:?} differs from arch input_hw {:?}",
                    self.arch.input_hw
                )));
            }
        }
        let out = self.arch.output_hw()?;
        if out != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "arch maps {:?} to {out:?}, activations are {h}x{w}",
                self.arch.input_hw
            )));
        }

        for (name, t) in [
            ("activations", act),
            ("image_embeddings", img),
            ("text_embeddings", txt),
        ] {
            if let Some(idx) = t.first_non_finite() {
                return Err(Error::NonFiniteValue(format!("{name} at flat index {idx}")));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.activations.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.activations.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.activations.shape()[2]
    }

    pub fn grid_hw(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Number of local feature vectors per image (`H * W`).
    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    pub fn channels(&self) -> usize {
        self.activations.shape()[3]
    }

    pub fn embedding_dim(&self) -> usize {
        self.image_embeddings.shape()[1]
    }

    pub fn num_texts(&self) -> usize {
        self.texts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn activations(&self) -> &Tensor {
        &self.activations
    }

    /// Flat `[n * F * C]` activation buffer.
    pub fn activation_data(&self) -> &[f32] {
        self.activations.as_f32().expect("validated float tensor")
    }

    pub fn local_vector(&self, image: usize, position: usize) -> &[f32] {
        let c = self.channels();
        let start = (image * self.positions() + position) * c;
        &self.activation_data()[start..start + c]
    }

    /// All `F` local feature vectors of one image, `[F * C]`.
    pub fn image_activations(&self, image: usize) -> &[f32] {
        let len = self.positions() * self.channels();
        &self.activation_data()[image * len..(image + 1) * len]
    }

    pub fn image_embeddings(&self) -> &Tensor {
        &self.image_embeddings
    }

    pub fn image_embedding(&self, image: usize) -> &[f32] {
        let d = self.embedding_dim();
        &self.image_embeddings.as_f32().expect("validated")[image * d..(image + 1) * d]
    }

    pub fn text_embeddings(&self) -> &Tensor {
        &self.text_embeddings
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn labels(&self) -> &[i32] {
        self.labels.as_i32().expect("validated int tensor")
    }

    pub fn label(&self, image: usize) -> usize {
        self.labels()[image] as usize
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn meta(&self) -> &BundleMeta {
        &self.meta
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn class_name(&self, class: usize) -> String {
        self.meta
            .class_names
            .as_ref()
            .and_then(|names| names.get(class).cloned())
            .unwrap_or_else(|| format!("class_{class}"))
    }

    /// Image count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in self.labels() {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Reads and validates the bundle described by `manifest.json`.
/// Component paths are relative to the manifest's directory.
pub fn load_bundle(manifest_path: impl AsRef<Path>) -> Result<DumpBundle> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
    let manifest = value
        .as_object()
        .ok_or_else(|| Error::Manifest("manifest must be a JSON object".into()))?;
    for key in manifest.keys() {
        if !MANIFEST_KEYS.contains(&key.as_str()) {
            log::warn!("ignoring unknown manifest key '{key}'");
        }
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let activations = read_npy(component_path(manifest, base, "activations")?)?;
    let image_embeddings = read_npy(component_path(manifest, base, "image_embeddings")?)?;
    let text_embeddings = read_npy(component_path(manifest, base, "text_embeddings")?)?;
    let texts = read_lines(&component_path(manifest, base, "texts")?)?;
    let labels = read_npy(component_path(manifest, base, "labels")?)?;
    let image_ids = read_lines(&component_path(manifest, base, "image_ids")?)?;
    let arch: ArchSpec = serde_json::from_value(required(manifest, "arch")?.clone())
        .map_err(|e| Error::json("manifest 'arch'", e))?;
    let meta: BundleMeta = serde_json::from_value(required(manifest, "meta")?.clone())
        .map_err(|e| Error::json("manifest 'meta'", e))?;

    DumpBundle::new(
        activations,
        image_embeddings,
        text_embeddings,
        texts,
        labels,
        arch,
        meta,
        image_ids,
    )
}

/// Writes `bundle` as NPY/text files plus `manifest.json` into `dir`,
/// returning the manifest path.
pub fn write_bundle(dir: impl AsRef<Path>, bundle: &DumpBundle) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_npy(dir.join("activations.npy"), &bundle.activations)?;
    write_npy(dir.join("image_embeddings.npy"), &bundle.image_embeddings)?;
    write_npy(dir.join("text_embeddings.npy"), &bundle.text_embeddings)?;
    write_npy(dir.join("labels.npy"), &bundle.labels)?;
    write_lines(&dir.join("texts.txt"), &bundle.texts)?;
    write_lines(&dir.join("image_ids.txt"), &bundle.image_ids)?;

    let manifest = serde_json::json!({
        "activations": "activations.npy",
        "image_embeddings": "image_embeddings.npy",
        "text_embeddings": "text_embeddings.npy",
        "texts": "texts.txt",
        "labels": "labels.npy",
        "image_ids": "image_ids.txt",
        "arch": bundle.arch,
        "meta": bundle.meta,
    });
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn required<'a>(manifest: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    manifest
        .get(key)
        .ok_or_else(|| Error::MissingFile(format!("manifest has no '{key}' entry")))
}

fn component_path(manifest: &Map<String, Value>, base: &Path, key: &str) -> Result<PathBuf> {
    let rel = required(manifest, key)?
        .as_str()
        .ok_or_else(|| Error::Manifest(format!("'{key}' must be a relative file path")))?;
    let path = base.join(rel);
    if !path.is_file() {
        return Err(Error::MissingFile(format!(
            "{key}: {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines: Vec<String> = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
