//! Relevant-image selection per CAV.
//!
//! Three strategies rank probe images by a per-image summary of the concept
//! scores: the mean over positions, the maximum, or the mean for choosing
//! images followed by the maximum for choosing the crop.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discovery::ScoreField;
use crate::error::{Error, Result};
use crate::receptive_field::{index_to_uv, ReceptiveFields, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FMean,
    FMax,
    FMeanToMax,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FMean, Strategy::FMax, Strategy::FMeanToMax];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FMean => "f_mean",
            Strategy::FMax => "f_max",
            Strategy::FMeanToMax => "f_mean_to_max",
        }
    }

    /// Whether items carry a crop.
    pub fn crops(&self) -> bool {
        !matches!(self, Strategy::FMean)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}' (expected f_mean, f_max or f_mean_to_max)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceItem {
    pub image_index: usize,
    pub crop: Option<Rect>,
    /// Grid position `(u, v)` of the maximizing local feature vector.
    pub position: Option<(usize, usize)>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceSet {
    pub cav_index: usize,
    pub strategy: Strategy,
    /// Descending weight.
    pub items: Vec<RelevanceItem>,
}

impl RelevanceSet {
    pub fn weights(&self) -> Vec<f64> {
        self.items.iter().map(|it| it.weight).collect()
    }

    pub fn image_indices(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.image_index).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectOptions {
    pub count: usize,
    /// For `f_max`, rank all (image, position) pairs instead of one field per image.
    pub allow_multiple_fields_per_image: bool,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            count: 100,
            allow_multiple_fields_per_image: false,
        }
    }
}

/// Scores of CAV `j` at every position of image `i`.
pub fn score_vector(field: &ScoreField, i: usize, j: usize) -> Result<Vec<f64>> {
    if i >= field.n() {
        return Err(Error::IndexOutOfRange { index: i, len: field.n() });
    }
    if j >= field.concepts() {
        return Err(Error::IndexOutOfRange {
            index: j,
            len: field.concepts(),
        });
    }
    Ok((0..field.positions()).map(|f| field.get(i, f, j)).collect())
}

pub fn v_mean(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Maximum and its first index.
pub fn v_max(scores: &[f64]) -> (f64, usize) {
    let mut best = 0;
    for (f, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = f;
        }
    }
    (scores[best], best)
}

/// Descending by value, ties by ascending key.
fn rank<K: Ord + Copy>(entries: &mut [(f64, K)]) {
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
}

pub fn select(
    field: &ScoreField,
    fields: &ReceptiveFields,
    j: usize,
    strategy: Strategy,
    opts: &SelectOptions,
) -> Result<RelevanceSet> {
    let (h, w) = fields.grid_hw();
    if field.positions() != h * w {
        return Err(Error::DimensionMismatch {
            expected: h * w,
            found: field.positions(),
        });
    }
    if j >= field.concepts() {
        return Err(Error::IndexOutOfRange {
            index: j,
            len: field.concepts(),
        });
    }
    let n = field.n();
    let multiple = opts.allow_multiple_fields_per_image && strategy == Strategy::FMax;
    let available = if multiple { n * field.positions() } else { n };
    let count = if opts.count > available {
        log::warn!("requested {} relevant images but only {available} are available", opts.count);
        available
    } else {
        opts.count
    };

    let crop_at = |f: usize| -> Result<(Rect, (usize, usize))> {
        let uv = index_to_uv(f, (h, w))?;
        Ok((fields.rect(uv.0, uv.1)?, uv))
    };
    let summaries: Vec<(f64, (f64, usize))> = (0..n)
        .map(|i| {
            let s = score_vector(field, i, j)?;
            Ok((v_mean(&s), v_max(&s)))
        })
        .collect::<Result<_>>()?;

    let items = match strategy {
        Strategy::FMean => {
            let mut ranked: Vec<(f64, usize)> = summaries.iter().enumerate().map(|(i, s)| (s.0, i)).collect();
            rank(&mut ranked);
            ranked
                .into_iter()
                .take(count)
                .map(|(weight, i)| RelevanceItem {
                    image_index: i,
                    crop: None,
                    position: None,
                    weight,
                })
                .collect()
        }
        Strategy::FMax if multiple => {
            let mut ranked: Vec<(f64, (usize, usize))> = (0..n)
                .flat_map(|i| (0..field.positions()).map(move |f| (i, f)))
                .map(|(i, f)| (field.get(i, f, j), (i, f)))
                .collect();
            rank(&mut ranked);
            ranked
                .into_iter()
                .take(count)
                .map(|(weight, (i, f))| {
                    let (crop, uv) = crop_at(f)?;
                    Ok(RelevanceItem {
                        image_index: i,
                        crop: Some(crop),
                        position: Some(uv),
                        weight,
                    })
                })
                .collect::<Result<_>>()?
        }
        Strategy::FMax | Strategy::FMeanToMax => {
            let chosen: Vec<usize> = if strategy == Strategy::FMax {
                (0..n).collect()
            } else {
                let mut by_mean: Vec<(f64, usize)> = summaries.iter().enumerate().map(|(i, s)| (s.0, i)).collect();
                rank(&mut by_mean);
                by_mean.into_iter().take(count).map(|(_, i)| i).collect()
            };
            let mut ranked: Vec<(f64, usize)> = chosen.into_iter().map(|i| (summaries[i].1 .0, i)).collect();
            rank(&mut ranked);
            ranked
                .into_iter()
                .take(count)
                .map(|(weight, i)| {
                    let (crop, uv) = crop_at(summaries[i].1 .1)?;
                    Ok(RelevanceItem {
                        image_index: i,
                        crop: Some(crop),
                        position: Some(uv),
                        weight,
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(RelevanceSet {
        cav_index: j,
        strategy,
        items,
    })
}

/// Relevance sets for every CAV, in CAV order.
pub fn select_all(
    field: &ScoreField,
    fields: &ReceptiveFields,
    strategy: Strategy,
    opts: &SelectOptions,
) -> Result<Vec<RelevanceSet>> {
    (0..field.concepts())
        .into_par_iter()
        .map(|j| select(field, fields, j, strategy, opts))
        .collect()
}
