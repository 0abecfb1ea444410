//! Receptive-field geometry of a convolutional layer.
//!
//! Every spatial-reducing layer (convolution or pooling) is described by its
//! kernel, stride and zero padding. Composing them gives, for each position
//! of the inspected layer, the input-pixel rectangle that can influence it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// `floor((input + 2p - k) / s) + 1`, or `None` if the window does not fit.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Input image size `(H0, W0)` in pixels.
    pub input_hw: [usize; 2],
    pub layers: Vec<LayerGeom>,
}

impl ArchSpec {
    /// Spatial size of the inspected layer.
    pub fn output_hw(&self) -> Result<(usize, usize)> {
        let [mut h, mut w] = self.input_hw;
        if h == 0 || w == 0 {
            return Err(Error::InvalidArch("input size must be positive".into()));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.kernel == 0 || layer.stride == 0 {
                return Err(Error::InvalidArch(format!(
                    "layer {idx}: kernel and stride must be positive"
                )));
            }
            h = layer.output_len(h).ok_or_else(|| underflow(idx, h))?;
            w = layer.output_len(w).ok_or_else(|| underflow(idx, w))?;
        }
        Ok((h, w))
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (self.input_hw[0], self.input_hw[1])
    }
}

fn underflow(idx: usize, input: usize) -> Error {
    Error::InvalidArch(format!("layer {idx} output is empty for input length {input}"))
}

/// Receptive field of one layer position, shared by all positions up to a shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldGeometry {
    /// Side length in pixels.
    pub rf: usize,
    /// Pixel distance between adjacent positions.
    pub jump: usize,
    /// Center pixel of position (0, 0), rounded down when `rf` is even.
    pub start: i64,
}

impl FieldGeometry {
    pub const IDENTITY: FieldGeometry = FieldGeometry {
        rf: 1,
        jump: 1,
        start: 0,
    };

    fn low_half(&self) -> i64 {
        ((self.rf - 1) / 2) as i64
    }

    fn high_half(&self) -> i64 {
        (self.rf / 2) as i64
    }

    /// Unclipped `[first, last]` pixel span along one axis.
    pub fn span(&self, index: usize) -> (i64, i64) {
        let center = self.start + index as i64 * self.jump as i64;
        (center - self.low_half(), center + self.high_half())
    }
}

/// Inclusive pixel rectangle inside the input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Self {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }
}

/// Folds the layer list into a single geometry.
///
/// Tracks the left edge exactly (`edge -= p * jump`); `start` is the center
/// derived from it, `floor((rf - 1) / 2)` pixels after the edge.
pub fn compose(arch: &ArchSpec) -> Result<FieldGeometry> {
    arch.output_hw()?;
    let mut rf = 1usize;
    let mut jump = 1usize;
    let mut edge = 0i64;
    for layer in &arch.layers {
        edge -= (layer.padding * jump) as i64;
        rf += (layer.kernel - 1) * jump;
        jump *= layer.stride;
    }
    Ok(FieldGeometry {
        rf,
        jump,
        start: edge + ((rf - 1) / 2) as i64,
    })
}

/// Pixel rectangle seen by layer position `(u, v)`, clipped to the image.
pub fn field_rect(
    geometry: &FieldGeometry,
    u: usize,
    v: usize,
    grid_hw: (usize, usize),
    input_hw: (usize, usize),
) -> Result<Rect> {
    let (h, w) = grid_hw;
    if u >= h || v >= w {
        return Err(Error::OutOfRangePosition { u, v, h, w });
    }
    let clip = |(lo, hi): (i64, i64), len: usize| -> Option<(usize, usize)> {
        let lo = lo.max(0);
        let hi = hi.min(len as i64 - 1);
        (lo <= hi).then_some((lo as usize, hi as usize))
    };
    let rows = clip(geometry.span(u), input_hw.0);
    let cols = clip(geometry.span(v), input_hw.1);
    match (rows, cols) {
        (Some((top, bottom)), Some((left, right))) => Ok(Rect {
            top,
            left,
            bottom,
            right,
        }),
        _ => Err(Error::FieldOutsideImage { u, v }),
    }
}

/// Exact receptive fields of one architecture.
///
/// [`field_rect`] clips the closed-form geometry to the image only. That
/// overstates the field whenever clipping is needed at an intermediate
/// layer: positions in that layer's padding carry no image information.
/// This walks the layers backwards per axis and keeps only indices that
/// exist at each layer, which matches the brute-force influence region.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceptiveFields {
    layers: Vec<LayerGeom>,
    // input length of every layer, followed by the output length
    rows: Vec<usize>,
    cols: Vec<usize>,
    geometry: FieldGeometry,
}

impl ReceptiveFields {
    pub fn new(arch: &ArchSpec) -> Result<Self> {
        let geometry = compose(arch)?;
        let mut rows = vec![arch.input_hw[0]];
        let mut cols = vec![arch.input_hw[1]];
        for layer in &arch.layers {
            let (h, w) = (*rows.last().unwrap(), *cols.last().unwrap());
            // compose already validated every output length
            rows.push(layer.output_len(h).expect("validated"));
            cols.push(layer.output_len(w).expect("validated"));
        }
        Ok(Self {
            layers: arch.layers.clone(),
            rows,
            cols,
            geometry,
        })
    }

    pub fn geometry(&self) -> FieldGeometry {
        self.geometry
    }

    pub fn grid_hw(&self) -> (usize, usize) {
        (*self.rows.last().unwrap(), *self.cols.last().unwrap())
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (self.rows[0], self.cols[0])
    }

    pub fn rect(&self, u: usize, v: usize) -> Result<Rect> {
        let (h, w) = self.grid_hw();
        if u >= h || v >= w {
            return Err(Error::OutOfRangePosition { u, v, h, w });
        }
        match (
            axis_extent(&self.layers, &self.rows, u),
            axis_extent(&self.layers, &self.cols, v),
        ) {
            (Some((top, bottom)), Some((left, right))) => Ok(Rect {
                top,
                left,
                bottom,
                right,
            }),
            _ => Err(Error::FieldOutsideImage { u, v }),
        }
    }

    /// Rect for flat position `f = u * W + v`.
    pub fn rect_at(&self, f: usize) -> Result<Rect> {
        let (u, v) = index_to_uv(f, self.grid_hw())?;
        self.rect(u, v)
    }
}

fn axis_extent(layers: &[LayerGeom], lens: &[usize], index: usize) -> Option<(usize, usize)> {
    let mut reached = vec![false; *lens.last().unwrap()];
    reached[index] = true;
    for (layer, &len) in layers.iter().zip(lens).rev() {
        let mut prev = vec![false; len];
        for (x, _) in reached.iter().enumerate().filter(|(_, &r)| r) {
            for a in 0..layer.kernel {
                let y = (x * layer.stride + a) as i64 - layer.padding as i64;
                if y >= 0 && (y as usize) < len {
                    prev[y as usize] = true;
                }
            }
        }
        reached = prev;
    }
    let first = reached.iter().position(|&r| r)?;
    let last = reached.iter().rposition(|&r| r)?;
    Some((first, last))
}

/// Flat position index `f = u * W + v` to grid coordinates.
pub fn index_to_uv(f: usize, grid_hw: (usize, usize)) -> Result<(usize, usize)> {
    let (h, w) = grid_hw;
    if f >= h * w {
        return Err(Error::IndexOutOfRange {
            index: f,
            len: h * w,
        });
    }
    Ok((f / w, f % w))
}

pub fn uv_to_index(u: usize, v: usize, grid_hw: (usize, usize)) -> Result<usize> {
    let (h, w) = grid_hw;
    if u >= h || v >= w {
        return Err(Error::OutOfRangePosition { u, v, h, w });
    }
    Ok(u * w + v)
}
