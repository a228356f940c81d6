//! 2-D rasters shared by every stage: intensity images, instance label
//! masks and displacement fields.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use cellsynth_nn::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RasterError {
    #[error("raster size mismatch: expected {expected:?}, got {actual:?}")]
    SizeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("buffer of {len} values does not fill a {width}x{height} raster")]
    BadBuffer { width: usize, height: usize, len: usize },
}

/// Value domain of an [`ImagePlane`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueDomain {
    /// Raw detector counts (16-bit range).
    Raw,
    /// Reals in `[-1, 1]`.
    Normalized,
}

/// Single-channel intensity image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    domain: ValueDomain,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(
        width: usize,
        height: usize,
        domain: ValueDomain,
        data: Vec<f64>,
    ) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::BadBuffer {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            domain,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, domain: ValueDomain, value: f64) -> Self {
        Self {
            width,
            height,
            domain,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn domain(&self) -> ValueDomain {
        self.domain
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn with_domain(mut self, domain: ValueDomain) -> Self {
        self.domain = domain;
        self
    }

    pub fn ensure_size(&self, width: usize, height: usize) -> Result<(), RasterError> {
        if (self.width, self.height) != (width, height) {
            return Err(RasterError::SizeMismatch {
                expected: (width, height),
                actual: (self.width, self.height),
            });
        }
        Ok(())
    }

    /// `(1, 1, h, w)` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.data.clone())
            .expect("image tensor shape")
    }

    /// Stack same-sized planes into `(n, 1, h, w)`.
    pub fn stack(planes: &[&ImagePlane]) -> Tensor {
        let (w, h) = planes[0].size();
        let mut data = Vec::with_capacity(planes.len() * w * h);
        for p in planes {
            assert_eq!(p.size(), (w, h), "stacked planes must agree in size");
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(&[planes.len(), 1, h, w], data).expect("stack shape")
    }

    /// Plane `index` of channel 0 of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, index: usize, domain: ValueDomain) -> Self {
        let (_, c, h, w) = t.dims4();
        let start = index * c * h * w;
        Self {
            width: w,
            height: h,
            domain,
            data: t.data()[start..start + h * w].to_vec(),
        }
    }
}

/// Instance label raster; `0` is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    width: usize,
    height: usize,
    data: Vec<u16>,
}

/// Axis-aligned inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.max_x - self.min_x + 1
    }

    pub fn height(&self) -> usize {
        self.max_y - self.min_y + 1
    }

    pub fn overlaps(&self, other: &BoundingBox) -> bool {
        self.min_x <= other.max_x
            && other.min_x <= self.max_x
            && self.min_y <= other.max_y
            && other.min_y <= self.max_y
    }
}

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::BadBuffer {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u16) {
        self.data[y * self.width + x] = label;
    }

    pub fn ensure_size(&self, width: usize, height: usize) -> Result<(), RasterError> {
        if (self.width, self.height) != (width, height) {
            return Err(RasterError::SizeMismatch {
                expected: (width, height),
                actual: (self.width, self.height),
            });
        }
        Ok(())
    }

    /// Distinct non-zero labels, ascending.
    pub fn labels(&self) -> BTreeSet<u16> {
        self.data.iter().copied().filter(|&l| l != 0).collect()
    }

    pub fn area(&self, label: u16) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn foreground_area(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }

    /// Per-label pixel statistics in one pass.
    pub fn regions(&self) -> BTreeMap<u16, Region> {
        let mut out: BTreeMap<u16, Region> = BTreeMap::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let l = self.data[y * self.width + x];
                if l == 0 {
                    continue;
                }
                out.entry(l)
                    .and_modify(|r| r.add(x, y))
                    .or_insert_with(|| Region::start(x, y));
            }
        }
        out
    }

    /// Mean `(x, y)` of pixels carrying `label`.
    pub fn centroid(&self, label: u16) -> Option<(f64, f64)> {
        self.regions().get(&label).map(Region::centroid)
    }

    /// Binary mask (`1` foreground) of one label.
    pub fn select(&self, label: u16) -> LabelMask {
        LabelMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&l| u16::from(l == label)).collect(),
        }
    }

    pub fn map_labels(&self, f: impl Fn(u16) -> u16) -> LabelMask {
        LabelMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&l| f(l)).collect(),
        }
    }

    /// 4-connected components of `label`, each as pixel indices, largest first.
    pub fn components(&self, label: u16) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.data.len()];
        let mut comps = Vec::new();
        for start in 0..self.data.len() {
            if seen[start] || self.data[start] != label {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(p) = queue.pop_front() {
                comp.push(p);
                let (x, y) = (p % self.width, p / self.width);
                let mut visit = |q: usize| {
                    if !seen[q] && self.data[q] == label {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < self.width {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - self.width);
                }
                if y + 1 < self.height {
                    visit(p + self.width);
                }
            }
            comps.push(comp);
        }
        comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
        comps
    }

    /// Integer translation; pixels leaving the raster are dropped.
    pub fn shifted(&self, dx: isize, dy: isize) -> LabelMask {
        let mut out = LabelMask::empty(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let l = self.get(x, y);
                if l == 0 {
                    continue;
                }
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                    out.set(nx as usize, ny as usize, l);
                }
            }
        }
        out
    }

    /// Render foreground as `fg` and background as `bg` in the normalized domain.
    pub fn to_image(&self, fg: f64, bg: f64) -> ImagePlane {
        ImagePlane {
            width: self.width,
            height: self.height,
            domain: ValueDomain::Normalized,
            data: self
                .data
                .iter()
                .map(|&l| if l != 0 { fg } else { bg })
                .collect(),
        }
    }
}

/// Accumulated pixel statistics of one label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub area: usize,
    pub sum_x: f64,
    pub sum_y: f64,
    pub bbox: BoundingBox,
}

impl Region {
    fn start(x: usize, y: usize) -> Self {
        Self {
            area: 1,
            sum_x: x as f64,
            sum_y: y as f64,
            bbox: BoundingBox {
                min_x: x,
                min_y: y,
                max_x: x,
                max_y: y,
            },
        }
    }

    fn add(&mut self, x: usize, y: usize) {
        self.area += 1;
        self.sum_x += x as f64;
        self.sum_y += y as f64;
        self.bbox.min_x = self.bbox.min_x.min(x);
        self.bbox.min_y = self.bbox.min_y.min(y);
        self.bbox.max_x = self.bbox.max_x.max(x);
        self.bbox.max_y = self.bbox.max_y.max(y);
    }

    pub fn centroid(&self) -> (f64, f64) {
        (self.sum_x / self.area as f64, self.sum_y / self.area as f64)
    }
}

/// Dense displacement field; `warp` samples the source at `p + flow(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        Self {
            width,
            height,
            dx: vec![dx; width * height],
            dy: vec![dy; width * height],
        }
    }

    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self, RasterError> {
        for len in [dx.len(), dy.len()] {
            if len != width * height {
                return Err(RasterError::BadBuffer { width, height, len });
            }
        }
        Ok(Self {
            width,
            height,
            dx,
            dy,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }

    /// Mean Euclidean displacement.
    pub fn mean_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(a, b)| a.hypot(*b))
            .sum::<f64>()
            / self.dx.len() as f64
    }

    /// `(1, 2, h, w)` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.dx.clone();
        data.extend_from_slice(&self.dy);
        Tensor::from_vec(&[1, 2, self.height, self.width], data).expect("flow tensor shape")
    }

    /// Field `index` of an `(n, 2, h, w)` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Self {
        let (_, c, h, w) = t.dims4();
        assert_eq!(c, 2, "flow tensors have two channels");
        let start = index * 2 * h * w;
        Self {
            width: w,
            height: h,
            dx: t.data()[start..start + h * w].to_vec(),
            dy: t.data()[start + h * w..start + 2 * h * w].to_vec(),
        }
    }
}

/// Jaccard index of the foregrounds of two masks. Two empty masks give 1.
pub fn jaccard(a: &LabelMask, b: &LabelMask) -> f64 {
    assert_eq!(a.size(), b.size(), "jaccard: size mismatch");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Otsu's threshold over a set of values (256-bin histogram).
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return lo;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w_b, mut sum_b) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0usize);
    for (i, &c) in hist.iter().enumerate() {
        w_b += c as f64;
        if w_b == 0.0 {
            continue;
        }
        let w_f = total - w_b;
        if w_f == 0.0 {
            break;
        }
        sum_b += i as f64 * c as f64;
        let m_b = sum_b / w_b;
        let m_f = (sum_all - sum_b) / w_f;
        let between = w_b * w_f * (m_b - m_f).powi(2);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    lo + (best_bin + 1) as f64 * width
}

/// Label the 4-connected components of the foreground `values > threshold`
/// with consecutive ids in scan order.
pub fn label_components(image: &ImagePlane, threshold: f64) -> LabelMask {
    let binary = LabelMask {
        width: image.width,
        height: image.height,
        data: image.data.iter().map(|&v| u16::from(v > threshold)).collect(),
    };
    let mut comps = binary.components(1);
    comps.sort_by_key(|c| c.iter().copied().min());
    let mut out = LabelMask::empty(image.width, image.height);
    for (i, comp) in comps.iter().enumerate() {
        let label = u16::try_from(i + 1).unwrap_or(u16::MAX);
        for &p in comp {
            out.data[p] = label;
        }
    }
    out
}
