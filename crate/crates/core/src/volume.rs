//! Dense volumes, binary masks and the canonical-grid resampler.
//!
//! Axis order is `(D, W, H)` with `D` the axial (slice) axis. Storage is
//! row-major with `H` varying fastest, which coincides with the on-disk voxel
//! order of a NIfTI file whose `(x, y, z)` map to `(H, W, D)`. Intensities are
//! stored as `f32`; reductions accumulate in `f64`.

use bitvec::vec::BitVec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Voxel counts along `(D, W, H)`.
pub type Dims = [usize; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("data length {actual} does not match dims {dims:?} ({expected} voxels)")]
    LengthMismatch {
        dims: Dims,
        expected: usize,
        actual: usize,
    },
    #[error("spacing must be strictly positive and finite, got {0:?}")]
    NonPositiveSpacing([f64; 3]),
    #[error("volume contains a non-finite value at voxel {0}")]
    NonFinite(usize),
    #[error("dims must all be nonzero, got {0:?}")]
    ZeroDims(Dims),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch(Dims, Dims),
    #[error("resampled mask has no foreground voxels")]
    EmptyResult,
    #[error("injected dose must be positive, got {0}")]
    NonPositiveDose(f64),
    #[error("body weight must be positive, got {0}")]
    NonPositiveWeight(f64),
    #[error("decay factor must lie in (0, 1], got {0}")]
    InvalidDecayFactor(f64),
    #[error("SUV scaling requires a PET volume")]
    NotPet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Pet,
    Ct,
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, [d, w, h]: [usize; 3]) -> usize {
    (d * dims[1] + w) * dims[2] + h
}

#[inline]
pub fn voxel_coords(dims: Dims, index: usize) -> [usize; 3] {
    let h = index % dims[2];
    let rest = index / dims[2];
    [rest / dims[1], rest % dims[1], h]
}

/// A dense scalar grid with physical geometry. PET volumes carry SUV (or raw
/// activity before [`suv_scale`]), CT volumes carry Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
    modality: Modality,
}

impl Volume3D {
    pub fn new(
        dims: Dims,
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
        modality: Modality,
    ) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::ZeroDims(dims));
        }
        let expected = voxel_count(dims);
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::NonPositiveSpacing(spacing));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
            modality,
        })
    }

    pub fn filled(dims: Dims, spacing: [f64; 3], modality: Modality, value: f32) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, [0.0; 3], vec![value; voxel_count(dims)], modality)
    }

    pub fn from_fn(
        dims: Dims,
        spacing: [f64; 3],
        modality: Modality,
        f: impl Fn([usize; 3]) -> f32,
    ) -> Result<Self, VolumeError> {
        let data = (0..voxel_count(dims)).map(|i| f(voxel_coords(dims, i))).collect();
        Self::new(dims, spacing, [0.0; 3], data, modality)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, coords: [usize; 3]) -> usize {
        linear_index(self.dims, coords)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        voxel_coords(self.dims, index)
    }

    pub fn get(&self, coords: [usize; 3]) -> f32 {
        self.data[self.index(coords)]
    }

    /// `(min, max)` over all voxels.
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Elementwise map that keeps geometry and modality.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self, VolumeError> {
        Self::new(
            self.dims,
            self.spacing,
            self.origin,
            self.data.iter().map(|&v| f(v)).collect(),
            self.modality,
        )
    }
}

/// Inclusive voxel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a] + 1)
    }

    /// Grows the box by `margin` voxels on every side, clamped to `dims`.
    pub fn dilate(&self, margin: usize, dims: Dims) -> Self {
        Self {
            min: [0, 1, 2].map(|a| self.min[a].saturating_sub(margin)),
            max: [0, 1, 2].map(|a| (self.max[a] + margin).min(dims[a] - 1)),
        }
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.min[a] && c[a] <= self.max[a])
    }

    pub fn iter(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (self.min[0]..=self.max[0]).flat_map(move |d| {
            (self.min[1]..=self.max[1])
                .flat_map(move |w| (self.min[2]..=self.max[2]).map(move |h| [d, w, h]))
        })
    }
}

/// Binary voxel set aligned to a [`Volume3D`] grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionMask {
    dims: Dims,
    bits: BitVec<u64>,
    count: usize,
}

impl LesionMask {
    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            bits: BitVec::repeat(false, voxel_count(dims)),
            count: 0,
        }
    }

    pub fn full(dims: Dims) -> Self {
        let n = voxel_count(dims);
        Self {
            dims,
            bits: BitVec::repeat(true, n),
            count: n,
        }
    }

    /// Mask of voxels for which `pred(index)` holds.
    pub fn from_index_predicate(dims: Dims, pred: impl Fn(usize) -> bool) -> Self {
        let bits: BitVec<u64> = (0..voxel_count(dims)).map(pred).collect();
        let count = bits.count_ones();
        Self { dims, bits, count }
    }

    pub fn from_indices(dims: Dims, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = Self::empty(dims);
        for i in indices {
            mask.insert(i);
        }
        mask
    }

    pub fn from_fn(dims: Dims, f: impl Fn([usize; 3]) -> bool) -> Self {
        Self::from_indices(dims, (0..voxel_count(dims)).filter(|&i| f(voxel_coords(dims, i))))
    }

    /// Builds a mask from a byte buffer where any nonzero byte is foreground.
    pub fn from_bytes(dims: Dims, bytes: &[u8]) -> Result<Self, VolumeError> {
        let expected = voxel_count(dims);
        if bytes.len() != expected {
            return Err(VolumeError::LengthMismatch {
                dims,
                expected,
                actual: bytes.len(),
            });
        }
        Ok(Self::from_indices(
            dims,
            bytes.iter().enumerate().filter(|(_, b)| **b != 0).map(|(i, _)| i),
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|b| u8::from(*b)).collect()
    }

    /// Sets a voxel; returns `true` if it was newly inserted.
    pub fn insert(&mut self, index: usize) -> bool {
        let was = self.bits.replace(index, true);
        if !was {
            self.count += 1;
        }
        !was
    }

    pub fn remove(&mut self, index: usize) -> bool {
        let was = self.bits.replace(index, false);
        if was {
            self.count -= 1;
        }
        was
    }

    pub fn contains(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn get(&self, coords: [usize; 3]) -> bool {
        self.bits[linear_index(self.dims, coords)]
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Set voxel indices in ascending order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter_ones()
    }

    pub fn coords(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let dims = self.dims;
        self.indices().map(move |i| voxel_coords(dims, i))
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut it = self.coords();
        let first = it.next()?;
        let (min, max) = it.fold((first, first), |(mut lo, mut hi), c| {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            (lo, hi)
        });
        Some(BoundingBox { min, max })
    }

    /// Whether any voxel on axial index `depth` is set.
    pub fn intersects_slice(&self, depth: usize) -> bool {
        if depth >= self.dims[0] {
            return false;
        }
        let plane = self.dims[1] * self.dims[2];
        self.bits[depth * plane..(depth + 1) * plane].any()
    }

    pub fn is_subset_of(&self, other: &LesionMask) -> bool {
        self.dims == other.dims && self.indices().all(|i| other.contains(i))
    }

    pub fn intersection_count(&self, other: &LesionMask) -> usize {
        self.indices().filter(|&i| other.contains(i)).count()
    }

    /// Dice overlap `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
    pub fn dice(&self, other: &LesionMask) -> f64 {
        let denom = self.count + other.count;
        if denom == 0 {
            return 1.0;
        }
        2.0 * self.intersection_count(other) as f64 / denom as f64
    }
}

/// Canonical working grid: isotropic spacing plus fixed voxel dims.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub target_spacing: f64,
    pub target_dims: Dims,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            target_spacing: 3.0,
            target_dims: [192, 192, 352],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), VolumeError> {
        if !(self.target_spacing.is_finite() && self.target_spacing > 0.0) {
            return Err(VolumeError::InvalidGrid(format!(
                "target_spacing must be positive, got {}",
                self.target_spacing
            )));
        }
        if self.target_dims.contains(&0) {
            return Err(VolumeError::InvalidGrid(format!(
                "target_dims must be nonzero, got {:?}",
                self.target_dims
            )));
        }
        Ok(())
    }
}

/// Per-axis mapping from an output grid onto a source grid.
///
/// The output is first laid over the source field of view (voxel centres
/// aligned to the FOV edges), giving `n_pre` voxels, then a symmetric window
/// of `n_out` voxels starting at `start` is taken. Negative `start` means
/// zero padding in front.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisMap {
    /// Source voxels per output voxel.
    pub scale: f64,
    pub src_len: usize,
    pub n_pre: usize,
    pub n_out: usize,
    pub start: isize,
}

impl AxisMap {
    fn fov(src_len: usize, src_spacing: f64, dst_spacing: f64, n_out: usize) -> Self {
        let n_pre = ((src_len as f64 * src_spacing / dst_spacing).round() as usize).max(1);
        let start = if n_pre >= n_out {
            ((n_pre - n_out) / 2) as isize
        } else {
            -(((n_out - n_pre) / 2) as isize)
        };
        Self {
            scale: dst_spacing / src_spacing,
            src_len,
            n_pre,
            n_out,
            start,
        }
    }

    fn resize(src_len: usize, n_out: usize) -> Self {
        Self {
            scale: src_len as f64 / n_out as f64,
            src_len,
            n_pre: n_out,
            n_out,
            start: 0,
        }
    }

    /// Index on the pre-window grid, or `None` for padding.
    fn pre_index(&self, j: usize) -> Option<usize> {
        let jp = j as isize + self.start;
        (jp >= 0 && (jp as usize) < self.n_pre).then_some(jp as usize)
    }

    /// Continuous source coordinate of output voxel `j` (voxel-centre units).
    pub fn source_coord(&self, j: usize) -> Option<f64> {
        self.pre_index(j).map(|jp| (jp as f64 + 0.5) * self.scale - 0.5)
    }

    /// Continuous output coordinate of source voxel coordinate `i`.
    pub fn target_coord(&self, i: f64) -> f64 {
        (i + 0.5) / self.scale - 0.5 - self.start as f64
    }

    fn linear_taps(&self) -> Vec<Option<(usize, usize, f64)>> {
        (0..self.n_out)
            .map(|j| {
                self.source_coord(j).map(|x| {
                    let x = x.clamp(0.0, (self.src_len - 1) as f64);
                    let i0 = x.floor() as usize;
                    let i1 = (i0 + 1).min(self.src_len - 1);
                    (i0, i1, x - i0 as f64)
                })
            })
            .collect()
    }

    fn nearest_taps(&self) -> Vec<Option<usize>> {
        (0..self.n_out)
            .map(|j| {
                self.pre_index(j)
                    .map(|jp| (((jp as f64 + 0.5) * self.scale).floor() as usize).min(self.src_len - 1))
            })
            .collect()
    }

    fn output_origin(&self, src_origin: f64, src_spacing: f64, dst_spacing: f64) -> f64 {
        src_origin - 0.5 * src_spacing + (self.start as f64 + 0.5) * dst_spacing
    }
}

/// Geometry of a resampling: maps source voxel coordinates to output ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridTransform {
    pub axes: [AxisMap; 3],
}

impl GridTransform {
    pub fn to_grid(src_dims: Dims, src_spacing: [f64; 3], grid: &GridSpec) -> Self {
        Self {
            axes: [0, 1, 2].map(|a| {
                AxisMap::fov(src_dims[a], src_spacing[a], grid.target_spacing, grid.target_dims[a])
            }),
        }
    }

    pub fn resize(src_dims: Dims, out_dims: Dims) -> Self {
        Self {
            axes: [0, 1, 2].map(|a| AxisMap::resize(src_dims[a], out_dims[a])),
        }
    }

    pub fn out_dims(&self) -> Dims {
        self.axes.map(|m| m.n_out)
    }

    pub fn is_identity(&self) -> bool {
        self.axes
            .iter()
            .all(|m| m.scale == 1.0 && m.start == 0 && m.n_pre == m.src_len && m.n_out == m.src_len)
    }

    /// Maps a source axial index to the nearest output axial index, if it
    /// lands inside the output grid.
    pub fn map_depth(&self, depth: usize) -> Option<usize> {
        let t = self.axes[0].target_coord(depth as f64).round();
        (t >= 0.0 && (t as usize) < self.axes[0].n_out).then_some(t as usize)
    }

    fn out_geometry(&self, spacing: [f64; 3], origin: [f64; 3]) -> ([f64; 3], [f64; 3]) {
        let out_spacing = [0, 1, 2].map(|a| spacing[a] * self.axes[a].scale);
        let out_origin =
            [0, 1, 2].map(|a| self.axes[a].output_origin(origin[a], spacing[a], out_spacing[a]));
        (out_spacing, out_origin)
    }

    /// Trilinear resample; voxels outside the source FOV are zero.
    pub fn apply_linear(&self, v: &Volume3D) -> Volume3D {
        let [td, tw, th] = self.axes.map(|m| m.linear_taps());
        let src = v.data();
        let sd = v.dims();
        let out_dims = self.out_dims();
        let mut out = vec![0f32; voxel_count(out_dims)];
        let plane = sd[1] * sd[2];
        let row = sd[2];
        for (d, tap_d) in td.iter().enumerate() {
            let Some((d0, d1, fd)) = *tap_d else { continue };
            for (w, tap_w) in tw.iter().enumerate() {
                let Some((w0, w1, fw)) = *tap_w else { continue };
                let base = (d * out_dims[1] + w) * out_dims[2];
                let r00 = d0 * plane + w0 * row;
                let r01 = d0 * plane + w1 * row;
                let r10 = d1 * plane + w0 * row;
                let r11 = d1 * plane + w1 * row;
                for (h, tap_h) in th.iter().enumerate() {
                    let Some((h0, h1, fh)) = *tap_h else { continue };
                    let lerp = |r: usize| {
                        let a = src[r + h0] as f64;
                        if fh == 0.0 {
                            a
                        } else {
                            a + (src[r + h1] as f64 - a) * fh
                        }
                    };
                    let c0 = {
                        let a = lerp(r00);
                        if fw == 0.0 { a } else { a + (lerp(r01) - a) * fw }
                    };
                    let value = if fd == 0.0 {
                        c0
                    } else {
                        let c1 = {
                            let a = lerp(r10);
                            if fw == 0.0 { a } else { a + (lerp(r11) - a) * fw }
                        };
                        c0 + (c1 - c0) * fd
                    };
                    out[base + h] = value as f32;
                }
            }
        }
        let (spacing, origin) = self.out_geometry(v.spacing(), v.origin());
        Volume3D {
            dims: out_dims,
            spacing,
            origin,
            data: out,
            modality: v.modality(),
        }
    }

    /// Nearest-neighbour resample of a mask; outside the FOV is background.
    pub fn apply_nearest(&self, m: &LesionMask) -> LesionMask {
        let [td, tw, th] = self.axes.map(|a| a.nearest_taps());
        let out_dims = self.out_dims();
        let mut out = LesionMask::empty(out_dims);
        for (d, sd) in td.iter().enumerate() {
            let Some(sd) = *sd else { continue };
            for (w, sw) in tw.iter().enumerate() {
                let Some(sw) = *sw else { continue };
                for (h, sh) in th.iter().enumerate() {
                    let Some(sh) = *sh else { continue };
                    if m.get([sd, sw, sh]) {
                        out.insert(linear_index(out_dims, [d, w, h]));
                    }
                }
            }
        }
        out
    }

    /// Nearest-neighbour resample of a dense volume (used for label-like data).
    pub fn apply_nearest_volume(&self, v: &Volume3D) -> Volume3D {
        let [td, tw, th] = self.axes.map(|a| a.nearest_taps());
        let out_dims = self.out_dims();
        let mut out = vec![0f32; voxel_count(out_dims)];
        for (d, sd) in td.iter().enumerate() {
            let Some(sd) = *sd else { continue };
            for (w, sw) in tw.iter().enumerate() {
                let Some(sw) = *sw else { continue };
                for (h, sh) in th.iter().enumerate() {
                    let Some(sh) = *sh else { continue };
                    out[linear_index(out_dims, [d, w, h])] = v.get([sd, sw, sh]);
                }
            }
        }
        let (spacing, origin) = self.out_geometry(v.spacing(), v.origin());
        Volume3D {
            dims: out_dims,
            spacing,
            origin,
            data: out,
            modality: v.modality(),
        }
    }
}

/// Trilinear resample onto the canonical grid followed by a symmetric
/// centre crop / zero pad to `grid.target_dims`.
pub fn resample(v: &Volume3D, grid: &GridSpec) -> Result<Volume3D, VolumeError> {
    grid.validate()?;
    if v.spacing() == [grid.target_spacing; 3] && v.dims() == grid.target_dims {
        return Ok(v.clone());
    }
    Ok(GridTransform::to_grid(v.dims(), v.spacing(), grid).apply_linear(v))
}

/// Nearest-neighbour counterpart of [`resample`] for masks.
pub fn resample_mask(
    m: &LesionMask,
    source_spacing: [f64; 3],
    grid: &GridSpec,
) -> Result<LesionMask, VolumeError> {
    grid.validate()?;
    let out = GridTransform::to_grid(m.dims(), source_spacing, grid).apply_nearest(m);
    if out.is_empty() {
        return Err(VolumeError::EmptyResult);
    }
    Ok(out)
}

/// Body-weight SUV: `activity[Bq/ml] * weight[g] / (dose[Bq] * decay)`.
pub fn suv_scale(
    v: &Volume3D,
    injected_dose_bq: f64,
    weight_kg: f64,
    decay_factor: f64,
) -> Result<Volume3D, VolumeError> {
    if v.modality() != Modality::Pet {
        return Err(VolumeError::NotPet);
    }
    if !(injected_dose_bq > 0.0) {
        return Err(VolumeError::NonPositiveDose(injected_dose_bq));
    }
    if !(weight_kg > 0.0) {
        return Err(VolumeError::NonPositiveWeight(weight_kg));
    }
    if !(decay_factor > 0.0 && decay_factor <= 1.0) {
        return Err(VolumeError::InvalidDecayFactor(decay_factor));
    }
    let factor = weight_kg * 1000.0 / (injected_dose_bq * decay_factor);
    v.map(|x| (x as f64 * factor) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: Dims, spacing: f64) -> Volume3D {
        Volume3D::from_fn(dims, [spacing; 3], Modality::Pet, |[d, w, h]| {
            (d * 100 + w * 10 + h) as f32
        })
        .unwrap()
    }

    /// Direct trilinear evaluation at a continuous source coordinate with
    /// border clamping.
    fn trilinear_oracle(v: &Volume3D, x: [f64; 3]) -> f64 {
        let dims = v.dims();
        let mut acc = 0.0;
        let c: Vec<f64> = (0..3).map(|a| x[a].clamp(0.0, (dims[a] - 1) as f64)).collect();
        for corner in 0..8usize {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let lo = c[a].floor();
                let f = c[a] - lo;
                let hi_bit = (corner >> a) & 1 == 1;
                let i = if hi_bit { (lo as usize + 1).min(dims[a] - 1) } else { lo as usize };
                w *= if hi_bit { f } else { 1.0 - f };
                idx[a] = i;
            }
            acc += w * v.get(idx) as f64;
        }
        acc
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(matches!(
            Volume3D::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![0.0; 7], Modality::Pet),
            Err(VolumeError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Volume3D::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3], vec![0.0], Modality::Pet),
            Err(VolumeError::NonPositiveSpacing(_))
        ));
        assert!(matches!(
            Volume3D::new([1, 1, 2], [1.0; 3], [0.0; 3], vec![0.0, f32::NAN], Modality::Ct),
            Err(VolumeError::NonFinite(1))
        ));
    }

    #[test]
    fn identity_grid_is_bitwise() {
        let grid = GridSpec {
            target_spacing: 3.0,
            target_dims: [6, 5, 4],
        };
        let v = ramp([6, 5, 4], 3.0);
        let out = resample(&v, &grid).unwrap();
        assert_eq!(out, v);
        // the general path is exact too
        let t = GridTransform::to_grid(v.dims(), v.spacing(), &grid);
        assert!(t.is_identity());
        assert_eq!(t.apply_linear(&v).data(), v.data());
    }

    #[test]
    fn upsample_two_by_two_matches_trilinear_oracle() {
        let v = Volume3D::from_fn([2, 2, 2], [6.0; 3], Modality::Pet, |[d, w, h]| {
            (d * 4 + w * 2 + h) as f32
        })
        .unwrap();
        let grid = GridSpec {
            target_spacing: 3.0,
            target_dims: [4, 4, 4],
        };
        let out = resample(&v, &grid).unwrap();
        assert_eq!(out.dims(), [4, 4, 4]);
        assert_eq!(out.spacing(), [3.0; 3]);
        // target j sits at source (j + 0.5) / 2 - 0.5
        for d in 0..4 {
            for w in 0..4 {
                for h in 0..4 {
                    let x = [d, w, h].map(|j| (j as f64 + 0.5) * 0.5 - 0.5);
                    let expect = trilinear_oracle(&v, x);
                    assert!((out.get([d, w, h]) as f64 - expect).abs() < 1e-6);
                }
            }
        }
        // interior sample at (0.25, 0.25, 0.25): 4*.25 + 2*.25 + .25
        assert!((out.get([1, 1, 1]) - 1.75).abs() < 1e-6);
        // voxel centres stay on the same physical FOV
        assert!((out.origin()[0] - (-3.0 + 1.5)).abs() < 1e-12);
    }

    #[test]
    fn constant_field_is_preserved_inside_fov() {
        let v = Volume3D::filled([7, 9, 11], [2.3, 4.1, 1.7], Modality::Ct, 5.0).unwrap();
        let grid = GridSpec {
            target_spacing: 3.0,
            target_dims: [4, 5, 6],
        };
        let out = resample(&v, &grid).unwrap();
        assert!(out.data().iter().all(|x| (x - 5.0).abs() <= 1e-6));
    }

    #[test]
    fn padding_is_symmetric_and_zero() {
        let v = Volume3D::filled([2, 2, 2], [3.0; 3], Modality::Pet, 1.0).unwrap();
        let grid = GridSpec {
            target_spacing: 3.0,
            target_dims: [4, 4, 4],
        };
        let out = resample(&v, &grid).unwrap();
        for d in 0..4 {
            for w in 0..4 {
                for h in 0..4 {
                    let inside = [d, w, h].iter().all(|&j| (1..3).contains(&j));
                    assert_eq!(out.get([d, w, h]), if inside { 1.0 } else { 0.0 });
                }
            }
        }
        assert_eq!(out.origin(), [-3.0; 3]);
    }

    #[test]
    fn depth_mapping_follows_grid() {
        let t = GridTransform::to_grid([10, 4, 4], [6.0, 3.0, 3.0], &GridSpec {
            target_spacing: 3.0,
            target_dims: [20, 4, 4],
        });
        // source slice i covers target 2i and 2i+1; centre maps to 2i + 0.5
        assert_eq!(t.map_depth(0), Some(1));
        assert_eq!(t.map_depth(9), Some(19));
    }

    #[test]
    fn mask_identity_and_centre() {
        let grid = GridSpec {
            target_spacing: 2.0,
            target_dims: [7, 7, 7],
        };
        let m = LesionMask::from_indices([5, 5, 5], [linear_index([5, 5, 5], [2, 2, 2])]);
        let out = resample_mask(&m, [2.0; 3], &grid).unwrap();
        assert_eq!(out.voxel_count(), 1);
        assert!(out.get([3, 3, 3]));

        let same = GridSpec {
            target_spacing: 2.0,
            target_dims: [5, 5, 5],
        };
        assert_eq!(resample_mask(&m, [2.0; 3], &same).unwrap(), m);
    }

    #[test]
    fn mask_falling_off_grid_is_an_error() {
        let grid = GridSpec {
            target_spacing: 1.0,
            target_dims: [2, 2, 2],
        };
        let m = LesionMask::from_indices([10, 10, 10], [0]);
        assert_eq!(resample_mask(&m, [1.0; 3], &grid), Err(VolumeError::EmptyResult));
    }

    #[test]
    fn suv_formula_and_errors() {
        let v = Volume3D::filled([2, 2, 2], [1.0; 3], Modality::Pet, 1000.0).unwrap();
        let s = suv_scale(&v, 350e6, 70.0, 1.0).unwrap();
        assert!(s.data().iter().all(|x| (x - 0.2).abs() < 1e-7));
        let zero = Volume3D::filled([2, 2, 2], [1.0; 3], Modality::Pet, 0.0).unwrap();
        assert!(suv_scale(&zero, 1e8, 80.0, 0.9).unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(suv_scale(&v, 0.0, 70.0, 1.0), Err(VolumeError::NonPositiveDose(0.0)));
        assert_eq!(suv_scale(&v, 1.0, -1.0, 1.0), Err(VolumeError::NonPositiveWeight(-1.0)));
        assert_eq!(suv_scale(&v, 1.0, 1.0, 1.5), Err(VolumeError::InvalidDecayFactor(1.5)));
        let ct = Volume3D::filled([1, 1, 1], [1.0; 3], Modality::Ct, 0.0).unwrap();
        assert_eq!(suv_scale(&ct, 1.0, 1.0, 1.0), Err(VolumeError::NotPet));
    }

    #[test]
    fn dice_and_bbox() {
        let a = LesionMask::from_indices([1, 1, 4], [0, 1]);
        let b = LesionMask::from_indices([1, 1, 4], [1, 2]);
        assert!((a.dice(&b) - 0.5).abs() < 1e-12);
        assert_eq!(
            a.bounding_box(),
            Some(BoundingBox {
                min: [0, 0, 0],
                max: [0, 0, 1]
            })
        );
        assert!(LesionMask::empty([2, 2, 2]).bounding_box().is_none());
    }

    proptest! {
        #[test]
        fn trilinear_stays_within_input_range(
            dims in prop::array::uniform3(2usize..6),
            spacing in prop::array::uniform3(1.0f64..6.0),
            target in 1.5f64..5.0,
            seed in any::<u32>(),
        ) {
            let v = Volume3D::from_fn(dims, spacing, Modality::Pet, |[d, w, h]| {
                let x = (d as u32).wrapping_mul(2654435761).wrapping_add(seed) ^ (w as u32 * 40503) ^ (h as u32 * 977);
                (x % 1000) as f32 / 10.0 - 20.0
            }).unwrap();
            let (lo, hi) = v.min_max();
            let t = GridTransform::to_grid(dims, spacing, &GridSpec { target_spacing: target, target_dims: [4, 4, 4] });
            let out = t.apply_linear(&v);
            for (j, x) in out.data().iter().enumerate() {
                let c = voxel_coords(out.dims(), j);
                let inside = (0..3).all(|a| t.axes[a].source_coord(c[a]).is_some());
                if inside {
                    prop_assert!(*x >= lo - 1e-4 && *x <= hi + 1e-4);
                }
            }
        }

        #[test]
        fn suv_scale_is_linear(a in 0.1f32..10.0, x in 0.0f32..5000.0) {
            let v = Volume3D::filled([1, 1, 2], [1.0; 3], Modality::Pet, x).unwrap();
            let av = v.map(|y| a * y).unwrap();
            let lhs = suv_scale(&av, 3e8, 75.0, 0.8).unwrap();
            let rhs = suv_scale(&v, 3e8, 75.0, 0.8).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((*l as f64 - a as f64 * *r as f64).abs() <= 1e-5 * (1.0 + l.abs() as f64));
            }
        }

        #[test]
        fn mask_resample_is_binary_and_idempotent(
            bits in prop::collection::vec(any::<bool>(), 64),
        ) {
            let m = LesionMask::from_indices([4, 4, 4], bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i));
            let grid = GridSpec { target_spacing: 1.0, target_dims: [4, 4, 4] };
            let t = GridTransform::to_grid([4, 4, 4], [1.0; 3], &grid);
            prop_assert_eq!(t.apply_nearest(&m), m.clone());
            prop_assert!(m.to_bytes().iter().all(|b| *b <= 1));
        }
    }
}
