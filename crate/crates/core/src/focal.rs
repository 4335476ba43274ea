//! Perturbed cubic focal crops around a lesion mask.
//!
//! The crop box is a cube that always contains every mask voxel. Given a
//! (possibly perturbed) centre and side, the box is first translated to fit
//! the mask and the volume, and only grown when the mask is wider than the
//! requested side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::volume::{Dims, GridTransform, LesionMask, Volume3D, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FocalError {
    #[error("lesion mask is empty")]
    EmptyMask,
    #[error("perturbation fraction {0} outside [0, 0.5)")]
    InvalidFraction(f64),
    #[error("crop side must be positive and finite, got {0}")]
    InvalidSide(f64),
    #[error("PET, CT and mask grids differ")]
    GridMismatch,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSpec {
    pub fraction: f64,
    pub rng_seed: u64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            rng_seed: 0,
        }
    }
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<(), FocalError> {
        if (0.0..0.5).contains(&self.fraction) {
            Ok(())
        } else {
            Err(FocalError::InvalidFraction(self.fraction))
        }
    }
}

/// Base crop size and output resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSpec {
    pub margin_fraction: f64,
    pub min_side: f64,
    pub resampled_dims: Dims,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            margin_fraction: 0.25,
            min_side: 16.0,
            resampled_dims: [32; 3],
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<(), FocalError> {
        if !(self.margin_fraction.is_finite() && self.margin_fraction >= 0.0) {
            return Err(FocalError::InvalidSide(self.margin_fraction));
        }
        if !(self.min_side.is_finite() && self.min_side >= 0.0) {
            return Err(FocalError::InvalidSide(self.min_side));
        }
        if self.resampled_dims.contains(&0) {
            return Err(VolumeError::ZeroDims(self.resampled_dims).into());
        }
        Ok(())
    }
}

pub fn mask_centroid(m: &LesionMask) -> Result<[f64; 3], FocalError> {
    if m.is_empty() {
        return Err(FocalError::EmptyMask);
    }
    let mut sum = [0f64; 3];
    for c in m.coords() {
        for a in 0..3 {
            sum[a] += c[a] as f64;
        }
    }
    let n = m.voxel_count() as f64;
    Ok(sum.map(|s| s / n))
}

/// `max((1 + margin) * longest bounding-box extent, min_side)`.
pub fn base_side(m: &LesionMask, margin_fraction: f64, min_side: f64) -> Result<f64, FocalError> {
    let bb = m.bounding_box().ok_or(FocalError::EmptyMask)?;
    let longest = *bb.extent().iter().max().expect("3 axes") as f64;
    Ok(((1.0 + margin_fraction) * longest).max(min_side))
}

/// Adds i.i.d. `U(-fraction*r, fraction*r)` offsets to the three centre
/// components and the side, in that order, drawing from `rng`.
pub fn perturb_with<R: Rng>(c: [f64; 3], r: f64, fraction: f64, rng: &mut R) -> ([f64; 3], f64) {
    if fraction == 0.0 {
        return (c, r);
    }
    let a = fraction * r;
    let mut draw = || a * (2.0 * rng.random::<f64>() - 1.0);
    let c = [c[0] + draw(), c[1] + draw(), c[2] + draw()];
    (c, r + draw())
}

/// Seeded perturbation using ChaCha8 seeded from `spec.rng_seed`.
pub fn perturb(c: [f64; 3], r: f64, spec: &PerturbSpec) -> Result<([f64; 3], f64), FocalError> {
    spec.validate()?;
    if !(r.is_finite() && r > 0.0) {
        return Err(FocalError::InvalidSide(r));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    Ok(perturb_with(c, r, spec.fraction, &mut rng))
}

/// Per-lesion seed: first 8 bytes (little endian) of
/// SHA-256(base_seed LE || exam_id || 0x00 || lesion_index LE).
pub fn derive_seed(base_seed: u64, exam_id: &str, lesion_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(exam_id.as_bytes());
    h.update([0u8]);
    h.update((lesion_index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Cube in source voxel coordinates; `start` may be negative or run past
/// the volume, in which case extraction zero-pads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub start: [i64; 3],
    pub side: usize,
}

impl CropBox {
    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| {
            let x = c[a] as i64;
            x >= self.start[a] && x < self.start[a] + self.side as i64
        })
    }

    pub fn dims(&self) -> Dims {
        [self.side; 3]
    }
}

/// Places the cube of side `round(r)` centred on `c` so that it holds the
/// whole mask, staying inside the volume when it fits.
pub fn crop_box(m: &LesionMask, c: [f64; 3], r: f64) -> Result<CropBox, FocalError> {
    if !(r.is_finite() && r > 0.0) {
        return Err(FocalError::InvalidSide(r));
    }
    let bb = m.bounding_box().ok_or(FocalError::EmptyMask)?;
    let longest = *bb.extent().iter().max().expect("3 axes");
    let side = (r.round() as usize).max(1).max(longest);
    let s = side as i64;
    let dims = m.dims();
    let mut start = [0i64; 3];
    for a in 0..3 {
        let (lo, hi, n) = (bb.min[a] as i64, bb.max[a] as i64, dims[a] as i64);
        let wanted = (c[a] - (s - 1) as f64 / 2.0).round() as i64;
        let (min_p, max_p) = if s <= n {
            ((hi - s + 1).max(0), lo.min(n - s))
        } else {
            (hi - s + 1, lo)
        };
        start[a] = wanted.clamp(min_p, max_p);
    }
    Ok(CropBox { start, side })
}

/// Copies the box out of `v`, zero outside the volume. Origin follows the box.
pub fn extract_box(v: &Volume3D, b: &CropBox) -> Result<Volume3D, VolumeError> {
    let dims = v.dims();
    let sp = v.spacing();
    let origin = [0, 1, 2].map(|a| v.origin()[a] + b.start[a] as f64 * sp[a]);
    Ok(Volume3D::from_fn(b.dims(), sp, v.modality(), |c| {
        source(dims, b, c).map_or(0.0, |s| v.get(s))
    })?
    .with_origin(origin))
}

pub fn extract_mask_box(m: &LesionMask, b: &CropBox) -> LesionMask {
    let dims = m.dims();
    LesionMask::from_fn(b.dims(), |c| source(dims, b, c).is_some_and(|s| m.get(s)))
}

fn source(dims: Dims, b: &CropBox, c: [usize; 3]) -> Option<[usize; 3]> {
    let mut s = [0usize; 3];
    for a in 0..3 {
        let x = b.start[a] + c[a] as i64;
        if x < 0 || x >= dims[a] as i64 {
            return None;
        }
        s[a] = x as usize;
    }
    Some(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalCrop {
    /// Requested (perturbed) centre, voxel coordinates.
    pub center: [f64; 3],
    /// Requested (perturbed) side, voxels.
    pub side: f64,
    pub crop_box: CropBox,
    pub pet_crop: Volume3D,
    pub ct_crop: Volume3D,
    pub mask_crop: LesionMask,
    pub resampled_dims: Dims,
}

/// Crops PET, CT and mask to the containing box and resizes them to
/// `resampled_dims` (trilinear for images, nearest for the mask).
pub fn crop(
    pet: &Volume3D,
    ct: &Volume3D,
    m: &LesionMask,
    c: [f64; 3],
    r: f64,
    resampled_dims: Dims,
) -> Result<FocalCrop, FocalError> {
    if pet.dims() != m.dims() || ct.dims() != m.dims() {
        return Err(FocalError::GridMismatch);
    }
    if resampled_dims.contains(&0) {
        return Err(VolumeError::ZeroDims(resampled_dims).into());
    }
    let b = crop_box(m, c, r)?;
    let t = GridTransform::resize(b.dims(), resampled_dims);
    Ok(FocalCrop {
        center: c,
        side: r,
        crop_box: b,
        pet_crop: t.apply_linear(&extract_box(pet, &b)?),
        ct_crop: t.apply_linear(&extract_box(ct, &b)?),
        mask_crop: t.apply_nearest(&extract_mask_box(m, &b)),
        resampled_dims,
    })
}

/// Everything needed to reproduce a focal prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub centroid: [f64; 3],
    pub base_side: f64,
    pub center: [f64; 3],
    pub side: f64,
    pub box_start: [i64; 3],
    pub box_side: usize,
    pub seed: u64,
    pub fraction: f64,
    pub resampled_dims: Dims,
}

/// centroid -> base side -> perturbation -> crop.
pub fn focal_prompt(
    pet: &Volume3D,
    ct: &Volume3D,
    m: &LesionMask,
    crop_spec: &CropSpec,
    perturb_spec: &PerturbSpec,
) -> Result<(FocalCrop, CropRecord), FocalError> {
    crop_spec.validate()?;
    let centroid = mask_centroid(m)?;
    let r = base_side(m, crop_spec.margin_fraction, crop_spec.min_side)?;
    let (center, side) = perturb(centroid, r, perturb_spec)?;
    let fc = crop(pet, ct, m, center, side, crop_spec.resampled_dims)?;
    let rec = CropRecord {
        centroid,
        base_side: r,
        center,
        side,
        box_start: fc.crop_box.start,
        box_side: fc.crop_box.side,
        seed: perturb_spec.rng_seed,
        fraction: perturb_spec.fraction,
        resampled_dims: crop_spec.resampled_dims,
    };
    Ok((fc, rec))
}

/// Source voxels of `m` that fall outside `b`; zero by construction.
pub fn escaped_voxels(m: &LesionMask, b: &CropBox) -> usize {
    m.coords().filter(|&c| !b.contains(c)).count()
}
