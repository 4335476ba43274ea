//! Synthetic PET/CT phantoms with Gaussian lesions and matching report text.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nifti::{write_mask, write_nifti, NiftiError};
use crate::volume::{voxel_coords, voxel_count, Dims, LesionMask, Modality, Volume3D, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("blob {0}: peak must be positive and sigma must be positive")]
    InvalidBlob(usize),
    #[error("blob {0}: centre lies outside the grid")]
    BlobOutsideGrid(usize),
    #[error("background and noise must be finite and nonnegative")]
    InvalidBackground,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Isotropic Gaussian uptake: `peak * exp(-r^2 / (2 sigma^2))`, voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub sigma: f64,
    pub peak: f64,
}

impl Blob {
    pub fn value_at(&self, c: [usize; 3]) -> f64 {
        self.peak * (-self.dist2(c) / (2.0 * self.sigma * self.sigma)).exp()
    }

    fn dist2(&self, c: [usize; 3]) -> f64 {
        (0..3).map(|a| (c[a] as f64 - self.center[a]).powi(2)).sum()
    }

    /// Radius of the 50%-of-peak isosurface, `sigma * sqrt(2 ln 2)`.
    pub fn half_max_radius(&self) -> f64 {
        self.sigma * (2.0 * std::f64::consts::LN_2).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub blobs: Vec<Blob>,
    pub background: f64,
    pub dims: Dims,
    pub spacing: f64,
    /// Standard deviation of additive Gaussian noise; 0 disables it.
    #[serde(default)]
    pub noise_std: f64,
}

#[derive(Debug, Clone)]
pub struct PhantomLesion {
    pub blob: Blob,
    /// Voxels inside the blob's analytic 50%-of-peak isocontour.
    pub truth: LesionMask,
    /// Maximum sampled SUV near the blob, as it would be read off the image.
    pub suv_max: f64,
    /// 0-based axial index of that maximum.
    pub max_depth: usize,
    pub sentence: String,
}

#[derive(Debug, Clone)]
pub struct PhantomOutput {
    pub pet: Volume3D,
    pub ct: Volume3D,
    pub lesions: Vec<PhantomLesion>,
    pub report: String,
}

impl PhantomOutput {
    pub fn truth_masks(&self) -> Vec<&LesionMask> {
        self.lesions.iter().map(|l| &l.truth).collect()
    }
}

const SITES: [&str; 6] = [
    "right hilar node",
    "liver",
    "left iliac bone",
    "right axillary node",
    "left adrenal gland",
    "T8 vertebral body",
];

/// Renders the PET as background plus Gaussian blobs (plus optional seeded
/// noise), a soft-tissue CT, the analytic half-max truth mask per blob, and
/// one report sentence per blob in the form
/// `"Hypermetabolic <site>, SUV max <x.x>, slice <n>."` with a 1-based slice.
pub fn make_phantom(p: &Phantom, seed: u64) -> Result<PhantomOutput, PhantomError> {
    if !(p.background.is_finite() && p.background >= 0.0 && p.noise_std.is_finite() && p.noise_std >= 0.0) {
        return Err(PhantomError::InvalidBackground);
    }
    for (i, b) in p.blobs.iter().enumerate() {
        if !(b.peak > 0.0 && b.sigma > 0.0) {
            return Err(PhantomError::InvalidBlob(i));
        }
        if (0..3).any(|a| !(b.center[a] >= 0.0 && b.center[a] <= (p.dims[a] - 1) as f64)) {
            return Err(PhantomError::BlobOutsideGrid(i));
        }
    }
    let n = voxel_count(p.dims);
    let mut data: Vec<f32> = (0..n)
        .map(|i| {
            let c = voxel_coords(p.dims, i);
            (p.background + p.blobs.iter().map(|b| b.value_at(c)).sum::<f64>()) as f32
        })
        .collect();
    if p.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, p.noise_std).expect("finite std");
        for v in &mut data {
            *v = (*v as f64 + normal.sample(&mut rng)).max(0.0) as f32;
        }
    }
    let spacing = [p.spacing; 3];
    let pet = Volume3D::new(p.dims, spacing, [0.0; 3], data, Modality::Pet)?;
    let ct = soft_tissue_ct(p.dims, spacing)?;

    let mut lesions = Vec::with_capacity(p.blobs.len());
    for (k, blob) in p.blobs.iter().enumerate() {
        let r_half = blob.half_max_radius();
        let truth = LesionMask::from_fn(p.dims, |c| blob.dist2(c) <= r_half * r_half);
        let near = 4.0 * blob.sigma * blob.sigma;
        let (max_idx, suv_max) = (0..n)
            .filter(|&i| blob.dist2(voxel_coords(p.dims, i)) <= near)
            .map(|i| (i, pet.data()[i] as f64))
            .fold((usize::MAX, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        let max_depth = voxel_coords(p.dims, max_idx)[0];
        let sentence = format!(
            "Hypermetabolic {}, SUV max {:.1}, slice {}.",
            SITES[k % SITES.len()],
            suv_max,
            max_depth + 1
        );
        lesions.push(PhantomLesion {
            blob: *blob,
            truth,
            suv_max,
            max_depth,
            sentence,
        });
    }
    let report = lesions.iter().map(|l| l.sentence.as_str()).collect::<Vec<_>>().join(" ");
    Ok(PhantomOutput {
        pet,
        ct,
        lesions,
        report,
    })
}

/// Parameters for [`random_phantom`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomPhantomSpec {
    pub dims: Dims,
    pub spacing: f64,
    pub blobs: usize,
    pub sigma_range: (f64, f64),
    pub peak_range: (f64, f64),
    pub background: f64,
    pub noise_std: f64,
}

impl Default for RandomPhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: 3.0,
            blobs: 3,
            sigma_range: (1.5, 3.0),
            peak_range: (3.0, 15.0),
            background: 1.0,
            noise_std: 0.0,
        }
    }
}

/// Draws blob centres, widths and peaks from ChaCha8 seeded with `seed`.
/// Centres stay `2.5 sigma + 1` voxels from every face and blobs are at
/// least `3.5 (sigma_i + sigma_j) + 2` voxels apart; gives up with
/// `InvalidBlob` when the grid cannot hold that many.
pub fn random_phantom(spec: &RandomPhantomSpec, seed: u64) -> Result<Phantom, PhantomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blobs: Vec<Blob> = Vec::with_capacity(spec.blobs);
    let mut attempts = 0;
    while blobs.len() < spec.blobs {
        attempts += 1;
        if attempts > 10_000 {
            return Err(PhantomError::InvalidBlob(blobs.len()));
        }
        let sigma = rng.random_range(spec.sigma_range.0..=spec.sigma_range.1);
        let margin = 2.5 * sigma + 1.0;
        if (0..3).any(|a| spec.dims[a] as f64 - 1.0 - margin <= margin) {
            return Err(PhantomError::InvalidBlob(blobs.len()));
        }
        let center = [0, 1, 2].map(|a| rng.random_range(margin..spec.dims[a] as f64 - 1.0 - margin));
        let peak = rng.random_range(spec.peak_range.0..=spec.peak_range.1);
        let apart = blobs.iter().all(|b| {
            let d2: f64 = (0..3).map(|a| (b.center[a] - center[a]).powi(2)).sum();
            d2.sqrt() >= 3.5 * (b.sigma + sigma) + 2.0
        });
        if apart {
            blobs.push(Blob { center, sigma, peak });
        }
    }
    Ok(Phantom {
        blobs,
        background: spec.background,
        dims: spec.dims,
        spacing: spec.spacing,
        noise_std: spec.noise_std,
    })
}

/// Writes `<exam>_pet.nii.gz`, `<exam>_ct.nii.gz`, `<exam>.txt` and one
/// `<exam>_truth<k>.nii.gz` per lesion into `dir`.
pub fn write_exam(dir: &Path, exam_id: &str, out: &PhantomOutput) -> Result<(), NiftiError> {
    fs::create_dir_all(dir)?;
    write_nifti(dir.join(format!("{exam_id}_pet.nii.gz")), &out.pet)?;
    write_nifti(dir.join(format!("{exam_id}_ct.nii.gz")), &out.ct)?;
    for (k, l) in out.lesions.iter().enumerate() {
        write_mask(dir.join(format!("{exam_id}_truth{k}.nii.gz")), &l.truth, out.pet.spacing(), out.pet.origin())?;
    }
    fs::write(dir.join(format!("{exam_id}.txt")), format!("{}\n", out.report))?;
    Ok(())
}

/// Ellipsoidal body of 40 HU in air (-1000 HU).
fn soft_tissue_ct(dims: Dims, spacing: [f64; 3]) -> Result<Volume3D, VolumeError> {
    let half = dims.map(|d| d as f64 / 2.0);
    Volume3D::from_fn(dims, spacing, Modality::Ct, |c| {
        let r: f64 = (0..3).map(|a| ((c[a] as f64 + 0.5 - half[a]) / half[a]).powi(2)).sum();
        if r <= 1.0 {
            40.0
        } else {
            -1000.0
        }
    })
}
