//! Reference encoding path: patch embedding, additive mask conditioning, a
//! fixed orthogonal encoder stand-in, PET/CT concatenation, global + focal
//! addition, spatial pooling and projection. No training, no attention.
//!
//! Tokens are ordered row-major over the patch grid `(kd, kw, kh)`; patch
//! voxels are flattened row-major `(d, w, h)` inside each patch.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Dims, LesionMask, Volume3D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("grid {dims:?} is not divisible by patch {patch:?}")]
    IndivisibleDims { dims: Dims, patch: Dims },
    #[error("global and focal token counts differ ({global} vs {focal})")]
    TokenCountMismatch { global: usize, focal: usize },
    #[error("token grid {grid:?} is not divisible by pool factor {factor}")]
    IndivisibleTokens { grid: Dims, factor: usize },
    #[error("inputs do not share one grid")]
    GridMismatch,
    #[error("weights do not fit: {0}")]
    ShapeMismatch(String),
    #[error("invalid patch configuration: {0}")]
    InvalidSpec(String),
    #[error("malformed token file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch: Dims,
    pub embed_dim: usize,
}

impl PatchSpec {
    pub fn patch_voxels(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn token_grid(&self, dims: Dims) -> Result<Dims, FusionError> {
        if (0..3).any(|a| self.patch[a] == 0 || !dims[a].is_multiple_of(self.patch[a])) {
            return Err(FusionError::IndivisibleDims {
                dims,
                patch: self.patch,
            });
        }
        Ok([0, 1, 2].map(|a| dims[a] / self.patch[a]))
    }
}

/// Encoder configuration shared by the global and focal branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub global_patch: Dims,
    pub focal_patch: Dims,
    pub embed_dim: usize,
    pub lm_dim: usize,
    pub pool_factor: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            global_patch: [16; 3],
            focal_patch: [8; 3],
            embed_dim: 64,
            lm_dim: 128,
            pool_factor: 2,
        }
    }
}

impl PatchConfig {
    pub fn global(&self) -> PatchSpec {
        PatchSpec {
            patch: self.global_patch,
            embed_dim: self.embed_dim,
        }
    }

    pub fn focal(&self) -> PatchSpec {
        PatchSpec {
            patch: self.focal_patch,
            embed_dim: self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::InvalidSpec(m.into()));
        if self.global_patch.contains(&0) || self.focal_patch.contains(&0) {
            return bad("patch sides must be positive");
        }
        if self.embed_dim == 0 || self.lm_dim == 0 || self.pool_factor == 0 {
            return bad("embed_dim, lm_dim and pool_factor must be positive");
        }
        Ok(())
    }

    /// Focal crop resolution that yields the same token grid as `global_dims`.
    pub fn matching_focal_dims(&self, global_dims: Dims) -> Result<Dims, FusionError> {
        let g = self.global().token_grid(global_dims)?;
        Ok([0, 1, 2].map(|a| g[a] * self.focal_patch[a]))
    }
}

/// `K x cols` token matrix plus the patch grid its rows enumerate.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub grid: Dims,
    pub data: DMatrix<f64>,
}

impl TokenMatrix {
    pub fn zeros(grid: Dims, cols: usize) -> Self {
        Self {
            grid,
            data: DMatrix::zeros(grid.iter().product(), cols),
        }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    /// `u32 LE rows, u32 LE cols`, then `rows*cols` f64 LE, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (r, c) = self.data.shape();
        let mut out = Vec::with_capacity(8 + 8 * r * c);
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for i in 0..r {
            for j in 0..c {
                out.extend_from_slice(&self.data[(i, j)].to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`TokenMatrix::to_bytes`]; the grid becomes `[rows, 1, 1]`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FusionError> {
        let malformed = |m: &str| FusionError::Malformed(m.into());
        if bytes.len() < 8 {
            return Err(malformed("short header"));
        }
        let r = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let c = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 8 + 8 * r * c {
            return Err(malformed("payload length"));
        }
        let vals = bytes[8..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
        Ok(Self {
            grid: [r, 1, 1],
            data: DMatrix::from_row_iterator(r, c, vals),
        })
    }
}

/// Number of occupancy levels between 0 and 1 held by the mask table.
pub const MASK_LEVELS: usize = 16;

/// Seeded fixed parameters of the reference encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RefWeights {
    /// `patch_voxels(global) x d`.
    pub global_projection: DMatrix<f64>,
    /// `patch_voxels(focal) x d`.
    pub focal_projection: DMatrix<f64>,
    /// `(MASK_LEVELS + 1) x d`; row `i` is the embedding of occupancy
    /// `i / MASK_LEVELS`, row 0 is zero.
    pub mask_embed_table: DMatrix<f64>,
    /// Orthogonal `d x d`.
    pub encoder_stub: DMatrix<f64>,
    /// `2d x d_lm`.
    pub projector: DMatrix<f64>,
}

impl RefWeights {
    /// Draws, in order, the global projection, focal projection, mask table,
    /// projector and encoder stub (Q of a QR of a Gaussian matrix) from
    /// ChaCha8 seeded with `seed`.
    pub fn generate(seed: u64, cfg: &PatchConfig) -> Result<Self, FusionError> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, scale: f64| {
            let mut m = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    m[(i, j)] = scale * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
            m
        };
        let pg = cfg.global().patch_voxels();
        let pf = cfg.focal().patch_voxels();
        let global_projection = uniform(pg, d, 1.0 / (pg as f64).sqrt());
        let focal_projection = uniform(pf, d, 1.0 / (pf as f64).sqrt());
        let mut mask_embed_table = uniform(MASK_LEVELS + 1, d, 1.0);
        mask_embed_table.row_mut(0).fill(0.0);
        let projector = uniform(2 * d, cfg.lm_dim, 1.0 / ((2 * d) as f64).sqrt());
        let mut g = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                g[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let encoder_stub = g.qr().q();
        Ok(Self {
            global_projection,
            focal_projection,
            mask_embed_table,
            encoder_stub,
            projector,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder_stub.nrows()
    }

    /// Patch projection chosen by patch size. When both branches use the
    /// same patch size they share the global projection.
    fn projection_for(&self, spec: &PatchSpec) -> Result<&DMatrix<f64>, FusionError> {
        let p = spec.patch_voxels();
        [&self.global_projection, &self.focal_projection]
            .into_iter()
            .find(|m| m.nrows() == p && m.ncols() == spec.embed_dim)
            .ok_or_else(|| FusionError::ShapeMismatch(format!("no {p} x {} patch projection", spec.embed_dim)))
    }

    /// Table row for an occupancy in `[0, 1]`, linearly interpolated between levels.
    pub fn mask_row(&self, occupancy: f64) -> Vec<f64> {
        let x = occupancy.clamp(0.0, 1.0) * MASK_LEVELS as f64;
        let i = (x.floor() as usize).min(MASK_LEVELS - 1);
        let f = x - i as f64;
        let t = &self.mask_embed_table;
        (0..t.ncols()).map(|j| (1.0 - f) * t[(i, j)] + f * t[(i + 1, j)]).collect()
    }
}

const CHUNK: usize = 256;

/// Row `k` is the flattened patch `k` times the patch projection.
pub fn patch_embed(v: &Volume3D, spec: &PatchSpec, w: &RefWeights) -> Result<TokenMatrix, FusionError> {
    let grid = spec.token_grid(v.dims())?;
    let proj = w.projection_for(spec)?;
    let k = grid.iter().product::<usize>();
    let p = spec.patch_voxels();
    let [sd, sw, sh] = spec.patch;
    let mut out = DMatrix::zeros(k, spec.embed_dim);
    let mut start = 0;
    while start < k {
        let n = CHUNK.min(k - start);
        let mut patches = DMatrix::zeros(n, p);
        for r in 0..n {
            let [kd, kw, kh] = crate::volume::voxel_coords(grid, start + r);
            let mut col = 0;
            for d in 0..sd {
                for ww in 0..sw {
                    for h in 0..sh {
                        patches[(r, col)] = v.get([kd * sd + d, kw * sw + ww, kh * sh + h]) as f64;
                        col += 1;
                    }
                }
            }
        }
        out.rows_mut(start, n).copy_from(&(patches * proj));
        start += n;
    }
    Ok(TokenMatrix { grid, data: out })
}

/// Fraction of set voxels per patch, in token order.
pub fn patch_occupancy(m: &LesionMask, spec: &PatchSpec) -> Result<Vec<f64>, FusionError> {
    let grid = spec.token_grid(m.dims())?;
    let mut counts = vec![0usize; grid.iter().product()];
    for [d, w, h] in m.coords() {
        let t = [d / spec.patch[0], w / spec.patch[1], h / spec.patch[2]];
        counts[crate::volume::linear_index(grid, t)] += 1;
    }
    let p = spec.patch_voxels() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / p).collect())
}

/// Per-token mask embedding; patches without mask voxels map to zero.
pub fn mask_embed(m: &LesionMask, spec: &PatchSpec, w: &RefWeights) -> Result<TokenMatrix, FusionError> {
    let grid = spec.token_grid(m.dims())?;
    let occ = patch_occupancy(m, spec)?;
    let mut out = TokenMatrix::zeros(grid, w.embed_dim());
    for (k, &o) in occ.iter().enumerate() {
        if o > 0.0 {
            for (j, v) in w.mask_row(o).into_iter().enumerate() {
                out.data[(k, j)] = v;
            }
        }
    }
    Ok(out)
}

/// One branch's inputs on a common grid. `mask: None` skips conditioning.
#[derive(Debug, Clone, Copy)]
pub struct BranchInput<'a> {
    pub pet: &'a Volume3D,
    pub ct: &'a Volume3D,
    pub mask: Option<&'a LesionMask>,
}

/// `Concat(stub(Z_P + ME(M)), stub(Z_C))` for one branch.
pub fn encode_branch(x: &BranchInput, spec: &PatchSpec, w: &RefWeights) -> Result<TokenMatrix, FusionError> {
    if x.pet.dims() != x.ct.dims() || x.mask.is_some_and(|m| m.dims() != x.pet.dims()) {
        return Err(FusionError::GridMismatch);
    }
    let mut zp = patch_embed(x.pet, spec, w)?;
    if let Some(m) = x.mask {
        zp.data += mask_embed(m, spec, w)?.data;
    }
    let zc = patch_embed(x.ct, spec, w)?;
    let xp = zp.data * &w.encoder_stub;
    let xc = zc.data * &w.encoder_stub;
    let (k, d) = xp.shape();
    let mut x = DMatrix::zeros(k, 2 * d);
    x.columns_mut(0, d).copy_from(&xp);
    x.columns_mut(d, d).copy_from(&xc);
    Ok(TokenMatrix { grid: zp.grid, data: x })
}

/// `T = X + X~` where X is the global branch and X~ the focal branch.
pub fn encode_fuse(
    global: &BranchInput,
    focal: &BranchInput,
    global_spec: &PatchSpec,
    focal_spec: &PatchSpec,
    w: &RefWeights,
) -> Result<TokenMatrix, FusionError> {
    let kg: usize = global_spec.token_grid(global.pet.dims())?.iter().product();
    let kf: usize = focal_spec.token_grid(focal.pet.dims())?.iter().product();
    if kg != kf {
        return Err(FusionError::TokenCountMismatch { global: kg, focal: kf });
    }
    let mut t = encode_branch(global, global_spec, w)?;
    t.data += encode_branch(focal, focal_spec, w)?.data;
    Ok(t)
}

/// Mean over each `pool_factor^3` block of the token grid, then `* projector`.
pub fn pool_project(t: &TokenMatrix, w: &RefWeights, pool_factor: usize) -> Result<TokenMatrix, FusionError> {
    if pool_factor == 0 || t.grid.iter().any(|g| g % pool_factor != 0) {
        return Err(FusionError::IndivisibleTokens {
            grid: t.grid,
            factor: pool_factor,
        });
    }
    if t.cols() != w.projector.nrows() {
        return Err(FusionError::ShapeMismatch(format!(
            "{} token columns vs projector with {} rows",
            t.cols(),
            w.projector.nrows()
        )));
    }
    let out_grid = t.grid.map(|g| g / pool_factor);
    let mut pooled = DMatrix::zeros(out_grid.iter().product(), t.cols());
    for k in 0..t.rows() {
        let c = crate::volume::voxel_coords(t.grid, k);
        let o = crate::volume::linear_index(out_grid, c.map(|x| x / pool_factor));
        let mut row = pooled.row_mut(o);
        row += t.data.row(k);
    }
    pooled /= pool_factor.pow(3) as f64;
    Ok(TokenMatrix {
        grid: out_grid,
        data: pooled * &w.projector,
    })
}
