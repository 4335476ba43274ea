//! Straight-line re-implementation of the encoding chain over plain vectors.
//! Shares only the weight values with the library.

use petgrid_core::fusion::RefWeights;
use petgrid_core::volume::{LesionMask, Volume3D};

type Rows = Vec<Vec<f64>>;

fn at(m: &nalgebra::DMatrix<f64>, i: usize, j: usize) -> f64 {
    m[(i, j)]
}

fn embed(v: &Volume3D, patch: [usize; 3], proj: &nalgebra::DMatrix<f64>) -> Rows {
    let dims = v.dims();
    let g = [dims[0] / patch[0], dims[1] / patch[1], dims[2] / patch[2]];
    let d = proj.ncols();
    let mut out = Vec::new();
    for kd in 0..g[0] {
        for kw in 0..g[1] {
            for kh in 0..g[2] {
                let mut row = vec![0.0; d];
                let mut p = 0;
                for a in 0..patch[0] {
                    for b in 0..patch[1] {
                        for c in 0..patch[2] {
                            let x = v.get([kd * patch[0] + a, kw * patch[1] + b, kh * patch[2] + c]) as f64;
                            for j in 0..d {
                                row[j] += x * at(proj, p, j);
                            }
                            p += 1;
                        }
                    }
                }
                out.push(row);
            }
        }
    }
    out
}

fn mask_rows(m: &LesionMask, patch: [usize; 3], table: &nalgebra::DMatrix<f64>) -> Rows {
    let dims = m.dims();
    let g = [dims[0] / patch[0], dims[1] / patch[1], dims[2] / patch[2]];
    let levels = (table.nrows() - 1) as f64;
    let vox = (patch[0] * patch[1] * patch[2]) as f64;
    let mut out = Vec::new();
    for kd in 0..g[0] {
        for kw in 0..g[1] {
            for kh in 0..g[2] {
                let mut count = 0usize;
                for a in 0..patch[0] {
                    for b in 0..patch[1] {
                        for c in 0..patch[2] {
                            if m.get([kd * patch[0] + a, kw * patch[1] + b, kh * patch[2] + c]) {
                                count += 1;
                            }
                        }
                    }
                }
                let occ = count as f64 / vox;
                let pos = occ * levels;
                let lo = if occ >= 1.0 { table.nrows() - 2 } else { pos.floor() as usize };
                let frac = pos - lo as f64;
                out.push(
                    (0..table.ncols())
                        .map(|j| if count == 0 { 0.0 } else { at(table, lo, j) * (1.0 - frac) + at(table, lo + 1, j) * frac })
                        .collect(),
                );
            }
        }
    }
    out
}

fn times(x: &Rows, m: &nalgebra::DMatrix<f64>) -> Rows {
    x.iter()
        .map(|row| (0..m.ncols()).map(|j| (0..m.nrows()).map(|i| row[i] * at(m, i, j)).sum()).collect())
        .collect()
}

fn branch(pet: &Volume3D, ct: &Volume3D, mask: Option<&LesionMask>, patch: [usize; 3], w: &RefWeights) -> Rows {
    let proj = if patch.iter().product::<usize>() == w.global_projection.nrows() {
        &w.global_projection
    } else {
        &w.focal_projection
    };
    let mut zp = embed(pet, patch, proj);
    if let Some(m) = mask {
        for (row, me) in zp.iter_mut().zip(mask_rows(m, patch, &w.mask_embed_table)) {
            for (a, b) in row.iter_mut().zip(me) {
                *a += b;
            }
        }
    }
    let xp = times(&zp, &w.encoder_stub);
    let xc = times(&embed(ct, patch, proj), &w.encoder_stub);
    xp.into_iter().zip(xc).map(|(mut a, b)| {
        a.extend(b);
        a
    }).collect()
}

/// `T = X + X~`.
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    pet: &Volume3D,
    ct: &Volume3D,
    mask: Option<&LesionMask>,
    fpet: &Volume3D,
    fct: &Volume3D,
    fmask: Option<&LesionMask>,
    global_patch: [usize; 3],
    focal_patch: [usize; 3],
    w: &RefWeights,
) -> Rows {
    let x = branch(pet, ct, mask, global_patch, w);
    let xt = branch(fpet, fct, fmask, focal_patch, w);
    x.into_iter().zip(xt).map(|(a, b)| a.iter().zip(&b).map(|(p, q)| p + q).collect()).collect()
}

/// Block means over a `grid` of tokens, then the projector.
pub fn pool(t: &Rows, grid: [usize; 3], f: usize, w: &RefWeights) -> Rows {
    let og = [grid[0] / f, grid[1] / f, grid[2] / f];
    let mut out = Vec::new();
    for a in 0..og[0] {
        for b in 0..og[1] {
            for c in 0..og[2] {
                let mut acc = vec![0.0; t[0].len()];
                for i in 0..f {
                    for j in 0..f {
                        for k in 0..f {
                            let idx = ((a * f + i) * grid[1] + (b * f + j)) * grid[2] + (c * f + k);
                            for (s, v) in acc.iter_mut().zip(&t[idx]) {
                                *s += v;
                            }
                        }
                    }
                }
                out.push(acc.into_iter().map(|s| s / (f * f * f) as f64).collect());
            }
        }
    }
    times(&out, &w.projector)
}
