//! SUV-guided lesion segmentation.
//!
//! A record `(SUVmax, slice)` is turned into a mask by thresholding at a
//! fraction of the reported SUVmax, labelling connected components, picking
//! the component whose maximum matches the report and which crosses the
//! reported slice, and then iteratively re-thresholding that component
//! against its local background until the voxel count settles.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::LesionRecord;
use crate::volume::{linear_index, voxel_coords, voxel_count, BoundingBox, Dims, LesionMask, Volume3D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegError {
    #[error("no component matches SUVmax {suv} on slice {slice}")]
    NoMatch { suv: f64, slice: usize },
    #[error("initial threshold {0} selects no voxels")]
    EmptyInitialThreshold(f64),
    #[error("refinement did not converge after {} iterations", .0.iterations_used)]
    NotConverged(Box<SegResult>),
    #[error("record refers to a prior study")]
    PriorReference,
    #[error("refined mask no longer intersects slice {0}")]
    SliceLost(usize),
    #[error("cannot refine an empty component")]
    EmptyComponent,
    #[error("component and volume grids differ")]
    GridMismatch,
    #[error("invalid segmentation parameters: {0}")]
    InvalidParams(String),
}

/// Voxel adjacency used for component labelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;
    fn try_from(n: u8) -> Result<Self, String> {
        match n {
            6 => Ok(Self::Six),
            18 => Ok(Self::Eighteen),
            26 => Ok(Self::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Self::Six => 1,
            Self::Eighteen => 2,
            Self::TwentySix => 3,
        };
        let mut out = Vec::new();
        for d in -1isize..=1 {
            for w in -1isize..=1 {
                for h in -1isize..=1 {
                    let nz = [d, w, h].iter().filter(|x| **x != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        out.push([d, w, h]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegParams {
    pub initial_fraction: f64,
    pub suv_tolerance: f64,
    pub connectivity: Connectivity,
    /// Largest threshold move per iteration, as a fraction of the peak SUV.
    pub refine_step: f64,
    pub stabilize_eps: f64,
    pub max_iters: usize,
    pub background_margin: f64,
}

impl Default for SegParams {
    fn default() -> Self {
        Self {
            initial_fraction: 0.5,
            suv_tolerance: 0.1,
            connectivity: Connectivity::TwentySix,
            refine_step: 0.05,
            stabilize_eps: 0.01,
            max_iters: 50,
            background_margin: 0.5,
        }
    }
}

impl SegParams {
    pub fn validate(&self) -> Result<(), SegError> {
        let bad = |m: &str| Err(SegError::InvalidParams(m.into()));
        if !(self.initial_fraction > 0.0 && self.initial_fraction < 1.0) {
            return bad("initial_fraction must lie in (0, 1)");
        }
        if !(self.suv_tolerance > 0.0) {
            return bad("suv_tolerance must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.refine_step > 0.0) || !(self.stabilize_eps >= 0.0) || !self.background_margin.is_finite() {
            return bad("refine_step must be positive, stabilize_eps nonnegative, background_margin finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegResult {
    pub mask: LesionMask,
    pub achieved_suv_max: f64,
    pub iterations_used: usize,
    pub final_threshold: f64,
    /// Axial index of the peak voxel that seeds the refined component.
    pub selected_component_seed_slice: usize,
    pub converged: bool,
}

/// `value >= t` voxelwise.
pub fn threshold(v: &Volume3D, t: f64) -> LesionMask {
    let data = v.data();
    LesionMask::from_index_predicate(v.dims(), |i| data[i] as f64 >= t)
}

fn neighbors(dims: Dims, idx: usize, offsets: &[[isize; 3]], mut f: impl FnMut(usize)) {
    let c = voxel_coords(dims, idx);
    for o in offsets {
        let n = [0, 1, 2].map(|a| c[a] as isize + o[a]);
        if (0..3).all(|a| n[a] >= 0 && (n[a] as usize) < dims[a]) {
            f(linear_index(dims, n.map(|x| x as usize)));
        }
    }
}

/// Connected components as sorted voxel index lists, ordered by size
/// (descending) then smallest voxel index.
pub(crate) fn component_voxels(m: &LesionMask, conn: Connectivity) -> Vec<Vec<usize>> {
    let dims = m.dims();
    let offsets = conn.offsets();
    let mut remaining = m.clone();
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for seed in m.indices() {
        if !remaining.remove(seed) {
            continue;
        }
        let mut members = vec![seed];
        queue.push_back(seed);
        while let Some(i) = queue.pop_front() {
            neighbors(dims, i, &offsets, |n| {
                if remaining.remove(n) {
                    members.push(n);
                    queue.push_back(n);
                }
            });
        }
        members.sort_unstable();
        comps.push(members);
    }
    // seeds are visited in ascending order, so members[0] is each minimum
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

pub fn connected_components(m: &LesionMask, conn: Connectivity) -> Vec<LesionMask> {
    component_voxels(m, conn)
        .into_iter()
        .map(|vox| LesionMask::from_indices(m.dims(), vox))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct ComponentStats {
    max: f64,
    max_depth: usize,
    size: usize,
    on_slice: bool,
}

fn stats(voxels: impl Iterator<Item = usize>, pet: &Volume3D, slice: usize) -> ComponentStats {
    let dims = pet.dims();
    let data = pet.data();
    let mut s = ComponentStats {
        max: f64::NEG_INFINITY,
        max_depth: 0,
        size: 0,
        on_slice: false,
    };
    for i in voxels {
        let v = data[i] as f64;
        let depth = voxel_coords(dims, i)[0];
        if v > s.max {
            s.max = v;
            s.max_depth = depth;
        }
        s.size += 1;
        s.on_slice |= depth == slice;
    }
    s
}

fn pick(all: &[ComponentStats], reported_suv: f64, slice: usize, tol: f64) -> Option<usize> {
    all.iter()
        .enumerate()
        .filter(|(_, s)| s.on_slice && (s.max - reported_suv).abs() <= tol)
        .min_by_key(|(i, s)| (s.max_depth.abs_diff(slice), std::cmp::Reverse(s.size), *i))
        .map(|(i, _)| i)
}

/// Chooses the component whose maximum is within tolerance of the report and
/// which crosses the reported (0-based) slice. Several candidates are ranked
/// by depth distance of their maximum to the slice, then by size.
pub fn select_component(
    components: &[LesionMask],
    pet: &Volume3D,
    reported_suv: f64,
    slice: usize,
    params: &SegParams,
) -> Result<LesionMask, SegError> {
    if components.iter().any(|c| c.dims() != pet.dims()) {
        return Err(SegError::GridMismatch);
    }
    let all: Vec<_> = components.iter().map(|c| stats(c.indices(), pet, slice)).collect();
    pick(&all, reported_suv, slice, params.suv_tolerance)
        .map(|i| components[i].clone())
        .ok_or(SegError::NoMatch {
            suv: reported_suv,
            slice,
        })
}

fn bounding_box_of(dims: Dims, voxels: &[usize]) -> BoundingBox {
    let first = voxel_coords(dims, voxels[0]);
    let (min, max) = voxels.iter().fold((first, first), |(mut lo, mut hi), &i| {
        let c = voxel_coords(dims, i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
        (lo, hi)
    });
    BoundingBox { min, max }
}

fn median(values: &mut [f32]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f32::total_cmp);
    Some(*m as f64)
}

fn refine_voxels(
    component: &[usize],
    pet: &Volume3D,
    params: &SegParams,
    start_threshold: f64,
) -> Result<SegResult, SegError> {
    if component.is_empty() {
        return Err(SegError::EmptyComponent);
    }
    let dims = pet.dims();
    let data = pet.data();
    let bbox = bounding_box_of(dims, component).dilate(2, dims);
    let ext = bbox.extent();
    let to_local = |i: usize| {
        let c = voxel_coords(dims, i);
        linear_index(ext, [0, 1, 2].map(|a| c[a] - bbox.min[a]))
    };
    let to_global = |l: usize| {
        let c = voxel_coords(ext, l);
        linear_index(dims, [0, 1, 2].map(|a| c[a] + bbox.min[a]))
    };
    let n_local = voxel_count(ext);
    let values: Vec<f32> = (0..n_local).map(|l| data[to_global(l)]).collect();
    let mut in_component = vec![false; n_local];
    for &i in component {
        in_component[to_local(i)] = true;
    }
    // lowest index wins ties, matching component ordering
    let peak_global = component
        .iter()
        .copied()
        .fold(None::<usize>, |best, i| match best {
            Some(b) if data[b] >= data[i] => Some(b),
            _ => Some(i),
        })
        .expect("nonempty");
    let peak_local = to_local(peak_global);
    let peak = data[peak_global] as f64;

    let offsets = params.connectivity.offsets();
    let mut current = in_component.clone();
    let mut count = component.len();
    let mut t = start_threshold;
    let max_move = params.refine_step * peak.abs();
    let mut iterations = 0;
    let mut converged = false;
    let mut scratch = Vec::with_capacity(n_local);
    let mut queue = VecDeque::new();

    while iterations < params.max_iters {
        iterations += 1;
        scratch.clear();
        scratch.extend((0..n_local).filter(|&l| !current[l]).map(|l| values[l]));
        let target = match median(&mut scratch) {
            Some(bg) => (params.initial_fraction * peak).max(bg + params.background_margin),
            None => params.initial_fraction * peak,
        };
        t = if (target - t).abs() <= max_move {
            target
        } else {
            t + max_move.copysign(target - t)
        };

        let mut next = vec![false; n_local];
        next[peak_local] = true;
        queue.push_back(peak_local);
        let mut next_count = 1;
        while let Some(l) = queue.pop_front() {
            neighbors(ext, l, &offsets, |n| {
                if !next[n] && in_component[n] && values[n] as f64 >= t {
                    next[n] = true;
                    next_count += 1;
                    queue.push_back(n);
                }
            });
        }
        let change = count.abs_diff(next_count) as f64 / count as f64;
        current = next;
        count = next_count;
        if change < params.stabilize_eps {
            converged = true;
            break;
        }
    }

    let mask = LesionMask::from_indices(dims, (0..n_local).filter(|&l| current[l]).map(to_global));
    let result = SegResult {
        mask,
        achieved_suv_max: peak,
        iterations_used: iterations,
        final_threshold: t,
        selected_component_seed_slice: voxel_coords(dims, peak_global)[0],
        converged,
    };
    if converged {
        Ok(result)
    } else {
        Err(SegError::NotConverged(Box::new(result)))
    }
}

/// Adaptive re-thresholding of one component.
///
/// Each iteration estimates the background as the median SUV of the
/// component's bounding box (dilated by two voxels) outside the current mask,
/// aims for `max(initial_fraction * peak, background + background_margin)`,
/// moves the threshold toward that target by at most `refine_step * peak`,
/// and keeps the connected part of the component containing the peak voxel.
/// The peak voxel is never removed. Iteration stops once the relative voxel
/// count change drops below `stabilize_eps`.
pub fn refine(component: &LesionMask, pet: &Volume3D, params: &SegParams) -> Result<SegResult, SegError> {
    params.validate()?;
    if component.dims() != pet.dims() {
        return Err(SegError::GridMismatch);
    }
    let voxels: Vec<usize> = component.indices().collect();
    let start = voxels
        .iter()
        .map(|&i| pet.data()[i] as f64)
        .fold(f64::INFINITY, f64::min);
    refine_voxels(&voxels, pet, params, start)
}

/// Threshold, label, select and refine for one lesion record.
pub fn segment_lesion(pet: &Volume3D, record: &LesionRecord, params: &SegParams) -> Result<SegResult, SegError> {
    segment_at(pet, record.suv_max, record.axial_index(), params, record.is_prior_reference)
}

/// [`segment_lesion`] with an explicit 0-based axial index on `pet`'s grid.
pub fn segment_at(
    pet: &Volume3D,
    reported_suv: f64,
    slice: usize,
    params: &SegParams,
    is_prior_reference: bool,
) -> Result<SegResult, SegError> {
    params.validate()?;
    if is_prior_reference {
        return Err(SegError::PriorReference);
    }
    let no_match = SegError::NoMatch {
        suv: reported_suv,
        slice,
    };
    if slice >= pet.dims()[0] {
        return Err(no_match);
    }
    let t0 = params.initial_fraction * reported_suv;
    let initial = threshold(pet, t0);
    if initial.is_empty() {
        return Err(SegError::EmptyInitialThreshold(t0));
    }
    let comps = component_voxels(&initial, params.connectivity);
    let all: Vec<_> = comps
        .iter()
        .map(|c| stats(c.iter().copied(), pet, slice))
        .collect();
    let chosen = pick(&all, reported_suv, slice, params.suv_tolerance).ok_or(no_match)?;
    let check = |r: &SegResult| {
        if r.mask.intersects_slice(slice) {
            Ok(())
        } else {
            Err(SegError::SliceLost(slice))
        }
    };
    match refine_voxels(&comps[chosen], pet, params, t0) {
        Ok(r) => check(&r).map(|_| r),
        Err(SegError::NotConverged(r)) => {
            check(&r)?;
            Err(SegError::NotConverged(r))
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use proptest::prelude::*;

    fn vol(dims: Dims, f: impl Fn([usize; 3]) -> f32) -> Volume3D {
        Volume3D::from_fn(dims, [1.0; 3], Modality::Pet, f).unwrap()
    }

    fn cube(dims: Dims, lo: [usize; 3], side: usize) -> Vec<usize> {
        (0..voxel_count(dims))
            .filter(|&i| {
                let c = voxel_coords(dims, i);
                (0..3).all(|a| c[a] >= lo[a] && c[a] < lo[a] + side)
            })
            .collect()
    }

    #[test]
    fn threshold_examples() {
        let c = vol([3, 3, 3], |_| 5.0);
        assert_eq!(threshold(&c, 4.0).voxel_count(), 27);
        assert!(threshold(&c, 6.0).is_empty());
        // ramp 0..9 along depth (10 slices), t = 5 keeps slices 5..9
        let r = vol([10, 2, 2], |[d, _, _]| d as f32 * 10.0 / 9.0);
        let m = threshold(&r, 5.0);
        assert_eq!(m.voxel_count(), 20);
        assert!(m.coords().all(|c| c[0] >= 5));
    }

    #[test]
    fn components_of_disjoint_cubes() {
        let dims = [10, 10, 10];
        let mut vox = cube(dims, [0, 0, 0], 3);
        vox.extend(cube(dims, [5, 5, 5], 3));
        let comps = connected_components(&LesionMask::from_indices(dims, vox), Connectivity::Six);
        assert_eq!(comps.iter().map(|c| c.voxel_count()).collect::<Vec<_>>(), vec![27, 27]);
        assert!(comps[0].get([0, 0, 0]));
        assert!(connected_components(&LesionMask::empty(dims), Connectivity::TwentySix).is_empty());
    }

    #[test]
    fn corner_touch_depends_on_connectivity() {
        let dims = [6, 6, 6];
        let mut vox = cube(dims, [0, 0, 0], 2);
        vox.extend(cube(dims, [2, 2, 2], 2));
        let m = LesionMask::from_indices(dims, vox);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).len(), 1);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).len(), 2);
        assert_eq!(connected_components(&m, Connectivity::Six).len(), 2);
        // edge touch: 18 joins, 6 does not
        let mut vox = cube(dims, [0, 0, 0], 2);
        vox.extend(cube(dims, [2, 2, 0], 2));
        let m = LesionMask::from_indices(dims, vox);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).len(), 1);
        assert_eq!(connected_components(&m, Connectivity::Six).len(), 2);
    }

    #[test]
    fn ordering_is_size_then_min_index() {
        let dims = [1, 1, 9];
        let m = LesionMask::from_indices(dims, [0, 2, 3, 5, 6, 8]);
        let comps = connected_components(&m, Connectivity::Six);
        let firsts: Vec<_> = comps.iter().map(|c| c.indices().next().unwrap()).collect();
        assert_eq!(firsts, vec![2, 5, 0, 8]);
    }

    #[test]
    fn select_examples() {
        let dims = [20, 8, 16];
        let pet = vol(dims, |[d, w, h]| {
            if d == 10 && w == 4 && h == 3 {
                8.4
            } else if d == 10 && w == 4 && h == 12 {
                8.45
            } else if (9..=11).contains(&d) && (3..=5).contains(&w) && (2..=4).contains(&h) {
                6.0
            } else if (10..=11).contains(&d) && (3..=5).contains(&w) && (11..=13).contains(&h) {
                6.0
            } else {
                0.0
            }
        });
        let comps = connected_components(&threshold(&pet, 4.2), Connectivity::TwentySix);
        assert_eq!(comps.len(), 2);
        let p = SegParams::default();
        // both qualify, same depth distance -> larger blob (the 3x3x3 one)
        let chosen = select_component(&comps, &pet, 8.4, 10, &p).unwrap();
        assert_eq!(chosen.voxel_count(), 27);
        assert!(chosen.get([10, 4, 3]));
        assert!(matches!(select_component(&comps, &pet, 9.0, 10, &p), Err(SegError::NoMatch { .. })));
        // slice not crossed by either
        assert!(select_component(&comps, &pet, 8.4, 2, &p).is_err());
    }

    #[test]
    fn single_voxel_converges_immediately() {
        let dims = [7, 7, 7];
        let pet = vol(dims, |c| if c == [3, 3, 3] { 5.0 } else { 0.0 });
        let comp = LesionMask::from_indices(dims, [linear_index(dims, [3, 3, 3])]);
        let r = refine(&comp, &pet, &SegParams::default()).unwrap();
        assert_eq!(r.iterations_used, 1);
        assert_eq!(r.mask, comp);
        assert_eq!(r.achieved_suv_max, 5.0);
    }

    #[test]
    fn refine_drops_background_plateau() {
        let dims = [21, 21, 21];
        // 5x5x5 lesion at 10 on a 3-voxel plateau at 2.2 over background 2
        let pet = vol(dims, |c| {
            let r = c.iter().map(|&x| (x as isize - 10).unsigned_abs()).max().unwrap();
            if r <= 2 {
                10.0
            } else if r <= 5 {
                2.2
            } else {
                2.0
            }
        });
        let comp = threshold(&pet, 2.1);
        let r = refine(&comp, &pet, &SegParams::default()).unwrap();
        assert!(r.final_threshold > 2.5);
        assert_eq!(r.mask.voxel_count(), 125);
        assert!(r.mask.is_subset_of(&comp));
    }

    #[test]
    fn segment_rejects_prior_and_out_of_range() {
        let pet = vol([5, 5, 5], |c| if c == [2, 2, 2] { 4.0 } else { 0.0 });
        let p = SegParams::default();
        assert_eq!(segment_at(&pet, 4.0, 2, &p, true), Err(SegError::PriorReference));
        assert!(matches!(segment_at(&pet, 4.0, 9, &p, false), Err(SegError::NoMatch { .. })));
        assert!(matches!(segment_at(&pet, 20.0, 2, &p, false), Err(SegError::EmptyInitialThreshold(_))));
        let r = segment_at(&pet, 4.0, 2, &p, false).unwrap();
        assert_eq!(r.mask.voxel_count(), 1);
    }

    #[test]
    fn params_validation_and_serde() {
        let mut p = SegParams::default();
        p.initial_fraction = 1.0;
        assert!(p.validate().is_err());
        let parsed: SegParams = toml::from_str("connectivity = 6\nmax_iters = 3").unwrap();
        assert_eq!(parsed.connectivity, Connectivity::Six);
        assert_eq!(parsed.suv_tolerance, 0.1);
        assert!(toml::from_str::<SegParams>("connectivity = 7").is_err());
        assert!(toml::from_str::<SegParams>("unknown_key = 1").is_err());
    }

    proptest! {
        #[test]
        fn components_partition_foreground(bits in prop::collection::vec(any::<bool>(), 125), conn in 0usize..3) {
            let conn = [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix][conn];
            let dims = [5, 5, 5];
            let m = LesionMask::from_indices(dims, bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i));
            let comps = connected_components(&m, conn);
            let total: usize = comps.iter().map(|c| c.voxel_count()).sum();
            prop_assert_eq!(total, m.voxel_count());
            for (i, a) in comps.iter().enumerate() {
                prop_assert!(a.is_subset_of(&m));
                for b in &comps[i + 1..] {
                    prop_assert_eq!(a.intersection_count(b), 0);
                }
            }
        }

        #[test]
        fn threshold_is_monotone(vals in prop::collection::vec(0.0f32..10.0, 27), t1 in 0.0f64..10.0, dt in 0.0f64..5.0) {
            let v = Volume3D::new([3, 3, 3], [1.0; 3], [0.0; 3], vals, Modality::Pet).unwrap();
            prop_assert!(threshold(&v, t1 + dt).is_subset_of(&threshold(&v, t1)));
        }
    }
}
