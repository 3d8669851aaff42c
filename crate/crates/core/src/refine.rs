//! Error-candidate masks, random masking, implausible classes, inclination
//! mixing and refined pseudo-label composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{
    argmax_classes, confidence, percentile_threshold, BinaryMask, Dims, FeatureGrid, LabelGrid,
    ProbGrid,
};
use crate::losses::ClassSets;
use crate::scenegen::Extent;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityConfig {
    /// Percent; thresholds sit at the `(100 - kappa)`-th percentile.
    pub kappa: f64,
    /// Random masking probability.
    pub sigma: f64,
    pub top_k: usize,
    /// Fraction of voxels taken from the labeled scene when mixing.
    pub mix_ratio: f64,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        Self {
            kappa: 40.0,
            sigma: 0.15,
            top_k: 3,
            mix_ratio: 0.7,
        }
    }
}

impl ReliabilityConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa < 100.0) {
            return Err(Error::Config(format!("kappa {} outside (0, 100)", self.kappa)));
        }
        if !(0.0..1.0).contains(&self.sigma) {
            return Err(Error::Config(format!("sigma {} outside [0, 1)", self.sigma)));
        }
        if self.top_k == 0 || self.top_k >= num_classes {
            return Err(Error::Config(format!(
                "top_k {} must lie in [1, {num_classes})",
                self.top_k
            )));
        }
        if !(self.mix_ratio > 0.0 && self.mix_ratio < 1.0) {
            return Err(Error::Config(format!("mix ratio {} outside (0, 1)", self.mix_ratio)));
        }
        Ok(())
    }
}

/// Occupied voxels that are not reliable. A voxel is reliable when student
/// and teacher agree on the class and both confidences strictly exceed their
/// per-scene percentile thresholds (computed over occupied voxels).
pub fn identify_unreliable(
    p_student: &ProbGrid,
    q_teacher: &ProbGrid,
    occupancy: &BinaryMask,
    cfg: &ReliabilityConfig,
) -> Result<BinaryMask> {
    if p_student.shape() != q_teacher.shape() || p_student.dims() != occupancy.dims() {
        return Err(Error::ShapeMismatch("student, teacher and occupancy".into()));
    }
    let dims = occupancy.dims();
    let occupied: Vec<usize> = occupancy.iter_set().collect();
    if occupied.is_empty() {
        return Ok(BinaryMask::zeros(dims));
    }
    let cs = confidence(p_student);
    let ct = confidence(q_teacher);
    let pick = |c: &[f64]| occupied.iter().map(|&v| c[v]).collect::<Vec<_>>();
    let th_s = percentile_threshold(&pick(&cs), cfg.kappa)?;
    let th_t = percentile_threshold(&pick(&ct), cfg.kappa)?;
    let ys = argmax_classes(p_student);
    let yt = argmax_classes(q_teacher);
    let mut m = BinaryMask::zeros(dims);
    for &v in &occupied {
        let reliable = ys.get(v) == yt.get(v) && cs[v] > th_s && ct[v] > th_t;
        if !reliable {
            m.set(v, true);
        }
    }
    Ok(m)
}

/// I.i.d. Bernoulli(`sigma`) voxel mask from a seeded stream.
pub fn random_mask(dims: Dims, sigma: f64, seed: u64) -> Result<BinaryMask> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(BinaryMask::from_fn(dims, |_| rng.random_bool(sigma)))
}

pub fn combine(m: &BinaryMask, r: &BinaryMask) -> Result<BinaryMask> {
    m.or(r)
}

/// Classes outside the teacher's top `k` at every voxel. Ranking is by
/// descending probability with ties resolved toward the lower index.
pub fn top_k_implausible(q_teacher: &ProbGrid, k: usize) -> Result<ClassSets> {
    let nk = q_teacher.shape().num_classes;
    if k == 0 || k >= nk {
        return Err(Error::InvalidArgument(format!("top_k {k} must lie in [1, {nk})")));
    }
    let dims = q_teacher.dims();
    let mut sets = ClassSets::empty(nk, dims);
    let mut row = vec![0.0; nk];
    let mut order: Vec<usize> = Vec::with_capacity(nk);
    for v in 0..dims.voxels() {
        q_teacher.voxel_into(v, &mut row);
        order.clear();
        order.extend(0..nk);
        // stable sort keeps the lower index first among equal probabilities
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &c in &order[k..] {
            sets.insert(c, v);
        }
    }
    Ok(sets)
}

/// Inclination of every voxel centre seen from `origin`.
pub fn inclinations(dims: Dims, extent: Extent, origin: [f64; 3]) -> Vec<f64> {
    let centre = |i: usize, cells: usize, half: f64| -half + (i as f64 + 0.5) * 2.0 * half / cells as f64;
    (0..dims.voxels())
        .map(|v| {
            let (h, w, l) = dims.coords(v);
            let x = centre(h, dims.h, extent.x) - origin[0];
            let y = centre(w, dims.w, extent.y) - origin[1];
            let z = centre(l, dims.l, extent.z) - origin[2];
            z.atan2((x * x + y * y).sqrt())
        })
        .collect()
}

/// Single-plane inclination selector covering a voxel fraction `r`.
///
/// A seeded coin decides whether the selected (labeled) side lies below or
/// above the plane. The plane sits at a nearest-rank quantile of the voxel
/// inclinations, so voxels tied at the plane can shift the count slightly.
pub fn lasermix_selector(
    dims: Dims,
    extent: Extent,
    origin: [f64; 3],
    r: f64,
    side_seed: u64,
) -> Result<BinaryMask> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidArgument(format!("mix ratio {r} outside (0, 1)")));
    }
    let phi = inclinations(dims, extent, origin);
    let n = phi.len();
    let mut sorted = phi.clone();
    sorted.sort_by(f64::total_cmp);
    let take = ((r * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let below = ChaCha8Rng::seed_from_u64(side_seed).random_bool(0.5);
    if below {
        let th = sorted[take - 1];
        Ok(BinaryMask::from_fn(dims, |v| phi[v] <= th))
    } else if take == n {
        Ok(BinaryMask::ones(dims))
    } else {
        let th = sorted[n - take - 1];
        Ok(BinaryMask::from_fn(dims, |v| phi[v] > th))
    }
}

/// One side of a mix: features, optional labels and occupancy.
#[derive(Debug, Clone, Copy)]
pub struct MixSource<'a> {
    pub features: &'a FeatureGrid,
    pub labels: Option<&'a LabelGrid>,
    pub occupancy: &'a BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    pub features: FeatureGrid,
    pub labels: LabelGrid,
    pub selector: BinaryMask,
    pub occupancy: BinaryMask,
}

/// Splices `labeled` (where `s` is set) with `other` (elsewhere).
///
/// Labels come from `labeled` on `s`; off `s` they come from `other.labels`
/// when present (student mixing with pseudo-labels) and are `IGNORE` when not
/// (refiner mixing).
pub fn mix_scenes(labeled: MixSource<'_>, other: MixSource<'_>, s: &BinaryMask) -> Result<MixResult> {
    let shape = labeled.features.shape();
    let dims = shape.dims;
    let y_i = labeled
        .labels
        .ok_or_else(|| Error::InvalidArgument("labeled side of a mix needs labels".into()))?;
    if other.features.shape() != shape
        || s.dims() != dims
        || labeled.occupancy.dims() != dims
        || other.occupancy.dims() != dims
        || y_i.dims() != dims
        || other.labels.is_some_and(|y| y.dims() != dims)
    {
        return Err(Error::ShapeMismatch("mix operands".into()));
    }
    let n = dims.voxels();
    let mut features = other.features.clone();
    let mut labels = LabelGrid::ignored(y_i.shape());
    let mut occupancy = BinaryMask::zeros(dims);
    for v in 0..n {
        if s.get(v) {
            for c in 0..shape.channels {
                features.set(c, v, labeled.features.get(c, v));
            }
            labels.set(v, y_i.get(v));
            occupancy.set(v, labeled.occupancy.get(v));
        } else {
            if let Some(y_j) = other.labels {
                labels.set(v, y_j.get(v));
            }
            occupancy.set(v, other.occupancy.get(v));
        }
    }
    Ok(MixResult {
        features,
        labels,
        selector: s.clone(),
        occupancy,
    })
}

/// Refined pseudo-labels: refiner argmax on `m`, teacher argmax elsewhere,
/// `IGNORE` on empty voxels.
pub fn compose_pseudo_labels(
    q_teacher: &ProbGrid,
    q_hat: &ProbGrid,
    m: &BinaryMask,
    occupancy: &BinaryMask,
) -> Result<LabelGrid> {
    if q_teacher.shape() != q_hat.shape() || m.dims() != q_teacher.dims() || occupancy.dims() != m.dims() {
        return Err(Error::ShapeMismatch("pseudo-label composition operands".into()));
    }
    let yt = argmax_classes(q_teacher);
    let yr = argmax_classes(q_hat);
    let mut out = LabelGrid::ignored(q_teacher.shape());
    for v in occupancy.iter_set() {
        out.set(v, if m.get(v) { yr.get(v) } else { yt.get(v) });
    }
    Ok(out)
}

/// Teacher argmax on occupied voxels, `IGNORE` elsewhere.
pub fn teacher_pseudo_labels(q_teacher: &ProbGrid, occupancy: &BinaryMask) -> Result<LabelGrid> {
    compose_pseudo_labels(q_teacher, q_teacher, &BinaryMask::zeros(occupancy.dims()), occupancy)
}
