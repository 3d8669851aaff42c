//! Dense tensors over the voxel grid and the per-voxel primitives the rest of
//! the crate builds on.
//!
//! All multi-channel grids are stored channel-outer: element `(c, v)` lives at
//! `c * voxels + v`, where `v = (h * W + w) * L + l`.

use crate::error::{Error, Result};

/// Class index reserved for empty voxels.
pub const IGNORE: u16 = u16::MAX;

/// Tolerance on the per-voxel simplex constraint.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Spatial extent of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub l: usize,
}

impl Dims {
    pub fn new(h: usize, w: usize, l: usize) -> Result<Self> {
        if h == 0 || w == 0 || l == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be positive, got {h}x{w}x{l}"
            )));
        }
        Ok(Self { h, w, l })
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.h * self.w * self.l
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, l: usize) -> usize {
        (h * self.w + w) * self.l + l
    }

    #[inline]
    pub fn coords(&self, v: usize) -> (usize, usize, usize) {
        let l = v % self.l;
        let w = (v / self.l) % self.w;
        let h = v / (self.l * self.w);
        (h, w, l)
    }

    /// Neighbour of `v` displaced by `(dh, dw, dl)`, or `None` outside the grid.
    #[inline]
    pub fn offset(&self, v: usize, dh: isize, dw: isize, dl: isize) -> Option<usize> {
        let (h, w, l) = self.coords(v);
        let h = h as isize + dh;
        let w = w as isize + dw;
        let l = l as isize + dl;
        if h < 0 || w < 0 || l < 0 {
            return None;
        }
        let (h, w, l) = (h as usize, w as usize, l as usize);
        if h >= self.h || w >= self.w || l >= self.l {
            return None;
        }
        Some(self.index(h, w, l))
    }
}

/// Class count, feature channels and spatial extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub num_classes: usize,
    pub channels: usize,
    pub dims: Dims,
}

impl GridShape {
    pub fn new(num_classes: usize, channels: usize, h: usize, w: usize, l: usize) -> Result<Self> {
        if num_classes == 0 || channels == 0 {
            return Err(Error::InvalidArgument(
                "class and channel counts must be positive".into(),
            ));
        }
        Ok(Self {
            num_classes,
            channels,
            dims: Dims::new(h, w, l)?,
        })
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims.voxels()
    }
}

fn check_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Real-valued scene features, `C x H x W x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    shape: GridShape,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.channels * shape.voxels()],
        }
    }

    pub fn from_vec(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.channels * shape.voxels() {
            return Err(Error::ShapeMismatch(format!(
                "feature data length {} != {}",
                data.len(),
                shape.channels * shape.voxels()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature grid"));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, v: usize) -> f64 {
        self.data[c * self.shape.voxels() + v]
    }

    #[inline]
    pub fn set(&mut self, c: usize, v: usize, x: f64) {
        let n = self.shape.voxels();
        self.data[c * n + v] = x;
    }
}

/// Per-voxel class distributions, `K x H x W x L`, each voxel on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    shape: GridShape,
    data: Vec<f64>,
}

impl ProbGrid {
    /// Validates range and the per-voxel simplex constraint.
    pub fn from_vec(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        let n = shape.voxels();
        let k = shape.num_classes;
        if data.len() != k * n {
            return Err(Error::ShapeMismatch(format!(
                "probability data length {} != {}",
                data.len(),
                k * n
            )));
        }
        for v in 0..n {
            let mut sum = 0.0;
            for c in 0..k {
                let p = data[c * n + v];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidProbabilities {
                        voxel: v,
                        reason: format!("value {p} outside [0,1]"),
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidProbabilities {
                    voxel: v,
                    reason: format!("sums to {sum}"),
                });
            }
        }
        Ok(Self { shape, data })
    }

    /// Per-voxel softmax of channel-outer logits.
    pub fn from_logits(shape: GridShape, logits: &[f64]) -> Result<Self> {
        let n = shape.voxels();
        let k = shape.num_classes;
        if logits.len() != k * n {
            return Err(Error::ShapeMismatch(format!(
                "logit length {} != {}",
                logits.len(),
                k * n
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        let mut data = vec![0.0; k * n];
        let mut row = vec![0.0; k];
        for v in 0..n {
            for c in 0..k {
                row[c] = logits[c * n + v];
            }
            softmax_in_place(&mut row);
            for c in 0..k {
                data[c * n + v] = row[c];
            }
        }
        Ok(Self { shape, data })
    }

    pub fn uniform(shape: GridShape) -> Self {
        let k = shape.num_classes;
        Self {
            shape,
            data: vec![1.0 / k as f64; k * shape.voxels()],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn dims(&self) -> Dims {
        self.shape.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, k: usize, v: usize) -> f64 {
        self.data[k * self.shape.voxels() + v]
    }

    /// Copies the distribution at voxel `v` into `out`.
    pub fn voxel_into(&self, v: usize, out: &mut [f64]) {
        let n = self.shape.voxels();
        for (k, o) in out.iter_mut().enumerate().take(self.shape.num_classes) {
            *o = self.data[k * n + v];
        }
    }
}

/// Numerically stable softmax of a single row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Hard per-voxel labels; `IGNORE` marks empty voxels.
///
/// Also used for hard predictions (argmax outputs), which carry no `IGNORE`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelGrid {
    shape: GridShape,
    labels: Vec<u16>,
}

impl LabelGrid {
    pub fn from_vec(shape: GridShape, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != shape.voxels() {
            return Err(Error::ShapeMismatch(format!(
                "label length {} != {}",
                labels.len(),
                shape.voxels()
            )));
        }
        if let Some(bad) = labels
            .iter()
            .find(|&&c| c != IGNORE && c as usize >= shape.num_classes)
        {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for K={}",
                shape.num_classes
            )));
        }
        Ok(Self { shape, labels })
    }

    pub fn ignored(shape: GridShape) -> Self {
        Self {
            shape,
            labels: vec![IGNORE; shape.voxels()],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn dims(&self) -> Dims {
        self.shape.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, v: usize) -> u16 {
        self.labels[v]
    }

    #[inline]
    pub fn set(&mut self, v: usize, c: u16) {
        self.labels[v] = c;
    }

    /// Mask of voxels carrying a real label.
    pub fn labeled_mask(&self) -> BinaryMask {
        BinaryMask {
            dims: self.shape.dims,
            bits: self.labels.iter().map(|&c| c != IGNORE).collect(),
        }
    }

    /// One-hot view as a probability grid; `IGNORE` voxels become uniform.
    pub fn to_one_hot(&self) -> ProbGrid {
        let n = self.shape.voxels();
        let k = self.shape.num_classes;
        let mut data = vec![0.0; k * n];
        for (v, &c) in self.labels.iter().enumerate() {
            if c == IGNORE {
                for kk in 0..k {
                    data[kk * n + v] = 1.0 / k as f64;
                }
            } else {
                data[c as usize * n + v] = 1.0;
            }
        }
        ProbGrid {
            shape: self.shape,
            data,
        }
    }
}

/// Predictions with mask-token rows spliced in; no simplex constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPredGrid {
    shape: GridShape,
    data: Vec<f64>,
}

impl MaskedPredGrid {
    pub fn from_vec(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.num_classes * shape.voxels() {
            return Err(Error::ShapeMismatch("masked prediction length".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("masked prediction grid"));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, k: usize, v: usize) -> f64 {
        self.data[k * self.shape.voxels() + v]
    }
}

/// One bit per voxel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    dims: Dims,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![false; dims.voxels()],
        }
    }

    pub fn ones(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![true; dims.voxels()],
        }
    }

    pub fn from_vec(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.voxels() {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} != {}",
                bits.len(),
                dims.voxels()
            )));
        }
        Ok(Self { dims, bits })
    }

    pub fn from_fn(dims: Dims, f: impl FnMut(usize) -> bool) -> Self {
        Self {
            dims,
            bits: (0..dims.voxels()).map(f).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, v: usize) -> bool {
        self.bits[v]
    }

    #[inline]
    pub fn set(&mut self, v: usize, b: bool) {
        self.bits[v] = b;
    }

    /// Indices of set voxels in ascending order.
    pub fn iter_set(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(v, &b)| b.then_some(v))
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a || b)
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a && b)
    }

    pub fn not(&self) -> Self {
        Self {
            dims: self.dims,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        check_dims(self.dims, other.dims, "mask operands")?;
        Ok(Self {
            dims: self.dims,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

pub fn mask_or(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.or(b)
}

pub fn mask_and(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.and(b)
}

pub fn mask_not(a: &BinaryMask) -> BinaryMask {
    a.not()
}

pub fn mask_count(a: &BinaryMask) -> usize {
    a.count()
}

/// Hard prediction per voxel; ties go to the lowest class index.
pub fn argmax_classes(p: &ProbGrid) -> LabelGrid {
    let n = p.shape.voxels();
    let k = p.shape.num_classes;
    let labels = (0..n)
        .map(|v| {
            let mut best = 0;
            let mut best_p = p.data[v];
            for c in 1..k {
                let x = p.data[c * n + v];
                if x > best_p {
                    best = c;
                    best_p = x;
                }
            }
            best as u16
        })
        .collect();
    LabelGrid {
        shape: p.shape,
        labels,
    }
}

/// Maximum class probability per voxel.
pub fn confidence(p: &ProbGrid) -> Vec<f64> {
    let n = p.shape.voxels();
    let k = p.shape.num_classes;
    (0..n)
        .map(|v| (1..k).fold(p.data[v], |m, c| m.max(p.data[c * n + v])))
        .collect()
}

/// Nearest-rank `(100 - kappa)`-th percentile.
///
/// Sorts ascending and returns the element at 1-based rank
/// `ceil((100 - kappa) / 100 * n)`, clamped to `[1, n]`.
pub fn percentile_threshold(values: &[f64], kappa: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile of an empty list"));
    }
    if !(kappa > 0.0 && kappa < 100.0) {
        return Err(Error::InvalidArgument(format!(
            "kappa must lie in (0, 100), got {kappa}"
        )));
    }
    let n = values.len();
    // Multiply before dividing so integral ranks stay exact.
    let raw = (100.0 - kappa) * n as f64 / 100.0;
    let rank = ((raw - 1e-9).ceil() as usize).clamp(1, n);
    let mut buf = values.to_vec();
    let (_, nth, _) = buf.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*nth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(k: usize, h: usize, w: usize, l: usize) -> GridShape {
        GridShape::new(k, 1, h, w, l).unwrap()
    }

    fn random_probs(rng: &mut ChaCha8Rng, s: GridShape) -> ProbGrid {
        let logits: Vec<f64> = (0..s.num_classes * s.voxels())
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        ProbGrid::from_logits(s, &logits).unwrap()
    }

    #[test]
    fn argmax_unique_and_tie() {
        let s = shape(3, 1, 1, 2);
        let p = ProbGrid::from_vec(s, vec![0.7, 0.5, 0.2, 0.5, 0.1, 0.0]).unwrap();
        assert_eq!(argmax_classes(&p).labels(), &[0, 0]);
    }

    #[test]
    fn argmax_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = shape(3, 2, 2, 1);
        let p = random_probs(&mut rng, s);
        let hard = argmax_classes(&p);
        for v in 0..4 {
            let row: Vec<f64> = (0..3).map(|k| p.get(k, v)).collect();
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let first = row.iter().position(|&x| x == max).unwrap();
            assert_eq!(hard.get(v) as usize, first);
        }
    }

    #[test]
    fn confidence_examples() {
        let s = shape(4, 1, 1, 2);
        let p = ProbGrid::from_vec(s, vec![1.0, 0.25, 0.0, 0.25, 0.0, 0.25, 0.0, 0.25]).unwrap();
        assert_eq!(confidence(&p), vec![1.0, 0.25]);
        let s = shape(3, 1, 1, 1);
        let p = ProbGrid::from_vec(s, vec![0.1, 0.6, 0.3]).unwrap();
        assert_eq!(confidence(&p), vec![0.6]);
    }

    #[test]
    fn prob_grid_rejects_off_simplex() {
        let s = shape(2, 1, 1, 1);
        assert!(ProbGrid::from_vec(s, vec![0.5, 0.5 + 1e-8]).is_err());
        assert!(ProbGrid::from_vec(s, vec![1.2, -0.2]).is_err());
        assert!(ProbGrid::from_vec(s, vec![0.5, 0.5 + 1e-10]).is_ok());
    }

    #[test]
    fn one_hot_argmax_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_probs(&mut rng, shape(5, 3, 2, 2));
        let once = argmax_classes(&p);
        let twice = argmax_classes(&once.to_one_hot());
        assert_eq!(once, twice);
    }

    #[test]
    fn percentile_examples() {
        let vals: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(percentile_threshold(&vals, 40.0).unwrap(), 0.6);
        assert_eq!(percentile_threshold(&[0.42], 40.0).unwrap(), 0.42);
        assert_eq!(percentile_threshold(&[0.42], 99.0).unwrap(), 0.42);
        assert!(percentile_threshold(&[], 40.0).is_err());
        assert!(percentile_threshold(&vals, 0.0).is_err());
    }

    #[test]
    fn percentile_of_uniform_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let vals: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let t = percentile_threshold(&vals, 40.0).unwrap();
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(t, sorted[599]);
        assert!((t - 0.6).abs() < 0.03, "{t}");
    }

    #[test]
    fn mask_laws() {
        let d = Dims::new(4, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = BinaryMask::from_fn(d, |_| rng.random_bool(0.4));
        let b = BinaryMask::from_fn(d, |_| rng.random_bool(0.6));
        assert_eq!(a.or(&BinaryMask::zeros(d)).unwrap(), a);
        assert_eq!(a.or(&a.not()).unwrap(), BinaryMask::ones(d));
        let union = mask_count(&mask_or(&a, &b).unwrap());
        let inter = mask_count(&mask_and(&a, &b).unwrap());
        assert_eq!(union, a.count() + b.count() - inter);
        let other = BinaryMask::zeros(Dims::new(2, 2, 2).unwrap());
        assert!(matches!(a.or(&other), Err(Error::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn de_morgan(bits_a in proptest::collection::vec(any::<bool>(), 24),
                     bits_b in proptest::collection::vec(any::<bool>(), 24)) {
            let d = Dims::new(2, 3, 4).unwrap();
            let a = BinaryMask::from_vec(d, bits_a).unwrap();
            let b = BinaryMask::from_vec(d, bits_b).unwrap();
            prop_assert_eq!(a.or(&b).unwrap().not(), a.not().and(&b.not()).unwrap());
            prop_assert_eq!(a.and(&b).unwrap().not(), a.not().or(&b.not()).unwrap());
        }

        #[test]
        fn percentile_monotone_in_rank(vals in proptest::collection::vec(0.0f64..1.0, 1..50),
                                       k1 in 1.0f64..99.0, k2 in 1.0f64..99.0) {
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            // larger kappa -> lower percentile
            prop_assert!(percentile_threshold(&vals, hi).unwrap() <= percentile_threshold(&vals, lo).unwrap());
        }
    }
}
