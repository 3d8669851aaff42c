//! Training objectives with gradients taken with respect to the pre-softmax
//! logits.
//!
//! Every loss receives the softmax output `p` and returns `d loss / d logits`,
//! obtained by pushing `d loss / d p` through the softmax Jacobian. Averages
//! run over active voxels that carry a label; everything else contributes
//! neither value nor gradient.

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Dims, LabelGrid, ProbGrid, IGNORE};

/// Floor applied to every argument of `log`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Loss value with its gradient over the logits, laid out like the
/// probability grid (`K x H x W x L`, channel-outer).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValue {
    pub fn zero(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }

    /// `self + weight * other`.
    pub fn add_scaled(mut self, other: &LossValue, weight: f64) -> Self {
        self.value += weight * other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += weight * o;
        }
        self
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.value *= s;
        self.grad.iter_mut().for_each(|g| *g *= s);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Lovász-Softmax coefficient.
    pub lambda_ls: f64,
    /// Stand-in for `log 0` in the reverse cross-entropy.
    pub sce_clamp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ls: 3.0,
            sce_clamp: -6.0,
        }
    }
}

/// Per-voxel class sets (used for implausible classes), stored as a
/// `K x H x W x L` membership bitmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSets {
    num_classes: usize,
    dims: Dims,
    member: Vec<bool>,
}

impl ClassSets {
    pub fn empty(num_classes: usize, dims: Dims) -> Self {
        Self {
            num_classes,
            dims,
            member: vec![false; num_classes * dims.voxels()],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn contains(&self, k: usize, v: usize) -> bool {
        self.member[k * self.dims.voxels() + v]
    }

    pub fn insert(&mut self, k: usize, v: usize) {
        let n = self.dims.voxels();
        self.member[k * n + v] = true;
    }

    pub fn len_at(&self, v: usize) -> usize {
        (0..self.num_classes).filter(|&k| self.contains(k, v)).count()
    }

    pub fn classes_at(&self, v: usize) -> Vec<usize> {
        (0..self.num_classes).filter(|&k| self.contains(k, v)).collect()
    }
}

fn check_pair(p: &ProbGrid, y: &LabelGrid, active: &BinaryMask) -> Result<()> {
    if p.shape().dims != y.dims() || p.dims() != active.dims() {
        return Err(Error::ShapeMismatch("loss operands".into()));
    }
    if p.shape().num_classes != y.shape().num_classes {
        return Err(Error::ShapeMismatch("class counts differ".into()));
    }
    Ok(())
}

/// Active voxels that also carry a label, in ascending order.
fn counted_voxels(y: &LabelGrid, active: &BinaryMask) -> Vec<usize> {
    active.iter_set().filter(|&v| y.get(v) != IGNORE).collect()
}

/// Pushes `d loss / d p` at voxel `v` through the softmax into `grad`.
fn softmax_backward(p: &ProbGrid, v: usize, dp: &[f64], grad: &mut [f64]) {
    let n = p.shape().voxels();
    let dot: f64 = dp.iter().enumerate().map(|(k, g)| p.get(k, v) * g).sum();
    for (k, g) in dp.iter().enumerate() {
        grad[k * n + v] += p.get(k, v) * (g - dot);
    }
}

/// Mean of `-log p[y]` over counted voxels.
pub fn cross_entropy(p: &ProbGrid, y: &LabelGrid, active: &BinaryMask) -> Result<LossValue> {
    check_pair(p, y, active)?;
    let k = p.shape().num_classes;
    let mut out = LossValue::zero(p.data().len());
    let voxels = counted_voxels(y, active);
    if voxels.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / voxels.len() as f64;
    let mut dp = vec![0.0; k];
    for &v in &voxels {
        let c = y.get(v) as usize;
        let pc = p.get(c, v);
        out.value += -pc.max(LOG_FLOOR).ln();
        dp.fill(0.0);
        if pc > LOG_FLOOR {
            dp[c] = -scale / pc;
        }
        softmax_backward(p, v, &dp, &mut out.grad);
    }
    out.value *= scale;
    Ok(out)
}

/// One-versus-rest errors for class `k`, listed over counted voxels in
/// ascending voxel order.
pub fn one_vs_rest_errors(
    p: &ProbGrid,
    y: &LabelGrid,
    k: usize,
    active: &BinaryMask,
) -> Result<Vec<f64>> {
    check_pair(p, y, active)?;
    if k >= p.shape().num_classes {
        return Err(Error::InvalidArgument(format!("class {k} out of range")));
    }
    Ok(counted_voxels(y, active)
        .into_iter()
        .map(|v| {
            let pk = p.get(k, v);
            if y.get(v) as usize == k {
                1.0 - pk
            } else {
                pk
            }
        })
        .collect())
}

/// Lovász extension of the Jaccard loss at `errors`, with its gradient.
///
/// `foreground[i]` says whether element `i` belongs to the ground-truth set.
/// Errors are sorted descending with a stable sort, so ties keep element order.
/// The returned gradient is with respect to `errors` (the Jaccard increments
/// are held constant, which is the Lovász subgradient).
///
/// The value is summed over level sets, `Σ_j (e_(j) − e_(j+1)) J_j`, so that a
/// binary error vector reproduces the discrete loss `|M| / |G ∪ M|` bit for bit.
pub fn lovasz_extension(errors: &[f64], foreground: &[bool]) -> (f64, Vec<f64>) {
    debug_assert_eq!(errors.len(), foreground.len());
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let gts = foreground.iter().filter(|&&f| f).count() as f64;

    let mut grad = vec![0.0; n];
    let mut value = 0.0;
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev_jacc = 0.0;
    for (j, &i) in order.iter().enumerate() {
        if foreground[i] {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        let jacc = if union > 0.0 { (union - inter) / union } else { 0.0 };
        grad[i] = jacc - prev_jacc;
        prev_jacc = jacc;
        let next = order.get(j + 1).map_or(0.0, |&k| errors[k]);
        let step = errors[i] - next;
        if step != 0.0 {
            value += step * jacc;
        }
    }
    (value, grad)
}

/// Multiclass Lovász-Softmax averaged over classes present in the counted
/// ground truth.
pub fn lovasz_softmax(p: &ProbGrid, y: &LabelGrid, active: &BinaryMask) -> Result<LossValue> {
    check_pair(p, y, active)?;
    let num_classes = p.shape().num_classes;
    let n = p.shape().voxels();
    let mut out = LossValue::zero(p.data().len());
    let voxels = counted_voxels(y, active);
    let present: Vec<usize> = (0..num_classes)
        .filter(|&k| voxels.iter().any(|&v| y.get(v) as usize == k))
        .collect();
    if present.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / present.len() as f64;
    // d loss / d p, accumulated over classes before the softmax pass.
    let mut dp_all = vec![0.0; num_classes * n];
    let mut errors = Vec::with_capacity(voxels.len());
    let mut fg = Vec::with_capacity(voxels.len());
    for &k in &present {
        errors.clear();
        fg.clear();
        for &v in &voxels {
            let is_fg = y.get(v) as usize == k;
            let pk = p.get(k, v);
            errors.push(if is_fg { 1.0 - pk } else { pk });
            fg.push(is_fg);
        }
        let (value, grad) = lovasz_extension(&errors, &fg);
        out.value += value;
        for (i, &v) in voxels.iter().enumerate() {
            let de_dp = if fg[i] { -1.0 } else { 1.0 };
            dp_all[k * n + v] += scale * grad[i] * de_dp;
        }
    }
    out.value *= scale;
    let mut dp = vec![0.0; num_classes];
    for &v in &voxels {
        for (k, d) in dp.iter_mut().enumerate() {
            *d = dp_all[k * n + v];
        }
        softmax_backward(p, v, &dp, &mut out.grad);
    }
    Ok(out)
}

/// Cross-entropy plus `lambda_ls` times Lovász-Softmax over the same voxels.
pub fn supervised_objective(
    p: &ProbGrid,
    y: &LabelGrid,
    active: &BinaryMask,
    w: &LossWeights,
) -> Result<LossValue> {
    let ce = cross_entropy(p, y, active)?;
    if w.lambda_ls == 0.0 {
        return Ok(ce);
    }
    let ls = lovasz_softmax(p, y, active)?;
    Ok(ce.add_scaled(&ls, w.lambda_ls))
}

/// Mean over active voxels of the mean over implausible classes of
/// `-log(1 - q_hat[k])`.
pub fn negative_learning_loss(
    q_hat: &ProbGrid,
    implausible: &ClassSets,
    active: &BinaryMask,
) -> Result<LossValue> {
    if q_hat.dims() != implausible.dims()
        || q_hat.dims() != active.dims()
        || q_hat.shape().num_classes != implausible.num_classes()
    {
        return Err(Error::ShapeMismatch("negative learning operands".into()));
    }
    let k = q_hat.shape().num_classes;
    let mut out = LossValue::zero(q_hat.data().len());
    let voxels: Vec<usize> = active.iter_set().collect();
    if voxels.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / voxels.len() as f64;
    let mut dp = vec![0.0; k];
    for &v in &voxels {
        let set = implausible.classes_at(v);
        if set.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "empty implausible set at active voxel {v}"
            )));
        }
        let inner = scale / set.len() as f64;
        dp.fill(0.0);
        let mut sum = 0.0;
        for &c in &set {
            let comp = 1.0 - q_hat.get(c, v);
            sum += -comp.max(LOG_FLOOR).ln();
            if comp > LOG_FLOOR {
                dp[c] = inner / comp;
            }
        }
        out.value += sum / set.len() as f64;
        softmax_backward(q_hat, v, &dp, &mut out.grad);
    }
    out.value *= scale;
    Ok(out)
}

/// `½ (CE(p, ỹ) + CE(ỹ, p))` with `log 0` in the reverse direction replaced by
/// `clamp` (one-hot targets make the reverse term `-clamp * Σ_{k≠ỹ} p_k`).
pub fn symmetric_cross_entropy(
    p: &ProbGrid,
    y_tilde: &LabelGrid,
    active: &BinaryMask,
    clamp: f64,
) -> Result<LossValue> {
    let forward = cross_entropy(p, y_tilde, active)?;
    let reverse = reverse_cross_entropy(p, y_tilde, active, clamp)?;
    Ok(forward.add_scaled(&reverse, 1.0).scaled(0.5))
}

/// `CE(ỹ, p) = -mean Σ_k p_k log ỹ_k` for one-hot `ỹ`, with `log 0 := clamp`.
pub fn reverse_cross_entropy(
    p: &ProbGrid,
    y: &LabelGrid,
    active: &BinaryMask,
    clamp: f64,
) -> Result<LossValue> {
    check_pair(p, y, active)?;
    let k = p.shape().num_classes;
    let mut out = LossValue::zero(p.data().len());
    let voxels = counted_voxels(y, active);
    if voxels.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / voxels.len() as f64;
    let mut dp = vec![0.0; k];
    for &v in &voxels {
        let c = y.get(v) as usize;
        for (kk, d) in dp.iter_mut().enumerate() {
            if kk == c {
                *d = 0.0;
            } else {
                out.value += -clamp * p.get(kk, v);
                *d = -clamp * scale;
            }
        }
        softmax_backward(p, v, &dp, &mut out.grad);
    }
    out.value *= scale;
    Ok(out)
}

/// Supervised objective restricted to `region` (intersected with labeled
/// voxels).
pub fn refiner_masked_supervised(
    q_hat: &ProbGrid,
    y: &LabelGrid,
    region: &BinaryMask,
    w: &LossWeights,
) -> Result<LossValue> {
    supervised_objective(q_hat, y, region, w)
}

/// Symmetric cross-entropy plus `lambda_ls` times Lovász-Softmax against
/// pseudo-labels (or a mixed target).
pub fn student_unlabeled_objective(
    p: &ProbGrid,
    y_tilde: &LabelGrid,
    active: &BinaryMask,
    w: &LossWeights,
) -> Result<LossValue> {
    let sce = symmetric_cross_entropy(p, y_tilde, active, w.sce_clamp)?;
    if w.lambda_ls == 0.0 {
        return Ok(sce);
    }
    let ls = lovasz_softmax(p, y_tilde, active)?;
    Ok(sce.add_scaled(&ls, w.lambda_ls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(k: usize, h: usize, w: usize, l: usize) -> GridShape {
        GridShape::new(k, 1, h, w, l).unwrap()
    }

    fn labels(s: GridShape, v: Vec<u16>) -> LabelGrid {
        LabelGrid::from_vec(s, v).unwrap()
    }

    fn random_case(seed: u64, s: GridShape) -> (Vec<f64>, ProbGrid, LabelGrid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..s.num_classes * s.voxels())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let y: Vec<u16> = (0..s.voxels())
            .map(|_| rng.random_range(0..s.num_classes as u16))
            .collect();
        let p = ProbGrid::from_logits(s, &logits).unwrap();
        (logits, p, labels(s, y))
    }

    fn fd_check<F>(logits: &[f64], s: GridShape, analytic: &[f64], f: F)
    where
        F: Fn(&ProbGrid) -> f64,
    {
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut plus = logits.to_vec();
            let mut minus = logits.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let fp = f(&ProbGrid::from_logits(s, &plus).unwrap());
            let fm = f(&ProbGrid::from_logits(s, &minus).unwrap());
            let num = (fp - fm) / (2.0 * h);
            let denom = num.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (num - analytic[i]).abs() / denom < 1e-4,
                "coord {i}: numeric {num} analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn ce_examples() {
        let s = shape(4, 1, 1, 2);
        let all = BinaryMask::ones(s.dims);
        let y = labels(s, vec![2, 0]);
        let perfect = y.to_one_hot();
        assert_eq!(cross_entropy(&perfect, &y, &all).unwrap().value, 0.0);
        let uni = ProbGrid::uniform(s);
        let l = cross_entropy(&uni, &y, &all).unwrap().value;
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn ce_empty_active_is_zero() {
        let s = shape(3, 2, 1, 1);
        let (_, p, y) = random_case(1, s);
        let l = cross_entropy(&p, &y, &BinaryMask::zeros(s.dims)).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ce_gradient_matches_fd() {
        let s = shape(3, 2, 2, 1);
        let (logits, p, y) = random_case(7, s);
        let all = BinaryMask::ones(s.dims);
        let l = cross_entropy(&p, &y, &all).unwrap();
        fd_check(&logits, s, &l.grad, |q| cross_entropy(q, &y, &all).unwrap().value);
    }

    #[test]
    fn one_vs_rest_examples() {
        let s = shape(2, 1, 1, 2);
        let p = ProbGrid::from_vec(s, vec![0.3, 0.3, 0.7, 0.7]).unwrap();
        let y = labels(s, vec![0, 1]);
        let all = BinaryMask::ones(s.dims);
        let e = one_vs_rest_errors(&p, &y, 0, &all).unwrap();
        assert!((e[0] - 0.7).abs() < 1e-15 && (e[1] - 0.3).abs() < 1e-15);
        let e = one_vs_rest_errors(&y.to_one_hot(), &y, 1, &all).unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
        assert!(one_vs_rest_errors(&p, &y, 2, &all).is_err());
    }

    #[test]
    fn lovasz_binary_vertex() {
        let (value, _) = lovasz_extension(&[0.0, 1.0, 0.0, 1.0], &[true, true, false, false]);
        assert!((value - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lovasz_perfect_is_zero() {
        let s = shape(3, 2, 2, 1);
        let y = labels(s, vec![0, 1, 2, 1]);
        let l = lovasz_softmax(&y.to_one_hot(), &y, &BinaryMask::ones(s.dims)).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn lovasz_gradient_matches_fd() {
        let s = shape(3, 2, 2, 2);
        let (logits, p, y) = random_case(11, s);
        let all = BinaryMask::ones(s.dims);
        let l = lovasz_softmax(&p, &y, &all).unwrap();
        fd_check(&logits, s, &l.grad, |q| lovasz_softmax(q, &y, &all).unwrap().value);
    }

    #[test]
    fn supervised_recomposes() {
        let s = shape(4, 2, 2, 2);
        let (_, p, y) = random_case(2, s);
        let all = BinaryMask::ones(s.dims);
        let w = LossWeights::default();
        let total = supervised_objective(&p, &y, &all, &w).unwrap();
        let ce = cross_entropy(&p, &y, &all).unwrap().value;
        let ls = lovasz_softmax(&p, &y, &all).unwrap().value;
        assert!((total.value - (ce + 3.0 * ls)).abs() < 1e-12);
        let w0 = LossWeights { lambda_ls: 0.0, ..w };
        assert_eq!(supervised_objective(&p, &y, &all, &w0).unwrap().value, ce);
        assert_eq!(
            supervised_objective(&y.to_one_hot(), &y, &all, &w).unwrap().value,
            0.0
        );
    }

    #[test]
    fn negative_learning_examples() {
        let s = shape(4, 1, 1, 2);
        let all = BinaryMask::ones(s.dims);
        let mut sets = ClassSets::empty(4, s.dims);
        sets.insert(3, 0);
        sets.insert(1, 1);
        let l = negative_learning_loss(&ProbGrid::uniform(s), &sets, &all).unwrap();
        assert!((l.value - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((l.value - 0.28768).abs() < 1e-5);
        let y = labels(s, vec![0, 0]);
        let l = negative_learning_loss(&y.to_one_hot(), &sets, &all).unwrap();
        assert_eq!(l.value, 0.0);
        let empty = ClassSets::empty(4, s.dims);
        assert!(negative_learning_loss(&ProbGrid::uniform(s), &empty, &all).is_err());
    }

    #[test]
    fn negative_learning_gradient_matches_fd() {
        let s = shape(4, 2, 2, 1);
        let (logits, p, _) = random_case(21, s);
        let mut sets = ClassSets::empty(4, s.dims);
        for v in 0..4 {
            sets.insert(v % 4, v);
            sets.insert((v + 2) % 4, v);
        }
        let all = BinaryMask::ones(s.dims);
        let l = negative_learning_loss(&p, &sets, &all).unwrap();
        fd_check(&logits, s, &l.grad, |q| {
            negative_learning_loss(q, &sets, &all).unwrap().value
        });
    }

    #[test]
    fn sce_examples() {
        let s = shape(2, 1, 1, 1);
        let all = BinaryMask::ones(s.dims);
        let y = labels(s, vec![1]);
        assert_eq!(
            symmetric_cross_entropy(&y.to_one_hot(), &y, &all, -6.0).unwrap().value,
            0.0
        );
        let l = symmetric_cross_entropy(&ProbGrid::uniform(s), &y, &all, -6.0).unwrap();
        assert!((l.value - 0.5 * (2f64.ln() + 3.0)).abs() < 1e-12);
        assert!((l.value - 1.84657).abs() < 1e-5);
        let l0 = symmetric_cross_entropy(&ProbGrid::uniform(s), &y, &all, 0.0).unwrap();
        assert!((l0.value - 0.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sce_equals_written_order() {
        let s = shape(3, 2, 2, 1);
        let (_, p, y) = random_case(4, s);
        let all = BinaryMask::ones(s.dims);
        let a = -6.0;
        // ½(CE(P,Ỹ) + CE(Ỹ,P)) evaluated from the definitions.
        let mut fwd = 0.0;
        let mut rev = 0.0;
        for v in 0..4 {
            for k in 0..3 {
                let yk = if y.get(v) as usize == k { 1.0f64 } else { 0.0 };
                let pk = p.get(k, v);
                fwd += -yk * pk.ln();
                rev += -pk * if yk > 0.0 { yk.ln() } else { a };
            }
        }
        let expect = 0.5 * (fwd / 4.0 + rev / 4.0);
        let got = symmetric_cross_entropy(&p, &y, &all, a).unwrap().value;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn refiner_region_restriction() {
        let s = shape(3, 2, 2, 2);
        let (_, p, y) = random_case(8, s);
        let w = LossWeights::default();
        let all = BinaryMask::ones(s.dims);
        let full = supervised_objective(&p, &y, &all, &w).unwrap();
        assert_eq!(refiner_masked_supervised(&p, &y, &all, &w).unwrap(), full);
        let none = refiner_masked_supervised(&p, &y, &BinaryMask::zeros(s.dims), &w).unwrap();
        assert_eq!(none.value, 0.0);
        assert!(none.grad.iter().all(|&g| g == 0.0));

        // Half the voxels, compared against the objective on an extracted sub-grid.
        let region = BinaryMask::from_fn(s.dims, |v| v % 2 == 0);
        let sel: Vec<usize> = region.iter_set().collect();
        let sub_shape = shape(3, 1, 1, sel.len());
        let mut sub_p = vec![0.0; 3 * sel.len()];
        for (i, &v) in sel.iter().enumerate() {
            for k in 0..3 {
                sub_p[k * sel.len() + i] = p.get(k, v);
            }
        }
        let sub_p = ProbGrid::from_vec(sub_shape, sub_p).unwrap();
        let sub_y = labels(sub_shape, sel.iter().map(|&v| y.get(v)).collect());
        let expect =
            supervised_objective(&sub_p, &sub_y, &BinaryMask::ones(sub_shape.dims), &w).unwrap();
        let got = refiner_masked_supervised(&p, &y, &region, &w).unwrap();
        assert!((got.value - expect.value).abs() < 1e-14);
    }

    #[test]
    fn student_objective_reductions_and_gradient() {
        let s = shape(3, 2, 2, 1);
        let (logits, p, y) = random_case(13, s);
        let all = BinaryMask::ones(s.dims);
        let w = LossWeights::default();
        assert_eq!(
            student_unlabeled_objective(&y.to_one_hot(), &y, &all, &w).unwrap().value,
            0.0
        );
        let w0 = LossWeights {
            lambda_ls: 0.0,
            sce_clamp: 0.0,
        };
        let half_ce = 0.5 * cross_entropy(&p, &y, &all).unwrap().value;
        let got = student_unlabeled_objective(&p, &y, &all, &w0).unwrap().value;
        assert!((got - half_ce).abs() < 1e-15);
        let l = student_unlabeled_objective(&p, &y, &all, &w).unwrap();
        fd_check(&logits, s, &l.grad, |q| {
            student_unlabeled_objective(q, &y, &all, &w).unwrap().value
        });
    }

    #[test]
    fn masking_locality() {
        let s = shape(3, 2, 2, 1);
        let (mut logits, p, y) = random_case(31, s);
        let active = BinaryMask::from_fn(s.dims, |v| v != 2);
        let w = LossWeights::default();
        let before = supervised_objective(&p, &y, &active, &w).unwrap();
        assert!((0..3).all(|k| before.grad[k * 4 + 2] == 0.0));
        for k in 0..3 {
            logits[k * 4 + 2] += 1.7 * (k as f64 + 1.0);
        }
        let p2 = ProbGrid::from_logits(s, &logits).unwrap();
        let after = supervised_objective(&p2, &y, &active, &w).unwrap();
        assert_eq!(before.value, after.value);
    }

    #[test]
    fn ignore_voxels_are_excluded() {
        let s = shape(2, 1, 1, 3);
        let y = labels(s, vec![0, IGNORE, 1]);
        let p = ProbGrid::uniform(s);
        let l = cross_entropy(&p, &y, &BinaryMask::ones(s.dims)).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15);
        assert!(l.grad[1] == 0.0 && l.grad[4] == 0.0);
    }
}
