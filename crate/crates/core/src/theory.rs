//! Error accounting for refinement, the improvement condition, benefit-region
//! sweeps, conditional entropies and mIoU.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, LabelGrid, IGNORE};

/// Integer counts over the counted voxels (occupied, labeled) of one or more
/// scenes. `E` is the unreliable region, `C` its complement.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccountCounts {
    pub n_total: u64,
    pub n_e: u64,
    pub n_c: u64,
    pub n_e_err: u64,
    pub n_e_cor: u64,
    /// Teacher-correct voxels of `C`.
    pub n_c_cor: u64,
    pub n_fixed: u64,
    pub n_broken: u64,
}

impl AccountCounts {
    pub fn merge(self, o: Self) -> Self {
        Self {
            n_total: self.n_total + o.n_total,
            n_e: self.n_e + o.n_e,
            n_c: self.n_c + o.n_c,
            n_e_err: self.n_e_err + o.n_e_err,
            n_e_cor: self.n_e_cor + o.n_e_cor,
            n_c_cor: self.n_c_cor + o.n_c_cor,
            n_fixed: self.n_fixed + o.n_fixed,
            n_broken: self.n_broken + o.n_broken,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorAccounting {
    pub counts: AccountCounts,
    pub pi: f64,
    pub rho: f64,
    pub q: f64,
    pub r: f64,
    /// `false` when `q` (or `r`) defaulted to 0 on an empty denominator.
    pub q_defined: bool,
    pub r_defined: bool,
    pub zeta: Option<f64>,
    pub delta: f64,
    pub acc_base: f64,
    pub acc_repl: f64,
}

impl ErrorAccounting {
    pub fn from_counts(c: AccountCounts) -> Result<Self> {
        if c.n_total == 0 {
            return Err(Error::Empty("no counted voxels for accounting"));
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let n = c.n_total as f64;
        let pi = ratio(c.n_e_err, c.n_e);
        let rho = c.n_e as f64 / n;
        let q = ratio(c.n_fixed, c.n_e_err);
        let r = ratio(c.n_broken, c.n_e_cor);
        let base = c.n_c_cor + c.n_e_cor;
        Ok(Self {
            counts: c,
            pi,
            rho,
            q,
            r,
            q_defined: c.n_e_err > 0,
            r_defined: c.n_e_cor > 0,
            zeta: if c.n_e > 0 { zeta(pi, q, r) } else { None },
            delta: delta_closed_form(pi, rho, q, r),
            acc_base: base as f64 / n,
            acc_repl: (base + c.n_fixed - c.n_broken) as f64 / n,
        })
    }
}

fn check_operands(grids: &[&LabelGrid], m: &BinaryMask, occupancy: &BinaryMask) -> Result<()> {
    let dims = m.dims();
    if occupancy.dims() != dims || grids.iter().any(|g| g.dims() != dims) {
        return Err(Error::ShapeMismatch("accounting operands".into()));
    }
    Ok(())
}

fn counted(y: &LabelGrid, occupancy: &BinaryMask, v: usize) -> bool {
    occupancy.get(v) && y.get(v) != IGNORE
}

/// Counts for one scene; voxels are those occupied with a label.
pub fn account_counts(
    teacher_hard: &LabelGrid,
    refiner_hard: &LabelGrid,
    y: &LabelGrid,
    m: &BinaryMask,
    occupancy: &BinaryMask,
) -> Result<AccountCounts> {
    check_operands(&[teacher_hard, refiner_hard, y], m, occupancy)?;
    let mut c = AccountCounts::default();
    for v in 0..m.dims().voxels() {
        if !counted(y, occupancy, v) {
            continue;
        }
        c.n_total += 1;
        let truth = y.get(v);
        let t_ok = teacher_hard.get(v) == truth;
        if m.get(v) {
            c.n_e += 1;
            let r_ok = refiner_hard.get(v) == truth;
            if t_ok {
                c.n_e_cor += 1;
                c.n_broken += u64::from(!r_ok);
            } else {
                c.n_e_err += 1;
                c.n_fixed += u64::from(r_ok);
            }
        } else {
            c.n_c += 1;
            c.n_c_cor += u64::from(t_ok);
        }
    }
    Ok(c)
}

pub fn account(
    teacher_hard: &LabelGrid,
    refiner_hard: &LabelGrid,
    y: &LabelGrid,
    m: &BinaryMask,
    occupancy: &BinaryMask,
) -> Result<ErrorAccounting> {
    ErrorAccounting::from_counts(account_counts(teacher_hard, refiner_hard, y, m, occupancy)?)
}

/// `π − r/(q+r)`, or `None` when `q + r = 0`.
pub fn zeta(pi: f64, q: f64, r: f64) -> Option<f64> {
    let s = q + r;
    (s > 0.0).then(|| pi - r / s)
}

/// `ρ (π q − (1 − π) r)`.
pub fn delta_closed_form(pi: f64, rho: f64, q: f64, r: f64) -> f64 {
    rho * (pi * q - (1.0 - pi) * r)
}

/// Accuracy change from replacing teacher labels on `m` with refiner labels,
/// by direct counting.
pub fn delta_direct(
    teacher_hard: &LabelGrid,
    refiner_hard: &LabelGrid,
    y: &LabelGrid,
    m: &BinaryMask,
    occupancy: &BinaryMask,
) -> Result<f64> {
    check_operands(&[teacher_hard, refiner_hard, y], m, occupancy)?;
    let (mut n, mut before, mut after) = (0i64, 0i64, 0i64);
    for v in 0..m.dims().voxels() {
        if !counted(y, occupancy, v) {
            continue;
        }
        n += 1;
        let truth = y.get(v);
        before += i64::from(teacher_hard.get(v) == truth);
        let replaced = if m.get(v) { refiner_hard.get(v) } else { teacher_hard.get(v) };
        after += i64::from(replaced == truth);
    }
    if n == 0 {
        return Err(Error::Empty("no counted voxels for accounting"));
    }
    Ok((after - before) as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub q: f64,
    pub r: f64,
    pub zeta: Option<f64>,
    pub benefit: bool,
}

/// `ζ` on the product grid `q_grid × r_grid` (q-major).
pub fn region_sweep(pi: f64, q_grid: &[f64], r_grid: &[f64]) -> Result<Vec<SweepPoint>> {
    let in_unit = |x: &f64| (0.0..=1.0).contains(x);
    if !in_unit(&pi) || !q_grid.iter().all(in_unit) || !r_grid.iter().all(in_unit) {
        return Err(Error::InvalidArgument("sweep rates must lie in [0, 1]".into()));
    }
    let mut out = Vec::with_capacity(q_grid.len() * r_grid.len());
    for &q in q_grid {
        for &r in r_grid {
            let z = zeta(pi, q, r);
            out.push(SweepPoint {
                q,
                r,
                zeta: z,
                benefit: z.is_some_and(|z| z > 0.0),
            });
        }
    }
    Ok(out)
}

/// Points on the `ζ = 0` curve: for every `q` row of a sweep whose benefit
/// flag changes along `r`, the crossing bracketed by the sweep is refined by
/// bisection on `ζ(π, q, ·)`.
pub fn sweep_boundary(pi: f64, q_grid: &[f64], r_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    let sweep = region_sweep(pi, q_grid, r_grid)?;
    let mut out = Vec::new();
    for row in sweep.chunks(r_grid.len().max(1)) {
        for pair in row.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.benefit == b.benefit || a.zeta.is_none() || b.zeta.is_none() {
                continue;
            }
            let q = a.q;
            let f = |r: f64| zeta(pi, q, r).unwrap_or(0.0);
            let (mut lo, mut hi) = (a.r, b.r);
            let lo_pos = f(lo) > 0.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if (f(mid) > 0.0) == lo_pos {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            out.push((q, 0.5 * (lo + hi)));
        }
    }
    Ok(out)
}

/// Least-squares slope of a line through the origin.
pub fn slope_through_origin(points: &[(f64, f64)]) -> Result<f64> {
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    if sxx == 0.0 {
        return Err(Error::Empty("boundary points"));
    }
    Ok(points.iter().map(|p| p.0 * p.1).sum::<f64>() / sxx)
}

/// Empirical joint counts over finite alphabets, indexed `[x][t][y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCounts {
    pub nx: usize,
    pub nt: usize,
    pub ny: usize,
    pub counts: Vec<f64>,
}

impl JointCounts {
    pub fn new(nx: usize, nt: usize, ny: usize, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != nx * nt * ny {
            return Err(Error::ShapeMismatch(format!(
                "{} counts for alphabets {nx}x{nt}x{ny}",
                counts.len()
            )));
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidArgument("counts must be finite and non-negative".into()));
        }
        Ok(Self { nx, nt, ny, counts })
    }

    pub fn get(&self, x: usize, t: usize, y: usize) -> f64 {
        self.counts[(x * self.nt + t) * self.ny + y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyReport {
    pub h_y_given_x: f64,
    pub h_y_given_xt: f64,
    pub i_y_t_given_x: f64,
}

/// `H(Y|X)`, `H(Y|X,T)` and their difference, in nats.
pub fn conditional_entropy(j: &JointCounts) -> Result<EntropyReport> {
    let total: f64 = j.counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::Empty("joint counts sum to zero"));
    }
    let mut h_xt = 0.0;
    let mut h_x = 0.0;
    let mut xy = vec![0.0; j.ny];
    for x in 0..j.nx {
        xy.fill(0.0);
        for t in 0..j.nt {
            let n_xt: f64 = (0..j.ny).map(|y| j.get(x, t, y)).sum();
            for (y, acc) in xy.iter_mut().enumerate() {
                let c = j.get(x, t, y);
                *acc += c;
                if c > 0.0 {
                    h_xt -= c * (c / n_xt).ln();
                }
            }
        }
        let n_x: f64 = xy.iter().sum();
        for &c in &xy {
            if c > 0.0 {
                h_x -= c * (c / n_x).ln();
            }
        }
    }
    let (h_x, h_xt) = (h_x / total, h_xt / total);
    Ok(EntropyReport {
        h_y_given_x: h_x,
        h_y_given_xt: h_xt,
        i_y_t_given_x: h_x - h_xt,
    })
}

/// Per-class confusion counts, accumulable across scenes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    /// Adds the occupied, labeled voxels of one scene.
    pub fn add(&mut self, pred: &LabelGrid, y: &LabelGrid, occupancy: &BinaryMask) -> Result<()> {
        if pred.dims() != y.dims() || occupancy.dims() != y.dims() {
            return Err(Error::ShapeMismatch("IoU operands".into()));
        }
        let k = self.tp.len();
        for v in occupancy.iter_set() {
            let t = y.get(v);
            if t == IGNORE {
                continue;
            }
            let p = pred.get(v);
            if t as usize >= k || p as usize >= k {
                return Err(Error::InvalidArgument(format!("class out of range at voxel {v}")));
            }
            if p == t {
                self.tp[t as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[t as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> Result<IouReport> {
        let per_class: Vec<Option<f64>> = (0..self.tp.len())
            .map(|k| {
                let d = self.tp[k] + self.fp[k] + self.fn_[k];
                (d > 0).then(|| self.tp[k] as f64 / d as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Empty("no labeled voxels for IoU"));
        }
        Ok(IouReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

pub fn mean_iou(pred: &LabelGrid, y: &LabelGrid, occupancy: &BinaryMask, num_classes: usize) -> Result<IouReport> {
    let mut c = IouCounts::new(num_classes);
    c.add(pred, y, occupancy)?;
    c.report()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

pub const ACCOUNTING_HEADER: &str = "scene_id,pi,rho,q,r,zeta,delta,acc_base,acc_repl";

pub fn accounting_csv(rows: &[(usize, ErrorAccounting)]) -> String {
    let mut s = String::from(ACCOUNTING_HEADER);
    s.push('\n');
    for (id, a) in rows {
        let _ = writeln!(
            s,
            "{id},{},{},{},{},{},{},{},{}",
            a.pi,
            a.rho,
            a.q,
            a.r,
            fmt_opt(a.zeta),
            a.delta,
            a.acc_base,
            a.acc_repl
        );
    }
    s
}

pub const SWEEP_HEADER: &str = "q,r,zeta,benefit";

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.q, p.r, fmt_opt(p.zeta), u8::from(p.benefit));
    }
    s
}

/// Mean of the defined per-scene `ζ` values.
pub fn mean_scene_zeta(rows: &[ErrorAccounting]) -> Option<f64> {
    let zs: Vec<f64> = rows.iter().filter_map(|a| a.zeta).collect();
    (!zs.is_empty()).then(|| zs.iter().sum::<f64>() / zs.len() as f64)
}

/// Accounting from counts pooled over scenes.
pub fn pooled(rows: &[ErrorAccounting]) -> Result<ErrorAccounting> {
    let c = rows
        .iter()
        .fold(AccountCounts::default(), |acc, a| acc.merge(a.counts));
    ErrorAccounting::from_counts(c)
}
