//! Supervised pretraining, joint refiner/student semi-supervised training with
//! an EMA teacher, evaluation and metric logging.

mod config;

pub use config::{Mode, TrainConfig};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{argmax_classes, BinaryMask, GridShape, LabelGrid, ProbGrid};
use crate::losses::{
    negative_learning_loss, refiner_masked_supervised, student_unlabeled_objective,
    supervised_objective, LossValue,
};
use crate::net::{
    backward, ema_update, forward, load_checkpoint, optimizer_step, refine_forward, save_checkpoint,
    Checkpoint, ForwardCache, NetConfig, NetInput, NetParams, OptState,
};
use crate::parallel;
use crate::refine::{
    combine, compose_pseudo_labels, identify_unreliable, lasermix_selector, mix_scenes,
    random_mask, teacher_pseudo_labels, top_k_implausible, MixResult, MixSource,
};
use crate::scenegen::{Dataset, SceneData};
use crate::theory::{account_counts, AccountCounts, ErrorAccounting, IouCounts, IouReport};

pub const STUDENT: &str = "student";
pub const TEACHER: &str = "teacher";
pub const REFINER: &str = "refiner";

/// A dataset split with its voxelized scenes in memory, indexed by scene id.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub dataset: Dataset,
    pub scenes: Vec<SceneData>,
}

impl TrainData {
    pub fn new(dataset: Dataset, scenes: Vec<SceneData>) -> Result<Self> {
        if scenes.len() != dataset.num_scenes || scenes.iter().enumerate().any(|(i, s)| s.id != i) {
            return Err(Error::InvalidArgument("scenes must be indexed by id".into()));
        }
        if let Some(s) = scenes.iter().find(|s| s.features.shape() != dataset.shape) {
            return Err(Error::ShapeMismatch(format!("scene {} shape", s.id)));
        }
        Ok(Self { dataset, scenes })
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let dataset = Dataset::load(manifest)?;
        let scenes = dataset.load_scenes()?;
        Self::new(dataset, scenes)
    }

    pub fn shape(&self) -> GridShape {
        self.dataset.shape
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Labeled => &self.dataset.labeled,
            Split::Unlabeled => &self.dataset.unlabeled,
            Split::Validation => &self.dataset.validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
    Validation,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "validation" | "val" => Ok(Split::Validation),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub student_miou: f64,
    pub teacher_miou: f64,
    pub pl_acc_before: f64,
    pub pl_acc_after: f64,
    pub improvement: f64,
    pub pi: f64,
    pub q: f64,
    pub r: f64,
    pub zeta: Option<f64>,
    pub lr: f64,
}

pub const METRICS_HEADER: &str =
    "step,student_miou,teacher_miou,pl_acc_before,pl_acc_after,improvement,pi,q,r,zeta,lr";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in rows {
        let z = m.zeta.map_or_else(|| "nan".to_string(), |z| z.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.step,
            m.student_miou,
            m.teacher_miou,
            m.pl_acc_before,
            m.pl_acc_after,
            m.improvement,
            m.pi,
            m.q,
            m.r,
            z,
            m.lr
        );
    }
    s
}

/// Per-stream losses of one step. Streams that did not run are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub ssup: f64,
    pub sunl: f64,
    pub smix: f64,
    pub rsup: f64,
    pub runl: f64,
    pub rmix: f64,
}

impl StepLosses {
    pub fn student(&self) -> f64 {
        self.ssup + self.sunl + self.smix
    }

    pub fn refiner(&self) -> f64 {
        self.rsup + self.runl + self.rmix
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub losses: Vec<StepLosses>,
}

/// splitmix64 finalizer over a combined key.
fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// RNG stream tags
const S_INIT_STUDENT: u64 = 1;
const S_INIT_REFINER: u64 = 2;
const S_LABELED: u64 = 3;
const S_UNLABELED: u64 = 4;
const S_MIX: u64 = 5;
const S_MASK: u64 = 6;

fn sample(ids: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(Error::Empty("split has no scenes to sample"));
    }
    if n <= ids.len() {
        Ok(ids.choose_multiple(rng, n).copied().collect())
    } else {
        Ok((0..n).map(|_| *ids.choose(rng).unwrap()).collect())
    }
}

/// Scenes drawn for one step. `mix[m] = (labeled id, index into unlabeled,
/// side seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub mix: Vec<(usize, usize, u64)>,
}

fn scale_into(acc: &mut [f64], g: &[f64], s: f64) {
    for (a, x) in acc.iter_mut().zip(g) {
        *a += s * x;
    }
}

fn finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Training state for the three networks.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub data: &'a TrainData,
    pub student: NetParams,
    pub teacher: NetParams,
    pub refiner: Option<NetParams>,
    pub opt_student: OptState,
    pub opt_refiner: Option<OptState>,
    /// Steps completed.
    pub step: u64,
}

/// Everything the teacher and student produce on one scene before any update.
struct Seen {
    student: ForwardCache,
    teacher: ProbGrid,
}

struct Prepared {
    batch: Batch,
    lab: Vec<Seen>,
    unl: Vec<Seen>,
    mixed: Vec<(MixResult, Seen)>,
}

struct StudentInputs {
    batch: Batch,
    lab: Vec<Seen>,
    unl: Vec<(Seen, LabelGrid)>,
    mixed: Vec<(MixResult, Seen)>,
}

/// Gradients of one step at fixed parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub losses: StepLosses,
    pub student: Vec<f64>,
    pub refiner: Option<Vec<f64>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a TrainData) -> Result<Self> {
        let shape = data.shape();
        cfg.validate(shape.num_classes)?;
        if data.dataset.labeled.is_empty() {
            return Err(Error::Empty("no labeled scenes"));
        }
        if cfg.mode != Mode::SupOnly && data.dataset.unlabeled.is_empty() {
            return Err(Error::Empty("no unlabeled scenes"));
        }
        let seg = NetConfig::segmenter(shape.channels, cfg.hidden, shape.num_classes);
        let student = NetParams::init(seg, mix_seed(cfg.seed, S_INIT_STUDENT, 0));
        let teacher = student.clone();
        let opt_student = Self::opt(&cfg, student.len(), 0);
        let (refiner, opt_refiner) = if cfg.mode == Mode::SemiRepl {
            let rc = NetConfig::refiner(shape.channels, cfg.hidden, shape.num_classes);
            let r = NetParams::init(rc, mix_seed(cfg.seed, S_INIT_REFINER, 0));
            let o = Self::opt(&cfg, r.len(), cfg.warmup_steps());
            (Some(r), Some(o))
        } else {
            (None, None)
        };
        Ok(Self {
            cfg,
            data,
            student,
            teacher,
            refiner,
            opt_student,
            opt_refiner,
            step: 0,
        })
    }

    fn opt(cfg: &TrainConfig, len: usize, offset: u64) -> OptState {
        let mut o = OptState::new(len, cfg.steps).starting_at(offset);
        o.base_lr = cfg.base_lr;
        o.weight_decay = cfg.weight_decay;
        o
    }

    fn scene(&self, id: usize) -> &'a SceneData {
        &self.data.scenes[id]
    }

    pub fn in_warmup(&self) -> bool {
        self.step < self.cfg.warmup_steps()
    }

    /// The scenes used by step `step` (0-based). Each draw has its own RNG
    /// stream, so a labeled-only run never consumes unlabeled randomness.
    pub fn batch(&self, step: u64) -> Result<Batch> {
        let c = &self.cfg;
        let ds = &self.data.dataset;
        let mut rl = ChaCha8Rng::seed_from_u64(mix_seed(c.seed, S_LABELED, step));
        let labeled = sample(&ds.labeled, c.batch_labeled, &mut rl)?;
        if step < c.warmup_steps() {
            return Ok(Batch { labeled, unlabeled: Vec::new(), mix: Vec::new() });
        }
        let mut ru = ChaCha8Rng::seed_from_u64(mix_seed(c.seed, S_UNLABELED, step));
        let unlabeled = sample(&ds.unlabeled, c.batch_unlabeled, &mut ru)?;
        let mut rm = ChaCha8Rng::seed_from_u64(mix_seed(c.seed, S_MIX, step));
        let partners = sample(&ds.labeled, c.batch_mix, &mut rm)?;
        let mix = partners
            .into_iter()
            .enumerate()
            .map(|(m, i)| (i, m % unlabeled.len(), mix_seed(c.seed, S_MIX, step ^ ((m as u64 + 1) << 40))))
            .collect();
        Ok(Batch { labeled, unlabeled, mix })
    }

    fn mask_seed(&self, role: u64, idx: usize) -> u64 {
        mix_seed(self.cfg.seed, S_MASK, (self.step << 16) ^ (role << 8) ^ idx as u64)
    }

    fn see(&self, features: &crate::grid::FeatureGrid, occ: &BinaryMask) -> Result<Seen> {
        let input = NetInput::segmenter(features, occ);
        Ok(Seen {
            student: forward(&self.student, &input)?,
            teacher: forward(&self.teacher, &input)?.into_probs(),
        })
    }

    fn build_mix(&self, i: usize, j: usize, side_seed: u64, pseudo: Option<&LabelGrid>) -> Result<MixResult> {
        let (a, b) = (self.scene(i), self.scene(j));
        let ds = &self.data.dataset;
        let s = lasermix_selector(
            ds.shape.dims,
            ds.extent,
            self.cfg.sensor_origin,
            self.cfg.reliability.mix_ratio,
            side_seed,
        )?;
        mix_scenes(
            MixSource { features: &a.features, labels: Some(&a.labels), occupancy: &a.occupancy },
            MixSource { features: &b.features, labels: pseudo, occupancy: &b.occupancy },
            &s,
        )
    }

    /// Refiner objective and gradient for a prepared step; pure in the
    /// refiner parameters, reading the teacher and student only through the
    /// detached predictions in `lab`, `unl` and `mixed`.
    fn refiner_objective(
        &self,
        refiner: &NetParams,
        batch: &Batch,
        lab: &[Seen],
        unl: &[Seen],
        mixed: &[(MixResult, Seen)],
    ) -> Result<(StepLosses, Vec<f64>)> {
        let rc = &self.cfg.reliability;
        let w = &self.cfg.weights;
        let dims = self.data.shape().dims;
        let mut grad = vec![0.0; refiner.len()];
        let mut out = StepLosses::default();

        let m_tilde = |p: &ProbGrid, q: &ProbGrid, occ: &BinaryMask, role: u64, idx: usize| -> Result<BinaryMask> {
            let m = identify_unreliable(p, q, occ, rc)?;
            combine(&m, &random_mask(dims, rc.sigma, self.mask_seed(role, idx))?)
        };

        let sup: Vec<Result<(f64, Vec<f64>)>> = parallel::map_range(batch.labeled.len(), |n| {
            let sc = self.scene(batch.labeled[n]);
            let seen = &lab[n];
            let mt = m_tilde(seen.student.probs(), &seen.teacher, &sc.occupancy, 0, n)?;
            let region = mt.and(&sc.occupancy)?;
            let cache = refine_forward(refiner, &sc.features, &seen.teacher, &mt, &sc.occupancy)?;
            let l = refiner_masked_supervised(cache.probs(), &sc.labels, &region, w)?;
            Ok((l.value, backward(refiner, &cache, &l.grad)?))
        });
        let s = 1.0 / batch.labeled.len() as f64;
        for r in sup {
            let (v, g) = r?;
            out.rsup += s * v;
            scale_into(&mut grad, &g, s);
        }

        let neg: Vec<Result<(f64, Vec<f64>)>> = parallel::map_range(batch.unlabeled.len(), |n| {
            let sc = self.scene(batch.unlabeled[n]);
            let seen = &unl[n];
            let mt = m_tilde(seen.student.probs(), &seen.teacher, &sc.occupancy, 1, n)?;
            let cache = refine_forward(refiner, &sc.features, &seen.teacher, &mt, &sc.occupancy)?;
            let sets = top_k_implausible(&seen.teacher, rc.top_k)?;
            let l = negative_learning_loss(cache.probs(), &sets, &sc.occupancy)?;
            Ok((l.value, backward(refiner, &cache, &l.grad)?))
        });
        let s = 1.0 / batch.unlabeled.len() as f64;
        for r in neg {
            let (v, g) = r?;
            out.runl += s * v;
            scale_into(&mut grad, &g, s);
        }

        let mix: Vec<Result<(f64, Vec<f64>)>> = parallel::map_range(mixed.len(), |n| {
            let (mr, seen) = &mixed[n];
            let mt = m_tilde(seen.student.probs(), &seen.teacher, &mr.occupancy, 2, n)?;
            let region = mt.and(&mr.selector)?.and(&mr.occupancy)?;
            let cache = refine_forward(refiner, &mr.features, &seen.teacher, &mt, &mr.occupancy)?;
            let l = refiner_masked_supervised(cache.probs(), &mr.labels, &region, w)?;
            Ok((l.value, backward(refiner, &cache, &l.grad)?))
        });
        let s = 1.0 / mixed.len() as f64;
        for r in mix {
            let (v, g) = r?;
            out.rmix += s * v;
            scale_into(&mut grad, &g, s);
        }
        Ok((out, grad))
    }

    /// Pseudo-labels for one unlabeled scene: refined in `semi-repl`, the
    /// teacher argmax otherwise.
    fn pseudo_labels(&self, sc: &SceneData, seen: &Seen) -> Result<LabelGrid> {
        match &self.refiner {
            Some(refiner) => {
                let m = identify_unreliable(seen.student.probs(), &seen.teacher, &sc.occupancy, &self.cfg.reliability)?;
                let q_hat = refine_forward(refiner, &sc.features, &seen.teacher, &m, &sc.occupancy)?.into_probs();
                compose_pseudo_labels(&seen.teacher, &q_hat, &m, &sc.occupancy)
            }
            None => teacher_pseudo_labels(&seen.teacher, &sc.occupancy),
        }
    }

    /// Student objective given fixed targets: one gradient for all three
    /// streams, through the caches gathered before any update.
    fn student_objective(
        &self,
        batch: &Batch,
        lab: &[Seen],
        unl: &[(Seen, LabelGrid)],
        mixed: &[(MixResult, Seen)],
    ) -> Result<(StepLosses, Vec<f64>)> {
        let w = &self.cfg.weights;
        let mut grad = vec![0.0; self.student.len()];
        let mut out = StepLosses::default();
        let run = |cache: &ForwardCache, f: &dyn Fn(&ProbGrid) -> Result<LossValue>| -> Result<(f64, Vec<f64>)> {
            let l = f(cache.probs())?;
            Ok((l.value, backward(&self.student, cache, &l.grad)?))
        };

        let sup = parallel::map_range(batch.labeled.len(), |n| {
            let sc = self.scene(batch.labeled[n]);
            run(&lab[n].student, &|p| supervised_objective(p, &sc.labels, &sc.occupancy, w))
        });
        let s = 1.0 / batch.labeled.len() as f64;
        for r in sup {
            let (v, g) = r?;
            out.ssup += s * v;
            scale_into(&mut grad, &g, s);
        }
        if !unl.is_empty() {
            let un = parallel::map_range(unl.len(), |n| {
                let sc = self.scene(batch.unlabeled[n]);
                let (seen, y) = &unl[n];
                run(&seen.student, &|p| student_unlabeled_objective(p, y, &sc.occupancy, w))
            });
            let s = 1.0 / unl.len() as f64;
            for r in un {
                let (v, g) = r?;
                out.sunl += s * v;
                scale_into(&mut grad, &g, s);
            }
        }
        if !mixed.is_empty() {
            let mx = parallel::map(mixed, |(mr, seen)| {
                run(&seen.student, &|p| student_unlabeled_objective(p, &mr.labels, &mr.occupancy, w))
            });
            let s = 1.0 / mixed.len() as f64;
            for r in mx {
                let (v, g) = r?;
                out.smix += s * v;
                scale_into(&mut grad, &g, s);
            }
        }
        Ok((out, grad))
    }

    fn prepare(&self) -> Result<Prepared> {
        let batch = self.batch(self.step)?;
        let see_all = |ids: &[usize]| -> Result<Vec<Seen>> {
            parallel::map(ids, |&i| {
                let sc = self.scene(i);
                self.see(&sc.features, &sc.occupancy)
            })
            .into_iter()
            .collect()
        };
        let lab = see_all(&batch.labeled)?;
        let unl = see_all(&batch.unlabeled)?;
        // refiner-side mixes: labels only on the selected side
        let mixed = parallel::map(&batch.mix, |&(i, u, side)| {
            let mr = self.build_mix(i, batch.unlabeled[u], side, None)?;
            let seen = self.see(&mr.features, &mr.occupancy)?;
            Ok((mr, seen))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        Ok(Prepared { batch, lab, unl, mixed })
    }

    /// Pseudo-labels for the unlabeled batch and the student-side mixes, which
    /// share features and selector with the refiner mixes.
    fn student_targets(&self, prep: Prepared) -> Result<StudentInputs> {
        let Prepared { batch, lab, unl, mixed } = prep;
        let targets: Vec<LabelGrid> = parallel::map_range(unl.len(), |n| {
            self.pseudo_labels(self.scene(batch.unlabeled[n]), &unl[n])
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let mut student_mixed = Vec::with_capacity(mixed.len());
        for ((mr, seen), &(i, u, side)) in mixed.into_iter().zip(&batch.mix) {
            let with_pl = self.build_mix(i, batch.unlabeled[u], side, Some(&targets[u]))?;
            debug_assert_eq!(with_pl.features, mr.features);
            student_mixed.push((with_pl, seen));
        }
        let unl = unl.into_iter().zip(targets).collect();
        Ok(StudentInputs { batch, lab, unl, mixed: student_mixed })
    }

    /// Losses and gradients of both networks at the current parameters,
    /// without updating anything. The student's targets come from the
    /// current refiner.
    pub fn step_gradients(&self) -> Result<StepGradients> {
        let prep = self.prepare()?;
        let mut losses = StepLosses::default();
        let mut refiner_grad = None;
        if !self.in_warmup() {
            if let Some(r) = &self.refiner {
                let (rl, g) = self.refiner_objective(r, &prep.batch, &prep.lab, &prep.unl, &prep.mixed)?;
                losses = rl;
                refiner_grad = Some(g);
            }
        }
        let si = if self.in_warmup() {
            StudentInputs { batch: prep.batch, lab: prep.lab, unl: Vec::new(), mixed: Vec::new() }
        } else {
            self.student_targets(prep)?
        };
        let (sl, g) = self.student_objective(&si.batch, &si.lab, &si.unl, &si.mixed)?;
        losses.ssup = sl.ssup;
        losses.sunl = sl.sunl;
        losses.smix = sl.smix;
        Ok(StepGradients { losses, student: g, refiner: refiner_grad })
    }

    /// One training iteration: refiner update, pseudo-labels from the updated
    /// refiner, student update, EMA.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        let prep = self.prepare()?;
        let mut losses = StepLosses::default();
        let si = if self.in_warmup() {
            StudentInputs { batch: prep.batch, lab: prep.lab, unl: Vec::new(), mixed: Vec::new() }
        } else {
            if let Some(refiner) = &self.refiner {
                let (rl, g) = self.refiner_objective(refiner, &prep.batch, &prep.lab, &prep.unl, &prep.mixed)?;
                finite(rl.refiner(), "refiner loss")?;
                let mut refiner = refiner.clone();
                optimizer_step(&mut refiner, &g, self.opt_refiner.as_mut().expect("refiner optimizer"))?;
                self.refiner = Some(refiner);
                losses = rl;
            }
            self.student_targets(prep)?
        };
        let (sl, g) = self.student_objective(&si.batch, &si.lab, &si.unl, &si.mixed)?;
        finite(sl.student(), "student loss")?;
        optimizer_step(&mut self.student, &g, &mut self.opt_student)?;
        ema_update(&mut self.teacher, &self.student, self.cfg.alpha)?;
        losses.ssup = sl.ssup;
        losses.sunl = sl.sunl;
        losses.smix = sl.smix;
        self.step += 1;
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push(STUDENT, self.student.clone(), Some(self.opt_student.clone()));
        c.push(TEACHER, self.teacher.clone(), None);
        if let (Some(r), Some(o)) = (&self.refiner, &self.opt_refiner) {
            c.push(REFINER, r.clone(), Some(o.clone()));
        }
        c
    }

    pub fn metrics(&self) -> Result<MetricsRow> {
        let student_miou = evaluate_params(&self.student, self.data, Split::Validation)?.miou;
        let teacher_miou = evaluate_params(&self.teacher, self.data, Split::Validation)?.miou;
        let counts = pseudo_label_counts(
            &self.student,
            &self.teacher,
            self.refiner.as_ref(),
            self.data,
            Split::Unlabeled,
            &self.cfg.reliability,
        )?;
        let total = counts.iter().fold(AccountCounts::default(), |a, (_, c)| a.merge(*c));
        let lr = self.opt_student.current_lr();
        if total.n_total == 0 {
            // nothing to account for (a sup-only run without unlabeled scenes)
            let nan = f64::NAN;
            return Ok(MetricsRow {
                step: self.step,
                student_miou,
                teacher_miou,
                pl_acc_before: nan,
                pl_acc_after: nan,
                improvement: nan,
                pi: nan,
                q: nan,
                r: nan,
                zeta: None,
                lr,
            });
        }
        let pooled = ErrorAccounting::from_counts(total)?;
        Ok(MetricsRow {
            step: self.step,
            student_miou,
            teacher_miou,
            pl_acc_before: pooled.acc_base,
            pl_acc_after: pooled.acc_repl,
            improvement: pooled.acc_repl - pooled.acc_base,
            pi: pooled.pi,
            q: pooled.q,
            r: pooled.r,
            zeta: pooled.zeta,
            lr,
        })
    }
}

/// Runs the configured mode to completion, logging metrics every
/// `eval_interval` steps.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg.clone(), data)?;
    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    while t.step < cfg.steps {
        losses.push(t.train_step()?);
        if t.step % cfg.eval_interval == 0 {
            metrics.push(t.metrics()?);
        }
    }
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        metrics,
        losses,
    })
}

pub fn train_supervised(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    let cfg = TrainConfig { mode: Mode::SupOnly, ..cfg.clone() };
    train(&cfg, data)
}

pub fn train_semi(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    if cfg.mode == Mode::SupOnly {
        return Err(Error::Config("train_semi needs a semi-supervised mode".into()));
    }
    train(cfg, data)
}

/// Pooled IoU of `params` over a split.
pub fn evaluate_params(params: &NetParams, data: &TrainData, split: Split) -> Result<IouReport> {
    let ids = data.split(split);
    if ids.is_empty() {
        return Err(Error::Empty("evaluation split has no scenes"));
    }
    let preds: Vec<Result<LabelGrid>> = parallel::map(ids, |&id| {
        let sc = &data.scenes[id];
        let c = forward(params, &NetInput::segmenter(&sc.features, &sc.occupancy))?;
        Ok(argmax_classes(c.probs()))
    });
    let mut iou = IouCounts::new(data.shape().num_classes);
    for (pred, &id) in preds.into_iter().zip(ids) {
        let sc = &data.scenes[id];
        iou.add(&pred?, &sc.labels, &sc.occupancy)?;
    }
    iou.report()
}

/// Evaluates the named network (`student` or `teacher`) of a checkpoint.
pub fn evaluate(ckpt: &Checkpoint, net: &str, data: &TrainData, split: Split) -> Result<IouReport> {
    let e = ckpt
        .get(net)
        .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no {net:?} network")))?;
    evaluate_params(&e.params, data, split)
}

/// Per-scene counts of refinement outcomes: `M` from student and teacher
/// without random masking, the refiner (or the teacher when absent) on `M`.
pub fn pseudo_label_counts(
    student: &NetParams,
    teacher: &NetParams,
    refiner: Option<&NetParams>,
    data: &TrainData,
    split: Split,
    rc: &crate::refine::ReliabilityConfig,
) -> Result<Vec<(usize, AccountCounts)>> {
    let ids = data.split(split);
    parallel::map(ids, |&id| {
        let sc = &data.scenes[id];
        let input = NetInput::segmenter(&sc.features, &sc.occupancy);
        let p = forward(student, &input)?.into_probs();
        let q = forward(teacher, &input)?.into_probs();
        let m = identify_unreliable(&p, &q, &sc.occupancy, rc)?;
        let t_hard = argmax_classes(&q);
        let r_hard = match refiner {
            Some(r) => argmax_classes(refine_forward(r, &sc.features, &q, &m, &sc.occupancy)?.probs()),
            None => t_hard.clone(),
        };
        Ok((id, account_counts(&t_hard, &r_hard, &sc.labels, &m, &sc.occupancy)?))
    })
    .into_iter()
    .collect()
}

/// Per-scene accounting from a checkpoint holding student, teacher and
/// refiner. Scenes without labeled occupied voxels are skipped.
pub fn account_checkpoint(
    ckpt: &Checkpoint,
    data: &TrainData,
    split: Split,
    rc: &crate::refine::ReliabilityConfig,
) -> Result<Vec<(usize, ErrorAccounting)>> {
    let get = |n: &str| {
        ckpt.get(n)
            .map(|e| &e.params)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no {n:?} network")))
    };
    let refiner = get(REFINER)?;
    let counts = pseudo_label_counts(get(STUDENT)?, get(TEACHER)?, Some(refiner), data, split, rc)?;
    counts
        .into_iter()
        .filter(|(_, c)| c.n_total > 0)
        .map(|(id, c)| Ok((id, ErrorAccounting::from_counts(c)?)))
        .collect()
}

/// Paths written by [`run`].
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
    pub outcome: TrainOutcome,
}

/// Loads the manifest named in `cfg`, trains, and writes the checkpoint,
/// metrics CSV and resolved config into `cfg.out_dir`.
pub fn run(cfg: &TrainConfig) -> Result<RunOutputs> {
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset manifest given".into()))?;
    let out = cfg
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::Config("no output directory given".into()))?;
    let data = TrainData::load(manifest)?;
    cfg.validate(data.shape().num_classes)?;
    let config = cfg.write_resolved(out)?;
    let outcome = train(cfg, &data)?;
    let checkpoint = out.join("checkpoint.rplc");
    save_checkpoint(&checkpoint, &outcome.checkpoint)?;
    let metrics = out.join("metrics.csv");
    std::fs::write(&metrics, metrics_csv(&outcome.metrics))?;
    Ok(RunOutputs { checkpoint, metrics, config, outcome })
}

pub fn load_for_eval(checkpoint: &Path, manifest: &Path) -> Result<(Checkpoint, TrainData)> {
    Ok((load_checkpoint(checkpoint)?, TrainData::load(manifest)?))
}
