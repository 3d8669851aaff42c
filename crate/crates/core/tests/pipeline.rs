use repl_core::grid::{argmax_classes, BinaryMask, GridShape, LabelGrid, ProbGrid};
use repl_core::losses::{
    negative_learning_loss, refiner_masked_supervised, student_unlabeled_objective, supervised_objective,
};
use repl_core::net::{backward, forward, refine_forward, NetInput, NetParams};
use repl_core::pipeline::{
    account_checkpoint, evaluate, evaluate_params, metrics_csv, train, Mode, Split, TrainConfig, TrainData,
    Trainer, TEACHER,
};
use repl_core::refine::{
    compose_pseudo_labels, identify_unreliable, lasermix_selector, mix_scenes, teacher_pseudo_labels,
    top_k_implausible, MixSource, ReliabilityConfig,
};
use repl_core::scenegen::{generate_dataset, DatasetSpec, SceneConfig, SceneData, FEATURE_CHANNELS};
use repl_core::theory::{account, delta_closed_form};
use repl_core::Error;

fn small_data(seed: u64) -> TrainData {
    let spec = DatasetSpec {
        scene: SceneConfig::default(),
        shape: GridShape::new(5, FEATURE_CHANNELS, 4, 8, 8).unwrap(),
        n_scenes: 8,
        labeled_ratio: 0.34,
        n_val: 2,
        seed,
    };
    let (ds, scenes) = generate_dataset(&spec, None).unwrap();
    TrainData::new(ds, scenes).unwrap()
}

fn small_config(mode: Mode, steps: u64) -> TrainConfig {
    TrainConfig {
        mode,
        steps,
        eval_interval: steps,
        hidden: 8,
        seed: 11,
        ..Default::default()
    }
}

/// A trainer already past warm-up, with `sigma = 0` so the refiner's region
/// can be rebuilt outside the trainer.
fn semi_trainer(data: &TrainData, mode: Mode) -> Trainer<'_> {
    let mut cfg = small_config(mode, 20);
    cfg.warmup_frac = 0.0;
    cfg.reliability.sigma = 0.0;
    let mut t = Trainer::new(cfg, data).unwrap();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    t
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn add_scaled(acc: &mut [f64], g: &[f64], s: f64) {
    for (a, x) in acc.iter_mut().zip(g) {
        *a += s * x;
    }
}

fn probs(p: &NetParams, sc: &SceneData) -> ProbGrid {
    forward(p, &NetInput::segmenter(&sc.features, &sc.occupancy)).unwrap().into_probs()
}

#[test]
fn sup_only_is_deterministic_and_ignores_unlabeled() {
    let data = small_data(1);
    let cfg = small_config(Mode::SupOnly, 10);
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    let bytes = a.checkpoint.to_bytes().unwrap();
    assert_eq!(bytes, b.checkpoint.to_bytes().unwrap());
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));

    let mut stripped = data.clone();
    stripped.dataset.unlabeled.clear();
    let c = train(&cfg, &stripped).unwrap();
    assert_eq!(bytes, c.checkpoint.to_bytes().unwrap());
    let (full, bare) = (a.metrics.last().unwrap(), c.metrics.last().unwrap());
    assert_eq!(full.student_miou, bare.student_miou);
    assert!(bare.pl_acc_before.is_nan() && bare.zeta.is_none());
}

#[test]
fn semi_runs_are_deterministic() {
    let data = small_data(2);
    let cfg = small_config(Mode::SemiRepl, 6);
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
}

#[test]
fn stop_gradient_between_student_and_refiner() {
    let data = small_data(3);
    let t = semi_trainer(&data, Mode::SemiRepl);
    let base = t.step_gradients().unwrap();
    let base_refiner = base.refiner.clone().unwrap();

    // nudging the refiner leaves the student's gradient alone
    let mut probe = t.clone();
    for x in probe.refiner.as_mut().unwrap().values_mut() {
        *x += 1e-9;
    }
    let g = probe.step_gradients().unwrap();
    assert_eq!(g.student, base.student);
    assert_ne!(g.refiner.unwrap(), base_refiner);

    // nudging the student leaves the refiner's gradient alone
    let mut probe = t.clone();
    for x in probe.student.values_mut() {
        *x += 1e-9;
    }
    let g = probe.step_gradients().unwrap();
    assert_eq!(g.refiner.unwrap(), base_refiner);
    assert_ne!(g.student, base.student);
}

#[test]
fn refiner_loss_is_the_plain_sum_of_its_streams() {
    let data = small_data(4);
    let t = semi_trainer(&data, Mode::SemiRepl);
    let got = t.step_gradients().unwrap();
    let refiner = t.refiner.as_ref().unwrap();
    let rc = t.cfg.reliability;
    let w = t.cfg.weights;
    let batch = t.batch(t.step).unwrap();
    let mut grad = vec![0.0; refiner.len()];

    let mut rsup = 0.0;
    for &id in &batch.labeled {
        let sc = &data.scenes[id];
        let q = probs(&t.teacher, sc);
        let m = identify_unreliable(&probs(&t.student, sc), &q, &sc.occupancy, &rc).unwrap();
        let c = refine_forward(refiner, &sc.features, &q, &m, &sc.occupancy).unwrap();
        let l = refiner_masked_supervised(c.probs(), &sc.labels, &m.and(&sc.occupancy).unwrap(), &w).unwrap();
        let s = 1.0 / batch.labeled.len() as f64;
        rsup += s * l.value;
        add_scaled(&mut grad, &backward(refiner, &c, &l.grad).unwrap(), s);
    }
    let mut runl = 0.0;
    for &id in &batch.unlabeled {
        let sc = &data.scenes[id];
        let q = probs(&t.teacher, sc);
        let m = identify_unreliable(&probs(&t.student, sc), &q, &sc.occupancy, &rc).unwrap();
        let c = refine_forward(refiner, &sc.features, &q, &m, &sc.occupancy).unwrap();
        let l = negative_learning_loss(c.probs(), &top_k_implausible(&q, rc.top_k).unwrap(), &sc.occupancy).unwrap();
        let s = 1.0 / batch.unlabeled.len() as f64;
        runl += s * l.value;
        add_scaled(&mut grad, &backward(refiner, &c, &l.grad).unwrap(), s);
    }
    let mut rmix = 0.0;
    for &(i, u, side) in &batch.mix {
        let (a, b) = (&data.scenes[i], &data.scenes[batch.unlabeled[u]]);
        let s_mask = lasermix_selector(
            data.shape().dims,
            data.dataset.extent,
            t.cfg.sensor_origin,
            rc.mix_ratio,
            side,
        )
        .unwrap();
        let mr = mix_scenes(
            MixSource { features: &a.features, labels: Some(&a.labels), occupancy: &a.occupancy },
            MixSource { features: &b.features, labels: None, occupancy: &b.occupancy },
            &s_mask,
        )
        .unwrap();
        let input = NetInput::segmenter(&mr.features, &mr.occupancy);
        let q = forward(&t.teacher, &input).unwrap().into_probs();
        let p = forward(&t.student, &input).unwrap().into_probs();
        let m = identify_unreliable(&p, &q, &mr.occupancy, &rc).unwrap();
        let region = m.and(&s_mask).unwrap().and(&mr.occupancy).unwrap();
        let c = refine_forward(refiner, &mr.features, &q, &m, &mr.occupancy).unwrap();
        let l = refiner_masked_supervised(c.probs(), &mr.labels, &region, &w).unwrap();
        let s = 1.0 / batch.mix.len() as f64;
        rmix += s * l.value;
        add_scaled(&mut grad, &backward(refiner, &c, &l.grad).unwrap(), s);
    }

    let tol = 1e-12;
    assert!((got.losses.rsup - rsup).abs() < tol, "{} vs {rsup}", got.losses.rsup);
    assert!((got.losses.runl - runl).abs() < tol, "{} vs {runl}", got.losses.runl);
    assert!((got.losses.rmix - rmix).abs() < tol, "{} vs {rmix}", got.losses.rmix);
    assert!((got.losses.refiner() - (rsup + runl + rmix)).abs() < tol);
    assert!(max_abs_diff(got.refiner.as_ref().unwrap(), &grad) < tol);
}

#[test]
fn student_loss_is_the_plain_sum_of_its_streams() {
    let data = small_data(5);
    let t = semi_trainer(&data, Mode::SemiNoRefine);
    let got = t.step_gradients().unwrap();
    let w = t.cfg.weights;
    let batch = t.batch(t.step).unwrap();
    let mut grad = vec![0.0; t.student.len()];
    let fwd = |f: &repl_core::grid::FeatureGrid, occ: &BinaryMask| {
        forward(&t.student, &NetInput::segmenter(f, occ)).unwrap()
    };

    let mut ssup = 0.0;
    for &id in &batch.labeled {
        let sc = &data.scenes[id];
        let c = fwd(&sc.features, &sc.occupancy);
        let l = supervised_objective(c.probs(), &sc.labels, &sc.occupancy, &w).unwrap();
        let s = 1.0 / batch.labeled.len() as f64;
        ssup += s * l.value;
        add_scaled(&mut grad, &backward(&t.student, &c, &l.grad).unwrap(), s);
    }
    let pseudo: Vec<LabelGrid> = batch
        .unlabeled
        .iter()
        .map(|&id| {
            let sc = &data.scenes[id];
            teacher_pseudo_labels(&probs(&t.teacher, sc), &sc.occupancy).unwrap()
        })
        .collect();
    let mut sunl = 0.0;
    for (&id, y) in batch.unlabeled.iter().zip(&pseudo) {
        let sc = &data.scenes[id];
        let c = fwd(&sc.features, &sc.occupancy);
        let l = student_unlabeled_objective(c.probs(), y, &sc.occupancy, &w).unwrap();
        let s = 1.0 / batch.unlabeled.len() as f64;
        sunl += s * l.value;
        add_scaled(&mut grad, &backward(&t.student, &c, &l.grad).unwrap(), s);
    }
    let mut smix = 0.0;
    for &(i, u, side) in &batch.mix {
        let (a, b) = (&data.scenes[i], &data.scenes[batch.unlabeled[u]]);
        let s_mask = lasermix_selector(
            data.shape().dims,
            data.dataset.extent,
            t.cfg.sensor_origin,
            t.cfg.reliability.mix_ratio,
            side,
        )
        .unwrap();
        let mr = mix_scenes(
            MixSource { features: &a.features, labels: Some(&a.labels), occupancy: &a.occupancy },
            MixSource { features: &b.features, labels: Some(&pseudo[u]), occupancy: &b.occupancy },
            &s_mask,
        )
        .unwrap();
        let c = fwd(&mr.features, &mr.occupancy);
        let l = student_unlabeled_objective(c.probs(), &mr.labels, &mr.occupancy, &w).unwrap();
        let s = 1.0 / batch.mix.len() as f64;
        smix += s * l.value;
        add_scaled(&mut grad, &backward(&t.student, &c, &l.grad).unwrap(), s);
    }

    let tol = 1e-12;
    assert!((got.losses.ssup - ssup).abs() < tol);
    assert!((got.losses.sunl - sunl).abs() < tol);
    assert!((got.losses.smix - smix).abs() < tol);
    assert!((got.losses.student() - (ssup + sunl + smix)).abs() < tol);
    assert!(max_abs_diff(&got.student, &grad) < tol);
    assert!(got.refiner.is_none());
}

#[test]
fn refinement_is_the_only_difference_between_semi_modes() {
    let data = small_data(6);
    let mut cfg = small_config(Mode::SemiNoRefine, 8);
    cfg.warmup_frac = 0.25;
    let mut plain = Trainer::new(cfg.clone(), &data).unwrap();
    cfg.mode = Mode::SemiRepl;
    let mut repl = Trainer::new(cfg, &data).unwrap();
    assert_eq!(plain.student, repl.student);

    // identical through warm-up
    while repl.in_warmup() {
        assert_eq!(plain.train_step().unwrap().student(), repl.train_step().unwrap().student());
    }
    assert_eq!(plain.student, repl.student);
    assert_eq!(plain.teacher, repl.teacher);

    // without its refiner, semi-repl follows the teacher-label trajectory
    repl.refiner = None;
    repl.opt_refiner = None;
    for _ in 0..3 {
        let a = plain.train_step().unwrap();
        let b = repl.train_step().unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(plain.student, repl.student);
    assert_eq!(plain.teacher, repl.teacher);
}

#[test]
fn accounting_matches_refined_pseudo_label_accuracy() {
    let data = small_data(7);
    let out = train(&small_config(Mode::SemiRepl, 10), &data).unwrap();
    let ckpt = &out.checkpoint;
    let rc = ReliabilityConfig::default();
    let rows = account_checkpoint(ckpt, &data, Split::Unlabeled, &rc).unwrap();
    assert_eq!(rows.len(), data.dataset.unlabeled.len());
    let get = |n: &str| &ckpt.get(n).unwrap().params;
    for (id, acc) in rows {
        let sc = &data.scenes[id];
        let p = probs(get("student"), sc);
        let q = probs(get(TEACHER), sc);
        let m = identify_unreliable(&p, &q, &sc.occupancy, &rc).unwrap();
        let q_hat = refine_forward(get("refiner"), &sc.features, &q, &m, &sc.occupancy).unwrap().into_probs();
        let refined = compose_pseudo_labels(&q, &q_hat, &m, &sc.occupancy).unwrap();
        let base = teacher_pseudo_labels(&q, &sc.occupancy).unwrap();

        let n = sc.occupancy.count() as f64;
        let hits = |y: &LabelGrid| sc.occupancy.iter_set().filter(|&v| y.get(v) == sc.labels.get(v)).count() as f64;
        let gain = (hits(&refined) - hits(&base)) / n;
        assert!((acc.acc_repl - acc.acc_base - gain).abs() < 1e-12);
        assert!((acc.delta - delta_closed_form(acc.pi, acc.rho, acc.q, acc.r)).abs() < 1e-12);
        assert!((acc.delta - gain).abs() < 1e-12);
        if let Some(z) = acc.zeta {
            assert!((-1.0..=1.0).contains(&z));
        }
        let again = account(&argmax_classes(&q), &argmax_classes(&q_hat), &sc.labels, &m, &sc.occupancy).unwrap();
        assert_eq!(again.counts, acc.counts);
    }
    let last = out.metrics.last().unwrap();
    assert_eq!(last.improvement, last.pl_acc_after - last.pl_acc_before);
    assert!(last.zeta.is_none_or(|z| (-1.0..=1.0).contains(&z)));
}

#[test]
fn training_loss_descends_on_one_scene() {
    let mut data = small_data(8);
    data.dataset.labeled.truncate(1);
    let out = train(&small_config(Mode::SupOnly, 200), &data).unwrap();
    let first = out.losses.first().unwrap().ssup;
    let last = out.losses.last().unwrap().ssup;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn memorizes_a_single_scene_within_fifty_steps() {
    let mut data = small_data(9);
    let id = data.dataset.labeled[0];
    // validate on the training scene itself
    data.dataset.labeled = vec![id];
    data.dataset.validation = vec![id];
    let mut cfg = small_config(Mode::SupOnly, 50);
    cfg.hidden = 16;
    cfg.base_lr = 2e-2;
    cfg.weight_decay = 0.0;
    let mut t = Trainer::new(cfg, &data).unwrap();
    let mut best = 0.0f64;
    while t.step < 50 && best < 1.0 {
        t.train_step().unwrap();
        best = best.max(evaluate_params(&t.student, &data, Split::Validation).unwrap().miou);
    }
    assert_eq!(best, 1.0, "best mIoU {best} after {} steps", t.step);
}

#[test]
fn empty_splits_are_errors() {
    let data = small_data(10);
    let mut no_val = data.clone();
    no_val.dataset.validation.clear();
    let p = Trainer::new(small_config(Mode::SupOnly, 2), &data).unwrap().student;
    assert!(matches!(evaluate_params(&p, &no_val, Split::Validation), Err(Error::Empty(_))));

    let mut no_lab = data.clone();
    no_lab.dataset.labeled.clear();
    assert!(matches!(Trainer::new(small_config(Mode::SupOnly, 2), &no_lab), Err(Error::Empty(_))));

    let mut no_unl = data.clone();
    no_unl.dataset.unlabeled.clear();
    assert!(matches!(Trainer::new(small_config(Mode::SemiRepl, 2), &no_unl), Err(Error::Empty(_))));
}

#[test]
fn repeated_evaluation_is_identical() {
    let data = small_data(12);
    let out = train(&small_config(Mode::SupOnly, 4), &data).unwrap();
    let a = evaluate(&out.checkpoint, TEACHER, &data, Split::Validation).unwrap();
    let b = evaluate(&out.checkpoint, TEACHER, &data, Split::Validation).unwrap();
    assert_eq!(a, b);
    assert!(evaluate(&out.checkpoint, "refiner", &data, Split::Validation).is_err());
}
