//! Acceptance checks. The first group is self-contained; the second inspects
//! a full experiment run.

use std::collections::BTreeMap;

use chrono::DateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::evalkit::domain::{domain_accuracy, train_domain_probe, ProbeConfig};
use crate::evalkit::{average_precision, centroid_distances, export_embeddings, precision_recall, ScoredMatch};
use crate::grid::{AnnotationMask, Detection, GridLabel, GridShape, ProbGrid};
use crate::losses::{masked_loss, masked_loss_grad, supervised_loss};
use crate::mentorflow::{expand, ExpansionOptions, MentoringSession};
use crate::model::{Classifier, GradReverse};
use crate::pipeline::{run_experiment, Experiment, Recipe};
use crate::sample::{Domain, ImageSample, PartialLabel, Verdict};
use crate::service::{read_log, SessionEvent, SessionState, SessionStore};
use crate::trainer::{make_balanced_batches, MixedBatch, TrainConfig, TrainObserver, Trainer};

#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: u32,
    pub title: String,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    fn new(id: u32, title: &str, passed: bool, detail: String) -> Self {
        Self {
            id,
            title: title.into(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} [{}] {}: {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.detail
        )
    }
}

impl PipelineConfig {
    /// Settings of the acceptance experiment.
    pub fn acceptance() -> Self {
        let mut cfg = Self::default();
        cfg.dataset.counts.pool_new = 2000;
        cfg.dataset.shift.noise_sigma = 0.03;
        cfg.retrain.loss.lambda_domain = 0.1;
        cfg.mining.class_thresholds = vec![0.2; cfg.dataset.num_classes];
        cfg
    }
}

/// Checks every mixed batch the trainer draws.
#[derive(Debug, Default)]
pub struct BalanceAudit {
    pub batches: usize,
    pub unbalanced: usize,
}

impl TrainObserver for BalanceAudit {
    fn on_batch(&mut self, batch: &MixedBatch) {
        self.batches += 1;
        if batch.original.len() != batch.mentored.len() || batch.original.is_empty() {
            self.unbalanced += 1;
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn random_instance(rng: &mut ChaCha8Rng, shape: GridShape) -> (ProbGrid, GridLabel, AnnotationMask) {
    let probs: Vec<f64> = (0..shape.entries()).map(|_| rng.random_range(0.05..0.95)).collect();
    let labels: Vec<u8> = (0..shape.entries()).map(|_| u8::from(rng.random_bool(0.3))).collect();
    let mut mask = AnnotationMask::empty(shape.rows, shape.cols);
    for r in 0..shape.rows {
        for c in 0..shape.cols {
            mask.set(r, c, rng.random_bool(0.5));
        }
    }
    (
        ProbGrid::new(shape, probs).expect("shape"),
        GridLabel::from_values(shape, labels).expect("shape"),
        mask,
    )
}

pub fn criterion_1() -> Result<CriterionResult> {
    let shape = GridShape::new(4, 4, 2);
    let eps = 1e-7;
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut leaks = 0usize;
    for _ in 0..100 {
        let (probs, label, mask) = random_instance(&mut rng, shape);
        let grad = masked_loss_grad(&probs, &label, &mask, eps)?;
        for i in 0..shape.entries() {
            let cell = i / shape.classes;
            if !mask.as_slice()[cell] {
                leaks += usize::from(grad[i] != 0.0);
                continue;
            }
            let mut plus = probs.clone();
            plus.values[i] += h;
            let mut minus = probs.clone();
            minus.values[i] -= h;
            let fd = (masked_loss(&plus, &label, &mask, eps)? - masked_loss(&minus, &label, &mask, eps)?) / (2.0 * h);
            worst = worst.max(rel_err(grad[i], fd));
        }
    }
    Ok(CriterionResult::new(
        1,
        "masked loss gradient",
        leaks == 0 && worst <= 1e-3,
        format!("nonzero unmasked gradients {leaks}, worst relative FD error {worst:.2e}"),
    ))
}

pub fn criterion_2() -> Result<CriterionResult> {
    let shape = GridShape::new(4, 4, 2);
    let eps = 1e-7;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_full: f64 = 0.0;
    let mut empty_ok = true;
    for _ in 0..100 {
        let (probs, label, _) = random_instance(&mut rng, shape);
        let full = masked_loss(&probs, &label, &AnnotationMask::full(4, 4), eps)?;
        worst_full = worst_full.max((full - supervised_loss(&probs, &label, eps)?).abs());
        let empty = AnnotationMask::empty(4, 4);
        empty_ok &= masked_loss(&probs, &label, &empty, eps)? == 0.0;
        empty_ok &= masked_loss_grad(&probs, &label, &empty, eps)?.iter().all(|&g| g == 0.0);
    }

    let cfg = PipelineConfig::default();
    let classifier = Classifier::new(cfg.arch.clone(), 5)?;
    let mut data_cfg = cfg.dataset.clone();
    data_cfg.counts = crate::syndata::SplitCounts {
        train_original: 0,
        eval_original: 0,
        pool_new: 8,
        eval_new: 0,
    };
    let data = crate::syndata::generate_dataset(&data_cfg)?;
    let empty: Vec<ImageSample> = data
        .pool_new
        .iter()
        .map(|s| s.with_partial(PartialLabel::empty(cfg.arch.grid_shape())))
        .collect();
    let refs: Vec<&ImageSample> = empty.iter().collect();
    let before: Vec<Vec<f32>> = classifier.params().iter().map(|p| p.to_vec()).collect();
    let mut trainer = Trainer::new(classifier, TrainConfig::default());
    let losses = trainer.step(&[], &refs)?;
    let after: Vec<Vec<f32>> = trainer.classifier.params().iter().map(|p| p.to_vec()).collect();
    let unchanged = before
        .iter()
        .zip(&after)
        .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    Ok(CriterionResult::new(
        2,
        "masked loss reductions",
        worst_full <= 1e-9 && empty_ok && unchanged && losses.total == 0.0,
        format!(
            "full-mask gap {worst_full:.1e}, empty mask zero: {empty_ok}, weights unchanged after empty step: {unchanged}"
        ),
    ))
}

/// Batch balance across seeds and set sizes, plus what the trainer drew
/// during an experiment when an audit is given.
pub fn criterion_3(audit: Option<&BalanceAudit>) -> Result<CriterionResult> {
    let mut bad = 0usize;
    let mut total = 0usize;
    for seed in 0..5u64 {
        for &(n_o, n_m) in &[(2000, 300), (100, 700), (64, 64), (37, 5)] {
            for &bs in &[2usize, 8, 16] {
                for epoch in 0..5u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + epoch);
                    for b in make_balanced_batches(n_o, n_m, bs, &mut rng)? {
                        total += 1;
                        bad += usize::from(b.original.len() != bs / 2 || b.mentored.len() != bs / 2);
                    }
                }
            }
        }
    }
    let mut detail = format!("{bad} of {total} synthetic batches unbalanced");
    if let Some(a) = audit {
        bad += a.unbalanced;
        detail.push_str(&format!(", {} of {} training batches unbalanced", a.unbalanced, a.batches));
    }
    Ok(CriterionResult::new(3, "balanced mixed batches", bad == 0, detail))
}

pub fn criterion_4() -> Result<CriterionResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let x: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
    let w: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let downstream = |y: &[f64]| -> f64 { y.iter().zip(&w).map(|(a, b)| (a * b).sin()).sum() };
    let analytic: Vec<f64> = x.iter().zip(&w).map(|(a, b)| (a * b).cos() * b).collect();
    let h = 1e-4;
    let mut identity = true;
    let mut exact = true;
    let mut worst: f64 = 0.0;
    for &lambda in &[0.0, 0.5, 1.0] {
        let grl = GradReverse::new(lambda);
        let y = grl.forward(&x);
        identity &= y.iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits());
        let back = grl.backward(&analytic);
        exact &= back.iter().zip(&analytic).all(|(b, g)| *b == -(lambda * g));
        let mut fd = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            fd[i] = (downstream(&grl.forward(&p)) - downstream(&grl.forward(&m))) / (2.0 * h);
        }
        for (b, f) in back.iter().zip(&fd) {
            worst = worst.max(rel_err(*b, -lambda * f));
        }
    }
    Ok(CriterionResult::new(
        4,
        "gradient reversal",
        identity && exact && worst <= 1e-3,
        format!("identity forward: {identity}, backward -lambda*g exact: {exact}, worst FD error {worst:.2e}"),
    ))
}

pub fn criterion_9() -> Result<CriterionResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut mismatches = 0usize;
    for _ in 0..200 {
        let n = rng.random_range(0..=10usize);
        let truths = rng.random_range(1..=8usize);
        let scored: Vec<ScoredMatch> = (0..n)
            .map(|_| ScoredMatch {
                class_id: 0,
                // Coarse confidences so that ties occur.
                confidence: rng.random_range(1..=6u32) as f64 / 6.0,
                true_positive: rng.random_bool(0.5),
            })
            .collect();
        let tp_total = scored.iter().filter(|s| s.true_positive).count();
        if tp_total > truths {
            continue;
        }
        if average_precision(&scored, truths)? != brute_force_ap(&scored, truths) {
            mismatches += 1;
        }
    }
    let (vacuous, _) = precision_recall(0, 0, 3);
    Ok(CriterionResult::new(
        9,
        "average precision oracle",
        mismatches == 0 && vacuous == 1.0,
        format!("{mismatches} mismatches against the brute-force envelope, vacuous precision {vacuous}"),
    ))
}

/// Area under the interpolated precision-recall curve, built by thresholding
/// at every distinct confidence and taking, at each recall level, the best
/// precision reached at that recall or beyond.
pub fn brute_force_ap(scored: &[ScoredMatch], num_truths: usize) -> f64 {
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.confidence).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<&ScoredMatch> = scored.iter().filter(|s| s.confidence >= t).collect();
            let tp = kept.iter().filter(|s| s.true_positive).count();
            (tp as f64 / num_truths as f64, tp as f64 / kept.len() as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(r, _) in &points {
        let best = points
            .iter()
            .filter(|(r2, _)| *r2 >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

pub fn criterion_10() -> Result<CriterionResult> {
    let dir = tempfile_dir()?;
    let path = dir.join("sessions.jsonl");
    let shape = GridShape::new(4, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut store = SessionStore::open(&path, shape, None)?;
    for i in 0..12 {
        let at = DateTime::from_timestamp(1_700_000_000 + i, 0).expect("time");
        let dets: Vec<Detection> = (0..rng.random_range(1..=3usize))
            .map(|k| {
                let r = rng.random_range(0..4usize);
                Detection::new(k % 2, [(r, k)].into_iter().collect(), 0.6)
            })
            .collect();
        store.create_session(MentoringSession::new(&format!("img{i}"), dets, at))?;
    }
    let ids: Vec<String> = store.state().order.clone();
    for (i, id) in ids.iter().enumerate() {
        let at = DateTime::from_timestamp(1_700_001_000 + i as i64, 0).expect("time");
        let dets: Vec<String> = store.get(id)?.detections.iter().map(|d| d.id.clone()).collect();
        for d in &dets {
            let v = if rng.random_bool(0.5) { Verdict::Confirmed } else { Verdict::Infirmed };
            store.submit_feedback(id, d, v, at)?;
        }
        if i % 3 != 0 {
            store.complete_session(id, at)?;
        }
    }
    store.flush()?;
    let pre_crash = store.state().clone();
    drop(store);

    let (events, _) = read_log(&path)?;
    let mut invalid_prefixes = 0usize;
    for k in 0..=events.len() {
        if SessionState::fold(&events[..k]).is_err() {
            invalid_prefixes += 1;
        }
    }

    let bytes = std::fs::read(&path)?;
    let mut torn_mismatch = 0usize;
    for cut in (0..bytes.len()).step_by(97) {
        let p = dir.join(format!("cut{cut}.jsonl"));
        std::fs::write(&p, &bytes[..cut])?;
        let whole_lines = bytes[..cut].iter().filter(|&&b| b == b'\n').count();
        let reopened = SessionStore::open(&p, shape, None)?;
        if reopened.state() != &SessionState::fold(&events[..whole_lines])? {
            torn_mismatch += 1;
        }
    }

    {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().append(true).open(&path)?;
        let extra = serde_json::to_string(&SessionEvent::SessionCompleted {
            session_id: ids[0].clone(),
            at: DateTime::from_timestamp(0, 0).expect("time"),
        })?;
        f.write_all(&extra.as_bytes()[..extra.len() / 2])?;
    }
    let replayed = SessionStore::open(&path, shape, None)?;
    let replay_ok = replayed.state() == &pre_crash;
    let _ = std::fs::remove_dir_all(&dir);
    Ok(CriterionResult::new(
        10,
        "event log replay",
        invalid_prefixes == 0 && torn_mismatch == 0 && replay_ok,
        format!(
            "{} events, invalid prefixes {invalid_prefixes}, torn-cut mismatches {torn_mismatch}, replay after crash equal: {replay_ok}",
            events.len()
        ),
    ))
}

fn tempfile_dir() -> Result<std::path::PathBuf> {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let dir = std::env::temp_dir().join(format!("mentorloop-accept-{}-{nanos}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Expansion invariants on the mentored set of an experiment.
pub fn criterion_5(exp: &Experiment, cfg: &PipelineConfig) -> Result<CriterionResult> {
    let truth: BTreeMap<&str, &ImageSample> = exp.dataset.pool_new.iter().map(|s| (s.id.as_str(), s)).collect();
    let eps = cfg.retrain.omnia_epsilon;
    let mut violations = 0usize;
    let mut identity_ok = true;
    let mut admitted = 0usize;
    let mut admitted_defective = 0usize;
    for chunk in exp.mentored.chunks(64) {
        let images: Vec<_> = chunk.iter().map(|s| &s.pixels).collect();
        let probs = exp.baseline.classifier.forward(&images)?;
        for (s, p) in chunk.iter().zip(&probs) {
            let before = s.partial_label.as_ref().expect("mentored samples carry partial labels");
            let zero = expand(s, before, Some(p), ExpansionOptions { healthy: false, omnia_epsilon: Some(0.0) })?;
            identity_ok &= &zero == before;
            let full_label = truth[s.id.as_str()].full_label.as_ref().expect("pool labels");
            for opts in [
                ExpansionOptions { healthy: false, omnia_epsilon: Some(eps) },
                ExpansionOptions { healthy: true, omnia_epsilon: None },
            ] {
                let after = expand(s, before, Some(p), opts)?;
                if !after.mask.is_superset_of(&before.mask) {
                    violations += 1;
                }
                let shape = before.label.shape();
                for r in 0..shape.rows {
                    for c in 0..shape.cols {
                        if before.mask.get(r, c) {
                            if before.label.class_vector(r, c) != after.label.class_vector(r, c) {
                                violations += 1;
                            }
                        } else if after.mask.get(r, c) && opts.omnia_epsilon.is_some() {
                            admitted += 1;
                            admitted_defective += usize::from(full_label.is_cell_defective(r, c));
                        }
                    }
                }
            }
        }
    }
    let rate = if admitted == 0 { 0.0 } else { admitted_defective as f64 / admitted as f64 };
    Ok(CriterionResult::new(
        5,
        "mask expansions",
        violations == 0 && identity_ok && rate <= 0.02,
        format!(
            "superset/annotated violations {violations}, epsilon 0 identity: {identity_ok}, admitted defective {admitted_defective}/{admitted} = {:.2}%",
            100.0 * rate
        ),
    ))
}

fn domain_numbers(r: &crate::evalkit::EvalReport, d: Domain) -> (f64, f64, f64) {
    let x = &r.domains[&d];
    (x.map, x.precision(0.5), x.recall(0.5))
}

pub fn criterion_6(exp: &Experiment) -> Result<CriterionResult> {
    let (b_orig_map, ..) = domain_numbers(&exp.baseline_report, Domain::Original);
    let (b_map, b_p, b_r) = domain_numbers(&exp.baseline_report, Domain::New);
    let Some(nd) = exp.results.get(&Recipe::NewData) else {
        return Ok(CriterionResult::new(6, "new-data retraining", false, "new_data recipe not run".into()));
    };
    let (n_map, n_p, n_r) = domain_numbers(&nd.report, Domain::New);
    let gap = b_orig_map - b_map;
    let passed = gap >= 0.10 && n_map - b_map >= 0.08 && n_r - b_r >= 0.10 && b_p - n_p >= 0.10;
    Ok(CriterionResult::new(
        6,
        "new-data retraining",
        passed,
        format!(
            "baseline domain gap {gap:.3}; new mAP {b_map:.3}->{n_map:.3} ({:+.3}), recall {b_r:.3}->{n_r:.3} ({:+.3}), precision {b_p:.3}->{n_p:.3} ({:+.3})",
            n_map - b_map,
            n_r - b_r,
            n_p - b_p
        ),
    ))
}

pub fn criterion_7(exp: &Experiment) -> Result<CriterionResult> {
    let (b_orig_map, ..) = domain_numbers(&exp.baseline_report, Domain::Original);
    let (_, b_p, b_r) = domain_numbers(&exp.baseline_report, Domain::New);
    let mut passed = true;
    let mut parts = Vec::new();
    for recipe in Recipe::MITIGATIONS {
        let Some(res) = exp.results.get(&recipe) else {
            passed = false;
            parts.push(format!("{} not run", recipe.name()));
            continue;
        };
        let (_, p, r) = domain_numbers(&res.report, Domain::New);
        let (o_map, ..) = domain_numbers(&res.report, Domain::Original);
        let ok = p >= b_p - 0.05 && r - b_r >= 0.05 && (o_map - b_orig_map).abs() <= 0.05;
        passed &= ok;
        parts.push(format!(
            "{} {} (p {:+.3}, r {:+.3}, orig mAP {:+.3})",
            recipe.name(),
            if ok { "ok" } else { "fails" },
            p - b_p,
            r - b_r,
            o_map - b_orig_map
        ));
    }
    Ok(CriterionResult::new(7, "mitigation recipes", passed, parts.join("; ")))
}

pub fn criterion_8(exp: &Experiment) -> Result<CriterionResult> {
    let (Some(dann), Some(plain)) = (exp.models.get(&Recipe::Dann), exp.models.get(&Recipe::NewData)) else {
        return Ok(CriterionResult::new(8, "domain alignment", false, "dann or new_data recipe not run".into()));
    };
    let Some(head) = dann.domain_head.as_ref() else {
        return Ok(CriterionResult::new(8, "domain alignment", false, "dann checkpoint has no domain head".into()));
    };
    let held_out: Vec<ImageSample> = exp
        .dataset
        .eval_original
        .iter()
        .chain(&exp.dataset.eval_new)
        .cloned()
        .collect();
    let dann_acc = domain_accuracy(&dann.classifier, head, &held_out)?;
    let n = 400.min(exp.dataset.train_original.len()).min(exp.dataset.pool_new.len());
    let probe_train: Vec<ImageSample> = exp.dataset.train_original[..n]
        .iter()
        .chain(&exp.dataset.pool_new[..n])
        .cloned()
        .collect();
    let probe = train_domain_probe(&plain.classifier, &probe_train, &ProbeConfig::default())?;
    let probe_acc = domain_accuracy(&plain.classifier, &probe, &held_out)?;
    let d_dann = centroid_distances(&export_embeddings(&dann.classifier, &held_out)?);
    let d_plain = centroid_distances(&export_embeddings(&plain.classifier, &held_out)?);
    let ratios: Vec<(usize, f64)> = d_dann
        .iter()
        .filter_map(|(k, &d)| d_plain.get(k).map(|&p| (*k, d / p)))
        .collect();
    let ratio_ok = !ratios.is_empty() && ratios.iter().all(|(_, r)| *r < 0.7);
    let ratio_text: Vec<String> = ratios.iter().map(|(k, r)| format!("c{k} {r:.2}")).collect();
    Ok(CriterionResult::new(
        8,
        "domain alignment",
        dann_acc <= 0.65 && probe_acc >= 0.9 && ratio_ok,
        format!(
            "dann domain accuracy {dann_acc:.3}, probe on new_data features {probe_acc:.3}, centroid ratios [{}]",
            ratio_text.join(", ")
        ),
    ))
}

/// Criteria that need no trained models.
pub fn unit_criteria() -> Result<Vec<CriterionResult>> {
    Ok(vec![
        criterion_1()?,
        criterion_2()?,
        criterion_3(None)?,
        criterion_4()?,
        criterion_9()?,
        criterion_10()?,
    ])
}

/// Criteria that inspect an experiment.
pub fn experiment_criteria(exp: &Experiment, cfg: &PipelineConfig) -> Result<Vec<CriterionResult>> {
    Ok(vec![
        criterion_5(exp, cfg)?,
        criterion_6(exp)?,
        criterion_7(exp)?,
        criterion_8(exp)?,
    ])
}

/// Runs the experiment for `cfg` and every criterion, ordered by id.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<CriterionResult>> {
    let mut audit = BalanceAudit::default();
    let exp = run_experiment(cfg, &Recipe::ALL, &mut audit)?;
    let mut out = vec![
        criterion_1()?,
        criterion_2()?,
        criterion_3(Some(&audit))?,
        criterion_4()?,
        criterion_9()?,
        criterion_10()?,
    ];
    out.extend(experiment_criteria(&exp, cfg)?);
    out.sort_by_key(|c| c.id);
    Ok(out)
}
