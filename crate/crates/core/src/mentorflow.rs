//! Mining, mentoring sessions and partial ground truth.
//!
//! The deployed model proposes detections on new images; an operator (or the
//! scripted oracle) confirms or infirms each one. Confirmed cells become
//! one-hot targets for the detected class, infirmed cells become healthy
//! targets, and everything else stays outside the annotated set until one of
//! the expansion rules moves it in.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    cell_iou, detections_from_grid, AnnotationMask, Cell, Detection, GridLabel, GridShape, ProbGrid,
};
use crate::model::Classifier;
use crate::sample::{Feedback, ImageSample, PartialLabel, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Open,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentoringSession {
    pub id: String,
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub feedback: BTreeMap<String, Feedback>,
    pub status: SessionStatus,
    pub created_at: DateTime<Utc>,
    pub completed_at: Option<DateTime<Utc>>,
}

impl MentoringSession {
    pub fn new(image_id: &str, detections: Vec<Detection>, created_at: DateTime<Utc>) -> Self {
        Self {
            id: format!("s-{image_id}"),
            image_id: image_id.to_string(),
            detections,
            feedback: BTreeMap::new(),
            status: SessionStatus::Open,
            created_at,
            completed_at: None,
        }
    }

    pub fn detection(&self, id: &str) -> Option<&Detection> {
        self.detections.iter().find(|d| d.id == id)
    }

    /// Detection ids still lacking a verdict, in detection order.
    pub fn unanswered(&self) -> Vec<String> {
        self.detections
            .iter()
            .filter(|d| !self.feedback.contains_key(&d.id))
            .map(|d| d.id.clone())
            .collect()
    }

    /// Records a verdict, replacing any earlier one for the same detection.
    pub fn record(&mut self, feedback: Feedback) -> Result<()> {
        if self.status == SessionStatus::Completed {
            return Err(Error::Conflict(format!("session {} is already completed", self.id)));
        }
        if self.detection(&feedback.detection_id).is_none() {
            return Err(Error::NotFound(format!(
                "detection {} in session {}",
                feedback.detection_id, self.id
            )));
        }
        self.feedback.insert(feedback.detection_id.clone(), feedback);
        Ok(())
    }

    pub fn complete(&mut self, at: DateTime<Utc>) -> Result<()> {
        if self.status == SessionStatus::Completed {
            return Err(Error::Conflict(format!("session {} is already completed", self.id)));
        }
        let missing = self.unanswered();
        if !missing.is_empty() {
            return Err(Error::Precondition(format!(
                "unanswered detections: {}",
                missing.join(", ")
            )));
        }
        self.status = SessionStatus::Completed;
        self.completed_at = Some(at);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    /// Select images with at least one detection.
    AnyDetection,
    /// Select images with a cell probability near a class threshold.
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub strategy: MiningStrategy,
    pub class_thresholds: Vec<f64>,
    pub uncertainty_margin: f64,
}

impl MiningConfig {
    pub fn any_detection(num_classes: usize, threshold: f64) -> Self {
        Self {
            strategy: MiningStrategy::AnyDetection,
            class_thresholds: vec![threshold; num_classes],
            uncertainty_margin: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Config("class thresholds must lie in (0, 1)".into()));
        }
        if !(self.uncertainty_margin >= 0.0) {
            return Err(Error::Config("uncertainty margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// An image selected for mentoring, with the detections shown to the operator.
#[derive(Debug, Clone)]
pub struct MinedImage {
    pub sample: ImageSample,
    pub detections: Vec<Detection>,
}

/// Applies the selection rule to a single probability grid. Returns the
/// detections to present when the image is selected.
pub fn select(probs: &ProbGrid, cfg: &MiningConfig) -> Result<Option<Vec<Detection>>> {
    match cfg.strategy {
        MiningStrategy::AnyDetection => {
            let dets = detections_from_grid(probs, &cfg.class_thresholds)?;
            Ok((!dets.is_empty()).then_some(dets))
        }
        MiningStrategy::Uncertainty => {
            let s = probs.shape;
            if cfg.class_thresholds.len() != s.classes {
                return Err(Error::InvalidInput("threshold count differs from class count".into()));
            }
            let mut uncertain: BTreeSet<(usize, Cell)> = BTreeSet::new();
            for r in 0..s.rows {
                for c in 0..s.cols {
                    for (k, &t) in cfg.class_thresholds.iter().enumerate() {
                        if (probs.get(r, c, k) - t).abs() <= cfg.uncertainty_margin {
                            uncertain.insert((k, (r, c)));
                        }
                    }
                }
            }
            if uncertain.is_empty() {
                return Ok(None);
            }
            // Areas grown from the lowered thresholds so near-boundary cells
            // are shown to the operator.
            let lowered: Vec<f64> = cfg
                .class_thresholds
                .iter()
                .map(|&t| (t - cfg.uncertainty_margin).max(f64::MIN_POSITIVE))
                .collect();
            let dets = detections_from_grid(probs, &lowered)?
                .into_iter()
                .filter(|d| d.cells.iter().any(|&cell| uncertain.contains(&(d.class_id, cell))))
                .collect();
            Ok(Some(dets))
        }
    }
}

/// Runs the baseline on the pool and keeps the images of interest, in pool
/// order.
pub fn mine_images(baseline: &Classifier, pool: &[ImageSample], cfg: &MiningConfig) -> Result<Vec<MinedImage>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for chunk in pool.chunks(64) {
        let images: Vec<_> = chunk.iter().map(|s| &s.pixels).collect();
        let probs = baseline.forward(&images)?;
        for (sample, p) in chunk.iter().zip(&probs) {
            if let Some(detections) = select(p, cfg)? {
                out.push(MinedImage {
                    sample: sample.clone(),
                    detections,
                });
            }
        }
    }
    Ok(out)
}

/// Converts a completed session into `(label, mask)`.
///
/// Infirmed cells get an all-zero target; confirmed cells a one-hot target
/// for the detected class. A confirmed verdict overrides an infirmed one on
/// shared cells; between confirmed detections of different classes the more
/// confident one wins (ties go to the lower class id).
pub fn build_partial_ground_truth(session: &MentoringSession, shape: GridShape) -> Result<PartialLabel> {
    if session.status != SessionStatus::Completed {
        return Err(Error::Precondition(format!("session {} is not completed", session.id)));
    }
    let mut label = GridLabel::zeros(shape);
    let mut mask = AnnotationMask::empty(shape.rows, shape.cols);
    let verdict = |d: &Detection| session.feedback.get(&d.id).map(|f| f.verdict);

    for d in session.detections.iter().filter(|d| verdict(d) == Some(Verdict::Infirmed)) {
        for &(r, c) in &d.cells {
            check_cell(shape, r, c)?;
            mask.set(r, c, true);
        }
    }
    let mut confirmed: Vec<&Detection> = session
        .detections
        .iter()
        .filter(|d| verdict(d) == Some(Verdict::Confirmed))
        .collect();
    confirmed.sort_by(|a, b| {
        a.confidence
            .total_cmp(&b.confidence)
            .then(b.class_id.cmp(&a.class_id))
    });
    let mut owner: BTreeMap<Cell, usize> = BTreeMap::new();
    for d in confirmed {
        for &(r, c) in &d.cells {
            check_cell(shape, r, c)?;
            if let Some(prev) = owner.insert((r, c), d.class_id) {
                if prev != d.class_id {
                    log::debug!(
                        "session {}: cell ({r},{c}) confirmed as class {prev} and {}; keeping {}",
                        session.id,
                        d.class_id,
                        d.class_id
                    );
                }
            }
            mask.set(r, c, true);
            label.set_cell(r, c, Some(d.class_id));
        }
    }
    Ok(PartialLabel { label, mask })
}

fn check_cell(shape: GridShape, r: usize, c: usize) -> Result<()> {
    if r >= shape.rows || c >= shape.cols {
        return Err(Error::InvalidInput(format!("cell ({r},{c}) outside grid")));
    }
    Ok(())
}

/// Scripted operator: confirms a detection when it overlaps the true cells of
/// its own class with IoU at least `iou_min`, infirms it otherwise. Detections
/// on defects of another class are infirmed, as a binary verdict cannot fix
/// the class.
pub fn oracle_annotate(
    session: &MentoringSession,
    true_label: &GridLabel,
    iou_min: f64,
    at: DateTime<Utc>,
) -> Result<MentoringSession> {
    let mut out = session.clone();
    let regions = true_label.regions();
    for d in &session.detections {
        let best = regions
            .iter()
            .filter(|t| t.class_id == d.class_id)
            .map(|t| cell_iou(&d.cells, &t.cells))
            .fold(0.0, f64::max);
        let verdict = if best >= iou_min {
            Verdict::Confirmed
        } else {
            Verdict::Infirmed
        };
        out.record(Feedback {
            detection_id: d.id.clone(),
            verdict,
            timestamp: at,
        })?;
    }
    out.complete(at)?;
    Ok(out)
}

/// Moves unannotated cells whose maximum baseline defect probability is below
/// `epsilon` into the annotated set as healthy.
pub fn omnia_expand(partial: &PartialLabel, baseline_probs: &ProbGrid, epsilon: f64) -> Result<PartialLabel> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidInput("epsilon must lie in [0, 1)".into()));
    }
    let s = baseline_probs.shape;
    if partial.label.shape() != s {
        return Err(Error::InvalidInput("baseline grid does not match the label".into()));
    }
    let mut out = partial.clone();
    for r in 0..s.rows {
        for c in 0..s.cols {
            if !out.mask.get(r, c) && baseline_probs.cell_max(r, c) < epsilon {
                out.mask.set(r, c, true);
                out.label.set_cell(r, c, None);
            }
        }
    }
    Ok(out)
}

/// For an image flagged healthy, every unannotated cell joins the annotated
/// set as healthy.
pub fn healthy_expand(sample: &ImageSample, partial: &PartialLabel) -> Result<PartialLabel> {
    let flag = sample
        .healthy_flag
        .ok_or_else(|| Error::Precondition(format!("sample {} has no healthy flag", sample.id)))?;
    if !flag {
        return Ok(partial.clone());
    }
    let s = partial.label.shape();
    for r in 0..s.rows {
        for c in 0..s.cols {
            if partial.mask.get(r, c) && partial.label.is_cell_defective(r, c) {
                return Err(Error::Conflict(format!(
                    "sample {} is flagged healthy but cell ({r},{c}) was confirmed defective",
                    sample.id
                )));
            }
        }
    }
    let mut out = partial.clone();
    for r in 0..s.rows {
        for c in 0..s.cols {
            if !out.mask.get(r, c) {
                out.mask.set(r, c, true);
                out.label.set_cell(r, c, None);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpansionOptions {
    pub healthy: bool,
    /// OMNIA-like threshold; `None` disables the rule.
    pub omnia_epsilon: Option<f64>,
}

/// Applies the enabled expansions: healthy knowledge first, then the
/// baseline-confidence rule.
pub fn expand(
    sample: &ImageSample,
    partial: &PartialLabel,
    baseline_probs: Option<&ProbGrid>,
    opts: ExpansionOptions,
) -> Result<PartialLabel> {
    let mut out = partial.clone();
    if opts.healthy {
        out = healthy_expand(sample, &out)?;
    }
    if let Some(eps) = opts.omnia_epsilon {
        let probs = baseline_probs
            .ok_or_else(|| Error::Precondition("baseline probabilities needed for expansion".into()))?;
        out = omnia_expand(&out, probs, eps)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{Domain, Image};

    fn now() -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000, 0).unwrap()
    }

    fn shape() -> GridShape {
        GridShape::new(4, 4, 2)
    }

    fn det(class: usize, cells: &[Cell], conf: f64) -> Detection {
        Detection::new(class, cells.iter().copied().collect(), conf)
    }

    fn completed(dets: Vec<Detection>, verdicts: &[Verdict]) -> MentoringSession {
        let mut s = MentoringSession::new("img", dets.clone(), now());
        for (d, v) in dets.iter().zip(verdicts) {
            s.record(Feedback {
                detection_id: d.id.clone(),
                verdict: *v,
                timestamp: now(),
            })
            .unwrap();
        }
        s.complete(now()).unwrap();
        s
    }

    fn probs_with(hot: &[(usize, usize, usize, f64)], fill: f64) -> ProbGrid {
        let s = shape();
        let mut v = vec![fill; s.entries()];
        for &(r, c, k, p) in hot {
            v[s.index(r, c, k)] = p;
        }
        ProbGrid::new(s, v).unwrap()
    }

    fn sample(healthy: Option<bool>) -> ImageSample {
        ImageSample {
            id: "x".into(),
            pixels: Image::filled(4, 4, 1, 0.0),
            domain: Domain::New,
            full_label: None,
            partial_label: None,
            healthy_flag: healthy,
        }
    }

    #[test]
    fn any_detection_selection() {
        let cfg = MiningConfig::any_detection(2, 0.5);
        assert!(select(&probs_with(&[], 0.3), &cfg).unwrap().is_none());
        let picked = select(&probs_with(&[(1, 1, 0, 0.7)], 0.1), &cfg).unwrap().unwrap();
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].confidence, 0.7);
    }

    #[test]
    fn uncertainty_selection_without_detection() {
        let cfg = MiningConfig {
            strategy: MiningStrategy::Uncertainty,
            class_thresholds: vec![0.5, 0.5],
            uncertainty_margin: 0.1,
        };
        let p = probs_with(&[(2, 2, 1, 0.45)], 0.05);
        let dets = select(&p, &cfg).unwrap().unwrap();
        assert_eq!(dets.len(), 1);
        assert!(dets[0].cells.contains(&(2, 2)));
        assert!(select(&probs_with(&[], 0.05), &cfg).unwrap().is_none());
    }

    #[test]
    fn empty_session_gives_empty_mask() {
        let p = build_partial_ground_truth(&completed(vec![], &[]), shape()).unwrap();
        assert!(p.mask.is_empty());
        assert!(p.label.is_all_zero());
    }

    #[test]
    fn confirmed_and_infirmed_rules() {
        let cells = [(0, 0), (0, 1)];
        let p = build_partial_ground_truth(&completed(vec![det(1, &cells, 0.9)], &[Verdict::Confirmed]), shape())
            .unwrap();
        assert_eq!(p.mask, AnnotationMask::from_cells(4, 4, cells));
        for (r, c) in cells {
            assert_eq!(p.label.class_vector(r, c), &[0, 1]);
        }
        let p = build_partial_ground_truth(&completed(vec![det(1, &cells, 0.9)], &[Verdict::Infirmed]), shape())
            .unwrap();
        assert_eq!(p.mask.count(), 2);
        assert!(p.label.is_all_zero());
    }

    #[test]
    fn overlap_conflicts() {
        let a = det(0, &[(1, 1), (1, 2)], 0.6);
        let b = det(1, &[(1, 2), (1, 3)], 0.8);
        let p = build_partial_ground_truth(
            &completed(vec![a.clone(), b.clone()], &[Verdict::Confirmed, Verdict::Infirmed]),
            shape(),
        )
        .unwrap();
        assert_eq!(p.label.class_vector(1, 2), &[1, 0]);
        assert_eq!(p.label.class_vector(1, 3), &[0, 0]);
        let p = build_partial_ground_truth(&completed(vec![a, b], &[Verdict::Confirmed, Verdict::Confirmed]), shape())
            .unwrap();
        assert_eq!(p.label.class_vector(1, 2), &[0, 1]);
        assert_eq!(p.label.class_vector(1, 1), &[1, 0]);
    }

    #[test]
    fn open_session_is_rejected() {
        let s = MentoringSession::new("img", vec![det(0, &[(0, 0)], 0.9)], now());
        assert!(matches!(build_partial_ground_truth(&s, shape()), Err(Error::Precondition(_))));
    }

    #[test]
    fn oracle_verdicts() {
        let mut truth = GridLabel::zeros(shape());
        truth.set(0, 0, 0, true);
        truth.set(0, 1, 0, true);
        truth.set(3, 3, 1, true);
        let exact = det(0, &[(0, 0), (0, 1)], 0.9);
        let healthy = det(0, &[(2, 0)], 0.8);
        let wrong_class = det(0, &[(3, 3)], 0.7);
        // iou 1/5 = 0.2 against the two-cell region
        let loose = det(0, &[(0, 1), (1, 0), (1, 1), (1, 2)], 0.6);
        let s = MentoringSession::new("img", vec![exact.clone(), healthy.clone(), wrong_class.clone(), loose.clone()], now());
        let done = oracle_annotate(&s, &truth, 0.3, now()).unwrap();
        assert_eq!(done.status, SessionStatus::Completed);
        let v = |d: &Detection| done.feedback[&d.id].verdict;
        assert_eq!(v(&exact), Verdict::Confirmed);
        assert_eq!(v(&healthy), Verdict::Infirmed);
        assert_eq!(v(&wrong_class), Verdict::Infirmed);
        assert_eq!(v(&loose), Verdict::Infirmed);
        assert!(build_partial_ground_truth(&done, shape()).is_ok());
    }

    #[test]
    fn omnia_rules() {
        let partial = build_partial_ground_truth(&completed(vec![det(0, &[(0, 0)], 0.9)], &[Verdict::Confirmed]), shape())
            .unwrap();
        let probs = probs_with(&[(0, 0, 0, 0.003), (1, 1, 1, 0.5)], 0.005);
        assert_eq!(omnia_expand(&partial, &probs, 0.0).unwrap(), partial);
        let out = omnia_expand(&partial, &probs, 0.01).unwrap();
        assert!(out.mask.is_superset_of(&partial.mask));
        assert_eq!(out.label.class_vector(0, 0), &[1, 0]);
        assert!(out.mask.get(2, 2));
        assert!(!out.mask.get(1, 1));
        assert_eq!(out.mask.count(), 15);
    }

    #[test]
    fn healthy_rules() {
        let empty = PartialLabel {
            label: GridLabel::zeros(shape()),
            mask: AnnotationMask::empty(4, 4),
        };
        let out = healthy_expand(&sample(Some(true)), &empty).unwrap();
        assert_eq!(out.mask, AnnotationMask::full(4, 4));
        assert!(out.label.is_all_zero());
        assert_eq!(healthy_expand(&sample(Some(false)), &empty).unwrap(), empty);

        let infirmed = build_partial_ground_truth(&completed(vec![det(0, &[(0, 0)], 0.9)], &[Verdict::Infirmed]), shape())
            .unwrap();
        let out = healthy_expand(&sample(Some(true)), &infirmed).unwrap();
        assert_eq!(out.mask.count(), 16);
        assert!(out.label.is_all_zero());

        let confirmed = build_partial_ground_truth(&completed(vec![det(0, &[(0, 0)], 0.9)], &[Verdict::Confirmed]), shape())
            .unwrap();
        assert!(matches!(healthy_expand(&sample(Some(true)), &confirmed), Err(Error::Conflict(_))));
        assert!(matches!(healthy_expand(&sample(None), &empty), Err(Error::Precondition(_))));
    }

    #[test]
    fn feedback_overwrite_and_completion_errors() {
        let d = det(0, &[(0, 0)], 0.9);
        let mut s = MentoringSession::new("img", vec![d.clone()], now());
        assert!(matches!(s.complete(now()), Err(Error::Precondition(m)) if m.contains(&d.id)));
        for v in [Verdict::Confirmed, Verdict::Infirmed] {
            s.record(Feedback { detection_id: d.id.clone(), verdict: v, timestamp: now() }).unwrap();
        }
        assert_eq!(s.feedback[&d.id].verdict, Verdict::Infirmed);
        assert!(matches!(
            s.record(Feedback { detection_id: "nope".into(), verdict: Verdict::Confirmed, timestamp: now() }),
            Err(Error::NotFound(_))
        ));
        s.complete(now()).unwrap();
        assert!(matches!(
            s.record(Feedback { detection_id: d.id.clone(), verdict: Verdict::Confirmed, timestamp: now() }),
            Err(Error::Conflict(_))
        ));
    }
}
