//! Detection metrics and feature-embedding export.
//!
//! Predictions and ground truth are both regions: 4-connected components of
//! a class channel. A prediction matches a same-class truth region when their
//! cell IoU reaches `iou_min`; matching is greedy by descending confidence.

pub mod domain;
pub mod tsne;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{cell_iou, detections_from_grid, Detection};
use crate::model::Classifier;
use crate::sample::{Domain, ImageSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_min: f64,
    /// Detection floor used for the precision-recall curve.
    pub ap_floor: f64,
    /// Confidence thresholds reported as operating points.
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_min: 0.3,
            ap_floor: 0.05,
            thresholds: vec![0.5],
        }
    }
}

/// One prediction after matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredMatch {
    pub class_id: usize,
    pub confidence: f64,
    pub true_positive: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matching {
    pub scored: Vec<ScoredMatch>,
    /// Truth regions per class.
    pub truths: BTreeMap<usize, usize>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Matching {
    pub fn merge(&mut self, other: Matching) {
        self.scored.extend(other.scored);
        for (k, v) in other.truths {
            *self.truths.entry(k).or_default() += v;
        }
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Greedy one-to-one matching per class by descending prediction confidence.
pub fn match_detections(preds: &[Detection], truths: &[Detection], iou_min: f64) -> Matching {
    let mut out = Matching::default();
    for t in truths {
        *out.truths.entry(t.class_id).or_default() += 1;
    }
    let mut order: Vec<&Detection> = preds.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut taken = vec![false; truths.len()];
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truths.iter().enumerate() {
            if taken[j] || t.class_id != p.class_id {
                continue;
            }
            let iou = cell_iou(&p.cells, &t.cells);
            if iou >= iou_min && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        let tp = best.is_some();
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        out.scored.push(ScoredMatch {
            class_id: p.class_id,
            confidence: p.confidence,
            true_positive: tp,
        });
        if tp {
            out.tp += 1;
        } else {
            out.fp += 1;
        }
    }
    out.fn_ = taken.iter().filter(|&&t| !t).count();
    out
}

/// Area under the precision-recall curve of one class with all-points
/// interpolation. Predictions sharing a confidence enter the curve together.
pub fn average_precision(scored: &[ScoredMatch], num_truths: usize) -> Result<f64> {
    if num_truths == 0 {
        return Err(Error::UndefinedMetric("class has no ground-truth regions".into()));
    }
    let mut sorted: Vec<&ScoredMatch> = scored.iter().collect();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let conf = sorted[i].confidence;
        while i < sorted.len() && sorted[i].confidence == conf {
            if sorted[i].true_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / num_truths as f64, tp as f64 / (tp + fp) as f64));
    }
    // Precision envelope, right to left.
    let mut envelope = vec![0.0; points.len()];
    let mut running: f64 = 0.0;
    for k in (0..points.len()).rev() {
        running = running.max(points[k].1);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(recall, _)) in points.iter().enumerate() {
        ap += (recall - prev_recall) * envelope[k];
        prev_recall = recall;
    }
    Ok(ap)
}

/// Mean of per-class AP over classes with at least one truth region.
pub fn mean_average_precision(matching: &Matching, num_classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut per_class = vec![None; num_classes];
    let mut sum = 0.0;
    let mut n = 0;
    for (class, slot) in per_class.iter_mut().enumerate() {
        let truths = matching.truths.get(&class).copied().unwrap_or(0);
        if truths == 0 {
            continue;
        }
        let scored: Vec<ScoredMatch> = matching
            .scored
            .iter()
            .filter(|s| s.class_id == class)
            .copied()
            .collect();
        let ap = average_precision(&scored, truths)?;
        *slot = Some(ap);
        sum += ap;
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no class has ground-truth regions".into()));
    }
    Ok((sum / n as f64, per_class))
}

/// Precision and recall of a matching. Precision is 1 when nothing was
/// predicted; recall is 1 when there is nothing to find.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    (precision, recall)
}

/// Precision and recall when only predictions at or above `t` are kept.
pub fn precision_recall_at(preds: &[Detection], truths: &[Detection], iou_min: f64, t: f64) -> (f64, f64) {
    let kept: Vec<Detection> = preds.iter().filter(|p| p.confidence >= t).cloned().collect();
    let m = match_detections(&kept, truths, iou_min);
    precision_recall(m.tp, m.fp, m.fn_)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub images: usize,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub precision_at: BTreeMap<String, f64>,
    pub recall_at: BTreeMap<String, f64>,
    /// Counts at each operating threshold.
    pub counts: BTreeMap<String, Counts>,
}

impl DomainReport {
    pub fn precision(&self, t: f64) -> f64 {
        self.precision_at[&threshold_key(t)]
    }

    pub fn recall(&self, t: f64) -> f64 {
        self.recall_at[&threshold_key(t)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domains: BTreeMap<Domain, DomainReport>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

/// Evaluates a classifier on fully labeled samples of one domain.
pub fn evaluate(model: &Classifier, samples: &[ImageSample], cfg: &EvalConfig) -> Result<DomainReport> {
    let classes = model.arch.num_classes;
    let floor = vec![cfg.ap_floor; classes];
    let mut curve = Matching::default();
    let mut at: Vec<Matching> = cfg.thresholds.iter().map(|_| Matching::default()).collect();
    for chunk in samples.chunks(64) {
        let images: Vec<_> = chunk.iter().map(|s| &s.pixels).collect();
        let probs = model.forward(&images)?;
        for (sample, p) in chunk.iter().zip(&probs) {
            let label = sample
                .full_label
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("evaluation sample {} has no label", sample.id)))?;
            let truths = label.regions();
            curve.merge(match_detections(&detections_from_grid(p, &floor)?, &truths, cfg.iou_min));
            for (m, &t) in at.iter_mut().zip(&cfg.thresholds) {
                let preds = detections_from_grid(p, &vec![t; classes])?;
                m.merge(match_detections(&preds, &truths, cfg.iou_min));
            }
        }
    }
    let (map, per_class_ap) = mean_average_precision(&curve, classes)?;
    let mut report = DomainReport {
        images: samples.len(),
        map,
        per_class_ap,
        precision_at: BTreeMap::new(),
        recall_at: BTreeMap::new(),
        counts: BTreeMap::new(),
    };
    for (m, &t) in at.iter().zip(&cfg.thresholds) {
        let (p, r) = precision_recall(m.tp, m.fp, m.fn_);
        let key = threshold_key(t);
        report.precision_at.insert(key.clone(), p);
        report.recall_at.insert(key.clone(), r);
        report.counts.insert(
            key,
            Counts {
                tp: m.tp,
                fp: m.fp,
                fn_: m.fn_,
            },
        );
    }
    Ok(report)
}

/// Feature vector of one defective cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub domain: Domain,
    pub class_id: usize,
    pub features: Vec<f32>,
}

/// Collects feature-tap vectors at every labeled defective cell (one row per
/// class set on the cell).
pub fn export_embeddings(model: &Classifier, samples: &[ImageSample]) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for chunk in samples.chunks(64) {
        let images: Vec<_> = chunk.iter().map(|s| &s.pixels).collect();
        let feats = model.extract_features(&images)?;
        for (b, sample) in chunk.iter().enumerate() {
            let label = sample
                .full_label
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("sample {} has no label", sample.id)))?;
            let s = label.shape();
            if s.rows != feats.height || s.cols != feats.width {
                return Err(Error::InvalidInput("feature map does not align with the label grid".into()));
            }
            for r in 0..s.rows {
                for c in 0..s.cols {
                    for k in 0..s.classes {
                        if label.get(r, c, k) == 1 {
                            rows.push(EmbeddingRow {
                                domain: sample.domain,
                                class_id: k,
                                features: feats.vector(b, r, c).to_vec(),
                            });
                        }
                    }
                }
            }
        }
    }
    if rows.is_empty() {
        log::warn!("no defective cells in the embedding input");
    }
    Ok(rows)
}

/// Euclidean distance between the original- and new-domain centroids of each
/// class present in both domains.
pub fn centroid_distances(rows: &[EmbeddingRow]) -> BTreeMap<usize, f64> {
    let mut sums: BTreeMap<(usize, Domain), (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let e = sums
            .entry((r.class_id, r.domain))
            .or_insert_with(|| (vec![0.0; r.features.len()], 0));
        for (a, &f) in e.0.iter_mut().zip(&r.features) {
            *a += f as f64;
        }
        e.1 += 1;
    }
    let mut out = BTreeMap::new();
    let classes: Vec<usize> = sums.keys().map(|(c, _)| *c).collect();
    for class in classes {
        let (Some(o), Some(n)) = (sums.get(&(class, Domain::Original)), sums.get(&(class, Domain::New))) else {
            continue;
        };
        let d: f64 = o
            .0
            .iter()
            .zip(&n.0)
            .map(|(a, b)| (a / o.1 as f64 - b / n.1 as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        out.insert(class, d);
    }
    out
}

pub fn write_embeddings_csv(rows: &[EmbeddingRow], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = ["domain".to_string(), "class_id".to_string()]
        .into_iter()
        .chain((0..dim).map(|i| format!("f{i}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for r in rows {
        let feats: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},{},{}", r.domain.as_str(), r.class_id, feats.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn det(class: usize, cells: &[(usize, usize)], conf: f64) -> Detection {
        Detection::new(class, cells.iter().copied().collect::<BTreeSet<_>>(), conf)
    }

    #[test]
    fn exact_predictions_are_all_true_positives() {
        let truths = vec![det(0, &[(0, 0)], 1.0), det(1, &[(2, 2), (2, 3)], 1.0)];
        let m = match_detections(&truths, &truths, 0.3);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
    }

    #[test]
    fn prediction_without_truth_is_false_positive() {
        let m = match_detections(&[det(0, &[(0, 0)], 0.9)], &[], 0.3);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 0));
    }

    #[test]
    fn higher_confidence_wins_the_truth() {
        let truth = det(0, &[(1, 1)], 1.0);
        let preds = [det(0, &[(1, 1)], 0.6), det(0, &[(1, 1), (1, 2)], 0.9)];
        let m = match_detections(&preds, &[truth], 0.3);
        let tp: Vec<f64> = m.scored.iter().filter(|s| s.true_positive).map(|s| s.confidence).collect();
        assert_eq!(tp, vec![0.9]);
        assert_eq!(m.fp, 1);
    }

    #[test]
    fn ap_examples() {
        let one = [ScoredMatch { class_id: 0, confidence: 0.8, true_positive: true }];
        assert_eq!(average_precision(&one, 1).unwrap(), 1.0);
        let two = [
            ScoredMatch { class_id: 0, confidence: 0.4, true_positive: true },
            ScoredMatch { class_id: 0, confidence: 0.9, true_positive: false },
        ];
        assert_eq!(average_precision(&two, 1).unwrap(), 0.5);
        assert_eq!(average_precision(&[], 3).unwrap(), 0.0);
        assert!(matches!(average_precision(&[], 0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn map_skips_classes_without_truths() {
        let mut m = Matching::default();
        m.truths.insert(1, 1);
        m.scored.push(ScoredMatch { class_id: 1, confidence: 0.7, true_positive: true });
        m.scored.push(ScoredMatch { class_id: 0, confidence: 0.7, true_positive: false });
        let (map, per) = mean_average_precision(&m, 3).unwrap();
        assert_eq!(map, 1.0);
        assert_eq!(per, vec![None, Some(1.0), None]);
        assert!(mean_average_precision(&Matching::default(), 3).is_err());
    }

    #[test]
    fn precision_recall_conventions() {
        let truths = vec![det(0, &[(0, 0)], 1.0)];
        assert_eq!(precision_recall_at(&truths, &truths, 0.3, 0.5), (1.0, 1.0));
        assert_eq!(precision_recall_at(&[], &truths, 0.3, 0.5), (1.0, 0.0));
        assert_eq!(precision_recall(3, 2, 1), (0.6, 0.75));
        let low = [det(0, &[(0, 0)], 0.4)];
        assert_eq!(precision_recall_at(&low, &truths, 0.3, 0.5), (1.0, 0.0));
    }

    #[test]
    fn centroid_distance_per_class() {
        let rows = vec![
            EmbeddingRow { domain: Domain::Original, class_id: 0, features: vec![0.0, 0.0] },
            EmbeddingRow { domain: Domain::New, class_id: 0, features: vec![3.0, 4.0] },
            EmbeddingRow { domain: Domain::Original, class_id: 1, features: vec![1.0, 1.0] },
        ];
        let d = centroid_distances(&rows);
        assert_eq!(d.len(), 1);
        assert!((d[&0] - 5.0).abs() < 1e-12);
    }
}
