//! Grid geometry shared by every stage of the pipeline.
//!
//! The model classifies an `(H_out, W_out)` grid of cells, each with `C`
//! independent defect probabilities. A healthy cell has an all-zero class
//! vector. Ground truth is a [`GridLabel`]; partial ground truth pairs a label
//! with an [`AnnotationMask`] telling which cells actually carry information.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A grid cell as `(row, col)`.
pub type Cell = (usize, usize);

/// Output grid dimensions: rows, columns, classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub classes: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize, classes: usize) -> Self {
        Self { rows, cols, classes }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn entries(&self) -> usize {
        self.rows * self.cols * self.classes
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, class: usize) -> usize {
        (row * self.cols + col) * self.classes + class
    }
}

/// Binary `(H_out, W_out, C)` target. Entries are stored row-major with the
/// class axis innermost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "LabelRepr", try_from = "LabelRepr")]
pub struct GridLabel {
    shape: GridShape,
    values: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct LabelRepr {
    shape: [usize; 3],
    values: Vec<Vec<Vec<u8>>>,
}

impl From<GridLabel> for LabelRepr {
    fn from(label: GridLabel) -> Self {
        let s = label.shape;
        let values = (0..s.rows)
            .map(|r| {
                (0..s.cols)
                    .map(|c| label.class_vector(r, c).to_vec())
                    .collect()
            })
            .collect();
        LabelRepr {
            shape: [s.rows, s.cols, s.classes],
            values,
        }
    }
}

impl TryFrom<LabelRepr> for GridLabel {
    type Error = Error;

    fn try_from(repr: LabelRepr) -> Result<Self> {
        let shape = GridShape::new(repr.shape[0], repr.shape[1], repr.shape[2]);
        if repr.values.len() != shape.rows
            || repr.values.iter().any(|row| {
                row.len() != shape.cols || row.iter().any(|v| v.len() != shape.classes)
            })
        {
            return Err(Error::InvalidInput(
                "label values do not match the shape header".into(),
            ));
        }
        let values: Vec<u8> = repr.values.into_iter().flatten().flatten().collect();
        GridLabel::from_values(shape, values)
    }
}

impl GridLabel {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            values: vec![0; shape.entries()],
        }
    }

    pub fn from_values(shape: GridShape, values: Vec<u8>) -> Result<Self> {
        if values.len() != shape.entries() {
            return Err(Error::InvalidInput(format!(
                "label has {} entries, shape {:?} needs {}",
                values.len(),
                shape,
                shape.entries()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("label entries must be 0 or 1".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize, class: usize) -> u8 {
        self.values[self.shape.index(row, col, class)]
    }

    pub fn set(&mut self, row: usize, col: usize, class: usize, on: bool) {
        let idx = self.shape.index(row, col, class);
        self.values[idx] = on as u8;
    }

    pub fn class_vector(&self, row: usize, col: usize) -> &[u8] {
        let start = self.shape.index(row, col, 0);
        &self.values[start..start + self.shape.classes]
    }

    /// Overwrites the class vector of a cell: one-hot on `class`, or all-zero.
    pub fn set_cell(&mut self, row: usize, col: usize, class: Option<usize>) {
        for k in 0..self.shape.classes {
            self.set(row, col, k, Some(k) == class);
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn is_cell_defective(&self, row: usize, col: usize) -> bool {
        self.class_vector(row, col).iter().any(|&v| v == 1)
    }

    /// Cells labeled 1 for `class`.
    pub fn class_cells(&self, class: usize) -> BTreeSet<Cell> {
        let s = self.shape;
        let mut out = BTreeSet::new();
        for r in 0..s.rows {
            for c in 0..s.cols {
                if self.get(r, c, class) == 1 {
                    out.insert((r, c));
                }
            }
        }
        out
    }

    /// Ground-truth regions: 4-connected components per class, in the same
    /// form as model detections (confidence 1).
    pub fn regions(&self) -> Vec<Detection> {
        let probs = ProbGrid {
            shape: self.shape,
            values: self.values.iter().map(|&v| v as f64).collect(),
        };
        detections_from_grid(&probs, &vec![0.5; self.shape.classes])
            .expect("label grid and thresholds share a shape")
    }
}

/// Per-cell annotated set. `annotated[r][c]` is true exactly when the cell
/// contributes to the masked loss; the mask applies to all classes of a cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "MaskRepr", try_from = "MaskRepr")]
pub struct AnnotationMask {
    rows: usize,
    cols: usize,
    annotated: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    shape: [usize; 2],
    annotated: Vec<Vec<u8>>,
}

impl From<AnnotationMask> for MaskRepr {
    fn from(mask: AnnotationMask) -> Self {
        MaskRepr {
            shape: [mask.rows, mask.cols],
            annotated: mask
                .annotated
                .chunks(mask.cols.max(1))
                .map(|row| row.iter().map(|&b| b as u8).collect())
                .collect(),
        }
    }
}

impl TryFrom<MaskRepr> for AnnotationMask {
    type Error = Error;

    fn try_from(repr: MaskRepr) -> Result<Self> {
        let [rows, cols] = repr.shape;
        if repr.annotated.len() != rows || repr.annotated.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput(
                "mask values do not match the shape header".into(),
            ));
        }
        let mut annotated = Vec::with_capacity(rows * cols);
        for v in repr.annotated.into_iter().flatten() {
            match v {
                0 => annotated.push(false),
                1 => annotated.push(true),
                _ => return Err(Error::InvalidInput("mask entries must be 0 or 1".into())),
            }
        }
        Ok(Self {
            rows,
            cols,
            annotated,
        })
    }
}

impl AnnotationMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            annotated: vec![false; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            annotated: vec![true; rows * cols],
        }
    }

    pub fn from_cells(rows: usize, cols: usize, cells: impl IntoIterator<Item = Cell>) -> Self {
        let mut mask = Self::empty(rows, cols);
        for (r, c) in cells {
            mask.set(r, c, true);
        }
        mask
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.annotated[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.annotated[row * self.cols + col] = on;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.annotated
    }

    /// Number of annotated cells.
    pub fn count(&self) -> usize {
        self.annotated.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_superset_of(&self, other: &AnnotationMask) -> bool {
        self.annotated.len() == other.annotated.len()
            && self
                .annotated
                .iter()
                .zip(&other.annotated)
                .all(|(&a, &b)| a || !b)
    }
}

/// Model output for one image: independent per-class probabilities per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    pub shape: GridShape,
    pub values: Vec<f64>,
}

impl ProbGrid {
    pub fn new(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.entries() {
            return Err(Error::InvalidInput(format!(
                "probability grid has {} entries, shape needs {}",
                values.len(),
                shape.entries()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn get(&self, row: usize, col: usize, class: usize) -> f64 {
        self.values[self.shape.index(row, col, class)]
    }

    /// Maximum defect probability of a cell over all classes.
    pub fn cell_max(&self, row: usize, col: usize) -> f64 {
        let start = self.shape.index(row, col, 0);
        self.values[start..start + self.shape.classes]
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }
}

/// Inclusive grid-cell bounding box `(row_min, col_min, row_max, col_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", from = "[usize; 4]")]
pub struct GridBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl From<GridBox> for [usize; 4] {
    fn from(b: GridBox) -> Self {
        [b.row_min, b.col_min, b.row_max, b.col_max]
    }
}

impl From<[usize; 4]> for GridBox {
    fn from(a: [usize; 4]) -> Self {
        GridBox {
            row_min: a[0],
            col_min: a[1],
            row_max: a[2],
            col_max: a[3],
        }
    }
}

impl GridBox {
    pub fn bounding(cells: &BTreeSet<Cell>) -> Option<Self> {
        let mut it = cells.iter();
        let &(r, c) = it.next()?;
        let mut b = GridBox {
            row_min: r,
            col_min: c,
            row_max: r,
            col_max: c,
        };
        for &(r, c) in it {
            b.row_min = b.row_min.min(r);
            b.col_min = b.col_min.min(c);
            b.row_max = b.row_max.max(r);
            b.col_max = b.col_max.max(c);
        }
        Some(b)
    }
}

/// A connected defective region proposed by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: String,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: GridBox,
    pub confidence: f64,
    pub cells: BTreeSet<Cell>,
}

impl Detection {
    /// Builds a detection with its deterministic id.
    pub fn new(class_id: usize, cells: BTreeSet<Cell>, confidence: f64) -> Self {
        let bbox = GridBox::bounding(&cells).unwrap_or(GridBox {
            row_min: 0,
            col_min: 0,
            row_max: 0,
            col_max: 0,
        });
        let id = detection_id(class_id, &bbox, &cells);
        Self {
            id,
            class_id,
            bbox,
            confidence,
            cells,
        }
    }
}

fn detection_id(class_id: usize, bbox: &GridBox, cells: &BTreeSet<Cell>) -> String {
    let mut hasher = Sha256::new();
    for (r, c) in cells {
        hasher.update((*r as u64).to_le_bytes());
        hasher.update((*c as u64).to_le_bytes());
    }
    let digest = hasher.finalize();
    let short: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    format!(
        "c{}-{}-{}-{}-{}-{}",
        class_id, bbox.row_min, bbox.col_min, bbox.row_max, bbox.col_max, short
    )
}

/// Groups above-threshold cells into 4-connected areas, independently per
/// class. Output is ordered by class, then by the first cell of each area in
/// row-major order.
pub fn detections_from_grid(probs: &ProbGrid, class_thresholds: &[f64]) -> Result<Vec<Detection>> {
    let shape = probs.shape;
    if class_thresholds.len() != shape.classes {
        return Err(Error::InvalidInput(format!(
            "{} thresholds given for {} classes",
            class_thresholds.len(),
            shape.classes
        )));
    }
    let mut out = Vec::new();
    let mut seen = vec![false; shape.cells()];
    for (class, &threshold) in class_thresholds.iter().enumerate() {
        seen.iter_mut().for_each(|s| *s = false);
        let hot = |r: usize, c: usize| probs.get(r, c, class) >= threshold;
        for r0 in 0..shape.rows {
            for c0 in 0..shape.cols {
                if seen[r0 * shape.cols + c0] || !hot(r0, c0) {
                    continue;
                }
                let mut cells = BTreeSet::new();
                let mut confidence = 0.0f64;
                let mut queue = VecDeque::from([(r0, c0)]);
                seen[r0 * shape.cols + c0] = true;
                while let Some((r, c)) = queue.pop_front() {
                    cells.insert((r, c));
                    confidence = confidence.max(probs.get(r, c, class));
                    let neighbors = [
                        (r.wrapping_sub(1), c),
                        (r + 1, c),
                        (r, c.wrapping_sub(1)),
                        (r, c + 1),
                    ];
                    for (nr, nc) in neighbors {
                        if nr < shape.rows
                            && nc < shape.cols
                            && !seen[nr * shape.cols + nc]
                            && hot(nr, nc)
                        {
                            seen[nr * shape.cols + nc] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
                out.push(Detection::new(class, cells, confidence));
            }
        }
    }
    Ok(out)
}

/// Paints detections back onto a binary grid, per class.
pub fn rasterize(shape: GridShape, detections: &[Detection]) -> GridLabel {
    let mut label = GridLabel::zeros(shape);
    for det in detections {
        for &(r, c) in &det.cells {
            label.set(r, c, det.class_id, true);
        }
    }
    label
}

/// Intersection over union of two cell sets; 0 when both are empty.
pub fn cell_iou(a: &BTreeSet<Cell>, b: &BTreeSet<Cell>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, classes: usize, hot: &[(usize, usize, usize, f64)]) -> ProbGrid {
        let shape = GridShape::new(rows, cols, classes);
        let mut values = vec![0.0; shape.entries()];
        for &(r, c, k, p) in hot {
            values[shape.index(r, c, k)] = p;
        }
        ProbGrid::new(shape, values).unwrap()
    }

    fn cells(list: &[Cell]) -> BTreeSet<Cell> {
        list.iter().copied().collect()
    }

    #[test]
    fn all_zero_grid_has_no_detections() {
        let g = grid(4, 4, 3, &[]);
        assert!(detections_from_grid(&g, &[0.5, 0.3, 0.9]).unwrap().is_empty());
    }

    #[test]
    fn singleton_detection() {
        let g = grid(5, 5, 1, &[(2, 3, 0, 0.9)]);
        let dets = detections_from_grid(&g, &[0.5]).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, GridBox::from([2, 3, 2, 3]));
        assert_eq!(dets[0].confidence, 0.9);
        assert_eq!(dets[0].class_id, 0);
    }

    #[test]
    fn diagonal_cells_are_separate_areas() {
        let g = grid(2, 2, 1, &[(0, 0, 0, 0.8), (1, 1, 0, 0.8)]);
        let dets = detections_from_grid(&g, &[0.5]).unwrap();
        assert_eq!(dets.len(), 2);
        assert_ne!(dets[0].id, dets[1].id);
    }

    #[test]
    fn classes_may_overlap() {
        let g = grid(3, 3, 2, &[(1, 1, 0, 0.7), (1, 1, 1, 0.6), (1, 2, 1, 0.55)]);
        let dets = detections_from_grid(&g, &[0.5, 0.5]).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[1].cells, cells(&[(1, 1), (1, 2)]));
        assert_eq!(dets[1].confidence, 0.6);
    }

    #[test]
    fn threshold_mismatch_is_invalid_input() {
        let g = grid(2, 2, 2, &[]);
        assert!(matches!(
            detections_from_grid(&g, &[0.5]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn ids_are_deterministic() {
        let g = grid(4, 4, 1, &[(0, 0, 0, 0.9), (0, 1, 0, 0.8)]);
        let a = detections_from_grid(&g, &[0.5]).unwrap();
        let b = detections_from_grid(&g, &[0.5]).unwrap();
        assert_eq!(a[0].id, b[0].id);
        assert!(a[0].id.starts_with("c0-0-0-0-1-"));
    }

    #[test]
    fn iou_examples() {
        let a = cells(&[(0, 0), (0, 1)]);
        let b = cells(&[(0, 1), (0, 2)]);
        assert_eq!(cell_iou(&a, &a), 1.0);
        assert_eq!(cell_iou(&a, &cells(&[(5, 5)])), 0.0);
        assert!((cell_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cell_iou(&BTreeSet::new(), &BTreeSet::new()), 0.0);
    }

    #[test]
    fn label_json_form() {
        let mut label = GridLabel::zeros(GridShape::new(1, 2, 2));
        label.set(0, 1, 0, true);
        let json = serde_json::to_string(&label).unwrap();
        assert_eq!(json, r#"{"shape":[1,2,2],"values":[[[0,0],[1,0]]]}"#);
        let back: GridLabel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, label);
        assert!(serde_json::from_str::<GridLabel>(r#"{"shape":[1,1,1],"values":[[[2]]]}"#).is_err());
    }

    #[test]
    fn mask_json_form() {
        let mask = AnnotationMask::from_cells(2, 2, [(1, 0)]);
        let json = serde_json::to_string(&mask).unwrap();
        assert_eq!(json, r#"{"shape":[2,2],"annotated":[[0,0],[1,0]]}"#);
        assert_eq!(serde_json::from_str::<AnnotationMask>(&json).unwrap(), mask);
    }

    #[test]
    fn detection_json_form() {
        let det = Detection::new(1, cells(&[(2, 3)]), 0.75);
        let v = serde_json::to_value(&det).unwrap();
        assert_eq!(v["box"], serde_json::json!([2, 3, 2, 3]));
        assert_eq!(v["cells"], serde_json::json!([[2, 3]]));
        assert_eq!(v["class_id"], 1);
    }
}
