use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AnnotationMask, GridLabel, GridShape};

/// Acquisition domain of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Original,
    New,
}

impl Domain {
    /// Target used by the domain classifier: original 0, new 1.
    pub fn target(self) -> f64 {
        match self {
            Domain::Original => 0.0,
            Domain::New => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Original => "original",
            Domain::New => "new",
        }
    }
}

/// Image pixels in `[0, 1]`, stored row-major as `(height, width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }
}

/// Partial ground truth: a label meaningful only where the mask is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialLabel {
    pub label: GridLabel,
    pub mask: AnnotationMask,
}

impl PartialLabel {
    /// Nothing annotated.
    pub fn empty(shape: GridShape) -> Self {
        Self {
            label: GridLabel::zeros(shape),
            mask: AnnotationMask::empty(shape.rows, shape.cols),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Image,
    pub domain: Domain,
    pub full_label: Option<GridLabel>,
    pub partial_label: Option<PartialLabel>,
    pub healthy_flag: Option<bool>,
}

impl ImageSample {
    /// Checks the label invariants of a sample.
    pub fn validate(&self) -> Result<()> {
        if self.healthy_flag == Some(true) {
            if let Some(label) = &self.full_label {
                if !label.is_all_zero() {
                    return Err(Error::InvalidInput(format!(
                        "sample {} is flagged healthy but its label has defects",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Returns a copy intended for weak supervision: the full label is hidden
    /// and replaced by the given partial label.
    pub fn with_partial(&self, partial: PartialLabel) -> Self {
        Self {
            id: self.id.clone(),
            pixels: self.pixels.clone(),
            domain: self.domain,
            full_label: None,
            partial_label: Some(partial),
            healthy_flag: self.healthy_flag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Confirmed,
    Infirmed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub detection_id: String,
    pub verdict: Verdict,
    pub timestamp: DateTime<Utc>,
}
