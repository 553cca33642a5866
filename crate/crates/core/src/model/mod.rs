//! Feature extractor, classifier, losses and optimizer.

mod arch;
mod checkpoint;
mod loss;
mod net;
mod params;

pub use arch::{count_madds, madds_per_layer, ArchSpec, Layer, Shape};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use loss::{ce_label_smoothing, ce_label_smoothing_with_grad, l2_normalize};
pub use net::{backward, classify, extract_features, forward_features, ForwardCache, Mode, INPUT_MEAN, INPUT_STD};
pub use params::{sgd_step, ModelParams, ParamBlock};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot parse architecture: {0}")]
    ArchParse(String),
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label smoothing {0} outside [0, 1)")]
    InvalidSmoothing(f32),
    #[error("forward cache was produced by parameter version {cached}, parameters are at {current}")]
    StaleCache { cached: u64, current: u64 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ModelError::Shape("ragged rows".into()));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// New matrix holding the given rows in order.
    pub fn gather(&self, rows: &[usize]) -> Matrix {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Matrix { rows: rows.len(), cols: self.cols, data }
    }
}

/// Feature vectors, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Matrix,
    pub normalized: bool,
    /// Rows that were all-zero when normalized (left as zero).
    pub zero_rows: Vec<bool>,
}

impl Embedding {
    pub fn new(values: Matrix) -> Self {
        let n = values.rows;
        Embedding { values, normalized: false, zero_rows: vec![false; n] }
    }

    pub fn rows(&self) -> usize {
        self.values.rows
    }

    pub fn dim(&self) -> usize {
        self.values.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        self.values.row(r)
    }
}

/// Classifier outputs, one row per image and one column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Matrix);

impl Logits {
    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn classes(&self) -> usize {
        self.0.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        self.0.row(r)
    }
}
