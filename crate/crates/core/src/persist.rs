//! Weight files.
//!
//! One JSON document per model: cell type, head, dims, seed metadata, the
//! shared bias (DB-LSTM only) and every matrix in row-major order. Quantized
//! exports attach each matrix's ladder as a `quant` block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::LstmWeights;
use crate::dblstm::{DbLstmWeights, ModelDims};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quantize::{self, QuantSpec};
use crate::signal::ClassifyDataset;
use crate::train::{predict_labels, CellKind, Recurrent, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub cell_type: CellKind,
    pub head: Task,
    pub dims: ModelDims,
    pub seed: u64,
    pub init_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    pub matrices: Vec<MatrixRecord>,
}

/// A trained cell of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    DbLstm(DbLstmWeights),
    Lstm(LstmWeights),
}

impl Model {
    pub fn dims(&self) -> ModelDims {
        match self {
            Model::DbLstm(w) => w.dims,
            Model::Lstm(w) => w.dims,
        }
    }

    pub fn cell_type(&self) -> CellKind {
        match self {
            Model::DbLstm(_) => CellKind::Dblstm,
            Model::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn head(&self) -> Task {
        if self.dims().num_classes > 0 {
            Task::Classify
        } else {
            Task::Forecast
        }
    }

    /// Number of stored scalars, bias columns included and `b` excluded.
    pub fn param_count(&self) -> usize {
        self.named_matrices().iter().map(|(_, m)| m.len()).sum()
    }

    /// `n x k` per-step outputs of the forecasting head.
    pub fn forecast(&self, inputs: &Matrix) -> Result<Matrix> {
        match self {
            Model::DbLstm(w) => w.forecast(inputs),
            Model::Lstm(w) => w.forecast(inputs),
        }
    }

    pub fn predict_labels(&self, data: &ClassifyDataset) -> Result<Vec<usize>> {
        match self {
            Model::DbLstm(w) => predict_labels(w, data),
            Model::Lstm(w) => predict_labels(w, data),
        }
    }

    fn named_matrices(&self) -> Vec<(String, &Matrix)> {
        match self {
            Model::DbLstm(w) => w.named_matrices(),
            Model::Lstm(w) => w.named_matrices(),
        }
    }
}

/// Seed metadata stored next to the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightMeta {
    pub seed: u64,
    pub init_scale: f64,
}

/// Builds the file document; `bits` attaches a ladder to every matrix.
pub fn to_file(model: &Model, meta: WeightMeta, bits: Option<u32>) -> Result<WeightFile> {
    let matrices = model
        .named_matrices()
        .into_iter()
        .map(|(name, m)| {
            Ok(MatrixRecord {
                name,
                rows: m.rows(),
                cols: m.cols(),
                data: m.data().to_vec(),
                quant: bits.map(|b| quantize::derive_spec(m, b)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightFile {
        cell_type: model.cell_type(),
        head: model.head(),
        dims: model.dims(),
        seed: meta.seed,
        init_scale: meta.init_scale,
        b: match model {
            Model::DbLstm(w) => Some(w.b),
            Model::Lstm(_) => None,
        },
        matrices,
    })
}

fn fill(name: &str, dst: &mut Matrix, rec: &MatrixRecord) -> Result<()> {
    if (rec.rows, rec.cols) != dst.shape() {
        return Err(Error::Config(format!(
            "matrix {name} is {}x{} but dims require {}x{}",
            rec.rows,
            rec.cols,
            dst.rows(),
            dst.cols()
        )));
    }
    *dst = Matrix::from_vec(rec.rows, rec.cols, rec.data.clone())?;
    Ok(())
}

/// Rebuilds the model, checking names, order and shapes against `dims`.
pub fn from_file(file: &WeightFile) -> Result<Model> {
    file.dims.validate()?;
    let head = if file.dims.num_classes > 0 { Task::Classify } else { Task::Forecast };
    if head != file.head {
        return Err(Error::Config(format!(
            "weight file head {:?} disagrees with num_classes = {}",
            file.head, file.dims.num_classes
        )));
    }
    let mut model = match file.cell_type {
        CellKind::Dblstm => {
            let b = file.b.ok_or_else(|| Error::Config("DB-LSTM weight file is missing `b`".into()))?;
            if !b.is_finite() {
                return Err(Error::NonFinite(0));
            }
            Model::DbLstm(DbLstmWeights::zeros(file.dims, b))
        }
        CellKind::Lstm => Model::Lstm(LstmWeights::zeros(file.dims)),
    };
    let names: Vec<String> = model.named_matrices().into_iter().map(|(n, _)| n).collect();
    if names.len() != file.matrices.len() {
        return Err(Error::Config(format!("expected {} matrices, found {}", names.len(), file.matrices.len())));
    }
    let targets = match &mut model {
        Model::DbLstm(w) => w.matrices_mut(),
        Model::Lstm(w) => w.matrices_mut(),
    };
    for ((name, dst), rec) in names.iter().zip(targets).zip(&file.matrices) {
        if &rec.name != name {
            return Err(Error::Config(format!("expected matrix {name}, found {}", rec.name)));
        }
        fill(name, dst, rec)?;
    }
    Ok(model)
}

pub fn to_json(file: &WeightFile) -> Result<String> {
    let mut s = serde_json::to_string_pretty(file)?;
    s.push('\n');
    Ok(s)
}

pub fn save(path: &Path, file: &WeightFile) -> Result<()> {
    std::fs::write(path, to_json(file)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, WeightFile)> {
    let text = std::fs::read_to_string(path)?;
    let file: WeightFile = serde_json::from_str(&text)?;
    Ok((from_file(&file)?, file))
}
