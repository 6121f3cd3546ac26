use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, Params};

/// Whether one coefficient vector is shared by all layers or each layer has its own.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Global,
    PerLayer,
}

/// Coefficients on the probability simplex, one row per layer (or a single row).
///
/// When learned they come from softmax-normalized logits; explicit coefficients
/// (hand-chosen or from the minimax solver) carry no logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexWeights {
    pub mode: WeightMode,
    logits: Option<Matrix>,
    lambda: Matrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsJson {
    mode: WeightMode,
    logits: Option<Vec<Vec<f64>>>,
    lambda: Vec<Vec<f64>>,
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

impl SimplexWeights {
    /// Uniform coefficients (zero logits). `layers` is ignored in global mode.
    pub fn uniform(experts: usize, mode: WeightMode, layers: usize) -> Result<Self> {
        let rows = match mode {
            WeightMode::Global => 1,
            WeightMode::PerLayer => layers,
        };
        Self::from_logits(mode, Matrix::zeros(rows, experts))
    }

    pub fn from_logits(mode: WeightMode, logits: Matrix) -> Result<Self> {
        if logits.rows() == 0 || logits.cols() == 0 {
            return Err(Error::Invalid("weights need at least one expert and one row".into()));
        }
        if mode == WeightMode::Global && logits.rows() != 1 {
            return Err(Error::Shape("global weights have exactly one row".into()));
        }
        let mut lambda = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            lambda.row_mut(r).copy_from_slice(&softmax(logits.row(r))?);
        }
        Ok(Self {
            mode,
            logits: Some(logits),
            lambda,
        })
    }

    /// Explicit coefficients. Each row must be non-negative with positive sum; it is
    /// renormalized to sum to one.
    pub fn from_lambda(mode: WeightMode, rows: &[Vec<f64>]) -> Result<Self> {
        let mut lambda = Matrix::from_rows(rows)?;
        if lambda.rows() == 0 || lambda.cols() == 0 {
            return Err(Error::Invalid("weights need at least one expert and one row".into()));
        }
        if mode == WeightMode::Global && lambda.rows() != 1 {
            return Err(Error::Shape("global weights have exactly one row".into()));
        }
        for r in 0..lambda.rows() {
            let row = lambda.row_mut(r);
            if row.iter().any(|v| *v < 0.0) {
                return Err(Error::Invalid("negative simplex coefficient".into()));
            }
            let z: f64 = row.iter().sum();
            if !(z > 0.0) {
                return Err(Error::Invalid("simplex row sums to zero".into()));
            }
            if z != 1.0 {
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
        Ok(Self {
            mode,
            logits: None,
            lambda,
        })
    }

    pub fn global(lambda: &[f64]) -> Result<Self> {
        Self::from_lambda(WeightMode::Global, &[lambda.to_vec()])
    }

    pub fn one_hot(experts: usize, k: usize) -> Result<Self> {
        if k >= experts {
            return Err(Error::OutOfRange { index: k, size: experts });
        }
        let mut v = vec![0.0; experts];
        v[k] = 1.0;
        Self::global(&v)
    }

    pub fn num_experts(&self) -> usize {
        self.lambda.cols()
    }

    pub fn num_rows(&self) -> usize {
        self.lambda.rows()
    }

    pub fn logits(&self) -> Option<&Matrix> {
        self.logits.as_ref()
    }

    pub fn lambda(&self) -> &Matrix {
        &self.lambda
    }

    /// Coefficients used at `layer`.
    pub fn row_for_layer(&self, layer: usize) -> &[f64] {
        match self.mode {
            WeightMode::Global => self.lambda.row(0),
            WeightMode::PerLayer => self.lambda.row(layer),
        }
    }

    /// Checks that the weights fit `experts` experts on a model with `layers` layers.
    pub fn check(&self, experts: usize, layers: usize) -> Result<()> {
        if self.num_experts() != experts {
            return Err(Error::Shape(format!(
                "{} coefficients for {} experts",
                self.num_experts(),
                experts
            )));
        }
        if self.mode == WeightMode::PerLayer && self.num_rows() != layers {
            return Err(Error::Shape(format!(
                "{} coefficient rows for {} layers",
                self.num_rows(),
                layers
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let j = WeightsJson {
            mode: self.mode,
            logits: self.logits.as_ref().map(to_rows),
            lambda: to_rows(&self.lambda),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: WeightsJson = serde_json::from_str(text)?;
        match j.logits {
            Some(l) => Self::from_logits(j.mode, Matrix::from_rows(&l)?),
            None => Self::from_lambda(j.mode, &j.lambda),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_json(&text)
    }
}

/// Trainable logits behind a [`SimplexWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexLogits {
    pub mode: WeightMode,
    pub logits: Matrix,
}

impl SimplexLogits {
    pub fn zeros(experts: usize, mode: WeightMode, layers: usize) -> Self {
        let rows = if mode == WeightMode::Global { 1 } else { layers };
        Self {
            mode,
            logits: Matrix::zeros(rows, experts),
        }
    }

    pub fn weights(&self) -> Result<SimplexWeights> {
        SimplexWeights::from_logits(self.mode, self.logits.clone())
    }
}

impl Params for SimplexLogits {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![self.logits.data()]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.logits.data_mut()]
    }
}
