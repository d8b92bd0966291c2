//! JSON model files.
//!
//! Matrices are stored as arrays of rows. Numbers use the shortest decimal
//! form that parses back to the same double, so a load/save cycle is
//! byte-identical.

use std::fs;
use std::path::Path;

use cdph_core::{CdphParams, DphParams, Matrix, Shift, Vector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// How a model came about.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Subcommand that wrote the file.
    pub source: String,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub log_likelihood: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelBody {
    Cdph {
        dims: [usize; 2],
        alpha: Vec<f64>,
        p: Vec<Vec<f64>>,
        u: Vec<Vec<f64>>,
        q1: Vec<Vec<f64>>,
        q2: Vec<Vec<f64>>,
        shift: Shift,
    },
    Dph {
        dim: usize,
        alpha: Vec<f64>,
        p: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: ModelBody,
    pub provenance: Provenance,
}

/// A validated model loaded from a file.
#[derive(Debug, Clone)]
pub enum Model {
    Cdph(CdphParams),
    Dph(DphParams),
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(name: &str, data: &[Vec<f64>], nrows: usize, ncols: usize) -> CliResult<Matrix> {
    if data.len() != nrows || data.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Model(format!("{name} must be {nrows}x{ncols}")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| data[i][j]))
}

fn vector(name: &str, data: &[f64], len: usize) -> CliResult<Vector> {
    if data.len() != len {
        return Err(CliError::Model(format!("{name} must have {len} entries")));
    }
    Ok(Vector::from_column_slice(data))
}

impl ModelFile {
    pub fn from_cdph(params: &CdphParams, provenance: Provenance) -> Self {
        let (e, s) = params.dims();
        Self {
            schema_version: SCHEMA_VERSION,
            body: ModelBody::Cdph {
                dims: [e, s],
                alpha: params.alpha().iter().copied().collect(),
                p: rows(params.p()),
                u: rows(params.u()),
                q1: rows(params.q1()),
                q2: rows(params.q2()),
                shift: params.shift(),
            },
            provenance,
        }
    }

    pub fn from_dph(params: &DphParams, provenance: Provenance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            body: ModelBody::Dph {
                dim: params.dim(),
                alpha: params.alpha().iter().copied().collect(),
                p: rows(params.p()),
            },
            provenance,
        }
    }

    /// Rebuilds and validates the parameters.
    pub fn model(&self) -> CliResult<Model> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Model(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let invalid = |e: cdph_core::Error| CliError::Model(e.to_string());
        match &self.body {
            ModelBody::Cdph {
                dims: [e, s],
                alpha,
                p,
                u,
                q1,
                q2,
                shift,
            } => {
                let params = CdphParams::new(
                    vector("alpha", alpha, *e)?,
                    matrix("p", p, *e, *e)?,
                    matrix("u", u, *e, *s)?,
                    matrix("q1", q1, *s, *s)?,
                    matrix("q2", q2, *s, *s)?,
                )
                .and_then(|m| m.with_shift(*shift))
                .map_err(invalid)?;
                Ok(Model::Cdph(params))
            }
            ModelBody::Dph { dim, alpha, p } => {
                let params =
                    DphParams::new(vector("alpha", alpha, *dim)?, matrix("p", p, *dim, *dim)?)
                        .map_err(invalid)?;
                Ok(Model::Dph(params))
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut out =
            serde_json::to_string_pretty(self).expect("model files contain finite numbers");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text)
            .map_err(|e| CliError::Model(format!("malformed model file: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.in_file(path))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        if let Some(ll) = self.provenance.log_likelihood {
            if !ll.is_finite() {
                return Err(CliError::Numeric(format!(
                    "log-likelihood {ll} cannot be stored"
                )));
            }
        }
        fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }
}

/// Loads and validates a model file.
pub fn load_model(path: &Path) -> CliResult<Model> {
    ModelFile::load(path)?.model().map_err(|e| e.in_file(path))
}

/// Loads a model file that must hold a bivariate model.
pub fn load_cdph(path: &Path) -> CliResult<CdphParams> {
    match load_model(path)? {
        Model::Cdph(m) => Ok(m),
        Model::Dph(_) => Err(CliError::data(path, "expected a bivariate (cdph) model")),
    }
}
