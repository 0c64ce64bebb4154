//! File formats (double precision throughout): JSON for measures, couplings,
//! parameters, datasets and configs; CSV for cost matrices, coupling dumps
//! and training histories.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHeadParams, EncoderLayer, EncoderParams, MlpParams};
use crate::error::{Error, Result};
use crate::measures::{Coupling, DiscreteMeasure, Point};
use crate::model::{CouplingSystemSample, LossKind, SinkhornTransformerParams, TrainConfig};

/// `{"support": [[…], …], "weights": […]}`
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureJson {
    pub support: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl MeasureJson {
    pub fn from_measure(m: &DiscreteMeasure<f64>) -> Self {
        Self {
            support: m.support().iter().map(|p| p.coords.clone()).collect(),
            weights: m.weights().to_vec(),
        }
    }

    pub fn into_measure(self) -> Result<DiscreteMeasure<f64>> {
        let pts = self
            .support
            .into_iter()
            .map(Point::new)
            .collect::<Result<Vec<_>>>()?;
        DiscreteMeasure::new(pts, self.weights)
    }
}

/// `{"rows": [[…], …], "cols": [[…], …], "mass": [[…], …]}`
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingJson {
    pub rows: Vec<Vec<f64>>,
    pub cols: Vec<Vec<f64>>,
    pub mass: Vec<Vec<f64>>,
}

impl CouplingJson {
    pub fn from_coupling(c: &Coupling<f64>) -> Self {
        let mass = (0..c.nrows())
            .map(|i| (0..c.ncols()).map(|j| c.mass()[(i, j)]).collect())
            .collect();
        Self {
            rows: c.row_support().iter().map(|p| p.coords.clone()).collect(),
            cols: c.col_support().iter().map(|p| p.coords.clone()).collect(),
            mass,
        }
    }

    /// Declared marginals are recovered from the mass row/column sums.
    pub fn into_coupling(self) -> Result<Coupling<f64>> {
        let n = self.mass.len();
        if n == 0 {
            return Err(Error::Empty("coupling mass"));
        }
        let m = self.mass[0].len();
        if self.mass.iter().any(|r| r.len() != m) {
            return Err(Error::Parse("ragged mass matrix".into()));
        }
        let mass = Array2::from_shape_fn((n, m), |(i, j)| self.mass[i][j]);
        let rows = self
            .rows
            .into_iter()
            .map(Point::new)
            .collect::<Result<Vec<_>>>()?;
        let cols = self
            .cols
            .into_iter()
            .map(Point::new)
            .collect::<Result<Vec<_>>>()?;
        let row_marginal: Vec<f64> = (0..n).map(|i| (0..m).map(|j| mass[(i, j)]).sum()).collect();
        let col_marginal: Vec<f64> = (0..m).map(|j| (0..n).map(|i| mass[(i, j)]).sum()).collect();
        Coupling::new(rows, cols, mass, row_marginal, col_marginal, 1e-8)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl MatrixJson {
    fn from_array(a: &Array2<f64>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    fn into_array(self) -> Result<Array2<f64>> {
        if self.rows * self.cols != self.data.len() {
            return Err(Error::Parse(format!(
                "matrix declared {}x{} but carries {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Array2::from_shape_vec((self.rows, self.cols), self.data)
            .map_err(|e| Error::Parse(e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadJson {
    pub q: MatrixJson,
    pub k: MatrixJson,
    pub v: MatrixJson,
    pub w: MatrixJson,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpJson {
    pub w1: MatrixJson,
    pub b1: Vec<f64>,
    pub w2: MatrixJson,
    pub b2: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerJson {
    pub heads: Vec<HeadJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<MlpJson>,
}

/// Per-layer matrices in row-major order with declared shapes.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderJson {
    pub layers: Vec<LayerJson>,
}

impl EncoderJson {
    pub fn from_encoder(e: &EncoderParams<f64>) -> Self {
        Self {
            layers: e
                .layers
                .iter()
                .map(|l| LayerJson {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadJson {
                            q: MatrixJson::from_array(&h.q_mat),
                            k: MatrixJson::from_array(&h.k_mat),
                            v: MatrixJson::from_array(&h.v_mat),
                            w: MatrixJson::from_array(&h.w_mat),
                        })
                        .collect(),
                    mlp: l.mlp.as_ref().map(|m| MlpJson {
                        w1: MatrixJson::from_array(&m.w1),
                        b1: m.b1.to_vec(),
                        w2: MatrixJson::from_array(&m.w2),
                        b2: m.b2.to_vec(),
                    }),
                })
                .collect(),
        }
    }

    pub fn into_encoder(self) -> Result<EncoderParams<f64>> {
        let layers = self
            .layers
            .into_iter()
            .map(|l| {
                let heads = l
                    .heads
                    .into_iter()
                    .map(|h| {
                        Ok(AttentionHeadParams {
                            q_mat: h.q.into_array()?,
                            k_mat: h.k.into_array()?,
                            v_mat: h.v.into_array()?,
                            w_mat: h.w.into_array()?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mlp = match l.mlp {
                    Some(m) => Some(MlpParams {
                        w1: m.w1.into_array()?,
                        b1: Array1::from_vec(m.b1),
                        w2: m.w2.into_array()?,
                        b2: Array1::from_vec(m.b2),
                    }),
                    None => None,
                };
                Ok(EncoderLayer { heads, mlp })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderParams { layers })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParamsJson {
    pub q_encoder: EncoderJson,
    pub k_encoder: EncoderJson,
    pub shared: bool,
}

impl ModelParamsJson {
    pub fn from_params(p: &SinkhornTransformerParams<f64>) -> Self {
        Self {
            q_encoder: EncoderJson::from_encoder(&p.q_encoder),
            k_encoder: EncoderJson::from_encoder(p.k_params()),
            shared: p.shared,
        }
    }

    pub fn into_params(self) -> Result<SinkhornTransformerParams<f64>> {
        let q = self.q_encoder.into_encoder()?;
        if self.shared {
            Ok(SinkhornTransformerParams::new_shared(q))
        } else {
            Ok(SinkhornTransformerParams::new(q, self.k_encoder.into_encoder()?))
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleJson {
    pub mu: MeasureJson,
    pub nu: MeasureJson,
    pub target: CouplingJson,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetJson {
    pub samples: Vec<SampleJson>,
}

impl DatasetJson {
    pub fn from_samples(samples: &[CouplingSystemSample<f64>]) -> Self {
        Self {
            samples: samples
                .iter()
                .map(|s| SampleJson {
                    mu: MeasureJson::from_measure(&s.mu),
                    nu: MeasureJson::from_measure(&s.nu),
                    target: CouplingJson::from_coupling(&s.target),
                })
                .collect(),
        }
    }

    pub fn into_samples(self) -> Result<Vec<CouplingSystemSample<f64>>> {
        self.samples
            .into_iter()
            .map(|s| {
                CouplingSystemSample::new(
                    s.mu.into_measure()?,
                    s.nu.into_measure()?,
                    s.target.into_coupling()?,
                )
            })
            .collect()
    }
}

/// Training configuration file. Unknown keys are rejected; every numeric
/// field is range-checked before use.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigJson {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_unroll")]
    pub unroll: usize,
    #[serde(default = "default_loss")]
    pub loss: String,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<(usize, usize)>,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

fn default_seed() -> u64 {
    7
}
fn default_lr() -> f64 {
    0.25
}
fn default_momentum() -> f64 {
    0.9
}
fn default_iterations() -> usize {
    200
}
fn default_epsilon() -> f64 {
    1.0
}
fn default_unroll() -> usize {
    50
}
fn default_loss() -> String {
    "kl".into()
}
fn default_sizes() -> Vec<(usize, usize)> {
    vec![(5, 6), (6, 5), (7, 7), (8, 6), (6, 8), (5, 5), (7, 5), (8, 8), (6, 6), (5, 7), (7, 8), (8, 5)]
}
fn default_dim() -> usize {
    2
}

impl Default for TrainConfigJson {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults parse")
    }
}

impl TrainConfigJson {
    /// Range-checks and converts into the typed training configuration.
    pub fn to_train_config(&self) -> Result<TrainConfig<f64>> {
        let loss: LossKind = self.loss.parse()?;
        let cfg = TrainConfig {
            seed: self.seed,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            iterations: self.iterations,
            batch_size: self.batch_size.unwrap_or(usize::MAX),
            epsilon: self.epsilon,
            unroll: self.unroll,
            loss,
            eval_tol: 1e-9,
        };
        cfg.validate()?;
        if self.dim == 0 || self.dim > 16 {
            return Err(Error::Invalid(format!("dim {} outside 1..=16", self.dim)));
        }
        Ok(cfg)
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Parses a dense CSV matrix (comma-separated rows, no header).
pub fn read_cost_csv(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)?;
    parse_cost_csv(&text)
}

pub fn parse_cost_csv(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("cost csv"));
    }
    let m = rows[0].len();
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Parse("ragged cost csv".into()));
    }
    let n = rows.len();
    Ok(Array2::from_shape_fn((n, m), |(i, j)| rows[i][j]))
}

/// Full-precision CSV rendering of a matrix.
pub fn matrix_to_csv(mass: &Array2<f64>) -> String {
    let mut out = String::new();
    for i in 0..mass.nrows() {
        let row: Vec<String> = (0..mass.ncols())
            .map(|j| format!("{:.17e}", mass[(i, j)]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::EncoderShape;
    use crate::measures::uniform_measure;

    #[test]
    fn measure_roundtrips_through_json() {
        let m = uniform_measure(vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]]).unwrap();
        let text = serde_json::to_string(&MeasureJson::from_measure(&m)).unwrap();
        let back: MeasureJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_measure().unwrap(), m);
    }

    #[test]
    fn coupling_roundtrips_through_json() {
        let mu = uniform_measure(vec![vec![0.0], vec![1.0]]).unwrap();
        let nu = uniform_measure(vec![vec![0.5], vec![1.5], vec![2.5]]).unwrap();
        let pi = Coupling::product(&mu, &nu);
        let text = serde_json::to_string(&CouplingJson::from_coupling(&pi)).unwrap();
        let back: CouplingJson = serde_json::from_str(&text).unwrap();
        let pi2 = back.into_coupling().unwrap();
        assert_eq!(pi2.mass(), pi.mass());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<MeasureJson, _> =
            serde_json::from_str(r#"{"support": [[0.0]], "weights": [1.0], "extra": 3}"#);
        assert!(r.is_err());
        let r: std::result::Result<TrainConfigJson, _> =
            serde_json::from_str(r#"{"learning_rte": 0.1}"#);
        assert!(r.is_err());
    }

    #[test]
    fn train_config_rejects_out_of_range_fields() {
        let cfg: TrainConfigJson = serde_json::from_str(r#"{"learning_rate": -1.0}"#).unwrap();
        assert!(cfg.to_train_config().is_err());
        let cfg: TrainConfigJson = serde_json::from_str(r#"{"unroll": 2}"#).unwrap();
        assert!(cfg.to_train_config().is_err());
        let cfg: TrainConfigJson = serde_json::from_str(r#"{"loss": "l3"}"#).unwrap();
        assert!(cfg.to_train_config().is_err());
    }

    #[test]
    fn encoder_params_roundtrip_through_json() {
        let shape = EncoderShape {
            input_dim: 2,
            key_dim: 3,
            value_dim: 2,
            heads: 2,
            hidden_dim: 4,
            layers: 2,
            output_dim: 3,
        };
        let enc = crate::attention::random_encoder::<f64>(&shape, 12);
        let text = serde_json::to_string(&EncoderJson::from_encoder(&enc)).unwrap();
        let back: EncoderJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_encoder().unwrap(), enc);
    }

    #[test]
    fn cost_csv_parses_and_rejects_ragged_input() {
        let a = parse_cost_csv("1.0, 2.0\n3.0, 4.5\n").unwrap();
        assert_eq!(a.dim(), (2, 2));
        assert_eq!(a[(1, 1)], 4.5);
        assert!(parse_cost_csv("1.0, 2.0\n3.0\n").is_err());
        assert!(parse_cost_csv("").is_err());
    }

    #[test]
    fn matrix_csv_is_full_precision() {
        let a = Array2::from_shape_fn((1, 1), |_| 1.0 / 3.0);
        let text = matrix_to_csv(&a);
        let back: f64 = text.trim().parse().unwrap();
        assert_eq!(back, 1.0 / 3.0);
    }
}
