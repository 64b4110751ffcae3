//! Standalone evaluation of the two feed-forward variants on a single vector.
//!
//! Matrices use the row-vector convention of the model (`h · W`), so `W_in`
//! is `d_model × d_ff` and `W_out` is `d_ff × d_model`.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tensor};

/// Key and value produced by one feed-forward evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyValue {
    /// Input to the output matrix (`W_out` / `W_down`).
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

fn row_times(h: &[f64], w: &Tensor, what: &str) -> Result<Vec<f64>> {
    if w.shape().len() != 2 || w.rows() != h.len() {
        return Err(Error::Shape(format!(
            "{what}: vector of length {} against matrix {:?}",
            h.len(),
            w.shape()
        )));
    }
    let row = Tensor::matrix(1, h.len(), h.to_vec())?;
    Ok(row.matmul(w)?.into_data())
}

/// `k = ReLU(h · W_in)`, `v = k · W_out`.
pub fn ffn_classic(h: &[f64], w_in: &Tensor, w_out: &Tensor) -> Result<KeyValue> {
    let key: Vec<f64> = row_times(h, w_in, "W_in")?
        .into_iter()
        .map(|x| x.max(0.0))
        .collect();
    let value = row_times(&key, w_out, "W_out")?;
    Ok(KeyValue { key, value })
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `k = Swish(h · W_gate) ⊙ (h · W_up)`, `v = k · W_down`.
pub fn ffn_gated(h: &[f64], w_gate: &Tensor, w_up: &Tensor, w_down: &Tensor) -> Result<KeyValue> {
    let gate = row_times(h, w_gate, "W_gate")?;
    let up = row_times(h, w_up, "W_up")?;
    if gate.len() != up.len() {
        return Err(Error::Shape("W_gate and W_up widths differ".into()));
    }
    let key: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| swish(g) * u).collect();
    let value = row_times(&key, w_down, "W_down")?;
    Ok(KeyValue { key, value })
}
