//! Retained-feature covariance and relaxed null-space projectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Intervention, ToyTransformer};
use crate::numerics::{eig_sym, Spectrum, Tensor};

/// Uniform sample without replacement of `round(ratio% · n)` indices,
/// returned in ascending order.
pub fn sample_retain(n: usize, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 100.0) {
        return Err(Error::Invalid(format!(
            "sample ratio {ratio} outside (0, 100]"
        )));
    }
    let m = (ratio / 100.0 * n as f64).round() as usize;
    if m == 0 {
        return Err(Error::Invalid(format!(
            "sample ratio {ratio}% of {n} items selects nothing; raise the ratio"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Uncentered covariance of FFN keys, accumulated one block at a time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCovariance {
    pub layer: usize,
    sum: Tensor,
    count: usize,
}

impl FeatureCovariance {
    pub fn new(layer: usize, d_ff: usize) -> Self {
        Self {
            layer,
            sum: Tensor::zeros(&[d_ff, d_ff]),
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.rows()
    }

    /// Number of key rows accumulated.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Add `Σ kᵢᵀkᵢ` over the rows of `keys`.
    pub fn accumulate(&mut self, keys: &Tensor) -> Result<()> {
        if keys.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "keys of width {} for a {}-dim covariance",
                keys.cols(),
                self.dim()
            )));
        }
        let n = self.dim();
        crate::numerics::gemm_into(
            n,
            keys.rows(),
            n,
            keys.data(),
            true,
            keys.data(),
            false,
            self.sum.data_mut(),
            1.0,
        );
        self.count += keys.rows();
        Ok(())
    }

    /// `K = (1/n) Σ kᵀk`, symmetrized.
    pub fn matrix(&self) -> Result<Tensor> {
        if self.count == 0 {
            return Err(Error::Invalid("covariance of zero samples".into()));
        }
        let n = self.dim();
        let s = 1.0 / self.count as f64;
        let mut k = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                k.set(i, j, 0.5 * s * (self.sum.get(i, j) + self.sum.get(j, i)));
            }
        }
        Ok(k)
    }

    pub fn spectrum(&self) -> Result<FeatureSpectrum> {
        Ok(FeatureSpectrum {
            layer: self.layer,
            count: self.count,
            spectrum: eig_sym(&self.matrix()?)?,
        })
    }
}

/// FFN-key covariances of `model` at `layers`, over every token position of
/// `seqs`, streamed in chunks.
pub fn capture_features<S: AsRef<[usize]>>(
    model: &ToyTransformer,
    seqs: &[S],
    layers: &[usize],
) -> Result<Vec<FeatureCovariance>> {
    if seqs.is_empty() {
        return Err(Error::Invalid(
            "no sequences to capture features from".into(),
        ));
    }
    let cfg = model.config();
    if let Some(&l) = layers.iter().find(|&&l| l >= cfg.n_layers) {
        return Err(Error::Invalid(format!(
            "layer {l} outside {} layers",
            cfg.n_layers
        )));
    }
    let mut covs: Vec<FeatureCovariance> = layers
        .iter()
        .map(|&l| FeatureCovariance::new(l, cfg.d_ff))
        .collect();
    for chunk in seqs.chunks(64) {
        let rec = model.forward_batch(&Batch::new(chunk), &Intervention::default())?;
        for c in &mut covs {
            c.accumulate(&rec.ffn_key[c.layer])?;
        }
    }
    Ok(covs)
}

/// Eigendecomposition of one layer's covariance, reusable across τ.
#[derive(Clone, Debug)]
pub struct FeatureSpectrum {
    pub layer: usize,
    pub count: usize,
    pub spectrum: Spectrum,
}

impl FeatureSpectrum {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.spectrum.eigenvalues
    }

    /// Sum of eigenvalues, i.e. the mean squared key norm.
    pub fn trace(&self) -> f64 {
        self.eigenvalues().iter().sum()
    }

    /// Projector onto the eigenvectors with eigenvalue strictly below `tau`.
    pub fn projector(&self, tau: f64) -> Result<RelaxedProjector> {
        if !(tau >= 0.0) {
            return Err(Error::Invalid(format!(
                "threshold {tau} must be non-negative"
            )));
        }
        let n = self.spectrum.dim();
        let cols: Vec<usize> = (0..n)
            .filter(|&j| self.spectrum.eigenvalues[j] < tau)
            .collect();
        let u = &self.spectrum.eigenvectors;
        let mut basis = Tensor::zeros(&[n, cols.len()]);
        for (c, &j) in cols.iter().enumerate() {
            for i in 0..n {
                basis.set(i, c, u.get(i, j));
            }
        }
        let mut p = Tensor::zeros(&[n, n]);
        if !cols.is_empty() {
            crate::numerics::gemm_into(
                n,
                cols.len(),
                n,
                basis.data(),
                false,
                basis.data(),
                true,
                p.data_mut(),
                0.0,
            );
            // exact symmetry
            for i in 0..n {
                for j in i + 1..n {
                    let v = 0.5 * (p.get(i, j) + p.get(j, i));
                    p.set(i, j, v);
                    p.set(j, i, v);
                }
            }
        }
        Ok(RelaxedProjector {
            layer: self.layer,
            tau,
            null_dim: cols.len(),
            p,
        })
    }
}

/// `P_τ = N_τ N_τᵀ` for the eigenvectors `N_τ` of the retained-key
/// covariance whose eigenvalues lie below `τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedProjector {
    pub layer: usize,
    pub tau: f64,
    /// Dimension of the admitted subspace.
    pub null_dim: usize,
    pub p: Tensor,
}

impl RelaxedProjector {
    pub fn identity(layer: usize, n: usize) -> Self {
        Self {
            layer,
            tau: f64::INFINITY,
            null_dim: n,
            p: Tensor::identity(n),
        }
    }
}

pub fn build_projector(cov: &FeatureCovariance, tau: f64) -> Result<RelaxedProjector> {
    cov.spectrum()?.projector(tau)
}

/// `P · G`: contracts the key index of a `d_ff × d_model` gradient so that
/// `k · (P·G) = (k·P) · G` vanishes for retained keys.
pub fn project_gradient(grad: &Tensor, proj: &RelaxedProjector) -> Result<Tensor> {
    if grad.shape().len() != 2 || grad.rows() != proj.p.rows() {
        return Err(Error::Shape(format!(
            "gradient {:?} against a {}-dim projector",
            grad.shape(),
            proj.p.rows()
        )));
    }
    proj.p.matmul(grad)
}
