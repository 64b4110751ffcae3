use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, norm, Tensor};

const SYMMETRY_TOL: f64 = 1e-8;
const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;

/// Eigendecomposition of a symmetric non-negative-definite matrix.
#[derive(Clone, Debug)]
pub struct Spectrum {
    /// Descending, non-negative.
    pub eigenvalues: Vec<f64>,
    /// `n×n`, column `j` is the eigenvector of `eigenvalues[j]`.
    pub eigenvectors: Tensor,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| self.eigenvectors.get(i, j)).collect()
    }

    /// `U · diag(Λ) · Uᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let n = self.dim();
        let u = &self.eigenvectors;
        let mut scaled = u.clone();
        for i in 0..n {
            for (j, lam) in self.eigenvalues.iter().enumerate() {
                scaled.set(i, j, u.get(i, j) * lam);
            }
        }
        scaled.matmul(&u.transpose()).expect("square")
    }
}

/// Cyclic Jacobi eigendecomposition.
///
/// Sweeps over all off-diagonal pairs until the largest off-diagonal entry
/// drops below `1e-12` (relative to the matrix scale when it exceeds 1) or
/// 100 sweeps have run. Tiny negative eigenvalues from roundoff are clamped
/// to zero; clearly negative ones are rejected.
pub fn eig_sym(k: &Tensor) -> Result<Spectrum> {
    let n = k.rows();
    if k.shape().len() != 2 || k.cols() != n {
        return Err(Error::Shape(format!(
            "eig_sym needs a square matrix, got {:?}",
            k.shape()
        )));
    }
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((k.get(i, j) - k.get(j, i)).abs());
        }
    }
    if asym > SYMMETRY_TOL {
        return Err(Error::Asymmetric(asym));
    }
    if !k.is_finite() {
        return Err(Error::Degenerate("non-finite matrix entries".into()));
    }

    // symmetrize so rotations act on an exactly symmetric matrix
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (k.get(i, j) + k.get(j, i));
        }
    }
    let mut v = Tensor::identity(n).into_data();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let tol = OFF_DIAG_TOL * scale;

    for _ in 0..MAX_SWEEPS {
        let mut off: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off = off.max(a[i * n + j].abs());
            }
        }
        if off < tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, n, p, q, c, s);
                for r in 0..n {
                    let (vrp, vrq) = (v[r * n + p], v[r * n + q]);
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let lam_max = order.first().map_or(0.0, |&i| a[i * n + i].abs());
    let neg_tol = 1e-10_f64.max(1e-9 * lam_max);
    let mut eigenvalues = Vec::with_capacity(n);
    let mut vectors = vec![0.0; n * n];
    for (col, &i) in order.iter().enumerate() {
        let lam = a[i * n + i];
        if lam < -neg_tol {
            return Err(Error::NotPsd(lam));
        }
        eigenvalues.push(lam.max(0.0));
        for r in 0..n {
            vectors[r * n + col] = v[r * n + i];
        }
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors: Tensor::matrix(n, n, vectors)?,
    })
}

/// Apply the Jacobi rotation `Jᵀ A J` in place.
fn rotate(a: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..n {
        let (arp, arq) = (a[r * n + p], a[r * n + q]);
        a[r * n + p] = c * arp - s * arq;
        a[r * n + q] = s * arp + c * arq;
    }
    for r in 0..n {
        let (apr, aqr) = (a[p * n + r], a[q * n + r]);
        a[p * n + r] = c * apr - s * aqr;
        a[q * n + r] = s * apr + c * aqr;
    }
    // the rotation annihilates (p, q) exactly in exact arithmetic
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu < 1e-12 || nv < 1e-12 {
        return Err(Error::Degenerate("cosine of a near-zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Central-difference gradient of `f` at `w`, one entry at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, w: &Tensor, step: f64) -> Tensor {
    let mut probe = w.clone();
    let mut out = Tensor::zeros(w.shape());
    for i in 0..w.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    out
}
