use kuda::numerics::{eig_sym, Tensor};
use kuda::unlearn::{project_gradient, FeatureCovariance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Covariance of `rank` random key rows with a decaying column scale, so
/// spectra span several orders of magnitude.
fn random_cov(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> FeatureCovariance {
    let mut keys = Tensor::randn(&[rank, n], 1.0, rng);
    for r in 0..rank {
        for c in 0..n {
            let v = keys.get(r, c) * (-(c as f64) / n as f64 * 4.0).exp();
            keys.set(r, c, v);
        }
    }
    let mut cov = FeatureCovariance::new(0, n);
    cov.accumulate(&keys).unwrap();
    cov
}

#[test]
fn projector_properties_over_random_psd_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = 0;
    for case in 0..110 {
        let n = if case % 10 == 0 {
            128
        } else {
            rng.random_range(2..=96)
        };
        let rank = rng.random_range(1..=2 * n);
        let spec = random_cov(n, rank, &mut rng).spectrum().unwrap();
        let eig = spec.eigenvalues();
        let mut taus = [
            0.0,
            eig[n - 1] * 0.5,
            eig[n / 2],
            eig[0] * 0.01,
            eig[0] * 2.0,
        ];
        taus.sort_by(f64::total_cmp);
        let mut last_dim = 0;
        for &tau in &taus {
            let proj = spec.projector(tau).unwrap();
            let p = &proj.p;
            assert!(proj.null_dim >= last_dim, "τ-monotonicity");
            last_dim = proj.null_dim;
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(p.get(i, j), p.get(j, i), "symmetry");
                }
            }
            let p2 = p.matmul(p).unwrap();
            assert!(
                p2.max_abs_diff(p) < 1e-8,
                "idempotence {}",
                p2.max_abs_diff(p)
            );
            let ps = eig_sym(p).unwrap();
            for &l in &ps.eigenvalues {
                assert!(l.abs() < 1e-6 || (l - 1.0).abs() < 1e-6, "eigenvalue {l}");
            }
            let trace: f64 = (0..n).map(|i| p.get(i, i)).sum();
            assert!((trace - proj.null_dim as f64).abs() < 1e-6);
            let g = Tensor::randn(&[n, 3], 1.0, &mut rng);
            let pg = project_gradient(&g, &proj).unwrap();
            assert!(pg.norm() <= g.norm() * (1.0 + 1e-12), "contractive");
        }
        assert_eq!(last_dim, n);
        cases += 1;
    }
    assert!(cases >= 100);
}

#[test]
fn eigendecomposition_reconstructs_up_to_256() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &n in &[1usize, 17, 64, 256] {
        let x = Tensor::randn(&[n + 3, n], 1.0, &mut rng);
        let k = x.transpose().matmul(&x).unwrap();
        let s = eig_sym(&k).unwrap();
        let scale = k.max_abs();
        assert!(
            s.reconstruct().max_abs_diff(&k) < 1e-9 * scale.max(1.0),
            "n={n}"
        );
        assert!(s.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let u = &s.eigenvectors;
        let utu = u.transpose().matmul(u).unwrap();
        assert!(
            utu.max_abs_diff(&Tensor::identity(n)) < 1e-9,
            "orthonormal n={n}"
        );
    }
}

#[test]
fn strict_projection_annihilates_retained_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 48;
    let keys = Tensor::randn(&[20, n], 1.0, &mut rng);
    let mut cov = FeatureCovariance::new(0, n);
    cov.accumulate(&keys).unwrap();
    let spec = cov.spectrum().unwrap();
    let smallest_nonzero = spec
        .eigenvalues()
        .iter()
        .copied()
        .filter(|&l| l > 1e-9)
        .fold(f64::INFINITY, f64::min);
    let proj = spec.projector(smallest_nonzero * 0.5).unwrap();
    assert_eq!(proj.null_dim, n - 20);
    let g = Tensor::randn(&[n, 8], 1.0, &mut rng);
    let out = keys.matmul(&project_gradient(&g, &proj).unwrap()).unwrap();
    assert!(out.max_abs() < 1e-9);
}
