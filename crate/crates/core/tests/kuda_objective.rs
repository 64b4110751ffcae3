use kuda::model::{Batch, FfnVariant, Intervention, ModelConfig, ToyTransformer};
use kuda::numerics::{finite_diff_grad, Tensor};
use kuda::unlearn::{
    capture_features, kuda_epoch, kuda_losses, run_kuda, KudaReference, RelaxedProjector,
    UnlearnConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(seed: u64, variant: FfnVariant, d_ff: usize, init_std: f64) -> ToyTransformer {
    ToyTransformer::new(ModelConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 4,
        d_ff,
        vocab_size: 24,
        max_seq_len: 8,
        ffn_variant: variant,
        seed,
        init_std,
    })
    .unwrap()
}

fn random_seqs(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..=5);
            (0..len).map(|_| rng.random_range(0..24)).collect()
        })
        .collect()
}

/// Largest entrywise relative error, with a floor of 1e-3 of the largest
/// gradient entry so near-zero entries are compared absolutely.
fn max_rel_err(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[test]
fn objective_gradients_match_finite_differences() {
    let layers = [0usize, 1, 2, 3];
    let mut worst = 0.0f64;
    let t = std::time::Instant::now();
    for seed in 0..20u64 {
        let variant = if seed % 2 == 0 {
            FfnVariant::Gated
        } else {
            FfnVariant::Classic
        };
        let beta = [0.1, 1.0, 2.0][seed as usize % 3];
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let ori = small_model(seed, variant, 32, 0.2);
        let forget = random_seqs(3, &mut rng);
        let retain = random_seqs(3, &mut rng);
        let reference = KudaReference::new(&ori, forget, retain, 3).unwrap();
        let mut un = ori.clone();
        for &l in &layers {
            let id = un.w_out_id(l);
            let noise = Tensor::randn(un.param(id).shape(), 0.2, &mut rng);
            un.param_mut(id).add_assign_scaled(&noise, 1.0);
        }
        let (fi, ri) = ([0usize, 1, 2], [0usize, 1, 2]);
        let losses = kuda_losses(&un, &reference, &fi, &ri, &layers, beta, true).unwrap();
        for (i, &l) in layers.iter().enumerate() {
            let analytic = losses.grad_f[i].add(&losses.grad_r[i]).unwrap();
            let id = un.w_out_id(l);
            let w = un.param(id).clone();
            let mut probe = un.clone();
            let numeric = finite_diff_grad(
                |x| {
                    *probe.param_mut(id) = x.clone();
                    kuda_losses(&probe, &reference, &fi, &ri, &layers, beta, false)
                        .unwrap()
                        .l_u()
                },
                &w,
                1e-5,
            );
            let floor = 1e-3 * analytic.max_abs().max(numeric.max_abs());
            let err = max_rel_err(&analytic, &numeric, floor);
            assert!(err < 1e-4, "seed {seed} layer {l}: relative error {err:e}");
            worst = worst.max(err);
        }
    }
    println!(
        "worst relative error {worst:e} in {:.1}s",
        t.elapsed().as_secs_f64()
    );
    assert!(t.elapsed().as_secs() < 120);
}

fn layer_out(model: &ToyTransformer, seqs: &[Vec<usize>], layer: usize) -> Tensor {
    let rec = model
        .forward_batch(&Batch::new(seqs), &Intervention::default())
        .unwrap();
    rec.layer_out[layer].clone()
}

#[test]
fn strict_null_space_keeps_retained_outputs_fixed() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ori = small_model(3, FfnVariant::Gated, 64, 0.2);
    let forget = random_seqs(4, &mut rng);
    let retain = random_seqs(6, &mut rng);
    let layers = vec![1usize, 2, 3];
    let reference = KudaReference::new(&ori, forget, retain.clone(), 3).unwrap();

    // every retained token row enters the covariance
    let spectra: Vec<_> = capture_features(&ori, &retain, &layers)
        .unwrap()
        .iter()
        .map(|c| c.spectrum().unwrap())
        .collect();
    let tau = spectra
        .iter()
        .map(|s| {
            let e = s.eigenvalues();
            let smallest_nonzero = e
                .iter()
                .copied()
                .filter(|&v| v > 1e-9 * e[0])
                .fold(f64::INFINITY, f64::min);
            assert!(
                e.iter().all(|&v| v < 1e-12 * e[0] || v >= smallest_nonzero),
                "no spectral gap"
            );
            0.5 * smallest_nonzero
        })
        .fold(f64::INFINITY, f64::min);

    let cfg = UnlearnConfig {
        beta: 2.0,
        tau,
        relative_tau: false,
        lr: 0.05,
        epochs: 100,
        batch_size: 4,
        layers: layers.clone(),
        ..UnlearnConfig::default()
    };
    let run = run_kuda(&ori, &reference, &cfg, &spectra).unwrap();
    assert_eq!(run.steps.len(), 100);
    assert!(run.null_dims.iter().all(|&d| d > 0 && d < 64));

    let before = layer_out(&ori, &retain, 3);
    let after = layer_out(&run.model, &retain, 3);
    let rel = after.sub(&before).unwrap().norm() / before.norm();
    assert!(rel < 1e-5, "retained outputs moved by {rel:e}");

    let l_f0 = run.steps[0].l_f;
    let l_f1 = kuda_losses(
        &run.model,
        &reference,
        &[0, 1, 2, 3],
        &[],
        &layers,
        cfg.beta,
        false,
    )
    .unwrap()
    .l_f;
    assert!(l_f1 <= 0.8 * l_f0, "L_f {l_f0} -> {l_f1}");
}

#[test]
fn epochs_only_touch_selected_output_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ori = small_model(5, FfnVariant::Gated, 48, 0.2);
    let reference =
        KudaReference::new(&ori, random_seqs(5, &mut rng), random_seqs(5, &mut rng), 2).unwrap();
    let cfg = UnlearnConfig {
        layers: vec![1, 2],
        lr: 0.1,
        batch_size: 2,
        ..UnlearnConfig::default()
    };
    let projectors: Vec<RelaxedProjector> = cfg
        .layers
        .iter()
        .map(|&l| RelaxedProjector::identity(l, 48))
        .collect();
    let mut un = ori.clone();
    let targets: Vec<_> = cfg.layers.iter().map(|&l| un.w_out_id(l)).collect();
    let id0 = un.w_out_id(1);
    let noise = Tensor::randn(un.param(id0).shape(), 0.05, &mut rng);
    un.param_mut(id0).add_assign_scaled(&noise, 1.0);
    let start = un.clone();
    let mut step = 0;
    for epoch in 0..3 {
        step += kuda_epoch(&mut un, &reference, &cfg, &projectors, epoch, step)
            .unwrap()
            .len();
        for (i, (a, b)) in start.params().iter().zip(un.params()).enumerate() {
            if targets.iter().any(|t| t.0 == i) {
                continue;
            }
            let unchanged = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(
                unchanged,
                "{} changed in epoch {epoch}",
                start.param_names()[i]
            );
        }
    }
    for &t in &targets {
        assert_ne!(start.param(t), un.param(t), "target matrix never moved");
    }
}
