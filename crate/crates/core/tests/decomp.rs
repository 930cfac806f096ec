use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use tmle_lens_core::decomp::{
    coder_loss, jumprelu, mean_l0, mean_variance, reconstruction_mse, sae_grad_check, sae_loss, topk_activate,
    train_sae, train_transcoder, SaeConfig, SaeVariant, SparseCoder,
};
use tmle_lens_core::{rng, Error, Matrix};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, 50);
    Matrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

/// Rows drawn from a random 5-dimensional subspace of R^30.
fn planted(rows: usize, seed: u64) -> Matrix {
    let basis = gaussian(30, 5, seed);
    gaussian(rows, 5, seed + 1).matmul_transposed(&basis)
}

fn random_coder(k: usize, m: usize, out: usize, variant: SaeVariant, seed: u64) -> SparseCoder {
    let mut c = SparseCoder::zeros(k, m, out, variant);
    let mut r = rng::stream(seed, 51);
    let params: Vec<f64> = c.parameters().iter().map(|_| r.random_range(-0.5..0.5)).collect();
    c.set_parameters(&params).unwrap();
    if let SaeVariant::JumpRelu { theta, .. } = variant {
        c.threshold = vec![theta; m];
    }
    c
}

#[test]
fn loss_matches_scalar_loop() {
    let c = random_coder(3, 4, 3, SaeVariant::L1 { lambda: 0.2 }, 1);
    let x = gaussian(5, 3, 2);
    let mut expected = 0.0;
    for i in 0..5 {
        let mut f = [0.0; 4];
        for (j, fj) in f.iter_mut().enumerate() {
            let mut z = c.encoder.bias[j];
            for k in 0..3 {
                z += c.encoder.weight.get(j, k) * x.get(i, k);
            }
            *fj = z.max(0.0);
        }
        let mut row = 0.0;
        for o in 0..3 {
            let mut r = c.decoder.bias[o];
            for (j, fj) in f.iter().enumerate() {
                r += c.decoder.weight.get(o, j) * fj;
            }
            row += (x.get(i, o) - r).powi(2);
        }
        row += 0.2 * f.iter().map(|v| v.abs()).sum::<f64>();
        expected += row / 5.0;
    }
    assert!((sae_loss(&c, &x, 0.2).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn l1_gradients_match_finite_differences() {
    for seed in 0..10 {
        let c = random_coder(6, 12, 6, SaeVariant::L1 { lambda: 0.1 }, seed);
        let x = gaussian(16, 6, 100 + seed);
        let rep = sae_grad_check(&c, &x, 0.1, 1e-5).unwrap();
        assert!(rep.checked > 0);
        assert!(rep.max_rel_error < 1e-3, "seed {seed}: {}", rep.max_rel_error);
    }
    let c = random_coder(3, 4, 3, SaeVariant::L1 { lambda: 0.1 }, 0);
    assert!(sae_grad_check(&c, &gaussian(4, 3, 0), 0.1, 1e-1).is_err());
}

#[test]
fn activation_helpers() {
    assert_eq!(topk_activate(&[0.5, 2.0, -1.0, 2.0], 2), vec![0.0, 2.0, 0.0, 2.0]);
    assert_eq!(topk_activate(&[1.0, 1.0, 1.0], 1), vec![1.0, 0.0, 0.0]);
    assert_eq!(jumprelu(0.3, 0.3), 0.3);
    assert_eq!(jumprelu(0.29, 0.3), 0.0);
}

#[test]
fn invalid_configs_are_rejected() {
    let acts = gaussian(1000, 8, 0);
    assert!(
        train_sae(&acts, &SaeConfig::new(8, 4, SaeVariant::L1 { lambda: 0.1 })).is_err(),
        "latent_dim < input_dim"
    );
    assert!(train_sae(&acts, &SaeConfig::new(8, 16, SaeVariant::TopK { k_active: 0 })).is_err());
    assert!(train_sae(&acts, &SaeConfig::new(8, 16, SaeVariant::TopK { k_active: 17 })).is_err());
    assert!(train_sae(&acts, &SaeConfig::new(8, 16, SaeVariant::L1 { lambda: -1.0 })).is_err());
    let few = gaussian(100, 8, 0);
    assert!(matches!(
        train_sae(&few, &SaeConfig::new(8, 16, SaeVariant::L1 { lambda: 0.1 })),
        Err(Error::TooFewRows { .. })
    ));
    let c = SparseCoder::zeros(3, 4, 3, SaeVariant::L1 { lambda: 0.1 });
    assert!(coder_loss(&c, &gaussian(2, 3, 0), &gaussian(2, 2, 0), 0.1).is_err());
}

#[test]
fn training_is_deterministic_and_keeps_unit_decoder_columns() {
    let x = planted(400, 3);
    let mut cfg = SaeConfig::new(30, 32, SaeVariant::L1 { lambda: 0.01 });
    cfg.epochs = 5;
    let (a, ra) = train_sae(&x, &cfg).unwrap();
    let (b, rb) = train_sae(&x, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.loss_curve.len(), 6);
    assert!(ra.loss_curve.last().unwrap() < &ra.loss_curve[0]);
    for j in 0..32 {
        let norm: f64 = (0..30).map(|o| a.decoder.weight.get(o, j).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
    assert_eq!(ra.reconstruction_mse, reconstruction_mse(&a, &x, &x).unwrap());
    assert_eq!(ra.mean_l0, mean_l0(&a, &x).unwrap());
    assert_eq!(ra.target_variance, mean_variance(&x));
}

#[test]
fn topk_coder_uses_exactly_k_latents() {
    let x = planted(700, 5);
    let mut cfg = SaeConfig::new(30, 64, SaeVariant::TopK { k_active: 5 });
    cfg.epochs = 3;
    let (c, r) = train_sae(&x, &cfg).unwrap();
    assert_eq!(r.mean_l0, 5.0);
    let f = c.encode(&x).unwrap();
    for i in 0..f.rows() {
        assert_eq!(f.row(i).iter().filter(|v| **v != 0.0).count(), 5);
    }
}

#[test]
fn jumprelu_thresholds_stay_positive() {
    let x = planted(700, 6);
    let mut cfg = SaeConfig::new(
        30,
        64,
        SaeVariant::JumpRelu {
            theta: 0.1,
            lambda: 0.01,
        },
    );
    cfg.epochs = 5;
    let (c, r) = train_sae(&x, &cfg).unwrap();
    assert!(c.threshold.iter().all(|&t| t >= 1e-6));
    assert!(r.reconstruction_mse < r.target_variance);
}

#[test]
fn transcoder_learns_a_layer_map() {
    let input = planted(1000, 8);
    let mix = gaussian(12, 30, 9);
    let mut output = input.matmul_transposed(&mix);
    for v in output.as_mut_slice() {
        *v = v.max(0.0);
    }
    let mut cfg = SaeConfig::new(30, 64, SaeVariant::L1 { lambda: 0.001 });
    cfg.epochs = 40;
    let (c, r) = train_transcoder(&input, &output, &cfg).unwrap();
    assert_eq!((c.input_dim(), c.latent_dim(), c.output_dim()), (30, 64, 12));
    assert!(
        r.reconstruction_mse < 0.2 * r.target_variance,
        "relative mse {}",
        r.reconstruction_mse / r.target_variance
    );
    assert!(train_transcoder(&input, &output.select_rows(&[0, 1]), &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topk_keeps_the_largest_entries(z in prop::collection::vec(-3.0f64..3.0, 1..40), k_frac in 0.0f64..1.0) {
        let k = ((k_frac * z.len() as f64) as usize).max(1);
        let out = topk_activate(&z, k);
        prop_assert!(out.iter().filter(|o| **o != 0.0).count() <= k);
        prop_assert!(out.iter().zip(&z).all(|(o, v)| *o == 0.0 || o == v));
        let kept: Vec<usize> = (0..z.len()).filter(|&i| out[i] != 0.0).collect();
        let threshold = kept.iter().map(|&i| z[i]).fold(f64::INFINITY, f64::min);
        for i in 0..z.len() {
            if !kept.contains(&i) && z[i] != 0.0 {
                prop_assert!(z[i] <= threshold);
            }
        }
    }

    #[test]
    fn parameters_round_trip(seed in 0u64..1000, variant_idx in 0usize..3) {
        let variant = [
            SaeVariant::L1 { lambda: 0.1 },
            SaeVariant::TopK { k_active: 2 },
            SaeVariant::JumpRelu { theta: 0.05, lambda: 0.1 },
        ][variant_idx];
        let c = random_coder(4, 6, 5, variant, seed);
        let mut d = SparseCoder::zeros(4, 6, 5, variant);
        d.set_parameters(&c.parameters()).unwrap();
        prop_assert_eq!(d, c);
    }
}
