use latent_scope::dataset::{generate_synthetic, stack_images, Selector, SyntheticConfig};
use latent_scope::vae::{encode_dataset, fit, mmd_vstat, Objective, VaeConfig};
use latent_scope_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let v: Vec<f64> = (0..n * d)
        .map(|_| shift + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(vec![n, d], v).unwrap()
}

#[test]
fn mmd_null_and_shifted() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, d) = (256, 20);
    let null: f64 = (0..100)
        .map(|_| mmd_vstat(&normal(b, d, 0.0, &mut rng), &normal(b, d, 0.0, &mut rng), d as f64).unwrap())
        .sum::<f64>()
        / 100.0;
    assert!(null < 0.02, "null mean {null}");
    let shifted = mmd_vstat(&normal(b, d, 3.0, &mut rng), &normal(b, d, 0.0, &mut rng), d as f64).unwrap();
    assert!(shifted > 10.0 * null, "{shifted} vs {null}");
}

#[test]
fn mmd_symmetric_and_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let q = normal(10, 4, 0.5, &mut rng);
        let p = normal(13, 4, 0.0, &mut rng);
        let (a, b) = (mmd_vstat(&q, &p, 4.0).unwrap(), mmd_vstat(&p, &q, 4.0).unwrap());
        assert!((a - b).abs() < 1e-12);
        assert!(a >= -1e-12);
    }
}

fn small_dataset() -> latent_scope::dataset::FrameDataset {
    generate_synthetic(&SyntheticConfig {
        frames: 80,
        ..Default::default()
    })
    .unwrap()
    .split(0.2, 0)
    .unwrap()
}

#[test]
fn short_training_is_deterministic_and_decreasing() {
    let ds = small_dataset();
    for objective in [Objective::Mmd, Objective::Kl] {
        let cfg = VaeConfig {
            latent_dim: 4,
            epochs: 4,
            batch_size: 16,
            objective,
            ..Default::default()
        };
        let a = fit(&ds, &cfg).unwrap();
        let b = fit(&ds, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.history.iter().all(|e| e.total.is_finite()));
        assert!(a.history.last().unwrap().total < a.history[0].total, "{objective:?}: {:?}", a.history);

        let e1 = encode_dataset(&a.params, &ds, Selector::Test, 3).unwrap();
        let e2 = encode_dataset(&a.params, &ds, Selector::Test, 3).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), ds.count(Selector::Test));
        assert!(e1.iter().all(|e| e.dim() == 4));
        assert!(e1.windows(2).all(|w| w[0].index < w[1].index));
    }
}

#[test]
fn zero_epochs_and_tiny_datasets_are_rejected() {
    let ds = small_dataset();
    assert!(fit(&ds, &VaeConfig { epochs: 0, ..Default::default() }).is_err());
    assert!(fit(&ds, &VaeConfig { batch_size: 1000, ..Default::default() }).is_err());
}

#[test]
fn encoder_rows_follow_inputs() {
    let ds = small_dataset();
    let imgs = ds.images(Selector::All);
    let x: Tensor<f32> = stack_images(&[imgs[0], imgs[1], imgs[0]]).unwrap();
    let p = latent_scope::vae::VaeParams::<f32>::init(20, 0).unwrap();
    let (m, lv) = p.encode(&x).unwrap();
    assert_eq!(m.shape(), [3, 20]);
    assert_eq!(m.row(0), m.row(2));
    assert_eq!(lv.row(0), lv.row(2));
    assert!(m.is_finite() && lv.is_finite());
}
