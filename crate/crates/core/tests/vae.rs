use lbe_core::imaging::{generate_synthetic_dataset, SyntheticSpec};
use lbe_core::numerics::RngStream;
use lbe_core::vae::{
    beta_at_epoch, fit, kl_loss, reconstruction_loss, total_loss, Activation, BetaSchedule, TrainConfig, VaeArchitecture, VaeModel,
};
use proptest::prelude::*;

fn dense_arch(side: usize, latent: usize, enc: usize, dec: usize) -> VaeArchitecture {
    VaeArchitecture {
        input_channels: 1,
        input_height: side,
        input_width: side,
        encoder_widths: vec![enc],
        latent_dim: latent,
        decoder_widths: vec![dec],
        upsample_blocks: 0,
        activation: Activation::LeakyRelu,
        frozen_encoder_layers: Vec::new(),
    }
}

#[test]
fn overfits_a_single_image() {
    let mut rng = RngStream::new(21, 0);
    let image: Vec<f64> = (0..64).map(|_| 0.1 + 0.8 * rng.unit()).collect();
    let data = vec![image.clone()];
    let arch = dense_arch(8, 2, 32, 32);
    let cfg = TrainConfig {
        epochs: 200,
        initial_lr: 5e-3,
        batch_size: 1,
        lr_patience: 10,
        seed: 4,
        ..TrainConfig::default()
    };
    let (params, log) = fit(&arch, &data, &data, &cfg, &BetaSchedule::constant(0.0)).unwrap();
    let first = log[0].rec_loss;
    let last = log[199].rec_loss;
    assert!(last < 0.05 * first, "rec loss {first} -> {last}");

    let model = VaeModel::new(arch).unwrap();
    let (mean, _) = model.encode(&params, &image).unwrap();
    let decoded = model.decode(&params, &mean).unwrap();
    let per_pixel = reconstruction_loss(&image, &decoded).unwrap() / 64.0;
    assert!(per_pixel < 0.05, "L1 per pixel {per_pixel}");
}

#[test]
fn validation_loss_drops_on_synthetic_images() {
    let mut spec = SyntheticSpec::chexpert(32, 8);
    spec.informative = [false; 14];
    for k in [2, 5, 6, 8, 10] {
        spec.informative[k] = true;
    }
    let (images, _) = generate_synthetic_dataset(&spec, 2200).unwrap();
    let pixels: Vec<Vec<f64>> = images.into_iter().map(|i| i.into_pixels()).collect();
    let (train, val) = pixels.split_at(2000);
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 32,
        seed: 1,
        ..TrainConfig::default()
    };
    let (_, log) = fit(&dense_arch(32, 16, 64, 128), train, val, &cfg, &BetaSchedule::default()).unwrap();
    assert_eq!(log.len(), 10);
    assert!(log[9].val_loss < log[0].val_loss, "{} vs {}", log[9].val_loss, log[0].val_loss);
    assert_eq!(log[2].beta, 0.0);
    assert!((log[3].beta - 0.00864).abs() < 1e-12);
}

proptest! {
    #[test]
    fn kl_is_non_negative(pairs in prop::collection::vec((-5.0f64..5.0, -6.0f64..6.0), 1..12)) {
        let (mu, logv): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let kl = kl_loss(&mu, &logv).unwrap();
        prop_assert!(kl >= 0.0);
        if mu.iter().chain(&logv).any(|v| v.abs() > 1e-3) {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn total_loss_grows_with_beta(rec in 0.0f64..1e4, kl in 0.0f64..1e3, b1 in 0.0f64..5.0, b2 in 0.0f64..5.0) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        prop_assert!(total_loss(rec, kl, lo).unwrap() <= total_loss(rec, kl, hi).unwrap());
    }

    #[test]
    fn beta_never_decreases(epoch in 0usize..60) {
        let s = BetaSchedule::default();
        prop_assert!(beta_at_epoch(&s, epoch) <= beta_at_epoch(&s, epoch + 1));
    }

    #[test]
    fn decoder_output_is_bounded(z in prop::collection::vec(-100.0f64..100.0, 3), seed in 0u64..50) {
        let arch = VaeArchitecture { upsample_blocks: 1, decoder_widths: vec![8], ..dense_arch(4, 3, 6, 8) };
        let model = VaeModel::new(arch).unwrap();
        let params = model.init_params(&mut RngStream::new(seed, 0));
        let out = model.decode(&params, &z).unwrap();
        prop_assert_eq!(out.len(), 16);
        prop_assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
