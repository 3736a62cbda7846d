use memae::evalharness::{generate_synthetic, NormalImageSet, SyntheticSpec};
use memae::patchgrid::{sample_mask, ImageTensor, MaskPartition};
use memae::pipeline::{
    load_checkpoint, masked_mse_loss, resume, save_checkpoint, train, train_with_observer, LossRecord, MaskedAutoencoder,
    ModelConfig, TrainConfig, TrainObserver,
};
use memae::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn textures(n: usize, seed: u64) -> NormalImageSet {
    let spec = SyntheticSpec {
        n_train: n,
        n_test_normal: 0,
        n_test_anomalous: 0,
        seed,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).unwrap().0
}

fn small_model() -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.encoder.depth = 2;
    cfg.encoder.width = 32;
    cfg.encoder.heads = 2;
    cfg.encoder.memory_slots = 8;
    cfg.decoder.width = 32;
    cfg.decoder.heads = 2;
    cfg
}

fn short_run(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        warmup_epochs: 0,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn constant_error_on_masked_patch_gives_its_square() {
    let target = ImageTensor::from_fn(4, 8, 1, |(y, x, _)| (y * 8 + x) as f32 / 32.0).unwrap();
    let e = 0.25f32;
    let mut recon = target.clone();
    // patch 1 (columns 4..8) is masked; patch 0 is left untouched
    recon.pixels_mut().indexed_iter_mut().for_each(|((_, x, _), v)| {
        if x >= 4 {
            *v += e
        }
    });
    let partition = MaskPartition::from_visible(2, vec![0]).unwrap();
    let loss = masked_mse_loss(&recon, &target, &partition, 4).unwrap();
    assert!((loss - (e as f64).powi(2)).abs() < 1e-12, "{loss}");
    assert_eq!(masked_mse_loss(&target, &target, &partition, 4).unwrap(), 0.0);
}

#[test]
fn loss_ignores_visible_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..20 {
        let target = ImageTensor::from_fn(32, 32, 3, |_| rng.random()).unwrap();
        let recon = ImageTensor::from_fn(32, 32, 3, |_| rng.random()).unwrap();
        let partition = sample_mask(16, 0.75, trial).unwrap();
        let base = masked_mse_loss(&recon, &target, &partition, 8).unwrap();
        let (mut t2, mut r2) = (target.clone(), recon.clone());
        for ((y, x, _), v) in t2.pixels_mut().indexed_iter_mut() {
            if !partition.is_masked((y / 8) * 4 + x / 8) {
                *v = rng.random();
            }
        }
        for ((y, x, _), v) in r2.pixels_mut().indexed_iter_mut() {
            if !partition.is_masked((y / 8) * 4 + x / 8) {
                *v = rng.random::<f32>() * 5.0;
            }
        }
        assert_eq!(masked_mse_loss(&r2, &t2, &partition, 8).unwrap(), base);
    }
}

#[test]
fn empty_mask_is_an_error() {
    let img = ImageTensor::zeros(16, 16, 1).unwrap();
    let all_visible = MaskPartition::from_visible(4, vec![0, 1, 2, 3]).unwrap();
    assert!(matches!(masked_mse_loss(&img, &img, &all_visible, 8), Err(Error::EmptyMask)));

    let mut cfg = small_model();
    cfg.image_size = 16;
    let model = MaskedAutoencoder::<f32>::new(cfg).unwrap();
    assert!(matches!(model.loss(&img, &all_visible), Err(Error::EmptyMask)));
}

#[test]
fn forward_is_deterministic_and_checks_shapes() {
    let cfg = small_model();
    let model = MaskedAutoencoder::<f32>::new(cfg.clone()).unwrap();
    let img = textures(1, 3).images.remove(0);
    let partition = sample_mask(cfg.num_patches(), cfg.mask_ratio, 5).unwrap();
    let a = model.forward(&img, &partition).unwrap();
    let b = model.forward(&img, &partition).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.partition, partition);
    let wrong = ImageTensor::zeros(32, 32, 1).unwrap();
    assert!(matches!(model.forward(&wrong, &partition), Err(Error::Shape(_))));
}

#[test]
fn one_epoch_smoke_run() {
    let data = textures(8, 0);
    let out = train(&data, &small_model(), &short_run(1, 4)).unwrap();
    assert_eq!(out.checkpoint.epoch, 1);
    assert_eq!(out.checkpoint.step, 2);
    assert_eq!(out.loss_curve.len(), 2);
    assert!(out.loss_curve.iter().all(|r| r.loss.is_finite() && r.epoch == 1));
}

#[test]
fn identical_seeds_give_identical_loss_curves() {
    let data = textures(6, 1);
    let a = train(&data, &small_model(), &short_run(3, 4)).unwrap();
    let b = train(&data, &small_model(), &short_run(3, 4)).unwrap();
    let bits = |c: &[LossRecord]| c.iter().map(|r| (r.loss.to_bits(), r.lr.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.loss_curve), bits(&b.loss_curve));
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());

    let mut other = short_run(3, 4);
    other.seed = 10;
    let c = train(&data, &small_model(), &other).unwrap();
    assert_ne!(bits(&a.loss_curve), bits(&c.loss_curve));
}

#[test]
fn resuming_from_a_saved_checkpoint_matches_an_uninterrupted_run() {
    struct Keep(Vec<Vec<u8>>);
    impl TrainObserver for Keep {
        fn on_checkpoint(&mut self, c: &memae::pipeline::Checkpoint) -> memae::Result<()> {
            self.0.push(c.to_bytes()?);
            Ok(())
        }
    }
    let data = textures(6, 2);
    let mut cfg = short_run(4, 3);
    cfg.checkpoint_every = 2;
    let mut keep = Keep(Vec::new());
    let full = train_with_observer(&data, &small_model(), &cfg, &mut keep).unwrap();
    assert_eq!(keep.0.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    std::fs::write(&path, &keep.0[0]).unwrap();
    let mid = load_checkpoint(&path).unwrap();
    assert_eq!(mid.epoch, 2);
    let rest = resume(mid, &data, &mut ()).unwrap();
    assert_eq!(&full.loss_curve[4..], &rest.loss_curve[..]);
    assert_eq!(full.checkpoint.to_bytes().unwrap(), rest.checkpoint.to_bytes().unwrap());

    save_checkpoint(&rest.checkpoint, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), keep.0[1]);
}

#[test]
fn learning_rate_warms_up_then_decays() {
    let data = textures(4, 4);
    let mut cfg = short_run(6, 2);
    cfg.warmup_epochs = 2;
    let out = train(&data, &small_model(), &cfg).unwrap();
    let lrs: Vec<f64> = out.loss_curve.iter().map(|r| r.lr).collect();
    let warm = 2 * 2;
    assert!(lrs[..warm].windows(2).all(|w| w[1] > w[0]), "{lrs:?}");
    assert!(lrs[warm - 1..].windows(2).all(|w| w[1] <= w[0]), "{lrs:?}");
}

#[test]
fn non_finite_input_aborts_with_a_report() {
    let mut data = textures(2, 5);
    data.images[1].pixels_mut()[[3, 3, 0]] = f32::NAN;
    match train(&data, &small_model(), &short_run(1, 1)) {
        Err(Error::Diverged(r)) => {
            assert_eq!(r.epoch, 1);
            assert!(!r.loss.is_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.loss_curve.len())),
    }
}

#[test]
fn loss_falls_between_epoch_one_and_fifty() {
    let data = textures(32, 6);
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    struct Epochs(Vec<f64>);
    impl TrainObserver for Epochs {
        fn on_epoch_end(&mut self, _epoch: usize, mean_loss: f64) {
            self.0.push(mean_loss);
        }
    }
    let mut e = Epochs(Vec::new());
    train_with_observer(&data, &ModelConfig::tiny(), &cfg, &mut e).unwrap();
    assert!(e.0[49] < e.0[0], "epoch 1 {} epoch 50 {}", e.0[0], e.0[49]);
}

#[test]
fn tiny_model_overfits_four_images() {
    let data = textures(4, 7);
    let cfg = TrainConfig {
        epochs: 2000,
        batch_size: 4,
        warmup_epochs: 20,
        base_lr: 5e-3,
        weight_decay: 0.0,
        augmentation: memae::pipeline::AugmentConfig {
            random_resized_crop: false,
            ..Default::default()
        },
        seed: 2,
        ..TrainConfig::default()
    };
    let out = train(&data, &ModelConfig::tiny(), &cfg).unwrap();
    let tail: f64 = out.loss_curve[out.loss_curve.len() - 20..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    assert!(tail < 1e-3, "final training MSE {tail}");
}

#[test]
fn memorized_image_is_reproduced_at_masked_pixels() {
    let data = textures(1, 7);
    let cfg = TrainConfig {
        epochs: 3000,
        batch_size: 1,
        warmup_epochs: 20,
        base_lr: 5e-3,
        weight_decay: 0.0,
        augmentation: memae::pipeline::AugmentConfig {
            random_resized_crop: false,
            ..Default::default()
        },
        seed: 2,
        ..TrainConfig::default()
    };
    let out = train(&data, &ModelConfig::tiny(), &cfg).unwrap();
    let tail: f64 = out.loss_curve[out.loss_curve.len() - 50..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    assert!(tail < 1e-4, "final training MSE {tail}");
    let image = &data.images[0];
    let partition = sample_mask(64, 0.75, 999).unwrap();
    let rec = out.checkpoint.model.forward(image, &partition).unwrap();
    let mut worst = 0.0f32;
    for &m in &partition.masked_idx {
        let (py, px) = (8 * (m / 8), 8 * (m % 8));
        for y in py..py + 8 {
            for x in px..px + 8 {
                worst = worst.max((rec.image.pixels()[[y, x, 0]] - image.pixels()[[y, x, 0]]).abs());
            }
        }
    }
    assert!(worst < 0.05, "max abs error {worst}");
}
