use infomask::datagen::{batch_images, generate, SynthConfig};
use infomask::model::{ModelConfig, ModelParams, Widths};
use infomask::objective::{LossConfig, Variant};
use infomask::train::{step_noise, train, train_step, Optimizer, TrainConfig};

fn small_cfg(variant: Variant) -> TrainConfig {
    TrainConfig {
        loss: LossConfig::new(variant, 1e-3, 1e-2, 1).unwrap(),
        model: ModelConfig { widths: Widths::divided(8), ..ModelConfig::default() },
        reg_delay: 0,
        reg_ramp: 0,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_strictly_decreases_on_fixed_batch() {
    let samples = generate(10, &SynthConfig { seed: 8, ..Default::default() }).unwrap();
    let x = batch_images(&samples);
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    for variant in [Variant::InfoMask, Variant::FeatureMask, Variant::RegL1] {
        let cfg = small_cfg(variant);
        let mut params = ModelParams::init(cfg.model, cfg.seed);
        let mut opt = Optimizer::new(cfg.optimizer, params.tensors());
        // one noise draw reused every step, so only the parameters change
        let eps = step_noise(cfg.seed, 1, x.shape(), 1);
        let losses: Vec<f64> = (1..=6)
            .map(|step| train_step(&cfg, step, &mut params, &mut opt, &x, &labels, &eps).unwrap().total)
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{variant:?}: {losses:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let data = generate(48, &SynthConfig { image_size: 32, seed: 2, ..Default::default() }).unwrap();
    let (tr, val) = data.split_at(32);
    let cfg = TrainConfig {
        model: ModelConfig { widths: Widths::divided(16), ..ModelConfig::default() },
        epochs: 2,
        n_checkpoints: 2,
        reg_delay: 2,
        reg_ramp: 2,
        seed: 6,
        ..TrainConfig::default()
    };
    let a = train(&cfg, tr, val, None).unwrap();
    let b = train(&cfg, tr, val, None).unwrap();
    assert_eq!(a.log.steps_csv(), b.log.steps_csv());
    assert_eq!(a.log.epochs_csv(), b.log.epochs_csv());
    assert_eq!(a.checkpoints.len(), 2);
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        let (mut bx, mut by) = (Vec::new(), Vec::new());
        x.params.write_to(&mut bx).unwrap();
        y.params.write_to(&mut by).unwrap();
        assert_eq!(bx, by);
    }
    let other = train(&TrainConfig { seed: 7, ..cfg }, tr, val, None).unwrap();
    assert_ne!(a.log.steps_csv(), other.log.steps_csv());
}
