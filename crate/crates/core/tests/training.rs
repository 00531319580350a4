use ehct_autograd::Sgd;
use ehct_core::checkpoint::Checkpoint;
use ehct_core::data::{generate_sample, synth_dataset, Batch, SynthOptions};
use ehct_core::feature_extraction::HctConfig;
use ehct_core::model::{Ablation, EhctNet, ModelConfig};
use ehct_core::train::{evaluate, train, train_step, LogRecord, TrainConfig};

fn small_model(size: usize) -> ModelConfig {
    ModelConfig {
        hct: HctConfig {
            stage_channels: vec![4, 8, 12, 16],
            attention_heads: 2,
            input_size: size,
            decoder_dim: 8,
            ..HctConfig::default()
        },
        token_heads: 2,
        head_hidden: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn loss_on_fixed_batch_decreases_over_twenty_steps() {
    let mut model = ModelConfig::default();
    model.hct.input_size = 64;
    let c = TrainConfig { model, ..TrainConfig::default() };
    let samples: Vec<_> = (0..c.batch_size)
        .map(|i| {
            let (p, m, _) = generate_sample(0, i, 64, &SynthOptions::default());
            (p, m)
        })
        .collect();
    let batch = Batch::from_samples(&samples, 64).unwrap();
    let (mut store, net) = EhctNet::build(&c.model, c.ablation, c.seed).unwrap();
    let mut sgd = Sgd::new(c.momentum, c.weight_decay);
    let losses: Vec<f64> =
        (0..20).map(|_| train_step(&net, &mut store, &mut sgd, &batch, c.lr, None).unwrap()).collect();
    // three-step moving average
    let smooth: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    for w in smooth.windows(2) {
        assert!(w[1] < w[0], "smoothed loss rose: {losses:?}");
    }
}

#[test]
fn seeded_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(dir.path(), 1, 4, 32, &SynthOptions::default()).unwrap();
    let c = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ablation: Ablation::Full,
        model: small_model(32),
        ..TrainConfig::default()
    };
    let a = train(&c, &m, None, |_| Ok(())).unwrap();
    let b = train(&c, &m, None, |_| Ok(())).unwrap();
    assert_eq!(a.last.parameter_hash(), b.last.parameter_hash());
    assert_eq!(a.records, b.records);
    let other = TrainConfig { seed: 1, ..c };
    let d = train(&other, &m, None, |_| Ok(())).unwrap();
    assert_ne!(a.last.parameter_hash(), d.last.parameter_hash());
}

#[test]
fn checkpoint_reload_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(dir.path(), 2, 3, 32, &SynthOptions::default()).unwrap();
    let c = TrainConfig {
        epochs: 1,
        batch_size: 3,
        ablation: Ablation::EtmtRmii,
        model: small_model(32),
        ..TrainConfig::default()
    };
    let out = train(&c, &m, None, |_| Ok(())).unwrap();
    let path = dir.path().join("best.safetensors");
    out.best.save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let r1 = evaluate(&ck, &m, Some((&c.model, c.ablation)), 2).unwrap();
    let r2 = evaluate(&ck, &m, Some((&c.model, c.ablation)), 3).unwrap();
    assert_eq!(r1, r2);
    let logged = out.records.iter().find_map(|r| match r {
        LogRecord::Epoch { val_f1, .. } => Some(*val_f1),
        _ => None,
    });
    assert_eq!(logged, Some(r1.f1));
}
