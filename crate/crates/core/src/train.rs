//! SGD training with linear learning-rate decay, per-epoch validation and
//! best-F1 checkpoint selection, plus split evaluation.

use std::io::Write;

use ehct_autograd::{Binding, ParamStore, Sgd, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{load_batch, Batch, Manifest};
use crate::error::{EhctError, Result};
use crate::head::{cross_entropy, predict_mask};
use crate::metrics::{confusion, MetricReport};
use crate::model::{Ablation, EhctNet, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Per-class loss weights `[background, changed]`; unweighted when absent.
    pub class_weights: Option<[f64; 2]>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 8,
            weight_decay: 0.0005,
            momentum: 0.99,
            epochs: 100,
            seed: 0,
            ablation: Ablation::Full,
            class_weights: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EhctError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w[0] + w[1] <= 0.0 {
                return bad(format!("invalid class weights {w:?}"));
            }
        }
        self.model.validate()
    }

    /// Linear policy: `lr * (1 - epoch / epochs)` for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * (1.0 - epoch as f64 / self.epochs as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        epoch: usize,
        /// Global optimizer step, counted from 0.
        step: usize,
        loss: f64,
        lr: f64,
    },
    Epoch {
        epoch: usize,
        steps: usize,
        lr: f64,
        mean_loss: f64,
        val_precision: Option<f64>,
        val_recall: Option<f64>,
        val_f1: Option<f64>,
        val_iou: Option<f64>,
        best: bool,
    },
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the highest validation F1 (earliest on ties).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub records: Vec<LogRecord>,
    pub steps: usize,
}

/// Writes each record as one JSON line.
pub struct JsonlLog<W: Write>(pub W);

impl<W: Write> JsonlLog<W> {
    pub fn write(&mut self, r: &LogRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.0, r)?;
        self.0.write_all(b"\n")?;
        self.0.flush()
    }
}

fn check_manifest(m: &Manifest, model: &ModelConfig, what: &str) -> Result<()> {
    if m.is_empty() {
        return Err(EhctError::Validation(format!("{what} split is empty")));
    }
    if m.tile_size != model.hct.input_size {
        return Err(EhctError::Config(format!(
            "{what} tiles are {} pixels but the model expects input_size {}",
            m.tile_size, model.hct.input_size
        )));
    }
    Ok(())
}

/// Runs `config.epochs` epochs over `train`, validating on `val` (or on `train` when absent)
/// after each one. Every record is passed to `on_record` as soon as it exists.
pub fn train(
    config: &TrainConfig,
    train: &Manifest,
    val: Option<&Manifest>,
    mut on_record: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let val = val.unwrap_or(train);
    check_manifest(train, &config.model, "train")?;
    check_manifest(val, &config.model, "validation")?;
    let (mut store, net) = EhctNet::build(&config.model, config.ablation, config.seed)?;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut records = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch = load_batch(train, chunk)?;
            let loss =
                train_step(&net, &mut store, &mut sgd, &batch, lr, config.class_weights).map_err(|e| match e {
                    EhctError::Numeric(m) => EhctError::Numeric(format!("epoch {epoch}, step {step}: {m}")),
                    other => other,
                })?;
            losses.push(loss);
            let r = LogRecord::Step { epoch, step, loss, lr };
            on_record(&r)?;
            records.push(r);
            step += 1;
        }
        let report = evaluate_model(&net, &store, val, config.batch_size)?;
        let score = report.f1.unwrap_or(-1.0);
        let improved = best.as_ref().is_none_or(|(b, _)| score > *b);
        if improved {
            best = Some((score, Checkpoint::new(store.clone(), epoch, report.f1, &config.model, config.ablation)));
        }
        let r = LogRecord::Epoch {
            epoch,
            steps: losses.len(),
            lr,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_precision: report.precision,
            val_recall: report.recall,
            val_f1: report.f1,
            val_iou: report.iou,
            best: improved,
        };
        on_record(&r)?;
        records.push(r);
    }
    let last = Checkpoint::new(store, config.epochs - 1, None, &config.model, config.ablation);
    let (_, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { best, last, records, steps: step })
}

/// One forward/backward/update on `batch`; returns the loss before the update.
pub fn train_step(
    net: &EhctNet,
    store: &mut ParamStore,
    sgd: &mut Sgd,
    batch: &Batch,
    lr: f64,
    class_weights: Option<[f64; 2]>,
) -> Result<f64> {
    let tape = Tape::new();
    let grads = {
        let b = Binding::new(&tape, store);
        let trace = net.forward(&b, b.constant(batch.a.clone()), b.constant(batch.b.clone()))?;
        let loss = cross_entropy(trace.logits, &batch.masks, class_weights)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(EhctError::Numeric(format!("loss is {value}")));
        }
        (b.param_grads(&tape.backward(loss)), value)
    };
    if grads.0.iter().flatten().any(|g| !g.all_finite()) {
        return Err(EhctError::Numeric("non-finite gradient".into()));
    }
    sgd.step(store, &grads.0, lr);
    Ok(grads.1)
}

/// Logits of the model on an in-memory batch.
pub fn infer(net: &EhctNet, store: &ParamStore, batch: &Batch) -> Result<ehct_autograd::Tensor> {
    let tape = Tape::inference();
    let b = Binding::new(&tape, store);
    let trace = net.forward(&b, b.constant(batch.a.clone()), b.constant(batch.b.clone()))?;
    Ok(trace.logits.value().as_ref().clone())
}

/// Predicted masks for every entry, in manifest order.
pub fn predict_manifest(
    net: &EhctNet,
    store: &ParamStore,
    manifest: &Manifest,
    batch_size: usize,
) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(manifest.len());
    let indices: Vec<usize> = (0..manifest.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = load_batch(manifest, chunk)?;
        let flat = predict_mask(&infer(net, store, &batch)?)?;
        let hw = batch.height * batch.width;
        out.extend(flat.chunks(hw).map(<[u8]>::to_vec));
    }
    Ok(out)
}

pub fn evaluate_model(
    net: &EhctNet,
    store: &ParamStore,
    manifest: &Manifest,
    batch_size: usize,
) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(EhctError::Validation("evaluation split is empty".into()));
    }
    let mut cms = Vec::with_capacity(manifest.len());
    let indices: Vec<usize> = (0..manifest.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = load_batch(manifest, chunk)?;
        let pred = predict_mask(&infer(net, store, &batch)?)?;
        let hw = batch.height * batch.width;
        for (p, g) in pred.chunks(hw).zip(batch.masks.chunks(hw)) {
            cms.push(confusion(p, g)?);
        }
    }
    Ok(MetricReport::from_matrices(&cms))
}

/// Rebuilds the network stored in `checkpoint`.
pub fn restore(checkpoint: &Checkpoint) -> Result<(ParamStore, EhctNet)> {
    let (mut store, net) = EhctNet::build(&checkpoint.model, checkpoint.ablation, 0)?;
    checkpoint.restore_into(&mut store)?;
    Ok((store, net))
}

/// Evaluates `checkpoint` on `manifest`. With `expected` set, a checkpoint built for a
/// different architecture is refused.
pub fn evaluate(
    checkpoint: &Checkpoint,
    manifest: &Manifest,
    expected: Option<(&ModelConfig, Ablation)>,
    batch_size: usize,
) -> Result<MetricReport> {
    if let Some((m, a)) = expected {
        checkpoint.ensure_compatible(m, a)?;
    }
    if manifest.is_empty() {
        return Err(EhctError::Validation("evaluation split is empty".into()));
    }
    let (store, net) = restore(checkpoint)?;
    evaluate_model(&net, &store, manifest, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthOptions};
    use crate::model::tests::tiny;

    fn cfg(epochs: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: batch,
            ablation: Ablation::Baseline,
            model: tiny(32),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_are_the_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.batch_size, c.weight_decay, c.momentum), (0.01, 8, 0.0005, 0.99));
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "ablation": "+ETMT"}"#).unwrap();
        assert_eq!((parsed.epochs, parsed.ablation, parsed.lr), (3, Ablation::Etmt, 0.01));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"ablation": "+RMI"}"#).is_err());
        assert!(TrainConfig { momentum: 1.0, ..c }.validate().is_err());
    }

    #[test]
    fn lr_schedule_is_linear() {
        let c = cfg(4, 1);
        let got: Vec<f64> = (0..4).map(|e| c.lr_at(e)).collect();
        assert_eq!(got, vec![0.01, 0.0075, 0.005, 0.0025]);
    }

    #[test]
    fn step_accounting_and_best_rule() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(dir.path(), 0, 5, 32, &SynthOptions::default()).unwrap();
        let c = cfg(2, 2);
        let mut seen = 0;
        let out = train(&c, &m, None, |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(out.steps, 2 * 3);
        assert_eq!(seen, out.records.len());
        let epochs: Vec<&LogRecord> = out.records.iter().filter(|r| matches!(r, LogRecord::Epoch { .. })).collect();
        assert_eq!(epochs.len(), 2);
        let best_f1 = epochs
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { val_f1, .. } => Some(val_f1.unwrap_or(-1.0)),
                _ => None,
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best.val_f1.unwrap_or(-1.0), best_f1);
        for r in &out.records {
            if let LogRecord::Step { epoch, lr, .. } = r {
                assert_eq!(*lr, c.lr_at(*epoch));
            }
        }
    }

    #[test]
    fn empty_and_mismatched_splits() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = synth_dataset(dir.path(), 0, 1, 32, &SynthOptions::default()).unwrap();
        let mut c = cfg(1, 1);
        c.model.hct.input_size = 64;
        assert!(matches!(train(&c, &m, None, |_| Ok(())), Err(EhctError::Config(_))));
        m.entries.clear();
        let c = cfg(1, 1);
        assert!(matches!(train(&c, &m, None, |_| Ok(())), Err(EhctError::Validation(_))));
        let (store, _) = EhctNet::build(&c.model, c.ablation, 0).unwrap();
        let ck = Checkpoint::new(store, 0, None, &c.model, c.ablation);
        assert!(matches!(evaluate(&ck, &m, None, 2), Err(EhctError::Validation(_))));
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(dir.path(), 0, 2, 32, &SynthOptions::default()).unwrap();
        let c = TrainConfig { lr: 1e300, momentum: 0.0, ..cfg(3, 1) };
        let err = train(&c, &m, None, |_| Ok(())).unwrap_err();
        assert!(matches!(err, EhctError::Numeric(ref s) if s.contains("step")), "{err}");
    }
}
