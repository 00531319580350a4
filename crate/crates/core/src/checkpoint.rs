//! Parameter snapshots stored as safetensors (F64, little endian) with the
//! training state and architecture in the header metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ehct_autograd::{ParamStore, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{EhctError, Result};
use crate::model::{config_hash, Ablation, ModelConfig};

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub epoch: usize,
    pub val_f1: Option<f64>,
    pub config_hash: String,
    pub ablation: Ablation,
    pub model: ModelConfig,
}

fn bad(msg: impl Into<String>) -> EhctError {
    EhctError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(params: ParamStore, epoch: usize, val_f1: Option<f64>, model: &ModelConfig, ablation: Ablation) -> Self {
        Self { params, epoch, val_f1, config_hash: config_hash(model, ablation), ablation, model: model.clone() }
    }

    /// SHA-256 over parameter names, shapes and values in store order.
    pub fn parameter_hash(&self) -> String {
        params_hash(&self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .map(|(n, s, b)| {
                Ok((n.clone(), TensorView::new(Dtype::F64, s.clone(), b).map_err(|e| bad(e.to_string()))?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("val_f1".to_string(), serde_json::to_string(&self.val_f1).expect("f1 serializes"));
        meta.insert("config_hash".to_string(), self.config_hash.clone());
        meta.insert("ablation".to_string(), self.ablation.name().to_string());
        meta.insert("model".to_string(), serde_json::to_string(&self.model).expect("config serializes"));
        // store order is lost in the file; record it so reloads iterate identically
        let order: Vec<&str> = self.params.names().collect();
        meta.insert("order".to_string(), serde_json::to_string(&order).expect("names serialize"));
        safetensors::serialize(views, Some(meta)).map_err(|e| bad(e.to_string()))
    }

    /// Parses a checkpoint and verifies that its recorded hash matches its recorded architecture.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| bad("missing metadata"))?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("metadata lacks {k:?}")));
        let epoch = field("epoch")?.parse::<usize>().map_err(|e| bad(format!("epoch: {e}")))?;
        let val_f1: Option<f64> = serde_json::from_str(&field("val_f1")?).map_err(|e| bad(format!("val_f1: {e}")))?;
        let ablation: Ablation = field("ablation")?.parse().map_err(|e| bad(format!("{e}")))?;
        let model: ModelConfig =
            serde_json::from_str(&field("model")?).map_err(|e| bad(format!("model config: {e}")))?;
        let order: Vec<String> = serde_json::from_str(&field("order")?).map_err(|e| bad(format!("order: {e}")))?;
        let recorded = field("config_hash")?;
        if recorded != config_hash(&model, ablation) {
            return Err(bad("recorded config hash does not match the recorded configuration"));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        if st.len() != order.len() {
            return Err(bad(format!("{} tensors but {} names in order list", st.len(), order.len())));
        }
        let mut params = ParamStore::new();
        for name in order {
            let view = st.tensor(&name).map_err(|e| bad(format!("{name}: {e}")))?;
            if view.dtype() != Dtype::F64 {
                return Err(bad(format!("{name}: expected F64, found {:?}", view.dtype())));
            }
            let data =
                view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.add(name, Tensor::new(view.shape().to_vec(), data)?);
        }
        Ok(Self { params, epoch, val_f1, config_hash: recorded, ablation, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| EhctError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| EhctError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EhctError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses checkpoints trained for another architecture.
    pub fn ensure_compatible(&self, model: &ModelConfig, ablation: Ablation) -> Result<()> {
        let want = config_hash(model, ablation);
        if want != self.config_hash {
            return Err(bad(format!("checkpoint config hash {} does not match requested {want}", self.config_hash)));
        }
        Ok(())
    }

    /// Copies the stored values into `store`, which must have the same names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(bad(format!("model has {} parameters, checkpoint {}", store.len(), self.params.len())));
        }
        for (name, t) in self.params.iter() {
            let dst = store.by_name_mut(name).ok_or_else(|| bad(format!("model has no parameter {name:?}")))?;
            if dst.shape() != t.shape() {
                return Err(bad(format!("{name}: shape {:?} vs {:?}", dst.shape(), t.shape())));
            }
            *dst = t.clone();
        }
        Ok(())
    }
}

pub fn params_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        h.update([0]);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;
    use crate::model::EhctNet;
    use ehct_autograd::{Binding, Tape};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny(32);
        let (store, net) = EhctNet::build(&cfg, Ablation::Full, 4).unwrap();
        let ck = Checkpoint::new(store.clone(), 3, Some(0.5), &cfg, Ablation::Full);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!((back.epoch, back.val_f1, back.ablation), (3, Some(0.5), Ablation::Full));
        assert_eq!(back.model, cfg);
        assert_eq!(back.parameter_hash(), ck.parameter_hash());
        let names: Vec<_> = back.params.names().collect();
        assert_eq!(names, store.names().collect::<Vec<_>>());

        let (mut fresh, _) = EhctNet::build(&cfg, Ablation::Full, 99).unwrap();
        back.restore_into(&mut fresh).unwrap();
        let x = crate::nn::Init::new(1).uniform([1, 3, 32, 32], 1.0);
        let y = crate::nn::Init::new(2).uniform([1, 3, 32, 32], 1.0);
        let run = |s: &ParamStore| {
            let tape = Tape::inference();
            let b = Binding::new(&tape, s);
            net.forward(&b, tape.constant(x.clone()), tape.constant(y.clone())).unwrap().logits.value().as_ref().clone()
        };
        assert_eq!(run(&store), run(&fresh));
    }

    #[test]
    fn mismatched_architecture_is_refused() {
        let cfg = tiny(32);
        let (store, _) = EhctNet::build(&cfg, Ablation::Baseline, 0).unwrap();
        let ck = Checkpoint::new(store, 0, None, &cfg, Ablation::Baseline);
        assert!(ck.ensure_compatible(&cfg, Ablation::Baseline).is_ok());
        assert!(matches!(ck.ensure_compatible(&cfg, Ablation::Full), Err(EhctError::Checkpoint(_))));
        let (mut other, _) = EhctNet::build(&cfg, Ablation::Full, 0).unwrap();
        assert!(ck.restore_into(&mut other).is_err());
    }

    #[test]
    fn tampered_hash_is_rejected() {
        let cfg = tiny(32);
        let (store, _) = EhctNet::build(&cfg, Ablation::Baseline, 0).unwrap();
        let mut ck = Checkpoint::new(store, 0, None, &cfg, Ablation::Baseline);
        ck.config_hash = "0".repeat(64);
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()), Err(EhctError::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    }
}
