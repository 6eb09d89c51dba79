use std::collections::HashMap;
use std::path::Path;

use super::{ModelConfig, ModelError, Result, TopicModel};
use crate::engine::{load_checkpoint, save_checkpoint, CheckpointHeader, Tensor};
use crate::seeding;
use crate::stochastic::BetaPosterior;

fn bn_name(model: &TopicModel, i: usize) -> String {
    let scale = &model.store.get(model.bn[i].scale).name;
    scale.trim_end_matches(".scale").to_string()
}

impl TopicModel {
    /// Saves parameters, batch-norm running statistics and the corpus
    /// posterior. `meta` must be a JSON object (or null); `corpus_size` is added.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut meta = match meta {
            serde_json::Value::Null => serde_json::Map::new(),
            serde_json::Value::Object(m) => m,
            other => return Err(ModelError::Checkpoint(format!("meta must be an object, got {other}"))),
        };
        meta.insert("corpus_size".into(), self.corpus_size.into());
        let config = serde_json::to_value(&self.config).expect("config serializes");

        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for i in 0..self.bn.len() {
            let name = bn_name(self, i);
            let bn = &self.bn[i];
            let f = bn.features();
            owned.push((
                format!("{name}.running_mean"),
                Tensor::new(vec![f], bn.running_mean.clone())?,
            ));
            owned.push((
                format!("{name}.running_var"),
                Tensor::new(vec![f], bn.running_var.clone())?,
            ));
        }
        if let Some(bp) = &self.beta {
            let n = bp.u.len();
            owned.push(("corpus.u".into(), Tensor::new(vec![n], bp.u.clone())?));
            owned.push(("corpus.v".into(), Tensor::new(vec![n], bp.v.clone())?));
        }
        let mut arrays: Vec<(&str, &Tensor)> = self.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
        arrays.extend(owned.iter().map(|(n, t)| (n.as_str(), t)));
        save_checkpoint(path, &config, serde_json::Value::Object(meta), &arrays)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (header, arrays) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(header.config.clone())
            .map_err(|e| ModelError::Checkpoint(format!("bad model config: {e}")))?;
        let mut model = TopicModel::new(config, &mut seeding::stream(0, seeding::INIT))?;
        let mut by_name: HashMap<String, Tensor> = arrays.into_iter().collect();
        let mut take = |name: &str| {
            by_name
                .remove(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing array '{name}'")))
        };
        let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = take(&name)?;
            model.store.set_value(id, t)?;
        }
        for i in 0..model.bn.len() {
            let name = bn_name(&model, i);
            let mean = take(&format!("{name}.running_mean"))?.into_data();
            let var = take(&format!("{name}.running_var"))?.into_data();
            if mean.len() != model.bn[i].features() || var.len() != mean.len() {
                return Err(ModelError::Checkpoint(format!(
                    "running stats of '{name}' have the wrong size"
                )));
            }
            model.bn[i].running_mean = mean;
            model.bn[i].running_var = var;
        }
        if model.beta.is_some() {
            let u = take("corpus.u")?.into_data();
            let v = take("corpus.v")?.into_data();
            model.beta = Some(BetaPosterior::new(u, v)?);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::Checkpoint(format!("unexpected array '{extra}'")));
        }
        if let Some(d) = header.meta.get("corpus_size").and_then(|v| v.as_u64()) {
            model.set_corpus_size(d as usize);
        }
        Ok((model, header))
    }
}
