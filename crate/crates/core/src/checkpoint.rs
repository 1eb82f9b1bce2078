//! JSON checkpoints: `{"config": {...}, "params": {name: {"shape", "data"}}}`.

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::vit::ViTConfig;

/// Keys come out in lexicographic order and floats in their shortest
/// round-trip form, so a saved model reloads bit for bit.
pub fn to_json(config: &ViTConfig, params: &ParamSet) -> Result<String> {
    let mut tensors = Map::new();
    for (name, t) in params.iter() {
        tensors.insert(name.to_string(), json!({ "shape": t.shape(), "data": t.data() }));
    }
    let doc = json!({ "config": serde_json::to_value(config)?, "params": Value::Object(tensors) });
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn from_json(text: &str) -> Result<(ViTConfig, ParamSet)> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Doc {
        config: ViTConfig,
        params: std::collections::BTreeMap<String, Entry>,
    }
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Entry {
        shape: Vec<usize>,
        data: Vec<f64>,
    }
    let doc: Doc = serde_json::from_str(text)?;
    doc.config.validate()?;
    let mut params = ParamSet::new();
    for (name, e) in doc.params {
        params.insert(name, Tensor::new(e.shape, e.data)?);
    }
    let expected = doc.config.param_shapes();
    let matches = expected.len() == params.len()
        && expected
            .iter()
            .all(|(n, s)| params.get(n).is_some_and(|t| t.shape() == s.as_slice()));
    if !matches {
        return Err(Error::Checkpoint("parameters do not match the stored config".into()));
    }
    Ok((doc.config, params))
}

pub fn save(path: impl AsRef<Path>, config: &ViTConfig, params: &ParamSet) -> Result<()> {
    std::fs::write(path, to_json(config, params)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ViTConfig, ParamSet)> {
    from_json(&std::fs::read_to_string(path)?)
}
