use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{bail, Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::TrainConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "FASHIONSAP_SEED";

fn keys_of<T: serde::Serialize>(v: &T) -> Vec<String> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Parses one flat JSON object holding any subset of the model and training fields.
/// Absent keys take the desk defaults; unknown keys are rejected together.
pub fn parse_config_str(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("not valid JSON: {e}")))?;
    let Value::Object(obj) = value else {
        bail!(InvalidConfig, "the configuration must be a JSON object");
    };
    let model_keys = keys_of(&ModelConfig::desk());
    let train_keys = keys_of(&TrainConfig::desk());
    let unknown: Vec<&str> = obj
        .keys()
        .filter(|k| !model_keys.contains(k) && !train_keys.contains(k))
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        bail!(InvalidConfig, "unknown configuration keys: {}", unknown.join(", "));
    }
    let (mut m, mut t) = (Map::new(), Map::new());
    for (k, v) in obj {
        if model_keys.contains(&k) {
            m.insert(k, v);
        } else {
            t.insert(k, v);
        }
    }
    let model: ModelConfig =
        serde_json::from_value(Value::Object(m)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let train: TrainConfig =
        serde_json::from_value(Value::Object(t)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

/// Reads a configuration file and applies the seed override from the environment.
pub fn parse_config(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (model, mut train) = parse_config_str(&text)?;
    apply_seed_override(&mut train, std::env::var(SEED_ENV).ok().as_deref())?;
    Ok((model, train))
}

/// Replaces `train.seed` when `value` is set.
pub fn apply_seed_override(train: &mut TrainConfig, value: Option<&str>) -> Result<()> {
    if let Some(v) = value {
        train.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
    }
    Ok(())
}
