use std::fs;
use std::path::Path;

use distilseg::pipeline::ExperimentConfig;
use distilseg::{Error, Result};
use serde_json::Value;

/// Loads a TOML or JSON config (by extension; anything but `.json` is read
/// as TOML) and applies `key.path=value` overrides. Values are parsed as
/// JSON where possible and kept as strings otherwise.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut tree =
        serde_json::to_value(ExperimentConfig::default()).expect("default config serializes");
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let file: Value = if p.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::json(p, e))?
        } else {
            toml::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?
        };
        merge(&mut tree, file);
    }
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| {
            Error::Validation(format!("override `{o}` is not of the form key=value"))
        })?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut tree, key, value)?;
    }
    serde_json::from_value(tree)
        .map_err(|e| Error::Validation(format!("invalid configuration: {e}")))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Validation(format!("`{}` is not a table", parts[..i].join(".")))
        })?;
        if !obj.contains_key(*part) {
            return Err(Error::Validation(format!("unknown config key `{key}`")));
        }
        let next = obj.get_mut(*part).expect("checked above");
        if i + 1 == parts.len() {
            *next = value;
            return Ok(());
        }
        node = next;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_nested_values() {
        let c = load_config(
            None,
            &[
                "teacher_training.learning_rate=0.001".into(),
                "preprocess.crop_size=[32,32,32]".into(),
                "scenario.pseudo_guidance=point".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.teacher_training.learning_rate, 1e-3);
        assert_eq!(c.preprocess.crop_size, [32; 3]);
        assert_eq!(c.scenario.pseudo_guidance.to_string(), "point");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load_config(None, &["teacher_training.lr=1".into()]).is_err());
        assert!(load_config(None, &["seed".into()]).is_err());
    }
}
