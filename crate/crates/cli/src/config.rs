//! Layered configuration: built-in defaults, then a JSON or TOML file, then flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Reads a config file; `.toml` files are parsed as TOML, anything else as JSON.
pub fn load_value(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }
}

/// Recursive merge: objects merge key by key, every other value replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

/// `defaults` overlaid with the file at `path`, if any.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, path: Option<&Path>) -> Result<T, CliError> {
    let mut v = serde_json::to_value(defaults).map_err(|e| CliError::config(e.to_string()))?;
    if let Some(p) = path {
        merge(&mut v, load_value(p)?);
    }
    serde_json::from_value(v).map_err(|e| CliError::config(format!("invalid config: {e}")))
}
