//! Option resolution: defaults, then a TOML/JSON config file, then flags.

use std::fs;
use std::path::Path;

use guidir::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

fn load_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?,
        _ => serde_json::from_str(&text)?,
    };
    match value {
        Value::Object(mut map) => {
            // Written by `effective-config.json`; not an option.
            map.remove("command");
            Ok(map)
        }
        _ => Err(Error::InvalidParameter(format!(
            "{}: config must be a table of options",
            path.display()
        ))),
    }
}

/// Merges `flags` (unset ones serialize as null) over the config file and the
/// defaults of `R`.
pub fn resolve<F: Serialize, R: DeserializeOwned>(config: Option<&Path>, flags: &F) -> Result<R> {
    let mut merged = match config {
        Some(path) => load_file(path)?,
        None => Map::new(),
    };
    if let Value::Object(set) = serde_json::to_value(flags)? {
        merged.extend(set.into_iter().filter(|(_, v)| !v.is_null()));
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::InvalidParameter(format!("bad options: {e}")))
}

/// Writes `effective-config.json` into `dir`.
pub fn write_effective<R: Serialize>(dir: &Path, command: &str, options: &R) -> Result<()> {
    let mut value = serde_json::to_value(options)?;
    if let Value::Object(map) = &mut value {
        map.insert("command".into(), Value::String(command.into()));
    }
    let path = dir.join("effective-config.json");
    let text = serde_json::to_string_pretty(&value)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
