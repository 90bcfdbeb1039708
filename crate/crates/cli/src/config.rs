//! TOML defaults overlaid by command-line flags.
//!
//! A config file holds one table per subcommand, keyed by the flag names
//! with underscores (`gps_sigma = 0.1` under `[simulate]`). Flags given on
//! the command line win.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::UsageError;

pub fn load(path: &Path) -> anyhow::Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
}

/// `flags` with every unset field filled from `table[section]`.
pub fn resolve<T: Serialize + DeserializeOwned>(
    flags: &T,
    table: Option<&toml::Table>,
    section: &str,
) -> anyhow::Result<T> {
    let mut merged = match table.and_then(|t| t.get(section)) {
        Some(toml::Value::Table(t)) => match serde_json::to_value(t)? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("a table serializes to an object"),
        },
        Some(_) => return Err(UsageError(format!("config entry [{section}] must be a table")).into()),
        None => serde_json::Map::new(),
    };
    if let serde_json::Value::Object(set) = serde_json::to_value(flags)? {
        merged.extend(set.into_iter().filter(|(_, v)| !v.is_null()));
    }
    serde_json::from_value(serde_json::Value::Object(merged))
        .map_err(|e| UsageError(format!("config [{section}]: {e}")).into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        rate: Option<f64>,
        seed: Option<u64>,
        bias: Option<Vec<f64>>,
    }

    #[test]
    fn flags_override_config() {
        let table: toml::Table = toml::from_str("[demo]\nrate = 100.0\nseed = 3\nbias = [1.0, 2.0, 3.0]\n").unwrap();
        let flags = Demo {
            seed: Some(9),
            ..Demo::default()
        };
        let got = resolve(&flags, Some(&table), "demo").unwrap();
        assert_eq!(got.rate, Some(100.0));
        assert_eq!(got.seed, Some(9));
        assert_eq!(got.bias, Some(vec![1.0, 2.0, 3.0]));
        assert_eq!(resolve(&flags, None, "demo").unwrap(), flags);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let table: toml::Table = toml::from_str("[demo]\nrat = 1.0\n").unwrap();
        assert!(resolve(&Demo::default(), Some(&table), "demo").is_err());
    }
}
