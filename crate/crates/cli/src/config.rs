use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// A parsed `--config` file: global keys at the top level, one table per
/// subcommand.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let value: Value = if is_json {
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        };
        match value {
            Value::Object(root) => Ok(ConfigFile { root }),
            _ => Err(CliError::Usage("config file must be a table".into())),
        }
    }

    pub fn global<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.root
            .get(key)
            .map(|v| serde_json::from_value(v.clone()).map_err(|e| CliError::Usage(format!("config key '{key}': {e}"))))
            .transpose()
    }

    /// Subcommand arguments with flags taking precedence over the file's
    /// `[section]` table. Unset flags (`None` or `false`) do not override.
    pub fn merge<T: Serialize + DeserializeOwned>(&self, section: &str, flags: &T) -> Result<T, CliError> {
        let mut merged = match self.root.get(section) {
            Some(Value::Object(m)) => m.clone(),
            Some(_) => return Err(CliError::Usage(format!("config section '{section}' must be a table"))),
            None => Map::new(),
        };
        let flags = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))?;
        if let Value::Object(f) = flags {
            for (k, v) in f {
                if !matches!(v, Value::Null | Value::Bool(false)) {
                    merged.insert(k, v);
                }
            }
        }
        serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config section '{section}': {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(rename_all = "kebab-case", deny_unknown_fields)]
    struct Args {
        n: Option<usize>,
        rank: Option<usize>,
        #[serde(default)]
        compare: bool,
    }

    fn cfg(text: &str) -> ConfigFile {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        ConfigFile::load(&path).unwrap()
    }

    #[test]
    fn flags_override_file() {
        let c = cfg("seed = 9\n[estimate]\nn = 5\nrank = 3\ncompare = true\n");
        let flags = Args { n: Some(7), ..Args::default() };
        assert_eq!(c.merge("estimate", &flags).unwrap(), Args { n: Some(7), rank: Some(3), compare: true });
        assert_eq!(c.global::<u64>("seed").unwrap(), Some(9));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let c = cfg("[estimate]\nbogus = 1\n");
        assert!(matches!(c.merge("estimate", &Args::default()), Err(CliError::Usage(_))));
    }
}
