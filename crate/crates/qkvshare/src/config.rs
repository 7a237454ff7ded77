//! Flat `key=value` configuration files.
//!
//! One assignment per line, `#` comments, no sections, no nesting.
//! Consumers declare the keys they understand and anything else is a
//! hard error — a typo in a config never silently falls back to a
//! default.

use std::collections::BTreeMap;
use std::path::Path;

/// Errors from reading or interpreting a config file.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown config key {key:?}; known keys: {known}")]
    UnknownKey { key: String, known: String },
    #[error("config key {key:?}: {message}")]
    InvalidValue { key: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A parsed flat config: ordered key → value pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

/// Parse flat `key=value` text. Blank lines and lines starting with `#`
/// are skipped; duplicate keys are rejected.
pub fn parse_config(text: &str) -> Result<ConfigMap, ConfigError> {
    let mut entries = BTreeMap::new();
    for (index, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: index + 1,
            message: format!("expected key=value, got {line:?}"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(ConfigError::Parse {
                line: index + 1,
                message: "empty key".into(),
            });
        }
        if entries.insert(key.to_owned(), value.to_owned()).is_some() {
            return Err(ConfigError::Parse {
                line: index + 1,
                message: format!("duplicate key {key:?}"),
            });
        }
    }
    Ok(ConfigMap { entries })
}

/// Read and parse a config file.
pub fn load_config(path: &Path) -> Result<ConfigMap, ConfigError> {
    parse_config(&std::fs::read_to_string(path)?)
}

impl ConfigMap {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Error unless every present key is in `allowed`.
    pub fn ensure_known(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for key in self.entries.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    key: key.clone(),
                    known: allowed.join(", "),
                });
            }
        }
        Ok(())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| ConfigError::InvalidValue {
                key: key.to_owned(),
                message: format!("{raw:?} is not {what}"),
            }),
        }
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.parsed(key, "an unsigned integer")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        self.parsed(key, "an unsigned integer")
    }

    pub fn get_i32(&self, key: &str) -> Result<Option<i32>, ConfigError> {
        self.parsed(key, "a 32-bit signed integer")
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.parsed(key, "a real number")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.entries.get(key).map(String::as_str) {
            None => Ok(None),
            Some("true" | "1" | "yes") => Ok(Some(true)),
            Some("false" | "0" | "no") => Ok(Some(false)),
            Some(raw) => Err(ConfigError::InvalidValue {
                key: key.to_owned(),
                message: format!("{raw:?} is not a boolean (true/false/1/0/yes/no)"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_whitespace() {
        let cfg = parse_config(
            "# a comment\n\
             tokens = 32\n\
             \n\
             label=nominal-1k\n\
             alpha =0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.get("tokens"), Some("32"));
        assert_eq!(cfg.get("label"), Some("nominal-1k"));
        assert_eq!(cfg.get("alpha"), Some("0.5"));
        assert_eq!(cfg.get("missing"), None);
        assert_eq!(cfg.keys().count(), 3);
    }

    #[test]
    fn rejects_malformed_lines() {
        for text in ["just words\n", "=value\n", "a=1\na=2\n"] {
            assert!(
                matches!(parse_config(text), Err(ConfigError::Parse { .. })),
                "accepted {text:?}"
            );
        }
    }

    #[test]
    fn value_may_contain_equals_and_be_empty() {
        let cfg = parse_config("expr=a=b\nempty=\n").unwrap();
        assert_eq!(cfg.get("expr"), Some("a=b"));
        assert_eq!(cfg.get("empty"), Some(""));
    }

    #[test]
    fn typed_getters_parse_or_explain() {
        let cfg = parse_config("n=12\nx=3.5\nneg=-4\nflag=yes\nbad=1.2.3\n").unwrap();
        assert_eq!(cfg.get_usize("n").unwrap(), Some(12));
        assert_eq!(cfg.get_f64("x").unwrap(), Some(3.5));
        assert_eq!(cfg.get_i32("neg").unwrap(), Some(-4));
        assert_eq!(cfg.get_bool("flag").unwrap(), Some(true));
        assert_eq!(cfg.get_u64("absent").unwrap(), None);
        assert!(matches!(
            cfg.get_f64("bad"),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(
            cfg.get_u64("neg"),
            Err(ConfigError::InvalidValue { .. })
        ));
    }

    #[test]
    fn unknown_keys_are_rejected_against_the_allowed_list() {
        let cfg = parse_config("tokens=8\nseeed=9\n").unwrap();
        match cfg.ensure_known(&["tokens", "seed"]) {
            Err(ConfigError::UnknownKey { key, .. }) => assert_eq!(key, "seeed"),
            other => panic!("{other:?}"),
        }
        let ok = parse_config("tokens=8\nseed=9\n").unwrap();
        ok.ensure_known(&["tokens", "seed"]).unwrap();
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "tokens=24\n").unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.get_usize("tokens").unwrap(), Some(24));
    }
}
