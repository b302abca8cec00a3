//! Flat key/value run configuration.
//!
//! A config file is a flat TOML table. Overrides use the `key=value` grammar,
//! where the value is parsed as a TOML scalar and falls back to a bare string.
//! Unknown keys and type errors are collected and reported together.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

fn parse_scalar(raw: &str) -> Value {
    let snippet = format!("v = {raw}");
    match snippet.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Parses `key=value` into its key and typed value.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override `{text}` is not of the form key=value")]))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(vec![format!("override `{text}` has an empty key")]));
    }
    Ok((key.to_string(), parse_scalar(value.trim())))
}

/// Builds a `T` from its defaults, then the file's table, then the overrides.
pub fn resolve<T>(file_text: Option<&str>, overrides: &[String]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let defaults = Table::try_from(T::default()).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let mut table = defaults.clone();
    let mut problems = Vec::new();
    let mut apply = |key: String, value: Value, origin: &str, problems: &mut Vec<String>| {
        if !defaults.contains_key(&key) && !is_optional_key::<T>(&key) {
            problems.push(format!("unknown key `{key}` ({origin})"));
            return;
        }
        // integers are accepted where floats are expected
        let value = match (defaults.get(&key), value) {
            (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(key, value);
    };
    if let Some(text) = file_text {
        let file: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        for (k, v) in file {
            apply(k, v, "config file", &mut problems);
        }
    }
    for o in overrides {
        match parse_override(o) {
            Ok((k, v)) => apply(k, v, "--set", &mut problems),
            Err(Error::Config(mut p)) => problems.append(&mut p),
            Err(e) => return Err(e),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))
}

/// Keys of `Option` fields are absent from the serialized defaults when
/// `None`; they are recognised by probing deserialization with the key set.
fn is_optional_key<T: Serialize + DeserializeOwned + Default>(key: &str) -> bool {
    let Ok(mut table) = Table::try_from(T::default()) else {
        return false;
    };
    table.insert(key.to_string(), Value::String("\u{0}probe".into()));
    match Value::Table(table).try_into::<T>() {
        Ok(_) => false,
        Err(e) => !e.to_string().contains("unknown field"),
    }
}

pub fn load<T>(path: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    resolve(text.as_deref(), overrides)
}

/// The flat TOML text of a config, suitable for the manifest echo.
pub fn to_text<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(vec![e.to_string()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        lambda: f64,
        interval: u64,
        source: String,
        limit: Option<u64>,
    }

    impl Default for Demo {
        fn default() -> Self {
            Self {
                lambda: 1.0,
                interval: 10,
                source: "controller".into(),
                limit: None,
            }
        }
    }

    #[test]
    fn layering() {
        let d: Demo = resolve(Some("interval = 5\nsource = \"uniform\""), &["lambda=0".into()]).unwrap();
        assert_eq!(
            d,
            Demo {
                lambda: 0.0,
                interval: 5,
                source: "uniform".into(),
                limit: None
            }
        );
        let d: Demo = resolve(None, &["source=l1".into(), "limit=3".into()]).unwrap();
        assert_eq!(d.source, "l1");
        assert_eq!(d.limit, Some(3));
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = resolve::<Demo>(Some("lamda = 1"), &["intervall=2".into(), "oops".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lamda") && msg.contains("intervall") && msg.contains("oops"), "{msg}");
    }

    #[test]
    fn type_errors_are_reported() {
        assert!(resolve::<Demo>(None, &["interval=fast".into()]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let d = Demo::default();
        let back: Demo = resolve(Some(&to_text(&d).unwrap()), &[]).unwrap();
        assert_eq!(d, back);
    }
}
