//! Layered training configuration: file, then `HYPERDET_*` environment
//! variables, then command-line flags.

use std::path::Path;

use hyperdet::TrainConfig;
use toml::{Table, Value};

use crate::Failure;

pub const ENV_PREFIX: &str = "HYPERDET_";
/// Environment keys that configure the binary itself rather than training.
pub const RESERVED_ENV: &[&str] = &["LOG"];

pub fn read_file(path: &Path) -> Result<Table, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Failure::validation(format!("config file not found: {}", path.display()))
        } else {
            Failure::validation(format!("cannot read config file {}: {e}", path.display()))
        }
    })?;
    toml::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

/// Interprets a raw string the way it would read on the right of `key = ...`
/// in TOML, falling back to a plain string.
pub fn scalar(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `path` (dot-free segments) in `table`, creating nested tables.
pub fn set(table: &mut Table, path: &[String], value: Value) -> Result<(), Failure> {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut cur = table;
    for seg in parents {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Failure::validation(format!("config key `{seg}` is not a table")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Applies `HYPERDET_A__B=v` as `a.b = v`, in sorted key order.
pub fn apply_env<I>(table: &mut Table, vars: I) -> Result<(), Failure>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_string(), v)))
        .filter(|(k, _)| !RESERVED_ENV.contains(&k.as_str()))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(Failure::validation(format!("malformed environment key {ENV_PREFIX}{key}")));
        }
        set(table, &path, scalar(&raw))?;
    }
    Ok(())
}

pub fn into_train_config(table: Table) -> Result<TrainConfig, Failure> {
    let cfg: TrainConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::validation(format!("config: {}", e.message().trim())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalars_follow_toml_rules() {
        assert_eq!(scalar("5"), Value::Integer(5));
        assert_eq!(scalar("0.5"), Value::Float(0.5));
        assert_eq!(scalar("true"), Value::Boolean(true));
        assert_eq!(scalar("data/toy"), Value::String("data/toy".into()));
        assert_eq!(scalar("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
    }

    #[test]
    fn env_overrides_file_and_nests_on_double_underscore() {
        let mut t: Table = toml::from_str("epochs = 3\n[model.hyper]\nrank = 4\n").unwrap();
        let vars = [
            ("HYPERDET_EPOCHS".to_string(), "7".to_string()),
            ("HYPERDET_MODEL__HYPER__RANK".to_string(), "2".to_string()),
            ("HYPERDET_LOG".to_string(), "debug".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ];
        apply_env(&mut t, vars).unwrap();
        let cfg = into_train_config(t).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.model.hyper.rank, 2);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_validation_errors() {
        let t: Table = toml::from_str("epoch = 3").unwrap();
        let err = into_train_config(t).unwrap_err();
        assert_eq!(err.code(), 1);
        assert!(err.to_string().contains("epoch"), "{err}");
        let t: Table = toml::from_str("alpha = 2.0").unwrap();
        let err = into_train_config(t).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
    }
}
