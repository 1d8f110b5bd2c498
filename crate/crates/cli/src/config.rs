//! Loading run configurations from TOML with `key.path=value` overrides.

use std::path::Path;

use dtn_core::RunConfig;
use toml::{Table, Value};

use crate::CliError;

/// Reads `path`, applies every override in order and validates the result.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    from_str(&text, overrides)
}

pub fn from_str(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table: Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("config is not valid TOML: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Usage(format!("config: {e}")))?;
    Ok(cfg.finalize()?)
}

/// Sets one dotted key. The value is read as a TOML literal when it parses as one
/// and as a bare string otherwise.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override `{spec}` has an empty key segment")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{spec}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Canonical TOML form of a finished config.
pub fn to_toml(cfg: &RunConfig) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::Usage(format!("config cannot be written back: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = from_str(
            "seed = 3\n[train]\nlr = 0.5\n",
            &[
                "train.lr=0.001".into(),
                "variant.attention_kind=vanilla".into(),
                "variant.mas_in_levt=false".into(),
                "data.n_train=8".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.data.n_train, 8);
        assert_eq!(cfg.variant.attention_kind, dtn_core::config::AttentionKind::Vanilla);
        assert_eq!(cfg.model.seed, 3);
    }

    #[test]
    fn seed_is_required() {
        assert!(matches!(from_str("[train]\nlr = 0.1\n", &[]), Err(CliError::Usage(_))));
        assert!(from_str("seed = 1", &["nonsense".into()]).is_err());
        assert!(from_str("seed = 1", &["train.bogus=1".into()]).is_err());
    }

    #[test]
    fn written_configs_read_back_identically() {
        let cfg = from_str("seed = 9", &["model.channel_plan=[8, 16]".into()]).unwrap();
        let again = from_str(&to_toml(&cfg).unwrap(), &[]).unwrap();
        assert_eq!(cfg, again);
    }
}
