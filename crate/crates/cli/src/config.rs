//! TOML configs with `key.path=value` overrides. Keys the target type does
//! not know are rejected instead of silently ignored.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

pub fn load_table(path: Option<&Path>) -> CliResult<Table> {
    let Some(path) = path else {
        return Ok(Table::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))
}

/// Parses `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Usage(format!(
            "override '{assignment}' is not of the form key=value"
        ))
    })?;
    let value = toml::from_str::<Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key '{key}' is empty")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override '{key}': '{part}' is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn resolve<T: DeserializeOwned + Serialize>(
    mut table: Table,
    overrides: &[String],
) -> CliResult<T> {
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let value: T = Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
    let echoed = Value::try_from(&value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    if let Some(key) = unknown_key(&table, &echoed, "") {
        return Err(CliError::Usage(format!("config: unknown key '{key}'")));
    }
    Ok(value)
}

fn unknown_key(given: &Table, known: &Value, prefix: &str) -> Option<String> {
    for (k, v) in given {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let Some(known_v) = known.get(k) else {
            return Some(path);
        };
        if let (Value::Table(sub), true) = (v, known_v.is_table()) {
            if let Some(bad) = unknown_key(sub, known_v, &path) {
                return Some(bad);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use trajkd::train::ExperimentConfig;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg: ExperimentConfig = resolve(
            Table::new(),
            &[
                "arch.dim=16".into(),
                "epochs=3".into(),
                "kd_form=\"cos_reg\"".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.arch.dim, 16);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.kd_form, Some(trajkd::losses::KdForm::CosReg));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let table: Table = toml::from_str("epoch = 3").unwrap();
        let err = resolve::<ExperimentConfig>(table, &[]).unwrap_err();
        assert!(err.to_string().contains("unknown key 'epoch'"), "{err}");
        let nested: Table = toml::from_str("[arch]\ndims = 3").unwrap();
        assert!(resolve::<ExperimentConfig>(nested, &[]).is_err());
    }

    #[test]
    fn wrong_types_are_usage_errors() {
        let table: Table = toml::from_str("epochs = \"many\"").unwrap();
        assert!(matches!(
            resolve::<ExperimentConfig>(table, &[]),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn shipped_configs_resolve() {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let load = |name: &str| load_table(Some(&root.join(name))).unwrap();
        let gen: trajkd::synth::GeneratorConfig = resolve(load("generator.toml"), &[]).unwrap();
        gen.validate().unwrap();
        let exp: ExperimentConfig = resolve(load("experiment.toml"), &[]).unwrap();
        exp.validate().unwrap();
        assert_eq!(exp.arch.dim, 32);
        let abl: crate::AblationConfig = resolve(load("ablation.toml"), &[]).unwrap();
        assert_eq!(abl.grid.cells().len(), 4);
    }
}
