//! Config files mirror the command-line flags: `lr = 0.01` stands for
//! `--lr 0.01`, `kq = true` for `--kq`, arrays for comma lists. Top-level
//! scalars apply to every subcommand; a table named after a subcommand applies
//! to that one only.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::Value;

pub fn load(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let value = if is_toml {
        toml::from_str::<Value>(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    if !value.is_object() {
        bail!("config {} must be a table of flags", path.display());
    }
    Ok(value)
}

fn scalar(v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        other => bail!("unsupported config value {other}"),
    })
}

fn push_flag(out: &mut Vec<OsString>, key: &str, value: &Value) -> Result<()> {
    let flag = format!("--{}", key.replace('_', "-"));
    match value {
        Value::Null | Value::Bool(false) => {}
        Value::Bool(true) => out.push(flag.into()),
        Value::Array(items) => {
            if !items.is_empty() {
                let parts: Result<Vec<String>> = items.iter().map(scalar).collect();
                out.push(flag.into());
                out.push(parts?.join(",").into());
            }
        }
        Value::Object(_) => bail!("config key {key} holds a table"),
        other => {
            out.push(flag.into());
            out.push(scalar(other)?.into());
        }
    }
    Ok(())
}

/// Flags contributed by `config` to the subcommand `command`.
pub fn flags_for(config: &Value, command: &str, commands: &[&str]) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    let table = config.as_object().expect("checked on load");
    for (key, value) in table {
        if commands.contains(&key.as_str()) {
            continue;
        }
        push_flag(&mut out, key, value)?;
    }
    if let Some(section) = table.get(command) {
        let section = section
            .as_object()
            .with_context(|| format!("config section {command} must be a table"))?;
        for (key, value) in section {
            push_flag(&mut out, key, value)?;
        }
    }
    Ok(out)
}

/// Rebuilds the argument vector with the config flags placed right after the
/// subcommand, so flags given on the command line override them.
pub fn splice(args: &[OsString], command: &str, flags: Vec<OsString>) -> Vec<OsString> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            i += 2;
            continue;
        }
        if a == command {
            break;
        }
        i += 1;
    }
    let mut out: Vec<OsString> = args[..i.min(args.len())].to_vec();
    if i < args.len() {
        out.push(args[i].clone());
        out.extend(flags);
        out.extend_from_slice(&args[i + 1..]);
    }
    out
}
