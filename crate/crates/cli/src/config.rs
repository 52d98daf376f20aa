//! Key-value config files and the run fingerprint.
//!
//! A config file is TOML whose keys are long flag names of the chosen
//! subcommand (`crop-ratio = 1.3`, `ranks = [1, 5]`). Values from the file
//! fill in flags that were not given on the command line.

use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Flags that never influence report content.
const UNHASHED: [&str; 3] = ["jobs", "config", "out"];

fn toml_to_arg(key: &str, value: &toml::Value) -> Result<String, CliError> {
    Ok(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => {
            items.iter().map(|v| toml_to_arg(key, v)).collect::<Result<Vec<_>, _>>()?.join(",")
        }
        other => return Err(CliError::Usage(format!("config key {key}: unsupported value {other}"))),
    })
}

/// Extra `--flag value` arguments contributed by the config file for flags
/// the command line left unset.
pub fn config_args(
    path: &Path,
    sub_name: &str,
    sub_command: &Command,
    sub_matches: &ArgMatches,
) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
    let mut extra = Vec::new();
    for (key, value) in &table {
        let id = key.replace('-', "_");
        if id == "config" || !sub_command.get_arguments().any(|a| a.get_id().as_str() == id) {
            return Err(CliError::Usage(format!("config key {key} is not a flag of {sub_name}")));
        }
        if sub_matches.value_source(&id) == Some(ValueSource::CommandLine) {
            continue;
        }
        extra.push(OsString::from(format!("--{key}")));
        extra.push(OsString::from(toml_to_arg(key, value)?));
    }
    Ok(extra)
}

/// SHA-256 over the subcommand name and every resolved argument except
/// `--jobs`, `--config` and `--out`, truncated to 16 hex digits.
pub fn config_hash(sub_name: &str, sub_matches: &ArgMatches) -> String {
    let mut ids: Vec<&str> = sub_matches.ids().map(|i| i.as_str()).filter(|i| !UNHASHED.contains(i)).collect();
    ids.sort_unstable();
    let mut hasher = Sha256::new();
    hasher.update(sub_name.as_bytes());
    for id in ids {
        hasher.update(b"\n");
        hasher.update(id.as_bytes());
        if let Some(raw) = sub_matches.get_raw(id) {
            for v in raw {
                hasher.update(b"=");
                hasher.update(v.as_encoded_bytes());
            }
        }
    }
    hex::encode(&hasher.finalize()[..8])
}
