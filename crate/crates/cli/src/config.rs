//! `--config` files: a TOML document whose top-level keys set global flags
//! and whose `[<subcommand>]` tables set that subcommand's flags. Keys are
//! long flag names; flags given on the command line take precedence.

use std::ffi::OsString;
use std::path::PathBuf;

use crate::CliError;

pub const SUBCOMMANDS: [&str; 6] = ["fit", "transport", "indirect", "synth", "simulate", "validate"];
const GLOBAL_FLAGS: [&str; 3] = ["seed", "out", "log-level"];

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    std::env::var_os("AGGCATE_CONFIG").map(PathBuf::from)
}

fn has_flag(args: &[OsString], name: &str) -> bool {
    let long = format!("--{name}");
    let eq = format!("--{name}=");
    args.iter().any(|a| {
        let a = a.to_string_lossy();
        a == long || a.starts_with(&eq)
    })
}

fn env_set(name: &str) -> bool {
    let var = format!("AGGCATE_{}", name.to_ascii_uppercase().replace('-', "_"));
    std::env::var_os(var).is_some()
}

fn render(key: &str, value: &toml::Value, out: &mut Vec<OsString>) -> Result<(), CliError> {
    let flag = format!("--{key}");
    match value {
        toml::Value::Boolean(true) => out.push(flag.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::String(s) => out.extend([flag.into(), s.into()]),
        toml::Value::Integer(i) => out.extend([flag.into(), i.to_string().into()]),
        toml::Value::Float(f) => out.extend([flag.into(), f.to_string().into()]),
        toml::Value::Array(items) => {
            for item in items {
                render(key, item, out)?;
            }
        }
        _ => return Err(CliError::Input(format!("config: unsupported value for `{key}`"))),
    }
    Ok(())
}

/// Command-line arguments with config-file defaults spliced in.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
    let doc: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
    let Some(pos) = args.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(args);
    };
    let sub = args[pos].to_string_lossy().to_string();
    let mut extra = Vec::new();
    for (key, value) in &doc {
        match value {
            toml::Value::Table(_) => {
                if !SUBCOMMANDS.contains(&key.as_str()) {
                    return Err(CliError::Input(format!("config {}: unknown table [{key}]", path.display())));
                }
            }
            _ if GLOBAL_FLAGS.contains(&key.as_str()) => {
                if !has_flag(&args, key) && !env_set(key) {
                    render(key, value, &mut extra)?;
                }
            }
            _ => return Err(CliError::Input(format!("config {}: unknown global key `{key}`", path.display()))),
        }
    }
    if let Some(toml::Value::Table(table)) = doc.get(&sub) {
        for (key, value) in table {
            if !has_flag(&args, key) {
                render(key, value, &mut extra)?;
            }
        }
    }
    let mut out = args;
    let tail = out.split_off(pos + 1);
    out.extend(extra);
    out.extend(tail);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_wins_over_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "seed = 7\n[simulate]\nreps = 3\nscenario-set = \"1trial\"\n").unwrap();
        let args: Vec<OsString> =
            ["aggcate", "--config", cfg.to_str().unwrap(), "simulate", "--reps", "5"].iter().map(OsString::from).collect();
        let out: Vec<String> = expand_args(args).unwrap().iter().map(|a| a.to_string_lossy().to_string()).collect();
        assert!(out.contains(&"1trial".to_string()));
        assert_eq!(out.iter().filter(|a| *a == "--reps").count(), 1);
        assert!(out.contains(&"5".to_string()));
        assert!(out.contains(&"--seed".to_string()) || std::env::var_os("AGGCATE_SEED").is_some());
    }
}
