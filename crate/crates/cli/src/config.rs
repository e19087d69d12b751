//! Plain `key = value` run configuration files.
//!
//! Keys are long flag names with `_` in place of `-`. Values given on the
//! command line win over the file, which wins over built-in defaults.

use std::collections::BTreeSet;
use std::ffi::{OsStr, OsString};
use std::path::Path;

use clap::{Arg, ArgAction, Command};

use crate::Invalid;

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses a config file. `#` starts a comment; blank lines are ignored.
pub fn parse(text: &str, origin: &str) -> Result<Vec<Entry>, Invalid> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Invalid(format!("{origin}:{line}: expected `key = value`")))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
            return Err(Invalid(format!("{origin}:{line}: bad key {key:?}")));
        }
        if value.is_empty() {
            return Err(Invalid(format!("{origin}:{line}: empty value for {key}")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Invalid(format!(
                "{origin}:{line}: {key} already set on line {}",
                prev.line
            )));
        }
        out.push(Entry {
            key: key.to_string(),
            value: value.to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<Entry>, Invalid> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}

fn find_arg<'a>(cmd: &'a Command, long: &str) -> Option<&'a Arg> {
    cmd.get_arguments().find(|a| a.get_long() == Some(long))
}

fn takes_no_value(arg: &Arg) -> bool {
    matches!(arg.get_action(), ArgAction::SetTrue | ArgAction::SetFalse)
}

fn check_value(arg: &Arg, value: &str, key: &str) -> Result<(), Invalid> {
    if takes_no_value(arg) {
        return match value {
            "true" | "false" => Ok(()),
            _ => Err(Invalid(format!("config key {key}: expected true or false, got {value:?}"))),
        };
    }
    let values: Vec<&str> = if matches!(arg.get_action(), ArgAction::Append) {
        value.split(',').map(str::trim).collect()
    } else {
        vec![value]
    };
    let long = arg.get_long().unwrap_or(key);
    let probe = Command::new("config")
        .no_binary_name(true)
        .disable_help_flag(true)
        .arg(arg.clone().required(false));
    let mut argv: Vec<OsString> = Vec::new();
    for v in values {
        argv.push(format!("--{long}").into());
        argv.push(OsStr::new(v).into());
    }
    probe
        .try_get_matches_from(argv)
        .map_err(|e| Invalid(format!("config key {key}: {}", e.kind())))?;
    Ok(())
}

/// Flags spelled out on the command line, without leading dashes.
fn given_flags(args: &[OsString]) -> BTreeSet<String> {
    args.iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect()
}

/// Index of the subcommand token in `argv` (after the program name).
fn subcommand_index(root: &Command, argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let tok = argv[i].to_str()?;
        if let Some(flag) = tok.strip_prefix("--") {
            let takes_value = find_arg(root, flag).is_some_and(|a| !takes_no_value(a));
            i += if takes_value { 2 } else { 1 };
            continue;
        }
        if tok.starts_with('-') {
            i += 1;
            continue;
        }
        return root.find_subcommand(tok).map(|_| i);
    }
    None
}

/// Value of `--config` anywhere on the command line.
pub fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_str()?;
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

/// Inserts config-file settings as flags right after the subcommand, for
/// every key the command line does not already set. Keys belonging to other
/// subcommands are type-checked and then ignored; unknown keys are errors.
pub fn merge(root: &Command, argv: Vec<OsString>, entries: &[Entry]) -> Result<Vec<OsString>, Invalid> {
    let Some(sub_at) = subcommand_index(root, &argv) else {
        return Ok(argv);
    };
    let sub_name = argv[sub_at].to_str().unwrap_or_default().to_string();
    let sub = root.find_subcommand(&sub_name).expect("subcommand located above");
    let given = given_flags(&argv);
    let mut extra: Vec<OsString> = Vec::new();
    for e in entries {
        let long = e.key.replace('_', "-");
        if long == "config" || long == "help" {
            return Err(Invalid(format!("config key {} cannot be set from a file", e.key)));
        }
        let own = find_arg(sub, &long).or_else(|| find_arg(root, &long));
        let Some(arg) = own else {
            let other = root.get_subcommands().find_map(|c| find_arg(c, &long));
            match other {
                Some(arg) => {
                    check_value(arg, &e.value, &e.key)?;
                    continue;
                }
                None => return Err(Invalid(format!("unknown config key {} (line {})", e.key, e.line))),
            }
        };
        check_value(arg, &e.value, &e.key)?;
        if given.contains(&long) {
            continue;
        }
        if takes_no_value(arg) {
            if e.value == "true" {
                extra.push(format!("--{long}").into());
            }
        } else if matches!(arg.get_action(), ArgAction::Append) {
            for v in e.value.split(',') {
                extra.push(format!("--{long}").into());
                extra.push(v.trim().into());
            }
        } else {
            extra.push(format!("--{long}").into());
            extra.push(e.value.clone().into());
        }
    }
    let mut out = argv[..=sub_at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[sub_at + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_junk() {
        let entries = parse("# run\nepochs = 5  # short\n\nwidth=1/4\n", "cfg").unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].key, "epochs");
        assert_eq!(entries[0].value, "5");
        assert_eq!(entries[1].value, "1/4");
        assert!(parse("epochs 5\n", "cfg").is_err());
        assert!(parse("Epochs = 5\n", "cfg").is_err());
        assert!(parse("epochs =\n", "cfg").is_err());
        assert!(parse("epochs = 1\nepochs = 2\n", "cfg").is_err());
    }

    #[test]
    fn finds_config_path() {
        let argv: Vec<OsString> = ["x", "train", "--config", "a.cfg"].iter().map(Into::into).collect();
        assert_eq!(config_path(&argv), Some("a.cfg".into()));
        let argv: Vec<OsString> = ["x", "--config=b.cfg", "eval"].iter().map(Into::into).collect();
        assert_eq!(config_path(&argv), Some("b.cfg".into()));
    }
}
