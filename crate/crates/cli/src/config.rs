//! `--config FILE` support: `key=value` lines whose keys are the long flag
//! names of the chosen subcommand. Values from the file only fill in flags
//! that were not given on the command line.

use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Command};

use crate::CliError;

/// Returns `argv` extended with `--key=value` arguments for every config
/// entry whose flag is absent from the command line.
pub fn merge(cmd: &Command, matches: &ArgMatches, argv: &[OsString]) -> Result<Vec<OsString>, CliError> {
    let Some((name, sub)) = matches.subcommand() else {
        return Ok(argv.to_vec());
    };
    let Some(path) = sub.try_get_one::<std::path::PathBuf>("config").ok().flatten() else {
        return Ok(argv.to_vec());
    };
    let entries = read(path)?;
    let spec = cmd
        .find_subcommand(name)
        .expect("matched subcommand exists");
    let mut out = argv.to_vec();
    for (key, value) in entries {
        let arg = spec
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config" && a.get_id() != "help")
            .ok_or_else(|| CliError::Usage(format!("{}: unknown key `{key}` for `{name}`", path.display())))?;
        if sub.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                other => {
                    return Err(CliError::Usage(format!(
                        "{}: `{key}` takes true or false, got `{other}`",
                        path.display()
                    )))
                }
            },
            _ => out.push(format!("--{key}={value}").into()),
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(se2cnn::error::Error::from)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(entries)
}
