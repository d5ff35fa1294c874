//! `key=value` config files, spliced into argv ahead of the user's flags so
//! anything given on the command line wins.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Parses a config file body into `(key, value)` pairs. `#` starts a comment;
/// keys may use `_` or `-`.
pub fn parse_config(text: &str, path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
            path: path.to_path_buf(),
            line: k + 1,
            message: format!("expected key=value, found `{line}`"),
        })?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                line: k + 1,
                message: format!("invalid key `{key}`"),
            });
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Flags as argv tokens. `true`/`false` values toggle switches.
fn to_args(pairs: &[(String, String)]) -> Vec<OsString> {
    let mut args = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => args.push(format!("--{k}").into()),
            "false" => {}
            _ => {
                args.push(format!("--{k}").into());
                args.push(v.into());
            }
        }
    }
    args
}

/// Removes `--config <file>` from `argv` and returns argv with the file's
/// settings inserted right after the subcommand.
pub fn expand_argv(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config: Option<PathBuf> = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            let v = it.next().ok_or_else(|| CliError::Usage("--config needs a file".into()))?;
            config = Some(v.into());
        } else if let Some(v) = s.strip_prefix("--config=") {
            config = Some(v.into());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
    let extra = to_args(&parse_config(&text, &path)?);
    // The subcommand is the first token after the program name that is not
    // a flag.
    let sub = rest.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 2);
    let at = sub.unwrap_or(rest.len());
    let mut out = rest[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&rest[at..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(|s| s.into()).collect()
    }

    #[test]
    fn parses_pairs_and_comments() {
        let text = "# header\nseed = 7\nmax_rel_err=1e-4 # inline\n\nsort=true\n";
        let pairs = parse_config(text, Path::new("c")).unwrap();
        assert_eq!(
            pairs,
            vec![("seed".into(), "7".into()), ("max-rel-err".into(), "1e-4".into()), ("sort".into(), "true".into())]
        );
        assert!(matches!(parse_config("seed 7\n", Path::new("c")), Err(CliError::Config { line: 1, .. })));
    }

    #[test]
    fn splices_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "seed=3\nsort=true\nquiet=false\n").unwrap();
        let argv = os(&["setnet", "sweep", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
        let out = expand_argv(argv).unwrap();
        assert_eq!(out, os(&["setnet", "sweep", "--seed", "3", "--sort", "--seed", "9"]));
    }

    #[test]
    fn no_config_is_identity() {
        let argv = os(&["setnet", "train", "--arch", "8x8x1"]);
        assert_eq!(expand_argv(argv.clone()).unwrap(), argv);
    }

    #[test]
    fn missing_config_file_is_an_error() {
        let argv = os(&["setnet", "train", "--config=/nonexistent/x.cfg"]);
        assert!(matches!(expand_argv(argv), Err(CliError::Io { .. })));
    }
}
