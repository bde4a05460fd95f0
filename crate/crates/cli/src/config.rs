//! Flat `key = value` config files merged in front of the command line.
//!
//! Every key is a long option of the subcommand (`lr = 0.01` becomes
//! `--lr=0.01`). File options are inserted before the user's own arguments
//! and options override earlier occurrences, so the command line wins.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses a config file into `--key=value` arguments.
pub fn read_config(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in config file {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got `{raw}`", i + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            bail!("line {}: invalid key `{}`", i + 1, key);
        }
        args.push(format!("--{key}={}", value.trim()));
    }
    Ok(args)
}

/// Rewrites `argv` so that options from any `--config FILE` come right
/// after the subcommand name.
pub fn expand_args(argv: Vec<String>) -> Result<Vec<String>> {
    let mut config = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut iter = argv.into_iter();
    while let Some(arg) = iter.next() {
        if arg == "--config" {
            config = Some(iter.next().context("--config needs a file path")?);
        } else if let Some(path) = arg.strip_prefix("--config=") {
            config = Some(path.to_owned());
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let injected = read_config(Path::new(&path))?;
    // binary name and subcommand stay in front
    let split = rest.len().min(2);
    let mut out: Vec<String> = rest[..split].to_vec();
    out.extend(injected);
    out.extend(rest[split..].iter().cloned());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blanks() {
        let args = parse_config("# desk run\nlr = 0.1\n\nbatch_size=16  # small\n--k = 7\n").unwrap();
        assert_eq!(args, vec!["--lr=0.1", "--batch-size=16", "--k=7"]);
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(parse_config("lr 0.1").is_err());
        assert!(parse_config("config = other.conf").is_err());
    }

    #[test]
    fn command_line_comes_last() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "lr = 0.5\n").unwrap();
        let argv = ["geocon", "train-encoder", "--lr", "0.1", "--config", path.to_str().unwrap()]
            .map(String::from)
            .to_vec();
        assert_eq!(
            expand_args(argv).unwrap(),
            vec!["geocon", "train-encoder", "--lr=0.5", "--lr", "0.1"]
        );
    }
}
