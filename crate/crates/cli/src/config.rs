//! Flat `key = value` run configuration.
//!
//! Values come from, in order of precedence: command-line flags, the
//! `--config` file, built-in defaults. Every value that was consulted is
//! recorded so the merged result can be written back as a snapshot that
//! reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use wtfree_core::{Error, Result};

pub const SNAPSHOT_FILE: &str = "config.txt";

pub fn parse_config_text(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{source}:{}: expected key = value, got {line:?}", i + 1)))?;
        let key = key.trim().replace('_', "-");
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("{source}:{}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(out)
}

pub struct Resolver {
    command: &'static str,
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(command: &'static str, config_path: Option<&Path>) -> Result<Self> {
        let file = match config_path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
                parse_config_text(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        if let Some(c) = file.get("command") {
            if c != command {
                return Err(Error::Config(format!("config file is for `{c}`, not `{command}`")));
            }
        }
        Ok(Self { command, file, resolved: BTreeMap::new() })
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|raw| raw.parse::<T>().map_err(|e| Error::Config(format!("config key {key} = {raw:?}: {e}"))))
            .transpose()
    }

    /// Flag value, else config-file value, else `default`.
    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: impl FnOnce() -> T) -> Result<T>
    where
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or_else(default),
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Like [`Resolver::get`] for settings without a default; `None` is not recorded.
    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    /// Rejects config-file keys that this command never asked for.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .map(String::as_str)
            .filter(|k| *k != "command" && !self.resolved.contains_key(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys for `{}`: {}", self.command, unknown.join(", "))))
        }
    }

    pub fn snapshot(&self) -> String {
        let mut out = format!("command = {}\n", self.command);
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.snapshot()).map_err(|e| Error::Io { path, source: e })
    }
}

/// `all` or a positive item count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleCap {
    All,
    First(usize),
}

impl SampleCap {
    pub fn limit(self) -> Option<usize> {
        match self {
            SampleCap::All => None,
            SampleCap::First(n) => Some(n),
        }
    }
}

impl FromStr for SampleCap {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(SampleCap::All);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("sample count must be positive".into()),
            Ok(n) => Ok(SampleCap::First(n)),
            Err(_) => Err(format!("expected a count or `all`, got {s:?}")),
        }
    }
}

impl Display for SampleCap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleCap::All => f.write_str("all"),
            SampleCap::First(n) => write!(f, "{n}"),
        }
    }
}

/// Comma-separated list, e.g. `fgsm,bim` or `0,0.1,0.2`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|part| part.trim().parse::<T>().map_err(|e| format!("{part:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: Display> Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}
