//! Key-value run configuration.
//!
//! One `key = value` per line, `#` starts a comment. Flags override the
//! environment, which overrides the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "GEO_ANCHOR_SEED";

const KEYS: [&str; 10] = [
    "root",
    "seed",
    "n_points",
    "min_depth",
    "estimator",
    "priors",
    "categories",
    "intrinsics",
    "tau",
    "tolerance_ulps",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(format!("line {}: unknown key {k:?}", i + 1));
            }
            if values.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(format!("line {}: duplicate key {k:?}", i + 1));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// Settings after applying flag, environment and file precedence.
#[derive(Debug, Clone, Default)]
pub struct Resolved {
    values: BTreeMap<&'static str, String>,
}

impl Resolved {
    pub fn set(&mut self, key: &'static str, flag: Option<String>, file: &ConfigFile, default: Option<&str>) {
        let env = if key == "seed" { std::env::var(SEED_ENV).ok() } else { None };
        let v = flag.or(env).or_else(|| file.get(key).map(str::to_string)).or(default.map(str::to_string));
        if let Some(v) = v {
            self.values.insert(key, v);
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key).map(|v| v.parse::<T>().map_err(|e| format!("{key} = {v:?}: {e}"))).transpose()
    }

    pub fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        self.parsed(key)?.ok_or_else(|| format!("missing {key}"))
    }

    pub fn path(&self, key: &str) -> Result<Option<PathBuf>, String> {
        match self.raw(key) {
            None => Ok(None),
            Some(p) => {
                let p = PathBuf::from(p);
                if p.exists() {
                    Ok(Some(p))
                } else {
                    Err(format!("{key}: {} does not exist", p.display()))
                }
            }
        }
    }

    /// Canonical `key=value` lines, the input of the provenance digest.
    pub fn canonical(&self, command: &str) -> String {
        let mut s = format!("command={command}\n");
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_junk() {
        let c = ConfigFile::parse("# run\nseed = 7\n\nn_points=5 # five\n").unwrap();
        assert_eq!(c.get("seed"), Some("7"));
        assert_eq!(c.get("n_points"), Some("5"));
        assert!(ConfigFile::parse("colour = red").is_err());
        assert!(ConfigFile::parse("seed").is_err());
        assert!(ConfigFile::parse("seed=1\nseed=2").is_err());
    }

    #[test]
    fn flag_wins_over_file() {
        let c = ConfigFile::parse("tau = 0.5\nmin_depth = 0.2").unwrap();
        let mut r = Resolved::default();
        r.set("tau", Some("0.3".into()), &c, Some("0.25"));
        r.set("min_depth", None, &c, Some("0.1"));
        r.set("n_points", None, &c, Some("5"));
        assert_eq!(r.raw("tau"), Some("0.3"));
        assert_eq!(r.raw("min_depth"), Some("0.2"));
        assert_eq!(r.required::<usize>("n_points").unwrap(), 5);
        assert_eq!(r.canonical("x"), "command=x\nmin_depth=0.2\nn_points=5\ntau=0.3\n");
    }
}
