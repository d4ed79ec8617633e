//! Line-oriented `key=value` configuration with typed lookups.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::formats::read_text;
use crate::error::{Error, Result};

/// Keys are unique; `#` starts a comment; later `set` calls override.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key=value, got {line:?}") })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse { line: i + 1, msg: format!("duplicate key {k:?}") });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Typed value, or `default` when absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::contract(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    /// Comma-separated list, or `default` when absent.
    pub fn get_list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::contract(format!("config key {key}: cannot parse item {s:?}"))))
                .collect(),
        }
    }

    /// Rejects any key outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::contract(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn merge(&mut self, other: &Config) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Sorted `key=value` lines; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_lookup_and_echo() {
        let c = Config::parse("# run\nepochs = 30\nwidths=16, 32,64\n\ntau=0.5 # temperature\n").unwrap();
        assert_eq!(c.get_or("epochs", 1usize).unwrap(), 30);
        assert_eq!(c.get_or("missing", 7usize).unwrap(), 7);
        assert_eq!(c.get_list("widths", vec![1usize]).unwrap(), vec![16, 32, 64]);
        assert_eq!(c.get_or("tau", 1.0f64).unwrap(), 0.5);
        assert!(c.get_or::<usize>("tau", 1).is_err());
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        assert!(c.check_known(&["epochs", "widths", "tau"]).is_ok());
        assert!(c.check_known(&["epochs"]).is_err());
    }

    #[test]
    fn parse_errors_name_the_line() {
        assert!(matches!(Config::parse("a=1\nnonsense\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(Config::parse("a=1\na=2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(Config::parse("=2\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn overrides_win() {
        let mut c = Config::parse("a=1\nb=2\n").unwrap();
        c.merge(&Config::parse("b=3\n").unwrap());
        c.set("c", 4);
        assert_eq!(c.to_text(), "a=1\nb=3\nc=4\n");
    }
}
