//! Flat `key=value` text with dotted keys, kept in insertion order.

use crate::error::{Error, Result};
use std::fmt::Display;
use std::str::FromStr;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    /// A repeated key keeps its first position and its last value.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: invalid key '{k}'", i + 1)));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overlays `other` onto `self`.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key}: cannot parse '{v}': {e}"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn update<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.parse(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list value.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(v) = self.get(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| Error::Config(format!("{key}: cannot parse '{s}': {e}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Keys not in `known`; used to reject typos in config files.
    pub fn unknown_keys<'a>(&'a self, known: &[&str]) -> Vec<&'a str> {
        self.keys().filter(|k| !known.contains(k)).collect()
    }
}

/// Parses `on`/`off`/`true`/`false`/`1`/`0`.
pub fn parse_flag(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("expected on/off, got '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_roundtrip() {
        let text = "# run\nmodel.depth=8\n\ntrain.lr = 0.0003\nfusion.strategy=concat\n";
        let kv = KvMap::parse_text(text).unwrap();
        assert_eq!(kv.get("train.lr"), Some("0.0003"));
        assert_eq!(kv.render(), "model.depth=8\ntrain.lr=0.0003\nfusion.strategy=concat\n");
        assert_eq!(KvMap::parse_text(&kv.render()).unwrap(), kv);
    }

    #[test]
    fn malformed_lines_are_config_errors() {
        assert!(matches!(KvMap::parse_text("model.depth 8"), Err(Error::Config(_))));
        assert!(matches!(KvMap::parse_text("=3"), Err(Error::Config(_))));
        let kv = KvMap::parse_text("model.depth=eight").unwrap();
        assert!(matches!(kv.parse::<usize>("model.depth"), Err(Error::Config(_))));
    }

    #[test]
    fn repeated_key_keeps_last_value() {
        let kv = KvMap::parse_text("a=1\nb=2\na=3").unwrap();
        assert_eq!(kv.render(), "a=3\nb=2\n");
    }

    #[test]
    fn lists_and_flags() {
        let kv = KvMap::parse_text("grid.split=0.25, 0.5,0.75").unwrap();
        assert_eq!(kv.list::<f64>("grid.split").unwrap().unwrap(), vec![0.25, 0.5, 0.75]);
        assert!(parse_flag("on").unwrap());
        assert!(!parse_flag("OFF").unwrap());
        assert!(parse_flag("maybe").is_err());
    }
}
