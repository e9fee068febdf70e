//! Flat `key = value` configuration files.
//!
//! One entry per line, UTF-8. Blank lines and lines starting with `#` are ignored.
//! Keys keep their file order; writing a parsed file back yields the same bytes
//! as long as it was produced by [`KeyValues::to_string`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(format!("line {}", lineno + 1), "expected `key = value`")
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(format!("line {}", lineno + 1), "empty key"));
            }
            kv.set(key, value.trim());
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Insert or replace; replaced keys keep their original position.
    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Apply every entry of `other` on top of `self`.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    /// Entries whose key starts with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KeyValues {
        KeyValues {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::invalid(key, format!("`{v}`: {e}"))),
        }
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.parsed(key)?
            .ok_or_else(|| Error::invalid(key, "missing required key"))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => parse_list(v).map(Some).map_err(|e| Error::invalid(key, e)),
        }
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub fn parse_list<T: FromStr>(text: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<T>().map_err(|e| format!("`{s}`: {e}"))
        })
        .collect()
}

pub fn join_list<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_trims() {
        let kv = KeyValues::parse("# header\n a = 1 \n\nb=two, three\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("two, three"));
        assert_eq!(kv.parsed::<u32>("a").unwrap(), Some(1));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut kv = KeyValues::new();
        kv.set("scenario", "double_well");
        kv.set("sim.dt", 0.001);
        kv.set("basis.retained", join_list(&[1, 5, 9]));
        let text = kv.to_string();
        let again = KeyValues::parse(&text).unwrap().to_string();
        assert_eq!(text, again);
    }

    #[test]
    fn bad_value_names_the_field() {
        let kv = KeyValues::parse("sim.m = lots").unwrap();
        match kv.parsed::<usize>("sim.m") {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "sim.m"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_separator_is_a_parse_error() {
        assert!(matches!(
            KeyValues::parse("novalue"),
            Err(Error::Parse { .. })
        ));
    }
}
