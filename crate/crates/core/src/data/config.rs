use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// `key=value` lines; `#` starts a comment. Consumers remove the keys they
/// understand and [`finish`](KeyValues::finish) rejects whatever is left.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if kv.get(k).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
            kv.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KeyValues::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Insert or replace a value.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some(pos) = self.entries.iter().position(|(k, _)| k == key) else {
            return Ok(None);
        };
        let (_, v) = self.entries.remove(pos);
        v.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}")))
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(raw) = self.take::<String>(key)? else {
            return Ok(None);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("invalid list item {s:?} for key {key}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// One `key=value` line per entry, in insertion order.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Fail on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.first() {
            None => Ok(()),
            Some((k, _)) => Err(Error::Config(format!("unknown config key {k}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_take_finish() {
        let mut kv = KeyValues::parse("# data\nseed = 3\nmode=seg_cls # inline\n\nchannels=8, 16,32\n").unwrap();
        assert_eq!(kv.take::<u64>("seed").unwrap(), Some(3));
        assert_eq!(kv.take::<u64>("seed").unwrap(), None);
        assert_eq!(kv.take_list::<usize>("channels").unwrap(), Some(vec![8, 16, 32]));
        kv.set("count", "5");
        assert_eq!(kv.take_or("count", 1usize).unwrap(), 5);
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("mode"), "{err}");
    }

    #[test]
    fn malformed_input() {
        assert!(KeyValues::parse("a").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        let mut kv = KeyValues::parse("n=x").unwrap();
        assert!(matches!(kv.take::<usize>("n"), Err(Error::Config(_))));
    }
}
