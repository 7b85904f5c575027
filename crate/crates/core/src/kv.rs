//! Plain-text `key=value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Config
//! structs expose their fields through [`KvFields`]; reading starts from the
//! current values and overrides whatever keys are present, so a file only
//! needs to list the fields that differ from the defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::{Error, Result};

/// A single scalar that can round-trip through a config value string.
pub trait KvValue {
    fn to_kv(&self) -> String;
    fn set_kv(&mut self, s: &str) -> std::result::Result<(), String>;
}

macro_rules! kv_from_str {
    ($($t:ty),*) => {$(
        impl KvValue for $t {
            fn to_kv(&self) -> String {
                self.to_string()
            }
            fn set_kv(&mut self, s: &str) -> std::result::Result<(), String> {
                *self = s.parse::<$t>().map_err(|e| format!("cannot parse {s:?}: {e}"))?;
                Ok(())
            }
        }
    )*};
}

kv_from_str!(f64, usize, u64, bool, String);

/// Config structs list their fields, in a stable order, by name.
pub trait KvFields {
    fn fields(&mut self) -> Vec<(&'static str, &mut dyn KvValue)>;

    /// Range and consistency checks run after every load.
    fn validate(&self) -> Result<()> {
        Ok(())
    }
}

/// Parsed `key=value` document, keys kept sorted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvDoc {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut doc = KvDoc::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source_name, i + 1, format!("expected key=value, got {line:?}")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse(source_name, i + 1, "empty key"));
            }
            if doc.entries.insert(k.to_string(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::parse(source_name, i + 1, format!("duplicate key `{k}`")));
            }
        }
        Ok(doc)
    }

    /// Applies a `key=value` override, replacing any existing entry.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must be key=value"))?;
        self.entries.insert(k.trim().to_string(), (v.trim().to_string(), 0));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Loads `target` from the entries under `prefix` (e.g. `"sim."`), leaving
    /// absent fields untouched. Keys consumed are removed from the document so
    /// callers can detect leftovers with [`KvDoc::ensure_consumed`].
    pub fn load_into<T: KvFields>(&mut self, prefix: &str, target: &mut T) -> Result<()> {
        for (name, field) in target.fields() {
            let key = format!("{prefix}{name}");
            if let Some((value, _)) = self.entries.remove(&key) {
                field.set_kv(&value).map_err(|reason| Error::config(&key, reason))?;
            }
        }
        target.validate()
    }

    pub fn ensure_consumed(&self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::config(
                k.clone(),
                if *line > 0 {
                    format!("unknown key (line {line})")
                } else {
                    "unknown key".to_string()
                },
            )),
        }
    }
}

/// Writes every field of `cfg` as `prefix+name=value` lines.
pub fn write_fields<T: KvFields + Clone>(cfg: &T, prefix: &str, out: &mut String) {
    let mut copy = cfg.clone();
    for (name, field) in copy.fields() {
        let _ = writeln!(out, "{prefix}{name}={}", field.to_kv());
    }
}

/// Parses a standalone config file with unprefixed keys.
pub fn from_kv_str<T: KvFields + Default>(text: &str, source_name: &str) -> Result<T> {
    let mut doc = KvDoc::parse(text, source_name)?;
    let mut cfg = T::default();
    doc.load_into("", &mut cfg)?;
    doc.ensure_consumed()?;
    Ok(cfg)
}

pub fn to_kv_string<T: KvFields + Clone>(cfg: &T) -> String {
    let mut s = String::new();
    write_fields(cfg, "", &mut s);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, Default, PartialEq)]
    struct Demo {
        a: f64,
        n: usize,
        flag: bool,
    }

    impl KvFields for Demo {
        fn fields(&mut self) -> Vec<(&'static str, &mut dyn KvValue)> {
            vec![("a", &mut self.a), ("n", &mut self.n), ("flag", &mut self.flag)]
        }
        fn validate(&self) -> Result<()> {
            if self.a < 0.0 {
                return Err(Error::config("a", "must be nonnegative"));
            }
            Ok(())
        }
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let d: Demo = from_kv_str("# header\n\na = 0.25 # trailing\nn=7\n", "demo").unwrap();
        assert_eq!(d, Demo { a: 0.25, n: 7, flag: false });
    }

    #[test]
    fn roundtrips_exact_floats() {
        let d = Demo { a: 0.1 + 0.2, n: 3, flag: true };
        let back: Demo = from_kv_str(&to_kv_string(&d), "demo").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn unknown_key_names_the_field() {
        let err = from_kv_str::<Demo>("a=1\nbogus=2\n", "demo").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn bad_value_names_the_field() {
        let err = from_kv_str::<Demo>("n=seven\n", "demo").unwrap_err();
        assert!(err.to_string().contains("`n`"), "{err}");
        let err = from_kv_str::<Demo>("a=-1\n", "demo").unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
    }

    #[test]
    fn missing_equals_is_a_parse_error() {
        assert!(matches!(
            KvDoc::parse("justakey\n", "demo"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn overrides_replace_entries() {
        let mut doc = KvDoc::parse("n=1\n", "demo").unwrap();
        doc.set_override("n=4").unwrap();
        let mut d = Demo::default();
        doc.load_into("", &mut d).unwrap();
        assert_eq!(d.n, 4);
    }
}
