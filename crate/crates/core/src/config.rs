//! Flat key-value configuration files.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment            (also `;`)
//! [section]            section header; names may contain dots, e.g. [chart.usability]
//! key = value          value runs to end of line, surrounding whitespace trimmed
//! ```
//!
//! Keys before the first header belong to the unnamed section `""`. A key may
//! appear once per section.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("[{section}] {key}: cannot parse {value:?}: {message}")]
    Value { section: String, key: String, value: String, message: String },
    #[error("[{section}] {key}: {message}")]
    Invalid { section: String, key: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Section {
    name: String,
    entries: BTreeMap<String, String>,
}

impl Section {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| ConfigError::Value {
                section: self.name.clone(),
                key: key.to_string(),
                value: v.clone(),
                message: e.to_string(),
            }),
        }
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Overwrites `slot` when the key is present.
    pub fn read_into<T>(&self, key: &str, slot: &mut T) -> Result<(), ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// A vector written `x, y, z`.
    pub fn vec3(&self, key: &str) -> Result<Option<[f64; 3]>, ConfigError> {
        let Some(raw) = self.raw(key) else {
            return Ok(None);
        };
        let parts: Result<Vec<f64>, _> = raw.split(',').map(|p| p.trim().parse::<f64>()).collect();
        match parts {
            Ok(v) if v.len() == 3 => Ok(Some([v[0], v[1], v[2]])),
            _ => Err(self.invalid(key, format!("expected `x, y, z`, got {raw:?}"))),
        }
    }

    pub fn invalid(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid { section: self.name.clone(), key: key.to_string(), message: message.into() }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    sections: BTreeMap<String, Section>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut current = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: lineno,
                    message: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(ConfigError::Syntax { line: lineno, message: format!("bad section name {name:?}") });
                }
                current = name.to_string();
                cfg.section_mut(&current);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: lineno,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax { line: lineno, message: format!("bad key {key:?}") });
            }
            let section = cfg.section_mut(&current);
            if section.entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: lineno,
                    message: format!("duplicate key {key:?} in [{current}]"),
                });
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.get(name)
    }

    pub fn section_mut(&mut self, name: &str) -> &mut Section {
        self.sections
            .entry(name.to_string())
            .or_insert_with(|| Section { name: name.to_string(), entries: BTreeMap::new() })
    }

    /// Sections whose name starts with `prefix.`, keyed by the remainder.
    pub fn subsections<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Section)> + 'a {
        self.sections.iter().filter_map(move |(name, s)| {
            name.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')).map(|r| (r, s))
        })
    }

    /// Serializes back to the same grammar, sections sorted by name.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, s) in &self.sections {
            if !name.is_empty() {
                out.push_str(&format!("[{name}]\n"));
            }
            for (k, v) in &s.entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let cfg = Config::parse(
            "top = 1\n# note\n[registration]\nvalidation_threshold_m = 0.02\n ; other\n[chart.usability]\ndirection = higher_better\n",
        )
        .unwrap();
        assert_eq!(cfg.section("").unwrap().get::<u32>("top").unwrap(), Some(1));
        let reg = cfg.section("registration").unwrap();
        assert_eq!(reg.get::<f64>("validation_threshold_m").unwrap(), Some(0.02));
        assert_eq!(reg.get::<f64>("missing").unwrap(), None);
        let charts: Vec<_> = cfg.subsections("chart").map(|(n, _)| n).collect();
        assert_eq!(charts, vec!["usability"]);
    }

    #[test]
    fn reports_line_of_syntax_errors() {
        match Config::parse("[a]\nok = 1\nbroken line\n") {
            Err(ConfigError::Syntax { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(Config::parse("[a\n").is_err());
        assert!(Config::parse("[a]\nk = 1\nk = 2\n").is_err());
    }

    #[test]
    fn bad_value_names_section_and_key() {
        let cfg = Config::parse("[s]\nn = abc\n").unwrap();
        let err = cfg.section("s").unwrap().get::<f64>("n").unwrap_err();
        assert!(err.to_string().contains("[s] n"));
    }

    #[test]
    fn text_round_trip() {
        let cfg = Config::parse("[b]\nx = 1\n[a]\ny = two words\n").unwrap();
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
