use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Human-readable key=value config: one pair per line, `#` comments and
/// blank lines ignored, later keys override earlier ones.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", lineno + 1)))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Typed lookup with a default; parse failures are hard errors so typos in
/// config files don't silently fall back.
pub fn config_get<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Format(format!("config key {key}: cannot parse {raw:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_overrides() {
        let text = "# comment\n\nk = 50\n trials=20 \nk=25\n";
        let map = parse_config(text).unwrap();
        assert_eq!(map.get("k").unwrap(), "25");
        assert_eq!(config_get(&map, "trials", 0usize).unwrap(), 20);
        assert_eq!(config_get(&map, "missing", 7usize).unwrap(), 7);
    }

    #[test]
    fn rejects_malformed_lines_and_bad_values() {
        assert!(parse_config("not a pair\n").is_err());
        let map = parse_config("k=fifty\n").unwrap();
        assert!(config_get(&map, "k", 0usize).is_err());
    }
}
