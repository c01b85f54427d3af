//! Flat `key = value` configuration files and flag/config/default resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

pub fn parse_config(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("{origin}:{}: expected `key = value`", i + 1)));
        };
        let key = normalize(k);
        if key.is_empty() {
            return Err(CliError::Usage(format!("{origin}:{}: empty key", i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("{origin}:{}: duplicate key {key}", i + 1)));
        }
    }
    Ok(out)
}

/// Resolves each setting as flag, then config file, then default, and
/// remembers the effective values in the order they were asked for.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    seen: BTreeSet<String>,
    effective: Vec<(String, String)>,
}

impl Resolver {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_config(&text, &p.display().to_string())?
            }
        };
        Ok(Self {
            file,
            ..Self::default()
        })
    }

    #[cfg(test)]
    pub fn from_map(file: BTreeMap<String, String>) -> Self {
        Self {
            file,
            ..Self::default()
        }
    }

    fn lookup<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let key = normalize(key);
        self.seen.insert(key.clone());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(&key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config value for {key}: {e}"))),
        }
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?.unwrap_or(default);
        self.effective.push((normalize(key), v.to_string()));
        Ok(v)
    }

    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?;
        if let Some(x) = &v {
            self.effective.push((normalize(key), x.to_string()));
        }
        Ok(v)
    }

    /// Keys in the file that no setting asked for are a usage error.
    pub fn check_unused(&self) -> Result<(), CliError> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.seen.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    /// The effective configuration, itself a valid config file.
    pub fn render(&self) -> String {
        self.effective.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|e| CliError::Usage(format!("bad {what} entry {p:?}: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let file = parse_config("# c\nstep-size = 0.5\n\nseed=3\n", "t").unwrap();
        let mut r = Resolver::from_map(file);
        assert_eq!(r.get("step_size", Some(0.25), 1.0).unwrap(), 0.25);
        assert_eq!(r.get::<u64>("seed", None, 0).unwrap(), 3);
        assert_eq!(r.get::<u64>("batch", None, 4).unwrap(), 4);
        assert_eq!(r.render(), "step_size = 0.25\nseed = 3\nbatch = 4\n");
        r.check_unused().unwrap();
    }

    #[test]
    fn rejects_bad_lines_and_unknown_keys() {
        assert!(matches!(parse_config("nonsense", "t"), Err(CliError::Usage(_))));
        assert!(matches!(parse_config("a = 1\na = 2", "t"), Err(CliError::Usage(_))));
        let mut r = Resolver::from_map(parse_config("seed = x\ntypo = 1", "t").unwrap());
        assert!(r.get::<u64>("seed", None, 0).is_err());
        assert!(r.check_unused().is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<f64>("-6, 0,6,12", "snr").unwrap(), vec![-6.0, 0.0, 6.0, 12.0]);
        assert!(parse_list::<usize>("4,x", "hidden").is_err());
    }
}
