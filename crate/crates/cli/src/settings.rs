//! Option resolution: built-in defaults, then the config file, then flags.
//! Every resolved value is recorded so it can be written as a manifest.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use placevalue::kv::KvMap;

use crate::error::Usage;

pub struct Settings {
    file: KvMap,
    resolved: KvMap,
}

impl Settings {
    pub fn load(config: Option<&Path>) -> anyhow::Result<Self> {
        let file = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                KvMap::parse(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())))?
            }
            None => KvMap::new(),
        };
        Ok(Settings {
            file,
            resolved: KvMap::new(),
        })
    }

    /// `flag` if given, else the config file value for `key`, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(text) => text
                    .parse()
                    .map_err(|e| Usage(format!("config key `{key}` = `{text}`: {e}")))?,
                None => default,
            },
        };
        self.resolved.set(key, &value);
        Ok(value)
    }

    /// Like [`Settings::get`] for values without a default; `none` in the
    /// config file means unset.
    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> anyhow::Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some("none") | None => None,
                Some(text) => Some(
                    text.parse()
                        .map_err(|e| Usage(format!("config key `{key}` = `{text}`: {e}")))?,
                ),
            },
        };
        match &value {
            Some(v) => self.resolved.set(key, v),
            None => self.resolved.set(key, "none"),
        }
        Ok(value)
    }

    pub fn get_path(
        &mut self,
        key: &str,
        flag: Option<PathBuf>,
        default: &str,
    ) -> anyhow::Result<PathBuf> {
        let p = match flag {
            Some(p) => p,
            None => PathBuf::from(self.file.get(key).unwrap_or(default)),
        };
        self.resolved.set(key, p.display());
        Ok(p)
    }

    pub fn get_flag(&mut self, key: &str, flag: bool) -> anyhow::Result<bool> {
        let value = flag || self.get(key, None, false)?;
        self.resolved.set(key, value);
        Ok(value)
    }

    pub fn record(&mut self, key: &str, value: impl ToString) {
        self.resolved.set(key, value);
    }

    /// Resolved values, usable as a config file to repeat the run.
    pub fn manifest(&self, command: &str) -> String {
        let mut m = KvMap::new();
        m.set("command", command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m.merge(&self.resolved);
        m.render()
    }

    pub fn write_manifest(&self, dir: &Path, command: &str) -> anyhow::Result<()> {
        self.write_manifest_as(&dir.join("manifest.txt"), command)
    }

    pub fn write_manifest_as(&self, path: &Path, command: &str) -> anyhow::Result<()> {
        std::fs::write(path, self.manifest(command))
            .with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let mut s = Settings {
            file: KvMap::parse("epochs = 3\nlr = 0.5\n").unwrap(),
            resolved: KvMap::new(),
        };
        assert_eq!(s.get("epochs", Some(9usize), 25).unwrap(), 9);
        assert_eq!(s.get("lr", None, 1e-4).unwrap(), 0.5);
        assert_eq!(s.get("batch_size", None, 32usize).unwrap(), 32);
        assert_eq!(s.get_opt::<f64>("clip", None).unwrap(), None);
        let m = s.manifest("train");
        assert!(
            m.contains("epochs = 9\n") && m.contains("lr = 0.5\n") && m.contains("clip = none\n")
        );
    }

    #[test]
    fn bad_file_values_are_usage_errors() {
        let mut s = Settings {
            file: KvMap::parse("epochs = many\n").unwrap(),
            resolved: KvMap::new(),
        };
        let err = s.get("epochs", None, 25usize).unwrap_err();
        assert!(err.downcast_ref::<Usage>().is_some());
    }
}
