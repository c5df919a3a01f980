//! TOML configuration files.
//!
//! Keys are looked up in the subcommand's table first and then at top level,
//! so a file can hold shared settings next to per-command overrides:
//!
//! ```toml
//! workers = 4
//!
//! [stitch]
//! patch_size = 256
//! overlap = 0.25
//! ```
//!
//! Values given on the command line always win over the file, and the file
//! wins over built-in defaults. Keys use the long flag name with dashes
//! replaced by underscores.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;

use crate::UsageError;

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        Ok(ConfigFile { table })
    }

    /// Value for `key`, preferring `[section]` over the top level.
    pub fn get<T: DeserializeOwned>(&self, section: &str, key: &str) -> anyhow::Result<Option<T>> {
        let scoped = self
            .table
            .get(section)
            .and_then(|s| s.as_table())
            .and_then(|s| s.get(key));
        let Some(value) = scoped.or_else(|| self.table.get(key).filter(|v| !v.is_table())) else {
            return Ok(None);
        };
        value
            .clone()
            .try_into()
            .map(Some)
            .map_err(|e| UsageError(format!("config key `{key}`: {e}")).into())
    }

    /// `flag`, else the file value, else `default`.
    pub fn resolve<T: DeserializeOwned>(&self, section: &str, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(section, key)?.unwrap_or(default)),
        }
    }

    /// Like [`resolve`](Self::resolve) without a default.
    pub fn resolve_opt<T: DeserializeOwned>(&self, section: &str, key: &str, flag: Option<T>) -> anyhow::Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(section, key),
        }
    }
}
