//! Run manifests: the key/value record written next to every output,
//! enough to re-run the command and get the same bytes back.
//!
//! ```text
//! # pqd run manifest
//! command = pipeline
//! version = 0.1.0
//! seed = 3
//! threads = 1
//! data = synth:0
//! dataset_checksum = 5f2c01aa
//! config.order = prune:0.5:20,qat:40,kd:40
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

const HEADER: &str = "# pqd run manifest";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    /// Data source in `DataSource` syntax.
    pub data: String,
    pub dataset_checksum: u32,
    /// Every remaining flag of the command, by flag name.
    pub config: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        seed: u64,
        threads: usize,
        data: String,
        dataset_checksum: u32,
    ) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads,
            data,
            dataset_checksum,
            config: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.get(key).map(String::as_str)
    }

    pub fn render(&self) -> Result<String> {
        let mut lines = vec![
            HEADER.to_string(),
            format!("command = {}", self.command),
            format!("version = {}", self.version),
            format!("seed = {}", self.seed),
            format!("threads = {}", self.threads),
            format!("data = {}", self.data),
            format!("dataset_checksum = {:08x}", self.dataset_checksum),
        ];
        for (k, v) in &self.config {
            if k.is_empty()
                || k.contains(['=', '\n'])
                || k.trim() != k
                || v.contains('\n')
                || v.trim() != v
            {
                return Err(Error::config(format!(
                    "manifest entry {k:?} = {v:?} cannot be written"
                )));
            }
            lines.push(format!("config.{k} = {v}"));
        }
        let mut out = lines.join("\n");
        out.push('\n');
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields: BTreeMap<&str, (&str, usize)> = BTreeMap::new();
        let mut config = BTreeMap::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let pos = offset;
            offset += line.len();
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                position: pos,
                message: format!("expected key = value, found {body:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let dup = if let Some(key) = k.strip_prefix("config.") {
                config.insert(key.to_string(), v.to_string()).is_some()
            } else {
                fields.insert(k, (v, pos)).is_some()
            };
            if dup {
                return Err(Error::Parse {
                    position: pos,
                    message: format!("duplicate key {k:?}"),
                });
            }
        }
        let end = text.len();
        let mut take = |key: &str| {
            fields.remove(key).ok_or_else(|| Error::Parse {
                position: end,
                message: format!("missing key {key:?}"),
            })
        };
        let num = |(v, pos): (&str, usize), radix: u32| {
            u64::from_str_radix(v, radix).map_err(|_| Error::Parse {
                position: pos,
                message: format!("expected a number, found {v:?}"),
            })
        };
        let command = take("command")?.0.to_string();
        let version = take("version")?.0.to_string();
        let seed = num(take("seed")?, 10)?;
        let threads = num(take("threads")?, 10)? as usize;
        let data = take("data")?.0.to_string();
        let checksum = take("dataset_checksum")?;
        let dataset_checksum = u32::try_from(num(checksum, 16)?).map_err(|_| Error::Parse {
            position: checksum.1,
            message: "checksum exceeds 32 bits".into(),
        })?;
        if let Some((k, (_, pos))) = fields.into_iter().next() {
            return Err(Error::Parse {
                position: pos,
                message: format!("unknown key {k:?}"),
            });
        }
        Ok(Self {
            command,
            version,
            seed,
            threads,
            data,
            dataset_checksum,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
