//! Checkpoint files: a magic line, one JSON header line, then raw
//! little-endian f32 parameters for every network in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::nn::{Network, NetworkSpec};
use super::AdError;

pub const MAGIC: &str = "SIMFLOW-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    pub spec: NetworkSpec,
    pub param_count: usize,
    /// Seed the network was initialized from.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub networks: Vec<NetworkEntry>,
    /// Free-form provenance, e.g. `base_hash` for control networks.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    /// Named raw arrays stored after the networks (optimizer moments).
    #[serde(default)]
    pub extras: Vec<(String, usize)>,
}

impl CheckpointHeader {
    pub fn total_params(&self) -> usize {
        self.networks.iter().map(|n| n.param_count).sum::<usize>() + self.extras.iter().map(|e| e.1).sum::<usize>()
    }
}

/// A set of named networks plus metadata, as stored on disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub networks: Vec<(String, Network)>,
    pub meta: BTreeMap<String, String>,
    pub extras: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self { networks: Vec::new(), meta: BTreeMap::new(), extras: Vec::new() }
    }

    pub fn with(mut self, name: &str, net: &Network) -> Self {
        self.networks.push((name.to_string(), net.clone()));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Network> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, net)| net)
    }

    pub fn extra(&self, name: &str) -> Option<&[f32]> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn take(&mut self, name: &str) -> Option<Network> {
        let i = self.networks.iter().position(|(n, _)| n == name)?;
        Some(self.networks.remove(i).1)
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            networks: self
                .networks
                .iter()
                .map(|(name, net)| NetworkEntry {
                    name: name.clone(),
                    spec: net.spec().clone(),
                    param_count: net.param_count(),
                    seed: net.seed(),
                })
                .collect(),
            meta: self.meta.clone(),
            extras: self.extras.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 32 + 4 * self.header().total_params());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for (_, net) in &self.networks {
            for v in net.params().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (_, values) in &self.extras {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(r: impl Read) -> Result<Self, AdError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(AdError::Format("not a checkpoint file".into()));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| AdError::Format(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(AdError::Format(format!("unsupported format version {}", header.format_version)));
        }
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != 4 * header.total_params() {
            return Err(AdError::Format(format!(
                "payload has {} bytes, header declares {} parameters",
                raw.len(),
                header.total_params()
            )));
        }
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut networks = Vec::with_capacity(header.networks.len());
        let mut off = 0;
        for entry in header.networks {
            let mut net = Network::build(entry.spec, entry.seed)?;
            if net.param_count() != entry.param_count {
                return Err(AdError::Format(format!("{}: parameter count mismatch", entry.name)));
            }
            net.params_mut().load_flat(&values[off..off + entry.param_count])?;
            off += entry.param_count;
            networks.push((entry.name, net));
        }
        let mut extras = Vec::with_capacity(header.extras.len());
        for (name, len) in header.extras {
            extras.push((name, values[off..off + len].to_vec()));
            off += len;
        }
        Ok(Self { networks, meta: header.meta, extras })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AdError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AdError> {
        Self::from_reader(fs::File::open(path)?)
    }

    /// SHA-256 of the serialized checkpoint, used to link derived artifacts.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        super::params::hex(&Sha256::digest(self.to_bytes()))
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}
