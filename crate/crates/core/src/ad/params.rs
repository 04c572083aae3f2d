use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{AdError, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Identifies one parameter tensor inside one store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

/// Named parameter tensors in declaration order.
///
/// Tensors sit behind `Arc` so a recorded graph can reference them without
/// copying; mutation goes through copy-on-write once the graph is dropped.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    tensors: Vec<Arc<Tensor>>,
    names: Vec<String>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { id: fresh_id(), tensors: self.tensors.clone(), names: self.names.clone() }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { id: fresh_id(), tensors: Vec::new(), names: Vec::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.tensors.push(Arc::new(t));
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey { store: self.id, index }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub(crate) fn shared(&self, i: usize) -> Arc<Tensor> {
        Arc::clone(&self.tensors[i])
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|t| t.as_ref())
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.count());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn load_flat(&mut self, values: &[f32]) -> Result<(), AdError> {
        if values.len() != self.count() {
            return Err(AdError::Shape(format!(
                "expected {} parameter values, got {}",
                self.count(),
                values.len()
            )));
        }
        let mut off = 0;
        for i in 0..self.tensors.len() {
            let t = self.get_mut(i);
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
