//! Row-major f32 tables behind a one-line JSON header.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnGroup {
    /// `theta`, `x`, `sample`, ...
    pub role: String,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub task: String,
    pub rows: usize,
    pub columns: Vec<ColumnGroup>,
    pub seed: u64,
    pub config_hash: String,
    pub git_describe: String,
    #[serde(default)]
    pub failures: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl DatasetHeader {
    pub fn row_width(&self) -> usize {
        self.columns.iter().map(|c| c.width).sum()
    }

    /// Column offset and width of a role.
    pub fn column(&self, role: &str) -> Option<(usize, usize)> {
        let mut off = 0;
        for c in &self.columns {
            if c.role == role {
                return Some((off, c.width));
            }
            off += c.width;
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub data: Vec<f32>,
}

impl DatasetFile {
    /// Builds a table from per-role row blocks of equal length.
    pub fn from_groups(mut header: DatasetHeader, groups: &[(&str, &[Vec<f64>])]) -> Result<Self, HarnessError> {
        let rows = groups.first().map_or(0, |g| g.1.len());
        if groups.iter().any(|g| g.1.len() != rows) {
            return Err(HarnessError::Config("column groups differ in row count".into()));
        }
        header.columns = groups
            .iter()
            .map(|(role, r)| ColumnGroup { role: role.to_string(), width: r.first().map_or(0, Vec::len) })
            .collect();
        header.rows = rows;
        let mut data = Vec::with_capacity(rows * header.row_width());
        for i in 0..rows {
            for (g, c) in groups.iter().zip(&header.columns) {
                if g.1[i].len() != c.width {
                    return Err(HarnessError::Config(format!("ragged `{}` rows", c.role)));
                }
                data.extend(g.1[i].iter().map(|&v| v as f32));
            }
        }
        Ok(Self { header, data })
    }

    pub fn rows(&self) -> usize {
        self.header.rows
    }

    /// Rows of one role as f64.
    pub fn group(&self, role: &str) -> Result<Vec<Vec<f64>>, HarnessError> {
        let (off, w) = self.header.column(role).ok_or_else(|| HarnessError::Missing(format!("dataset has no `{role}` columns")))?;
        let rw = self.header.row_width();
        Ok((0..self.rows()).map(|i| self.data[i * rw + off..i * rw + off + w].iter().map(|&v| v as f64).collect()).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("serializable");
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_reader(r: impl Read) -> Result<Self, HarnessError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: DatasetHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| HarnessError::Format(format!("dataset header: {e}")))?;
        if header.format_version != DATASET_VERSION {
            return Err(HarnessError::Format(format!("unsupported dataset version {}", header.format_version)));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let expected = header.rows * header.row_width() * 4;
        if bytes.len() != expected {
            return Err(HarnessError::Format(format!("dataset body has {} bytes, header implies {expected}", bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let f = std::fs::File::open(path).map_err(|_| HarnessError::Missing(format!("{}", path.display())))?;
        Self::from_reader(f)
    }
}
