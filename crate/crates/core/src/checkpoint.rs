//! Versioned weight-store checkpoints.
//!
//! Layout: `SLIMCKPT`, format version (u32 LE), header length (u32 LE), a
//! JSON header carrying the model spec, its hash and every tensor shape,
//! then all tensor values as little-endian `f32` in header order.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamTensor};
use crate::spec::SlimmableModelSpec;

const MAGIC: &[u8; 8] = b"SLIMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec_hash: String,
    spec: SlimmableModelSpec,
    shapes: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: SlimmableModelSpec,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(spec: SlimmableModelSpec, params: ParamStore) -> Result<Self> {
        params.check_matches_spec(&spec)?;
        Ok(Checkpoint { spec, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            spec_hash: self.spec.hash(),
            spec: self.spec.clone(),
            shapes: self.params.layers.iter().map(|ts| ts.iter().map(|t| t.dims.clone()).collect()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.params.num_params());
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
        out.write_u32::<LittleEndian>(json.len() as u32).expect("vec write");
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for &v in &t.data {
                out.write_f32::<LittleEndian>(v).expect("vec write");
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let mut json = vec![0u8; len];
        cur.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json)?;
        let spec = header.spec.finalize()?;
        if spec.hash() != header.spec_hash {
            return Err(bad("spec hash mismatch"));
        }
        let mut layers = Vec::with_capacity(header.shapes.len());
        for shapes in header.shapes {
            let mut tensors = Vec::with_capacity(shapes.len());
            for dims in shapes {
                let mut t = ParamTensor::zeros(dims);
                cur.read_f32_into::<LittleEndian>(&mut t.data).map_err(|_| bad("truncated tensor data"))?;
                tensors.push(t);
            }
            layers.push(tensors);
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Checkpoint::new(spec, ParamStore { layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
