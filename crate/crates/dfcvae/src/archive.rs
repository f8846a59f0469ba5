//! Named-tensor archive: a single binary file holding named f64 tensors in
//! row-major order plus a plain-text metadata block. Used for model
//! checkpoints, loss-network weights and attribute vectors.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DFCA";
pub const FORMAT_VERSION: u32 = 1;

/// An ordered collection of named tensors with key-value metadata.
#[derive(Clone, Debug, Default)]
pub struct TensorArchive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: IndexMap<String, ArrayD<f64>>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Corrupt(format!("missing metadata key `{key}`")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.metadata.len() as u32)?;
        for (k, v) in &self.metadata {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_str(&mut w, name)?;
            w.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for d in t.shape() {
                w.write_u64::<LittleEndian>(*d as u64)?;
            }
            let data = t
                .as_standard_layout()
                .as_slice()
                .expect("standard layout")
                .to_vec();
            for v in data {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Corrupt("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let n_meta = r.read_u32::<LittleEndian>()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            metadata.insert(k, v);
        }
        let n_tensors = r.read_u32::<LittleEndian>()?;
        let mut tensors = IndexMap::new();
        for _ in 0..n_tensors {
            let name = read_str(&mut r)?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            if ndim > 8 {
                return Err(Error::Corrupt(format!("tensor `{name}` has ndim {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = vec![0f64; len];
            r.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| Error::Corrupt(format!("truncated data for tensor `{name}`")))?;
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Corrupt(format!("tensor `{name}`: {e}")))?;
            tensors.insert(name, arr);
        }
        Ok(TensorArchive { metadata, tensors })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 20 {
        return Err(Error::Corrupt(format!("string length {len} out of range")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Corrupt("truncated string".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Corrupt("non-utf8 string".into()))
}
