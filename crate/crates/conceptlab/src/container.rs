//! Versioned binary container shared by model checkpoints and probe sets.
//!
//! Layout: magic `CLAB` | format version (u32 LE) | section tag (4 bytes,
//! `MODL` or `PROB`) | header length (u64 LE) | JSON header | tensor payload
//! as little-endian f32. The header carries a name/shape/offset table for
//! the payload.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CLAB";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// element offset into the f32 payload
    pub offset: u64,
    /// element count
    pub len: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderDoc {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub struct Container {
    pub section: [u8; 4],
    pub meta: serde_json::Value,
    pub tensors: Vec<(TensorEntry, Vec<f32>)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<(&TensorEntry, &[f32])> {
        self.tensors
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, d)| (e, d.as_slice()))
    }
}

pub fn write_container(
    path: &Path,
    section: [u8; 4],
    meta: serde_json::Value,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in tensors {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Format(format!(
                "tensor `{name}` shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len() as u64,
        });
        offset += data.len() as u64;
    }
    let header = serde_json::to_vec(&HeaderDoc {
        meta,
        tensors: entries,
    })
    .expect("header serializes");

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CONTAINER_VERSION).map_err(io)?;
    w.write_all(&section).map_err(io)?;
    w.write_u64::<LittleEndian>(header.len() as u64).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for (_, _, data) in tensors {
        for v in data {
            w.write_f32::<LittleEndian>(*v).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CONTAINER_VERSION {
        return Err(Error::Compatibility(format!(
            "container version {version} != supported {CONTAINER_VERSION}"
        )));
    }
    let mut section = [0u8; 4];
    r.read_exact(&mut section).map_err(io)?;
    let header_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(io)?;
    let doc: HeaderDoc = serde_json::from_slice(&header)
        .map_err(|e| Error::Format(format!("container header: {e}")))?;

    let mut tensors = Vec::with_capacity(doc.tensors.len());
    for entry in doc.tensors {
        let mut data = vec![0f32; entry.len as usize];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
        tensors.push((entry, data));
    }
    Ok(Container {
        section,
        meta: doc.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let tensors = vec![
            ("a.w".to_string(), vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("a.b".to_string(), vec![2], vec![-1.0, -2.0]),
        ];
        write_container(&path, *b"MODL", serde_json::json!({"k": 1}), &tensors).unwrap();
        let c = read_container(&path).unwrap();
        assert_eq!(&c.section, b"MODL");
        assert_eq!(c.meta["k"], 1);
        let (e, d) = c.tensor("a.w").unwrap();
        assert_eq!(e.shape, vec![2, 3]);
        assert_eq!(d, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(c.tensor("missing").is_none());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_container(&path), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let tensors = vec![("a".to_string(), vec![3], vec![1.0])];
        assert!(write_container(&path, *b"PROB", serde_json::json!({}), &tensors).is_err());
    }
}
