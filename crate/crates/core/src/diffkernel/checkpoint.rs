//! Parameter checkpoint file: a named 64-bit tensor table with a JSON
//! config echo. Round trips losslessly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"TJCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: (usize, usize),
    pub values: Vec<f64>,
}

pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor], config_echo: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let cfg = serde_json::to_vec(config_echo).map_err(|e| CoreError::Parse(e.to_string()))?;
    w.write_u32::<LittleEndian>(cfg.len() as u32)?;
    w.write_all(&cfg)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name)?;
        w.write_u32::<LittleEndian>(t.shape.0 as u32)?;
        w.write_u32::<LittleEndian>(t.shape.1 as u32)?;
        if t.values.len() != t.shape.0 * t.shape.1 {
            return Err(CoreError::Shape(format!(
                "tensor '{}' shape/value mismatch",
                t.name
            )));
        }
        for v in &t.values {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<NamedTensor>, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CoreError::Parse("checkpoint: truncated header".into()))?;
    if &magic != MAGIC {
        return Err(CoreError::Parse("checkpoint: bad magic".into()));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| CoreError::Parse("checkpoint: truncated header".into()))?;
    if version != VERSION {
        return Err(CoreError::Parse(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)
        .map_err(|_| CoreError::Parse("checkpoint: truncated config echo".into()))?;
    let config_echo: serde_json::Value =
        serde_json::from_slice(&cfg).map_err(|e| CoreError::Parse(format!("checkpoint config: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r
            .read_u16::<LittleEndian>()
            .map_err(|_| CoreError::Parse("checkpoint: truncated tensor table".into()))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| CoreError::Parse("checkpoint: truncated tensor name".into()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            values.push(
                r.read_f64::<LittleEndian>()
                    .map_err(|_| CoreError::Parse("checkpoint: truncated tensor values".into()))?,
            );
        }
        tensors.push(NamedTensor {
            name: String::from_utf8(name)
                .map_err(|_| CoreError::Parse("checkpoint: tensor name not UTF-8".into()))?,
            shape: (rows, cols),
            values,
        });
    }
    Ok((tensors, config_echo))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|_| CoreError::Parse("checkpoint: unexpected end of file".into()))
}
