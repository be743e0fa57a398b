//! Binary containers: `magic | u32 version | u64 header length | header
//! JSON | blocks`, all integers little-endian.

use std::path::Path;
use std::sync::Arc;

use super::{DescriptorField, Model, NetworkConfig};
use crate::data::atomic_write;
use crate::error::{Error, Result};
use crate::sparse::CoordSet;
use crate::tensor::DenseTensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"IMFNETCK";
const DESCRIPTOR_MAGIC: &[u8; 8] = b"IMFNETDS";
const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated container: need {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or(Error::Parse {
                offset: at,
                message: format!("implausible length {v}"),
            })
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::contract("size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<serde_json::Value> {
        if self.take(8)? != magic {
            return Err(Error::Parse {
                offset: 0,
                message: "wrong magic".into(),
            });
        }
        let at = self.pos;
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: at,
                message: format!("unsupported version {version}"),
            });
        }
        let n = self.len()?;
        let at = self.pos;
        serde_json::from_slice(self.take(n)?).map_err(|e| Error::Parse {
            offset: at,
            message: format!("bad header JSON: {e}"),
        })
    }
}

fn begin(magic: &[u8; 8], header: &serde_json::Value) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(32 + json.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Header holds the network config; each parameter follows as
/// `u64 name length | name | u64 rank | u64 dims… | f64 data`.
pub fn save_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::json!({
        "config": model.config,
        "parameters": model.params.len(),
    });
    let mut out = begin(CHECKPOINT_MAGIC, &header)?;
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u64).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, p.value.data());
    }
    Ok(out)
}

/// Restores a model. When `expected` is given, a differing stored config
/// is rejected.
pub fn load_checkpoint(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let header = r.header(CHECKPOINT_MAGIC)?;
    let config: NetworkConfig = serde_json::from_value(header["config"].clone())?;
    if let Some(want) = expected {
        if want != &config {
            return Err(Error::contract(
                "checkpoint config does not match the requested network config",
            ));
        }
    }
    let mut model = Model::build(config, 0)?;
    let count = header["parameters"].as_u64().unwrap_or(0) as usize;
    if count != model.params.len() {
        return Err(Error::contract(format!(
            "checkpoint holds {count} parameters, the config defines {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let n = r.len()?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Parse {
                offset: at,
                message: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = r.f64s(numel)?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))?;
        let slot = &mut model.params.get_mut(id).value;
        if slot.shape() != shape.as_slice() {
            return Err(Error::dim("load_checkpoint", slot.shape(), &shape));
        }
        slot.data_mut().copy_from_slice(&data);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            message: "trailing bytes after the last parameter".into(),
        });
    }
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    atomic_write(path, &save_checkpoint(model)?)
}

pub fn read_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<Model> {
    load_checkpoint(&std::fs::read(path)?, expected)
}

/// Header: rows, width, stride and the voxel→point map; blocks: `M×C`
/// descriptors, `M×3` voxel coordinates (as f64) and `M×3` centroids.
pub fn save_descriptors(field: &DescriptorField) -> Result<Vec<u8>> {
    let header = serde_json::json!({
        "rows": field.len(),
        "dim": field.dim(),
        "stride": field.coords.stride(),
        "point_map": field.point_map,
    });
    let mut out = begin(DESCRIPTOR_MAGIC, &header)?;
    put_f64s(&mut out, field.descriptors.data());
    for c in field.coords.coords() {
        put_f64s(&mut out, &c.map(f64::from));
    }
    for p in &field.points_xyz {
        put_f64s(&mut out, p);
    }
    Ok(out)
}

pub fn load_descriptors(bytes: &[u8]) -> Result<DescriptorField> {
    let mut r = Reader { bytes, pos: 0 };
    let header = r.header(DESCRIPTOR_MAGIC)?;
    let get = |k: &str| {
        header[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::contract(format!("descriptor header lacks '{k}'")))
    };
    let (rows, dim, stride) = (get("rows")?, get("dim")?, get("stride")?);
    let point_map: Vec<Vec<usize>> = serde_json::from_value(header["point_map"].clone())?;
    let descriptors = DenseTensor::new(vec![rows, dim], r.f64s(rows * dim)?)?;
    let coords = r
        .f64s(rows * 3)?
        .chunks_exact(3)
        .map(|c| [c[0] as i32, c[1] as i32, c[2] as i32])
        .collect();
    let points_xyz = r
        .f64s(rows * 3)?
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let coords = Arc::new(CoordSet::new(stride as i32, coords)?);
    if coords.len() != rows {
        return Err(Error::contract("descriptor coordinates are not unique"));
    }
    Ok(DescriptorField {
        descriptors,
        coords,
        point_map,
        points_xyz,
    })
}
