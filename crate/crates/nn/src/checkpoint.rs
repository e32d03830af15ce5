//! `EDSW` checkpoint container, little-endian throughout:
//!
//! ```text
//! magic "EDSW" | version u32 | config_len u32 | config utf-8 (JSON)
//! | metadata_len u32 | metadata utf-8 (JSON) | count u32 | has_optimizer u8
//! | count x { name_len u32 | name | rank u32 | dims u32 x rank | f32 data
//!             | if has_optimizer: step u64 | f32 m | f32 v }
//! ```

use crate::error::{NnError, Result};
use crate::param::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"EDSW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub optimizer: Option<(u64, Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub metadata_json: String,
    pub params: Vec<StoredParam>,
}

fn to_f32<T: Scalar>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.f64() as f32).collect()
}

impl Checkpoint {
    pub fn capture<T: Scalar>(config_json: &str, metadata_json: &str, params: &[&Param<T>], with_optimizer: bool) -> Self {
        Self {
            config_json: config_json.to_string(),
            metadata_json: metadata_json.to_string(),
            params: params
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: to_f32(&p.value),
                    optimizer: with_optimizer.then(|| (p.step, to_f32(&p.m), to_f32(&p.v))),
                })
                .collect(),
        }
    }

    /// Copies stored values (and optimizer state when present) into
    /// `params`, matched by name. Every target must be present with the
    /// same shape.
    pub fn restore<'a, T: Scalar>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>) -> Result<()> {
        for p in params {
            let s = self
                .params
                .iter()
                .find(|s| s.name == p.name)
                .ok_or_else(|| NnError::Format(format!("missing parameter {}", p.name)))?;
            if s.shape != p.value.shape() {
                return Err(NnError::Shape { op: "checkpoint restore", expected: p.value.shape().to_vec(), got: s.shape.clone() });
            }
            let conv = |d: &[f32]| Tensor::from_vec(&s.shape, d.iter().map(|v| T::of(*v as f64)).collect());
            p.value = conv(&s.data)?;
            if let Some((step, m, v)) = &s.optimizer {
                p.step = *step;
                p.m = conv(m)?;
                p.v = conv(v)?;
            }
        }
        Ok(())
    }

    pub fn has_optimizer(&self) -> bool {
        self.params.first().is_some_and(|p| p.optimizer.is_some())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let opt = self.has_optimizer();
        if self.params.iter().any(|p| p.optimizer.is_some() != opt) {
            return Err(NnError::Format("optimizer state must be present for all or none".into()));
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.config_json)?;
        write_str(w, &self.metadata_json)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        w.write_all(&[opt as u8])?;
        for p in &self.params {
            write_str(w, &p.name)?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for d in &p.shape {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            write_f32s(w, &p.data)?;
            if let Some((step, m, v)) = &p.optimizer {
                w.write_all(&step.to_le_bytes())?;
                write_f32s(w, m)?;
                write_f32s(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(NnError::Format(format!("unsupported version {version}")));
        }
        let config_json = read_str(r)?;
        let metadata_json = read_str(r)?;
        let count = read_u32(r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(r)?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = read_f32s(r, n)?;
            let optimizer = if flag[0] == 1 {
                let mut step = [0u8; 8];
                r.read_exact(&mut step)?;
                Some((u64::from_le_bytes(step), read_f32s(r, n)?, read_f32s(r, n)?))
            } else {
                None
            };
            params.push(StoredParam { name, shape, data, optimizer });
        }
        Ok(Self { config_json, metadata_json, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, d: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(d.len() * 4);
    for v in d {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| NnError::Format(e.to_string()))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut b = vec![0u8; n * 4];
    r.read_exact(&mut b)?;
    Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}
