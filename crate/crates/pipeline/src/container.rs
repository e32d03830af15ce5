//! `EPIS` episode files. Little-endian throughout:
//!
//! ```text
//! header:
//!   magic "EPIS" | version u32 | episode id u32 | terrain kind code u32
//!   | terrain seed u64 | episode seed u64 | dt f64 | steps u32
//!   | depth width u32 | depth height u32 | lidar width u32 | lidar height u32
//!   | heightmap length u32
//! then `steps` records, each:
//!   record length u32 (bytes that follow)
//!   | position 3 x f64 | rotation 9 x f64 (row-major, body to world)
//!   | robot state 15 x f32
//!   | depth values w*h x f32 | depth validity ceil(w*h/8) bytes, LSB first
//!   | lidar values w*h x f32 | lidar validity bitmask
//!   | heightmap len x f32
//! ```
//!
//! Image values are row-major; invalid pixels are stored as 0.0.

use hmap_core::geometry::{Pose, TerrainKind, Vec3};
use hmap_core::image::MaskedImage;
use nalgebra::Matrix3;
use std::io::{Read, Write};
use std::path::Path;

use crate::episode::{Episode, Sample};
use crate::error::{PipelineError, Result};
use crate::model::STATE_DIM;

pub const MAGIC: &[u8; 4] = b"EPIS";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> PipelineError {
    PipelineError::Data(msg.into())
}

struct Buf(Vec<u8>);

impl Buf {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn image(&mut self, img: &MaskedImage) {
        self.f32s(&img.values);
        let mut bits = vec![0u8; img.len().div_ceil(8)];
        for (i, v) in img.valid.iter().enumerate() {
            if *v {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        self.0.extend_from_slice(&bits);
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.data.len()).ok_or_else(|| bad("truncated record"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
    fn image(&mut self, w: usize, h: usize) -> Result<MaskedImage> {
        let values = self.f32s(w * h)?;
        let bits = self.take((w * h).div_ceil(8))?;
        let valid: Vec<bool> = (0..w * h).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        if values.iter().zip(&valid).any(|(v, ok)| !v.is_finite() || (!ok && *v != 0.0)) {
            return Err(bad("image value inconsistent with its mask"));
        }
        Ok(MaskedImage { width: w, height: h, values, valid })
    }
}

pub fn write_episode(w: &mut impl Write, ep: &Episode) -> Result<()> {
    let first = ep.samples.first().ok_or(PipelineError::Empty("episode"))?;
    let (dw, dh) = (first.depth.width, first.depth.height);
    let (lw, lh) = (first.lidar.width, first.lidar.height);
    let hl = first.heightmap.len();
    let mut b = Buf(Vec::new());
    b.0.extend_from_slice(MAGIC);
    b.u32(VERSION);
    b.u32(ep.id);
    b.u32(ep.kind.code());
    b.u64(ep.terrain_seed);
    b.u64(ep.seed);
    b.f64(ep.dt);
    for v in [ep.samples.len(), dw, dh, lw, lh, hl] {
        b.u32(v as u32);
    }
    w.write_all(&b.0)?;
    for s in &ep.samples {
        if (s.depth.width, s.depth.height, s.lidar.width, s.lidar.height, s.heightmap.len()) != (dw, dh, lw, lh, hl) {
            return Err(bad("samples of one episode must share their shapes"));
        }
        let mut r = Buf(Vec::new());
        for k in 0..3 {
            r.f64(s.pose.position[k]);
        }
        for i in 0..3 {
            for j in 0..3 {
                r.f64(s.pose.rotation[(i, j)]);
            }
        }
        r.f32s(&s.state);
        r.image(&s.depth);
        r.image(&s.lidar);
        r.f32s(&s.heightmap);
        w.write_all(&(r.0.len() as u32).to_le_bytes())?;
        w.write_all(&r.0)?;
    }
    Ok(())
}

pub fn read_episode(r: &mut impl Read) -> Result<Episode> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("not an EPIS file"));
    }
    let u32_at = |c: &mut Cursor| -> Result<u32> { Ok(u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"))) };
    let version = u32_at(&mut c)?;
    if version != VERSION {
        return Err(bad(format!("unsupported EPIS version {version}")));
    }
    let id = u32_at(&mut c)?;
    let kind = TerrainKind::from_code(u32_at(&mut c)?).ok_or_else(|| bad("unknown terrain kind"))?;
    let terrain_seed = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes"));
    let seed = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes"));
    let dt = c.f64()?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = u32_at(&mut c)? as usize;
    }
    let [steps, dw, dh, lw, lh, hl] = dims;
    let mut samples = Vec::with_capacity(steps);
    for _ in 0..steps {
        let len = u32_at(&mut c)? as usize;
        let start = c.pos;
        let mut p = [0f64; 3];
        for v in p.iter_mut() {
            *v = c.f64()?;
        }
        let mut m = [0f64; 9];
        for v in m.iter_mut() {
            *v = c.f64()?;
        }
        let pose = Pose::new(Vec3::new(p[0], p[1], p[2]), Matrix3::from_row_slice(&m))?;
        let state: [f32; STATE_DIM] = c.f32s(STATE_DIM)?.try_into().expect("state length");
        let depth = c.image(dw, dh)?;
        let lidar = c.image(lw, lh)?;
        let heightmap = c.f32s(hl)?;
        if c.pos - start != len {
            return Err(bad("record length mismatch"));
        }
        samples.push(Sample { pose, state, depth, lidar, heightmap });
    }
    if c.pos != data.len() {
        return Err(bad("trailing bytes after the last record"));
    }
    Ok(Episode { id, kind, terrain_seed, seed, dt, samples })
}

pub fn save_episode(path: &Path, ep: &Episode) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_episode(&mut w, ep)?;
    w.flush()?;
    Ok(())
}

pub fn load_episode(path: &Path) -> Result<Episode> {
    read_episode(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
