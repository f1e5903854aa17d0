//! Little-endian case files:
//!
//! ```text
//! "VU3D" | version u32 | D H W u32 | sz sx sy f32 | D·H·W f32 intensities
//! | count u8 (=4) | 4 × D·H·W u8 masks | n_real u8 | id_len u16 | id bytes
//! ```

use std::path::Path;

use super::{grid_len, LesionCase, Mask, Spacing, Volume3D, ANNOTATIONS_PER_CASE};
use crate::error::{Error, Result};

pub const CASE_MAGIC: &[u8; 4] = b"VU3D";
pub const CASE_VERSION: u32 = 1;

pub fn encode_case(case: &LesionCase) -> Vec<u8> {
    let n = grid_len(case.volume.grid);
    let mut out = Vec::with_capacity(40 + n * 4 + n * ANNOTATIONS_PER_CASE + case.case_id.len());
    out.extend_from_slice(CASE_MAGIC);
    out.extend_from_slice(&CASE_VERSION.to_le_bytes());
    for e in case.volume.grid {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    let sp = case.volume.spacing;
    for s in [sp.z, sp.x, sp.y] {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in &case.volume.intensities {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(case.annotations.len() as u8);
    for m in &case.annotations {
        out.extend(m.voxels.iter().map(|&b| b as u8));
    }
    out.push(case.n_real_annotations);
    out.extend_from_slice(&(case.case_id.len() as u16).to_le_bytes());
    out.extend_from_slice(case.case_id.as_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated {}: need {} bytes, {} remain",
                    what,
                    n,
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_case(buf: &[u8]) -> Result<LesionCase> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CASE_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"VU3D\""));
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != CASE_VERSION {
        return Err(Error::format(at, format!("unsupported version {}", version)));
    }
    let at = r.pos;
    let mut grid = [0usize; 3];
    for g in &mut grid {
        *g = r.u32("extents")? as usize;
    }
    if grid.iter().any(|&e| e == 0) {
        return Err(Error::format(at, format!("zero extent in {:?}", grid)));
    }
    let at = r.pos;
    let (sz, sx, sy) = (r.f32("spacing")?, r.f32("spacing")?, r.f32("spacing")?);
    let spacing = Spacing::new(sz, sx, sy);
    if [sz, sx, sy].iter().any(|&s| !(s > 0.0)) {
        return Err(Error::format(at, format!("non-positive spacing {:?}", spacing)));
    }
    let n = grid
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format(at, "extents overflow"))?;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(r.pos, "payload overflow"))?, "intensity payload")?;
    let intensities = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let at = r.pos;
    let count = r.u8("annotation count")?;
    if count as usize != ANNOTATIONS_PER_CASE {
        return Err(Error::format(
            at,
            format!("annotation count {} (expected {})", count, ANNOTATIONS_PER_CASE),
        ));
    }
    let mut annotations = Vec::with_capacity(ANNOTATIONS_PER_CASE);
    for _ in 0..ANNOTATIONS_PER_CASE {
        let at = r.pos;
        let raw = r.take(n, "mask payload")?;
        if let Some(i) = raw.iter().position(|&b| b > 1) {
            return Err(Error::format(at + i, format!("mask byte {} is not 0/1", raw[i])));
        }
        annotations.push(Mask {
            grid,
            voxels: raw.iter().map(|&b| b == 1).collect(),
        });
    }
    let at = r.pos;
    let n_real = r.u8("n_real_annotations")?;
    let len = r.u16("case id length")? as usize;
    let id_at = r.pos;
    let id = std::str::from_utf8(r.take(len, "case id")?)
        .map_err(|_| Error::format(id_at, "case id is not UTF-8"))?
        .to_string();
    if r.pos != buf.len() {
        return Err(Error::format(
            r.pos,
            format!("{} trailing bytes", buf.len() - r.pos),
        ));
    }
    let volume = Volume3D {
        grid,
        spacing,
        intensities,
    };
    LesionCase::new(id, volume, annotations, n_real).map_err(|e| Error::format(at, e.to_string()))
}

pub fn save_case(path: &Path, case: &LesionCase) -> Result<()> {
    std::fs::write(path, encode_case(case)).map_err(|e| Error::io(path, e))
}

pub fn load_case(path: &Path) -> Result<LesionCase> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_case(&bytes)
}
