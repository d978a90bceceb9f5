//! `SLAT` sparse voxel latent files.
//!
//! Layout (little-endian): magic `SLAT`, `u32` version (1), `u32` grid size
//! `N`, `u64` voxel count `L`, `u32` channels `C`, then `L x 3` `u32`
//! positions in lexicographic order and `L x C` `f32` latents row-major.

use std::fs;
use std::path::Path;

use fusecond_core::voxel::SparseVoxelLatent;
use fusecond_core::Matrix;

use crate::error::{Error, Result};
use crate::tensor::Reader;

pub const MAGIC: &[u8; 4] = b"SLAT";
pub const VERSION: u32 = 1;

pub fn slat_to_bytes(s: &SparseVoxelLatent) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + s.len() * (12 + 4 * s.channels()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&s.grid_size().to_le_bytes());
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(&(s.channels() as u32).to_le_bytes());
    for p in s.positions() {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for &v in s.latents().as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn slat_from_bytes(bytes: &[u8]) -> Result<SparseVoxelLatent> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected SLAT".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SLAT version {version}")));
    }
    let n = r.u32()?;
    let l = usize::try_from(r.u64()?).map_err(|_| Error::Format("voxel count overflow".into()))?;
    let c = r.u32()? as usize;
    let expect = l
        .checked_mul(12)
        .and_then(|p| l.checked_mul(c).and_then(|x| x.checked_mul(4)).and_then(|x| x.checked_add(p)))
        .ok_or_else(|| Error::Format("size overflow".into()))?;
    if r.remaining() != expect {
        return Err(Error::Format(format!("body is {} bytes, header requires {expect}", r.remaining())));
    }
    let mut positions = Vec::with_capacity(l);
    for _ in 0..l {
        positions.push([r.u32()?, r.u32()?, r.u32()?]);
    }
    let mut data = Vec::with_capacity(l * c);
    for _ in 0..l * c {
        data.push(f64::from(r.f32()?));
    }
    Ok(SparseVoxelLatent::new(n, positions, Matrix::from_vec(l, c, data)?)?)
}

pub fn save_slat(path: impl AsRef<Path>, s: &SparseVoxelLatent) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, slat_to_bytes(s)).map_err(|e| Error::io(path, e))
}

pub fn load_slat(path: impl AsRef<Path>) -> Result<SparseVoxelLatent> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    slat_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SparseVoxelLatent {
        let latents = Matrix::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        SparseVoxelLatent::new(4, vec![[0, 1, 2], [3, 0, 0]], latents).unwrap()
    }

    #[test]
    fn layout_and_round_trip() {
        let b = slat_to_bytes(&sample());
        assert_eq!(&b[..4], b"SLAT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[32..36].try_into().unwrap()), 2);
        assert_eq!(b.len(), 24 + 24 + 16);
        assert_eq!(slat_from_bytes(&b).unwrap(), sample());
    }

    #[test]
    fn rejects_bad_files() {
        let b = slat_to_bytes(&sample());
        assert!(slat_from_bytes(&b[..b.len() - 2]).is_err());
        let mut unsorted = b.clone();
        unsorted[24..36].copy_from_slice(&[3, 0, 0, 0, 3, 0, 0, 0, 3, 0, 0, 0]);
        assert!(slat_from_bytes(&unsorted).is_err());
        let mut magic = b;
        magic[3] = b'X';
        assert!(slat_from_bytes(&magic).is_err());
    }
}
