//! Binary weights file.
//!
//! ```text
//! magic    8 bytes  "SDTOYNET"
//! version  u32 LE
//! hash     32 bytes sha256 of the header JSON
//! len      u64 LE   header JSON length
//! header   JSON     ToyHeader
//! count    u64 LE   number of parameters
//! params   f64 LE × count
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::ToyHeader;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"SDTOYNET";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn write_weights(path: &Path, header: &ToyHeader, params: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let hash = Sha256::digest(&json);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    w.write_all(&hash)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<(ToyHeader, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::WeightsFormat("file too short for magic".into()))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::WeightsFormat("not a toy denoiser weights file".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != WEIGHTS_VERSION {
        return Err(Error::WeightsFormat(format!(
            "unsupported version {version} (expected {WEIGHTS_VERSION})"
        )));
    }
    let hash: [u8; 32] = read_array(&mut r)?;
    let len = u64::from_le_bytes(read_array(&mut r)?) as usize;
    if len > 1 << 30 {
        return Err(Error::WeightsFormat("implausible header length".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::WeightsFormat("truncated header".into()))?;
    let actual = Sha256::digest(&json);
    if actual.as_slice() != hash {
        return Err(Error::WeightsFormat(format!(
            "config hash mismatch: file says {}, header hashes to {}",
            hex::encode(hash),
            hex::encode(actual)
        )));
    }
    let header: ToyHeader = serde_json::from_slice(&json)?;
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut params = Vec::with_capacity(count.min(1 << 26));
    for _ in 0..count {
        params.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::WeightsFormat(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, params))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::WeightsFormat("unexpected end of file".into()))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::super::ToyDenoiser;
    use super::*;
    use crate::diffusion::DiffusionSchedule;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        let d = ToyDenoiser::init(&[2], 4, DiffusionSchedule::default(), 1).unwrap();
        d.save(&path).unwrap();
        assert_eq!(ToyDenoiser::load(&path).unwrap(), d);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[60] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ToyDenoiser::load(&path), Err(Error::WeightsFormat(_))));

        std::fs::write(&path, b"garbage").unwrap();
        assert!(ToyDenoiser::load(&path).is_err());
    }
}
