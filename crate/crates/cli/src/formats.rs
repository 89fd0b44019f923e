//! On-disk container for voxel volumes.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "EBSDVOL1"
//! version  u16      currently 1
//! dtype    u8       0 = f64
//! dims     u32 * 3
//! channels u8
//! payload  f64 * (n1*n2*n3*channels)   orientation values
//! sections repeated to EOF:
//!   tag    4 bytes  ("IDS\0" u32 grain IDs, "BND\0" u8 boundary flags)
//!   length u64      section payload bytes
//!   payload
//! ```
//!
//! Unknown sections are skipped via their length prefix.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use slicerec_core::volume::{BoundaryMask, GrainMap, OrientationVolume};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"EBSDVOL1";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;
const TAG_IDS: &[u8; 4] = b"IDS\0";
const TAG_BOUNDARIES: &[u8; 4] = b"BND\0";

#[derive(Debug, Error)]
pub enum VolumeFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a volume file (bad magic)")]
    BadMagic,
    #[error("unsupported volume file version {0}")]
    BadVersion(u16),
    #[error("malformed volume file: {0}")]
    Malformed(String),
}

/// In-memory contents of a volume file.
#[derive(Debug, Clone)]
pub struct VolumeFile {
    pub values: OrientationVolume,
    pub ids: Option<GrainMap>,
    pub boundaries: Option<BoundaryMask>,
}

impl VolumeFile {
    pub fn new(values: OrientationVolume) -> VolumeFile {
        VolumeFile {
            values,
            ids: None,
            boundaries: None,
        }
    }

    pub fn with_ids(mut self, ids: GrainMap) -> VolumeFile {
        self.ids = Some(ids);
        self
    }

    pub fn with_boundaries(mut self, boundaries: BoundaryMask) -> VolumeFile {
        self.boundaries = Some(boundaries);
        self
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), VolumeFileError> {
        let shape = self.values.shape();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[DTYPE_F64])?;
        for d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[3u8])?;
        for &v in self.values.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(ids) = &self.ids {
            if ids.shape() != shape {
                return Err(VolumeFileError::Malformed(
                    "ID section shape differs from the value payload".into(),
                ));
            }
            w.write_all(TAG_IDS)?;
            w.write_all(&((ids.ids().len() * 4) as u64).to_le_bytes())?;
            for &id in ids.ids() {
                w.write_all(&id.to_le_bytes())?;
            }
        }
        if let Some(b) = &self.boundaries {
            if b.shape() != shape {
                return Err(VolumeFileError::Malformed(
                    "boundary section shape differs from the value payload".into(),
                ));
            }
            w.write_all(TAG_BOUNDARIES)?;
            w.write_all(&(b.flags().len() as u64).to_le_bytes())?;
            let bytes: Vec<u8> = b.flags().iter().map(|&f| f as u8).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<VolumeFile, VolumeFileError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(VolumeFileError::BadMagic);
        }
        let version = read_u16(r)?;
        if version != VERSION {
            return Err(VolumeFileError::BadVersion(version));
        }
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(VolumeFileError::Malformed(format!(
                "unsupported dtype code {}",
                dtype[0]
            )));
        }
        let shape = [
            read_u32(r)? as usize,
            read_u32(r)? as usize,
            read_u32(r)? as usize,
        ];
        let mut channels = [0u8; 1];
        r.read_exact(&mut channels)?;
        if channels[0] != 3 {
            return Err(VolumeFileError::Malformed(format!(
                "expected 3 channels, got {}",
                channels[0]
            )));
        }
        let n = shape[0] * shape[1] * shape[2];
        let mut values = vec![0.0f64; n * 3];
        let mut buf8 = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
        let values = OrientationVolume::from_raw(shape, values)
            .map_err(|e| VolumeFileError::Malformed(e.to_string()))?;

        let mut out = VolumeFile::new(values);
        loop {
            let mut tag = [0u8; 4];
            match r.read_exact(&mut tag) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let len = read_u64(r)? as usize;
            match &tag {
                t if t == TAG_IDS => {
                    if len != n * 4 {
                        return Err(VolumeFileError::Malformed(format!(
                            "ID section length {len} does not match {n} voxels"
                        )));
                    }
                    let mut ids = vec![0u32; n];
                    let mut b4 = [0u8; 4];
                    for id in ids.iter_mut() {
                        r.read_exact(&mut b4)?;
                        *id = u32::from_le_bytes(b4);
                    }
                    out.ids = Some(
                        GrainMap::from_raw(shape, ids)
                            .map_err(|e| VolumeFileError::Malformed(e.to_string()))?,
                    );
                }
                t if t == TAG_BOUNDARIES => {
                    if len != n {
                        return Err(VolumeFileError::Malformed(format!(
                            "boundary section length {len} does not match {n} voxels"
                        )));
                    }
                    let mut bytes = vec![0u8; n];
                    r.read_exact(&mut bytes)?;
                    out.boundaries = Some(
                        BoundaryMask::from_raw(shape, bytes.iter().map(|&b| b != 0).collect())
                            .map_err(|e| VolumeFileError::Malformed(e.to_string()))?,
                    );
                }
                _ => {
                    // unknown section: skip by its declared length
                    io::copy(&mut r.take(len as u64), &mut io::sink())?;
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), VolumeFileError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VolumeFile, VolumeFileError> {
        let mut r = BufReader::new(File::open(path)?);
        VolumeFile::read_from(&mut r)
    }
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
