//! Reader/writer for a bit-exact subset of the NIfTI-1 single-file format.
//!
//! Supported: magic "n+1\0", datatype codes {2: uint8, 4: int16, 16:
//! float32, 512: uint16}, 2-D or 3-D extents, automatic endianness
//! detection via `sizeof_hdr`, and `scl_slope`/`scl_inter` intensity
//! scaling. Everything else (detached headers, other datatypes,
//! orientation fields, compressed streams) is rejected or ignored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 348;
pub const VOX_OFFSET: usize = 352;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    /// Byte order of the source buffer differed from little-endian.
    pub swapped: bool,
}

impl NiftiHeader {
    pub fn extents(&self) -> [usize; 3] {
        let z = if self.dim[0] >= 3 { self.dim[3] as usize } else { 1 };
        [self.dim[1] as usize, self.dim[2] as usize, z]
    }

    pub fn voxel_count(&self) -> usize {
        let [x, y, z] = self.extents();
        x * y * z
    }
}

/// A dense volume in x-fastest order, already converted to float32 with
/// any source scaling applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        let n = extents.iter().product::<usize>();
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Dim(format!("volume extents must be positive, got {extents:?}")));
        }
        if voxels.len() != n {
            return Err(Error::Dim(format!("extents {extents:?} imply {n} voxels, got {}", voxels.len())));
        }
        Ok(Volume { extents, voxels })
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        let [ex, ey, _] = self.extents;
        self.voxels[x + ex * (y + ey * z)]
    }
}

fn bitpix_for(datatype: i16) -> Option<i16> {
    match datatype {
        2 => Some(8),
        4 => Some(16),
        16 => Some(32),
        512 => Some(16),
        _ => None,
    }
}

fn read_i32(buf: &[u8], off: usize, swap: bool) -> i32 {
    let b: [u8; 4] = buf[off..off + 4].try_into().unwrap();
    if swap { i32::from_be_bytes(b) } else { i32::from_le_bytes(b) }
}

fn read_i16(buf: &[u8], off: usize, swap: bool) -> i16 {
    let b: [u8; 2] = buf[off..off + 2].try_into().unwrap();
    if swap { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
}

fn read_f32(buf: &[u8], off: usize, swap: bool) -> f32 {
    let b: [u8; 4] = buf[off..off + 4].try_into().unwrap();
    if swap { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
}

/// Parse a NIfTI-1 header from the first 348 bytes of `buf`. Endianness is
/// detected from `sizeof_hdr`: 348 read one way or the other.
pub fn parse_header(buf: &[u8]) -> Result<NiftiHeader> {
    if buf.len() < HEADER_LEN {
        return Err(Error::CorruptHeader(format!(
            "buffer holds {} bytes, header needs {HEADER_LEN}",
            buf.len()
        )));
    }
    let swap = match read_i32(buf, 0, false) {
        348 => false,
        _ if read_i32(buf, 0, true) == 348 => true,
        other => {
            return Err(Error::CorruptHeader(format!(
                "sizeof_hdr is {other} in either byte order, expected 348"
            )))
        }
    };
    let magic = &buf[344..348];
    if magic != b"n+1\0" {
        return Err(Error::UnsupportedFormat(format!(
            "magic {:?} (only single-file \"n+1\" images are supported)",
            String::from_utf8_lossy(&magic[..3])
        )));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = read_i16(buf, 40 + 2 * i, swap);
    }
    if !(2..=3).contains(&dim[0]) {
        return Err(Error::UnsupportedFormat(format!(
            "dim[0] = {} (only 2-D and 3-D volumes are supported)",
            dim[0]
        )));
    }
    let used = 1 + dim[0] as usize;
    if dim[1..used].iter().any(|&e| e < 1) {
        return Err(Error::CorruptHeader(format!("non-positive extent in dim {dim:?}")));
    }
    let datatype = read_i16(buf, 70, swap);
    let expected_bitpix =
        bitpix_for(datatype).ok_or(Error::UnsupportedDatatype(datatype))?;
    let bitpix = read_i16(buf, 72, swap);
    if bitpix != expected_bitpix {
        return Err(Error::CorruptHeader(format!(
            "bitpix {bitpix} inconsistent with datatype {datatype} (expected {expected_bitpix})"
        )));
    }
    let vox_offset = read_f32(buf, 108, swap);
    if vox_offset < VOX_OFFSET as f32 {
        return Err(Error::CorruptHeader(format!("vox_offset {vox_offset} < {VOX_OFFSET}")));
    }
    Ok(NiftiHeader {
        dim,
        datatype,
        bitpix,
        vox_offset,
        scl_slope: read_f32(buf, 112, swap),
        scl_inter: read_f32(buf, 116, swap),
        swapped: swap,
    })
}

/// Decode the payload of a parsed header into float32 voxels.
pub fn decode_volume(header: &NiftiHeader, bytes: &[u8], path: &str) -> Result<Volume> {
    let count = header.voxel_count();
    let bpv = header.bitpix as usize / 8;
    let offset = header.vox_offset as usize;
    let need = offset + count * bpv;
    if bytes.len() < need {
        return Err(Error::CorruptFile {
            path: path.to_string(),
            detail: format!("expected at least {need} bytes ({count} voxels), got {}", bytes.len()),
        });
    }
    let payload = &bytes[offset..offset + count * bpv];
    let swap = header.swapped;
    let mut voxels = Vec::with_capacity(count);
    match header.datatype {
        2 => voxels.extend(payload.iter().map(|&b| b as f32)),
        4 => {
            for ch in payload.chunks_exact(2) {
                let b: [u8; 2] = ch.try_into().unwrap();
                let v = if swap { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) };
                voxels.push(v as f32);
            }
        }
        512 => {
            for ch in payload.chunks_exact(2) {
                let b: [u8; 2] = ch.try_into().unwrap();
                let v = if swap { u16::from_be_bytes(b) } else { u16::from_le_bytes(b) };
                voxels.push(v as f32);
            }
        }
        16 => {
            for ch in payload.chunks_exact(4) {
                let b: [u8; 4] = ch.try_into().unwrap();
                voxels.push(if swap { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) });
            }
        }
        other => return Err(Error::UnsupportedDatatype(other)),
    }
    if header.scl_slope != 0.0 && (header.scl_slope != 1.0 || header.scl_inter != 0.0) {
        for v in &mut voxels {
            *v = *v * header.scl_slope + header.scl_inter;
        }
    }
    Volume::new(header.extents(), voxels)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header = parse_header(&bytes)?;
    decode_volume(&header, &bytes, &path.display().to_string())
}

/// Serialize a volume as little-endian NIfTI-1: datatype 16 (float32),
/// vox_offset 352, slope 1, inter 0.
pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let mut buf = vec![0u8; VOX_OFFSET + volume.voxels.len() * 4];
    buf[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim: [i16; 8] = [
        3,
        volume.extents[0] as i16,
        volume.extents[1] as i16,
        volume.extents[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dim.iter().enumerate() {
        buf[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    buf[70..72].copy_from_slice(&16i16.to_le_bytes());
    buf[72..74].copy_from_slice(&32i16.to_le_bytes());
    // pixdim: unit spacing
    for i in 0..4 {
        buf[76 + 4 * i..80 + 4 * i].copy_from_slice(&1.0f32.to_le_bytes());
    }
    buf[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    buf[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    buf[116..120].copy_from_slice(&0.0f32.to_le_bytes());
    buf[344..348].copy_from_slice(b"n+1\0");
    for (i, &v) in volume.voxels.iter().enumerate() {
        buf[VOX_OFFSET + 4 * i..VOX_OFFSET + 4 * i + 4].copy_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if volume.extents.iter().any(|&e| e == 0) || volume.extents.iter().any(|&e| e > i16::MAX as usize) {
        return Err(Error::Dim(format!("extents {:?} not writable as NIfTI-1", volume.extents)));
    }
    fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path.display().to_string(), e))
}
