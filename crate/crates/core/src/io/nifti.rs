//! Minimal NIfTI-1 single-file (`.nii`) reader and writer.

use std::fs;
use std::path::Path;

use super::{Datatype, Scaling, Values, VolumeHeader};
use crate::error::{Error, Result};
use crate::volume::Dims;

pub const NIFTI_HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const NIFTI_VOX_OFFSET: usize = 352;

const MAGIC: &[u8; 4] = b"n+1\0";
const INTENT_VECTOR: i16 = 1007;
const UNITS_MM: u8 = 2;

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes([self.0[at], self.0[at + 1]])
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.0[at..at + 4].try_into().expect("4 bytes"))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.0[at..at + 4].try_into().expect("4 bytes"))
    }
}

fn put_i16(buf: &mut [u8], at: usize, v: i16) {
    buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], at: usize, v: i32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], at: usize, v: f32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

pub(super) fn read(path: &Path) -> Result<(VolumeHeader, (Values, Option<Scaling>))> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected: NIFTI_HEADER_SIZE as u64,
            found: bytes.len() as u64,
        });
    }
    let h = Cursor(&bytes);
    let sizeof_hdr = h.i32(0);
    if sizeof_hdr != NIFTI_HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == NIFTI_HEADER_SIZE as i32 {
            return Err(fmt("big-endian NIfTI files are not supported".into()));
        }
        return Err(fmt(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    if &bytes[344..348] != MAGIC {
        return Err(fmt("bad magic (expected single-file \"n+1\")".into()));
    }

    let dim: Vec<i16> = (0..8).map(|k| h.i16(40 + 2 * k)).collect();
    let rank = dim[0];
    if !(3..=7).contains(&rank) {
        return Err(fmt(format!("dim[0] = {rank}; only 3D volumes are supported")));
    }
    let extent = |k: usize| -> i16 { if (k as i16) <= rank { dim[k] } else { 1 } };
    if (4..=7).any(|k| k != 5 && extent(k) != 1) {
        return Err(fmt(format!("unsupported dims {dim:?}")));
    }
    let channels = extent(5);
    if channels != 1 && channels != 3 {
        return Err(fmt(format!("unsupported channel count {channels}")));
    }
    let size = |k: usize| -> Result<usize> {
        usize::try_from(dim[k])
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| fmt(format!("dim[{k}] = {} is not positive", dim[k])))
    };
    let dims = Dims::new(size(1)?, size(2)?, size(3)?)?;

    let code = h.i16(70);
    let datatype = Datatype::from_nifti_code(code).ok_or_else(|| Error::UnsupportedDatatype {
        path: path.to_path_buf(),
        code,
    })?;
    let vox_offset = h.f32(108);
    if !(vox_offset >= NIFTI_VOX_OFFSET as f32) {
        return Err(fmt(format!("vox_offset {vox_offset} is before the data section")));
    }
    let offset = vox_offset as usize;
    let header = VolumeHeader {
        dims,
        spacing: [1, 2, 3].map(|k| {
            let p = h.f32(76 + 4 * k).abs() as f64;
            if p > 0.0 && p.is_finite() {
                p
            } else {
                1.0
            }
        }),
        datatype,
        channels: channels as usize,
        affine: if h.i16(254) > 0 {
            std::array::from_fn(|k| h.f32(280 + 4 * k) as f64)
        } else {
            super::diagonal_affine([1, 2, 3].map(|k| h.f32(76 + 4 * k) as f64))
        },
    };
    let expected = offset + header.data_bytes();
    if bytes.len() < expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    let slope = h.f32(112) as f64;
    let inter = h.f32(116) as f64;
    let scaling = (slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0))
        .then_some(Scaling { slope, inter });
    let values = Values::from_le_bytes(datatype, &bytes[offset..expected]);
    Ok((header, (values, scaling)))
}

pub(super) fn encode_header(header: &VolumeHeader) -> Vec<u8> {
    let mut b = vec![0u8; NIFTI_VOX_OFFSET];
    put_i32(&mut b, 0, NIFTI_HEADER_SIZE as i32);
    b[38] = b'r';
    let [nx, ny, nz] = header.dims.as_array().map(|n| n as i16);
    let dim: [i16; 8] = if header.channels == 3 {
        [5, nx, ny, nz, 1, 3, 1, 1]
    } else {
        [3, nx, ny, nz, 1, 1, 1, 1]
    };
    for (k, d) in dim.iter().enumerate() {
        put_i16(&mut b, 40 + 2 * k, *d);
    }
    if header.channels == 3 {
        put_i16(&mut b, 68, INTENT_VECTOR);
    }
    put_i16(&mut b, 70, header.datatype.nifti_code());
    put_i16(&mut b, 72, 8 * header.datatype.bytes() as i16);
    let mut pixdim = [1.0f32; 8];
    for a in 0..3 {
        pixdim[a + 1] = header.spacing[a] as f32;
    }
    for (k, p) in pixdim.iter().enumerate() {
        put_f32(&mut b, 76 + 4 * k, *p);
    }
    put_f32(&mut b, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut b, 112, 1.0);
    b[123] = UNITS_MM;
    put_i16(&mut b, 254, 1);
    for (k, v) in header.affine.iter().enumerate() {
        put_f32(&mut b, 280 + 4 * k, *v as f32);
    }
    b[344..348].copy_from_slice(MAGIC);
    b
}

pub(super) fn write(path: &Path, header: &VolumeHeader, data: &[u8]) -> Result<()> {
    if header.dims.as_array().iter().any(|&n| n > i16::MAX as usize) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("dims {} exceed the NIfTI-1 limit", header.dims),
        });
    }
    let mut out = encode_header(header);
    out.extend_from_slice(data);
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
