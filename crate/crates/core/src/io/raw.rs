//! `.rawvol` blob plus `.rawvol.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{diagonal_affine, Datatype, Scaling, Values, VolumeHeader};
use crate::error::{Error, Result};
use crate::volume::Dims;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: Datatype,
    channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    affine: Option<Vec<f64>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(super) fn read(path: &Path) -> Result<(VolumeHeader, (Values, Option<Scaling>))> {
    let meta_path = sidecar_path(path);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: Sidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    let dims = Dims::from_array(meta.dims)?;
    let affine = match meta.affine {
        Some(a) => a.try_into().map_err(|_| Error::Format {
            path: meta_path.clone(),
            msg: "affine must have 12 entries".into(),
        })?,
        None => diagonal_affine(meta.spacing),
    };
    let header = VolumeHeader {
        dims,
        spacing: meta.spacing,
        datatype: meta.dtype,
        channels: meta.channels,
        affine,
    };
    header.validate().map_err(|msg| Error::Format {
        path: meta_path.clone(),
        msg,
    })?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = header.data_bytes();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    let values = Values::from_le_bytes(header.datatype, &bytes);
    Ok((header, (values, None)))
}

pub(super) fn write(path: &Path, header: &VolumeHeader, data: &[u8]) -> Result<()> {
    let meta = Sidecar {
        dims: header.dims.as_array(),
        spacing: header.spacing,
        dtype: header.datatype,
        channels: header.channels,
        affine: Some(header.affine.to_vec()),
    };
    let meta_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    fs::write(path, data).map_err(io_err(path))?;
    fs::write(&meta_path, json).map_err(io_err(&meta_path))
}
