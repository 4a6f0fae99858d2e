//! Volume, label and vector-field files.
//!
//! Two containers are supported, selected by file extension:
//!
//! * `.nii`: uncompressed little-endian NIfTI-1 single file.
//! * `.rawvol`: a raw little-endian blob next to a `.rawvol.json` sidecar
//!   holding `dims`, `spacing`, `dtype` and `channels`.
//!
//! Vector fields are stored channel-planar (all x components, then y, then
//! z), which is the NIfTI layout for `dim[5] = 3`.

mod nifti;
mod raw;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::real::Real;
use crate::volume::{Dims, VectorField, Volume};

pub use nifti::{NIFTI_HEADER_SIZE, NIFTI_VOX_OFFSET};
pub use raw::sidecar_path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn nifti_code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    pub fn from_nifti_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::Uint8),
            4 => Some(Datatype::Int16),
            16 => Some(Datatype::Float32),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Datatype::Float32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub datatype: Datatype,
    /// 1 for scalar volumes, 3 for vector fields.
    pub channels: usize,
    /// Rows of the voxel-to-world matrix; copied through, never applied.
    pub affine: [f64; 12],
}

impl VolumeHeader {
    pub fn scalar(dims: Dims, datatype: Datatype) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            datatype,
            channels: 1,
            affine: diagonal_affine([1.0; 3]),
        }
    }

    pub fn vector(dims: Dims) -> Self {
        Self {
            channels: 3,
            ..Self::scalar(dims, Datatype::Float32)
        }
    }

    /// Header for writing `payload`: float32 for images and fields, the
    /// smallest integer type for labels.
    pub fn for_payload<T: Real>(payload: &Payload<T>) -> Self {
        match payload {
            Payload::Scalar(v) => {
                let mut h = Self::scalar(v.dims(), Datatype::Float32);
                h.set_spacing(v.spacing().map(|s| s.to_f64_lossy()));
                h
            }
            Payload::Labels(l) => {
                let max = l.data().iter().copied().max().unwrap_or(0);
                let dt = if max <= u8::MAX as u16 { Datatype::Uint8 } else { Datatype::Int16 };
                Self::scalar(l.dims(), dt)
            }
            Payload::Field(f) => {
                let mut h = Self::vector(f.dims());
                h.set_spacing(f.component(0).spacing().map(|s| s.to_f64_lossy()));
                h
            }
        }
    }

    pub fn set_spacing(&mut self, spacing: [f64; 3]) {
        self.spacing = spacing;
        self.affine = diagonal_affine(spacing);
    }

    /// Voxel payload size in bytes.
    pub fn data_bytes(&self) -> usize {
        self.dims.len() * self.channels * self.datatype.bytes()
    }

    fn validate(&self) -> Result<(), String> {
        if self.channels != 1 && self.channels != 3 {
            return Err(format!("channel count must be 1 or 3, got {}", self.channels));
        }
        if self.channels == 3 && self.datatype != Datatype::Float32 {
            return Err("vector fields must be float32".into());
        }
        Ok(())
    }
}

pub fn diagonal_affine(spacing: [f64; 3]) -> [f64; 12] {
    let mut a = [0.0; 12];
    a[0] = spacing[0];
    a[5] = spacing[1];
    a[10] = spacing[2];
    a
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload<T> {
    Scalar(Volume<T>),
    Labels(LabelVolume),
    Field(VectorField<T>),
}

impl<T: Real> Payload<T> {
    pub fn dims(&self) -> Dims {
        match self {
            Payload::Scalar(v) => v.dims(),
            Payload::Labels(l) => l.dims(),
            Payload::Field(f) => f.dims(),
        }
    }

    pub fn into_scalar(self) -> Option<Volume<T>> {
        match self {
            Payload::Scalar(v) => Some(v),
            _ => None,
        }
    }

    pub fn into_labels(self) -> Option<LabelVolume> {
        match self {
            Payload::Labels(l) => Some(l),
            _ => None,
        }
    }

    pub fn into_field(self) -> Option<VectorField<T>> {
        match self {
            Payload::Field(f) => Some(f),
            _ => None,
        }
    }
}

/// How single-channel data should be returned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReadAs {
    /// Scalar volume (or vector field for 3-channel files).
    #[default]
    Auto,
    /// Integer label map.
    Labels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Container {
    Nifti,
    Raw,
}

fn container(path: &Path) -> Result<Container> {
    let name = path.to_string_lossy();
    if name.ends_with(".nii") {
        Ok(Container::Nifti)
    } else if name.ends_with(".rawvol") {
        Ok(Container::Raw)
    } else {
        Err(Error::Format {
            path: path.to_path_buf(),
            msg: "unknown extension (expected .nii or .rawvol)".into(),
        })
    }
}

pub fn read_volume<T: Real>(path: impl AsRef<Path>, mode: ReadAs) -> Result<(VolumeHeader, Payload<T>)> {
    let path = path.as_ref();
    let (header, values) = match container(path)? {
        Container::Nifti => nifti::read(path)?,
        Container::Raw => raw::read(path)?,
    };
    let payload = decode(path, &header, values, mode)?;
    Ok((header, payload))
}

pub fn write_volume<T: Real>(path: impl AsRef<Path>, header: &VolumeHeader, payload: &Payload<T>) -> Result<()> {
    let path = path.as_ref();
    let fmt_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    header.validate().map_err(fmt_err)?;
    let kind = container(path)?;
    if header.dims != payload.dims() {
        return Err(fmt_err(format!(
            "header dims {} disagree with payload dims {}",
            header.dims,
            payload.dims()
        )));
    }
    let channels = if matches!(payload, Payload::Field(_)) { 3 } else { 1 };
    if header.channels != channels {
        return Err(fmt_err(format!(
            "header declares {} channel(s), payload has {channels}",
            header.channels
        )));
    }
    let bytes = encode(header, payload).map_err(fmt_err)?;
    match kind {
        Container::Nifti => nifti::write(path, header, &bytes),
        Container::Raw => raw::write(path, header, &bytes),
    }
}

/// Raw voxel values as read from disk, before conversion.
pub(crate) enum Values {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl Values {
    fn len(&self) -> usize {
        match self {
            Values::U8(v) => v.len(),
            Values::I16(v) => v.len(),
            Values::F32(v) => v.len(),
        }
    }

    fn as_f64(&self) -> Vec<f64> {
        match self {
            Values::U8(v) => v.iter().map(|&x| x as f64).collect(),
            Values::I16(v) => v.iter().map(|&x| x as f64).collect(),
            Values::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub(crate) fn from_le_bytes(dt: Datatype, bytes: &[u8]) -> Self {
        match dt {
            Datatype::Uint8 => Values::U8(bytes.to_vec()),
            Datatype::Int16 => Values::I16(
                bytes
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            Datatype::Float32 => Values::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        }
    }
}

/// Intensity scaling read from a NIfTI header, applied to scalar images.
pub(crate) struct Scaling {
    pub slope: f64,
    pub inter: f64,
}

fn decode<T: Real>(
    path: &Path,
    header: &VolumeHeader,
    (values, scaling): (Values, Option<Scaling>),
    mode: ReadAs,
) -> Result<Payload<T>> {
    let err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let n = header.dims.len();
    debug_assert_eq!(values.len(), n * header.channels);
    let spacing = header.spacing.map(T::lit);
    if header.channels == 3 {
        let all = values.as_f64();
        let comps: Vec<Volume<T>> = all
            .chunks_exact(n)
            .map(|c| {
                Volume::from_vec(header.dims, c.iter().map(|&v| T::lit(v)).collect())
                    .map(|v| v.with_spacing(spacing))
            })
            .collect::<Result<_>>()?;
        let [a, b, c]: [Volume<T>; 3] = comps.try_into().map_err(|_| err("bad channel layout".into()))?;
        return Ok(Payload::Field(VectorField::from_components([a, b, c])?));
    }
    match mode {
        ReadAs::Labels => {
            let labels: Vec<u16> = match values {
                Values::U8(v) => v.into_iter().map(u16::from).collect(),
                Values::I16(v) => v
                    .into_iter()
                    .map(|x| u16::try_from(x).map_err(|_| err(format!("negative label {x}"))))
                    .collect::<Result<_>>()?,
                Values::F32(v) => v
                    .into_iter()
                    .map(|x| {
                        if x.fract() == 0.0 && (0.0..=u16::MAX as f32).contains(&x) {
                            Ok(x as u16)
                        } else {
                            Err(err(format!("value {x} is not a valid label")))
                        }
                    })
                    .collect::<Result<_>>()?,
            };
            Ok(Payload::Labels(LabelVolume::from_vec(header.dims, labels)?))
        }
        ReadAs::Auto => {
            let mut data = values.as_f64();
            if let Some(s) = scaling {
                for v in &mut data {
                    *v = *v * s.slope + s.inter;
                }
            }
            let vol = Volume::from_vec(header.dims, data.into_iter().map(T::lit).collect())?;
            Ok(Payload::Scalar(vol.with_spacing(spacing)))
        }
    }
}

fn encode<T: Real>(header: &VolumeHeader, payload: &Payload<T>) -> Result<Vec<u8>, String> {
    let dt = header.datatype;
    let mut out = Vec::with_capacity(header.data_bytes());
    let mut push = |v: f64| -> Result<(), String> {
        match dt {
            Datatype::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Datatype::Uint8 => {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(format!("value {v} does not fit uint8"));
                }
                out.push(v as u8);
            }
            Datatype::Int16 => {
                if v.fract() != 0.0 || !(i16::MIN as f64..=i16::MAX as f64).contains(&v) {
                    return Err(format!("value {v} does not fit int16"));
                }
                out.extend_from_slice(&(v as i16).to_le_bytes());
            }
        }
        Ok(())
    };
    match payload {
        Payload::Scalar(v) => {
            for &x in v.data() {
                push(x.to_f64_lossy())?;
            }
        }
        Payload::Labels(l) => {
            if !dt.is_integer() && l.data().iter().any(|&x| x as f64 > f32::MAX as f64) {
                return Err("label out of range".into());
            }
            for &x in l.data() {
                push(x as f64)?;
            }
        }
        Payload::Field(f) => {
            for c in f.components() {
                for &x in c.data() {
                    push(x.to_f64_lossy())?;
                }
            }
        }
    }
    Ok(out)
}
