//! The `.i3d` container: 8-byte magic, little-endian u32 header length, a
//! UTF-8 JSON header and a raw little-endian C-order payload.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Dtype, IntensityVolume, LabelVolume, Shape, Spacing, Volume};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"I3DVOL\x00\x01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Intensity,
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dtype: Dtype,
    pub shape: Shape,
    pub spacing: Spacing,
    pub kind: Kind,
}

impl VolumeHeader {
    pub fn voxel_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn payload_len(&self) -> usize {
        self.voxel_count() * self.dtype.size()
    }
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let (header, payload) = match volume {
        Volume::Label(v) => {
            let dtype = Dtype::for_max_label(v.max_id());
            let header = VolumeHeader {
                dtype,
                shape: v.shape(),
                spacing: v.spacing(),
                kind: Kind::Label,
            };
            let mut payload = Vec::with_capacity(header.payload_len());
            for &id in v.data().iter() {
                match dtype {
                    Dtype::U8 => payload.push(id as u8),
                    Dtype::U16 => payload.extend_from_slice(&(id as u16).to_le_bytes()),
                    _ => payload.extend_from_slice(&id.to_le_bytes()),
                }
            }
            (header, payload)
        }
        Volume::Intensity(v) => {
            let dtype = v.storage();
            let header = VolumeHeader {
                dtype,
                shape: v.shape(),
                spacing: v.spacing(),
                kind: Kind::Intensity,
            };
            let mut payload = Vec::with_capacity(header.payload_len());
            for &x in v.data().iter() {
                match dtype {
                    Dtype::U8 => payload.push((x as f64 * u8::MAX as f64).round() as u8),
                    Dtype::U16 => payload.extend_from_slice(
                        &((x as f64 * u16::MAX as f64).round() as u16).to_le_bytes(),
                    ),
                    Dtype::U32 => payload.extend_from_slice(
                        &((x as f64 * u32::MAX as f64).round() as u32).to_le_bytes(),
                    ),
                    Dtype::F32 => payload.extend_from_slice(&x.to_le_bytes()),
                }
            }
            (header, payload)
        }
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 12 || bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic, not an .i3d volume".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or(Error::Truncated {
            expected: 12 + header_len,
            found: bytes.len(),
        })?;
    let header: VolumeHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    let payload = &bytes[header_end..];
    let expected = header.payload_len();
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "payload has {} trailing bytes",
            payload.len() - expected
        )));
    }
    let dim = (header.shape[0], header.shape[1], header.shape[2]);
    match header.kind {
        Kind::Label => {
            let ids: Vec<u32> = match header.dtype {
                Dtype::U8 => payload.iter().map(|&b| b as u32).collect(),
                Dtype::U16 => payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                    .collect(),
                Dtype::U32 => payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
                Dtype::F32 => return Err(Error::Format("label volume with f32 payload".into())),
            };
            let data =
                Array3::from_shape_vec(dim, ids).map_err(|e| Error::Format(e.to_string()))?;
            Ok(Volume::Label(LabelVolume::new(data, header.spacing)?))
        }
        Kind::Intensity => {
            let values: Vec<f32> = match header.dtype {
                Dtype::U8 => payload.iter().map(|&b| b as f32 / u8::MAX as f32).collect(),
                Dtype::U16 => payload
                    .chunks_exact(2)
                    .map(|c| (u16::from_le_bytes([c[0], c[1]]) as f64 / u16::MAX as f64) as f32)
                    .collect(),
                Dtype::U32 => payload
                    .chunks_exact(4)
                    .map(|c| {
                        (u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64 / u32::MAX as f64)
                            as f32
                    })
                    .collect(),
                Dtype::F32 => payload
                    .chunks_exact(4)
                    .map(|c| {
                        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                        if v.is_nan() {
                            0.0
                        } else {
                            v.clamp(0.0, 1.0)
                        }
                    })
                    .collect(),
            };
            let data =
                Array3::from_shape_vec(dim, values).map_err(|e| Error::Format(e.to_string()))?;
            Ok(Volume::Intensity(
                IntensityVolume::new(data, header.spacing)?.with_storage(header.dtype),
            ))
        }
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path, e))
}
