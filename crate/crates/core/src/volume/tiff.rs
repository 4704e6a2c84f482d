//! Baseline TIFF 6.0 grayscale reader: uncompressed, strip-organized, 8 or
//! 16 bits per sample, either byte order. Every page becomes one z-slice.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use super::{Dtype, IntensityVolume, UNIT_SPACING};
use crate::error::{Error, Result};

const IMAGE_WIDTH: u16 = 256;
const IMAGE_LENGTH: u16 = 257;
const BITS_PER_SAMPLE: u16 = 258;
const COMPRESSION: u16 = 259;
const PHOTOMETRIC: u16 = 262;
const STRIP_OFFSETS: u16 = 273;
const SAMPLES_PER_PIXEL: u16 = 277;
const STRIP_BYTE_COUNTS: u16 = 279;
const PLANAR_CONFIG: u16 = 284;
const TILE_WIDTH: u16 = 322;
const TILE_OFFSETS: u16 = 324;
const SAMPLE_FORMAT: u16 = 339;

#[derive(Clone, Copy)]
enum ByteOrder {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    order: ByteOrder,
}

impl Reader<'_> {
    fn slice(&self, offset: usize, len: usize) -> Result<&[u8]> {
        offset
            .checked_add(len)
            .and_then(|end| self.bytes.get(offset..end))
            .ok_or(Error::Truncated {
                expected: offset.saturating_add(len),
                found: self.bytes.len(),
            })
    }

    fn u16(&self, offset: usize) -> Result<u16> {
        let b: [u8; 2] = self.slice(offset, 2)?.try_into().unwrap();
        Ok(match self.order {
            ByteOrder::Little => u16::from_le_bytes(b),
            ByteOrder::Big => u16::from_be_bytes(b),
        })
    }

    fn u32(&self, offset: usize) -> Result<u32> {
        let b: [u8; 4] = self.slice(offset, 4)?.try_into().unwrap();
        Ok(match self.order {
            ByteOrder::Little => u32::from_le_bytes(b),
            ByteOrder::Big => u32::from_be_bytes(b),
        })
    }
}

struct Entry {
    tag: u16,
    values: Vec<u32>,
}

/// Reads the values of one IFD entry. Only BYTE, SHORT and LONG are needed
/// by the baseline grayscale subset; other types are kept as empty.
fn read_entry(r: &Reader, at: usize) -> Result<Entry> {
    let tag = r.u16(at)?;
    let field_type = r.u16(at + 2)?;
    let count = r.u32(at + 4)? as usize;
    let size = match field_type {
        1 | 2 | 6 | 7 => 1,
        3 | 8 => 2,
        4 | 9 | 11 => 4,
        5 | 10 | 12 => 8,
        _ => 0,
    };
    let total = size * count;
    let base = if total <= 4 {
        at + 8
    } else {
        r.u32(at + 8)? as usize
    };
    let values = match field_type {
        1 => r.slice(base, count)?.iter().map(|&b| b as u32).collect(),
        3 => (0..count)
            .map(|i| r.u16(base + 2 * i).map(u32::from))
            .collect::<Result<_>>()?,
        4 => (0..count)
            .map(|i| r.u32(base + 4 * i))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    Ok(Entry { tag, values })
}

struct Page {
    width: usize,
    height: usize,
    bits: u32,
    white_is_zero: bool,
    pixels: Vec<f32>,
}

fn single(entries: &[Entry], tag: u16) -> Option<u32> {
    entries
        .iter()
        .find(|e| e.tag == tag)
        .and_then(|e| e.values.first().copied())
}

fn list(entries: &[Entry], tag: u16) -> Option<&[u32]> {
    entries
        .iter()
        .find(|e| e.tag == tag)
        .map(|e| e.values.as_slice())
}

fn read_page(r: &Reader, entries: &[Entry]) -> Result<Page> {
    if entries
        .iter()
        .any(|e| (TILE_WIDTH..=TILE_OFFSETS + 1).contains(&e.tag))
    {
        return Err(Error::Unsupported("tiled TIFF layout".into()));
    }
    let compression = single(entries, COMPRESSION).unwrap_or(1);
    if compression != 1 {
        return Err(Error::Unsupported(format!(
            "TIFF compression {compression}"
        )));
    }
    let samples = single(entries, SAMPLES_PER_PIXEL).unwrap_or(1);
    if samples != 1 {
        return Err(Error::Unsupported(format!("{samples} samples per pixel")));
    }
    if single(entries, PLANAR_CONFIG).unwrap_or(1) != 1 {
        return Err(Error::Unsupported("planar configuration 2".into()));
    }
    if single(entries, SAMPLE_FORMAT).unwrap_or(1) != 1 {
        return Err(Error::Unsupported("non-integer sample format".into()));
    }
    let bits = single(entries, BITS_PER_SAMPLE).unwrap_or(1);
    if bits != 8 && bits != 16 {
        return Err(Error::Unsupported(format!("{bits} bits per sample")));
    }
    let white_is_zero = match single(entries, PHOTOMETRIC).unwrap_or(1) {
        0 => true,
        1 => false,
        p => {
            return Err(Error::Unsupported(format!(
                "photometric interpretation {p}"
            )))
        }
    };
    let width = single(entries, IMAGE_WIDTH)
        .ok_or_else(|| Error::Format("missing ImageWidth".into()))? as usize;
    let height = single(entries, IMAGE_LENGTH)
        .ok_or_else(|| Error::Format("missing ImageLength".into()))? as usize;
    let offsets =
        list(entries, STRIP_OFFSETS).ok_or_else(|| Error::Format("missing StripOffsets".into()))?;
    let counts = list(entries, STRIP_BYTE_COUNTS)
        .ok_or_else(|| Error::Format("missing StripByteCounts".into()))?;
    if offsets.len() != counts.len() {
        return Err(Error::Format("strip offset/count length mismatch".into()));
    }

    let bytes_per_sample = (bits / 8) as usize;
    let needed = width * height * bytes_per_sample;
    let mut raw = Vec::with_capacity(needed);
    for (&off, &cnt) in offsets.iter().zip(counts) {
        raw.extend_from_slice(r.slice(off as usize, cnt as usize)?);
    }
    if raw.len() < needed {
        return Err(Error::Truncated {
            expected: needed,
            found: raw.len(),
        });
    }
    raw.truncate(needed);

    let mut pixels: Vec<f32> = if bits == 8 {
        raw.iter().map(|&b| b as f32 / u8::MAX as f32).collect()
    } else {
        raw.chunks_exact(2)
            .map(|c| {
                let v = match r.order {
                    ByteOrder::Little => u16::from_le_bytes([c[0], c[1]]),
                    ByteOrder::Big => u16::from_be_bytes([c[0], c[1]]),
                };
                (v as f64 / u16::MAX as f64) as f32
            })
            .collect()
    };
    if white_is_zero {
        for p in &mut pixels {
            *p = 1.0 - *p;
        }
    }
    Ok(Page {
        width,
        height,
        bits,
        white_is_zero,
        pixels,
    })
}

/// Decodes an in-memory TIFF file.
pub fn decode_tiff(bytes: &[u8]) -> Result<IntensityVolume> {
    let order = match bytes.get(..2) {
        Some(b"II") => ByteOrder::Little,
        Some(b"MM") => ByteOrder::Big,
        _ => return Err(Error::Format("not a TIFF file".into())),
    };
    let r = Reader { bytes, order };
    match r.u16(2)? {
        42 => {}
        43 => return Err(Error::Unsupported("BigTIFF".into())),
        v => return Err(Error::Format(format!("bad TIFF version {v}"))),
    }

    let mut pages = Vec::new();
    let mut ifd = r.u32(4)? as usize;
    let mut visited = std::collections::HashSet::new();
    while ifd != 0 {
        if !visited.insert(ifd) {
            return Err(Error::Format("cyclic IFD chain".into()));
        }
        let n = r.u16(ifd)? as usize;
        let entries = (0..n)
            .map(|i| read_entry(&r, ifd + 2 + 12 * i))
            .collect::<Result<Vec<_>>>()?;
        pages.push(read_page(&r, &entries)?);
        ifd = r.u32(ifd + 2 + 12 * n)? as usize;
    }

    let first = pages
        .first()
        .ok_or_else(|| Error::Format("TIFF has no pages".into()))?;
    let (w, h, bits) = (first.width, first.height, first.bits);
    if w == 0 || h == 0 {
        return Err(Error::Format("empty TIFF page".into()));
    }
    if let Some((i, p)) = pages
        .iter()
        .enumerate()
        .find(|(_, p)| p.width != w || p.height != h)
    {
        return Err(Error::Format(format!(
            "page {i} is {}x{}, expected {w}x{h}",
            p.width, p.height
        )));
    }
    let depth = pages.len();
    let mut data = Vec::with_capacity(depth * w * h);
    let mut mixed_bits = false;
    for p in pages {
        mixed_bits |= p.bits != bits || p.white_is_zero;
        data.extend(p.pixels);
    }
    let data = Array3::from_shape_vec((depth, h, w), data).expect("page sizes checked");
    let storage = match (mixed_bits, bits) {
        (false, 8) => Dtype::U8,
        (false, _) => Dtype::U16,
        _ => Dtype::F32,
    };
    Ok(IntensityVolume::new(data, UNIT_SPACING)?.with_storage(storage))
}

pub fn import_tiff(path: impl AsRef<Path>) -> Result<IntensityVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tiff(&bytes)
}
