//! Z-slice rendering of instance crops as 8-bit grayscale PNG.

use aop3d_core::instances::{preprocess_crop, InstanceCrop, Preprocessing};
use serde::Deserialize;

use crate::AnnoError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMode {
    #[default]
    Raw,
    /// Raw slice with mask boundary pixels blended halfway to white.
    MaskOverlay,
    /// Intensities attenuated with distance from the mask.
    Distance,
}

impl std::str::FromStr for ViewMode {
    type Err = AnnoError;

    fn from_str(s: &str) -> Result<Self, AnnoError> {
        match s {
            "raw" => Ok(ViewMode::Raw),
            "mask-overlay" => Ok(ViewMode::MaskOverlay),
            "distance" => Ok(ViewMode::Distance),
            other => Err(AnnoError::BadRequest(format!(
                "unknown mode `{other}` (raw|mask-overlay|distance)"
            ))),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Row-major pixels of slice `z`.
pub fn slice_pixels(
    crop: &InstanceCrop,
    z: usize,
    mode: ViewMode,
    sigma: f64,
) -> Result<Vec<u8>, AnnoError> {
    let (depth, h, w) = crop.mask.dim();
    if z >= depth {
        return Err(AnnoError::NotFound(format!(
            "slice {z} outside depth {depth}"
        )));
    }
    match mode {
        ViewMode::Raw => Ok(crop
            .intensity
            .slice(ndarray::s![z, .., ..])
            .iter()
            .map(|&v| quantize(v as f64))
            .collect()),
        ViewMode::Distance => {
            let scaled = preprocess_crop(crop, Preprocessing::Distance, sigma)
                .map_err(|e| AnnoError::BadRequest(e.to_string()))?;
            Ok(scaled
                .slice(ndarray::s![z, .., ..])
                .iter()
                .map(|&v| quantize(v as f64))
                .collect())
        }
        ViewMode::MaskOverlay => {
            let mask = crop.mask.slice(ndarray::s![z, .., ..]);
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let raw = crop.intensity[[z, y, x]] as f64;
                    let boundary = mask[[y, x]]
                        && (y == 0
                            || x == 0
                            || y + 1 == h
                            || x + 1 == w
                            || !mask[[y - 1, x]]
                            || !mask[[y + 1, x]]
                            || !mask[[y, x - 1]]
                            || !mask[[y, x + 1]]);
                    out.push(quantize(if boundary { 0.5 * raw + 0.5 } else { raw }));
                }
            }
            Ok(out)
        }
    }
}

pub fn encode_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>, AnnoError> {
    let mut buf = Vec::new();
    let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| AnnoError::Render(e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(buf)
}

pub fn render_slice(
    crop: &InstanceCrop,
    z: usize,
    mode: ViewMode,
    sigma: f64,
) -> Result<Vec<u8>, AnnoError> {
    let (_, h, w) = crop.mask.dim();
    encode_png(w, h, &slice_pixels(crop, z, mode, sigma)?)
}
