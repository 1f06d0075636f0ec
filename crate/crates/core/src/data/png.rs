//! 8-bit grayscale and RGB PNG ingestion.

use std::io::Cursor;

use png::{BitDepth, ColorType, Decoder, Limits, Transformations};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Decoder allocation cap.
const MAX_BYTES: usize = 64 << 20;

/// Raw 8-bit samples, `channels × height × width` planar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PngPixels {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl PngPixels {
    /// Samples scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Tensor<f32> {
        Tensor::from_parts(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        )
    }
}

pub fn decode_png(bytes: &[u8]) -> Result<PngPixels> {
    let mut dec = Decoder::new_with_limits(Cursor::new(bytes), Limits { bytes: MAX_BYTES });
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::Decode(format!("png: {e}")))?;
    let (color, depth) = reader.output_color_type();
    let channels = match (color, depth) {
        (ColorType::Grayscale, BitDepth::Eight) => 1,
        (ColorType::Rgb, BitDepth::Eight) => 3,
        _ => {
            return Err(Error::Decode(format!(
                "unsupported png format {color:?} at {depth:?} bits (need 8-bit gray or RGB)"
            )))
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("png image too large".into()))?;
    if size > MAX_BYTES {
        return Err(Error::Decode("png image too large".into()));
    }
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Decode(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let mut data = vec![0u8; channels * h * w];
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w * channels];
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = row[x * channels + c];
            }
        }
    }
    Ok(PngPixels {
        channels,
        height: h,
        width: w,
        data,
    })
}

/// Encodes planar 8-bit samples (1 or 3 channels).
pub fn encode_png(px: &PngPixels) -> Result<Vec<u8>> {
    let color = match px.channels {
        1 => ColorType::Grayscale,
        3 => ColorType::Rgb,
        c => return Err(Error::Geometry(format!("cannot write a {c}-channel png"))),
    };
    let (h, w, c) = (px.height, px.width, px.channels);
    let mut interleaved = vec![0u8; px.data.len()];
    for ch in 0..c {
        for i in 0..h * w {
            interleaved[i * c + ch] = px.data[ch * h * w + i];
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Decode(format!("png: {e}")))?;
        writer
            .write_image_data(&interleaved)
            .map_err(|e| Error::Decode(format!("png: {e}")))?;
    }
    Ok(out)
}
