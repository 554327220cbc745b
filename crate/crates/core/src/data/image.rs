use std::io::Cursor;

use super::DataError;
use crate::engine::Tensor;

/// RGB image with channel-interleaved pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(DataError::Image(format!(
                "{} values cannot form a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub(crate) fn from_parts(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), height * width * 3);
        Self { height, width, pixels }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Planar `[3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut data = vec![0.0f32; plane * 3];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c];
            }
        }
        Tensor::from_parts(vec![3, self.height, self.width], data)
    }

    /// 8-bit quantized pixel values.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self, DataError> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

/// Decodes an 8-bit RGB or RGBA PNG (alpha dropped).
pub fn decode_image(bytes: &[u8]) -> Result<Image, DataError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| DataError::Format(e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(DataError::Format(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(DataError::Format(format!("expected 3-channel RGB(A), got {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| DataError::Format("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| DataError::Format(e.to_string()))?;
    let buf = &buf[..frame.buffer_size()];
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(frame.line_size).take(h) {
        for px in row[..w * stride].chunks(stride) {
            rgb.extend_from_slice(&px[..3]);
        }
    }
    Image::from_bytes(h, w, &rgb)
}

/// Encodes as 8-bit RGB PNG with fixed settings, so equal images give equal bytes.
pub fn encode_image(img: &Image) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| DataError::Format(e.to_string()))?;
        writer
            .write_image_data(&img.to_bytes())
            .map_err(|e| DataError::Format(e.to_string()))?;
        writer.finish().map_err(|e| DataError::Format(e.to_string()))?;
    }
    Ok(out)
}
