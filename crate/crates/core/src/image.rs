//! Image and mask containers plus PNG output.
//!
//! Images are `[B, 3, H, W]` tensors with clean values in `[-1, 1]`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub type ImageTensor = Tensor<f32>;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }

    /// Errors unless the box is non-empty and lies inside a `w × h` image.
    pub fn check_within(&self, w: usize, h: usize) -> Result<()> {
        if self.area() == 0 || self.x1 > w || self.y1 > h {
            return Err(Error::Parameter(format!(
                "bbox {self:?} is empty or outside a {w}x{h} image"
            )));
        }
        Ok(())
    }
}

/// Per-pixel weight in `[0, 1]`; 1 marks the face region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Structural(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width).clamp(0.0, 1.0))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        Self::new(
            height,
            width,
            bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn count_on(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1.0 - v).collect(),
        }
    }

    /// Tight box around pixels with weight ≥ 0.5, if any.
    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) >= 0.5 {
                    let r = b.get_or_insert(BBox::new(x, y, x + 1, y + 1));
                    r.x0 = r.x0.min(x);
                    r.y0 = r.y0.min(y);
                    r.x1 = r.x1.max(x + 1);
                    r.y1 = r.y1.max(y + 1);
                }
            }
        }
        b
    }

    /// As a `[1, 1, H, W]` tensor that broadcasts over batch and channels.
    pub fn to_tensor<S: Real>(&self) -> Tensor<S> {
        Tensor::from_fn([1, 1, self.height, self.width], |i| S::lit(self.data[i] as f64))
    }
}

/// Map `[-1, 1]` to `0..=255` with round-half-away-from-zero.
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Height and width of a single `[1, 3, H, W]` or `[3, H, W]` image.
pub fn single_image_dims(image: &ImageTensor) -> Result<(usize, usize)> {
    match image.shape() {
        [1, 3, h, w] | [3, h, w] => Ok((*h, *w)),
        s => Err(Error::Structural(format!("expected one RGB image, got shape {s:?}"))),
    }
}

/// Interleaved 8-bit RGB bytes of a single image.
pub fn to_rgb8(image: &ImageTensor) -> Result<Vec<u8>> {
    let (h, w) = single_image_dims(image)?;
    let d = image.data();
    let plane = h * w;
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_u8(d[c * plane + p]));
        }
    }
    Ok(out)
}

fn encode<W: Write>(
    out: W,
    w: usize,
    h: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let mut enc = png::Encoder::new(out, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header()?;
    writer.write_image_data(bytes)?;
    writer.finish()?;
    Ok(())
}

pub fn encode_png_rgb(image: &ImageTensor) -> Result<Vec<u8>> {
    let (h, w) = single_image_dims(image)?;
    let mut buf = Vec::new();
    encode(&mut buf, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &to_rgb8(image)?)?;
    Ok(buf)
}

/// 1-bit grayscale PNG; pixels with weight ≥ 0.5 are white.
pub fn encode_png_mask(mask: &RegionMask) -> Result<Vec<u8>> {
    let (h, w) = (mask.height(), mask.width());
    let row_bytes = w.div_ceil(8);
    let mut bits = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) >= 0.5 {
                bits[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut buf = Vec::new();
    encode(&mut buf, w, h, png::ColorType::Grayscale, png::BitDepth::One, &bits)?;
    Ok(buf)
}

/// 8-bit grayscale PNG of values in `[0, 1]`.
pub fn encode_png_gray(height: usize, width: usize, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::Structural(format!(
            "gray image {height}x{width} with {} values",
            values.len()
        )));
    }
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut buf = Vec::new();
    encode(&mut buf, width, height, png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)?;
    Ok(buf)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_mapping_endpoints_and_rounding() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        // 127.5 rounds away from zero.
        assert_eq!(to_u8(0.0), 128);
        assert_eq!(to_u8(5.0), 255);
    }

    #[test]
    fn mask_validation() {
        assert!(RegionMask::new(2, 2, vec![0.0, 1.0, 0.5, 1.2]).is_err());
        assert!(RegionMask::new(2, 2, vec![0.0; 3]).is_err());
        let m = RegionMask::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(m.is_binary());
        assert_eq!(m.complement().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.bbox(), Some(BBox::new(0, 0, 2, 2)));
        assert_eq!(RegionMask::zeros(3, 3).bbox(), None);
    }

    #[test]
    fn png_round_trip_decodes() {
        let img = Tensor::from_fn([1, 3, 4, 5], |i| (i as f32 / 30.0) - 1.0);
        let bytes = encode_png_rgb(&img).unwrap();
        let dec = png::Decoder::new(&bytes[..]);
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (5, 4));
        assert_eq!(&buf[..info.buffer_size()], &to_rgb8(&img).unwrap()[..]);

        let m = RegionMask::from_fn(3, 10, |y, x| ((x + y) % 2) as f32);
        let bytes = encode_png_mask(&m).unwrap();
        let mut reader = png::Decoder::new(&bytes[..]).read_info().unwrap();
        assert_eq!(reader.info().bit_depth, png::BitDepth::One);
        let mut buf = vec![0; reader.output_buffer_size()];
        reader.next_frame(&mut buf).unwrap();
        assert_eq!(buf[0], 0b0101_0101);
    }
}
