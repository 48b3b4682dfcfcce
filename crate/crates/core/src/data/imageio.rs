//! 8-bit PNG storage and the JPEG degradation round trip.

use std::io::Cursor;
use std::path::Path;

use image::error::{EncodingError, ImageFormatHint};
use image::{GrayImage, ImageError, ImageFormat, RgbImage};
use jpeg_encoder::{ColorType, Encoder, SamplingFactor};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("to_rgb_image", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_u8(d[p]), to_u8(d[h * w + p]), to_u8(d[2 * h * w + p])])
    }))
}

pub fn from_rgb_image(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized")
}

/// A `[1, H, W]` map in `[0, 1]` as an 8-bit gray image, `round(v * 255)`.
pub fn to_gray_image(t: &Tensor) -> Result<GrayImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape("to_gray_image", format!("expected [1, H, W], got {s:?}")));
    }
    let w = s[2];
    let d = t.data();
    Ok(GrayImage::from_fn(w as u32, s[1] as u32, |x, y| {
        image::Luma([to_u8(d[y as usize * w + x as usize])])
    }))
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(from_rgb_image(&img.to_rgb8()))
}

/// Reads a mask; gray levels `>= 128` are tampered.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, h, w], data)
}

pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    to_rgb_image(t)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

pub fn write_gray(path: &Path, t: &Tensor) -> Result<()> {
    to_gray_image(t)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

/// Baseline JPEG (4:2:0 chroma) encode and decode of a `[3, H, W]` image.
pub fn jpeg_roundtrip(t: &Tensor, quality: u8) -> Result<Tensor> {
    jpeg_roundtrip_u8(&to_rgb_image(t)?, quality).map(|img| from_rgb_image(&img))
}

pub fn jpeg_roundtrip_u8(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let buf = jpeg_encode(img, quality)?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)?;
    Ok(decoded.to_rgb8())
}

fn jpeg_encode(img: &RgbImage, quality: u8) -> Result<Vec<u8>> {
    if !(10..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!(
            "JPEG quality {quality} outside [10, 100]"
        )));
    }
    let codec = |e: jpeg_encoder::EncodingError| {
        ImageError::Encoding(EncodingError::new(ImageFormatHint::Exact(ImageFormat::Jpeg), e))
    };
    let (w, h) = (img.width(), img.height());
    if w > u16::MAX as u32 || h > u16::MAX as u32 {
        return Err(Error::InvalidArgument(format!("JPEG side limit is 65535, got {w}x{h}")));
    }
    let mut buf = Vec::new();
    let mut enc = Encoder::new(&mut buf, quality);
    // Fixed so quality >= 90 does not silently switch to 4:4:4.
    enc.set_sampling_factor(SamplingFactor::R_4_2_0);
    enc.encode(img.as_raw(), w as u16, h as u16, ColorType::Rgb)
        .map_err(codec)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_quality() {
        let t = Tensor::full(&[3, 8, 8], 0.5);
        assert!(jpeg_roundtrip(&t, 9).is_err());
        assert!(jpeg_roundtrip(&t, 101).is_err());
    }

    #[test]
    fn jpeg_is_baseline_with_subsampled_chroma() {
        for q in [10, 75, 95, 100] {
            let buf = jpeg_encode(&RgbImage::new(17, 9), q).unwrap();
            let sof = buf.windows(2).position(|m| m == [0xFF, 0xC0]).expect("baseline SOF0");
            let f = &buf[sof + 2..];
            assert_eq!(f[7], 3, "three components");
            // (id, sampling) for Y, Cb, Cr: luma 2x2, chroma 1x1.
            assert_eq!([f[9], f[12], f[15]], [0x22, 0x11, 0x11], "quality {q}");
        }
    }

    #[test]
    fn gray_quantization_rounds_half_up() {
        let t = Tensor::new(&[1, 1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let g = to_gray_image(&t).unwrap();
        assert_eq!(g.as_raw(), &[0, 128, 255]);
    }

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = Tensor::new(&[3, 1, 2], vec![0.0, 1.0, 51.0 / 255.0, 0.2, 1.0, 0.0]).unwrap();
        write_rgb(&p, &t).unwrap();
        assert!(read_rgb(&p).unwrap().bit_eq(&t));
    }
}
