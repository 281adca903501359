use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmSubtype, SampleEncoding};
use image::ImageDecoder;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

/// Per-channel means in B, G, R order.
pub const BGR_MEANS: [f32; 3] = [104.0, 117.0, 123.0];
pub const INPUT_HW: usize = 300;

/// Interleaved 8-bit RGB pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Decodes a binary (P6) PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format("only binary P6 PPM images are supported".into()));
    }
    let decoder = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| Error::Format(format!("bad PPM header: {e}")))?;
    let header = decoder.header();
    if header.subtype() != PnmSubtype::Pixmap(SampleEncoding::Binary) {
        return Err(Error::Format("only binary P6 PPM images are supported".into()));
    }
    if header.maximal_sample() != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {}", header.maximal_sample())));
    }
    let (width, height) = (header.width() as usize, header.height() as usize);
    let mut pixels = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut pixels).map_err(|e| Error::Format(format!("bad PPM pixel data: {e}")))?;
    Ok(RgbImage { width, height, pixels })
}

/// Bilinear resize of one channel plane with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    let taps = |d: usize, s: usize| -> Vec<(usize, usize, f32)> {
        let ratio = s as f64 / d as f64;
        (0..d)
            .map(|o| {
                let x = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (s - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(s - 1);
                (x0, x1, (x - x0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(dw, sw);
    let ys = taps(dh, sh);
    let mut out = Vec::with_capacity(dw * dh);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Network input for one image: resized to `hw × hw`, channels B, G, R, with
/// the channel means subtracted and no further scaling.
pub fn preprocess(img: &RgbImage, hw: usize) -> Result<Tensor> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::Format("empty image".into()));
    }
    let mut data = Vec::with_capacity(3 * hw * hw);
    for (c, rgb_index) in [2usize, 1, 0].into_iter().enumerate() {
        let plane: Vec<f32> = img.pixels.iter().skip(rgb_index).step_by(3).map(|&v| v as f32).collect();
        data.extend(resize_bilinear(&plane, img.width, img.height, hw, hw).into_iter().map(|v| v - BGR_MEANS[c]));
    }
    Tensor::from_vec(Shape4::new(1, 3, hw, hw), data)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    preprocess(&decode_ppm(&std::fs::read(path)?)?, INPUT_HW)
}

/// Encodes interleaved RGB pixels as a P6 PPM.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(w: usize, h: usize, rgb: [u8; 3]) -> RgbImage {
        RgbImage { width: w, height: h, pixels: rgb.iter().copied().cycle().take(w * h * 3).collect() }
    }

    #[test]
    fn gray_image_means() {
        let t = preprocess(&decode_ppm(&encode_ppm(&solid(40, 30, [128; 3]))).unwrap(), 300).unwrap();
        assert_eq!(t.shape(), Shape4::new(1, 3, 300, 300));
        for (c, v) in [24.0, 11.0, 5.0].into_iter().enumerate() {
            assert!(t.plane(0, c).iter().all(|&x| x == v));
        }
    }

    #[test]
    fn native_size_passes_through() {
        let pixels: Vec<u8> = (0..300 * 300 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = RgbImage { width: 300, height: 300, pixels };
        let t = preprocess(&img, 300).unwrap();
        for (k, px) in img.pixels.chunks(3).enumerate() {
            assert_eq!(t.plane(0, 0)[k], px[2] as f32 - 104.0);
            assert_eq!(t.plane(0, 2)[k], px[0] as f32 - 123.0);
        }
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let t = preprocess(&solid(600, 600, [10, 200, 77]), 300).unwrap();
        for (c, v) in [77.0 - 104.0, 200.0 - 117.0, 10.0 - 123.0].into_iter().enumerate() {
            assert!(t.plane(0, c).iter().all(|&x| (x - v).abs() < 1e-4));
        }
    }

    #[test]
    fn bilinear_midpoints() {
        // 2×1 → 4×1: half-pixel centers give 0, 0.25, 0.75, 1 of the way across
        let out = resize_bilinear(&[0.0, 4.0], 2, 1, 4, 1);
        assert_eq!(out, vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n0 0 0\n"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\nxx"), Err(Error::Format(_))));
    }
}
