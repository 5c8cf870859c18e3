//! Binary PPM (P6) decoding and bilinear resizing.
//!
//! Covers arrive as arbitrary-sized RGB images and leave as `[1,H,W,3]`
//! tensors in [0,1]. The resize is a direct anisotropic bilinear scale:
//! no cropping, no aspect-ratio preservation. Decode failures carry
//! enough context to skip the record and log it.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{context}: {reason}")]
    Decode { context: String, reason: String },
}

fn decode_err(context: &str, reason: impl Into<String>) -> ImageError {
    ImageError::Decode {
        context: context.to_string(),
        reason: reason.into(),
    }
}

/// 8-bit RGB raster, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// PPM maximum sample value; samples are fractions of it.
    pub max_value: u8,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * 3, "pixel buffer size");
        Self {
            width,
            height,
            max_value: 255,
            pixels,
        }
    }
}

/// Pulls the next ASCII integer token, skipping whitespace and `#`
/// comments (which run to end of line).
fn next_token(bytes: &[u8], pos: &mut usize, context: &str) -> Result<usize, ImageError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(decode_err(context, "expected an integer in the header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| decode_err(context, "header integer out of range"))
}

/// Decodes a binary PPM (magic `P6`, 8-bit samples).
pub fn decode_ppm(bytes: &[u8], context: &str) -> Result<RgbImage, ImageError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(decode_err(context, "not a binary PPM (missing P6 magic)"));
    }
    let mut pos = 2;
    let width = next_token(bytes, &mut pos, context)?;
    let height = next_token(bytes, &mut pos, context)?;
    let max_value = next_token(bytes, &mut pos, context)?;
    if width == 0 || height == 0 {
        return Err(decode_err(context, "zero image dimension"));
    }
    if max_value == 0 || max_value > 255 {
        return Err(decode_err(
            context,
            format!("max sample value {max_value} is outside [1, 255]"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(decode_err(context, "missing raster separator"));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(decode_err(
            context,
            format!("raster has {} bytes, needs {need}", raster.len()),
        ));
    }
    Ok(RgbImage {
        width,
        height,
        max_value: max_value as u8,
        pixels: raster[..need].to_vec(),
    })
}

/// Canonical P6 bytes (max sample value 255).
pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

/// `[1,H,W,3]` tensor with samples scaled to [0,1] by the image's max
/// value. Each u8 is exact in f32, so a 255-max image maps to exactly
/// `sample / 255`.
pub fn to_tensor(image: &RgbImage) -> Tensor<f32> {
    let max = f32::from(image.max_value);
    Tensor::new(
        &[1, image.height, image.width, 3],
        image.pixels.iter().map(|&p| f32::from(p) / max).collect(),
    )
    .expect("raster size matches shape")
}

/// Anisotropic bilinear resample of an `[B,H,W,C]` tensor. Sample
/// centers align (half-pixel convention); border samples clamp. Weights
/// accumulate in f64. A same-size call returns the input bit-exactly.
pub fn resize_bilinear<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    assert_eq!(input.rank(), 4, "resize expects [B,H,W,C]");
    assert!(out_h > 0 && out_w > 0, "target dimensions must be positive");
    let [b, h, w, c] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    if out_h == h && out_w == w {
        return input.clone();
    }
    // src = (dst + 0.5) * (src_extent / dst_extent) - 0.5, clamped.
    let axis = |dst: usize, src_n: usize, dst_n: usize| -> (usize, usize, f64) {
        let s = (dst as f64 + 0.5) * (src_n as f64 / dst_n as f64) - 0.5;
        let s = s.clamp(0.0, (src_n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_n - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Tensor::<T>::zeros(&[b, out_h, out_w, c]).expect("shape is valid");
    let src = input.data();
    let dst = out.data_mut();
    let mut di = 0;
    for bi in 0..b {
        for oy in 0..out_h {
            let (y0, y1, fy) = axis(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = axis(ox, w, out_w);
                let base00 = ((bi * h + y0) * w + x0) * c;
                let base01 = ((bi * h + y0) * w + x1) * c;
                let base10 = ((bi * h + y1) * w + x0) * c;
                let base11 = ((bi * h + y1) * w + x1) * c;
                for ch in 0..c {
                    let p00 = src[base00 + ch].as_f64();
                    let p01 = src[base01 + ch].as_f64();
                    let p10 = src[base10 + ch].as_f64();
                    let p11 = src[base11 + ch].as_f64();
                    let top = p00 * (1.0 - fx) + p01 * fx;
                    let bottom = p10 * (1.0 - fx) + p11 * fx;
                    dst[di] = T::of_f64(top * (1.0 - fy) + bottom * fy);
                    di += 1;
                }
            }
        }
    }
    out
}

/// Reads, decodes, and resizes one cover: `[1,targetH,targetW,3]` in
/// [0,1].
pub fn load_image(path: &Path, target_h: usize, target_w: usize) -> Result<Tensor<f32>, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let image = decode_ppm(&bytes, &path.display().to_string())?;
    Ok(resize_bilinear(&to_tensor(&image), target_h, target_w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard2() -> RgbImage {
        // White at (0,0) and (1,1), black elsewhere.
        let w = [255u8, 255, 255];
        let k = [0u8, 0, 0];
        let pixels = [w, k, k, w].concat();
        RgbImage::new(2, 2, pixels)
    }

    #[test]
    fn decode_round_trips_encode() {
        let img = checkerboard2();
        let decoded = decode_ppm(&encode_ppm(&img), "test").unwrap();
        assert_eq!(decoded, img);
    }

    #[test]
    fn header_comments_and_maxval_scaling() {
        let bytes = b"P6 # a comment\n# another\n2 1\n# before maxval\n7\n\x00\x07\x03\x07\x00\x00";
        let img = decode_ppm(bytes, "test").unwrap();
        assert_eq!((img.width, img.height, img.max_value), (2, 1, 7));
        let t = to_tensor(&img);
        assert_eq!(t.shape(), &[1, 1, 2, 3]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[2], 3.0 / 7.0);
    }

    #[test]
    fn bad_inputs_are_structured_errors() {
        for bytes in [
            &b"P5\n1 1\n255\n\x00"[..],
            &b"P6\n1\n255\n\x00\x00\x00"[..],
            &b"P6\n1 1\n999\n\x00\x00\x00"[..],
            &b"P6\n2 2\n255\n\x00\x00\x00"[..],
        ] {
            assert!(matches!(
                decode_ppm(bytes, "bad"),
                Err(ImageError::Decode { .. })
            ));
        }
    }

    #[test]
    fn same_size_load_is_exact_division() {
        let img = RgbImage::new(3, 2, (0u8..18).map(|i| i * 13).collect());
        let t = resize_bilinear(&to_tensor(&img), 2, 3);
        for (i, &v) in t.data().iter().enumerate() {
            assert_eq!(v, f32::from(img.pixels[i]) / 255.0);
        }
    }

    #[test]
    fn checkerboard_upscale_matches_hand_weights() {
        let t = resize_bilinear(&to_tensor(&checkerboard2()), 4, 4);
        let rows: [[f32; 4]; 4] = [
            [1.0, 0.75, 0.25, 0.0],
            [0.75, 0.625, 0.375, 0.25],
            [0.25, 0.375, 0.625, 0.75],
            [0.0, 0.25, 0.75, 1.0],
        ];
        for y in 0..4 {
            for x in 0..4 {
                for ch in 0..3 {
                    assert_eq!(t.at4(0, y, x, ch), rows[y][x], "({y},{x},{ch})");
                }
            }
        }
    }

    #[test]
    fn one_source_feeds_both_targets() {
        let img = RgbImage::new(5, 7, (0..5 * 7 * 3).map(|i| (i % 251) as u8).collect());
        let t = to_tensor(&img);
        let small = resize_bilinear(&t, 56, 56);
        let large = resize_bilinear(&t, 227, 227);
        assert_eq!(small.shape(), &[1, 56, 56, 3]);
        assert_eq!(large.shape(), &[1, 227, 227, 3]);
        for &v in small.data().iter().chain(large.data()) {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn downscale_averages_neighbors() {
        // 4x1 row [0, 1, 0, 1] halved: centers land midway between
        // sample pairs, so both outputs are 0.5.
        let mut pixels = Vec::new();
        for v in [0u8, 255, 0, 255] {
            pixels.extend_from_slice(&[v, v, v]);
        }
        let img = RgbImage::new(4, 1, pixels);
        let t = resize_bilinear(&to_tensor(&img), 1, 2);
        assert_eq!(t.shape(), &[1, 1, 2, 3]);
        for &v in t.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn load_image_reports_missing_file() {
        let err = load_image(Path::new("/nonexistent/cover.ppm"), 8, 8).unwrap_err();
        assert!(matches!(err, ImageError::Io { .. }));
    }

    #[test]
    fn load_image_reads_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cover.ppm");
        std::fs::write(&path, encode_ppm(&checkerboard2())).unwrap();
        let t = load_image(&path, 4, 4).unwrap();
        assert_eq!(t.shape(), &[1, 4, 4, 3]);
        assert_eq!(t.at4(0, 0, 0, 0), 1.0);
        assert_eq!(t.at4(0, 3, 3, 2), 1.0);
    }
}
