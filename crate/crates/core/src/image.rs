//! Image ingestion (PPM P6 and raw MRAW), preprocessing and patch
//! tokenization.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded image before preprocessing: interleaved RGB, values on the
/// 0..255 scale.
#[derive(Debug, Clone)]
pub struct RawImage {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

/// Preprocessed image: 224x224x3, values in [-1, 1].
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

pub const TARGET_SIDE: usize = 224;

/// Parse a binary PPM (P6, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<RawImage> {
    let mut pos = 0;
    let mut fields = Vec::new();
    // header: magic, width, height, maxval separated by whitespace/comments
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() < 4 || fields[0] != b"P6" {
        return Err(Error::Format("not a P6 PPM".into()));
    }
    let parse = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PPM header field".into()))
    };
    let w = parse(fields[1])?;
    let h = parse(fields[2])?;
    let maxval = parse(fields[3])?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format("truncated PPM payload".into()));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f32).collect();
    Ok(RawImage { h, w, c: 3, data })
}

pub fn encode_ppm(img: &RawImage) -> Result<Vec<u8>> {
    if img.c != 3 {
        return Err(Error::BadChannelCount(img.c));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.data.iter().map(|&v| v.clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Parse the raw float format: magic "MRAW", u32 H, u32 W, u32 C,
/// little-endian f32 pixels on the 0..255 scale.
pub fn decode_mraw(bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < 16 || &bytes[..4] != b"MRAW" {
        return Err(Error::Format("not an MRAW image".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (u32_at(4), u32_at(8), u32_at(12));
    let need = h * w * c;
    if bytes.len() < 16 + need * 4 {
        return Err(Error::Format("truncated MRAW payload".into()));
    }
    let data = bytes[16..16 + need * 4]
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    Ok(RawImage { h, w, c, data })
}

pub fn encode_mraw(img: &RawImage) -> Vec<u8> {
    let mut out = b"MRAW".to_vec();
    out.extend((img.h as u32).to_le_bytes());
    out.extend((img.w as u32).to_le_bytes());
    out.extend((img.c as u32).to_le_bytes());
    for &v in &img.data {
        out.extend(v.to_le_bytes());
    }
    out
}

/// Load a .ppm or .mraw file by extension.
pub fn load_image(path: &Path) -> Result<RawImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => decode_ppm(&bytes),
        Some("mraw") => decode_mraw(&bytes),
        other => Err(Error::Format(format!("unsupported image extension {other:?}"))),
    }
}

pub fn save_ppm(path: &Path, img: &RawImage) -> Result<()> {
    let bytes = encode_ppm(img)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Bilinear resize to 224x224 followed by x -> (x/255 - 0.5)/0.5, which maps
/// 0..255 exactly onto [-1, 1].
pub fn preprocess(raw: &RawImage) -> Result<ImageTensor> {
    if raw.h == 0 || raw.w == 0 {
        return Err(Error::EmptyImage);
    }
    if raw.c != 3 {
        return Err(Error::BadChannelCount(raw.c));
    }
    let resized = if raw.h == TARGET_SIDE && raw.w == TARGET_SIDE {
        raw.data.clone()
    } else {
        bilinear_resize(raw, TARGET_SIDE, TARGET_SIDE)
    };
    let data = resized
        .iter()
        .map(|&v| (v / 255.0 - 0.5) / 0.5)
        .collect();
    Ok(ImageTensor {
        h: TARGET_SIDE,
        w: TARGET_SIDE,
        data,
    })
}

/// Bilinear interpolation with half-pixel centers (align_corners = false).
fn bilinear_resize(raw: &RawImage, out_h: usize, out_w: usize) -> Vec<f32> {
    let scale_y = raw.h as f32 / out_h as f32;
    let scale_x = raw.w as f32 / out_w as f32;
    let mut out = vec![0.0f32; out_h * out_w * raw.c];
    for oy in 0..out_h {
        let sy = ((oy as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (raw.h - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(raw.h - 1);
        let fy = sy - y0 as f32;
        for ox in 0..out_w {
            let sx = ((ox as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (raw.w - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(raw.w - 1);
            let fx = sx - x0 as f32;
            for ch in 0..raw.c {
                let px = |y: usize, x: usize| raw.data[(y * raw.w + x) * raw.c + ch];
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let bot = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                out[(oy * out_w + ox) * raw.c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Split a preprocessed image into n = (H/P)*(W/P) flattened patches in
/// raster order; each row is P*P*3 values.
pub fn patchify(img: &ImageTensor, patch: usize) -> Result<Tensor<f32>> {
    if img.h % patch != 0 {
        return Err(Error::NonDivisible {
            side: img.h,
            patch,
        });
    }
    if img.w % patch != 0 {
        return Err(Error::NonDivisible {
            side: img.w,
            patch,
        });
    }
    let (ph, pw) = (img.h / patch, img.w / patch);
    let n = ph * pw;
    let cols = patch * patch * 3;
    let mut out = Tensor::zeros(&[n, cols]);
    for py in 0..ph {
        for px in 0..pw {
            let row = out.row_mut(py * pw + px);
            let mut idx = 0;
            for y in 0..patch {
                for x in 0..patch {
                    let src = ((py * patch + y) * img.w + (px * patch + x)) * 3;
                    row[idx..idx + 3].copy_from_slice(&img.data[src..src + 3]);
                    idx += 3;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_raw(h: usize, w: usize, value: f32) -> RawImage {
        RawImage {
            h,
            w,
            c: 3,
            data: vec![value; h * w * 3],
        }
    }

    #[test]
    fn preprocess_constant_closed_form() {
        let img = preprocess(&constant_raw(100, 80, 128.0)).unwrap();
        let expect = (128.0f32 / 255.0 - 0.5) / 0.5;
        assert!((expect - 0.003922).abs() < 1e-5);
        for &v in &img.data {
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn preprocess_range_endpoints() {
        let hi = preprocess(&constant_raw(10, 10, 255.0)).unwrap();
        let lo = preprocess(&constant_raw(10, 10, 0.0)).unwrap();
        assert!(hi.data.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!(lo.data.iter().all(|&v| (v + 1.0).abs() < 1e-6));
    }

    #[test]
    fn preprocess_passthrough_at_target_size() {
        let mut raw = constant_raw(224, 224, 0.0);
        for (i, v) in raw.data.iter_mut().enumerate() {
            *v = (i % 256) as f32;
        }
        let img = preprocess(&raw).unwrap();
        for (o, &r) in img.data.iter().zip(&raw.data) {
            assert!((o - (r / 255.0 - 0.5) / 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn preprocess_rejects_empty_and_bad_channels() {
        assert!(matches!(
            preprocess(&RawImage {
                h: 0,
                w: 5,
                c: 3,
                data: vec![]
            }),
            Err(Error::EmptyImage)
        ));
        assert!(matches!(
            preprocess(&RawImage {
                h: 2,
                w: 2,
                c: 1,
                data: vec![0.0; 4]
            }),
            Err(Error::BadChannelCount(1))
        ));
    }

    #[test]
    fn patchify_counts_and_conservation() {
        let img = preprocess(&constant_raw(224, 224, 50.0)).unwrap();
        let patches = patchify(&img, 32).unwrap();
        assert_eq!(patches.shape(), &[49, 32 * 32 * 3]);
        assert_eq!(patches.len(), 224 * 224 * 3);
    }

    #[test]
    fn patchify_reassembles_bitwise() {
        let mut raw = constant_raw(224, 224, 0.0);
        for (i, v) in raw.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32;
        }
        let img = preprocess(&raw).unwrap();
        let p = 32;
        let patches = patchify(&img, p).unwrap();
        // inverse raster oracle
        let pw = 224 / p;
        let mut rebuilt = vec![0.0f32; img.data.len()];
        for (r, row) in (0..patches.rows()).map(|r| (r, patches.row(r))) {
            let (py, px) = (r / pw, r % pw);
            let mut idx = 0;
            for y in 0..p {
                for x in 0..p {
                    let dst = ((py * p + y) * 224 + (px * p + x)) * 3;
                    rebuilt[dst..dst + 3].copy_from_slice(&row[idx..idx + 3]);
                    idx += 3;
                }
            }
        }
        assert_eq!(rebuilt, img.data);
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = ImageTensor {
            h: 224,
            w: 224,
            data: vec![0.0; 224 * 224 * 3],
        };
        assert!(matches!(
            patchify(&img, 33),
            Err(Error::NonDivisible { .. })
        ));
    }

    #[test]
    fn ppm_roundtrip() {
        let raw = constant_raw(4, 6, 77.0);
        let bytes = encode_ppm(&raw).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!((back.h, back.w, back.c), (4, 6, 3));
        assert_eq!(back.data, raw.data);
    }

    #[test]
    fn mraw_roundtrip() {
        let raw = RawImage {
            h: 2,
            w: 3,
            c: 3,
            data: (0..18).map(|i| i as f32 * 0.5).collect(),
        };
        let back = decode_mraw(&encode_mraw(&raw)).unwrap();
        assert_eq!(back.data, raw.data);
    }
}
