//! 8-bit RGB images: PNG/PPM files and area-averaged resampling into
//! network input tensors.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{atomic_write, read_file};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, interleaved RGB.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidInput(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let at = (y * self.width + x) * 3;
        [self.data[at], self.data[at + 1], self.data[at + 2]]
    }
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(&img.data).expect("in-memory PNG body");
    }
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let bad = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| bad("image too large".into()))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(bad(format!("unsupported color type {other:?}"))),
    };
    RgbImage::new(w, h, data).map_err(|e| bad(e.to_string()))
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let bad = |msg: &str| Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
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
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 PPM is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let body = bytes
        .get(pos + 1..pos + 1 + w * h * 3)
        .ok_or_else(|| bad("truncated PPM data"))?;
    RgbImage::new(w, h, body.to_vec())
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Writes PNG, or binary PPM when the extension is `.ppm`.
pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes = if is_ppm(path) {
        encode_ppm(img)
    } else {
        encode_png(img)
    };
    atomic_write(path, &bytes)
}

/// Reads a PNG or binary PPM file, chosen by content.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = read_file(path)?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes, path)
    } else {
        decode_png(&bytes, path)
    }
}

/// Overlap weights of each destination sample with the source samples when
/// `src` samples are squeezed into `dst`.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let (lo, hi) = (d as f64 * scale, (d + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((s, (overlap / scale) as f32));
                }
                s += 1;
            }
            w
        })
        .collect()
}

/// Area-averaging resize to `out_w x out_h`, returning HWC floats in [0, 1].
pub fn resize_area(img: &RgbImage, out_w: usize, out_h: usize) -> Vec<f32> {
    let wx = area_weights(img.width, out_w);
    let wy = area_weights(img.height, out_h);
    let mut rows = vec![0.0f32; img.height * out_w * 3];
    for y in 0..img.height {
        let src = &img.data[y * img.width * 3..(y + 1) * img.width * 3];
        let dst = &mut rows[y * out_w * 3..(y + 1) * out_w * 3];
        for (x, ws) in wx.iter().enumerate() {
            for &(s, w) in ws {
                for c in 0..3 {
                    dst[x * 3 + c] += w * src[s * 3 + c] as f32;
                }
            }
        }
    }
    let mut out = vec![0.0f32; out_h * out_w * 3];
    for (y, ws) in wy.iter().enumerate() {
        let dst = &mut out[y * out_w * 3..(y + 1) * out_w * 3];
        for &(s, w) in ws {
            let src = &rows[s * out_w * 3..(s + 1) * out_w * 3];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += w * v;
            }
        }
    }
    for v in &mut out {
        *v /= 255.0;
    }
    out
}

/// `[1, extent, extent, 3]` network input for a square-resized image.
pub fn to_input_tensor(img: &RgbImage, extent: usize) -> Tensor<f32> {
    Tensor::new(&[1, extent, extent, 3], resize_area(img, extent, extent)).expect("sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(w: usize, h: usize) -> RgbImage {
        RgbImage::new(w, h, (0..w * h * 3).map(|i| (i * 37 % 251) as u8).collect()).unwrap()
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample(7, 5);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn area_resize_preserves_mean_and_constants() {
        let img = RgbImage::filled(1080, 1080, [200, 100, 50]);
        let out = resize_area(&img, 416, 416);
        for px in out.chunks(3) {
            assert!((px[0] - 200.0 / 255.0).abs() < 1e-5);
            assert!((px[2] - 50.0 / 255.0).abs() < 1e-5);
        }
        let img = sample(30, 30);
        let out = resize_area(&img, 13, 13);
        let mean_in =
            img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64 / 255.0;
        let mean_out = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-4);
    }

    #[test]
    fn integer_factor_is_block_average() {
        let img =
            RgbImage::new(2, 2, vec![0, 0, 0, 255, 255, 255, 0, 0, 0, 255, 255, 255]).unwrap();
        let out = resize_area(&img, 1, 1);
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn corrupt_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
        std::fs::write(&p, b"P6\n4 4\n255\n\x01\x02").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
    }
}
