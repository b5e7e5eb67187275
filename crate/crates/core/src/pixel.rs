//! Image IO, color conversion, and border handling.
//!
//! Everything past the 8-bit file boundary runs in f32. Luma/chroma planes
//! stay unclamped through the codec; values are clipped only when exporting
//! back to bytes.

use std::path::Path;

use crate::autodiff::kernels::reflect;
use crate::error::{Error, Result};

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub w: usize,
    pub h: usize,
    pub rgb: Vec<u8>,
}

impl ImageU8 {
    pub fn new(w: usize, h: usize, rgb: Vec<u8>) -> Result<Self> {
        if w == 0 || h == 0 || rgb.len() != 3 * w * h {
            return Err(Error::Shape(format!(
                "rgb buffer of {} bytes does not match {w}x{h}",
                rgb.len()
            )));
        }
        Ok(ImageU8 { w, h, rgb })
    }
}

/// Planar full-range luma/chroma, one f32 plane per component.
#[derive(Debug, Clone)]
pub struct Planes {
    pub w: usize,
    pub h: usize,
    pub y: Vec<f32>,
    pub cb: Vec<f32>,
    pub cr: Vec<f32>,
}

pub fn read_image(path: &Path) -> Result<ImageU8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(path)
    } else {
        Err(Error::Format(format!("{}: neither PPM (P6) nor PNG", path.display())))
    }
}

pub fn write_image(path: &Path, img: &ImageU8) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write_ppm(path, img),
        Some("png") => write_png(path, img),
        other => Err(Error::Format(format!("unsupported output extension {other:?}"))),
    }
}

fn decode_png(path: &Path) -> Result<ImageU8> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    use image::ColorType::*;
    match img.color() {
        L8 | La8 | Rgb8 | Rgba8 => {}
        other => {
            return Err(Error::Format(format!(
                "{}: only 8-bit images are supported, found {other:?}",
                path.display()
            )))
        }
    }
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    ImageU8::new(w, h, rgb.into_raw())
}

fn write_png(path: &Path, img: &ImageU8) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.w as u32, img.h as u32, img.rgb.clone())
        .expect("buffer length validated at construction");
    buf.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageU8> {
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        *f = ppm_field(bytes, &mut pos)?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} unsupported, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::Format("PPM raster is truncated".into()));
    }
    ImageU8::new(w, h, bytes[pos..pos + need].to_vec())
}

fn ppm_field(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(c) if c.is_ascii_digit() => break,
            _ => return Err(Error::Format("malformed PPM header".into())),
        }
    }
    let mut v = 0usize;
    while let Some(c) = bytes.get(*pos) {
        if !c.is_ascii_digit() {
            break;
        }
        v = v
            .checked_mul(10)
            .and_then(|v| v.checked_add((c - b'0') as usize))
            .ok_or_else(|| Error::Format("PPM header value overflow".into()))?;
        *pos += 1;
    }
    Ok(v)
}

fn write_ppm(path: &Path, img: &ImageU8) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.rgb);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// Full-range luma/chroma matrix and its exact inverse.
const KR: f32 = 0.299;
const KG: f32 = 0.587;
const KB: f32 = 0.114;

pub fn rgb_to_planes(img: &ImageU8) -> Planes {
    let n = img.w * img.h;
    let mut y = Vec::with_capacity(n);
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for px in img.rgb.chunks_exact(3) {
        let (r, g, b) = (px[0] as f32, px[1] as f32, px[2] as f32);
        let yy = KR * r + KG * g + KB * b;
        y.push(yy);
        cb.push(128.0 + 0.5 * (b - yy) / (1.0 - KB));
        cr.push(128.0 + 0.5 * (r - yy) / (1.0 - KR));
    }
    Planes { w: img.w, h: img.h, y, cb, cr }
}

/// Inverse transform to interleaved RGB, still unclamped f32.
pub fn planes_to_rgb_f32(p: &Planes) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * p.w * p.h);
    for i in 0..p.w * p.h {
        let y = p.y[i];
        let cb = p.cb[i] - 128.0;
        let cr = p.cr[i] - 128.0;
        let r = y + 2.0 * (1.0 - KR) * cr;
        let b = y + 2.0 * (1.0 - KB) * cb;
        let g = (y - KR * r - KB * b) / KG;
        out.push(r);
        out.push(g);
        out.push(b);
    }
    out
}

pub fn rgb_f32_to_u8(rgb: &[f32]) -> Vec<u8> {
    rgb.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect()
}

/// Pads a plane to multiples of `m` on both axes by whole-sample reflection.
pub fn pad_reflect(plane: &[f32], w: usize, h: usize, m: usize) -> (Vec<f32>, usize, usize) {
    let pw = w.div_ceil(m) * m;
    let ph = h.div_ceil(m) * m;
    if (pw, ph) == (w, h) {
        return (plane.to_vec(), w, h);
    }
    let mut out = vec![0.0f32; pw * ph];
    for oy in 0..ph {
        let sy = reflect(oy as isize, h);
        for ox in 0..pw {
            let sx = reflect(ox as isize, w);
            out[oy * pw + ox] = plane[sy * w + sx];
        }
    }
    (out, pw, ph)
}

pub fn crop_plane(plane: &[f32], pw: usize, w: usize, h: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        out.extend_from_slice(&plane[y * pw..y * pw + w]);
    }
    out
}
