//! Binary PPM (P6) reading and writing, plus PNG loading through the
//! `image` crate. PPM is the canonical output format because its bytes are
//! stable enough to diff in tests.

use std::fs;
use std::io::Read;
use std::path::Path;

use fmdnn_core::Tensor;

use crate::{Error, Result};

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * w * h {
        return Err(Error::Input(format!(
            "ppm write: {} bytes for {}x{}",
            rgb.len(),
            w,
            h
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    fs::write(path, out)?;
    Ok(())
}

/// Next whitespace-delimited header token, skipping `#` comment lines.
fn next_token(data: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        None
    } else {
        Some(String::from_utf8_lossy(&data[start..*pos]).into_owned())
    }
}

/// Parse a P6 file: magic, dimensions, maxval 255, then raw RGB triples.
/// `#` comments may appear between header tokens.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

    let mut pos = 0;
    if next_token(&data, &mut pos).as_deref() != Some("P6") {
        return Err(bad("not a P6 file"));
    }
    let w: usize = next_token(&data, &mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad width"))?;
    let h: usize = next_token(&data, &mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad height"))?;
    let maxval: usize = next_token(&data, &mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = 3 * w * h;
    if data.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    Ok((w, h, data[pos..pos + need].to_vec()))
}

/// Load a PPM or PNG image as a [3, H, W] tensor with values in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let (w, h, rgb) = match ext.as_str() {
        "ppm" => read_ppm(path)?,
        "png" => {
            let mut buf = Vec::new();
            fs::File::open(path)?.read_to_end(&mut buf)?;
            let img = image::load_from_memory_with_format(&buf, image::ImageFormat::Png)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
                .into_rgb8();
            (img.width() as usize, img.height() as usize, img.into_raw())
        }
        other => {
            return Err(Error::Input(format!(
                "unsupported image extension {other:?} for {}",
                path.display()
            )))
        }
    };
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = rgb[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data).map_err(Error::Core)
}

/// Quantize a [3, H, W] tensor in [0, 1] to interleaved RGB bytes.
pub fn tensor_to_rgb(t: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    t.expect_rank(3, "rgb tensor")?;
    if t.shape[0] != 3 {
        return Err(Error::Input(format!(
            "expected 3 channels, got {}",
            t.shape[0]
        )));
    }
    let (h, w) = (t.shape[1], t.shape[2]);
    let mut rgb = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = t.data[(c * h + y) * w + x].clamp(0.0, 1.0);
                rgb[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    Ok((w, h, rgb))
}

/// Write a [H, W] map with values in [0, 1] as a gray P6 file.
pub fn write_gray_ppm(path: &Path, map: &Tensor) -> Result<()> {
    map.expect_rank(2, "gray map")?;
    let (h, w) = (map.shape[0], map.shape[1]);
    let mut rgb = vec![0u8; 3 * h * w];
    for (i, &v) in map.data.iter().enumerate() {
        let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        rgb[i * 3] = b;
        rgb[i * 3 + 1] = b;
        rgb[i * 3 + 2] = b;
    }
    write_ppm(path, w, h, &rgb)
}
