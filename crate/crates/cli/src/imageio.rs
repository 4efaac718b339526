//! Binary PGM (P5) and PPM (P6) images.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use condflow::{FlowError, Result};
use ndtensor::Tensor;

/// Writes a `[C, H, W]` (or `[H, W]`) tensor as P5 for one channel and P6
/// for three. Values are rounded and clamped to `0..=max_val`; samples are
/// two bytes big-endian when `max_val > 255`.
pub fn write_image(path: &Path, image: &Tensor<f64>, max_val: u16) -> Result<()> {
    let (c, h, w) = match *image.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => return Err(FlowError::Config(format!("cannot write an image of shape {:?}", s))),
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(FlowError::Config(format!("images need 1 or 3 channels, got {}", c))),
    };
    if max_val == 0 {
        return Err(FlowError::Config("image max value must be positive".into()));
    }
    let wide = max_val > 255;
    let mut buf = format!("{}\n{} {}\n{}\n", magic, w, h, max_val).into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            let v = image.data()[ch * plane + p];
            let q = if v.is_nan() { 0 } else { v.round().clamp(0.0, max_val as f64) as u16 };
            if wide {
                buf.extend_from_slice(&q.to_be_bytes());
            } else {
                buf.push(q as u8);
            }
        }
    }
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

/// Reads a file written by [`write_image`]: `([C, H, W] tensor, max value)`.
pub fn read_image(path: &Path) -> Result<(Tensor<f64>, u16)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| FlowError::Format(format!("{}: {}", path.display(), m));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("not a binary PGM/PPM")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max_val) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    let max_val = u16::try_from(max_val).map_err(|_| bad("max value out of range"))?;
    let wide = max_val > 255;
    let n = c * h * w;
    let need = n * if wide { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let px = &bytes[pos..pos + need];
    let plane = h * w;
    let mut data = vec![0.0; n];
    for p in 0..plane {
        for ch in 0..c {
            let k = p * c + ch;
            data[ch * plane + p] = if wide {
                u16::from_be_bytes([px[2 * k], px[2 * k + 1]]) as f64
            } else {
                px[k] as f64
            };
        }
    }
    Ok((Tensor::new([c, h, w], data)?, max_val))
}
