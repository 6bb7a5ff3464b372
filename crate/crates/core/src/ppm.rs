//! Binary PPM (P6) image I/O for [3,H,W] tensors with values in [0,1].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    if image.shape.len() != 3 || image.shape[0] != 3 {
        return Err(Error::contract(format!(
            "write_ppm: expected [3,H,W] image, got {:?}",
            image.shape
        )));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    let mut row = Vec::with_capacity(3 * w);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for c in 0..3 {
                let v = image.data[(c * h + y) * w + x];
                row.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;

    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        // PPM headers may contain '#' comment lines
        while pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data(format!("{}: missing {what}", path.display())));
        }
        let s = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::data(format!("{}: bad {what}", path.display())))?;
        if pos < bytes.len() {
            pos += 1; // single whitespace after token
        }
        Ok(s.to_string())
    };

    let magic = token("magic")?;
    if magic != "P6" {
        return Err(Error::data(format!("{}: expected P6, got {magic:?}", path.display())));
    }
    let w: usize = token("width")?.parse().map_err(|_| Error::data("bad width".to_string()))?;
    let h: usize = token("height")?.parse().map_err(|_| Error::data("bad height".to_string()))?;
    let maxval: usize =
        token("maxval")?.parse().map_err(|_| Error::data("bad maxval".to_string()))?;
    if maxval != 255 {
        return Err(Error::data(format!("{}: only maxval 255 supported", path.display())));
    }
    let payload = &bytes[pos..];
    if payload.len() < 3 * h * w {
        return Err(Error::data(format!(
            "{}: truncated payload ({} < {})",
            path.display(),
            payload.len(),
            3 * h * w
        )));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = payload[(y * w + x) * 3 + c] as f32 / 255.0;
                data[(c * h + y) * w + x] = v;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}
