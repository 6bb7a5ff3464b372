//! PFM (portable float map) reader/writer for single-channel fields.
//!
//! Written files use the grayscale "Pf" variant, scale -1.0 (little-endian),
//! rows stored bottom-to-top. The reader also accepts positive scales
//! (big-endian payloads) and byte-swaps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(path: &Path, offset: usize, msg: &str) -> Error {
    Error::data(format!("{}: {msg} (byte offset {offset})", path.display()))
}

/// Write a [1,H,W] field as binary PFM. Round-trips bit-exactly through
/// [`read_pfm`] for finite values.
pub fn write_pfm(field: &Tensor, path: &Path) -> Result<()> {
    if field.shape.len() != 3 || field.shape[0] != 1 {
        return Err(Error::contract(format!(
            "write_pfm: expected [1,H,W] field, got {:?}",
            field.shape
        )));
    }
    if field.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("write_pfm: field contains non-finite values".to_string()));
    }
    let (h, w) = (field.shape[1], field.shape[2]);
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "Pf\n{} {}\n-1.0\n", w, h)?;
    // bottom-to-top row order
    for y in (0..h).rev() {
        for x in 0..w {
            out.write_all(&field.data[y * w + x].to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a grayscale PFM into a [1,H,W] tensor.
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;

    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<(String, usize)> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, start, &format!("missing {what} token")));
        }
        let s = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| format_err(path, start, &format!("non-ascii {what} token")))?;
        // consume exactly one whitespace after the token, per the header format
        if pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok((s.to_string(), start))
    };

    let (magic, off) = token("magic")?;
    if magic == "PF" {
        return Err(format_err(path, off, "color PFM (PF) not supported, expected grayscale Pf"));
    }
    if magic != "Pf" {
        return Err(format_err(path, off, &format!("bad magic {magic:?}, expected \"Pf\"")));
    }
    let (wtok, off) = token("width")?;
    let w: usize = wtok.parse().map_err(|_| format_err(path, off, "unparsable width"))?;
    let (htok, off) = token("height")?;
    let h: usize = htok.parse().map_err(|_| format_err(path, off, "unparsable height"))?;
    let (stok, off) = token("scale")?;
    let scale: f32 = stok.parse().map_err(|_| format_err(path, off, "unparsable scale"))?;
    if scale == 0.0 {
        return Err(format_err(path, off, "scale must be non-zero"));
    }
    let little_endian = scale < 0.0;

    let payload = &bytes[pos..];
    let need = h * w * 4;
    if payload.len() < need {
        return Err(format_err(
            path,
            pos + payload.len(),
            &format!("truncated payload: need {need} bytes, have {}", payload.len()),
        ));
    }
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        // rows are stored bottom-to-top
        let dst_y = h - 1 - y;
        for x in 0..w {
            let o = (y * w + x) * 4;
            let raw: [u8; 4] = payload[o..o + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[dst_y * w + x] = v;
        }
    }
    Tensor::new(vec![1, h, w], data)
}
