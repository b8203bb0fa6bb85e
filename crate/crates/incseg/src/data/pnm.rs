//! Strict binary PPM (P6) and PGM (P5) reader/writer. Headers are plain
//! `MAGIC\nW H\n255\n`; on input any ASCII whitespace between header
//! tokens is accepted, comments are not, and the max value must be 255.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

fn fmt_err(path: &Path, msg: &str) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    f.flush()?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    debug_assert_eq!(gray.len(), width * height);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(gray)?;
    f.flush()?;
    Ok(())
}

fn parse_header(path: &Path, bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fmt_err(path, &format!("expected {} magic", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(fmt_err(path, "malformed header (missing numeric field)"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fmt_err(path, "header field out of range"))?;
    }
    // Exactly one whitespace byte separates the max value from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err(path, "malformed header (no separator before payload)"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fmt_err(path, &format!("unsupported max value {maxval}, must be 255")));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err(path, "zero image extent"));
    }
    Ok((width, height, pos))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_all(path)?;
    let (width, height, offset) = parse_header(path, &bytes, b"P6")?;
    let need = width * height * 3;
    if bytes.len() - offset != need {
        return Err(fmt_err(path, &format!("payload is {} bytes, expected {need}", bytes.len() - offset)));
    }
    Ok((width, height, bytes[offset..].to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_all(path)?;
    let (width, height, offset) = parse_header(path, &bytes, b"P5")?;
    let need = width * height;
    if bytes.len() - offset != need {
        return Err(fmt_err(path, &format!("payload is {} bytes, expected {need}", bytes.len() - offset)));
    }
    Ok((width, height, bytes[offset..].to_vec()))
}
