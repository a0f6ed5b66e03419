//! Binary netpbm I/O: P6 (PPM, 8-bit RGB) images and P5 (PGM, 8-bit gray)
//! label maps. Writers emit the canonical header `P6\n<w> <h>\n255\n`, so a
//! write/read/write cycle is byte-identical.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

struct HeaderReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> HeaderReader<'a> {
    /// Next whitespace-separated token, skipping `#` comments.
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.buf.len() && self.buf[self.pos] == b'#' {
                while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.buf.len() {
            return Err(Error::format(self.path, self.pos, "unexpected end of header"));
        }
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Ok(&self.buf[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(self.path, at, format!("invalid {what}")))
    }
}

fn read_header<'a>(buf: &'a [u8], path: &'a str, magic: &str) -> Result<(usize, usize, usize)> {
    let mut r = HeaderReader { buf, pos: 0, path };
    let at = r.pos;
    let got = r.token()?;
    if got != magic.as_bytes() {
        let shown = String::from_utf8_lossy(got).into_owned();
        return Err(Error::format(
            path,
            at,
            format!("unsupported format '{shown}', expected {magic}"),
        ));
    }
    let w = r.number("width")?;
    let h = r.number("height")?;
    let at = r.pos;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, at, format!("maxval {maxval}, only 255 supported")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, 0, "zero image extent"));
    }
    // exactly one whitespace byte separates header and payload
    if r.pos >= buf.len() || !buf[r.pos].is_ascii_whitespace() {
        return Err(Error::format(path, r.pos, "missing header terminator"));
    }
    Ok((w, h, r.pos + 1))
}

/// Read a binary P6 image into a channel-planar `[3, H, W]` tensor with
/// values 0..=255.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let pstr = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| Error::io(&pstr, e))?;
    let (w, h, start) = read_header(&buf, &pstr, "P6")?;
    let need = w * h * 3;
    let payload = &buf[start.min(buf.len())..];
    if payload.len() < need {
        return Err(Error::format(
            &pstr,
            buf.len(),
            format!("truncated payload: have {} of {need} bytes", payload.len()),
        ));
    }
    let mut data = vec![0.0f32; need];
    for p in 0..w * h {
        for c in 0..3 {
            data[c * w * h + p] = payload[p * 3 + c] as f32;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let pstr = path.display().to_string();
    let dims = image.dims();
    let (h, w) = match dims {
        [3, h, w] => (*h, *w),
        _ => {
            return Err(Error::Shape(format!(
                "ppm writer expects [3, H, W], got {dims:?}"
            )))
        }
    };
    let mut out = Vec::with_capacity(w * h * 3 + 32);
    write!(out, "P6\n{w} {h}\n255\n").expect("vec write");
    let d = image.data();
    for p in 0..w * h {
        for c in 0..3 {
            let v = d[c * w * h + p];
            out.push(v.clamp(0.0, 255.0).round() as u8);
        }
    }
    std::fs::write(path, &out).map_err(|e| Error::io(&pstr, e))
}

/// Read a binary P5 label map; 255 is the reserved ignore label.
pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let pstr = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| Error::io(&pstr, e))?;
    let (w, h, start) = read_header(&buf, &pstr, "P5")?;
    let need = w * h;
    let payload = &buf[start.min(buf.len())..];
    if payload.len() < need {
        return Err(Error::format(
            &pstr,
            buf.len(),
            format!("truncated payload: have {} of {need} bytes", payload.len()),
        ));
    }
    Ok(LabelMap {
        h,
        w,
        data: payload[..need].to_vec(),
    })
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let pstr = path.display().to_string();
    let mut out = Vec::with_capacity(labels.data.len() + 32);
    write!(out, "P5\n{} {}\n255\n", labels.w, labels.h).expect("vec write");
    out.extend_from_slice(&labels.data);
    std::fs::write(path, &out).map_err(|e| Error::io(&pstr, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use tempfile::tempdir;

    #[test]
    fn single_white_pixel() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("w.ppm");
        std::fs::write(&p, b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        let img = read_ppm(&p).unwrap();
        assert_eq!(img.dims(), &[3, 1, 1]);
        assert_eq!(img.data(), &[255.0, 255.0, 255.0]);
    }

    #[test]
    fn ppm_roundtrip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("r.ppm");
        let mut rng = Pcg32::new(1, 0);
        let data: Vec<f32> = (0..3 * 5 * 7).map(|_| rng.below(256) as f32).collect();
        let img = Tensor::from_vec(&[3, 5, 7], data).unwrap();
        write_ppm(&p, &img).unwrap();
        let first = std::fs::read(&p).unwrap();
        let img2 = read_ppm(&p).unwrap();
        assert_eq!(img, img2);
        write_ppm(&p, &img2).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
    }

    #[test]
    fn ascii_ppm_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        std::fs::write(&p, b"P3\n1 1\n255\n255 255 255\n").unwrap();
        let err = read_ppm(&p).unwrap_err();
        assert!(err.to_string().contains("P3"), "{err}");
    }

    #[test]
    fn big_maxval_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        std::fs::write(&p, b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").unwrap();
        let err = read_pgm(&p).unwrap_err();
        assert!(err.to_string().contains("65535"), "{err}");
    }

    #[test]
    fn truncation_names_offset() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        std::fs::write(&p, b"P6\n2 2\n255\n\xff\xff").unwrap();
        let err = read_ppm(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte") && msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn all_ignore_map_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("i.pgm");
        let lab = LabelMap {
            h: 3,
            w: 2,
            data: vec![255; 6],
        };
        write_pgm(&p, &lab).unwrap();
        let lab2 = read_pgm(&p).unwrap();
        assert_eq!(lab.data, lab2.data);
        assert!(lab2.data.iter().all(|&v| v == 255));
    }
}
