//! Binary PPM (P6, color) and PGM (P5, gray) at 8 bits per sample: the
//! engine's only image formats — dependency-free and bit-exact. Tensor
//! values in [−1, 1] map linearly onto bytes 0..=255; parse failures report
//! the exact byte offset.

use crate::error::{PgeError, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

fn byte_of(v: f64) -> u8 {
    (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

fn value_of(b: u8) -> f64 {
    2.0 * (b as f64) / 255.0 - 1.0
}

/// Write `[3,h,w]` in [−1,1] as binary PPM.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(PgeError::Shape(format!(
            "write_ppm needs [3,h,w], got {:?}",
            img.shape()
        )));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push(byte_of(img.data()[ch * plane + i]));
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Write `[h,w]` with values already in [0,1] as binary PGM.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    if map.rank() != 2 {
        return Err(PgeError::Shape(format!(
            "write_pgm needs [h,w], got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in map.data() {
        bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a binary PPM into `[3,h,w]` in [−1,1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut p = Parser::new(&bytes);
    p.expect_magic(b"P6")?;
    let w = p.ascii_uint("width")?;
    let h = p.ascii_uint("height")?;
    let maxval = p.ascii_uint("maxval")?;
    if maxval != 255 {
        return Err(p.fail(format!("unsupported maxval {maxval}, only 255")));
    }
    p.single_whitespace()?;
    let payload = p.payload(3 * w * h)?;
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = value_of(payload[3 * i + ch]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Read a binary PGM into `[h,w]` with values in [0,1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut p = Parser::new(&bytes);
    p.expect_magic(b"P5")?;
    let w = p.ascii_uint("width")?;
    let h = p.ascii_uint("height")?;
    let maxval = p.ascii_uint("maxval")?;
    if maxval != 255 {
        return Err(p.fail(format!("unsupported maxval {maxval}, only 255")));
    }
    p.single_whitespace()?;
    let payload = p.payload(w * h)?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w], data)
}

/// Netpbm header scanner tracking its byte offset for error reports.
struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn fail(&self, msg: String) -> PgeError {
        PgeError::Image {
            offset: self.pos,
            msg,
        }
    }

    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.bytes.len() < magic.len() || &self.bytes[..magic.len()] != magic {
            return Err(self.fail(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        self.pos = magic.len();
        Ok(())
    }

    /// Skip whitespace and `#` comments, then parse a decimal integer.
    fn ascii_uint(&mut self, what: &str) -> Result<usize> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_digit())
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.fail(format!("expected decimal {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are utf8");
        let v: usize = text
            .parse()
            .map_err(|_| self.fail(format!("{what} {text} out of range")))?;
        if v == 0 {
            return Err(self.fail(format!("{what} must be positive")));
        }
        Ok(v)
    }

    /// Exactly one whitespace byte separates the header from the payload.
    fn single_whitespace(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.fail("expected single whitespace before payload".into())),
        }
    }

    fn payload(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if self.bytes.len() < end {
            self.pos = self.bytes.len();
            return Err(self.fail(format!(
                "payload truncated: need {n} bytes, file ends after {}",
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }
}
