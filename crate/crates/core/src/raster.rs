//! Grayscale rasters and binary PGM (P5) I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Scanner-plane irradiance raster, row-major. Pixel `(x, y)` has its center
/// at raster coordinate `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl ScanImage {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn from_data(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::RasterMismatch(format!(
                "{}x{} raster needs {} samples, got {}",
                width,
                height,
                width as usize * height as usize,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Format("scan values must be finite and >= 0".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[self.index(x, y)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Rounds every sample to the integer grid used by a 16-bit PGM with the
    /// given `scale` (`level = round(value * scale)`, clamped to 65535).
    pub fn quantized(&self, scale: f64) -> ScanImage {
        ScanImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| ((v as f64 * scale).round().min(65535.0)) as f32)
                .collect(),
        }
    }
}

/// Writes a binary PGM. Values are written as-is (rounded, clamped to
/// `maxval`); `maxval` 255 gives 8-bit samples, anything above 16-bit
/// big-endian samples.
pub fn write_pgm(path: &Path, img: &ScanImage, maxval: u16) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_pgm_to(&mut w, img, maxval).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_pgm_to<W: Write>(w: &mut W, img: &ScanImage, maxval: u16) -> std::io::Result<()> {
    write!(w, "P5\n{} {}\n{}\n", img.width, img.height, maxval)?;
    let max = maxval as f32;
    if maxval < 256 {
        let bytes: Vec<u8> = img
            .data
            .iter()
            .map(|&v| v.round().clamp(0.0, max) as u8)
            .collect();
        w.write_all(&bytes)
    } else {
        let mut bytes = Vec::with_capacity(img.data.len() * 2);
        for &v in &img.data {
            bytes.extend_from_slice(&(v.round().clamp(0.0, max) as u16).to_be_bytes());
        }
        w.write_all(&bytes)
    }
}

pub fn read_pgm(path: &Path) -> Result<ScanImage> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pgm_from(&mut BufReader::new(f)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)
            .map_err(|e| Error::Format(e.to_string()))?
            == 0
        {
            return Err(Error::Format("truncated PGM header".into()));
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)
                .map_err(|e| Error::Format(e.to_string()))?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

pub fn read_pgm_from<R: BufRead>(r: &mut R) -> Result<ScanImage> {
    if header_token(r)? != "P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let parse = |s: String| {
        s.parse::<u32>()
            .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
    };
    let width = parse(header_token(r)?)?;
    let height = parse(header_token(r)?)?;
    let maxval = parse(header_token(r)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad PGM maxval {maxval}")));
    }
    let n = width as usize * height as usize;
    let bps = if maxval < 256 { 1 } else { 2 };
    let mut buf = vec![0u8; n * bps];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated PGM pixel data".into()))?;
    let data = if bps == 1 {
        buf.iter().map(|&b| b as f32).collect()
    } else {
        buf.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32)
            .collect()
    };
    Ok(ScanImage {
        width,
        height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_16_and_8_bit() {
        let img = ScanImage::from_data(3, 2, vec![0.0, 1.0, 300.0, 65535.0, 7.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_pgm_to(&mut buf, &img, 65535).unwrap();
        let back = read_pgm_from(&mut &buf[..]).unwrap();
        assert_eq!(back, img);

        let small = ScanImage::from_data(2, 2, vec![0.0, 1.0, 255.0, 9.0]).unwrap();
        let mut buf = Vec::new();
        write_pgm_to(&mut buf, &small, 255).unwrap();
        assert_eq!(buf.len(), "P5\n2 2\n255\n".len() + 4);
        assert_eq!(read_pgm_from(&mut &buf[..]).unwrap(), small);
    }

    #[test]
    fn pgm_header_comments_and_errors() {
        let mut data = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        data.extend_from_slice(&[4, 5]);
        let img = read_pgm_from(&mut &data[..]).unwrap();
        assert_eq!(img.data, vec![4.0, 5.0]);
        assert!(read_pgm_from(&mut &b"P2\n1 1\n255\n0"[..]).is_err());
        assert!(read_pgm_from(&mut &b"P5\n4 4\n255\n\x00"[..]).is_err());
    }

    #[test]
    fn rejects_negative_samples() {
        assert!(ScanImage::from_data(1, 1, vec![-1.0]).is_err());
        assert!(ScanImage::from_data(2, 1, vec![1.0]).is_err());
    }
}
