//! Binary PGM (P5) images.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PgmError {
    #[error("not a binary PGM (P5) file")]
    Magic,
    #[error("truncated or malformed header")]
    Header,
    #[error("maxval {0} outside 1..=65535")]
    Maxval(u32),
    #[error("pixel data has {got} bytes, expected {want}")]
    Data { got: usize, want: usize },
}

/// Decoded PGM samples with their maxval.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub samples: Vec<u16>,
}

impl Gray {
    pub fn to_unit(&self) -> Vec<f64> {
        let m = self.maxval as f64;
        self.samples.iter().map(|&s| s as f64 / m).collect()
    }
}

/// 8-bit image for writing.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray8 {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; width * height] }
    }

    /// Quantizes values in `[0,1]` (clamped) to 0..=255.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), width * height);
        let pixels = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self { width, height, pixels }
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn decode(bytes: &[u8]) -> Result<Gray, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::Magic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for f in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(PgmError::Header),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(PgmError::Header)?;
    }
    // single whitespace byte before the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError::Header);
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(PgmError::Maxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(PgmError::Header);
    }
    let n = width as usize * height as usize;
    let raster = &bytes[pos..];
    let samples = if maxval < 256 {
        if raster.len() < n {
            return Err(PgmError::Data { got: raster.len(), want: n });
        }
        raster[..n].iter().map(|&b| b as u16).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(PgmError::Data { got: raster.len(), want: 2 * n });
        }
        raster[..2 * n].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(Gray { width: width as usize, height: height as usize, maxval, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_8bit() {
        let img = Gray8 { width: 3, height: 2, pixels: vec![0, 1, 2, 128, 254, 255] };
        let back = decode(&img.encode()).unwrap();
        assert_eq!((back.width, back.height, back.maxval), (3, 2, 255));
        assert_eq!(back.samples, vec![0, 1, 2, 128, 254, 255]);
    }

    #[test]
    fn header_comments_and_16bit() {
        let mut bytes = b"P5 # comment\n2 1\n# another\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x01]);
        let g = decode(&bytes).unwrap();
        assert_eq!(g.samples, vec![65535, 1]);
        assert_eq!(g.to_unit()[0], 1.0);
    }

    #[test]
    fn malformed_inputs() {
        assert_eq!(decode(b"P2\n1 1\n255\n0"), Err(PgmError::Magic));
        assert_eq!(decode(b"P5\n2 2\n255\n\x00"), Err(PgmError::Data { got: 1, want: 4 }));
        assert_eq!(decode(b"P5\n2 2\n0\n\x00"), Err(PgmError::Maxval(0)));
        assert_eq!(decode(b"P5\n2"), Err(PgmError::Header));
    }
}
