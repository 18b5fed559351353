//! Color images, object-ID masks and their PPM/PGM encodings.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Per-pixel object IDs, row-major; 0 is void.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    /// Quantizes a `height × width × 3` float raster in [0, 1].
    pub fn from_floats(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height * 3 {
            return Err(Error::Usage(format!(
                "{} color values for a {width}×{height} image",
                values.len()
            )));
        }
        let data = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Ok(RgbImage { width, height, data })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, maxval, body) = parse_header(bytes)?;
        if magic != "P6" || maxval != 255 {
            return Err(Error::Data(format!("expected 8-bit P6 image, found {magic} with maxval {maxval}")));
        }
        let n = width * height * 3;
        if body.len() != n {
            return Err(Error::Data(format!("PPM body holds {} bytes, expected {n}", body.len())));
        }
        Ok(RgbImage {
            width,
            height,
            data: body.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?).map_err(|e| in_file(path, e))
    }
}

impl MaskImage {
    pub fn new(width: usize, height: usize) -> Self {
        MaskImage {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.labels.len()
    }

    /// Binary mask of the pixels labeled `id`.
    pub fn region(&self, id: u16) -> Vec<bool> {
        self.labels.iter().map(|l| *l == id).collect()
    }

    /// Sorted non-void IDs present.
    pub fn ids(&self) -> Vec<u16> {
        let mut seen = vec![false; 65536];
        for l in &self.labels {
            seen[*l as usize] = true;
        }
        (1..=u16::MAX).filter(|i| seen[*i as usize]).collect()
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        encode_pgm16(self.width, self.height, &self.labels)
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let (width, height, labels) = decode_pgm(bytes)?;
        Ok(MaskImage { width, height, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?).map_err(|e| in_file(path, e))
    }
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// 16-bit big-endian P5 encoding.
pub fn encode_pgm16(width: usize, height: usize, values: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Encodes a soft mask in [0, 1] as `round(65535·M)`.
pub fn encode_soft_mask(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let q: Vec<u16> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    encode_pgm16(width, height, &q)
}

/// Decodes an 8- or 16-bit P5 image.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let (magic, width, height, maxval, body) = parse_header(bytes)?;
    if magic != "P5" {
        return Err(Error::Data(format!("expected P5 image, found {magic}")));
    }
    let n = width * height;
    let values = if maxval < 256 {
        if body.len() != n {
            return Err(Error::Data(format!("PGM body holds {} bytes, expected {n}", body.len())));
        }
        body.iter().map(|b| *b as u16).collect()
    } else {
        if body.len() != 2 * n {
            return Err(Error::Data(format!("PGM body holds {} bytes, expected {}", body.len(), 2 * n)));
        }
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok((width, height, values))
}

/// Splits a binary PNM file into magic, width, height, maxval and body.
fn parse_header(bytes: &[u8]) -> Result<(String, usize, usize, usize, &[u8])> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the body.
    pos += 1;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("bad PNM header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Data(format!("bad PNM maxval {maxval}")));
    }
    Ok((fields[0].clone(), w, h, maxval, bytes.get(pos..).unwrap_or(&[])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::from_floats(2, 1, &[0.0, 0.5, 1.0, 0.2, 2.0, -1.0]).unwrap();
        assert_eq!(img.data, vec![0, 128, 255, 51, 255, 0]);
        assert_eq!(RgbImage::decode_ppm(&img.encode_ppm()).unwrap(), img);
    }

    #[test]
    fn mask_round_trip_with_wide_ids() {
        let m = MaskImage {
            width: 3,
            height: 2,
            labels: vec![0, 1, 255, 300, 65535, 2],
        };
        assert_eq!(MaskImage::decode_pgm(&m.encode_pgm()).unwrap(), m);
        assert_eq!(m.ids(), vec![1, 2, 255, 300, 65535]);
    }

    #[test]
    fn soft_mask_quantization() {
        let bytes = encode_soft_mask(3, 1, &[0.0, 0.5, 1.0]);
        let (_, _, v) = decode_pgm(&bytes).unwrap();
        assert_eq!(v, vec![0, 32768, 65535]);
    }

    #[test]
    fn header_comments_and_8bit() {
        let mut bytes = b"P5 # comment\n2 1\n255\n".to_vec();
        bytes.extend([7, 9]);
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 1, vec![7, 9]));
    }

    #[test]
    fn malformed_inputs_are_data_errors() {
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x01"), Err(Error::Data(_))));
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\nabc"), Err(Error::Data(_))));
        assert!(matches!(RgbImage::decode_ppm(b"P6\n1"), Err(Error::Data(_))));
    }
}
