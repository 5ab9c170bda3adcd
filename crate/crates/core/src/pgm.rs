//! Binary PGM (P5) encoding and decoding, 8-bit, maxval 255.
//!
//! Header: `P5`, whitespace, width, height, maxval (each ASCII decimal,
//! whitespace separated, `#` comments allowed), one whitespace byte, then
//! width×height raster bytes row-major top to bottom.

use std::io::{self, Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum PgmError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a P5 PGM: {0}")]
    BadMagic(String),
    #[error("malformed PGM header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0} (only 255)")]
    UnsupportedMaxval(u32),
    #[error("raster truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

/// An 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl PgmImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "raster size mismatch");
        Self {
            width,
            height,
            data,
        }
    }
}

/// Encode as binary P5 with maxval 255.
pub fn encode<W: Write>(img: &PgmImage, mut w: W) -> Result<(), PgmError> {
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

pub fn encode_to_vec(img: &PgmImage) -> Vec<u8> {
    let mut buf = Vec::with_capacity(img.data.len() + 32);
    encode(img, &mut buf).expect("writing to Vec cannot fail");
    buf
}

/// Decode a binary P5 stream.
pub fn decode<R: Read>(mut r: R) -> Result<PgmImage, PgmError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_bytes(&bytes)
}

pub fn decode_bytes(bytes: &[u8]) -> Result<PgmImage, PgmError> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        let seen = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(PgmError::BadMagic(seen));
    }
    let mut pos = 2;
    let width = read_header_int(bytes, &mut pos)?;
    let height = read_header_int(bytes, &mut pos)?;
    let maxval = read_header_int(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(PgmError::UnsupportedMaxval(maxval as u32));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::BadHeader("missing raster separator".into())),
    }
    let expected = width * height;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            got: raster.len(),
        });
    }
    Ok(PgmImage {
        width,
        height,
        data: raster[..expected].to_vec(),
    })
}

/// Read the next decimal header token, skipping whitespace and `#` comments.
fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize, PgmError> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(b) => {
                return Err(PgmError::BadHeader(format!(
                    "unexpected byte 0x{b:02x} in header"
                )))
            }
            None => return Err(PgmError::BadHeader("unexpected end of header".into())),
        }
    }
    let mut value: usize = 0;
    let mut any = false;
    while let Some(&b) = bytes.get(*pos) {
        if b.is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| PgmError::BadHeader("header value overflow".into()))?;
            *pos += 1;
            any = true;
        } else {
            break;
        }
    }
    if !any {
        return Err(PgmError::BadHeader("expected digits".into()));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encodes_expected_header_and_raster() {
        let img = PgmImage::new(3, 2, vec![0, 127, 255, 10, 20, 30]);
        let bytes = encode_to_vec(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 127, 255, 10, 20, 30]);
    }

    #[test]
    fn decode_skips_comments() {
        let mut bytes = b"P5\n# a comment\n2 2\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        let img = decode_bytes(&bytes).unwrap();
        assert_eq!(img.width, 2);
        assert_eq!(img.height, 2);
        assert_eq!(img.data, vec![1, 2, 3, 4]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(matches!(decode_bytes(b"P6\n1 1\n255\nx"), Err(PgmError::BadMagic(_))));
        assert!(matches!(
            decode_bytes(b"P5\n2 2\n255\n\x01\x02"),
            Err(PgmError::Truncated { expected: 4, got: 2 })
        ));
        assert!(matches!(
            decode_bytes(b"P5\n1 1\n65535\n\x01\x02"),
            Err(PgmError::UnsupportedMaxval(65535))
        ));
    }

    proptest! {
        #[test]
        fn round_trips(w in 1usize..12, h in 1usize..12, seed in 0u8..) {
            let data: Vec<u8> = (0..w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let img = PgmImage::new(w, h, data);
            let decoded = decode_bytes(&encode_to_vec(&img)).unwrap();
            prop_assert_eq!(decoded, img);
        }
    }
}
