//! Binary PPM (`P6`) and PGM (`P5`) with maxval 255.
//!
//! Writers emit `P6\n<w> <h>\n255\n` followed by the raw payload, so a file
//! written here and read back round-trips byte for byte.

use std::fs;
use std::path::Path;

use super::{Image, ImageError, Mask};

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header, ImageError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(ImageError::Parse {
            offset: 0,
            reason: format!("expected magic {}", String::from_utf8_lossy(magic)),
        });
    }
    let mut pos = 2;
    let mut tokens = [0usize; 3];
    for tok in tokens.iter_mut() {
        // whitespace and `#` comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Parse {
                offset: pos,
                reason: "expected a decimal header field".into(),
            });
        }
        *tok = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Parse {
                offset: start,
                reason: "header field out of range".into(),
            })?;
    }
    let [width, height, maxval] = tokens;
    if maxval != 255 {
        return Err(ImageError::Parse {
            offset: pos,
            reason: format!("maxval {maxval} is not 255"),
        });
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Parse {
            offset: pos,
            reason: "zero image dimension".into(),
        });
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(ImageError::Parse {
                offset: pos,
                reason: "missing whitespace before payload".into(),
            })
        }
    }
    Ok(Header {
        width,
        height,
        payload: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], hdr: &Header, channels: usize) -> Result<&'a [u8], ImageError> {
    let need = hdr.width * hdr.height * channels;
    let have = bytes.len() - hdr.payload;
    if have < need {
        return Err(ImageError::Parse {
            offset: bytes.len(),
            reason: format!("truncated payload: {have} of {need} bytes"),
        });
    }
    Ok(&bytes[hdr.payload..hdr.payload + need])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, ImageError> {
    let hdr = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &hdr, 3)?;
    Image::from_bytes(hdr.height, hdr.width, data)
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_bytes());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Mask, ImageError> {
    let hdr = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &hdr, 1)?;
    Mask::new(
        hdr.height,
        hdr.width,
        data.iter().map(|&b| b >= 128).collect(),
    )
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ImageError::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| e.at(path))
}

pub fn write_ppm(image: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|e| ImageError::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Mask, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ImageError::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| e.at(path))
}

pub fn write_pgm(mask: &Mask, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(mask)).map_err(|e| ImageError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_pixel_bytes() {
        let img = Image::new(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let mut expected = b"P6\n1 1\n255\n".to_vec();
        expected.extend([0xFF, 0x00, 0x00]);
        assert_eq!(encode_ppm(&img), expected);
        assert_eq!(decode_ppm(&expected).unwrap(), img);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mask = Mask::new(1, 2, vec![true, false]).unwrap();
        let err = decode_ppm(&encode_pgm(&mask)).unwrap_err();
        assert!(matches!(err, ImageError::Parse { offset: 0, .. }), "{err}");
        let img = Image::new(1, 1, vec![0.0; 3]).unwrap();
        assert!(decode_pgm(&encode_ppm(&img)).is_err());
    }

    #[test]
    fn bad_maxval_and_truncation() {
        let err = decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
        let err = decode_ppm(b"P6\n2 1\n255\n\x01\x02\x03").unwrap_err();
        match err {
            ImageError::Parse { offset, ref reason } => {
                assert_eq!(offset, 14);
                assert!(reason.contains("truncated"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn pgm_binarizes_at_128() {
        let bytes = b"P5\n4 1\n255\n\x00\x7f\x80\xff";
        let m = decode_pgm(bytes).unwrap();
        assert_eq!(m.bits(), &[false, false, true, true]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.to_bytes(), vec![0, 128, 255]);
    }
}
