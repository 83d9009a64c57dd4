//! Binary netpbm: 8-bit P6 (RGB) and P5 (gray) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded netpbm raster: `channels` is 3 for P6 and 1 for P5, samples interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    assert!(img.channels == 1 || img.channels == 3);
    assert_eq!(img.data.len(), img.width * img.height * img.channels);
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|(offset, msg)| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T, (usize, String)> {
        Err((self.pos, msg.into()))
    }

    /// Skips whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, (usize, String)> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or((start, format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image, (usize, String)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return cur.fail("bad magic, expected P5 or P6"),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return cur.fail(format!("unsupported maxval {maxval}"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return cur.fail("expected whitespace after header"),
    }
    let need = width * height * channels;
    let have = bytes.len() - cur.pos;
    if have < need {
        cur.pos = bytes.len();
        return cur.fail(format!("truncated raster: {have} of {need} bytes"));
    }
    if have > need {
        cur.pos += need;
        return cur.fail(format!("{} trailing bytes", have - need));
    }
    Ok(Image {
        width,
        height,
        channels,
        data: bytes[cur.pos..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let img = Image {
            width: 3,
            height: 2,
            channels: 3,
            data: (0..18).collect(),
        };
        let bytes = encode(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(decode(&bytes).unwrap(), img);
    }

    #[test]
    fn comments_in_header() {
        let img = decode(b"P5\n# made by hand\n2 1\n255\n\x07\x09").unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, vec![7, 9]);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        assert_eq!(decode(b"P3\n1 1\n255\n").unwrap_err().0, 0);
        let (off, msg) = decode(b"P5\n2 2\n255\n\x00\x00").unwrap_err();
        assert_eq!(off, 13);
        assert!(msg.contains("truncated"));
        assert_eq!(decode(b"P5\nx").unwrap_err().0, 3);
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode(b"").is_err());
    }
}
