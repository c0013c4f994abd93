//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit raster with `channels` interleaved samples per pixel (1 or 3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) || data.len() != width * height * channels {
            return Err(Error::Invalid(format!(
                "{width}x{height}x{channels} image cannot hold {} samples",
                data.len()
            )));
        }
        Ok(Image8 { width, height, channels, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg.to_string());
        let mut pos = 0;
        let mut token = || -> Result<String> {
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
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(bad(&format!("unsupported magic {m:?}"))),
        };
        let mut num = || -> Result<usize> { token()?.parse().map_err(|_| bad("malformed header number")) };
        let (width, height, maxval) = (num()?, num()?, num()?);
        if maxval != 255 {
            return Err(bad(&format!("maxval {maxval}, only 255 is supported")));
        }
        // exactly one whitespace byte separates the header from the raster
        let body = &bytes[(pos + 1).min(bytes.len())..];
        let want = width * height * channels;
        if body.len() != want {
            return Err(bad(&format!("expected {want} raster bytes, found {}", body.len())));
        }
        Image8::new(width, height, channels, body.to_vec())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Maps `[0, 1]` to `0..=255`, clamping outside values.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        for channels in [1, 3] {
            let data: Vec<u8> = (0..5 * 3 * channels).map(|i| (i * 37 % 256) as u8).collect();
            let img = Image8::new(5, 3, channels, data).unwrap();
            let p = dir.path().join(format!("x{channels}"));
            img.write(&p).unwrap();
            assert_eq!(Image8::read(&p).unwrap(), img);
            let mut bytes = img.encode();
            bytes.pop();
            assert!(Image8::decode(&bytes, &p).is_err());
        }
        // header comments are skipped
        let img = Image8::decode(b"P5\n# note\n2 1\n255\n\x01\x02", Path::new("c")).unwrap();
        assert_eq!(img.data, vec![1, 2]);
        assert!(Image8::decode(b"P2\n1 1\n255\n\x00", Path::new("m")).is_err());
        assert!(Image8::new(2, 2, 2, vec![0; 8]).is_err());
        assert_eq!((quantize(-1.0), quantize(0.5), quantize(2.0)), (0, 128, 255));
    }
}
