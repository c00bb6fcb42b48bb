//! Portable-pixmap raster files with a text sidecar.
//!
//! Three-channel images are written as binary PPM (`P6`), six-channel
//! composites as PAM (`P7`, depth 6). Samples are always 8-bit on disk. The
//! sidecar `<file>.hdr` records the role and whether the samples are to be read
//! back normalized (divided by 255). Files without a sidecar are read as raw
//! 8-bit PPL.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::preprocess::{RasterImage, Role, Samples};

/// Sidecar path for a raster file: the file name with `.hdr` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".hdr");
    path.with_file_name(name)
}

/// Encodes pixel data as PPM or PAM. Normalized samples are quantized to 8 bits.
pub fn encode_pnm(image: &RasterImage) -> Vec<u8> {
    let q = image.quantize();
    let Samples::Bytes(data) = q.samples() else {
        unreachable!("quantize yields bytes")
    };
    let (w, h) = (image.width(), image.height());
    let mut out = if image.channels() == 3 {
        format!("P6\n{w} {h}\n255\n").into_bytes()
    } else {
        format!(
            "P7\nWIDTH {w}\nHEIGHT {h}\nDEPTH {}\nMAXVAL 255\nTUPLTYPE {}\nENDHDR\n",
            image.channels(),
            image.role().name().to_ascii_uppercase()
        )
        .into_bytes()
    };
    out.extend_from_slice(data);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Raster("truncated header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Raster("non-ASCII header".into()))
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::Raster(format!("expected a number in header, found {tok:?}")))
    }
}

/// Decoded pixmap: `(height, width, depth, samples)`.
pub fn decode_pnm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.token()?;
    let (w, h, depth, maxval) = match magic {
        "P6" => {
            let w = cur.number()?;
            let h = cur.number()?;
            let maxval = cur.number()?;
            (w, h, 3, maxval)
        }
        "P7" => {
            let (mut w, mut h, mut depth, mut maxval) = (None, None, None, None);
            loop {
                match cur.token()? {
                    "ENDHDR" => break,
                    "WIDTH" => w = Some(cur.number()?),
                    "HEIGHT" => h = Some(cur.number()?),
                    "DEPTH" => depth = Some(cur.number()?),
                    "MAXVAL" => maxval = Some(cur.number()?),
                    "TUPLTYPE" => {
                        cur.token()?;
                    }
                    other => return Err(Error::Raster(format!("unknown PAM header field {other:?}"))),
                }
            }
            let missing = || Error::Raster("PAM header lacks WIDTH/HEIGHT/DEPTH/MAXVAL".into());
            (
                w.ok_or_else(missing)?,
                h.ok_or_else(missing)?,
                depth.ok_or_else(missing)?,
                maxval.ok_or_else(missing)?,
            )
        }
        other => return Err(Error::Raster(format!("unsupported magic {other:?}"))),
    };
    if maxval != 255 {
        return Err(Error::Raster(format!(
            "only 8-bit rasters are supported, MAXVAL is {maxval}"
        )));
    }
    // Exactly one whitespace byte separates the header from the payload.
    cur.pos += 1;
    let expected = w * h * depth;
    let payload = bytes.get(cur.pos..).unwrap_or_default();
    if payload.len() != expected {
        return Err(Error::Raster(format!(
            "payload holds {} bytes, {w}x{h}x{depth} needs {expected}",
            payload.len()
        )));
    }
    Ok((h, w, depth, payload.to_vec()))
}

fn sidecar_text(image: &RasterImage) -> String {
    format!(
        "# concnn raster header\nrole={}\nnormalized={}\n",
        image.role(),
        image.is_normalized()
    )
}

fn parse_sidecar(text: &str) -> Result<(Role, bool)> {
    let (mut role, mut normalized) = (None, None);
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Raster(format!("malformed sidecar line {line:?}")))?;
        match key.trim() {
            "role" => role = Some(value.parse::<Role>()?),
            "normalized" => {
                normalized = Some(
                    value
                        .trim()
                        .parse::<bool>()
                        .map_err(|_| Error::Raster(format!("bad normalized flag {value:?}")))?,
                )
            }
            other => return Err(Error::Raster(format!("unknown sidecar key {other:?}"))),
        }
    }
    match (role, normalized) {
        (Some(r), Some(n)) => Ok((r, n)),
        _ => Err(Error::Raster("sidecar must set role and normalized".into())),
    }
}

/// Writes the pixmap and its sidecar.
pub fn write_raster(path: &Path, image: &RasterImage) -> Result<()> {
    fs::write(path, encode_pnm(image)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, sidecar_text(image)).map_err(|e| Error::io(&side, e))
}

/// Reads a raster written by [`write_raster`], or a bare PPM as raw PPL.
pub fn read_raster(path: &Path) -> Result<RasterImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, depth, data) = decode_pnm(&bytes).map_err(|e| Error::Raster(format!("{}: {e}", path.display())))?;
    let side = sidecar_path(path);
    let (role, normalized) = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        parse_sidecar(&text)?
    } else {
        (Role::Ppl, false)
    };
    if role.channels() != depth {
        return Err(Error::Raster(format!(
            "{}: {role} images have {} channels but the file has {depth}",
            path.display(),
            role.channels()
        )));
    }
    let samples = if normalized {
        Samples::Unit(data.iter().map(|&b| b as f64 / 255.0).collect())
    } else {
        Samples::Bytes(data)
    };
    RasterImage::new(h, w, role, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::normalize;
    use proptest::prelude::*;

    #[test]
    fn ppm_header_layout() {
        let img = RasterImage::from_bytes(1, 2, Role::Ppl, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(encode_pnm(&img), b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06".to_vec());
    }

    #[test]
    fn decode_with_comments() {
        let bytes = b"P6\n# made by hand\n1 1\n255\n\x07\x08\x09";
        assert_eq!(decode_pnm(bytes).unwrap(), (1, 1, 3, vec![7, 8, 9]));
    }

    #[test]
    fn decode_rejects_truncation() {
        assert!(decode_pnm(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(decode_pnm(b"P6\n2").is_err());
        assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_pnm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn file_round_trip_all_roles() {
        let dir = tempfile::tempdir().unwrap();
        let composite = RasterImage::from_bytes(2, 3, Role::Composite6, (0..36).collect()).unwrap();
        let ci = normalize(&RasterImage::from_bytes(2, 2, Role::Ci, (0..12).map(|v| v * 20).collect()).unwrap());
        let xpl = RasterImage::from_bytes(3, 1, Role::Xpl, (0..9).collect()).unwrap();
        for (i, img) in [composite, ci, xpl].into_iter().enumerate() {
            let path = dir.path().join(format!("img{i}.pnm"));
            write_raster(&path, &img).unwrap();
            assert_eq!(read_raster(&path).unwrap(), img);
        }
    }

    #[test]
    fn bare_ppm_reads_as_raw_ppl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.ppm");
        fs::write(&path, b"P6\n1 1\n255\n\x10\x20\x30").unwrap();
        let img = read_raster(&path).unwrap();
        assert_eq!(img.role(), Role::Ppl);
        assert_eq!(img.samples(), &Samples::Bytes(vec![16, 32, 48]));
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(h in 1usize..6, w in 1usize..6, six in any::<bool>(), seed in any::<u8>()) {
            let role = if six { Role::Composite6 } else { Role::Xpl };
            let n = h * w * role.channels();
            let data: Vec<u8> = (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let img = RasterImage::from_bytes(h, w, role, data.clone()).unwrap();
            prop_assert_eq!(decode_pnm(&encode_pnm(&img)).unwrap(), (h, w, role.channels(), data));
        }
    }
}
