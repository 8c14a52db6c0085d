//! Dataset directories: binary PPM images, PGM masks, and a JSON manifest
//! with a CRC32 per file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{derive_image_labels, DatasetConfig, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub labels: Vec<u8>,
    pub image_crc32: u32,
    pub mask_crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub samples: Vec<ManifestEntry>,
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, maxval 255) from a channel-major RGB buffer.
pub fn encode_ppm(width: usize, height: usize, image: &[f32]) -> Vec<u8> {
    let plane = width * height;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(image[c * plane + i]));
        }
    }
    out
}

/// Binary PGM (P5, maxval 255) holding one byte per pixel.
pub fn encode_pgm(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], what: &str) -> Result<Header> {
    let fail = |offset: usize, msg: &str| Error::Format {
        what: what.to_string(),
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fail(0, &format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fail(pos, "header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "expected a single whitespace byte after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail(2, "zero image extent"));
    }
    if maxval != 255 {
        return Err(fail(pos - 1, &format!("only maxval 255 is supported, got {maxval}")));
    }
    Ok(Header {
        width,
        height,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize, what: &str) -> Result<&'a [u8]> {
    let expected = h.data_start + channels * h.width * h.height;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what: what.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            what: what.to_string(),
            offset: expected,
            msg: "trailing bytes after pixel data".into(),
        });
    }
    Ok(&bytes[h.data_start..])
}

/// Returns `(width, height, channel-major RGB in [0,1])`.
pub fn decode_ppm(bytes: &[u8], what: &str) -> Result<(usize, usize, Vec<f32>)> {
    let h = parse_header(bytes, b"P6", what)?;
    let data = payload(bytes, &h, 3, what)?;
    let plane = h.width * h.height;
    let mut image = vec![0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            image[c * plane + i] = data[3 * i + c] as f32 / 255.0;
        }
    }
    Ok((h.width, h.height, image))
}

pub fn decode_pgm(bytes: &[u8], what: &str) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes, b"P5", what)?;
    let data = payload(bytes, &h, 1, what)?;
    Ok((h.width, h.height, data.to_vec()))
}

/// Writes every sample plus `manifest.json` into `dir` (created if needed).
pub fn write_dataset(dir: &Path, config: &DatasetConfig, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (image, mask) = (format!("{i:05}.ppm"), format!("{i:05}.pgm"));
        let ppm = encode_ppm(s.width, s.height, &s.image);
        let pgm = encode_pgm(s.width, s.height, &s.mask);
        fs::write(dir.join(&image), &ppm)?;
        fs::write(dir.join(&mask), &pgm)?;
        entries.push(ManifestEntry {
            image,
            mask,
            labels: s.labels.clone(),
            image_crc32: crc32fast::hash(&ppm),
            mask_crc32: crc32fast::hash(&pgm),
        });
    }
    let manifest = Manifest {
        config: config.clone(),
        samples: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_checked(dir: &Path, name: &str, expected: u32) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path)?;
    let actual = crc32fast::hash(&bytes);
    if actual != expected {
        return Err(Error::Checksum {
            path: path.display().to_string(),
            expected,
            actual,
        });
    }
    Ok(bytes)
}

/// Reads a directory written by [`write_dataset`], verifying checksums and
/// label vectors.
pub fn read_dataset(dir: &Path) -> Result<(DatasetConfig, Vec<Sample>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read(&manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let ppm = read_checked(dir, &e.image, e.image_crc32)?;
        let pgm = read_checked(dir, &e.mask, e.mask_crc32)?;
        let (w, h, image) = decode_ppm(&ppm, &e.image)?;
        let (mw, mh, mask) = decode_pgm(&pgm, &e.mask)?;
        if (mw, mh) != (w, h) {
            return Err(Error::Format {
                what: e.mask.clone(),
                offset: 0,
                msg: format!("mask is {mw}x{mh} but image is {w}x{h}"),
            });
        }
        let labels = derive_image_labels(&mask);
        if labels != e.labels {
            return Err(Error::Format {
                what: MANIFEST_FILE.into(),
                offset: 0,
                msg: format!("labels of {} disagree with its mask", e.image),
            });
        }
        samples.push(Sample {
            height: h,
            width: w,
            image,
            mask,
            labels,
        });
    }
    Ok((manifest.config, samples))
}
