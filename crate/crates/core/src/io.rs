//! Image files (8-bit PNG, float PFM) and flat `key = value` configs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(Error::shape("image", &[img.shape()])),
    }
}

/// Writes a `[3, H, W]` image with values clamped to `[0, 1]`.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = image_dims(img)?;
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((img.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::Parse {
        what: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |reason: String| Error::Parse {
        what: path.display().to_string(),
        reason,
    };
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| parse_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| parse_err(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(parse_err("expected 8-bit RGB".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = h * w;
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        buf[3 * p + c] as f64 / 255.0
    }))
}

/// Colour PFM, little-endian, rows stored bottom to top.
pub fn write_pfm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = image_dims(img)?;
    let plane = h * w;
    let mut bytes = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    for row in (0..h).rev() {
        for col in 0..w {
            for c in 0..3 {
                bytes.extend((img.data()[c * plane + row * w + col] as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |reason: &str| Error::Parse {
        what: path.display().to_string(),
        reason: reason.into(),
    };
    // Three whitespace-terminated header tokens, then the payload.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad header"))?);
    }
    pos += 1;
    if tokens.len() != 4 || tokens[0] != "PF" {
        return Err(err("expected a colour PFM header"));
    }
    let w: usize = tokens[1].parse().map_err(|_| err("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| err("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| err("bad scale"))?;
    let payload = bytes.get(pos..).ok_or_else(|| err("truncated"))?;
    if payload.len() != 12 * w * h {
        return Err(err("payload size does not match header"));
    }
    let read = |i: usize| {
        let b: [u8; 4] = payload[4 * i..4 * i + 4].try_into().unwrap();
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let plane = h * w;
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        let (row, col) = (p / w, p % w);
        read(3 * ((h - 1 - row) * w + col) + c) as f64
    }))
}

/// Flat `key = value` configuration with `#` comments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: "config".into(),
                reason: format!("line {}: expected `key = value`", n + 1),
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| Error::Parse {
                what: format!("config key `{key}`"),
                reason: format!("`{v}`: {e}"),
            }),
        }
    }

    /// Fills in `key` with `default` if absent, then returns its value.
    /// Used so that snapshots record every value a run actually used.
    pub fn resolve<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key, default)?;
        self.values.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let c = Config::parse("# comment\nseed = 7\n lr=0.001 # trailing\n\nmode = det\n").unwrap();
        assert_eq!(c.get("seed", 0u64).unwrap(), 7);
        assert_eq!(c.get("lr", 0.0).unwrap(), 0.001);
        assert_eq!(c.get("missing", 3usize).unwrap(), 3);
        assert!(c.get::<u64>("mode", 0).is_err());
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        assert!(Config::parse("novalue").is_err());
    }

    #[test]
    fn image_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn([3, 4, 5], |i| (i % 17) as f64 / 16.0);
        let png_path = dir.path().join("a.png");
        write_png(&png_path, &img).unwrap();
        let back = read_png(&png_path).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);

        let pfm_path = dir.path().join("a.pfm");
        write_pfm(&pfm_path, &img).unwrap();
        let back = read_pfm(&pfm_path).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-7);
    }
}
