//! PNG previews and portable float maps.
//!
//! PFM files are written little-endian (`-1.0` scale). A map with `C > 1` channels that is not
//! RGB is stored as a single-channel `Pf` image of size `W × (H·C)`: channel planes stacked
//! top to bottom, channel 0 first. PFM rows run bottom to top as the format requires.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A dense `height × width × channels` map, row-major with channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[index * c..(index + 1) * c]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// First three channels (or fewer) per pixel.
    pub fn rgb(&self) -> Vec<[f64; 3]> {
        (0..self.pixel_count())
            .map(|i| {
                let p = self.pixel(i);
                std::array::from_fn(|k| p.get(k).copied().unwrap_or(0.0))
            })
            .collect()
    }

    /// The stacked single-channel layout used in PFM files (channel planes top to bottom).
    fn planes(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            out.extend((0..self.pixel_count()).map(|i| self.data[i * self.channels + c]));
        }
        out
    }

    fn from_planes(width: usize, height: usize, channels: usize, planes: &[f64]) -> Self {
        let mut m = Self::zeros(width, height, channels);
        let n = width * height;
        for c in 0..channels {
            for i in 0..n {
                m.data[i * channels + c] = planes[c * n + i];
            }
        }
        m
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png_rgb(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = rgb.iter().flat_map(|p| p.map(to_u8)).collect();
    write_png(path, width, height, png::ColorType::Rgb, &bytes)
}

pub fn save_png_gray(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = values.iter().map(|v| to_u8(*v)).collect();
    write_png(path, width, height, png::ColorType::Grayscale, &bytes)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_image_data(bytes)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.finish().map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn write_pfm(mut w: impl Write, map: &FeatureMap) -> std::io::Result<()> {
    let (kind, width, height, values) = if map.channels == 3 {
        ("PF", map.width, map.height, map.data.clone())
    } else {
        ("Pf", map.width, map.height * map.channels, map.planes())
    };
    write!(w, "{kind}\n{width} {height}\n-1.0\n")?;
    let per_row = if kind == "PF" { 3 * width } else { width };
    let mut buf = Vec::with_capacity(values.len() * 4);
    for row in values.chunks_exact(per_row).rev() {
        for v in row {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn save_pfm(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_pfm(&mut w, map).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Reads a PFM written by [`write_pfm`]; `channels` undoes the plane stacking of `Pf` files.
pub fn read_pfm(r: impl Read, channels: usize, origin: &str) -> Result<FeatureMap> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next = |r: &mut BufReader<_>, what: &str| -> Result<String> {
        line.clear();
        r.read_line(&mut line).map_err(|e| Error::io(origin, e))?;
        if line.is_empty() {
            return Err(Error::parse(origin, "header", format!("missing {what}")));
        }
        Ok(line.trim().to_string())
    };
    let kind = next(&mut r, "magic")?;
    let dims = next(&mut r, "dimensions")?;
    let scale = next(&mut r, "scale")?;
    let mut it = dims.split_whitespace().map(|s| s.parse::<usize>());
    let (width, rows) = match (it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h))) => (w, h),
        _ => return Err(Error::parse(origin, "line 2", "bad dimensions")),
    };
    let scale: f64 = scale
        .parse()
        .map_err(|_| Error::parse(origin, "line 3", "bad scale"))?;
    if scale >= 0.0 {
        return Err(Error::parse(origin, "line 3", "only little-endian PFM is supported"));
    }
    let per_px = match kind.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(Error::parse(origin, "line 1", format!("bad magic {kind:?}"))),
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(origin, e))?;
    if bytes.len() != width * rows * per_px * 4 {
        return Err(Error::parse(origin, "payload", "payload size does not match header"));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mut top_down = Vec::with_capacity(vals.len());
    for row in vals.chunks_exact(width * per_px).rev() {
        top_down.extend_from_slice(row);
    }
    if per_px == 3 {
        if channels != 3 {
            return Err(Error::parse(origin, "line 1", format!("expected {channels} channels, found 3")));
        }
        return Ok(FeatureMap {
            width,
            height: rows,
            channels: 3,
            data: top_down,
        });
    }
    if channels == 0 || rows % channels != 0 {
        return Err(Error::parse(origin, "line 2", format!("height {rows} is not a multiple of {channels}")));
    }
    Ok(FeatureMap::from_planes(width, rows / channels, channels, &top_down))
}

pub fn load_pfm(path: impl AsRef<Path>, channels: usize) -> Result<FeatureMap> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pfm(f, channels, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_multichannel() {
        let mut m = FeatureMap::zeros(3, 2, 5);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = i as f64 * 0.25 - 1.0;
        }
        let mut buf = Vec::new();
        write_pfm(&mut buf, &m).unwrap();
        assert!(buf.starts_with(b"Pf\n3 10\n-1.0\n"));
        assert_eq!(read_pfm(buf.as_slice(), 5, "mem").unwrap(), m);
        assert!(read_pfm(buf.as_slice(), 3, "mem").is_err());
    }

    #[test]
    fn pfm_round_trip_rgb_and_single() {
        for c in [1, 3] {
            let mut m = FeatureMap::zeros(4, 3, c);
            for (i, v) in m.data.iter_mut().enumerate() {
                *v = i as f64;
            }
            let mut buf = Vec::new();
            write_pfm(&mut buf, &m).unwrap();
            assert_eq!(read_pfm(buf.as_slice(), c, "mem").unwrap(), m);
        }
    }

    #[test]
    fn png_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_png_rgb(&p, 2, 1, &[[0.0, 0.5, 1.0], [2.0, -1.0, 0.25]]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
