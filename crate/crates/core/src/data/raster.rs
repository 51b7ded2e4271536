//! Raster decoding (PNG and a raw float-grid format), resampling and the
//! manifest-entry loader.
//!
//! Float-grid layout, little-endian:
//! `b"XGRD"`, dtype tag (`b'f'` = f32, `b'd'` = f64), rank (always 3),
//! height, width, channels as `u32`, then `h·w·c` samples in `h×w×c` order.

use std::io::Cursor;
use std::path::Path;

use super::manifest::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::vision::{Modality, RasterInstance};

pub const GRID_MAGIC: &[u8; 4] = b"XGRD";
const GRID_HEADER: usize = 4 + 1 + 1 + 12;
const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";
/// Decoders refuse rasters with more samples than this.
pub const MAX_SAMPLES: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridDtype {
    F32,
    F64,
}

/// A decoded raster of arbitrary size in `h×w×c` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::shape("grid", &[height, width, channels], &[data.len()]));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

fn checked_samples(h: usize, w: usize, c: usize) -> std::result::Result<usize, String> {
    let n = h.checked_mul(w).and_then(|n| n.checked_mul(c)).ok_or("dimensions overflow")?;
    if n == 0 || n > MAX_SAMPLES {
        return Err(format!("{h}×{w}×{c} is outside the supported size"));
    }
    Ok(n)
}

pub fn encode_grid(g: &Grid, dtype: GridDtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(GRID_HEADER + g.data.len() * 8);
    out.extend_from_slice(GRID_MAGIC);
    out.push(match dtype {
        GridDtype::F32 => b'f',
        GridDtype::F64 => b'd',
    });
    out.push(3);
    for d in [g.height, g.width, g.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &g.data {
        match dtype {
            GridDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            GridDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> std::result::Result<Grid, String> {
    if bytes.len() < GRID_HEADER || &bytes[..4] != GRID_MAGIC {
        return Err("missing float-grid header".into());
    }
    let width_of = match bytes[4] {
        b'f' => 4,
        b'd' => 8,
        t => return Err(format!("unknown dtype tag 0x{t:02x}")),
    };
    if bytes[5] != 3 {
        return Err(format!("rank {} is not supported", bytes[5]));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = checked_samples(h, w, c)?;
    let body = &bytes[GRID_HEADER..];
    if body.len() != n * width_of {
        return Err(format!("expected {} payload bytes, found {}", n * width_of, body.len()));
    }
    let data: Vec<f64> = if width_of == 4 {
        body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4")) as f64).collect()
    } else {
        body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect()
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err("non-finite sample".into());
    }
    Grid::new(h, w, c, data).map_err(|e| e.to_string())
}

/// 8-bit PNG in any colour type, scaled to `[0, 1]`. Alpha is composited
/// over white.
pub fn decode_png(bytes: &[u8]) -> std::result::Result<Grid, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let (color, _) = reader.output_color_type();
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = color.samples();
    checked_samples(h, w, src_channels)?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let channels = if src_channels >= 3 { 3 } else { 1 };
    let mut data = Vec::with_capacity(h * w * channels);
    for y in 0..h {
        let row = &buf[y * frame.line_size..y * frame.line_size + w * src_channels];
        for px in row.chunks_exact(src_channels) {
            let alpha = if src_channels == 2 || src_channels == 4 {
                px[src_channels - 1] as f64 / 255.0
            } else {
                1.0
            };
            for &v in &px[..channels] {
                data.push(v as f64 / 255.0 * alpha + (1.0 - alpha));
            }
        }
    }
    Grid::new(h, w, channels, data).map_err(|e| e.to_string())
}

/// 8-bit PNG (grey or RGB); samples are clamped to `[0, 1]` and rounded.
pub fn encode_png(g: &Grid) -> Result<Vec<u8>> {
    let color = match g.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::InvalidArgument(format!("cannot write a {c}-channel PNG"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, g.width as u32, g.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("png header: {e}")))?;
        let bytes: Vec<u8> = g.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::InvalidArgument(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// Dispatches on the file signature.
pub fn decode_raster(bytes: &[u8]) -> std::result::Result<Grid, String> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(GRID_MAGIC) {
        decode_grid(bytes)
    } else {
        Err("unrecognised raster format (expected PNG or float grid)".into())
    }
}

pub fn read_raster(path: &Path) -> Result<Grid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes).map_err(|reason| Error::Decode { path: path.to_path_buf(), reason })
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(g: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be non-empty".into()));
    }
    if out_h == g.height && out_w == g.width {
        return Ok(g.clone());
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(out_h, g.height), taps(out_w, g.width));
    let mut data = Vec::with_capacity(out_h * out_w * g.channels);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            for c in 0..g.channels {
                let top = g.at(y0, x0, c) * (1.0 - fx) + g.at(y0, x1, c) * fx;
                let bottom = g.at(y1, x0, c) * (1.0 - fx) + g.at(y1, x1, c) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Grid::new(out_h, out_w, g.channels, data)
}

/// Replicates grey to RGB or averages RGB to grey.
pub fn convert_channels(g: &Grid, channels: usize) -> Result<Grid> {
    match (g.channels, channels) {
        (a, b) if a == b => Ok(g.clone()),
        (1, 3) => Grid::new(g.height, g.width, 3, g.data.iter().flat_map(|&v| [v, v, v]).collect()),
        (3, 1) => Grid::new(
            g.height,
            g.width,
            1,
            g.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
        ),
        (a, b) => Err(Error::InvalidArgument(format!("cannot convert {a} channels to {b}"))),
    }
}

/// Reads, resizes to `size×size` and converts the channel count.
pub fn load_raster(manifest: &DatasetManifest, entry: &ManifestEntry, size: usize, channels: usize) -> Result<RasterInstance> {
    raster_from_file(
        &manifest.resolve(entry),
        size,
        channels,
        entry.modality,
        manifest.label_of(&entry.category)?,
        &entry.instance_id,
    )
}

/// Decodes, resizes and converts a raster file into a model input.
pub fn raster_from_file(
    path: &Path,
    size: usize,
    channels: usize,
    modality: Modality,
    label: usize,
    id: &str,
) -> Result<RasterInstance> {
    let grid = read_raster(path)?;
    let grid = convert_channels(&resize_bilinear(&grid, size, size)?, channels)?;
    if grid.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: "samples outside [0, 1]".into(),
        });
    }
    RasterInstance::new(grid.data, size, channels, modality, label, id.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn checker(n: usize) -> Grid {
        let data = (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect();
        Grid::new(n, n, 1, data).unwrap()
    }

    #[test]
    fn white_png_is_all_ones() {
        let g = Grid::new(5, 7, 3, vec![1.0; 105]).unwrap();
        let back = decode_raster(&encode_png(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn png_rgba_composites_over_white() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[0, 0, 0, 0]).unwrap();
        }
        assert_eq!(decode_png(&out).unwrap().data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let g = Grid::new(3, 3, 2, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        assert_eq!(resize_bilinear(&g, 3, 3).unwrap(), g);
    }

    #[test]
    fn checkerboard_halves_to_grey() {
        let r = resize_bilinear(&checker(8), 4, 4).unwrap();
        for v in r.data {
            assert!((v - 0.5).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let g = Grid::new(2, 2, 1, vec![0.25; 4]).unwrap();
        assert!(resize_bilinear(&g, 5, 5).unwrap().data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn grid_round_trip_and_rejections() {
        let g = Grid::new(2, 3, 1, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125]).unwrap();
        assert_eq!(decode_grid(&encode_grid(&g, GridDtype::F64)).unwrap(), g);
        assert_eq!(decode_grid(&encode_grid(&g, GridDtype::F32)).unwrap(), g);
        let mut bytes = encode_grid(&g, GridDtype::F64);
        bytes.pop();
        assert!(decode_grid(&bytes).is_err());
        bytes[4] = b'x';
        assert!(decode_grid(&bytes).is_err());
        assert!(decode_raster(b"GIF89a").is_err());
    }

    #[test]
    fn load_error_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\nnope").unwrap();
        let err = read_raster(&path).unwrap_err().to_string();
        assert!(err.contains("broken.png"), "{err}");
    }

    proptest! {
        #[test]
        fn resize_stays_within_input_range(
            h in 1usize..9, w in 1usize..9, oh in 1usize..12, ow in 1usize..12, seed in any::<u64>()
        ) {
            let data: Vec<f64> = (0..h * w).map(|i| ((i as u64 ^ seed).wrapping_mul(2654435761) % 1000) as f64 / 999.0).collect();
            let (lo, hi) = data.iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
            let g = Grid::new(h, w, 1, data).unwrap();
            let r = resize_bilinear(&g, oh, ow).unwrap();
            prop_assert!(r.data.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }
}
