//! 8-bit RGB PNG files and dataset manifests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::DegradationKind;
use crate::tensor::Tensor;

/// `v / 255` per channel, returned as `[3, H, W]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let image_err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = decoder.read_info().map_err(image_err)?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Rgb || depth != png::BitDepth::Eight {
        return Err(Error::NonRgb {
            path: path.to_path_buf(),
            detail: format!("{color:?} at {depth:?} bits"),
        });
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(image_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Clamps to `[0, 1]` and rounds half up to the nearest `1/255`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a `[3, H, W]` (or `[1, 3, H, W]`) tensor as an 8-bit RGB PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match *image.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => {
            return Err(Error::invalid(
                "save_png",
                format!("expected [3, H, W], got {:?}", image.shape()),
            ))
        }
    };
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push(quantize(d[c * h * w + i]));
        }
    }
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |source| Error::ImageEncode {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub kind: DegradationKind,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.index, e.seed, e.kind))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |what: &str| Error::Config(format!("manifest line {}: {what}", n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad("expected index<TAB>seed<TAB>kind"));
            }
            Ok(ManifestEntry {
                index: fields[0].parse().map_err(|_| bad("bad index"))?,
                seed: fields[1].parse().map_err(|_| bad("bad seed"))?,
                kind: fields[2].parse().map_err(|_| bad("bad kind"))?,
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(format_manifest(entries).as_bytes())
        .map_err(|e| Error::file(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_manifest(&text)
}
