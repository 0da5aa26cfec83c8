//! Sequence directories: `visible/`, `infrared/`, `groundtruth.txt` and an
//! optional per-frame `attributes.txt`.
//!
//! Frames are paired by sorted file name. Pixels load as 8-bit values scaled
//! to `[0, 1]`; standardization happens when crops are taken.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::eval::synth::{Attribute, SequenceRecord};
use crate::image::{Image, Pair};

pub const VISIBLE: &str = "visible";
pub const INFRARED: &str = "infrared";
pub const GROUNDTRUTH: &str = "groundtruth.txt";
pub const ATTRIBUTES: &str = "attributes.txt";

fn seq_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Sequence {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(seq_err(dir, "missing frame folder"));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(w as usize, h as usize, data)
}

/// Writes an 8-bit PNG. Values are clamped to `[0, 1]` and rounded.
pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    let raw: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Parses `x,y,w,h` lines; commas, tabs or spaces separate values.
pub fn parse_groundtruth(text: &str, path: &Path) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        let vals: Vec<f64> = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| seq_err(path, format!("line {}: {e} in `{s}`", i + 1)))?;
        if vals.len() != 4 {
            return Err(seq_err(path, format!("line {}: expected 4 values, got {}", i + 1, vals.len())));
        }
        out.push(BBox::new(vals[0], vals[1], vals[2], vals[3]));
    }
    Ok(out)
}

fn parse_attributes(text: &str, path: &Path) -> Result<Vec<Vec<Attribute>>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| Attribute::from_tag(t).ok_or_else(|| seq_err(path, format!("line {}: unknown attribute `{t}`", i + 1))))
                .collect()
        })
        .collect()
}

pub fn load_sequence(dir: &Path) -> Result<SequenceRecord> {
    let vis = frame_files(&dir.join(VISIBLE))?;
    let inf = frame_files(&dir.join(INFRARED))?;
    if vis.len() != inf.len() {
        return Err(seq_err(dir, format!("{} visible frames but {} infrared frames", vis.len(), inf.len())));
    }
    let gt_path = dir.join(GROUNDTRUTH);
    let gt = parse_groundtruth(&std::fs::read_to_string(&gt_path).map_err(|e| seq_err(&gt_path, e.to_string()))?, &gt_path)?;
    if gt.len() != vis.len() {
        return Err(seq_err(dir, format!("{} frames but {} ground-truth boxes", vis.len(), gt.len())));
    }
    let mut frames = Vec::with_capacity(vis.len());
    for (v, i) in vis.iter().zip(&inf) {
        frames.push(Pair::new(read_image(v)?, read_image(i)?));
    }
    let attr_path = dir.join(ATTRIBUTES);
    let attributes = if attr_path.exists() {
        let mut a = parse_attributes(&std::fs::read_to_string(&attr_path)?, &attr_path)?;
        if a.len() > frames.len() {
            return Err(seq_err(&attr_path, "more attribute lines than frames"));
        }
        a.resize(frames.len(), Vec::new());
        a
    } else {
        vec![Vec::new(); frames.len()]
    };
    let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    let rec = SequenceRecord {
        name,
        frames,
        gt,
        attributes,
    };
    rec.validate()?;
    Ok(rec)
}

/// Writes the sequence in the layout [`load_sequence`] reads. Box values use
/// the shortest exact decimal form.
pub fn write_sequence(seq: &SequenceRecord, dir: &Path) -> Result<()> {
    seq.validate()?;
    let vis = dir.join(VISIBLE);
    let inf = dir.join(INFRARED);
    std::fs::create_dir_all(&vis)?;
    std::fs::create_dir_all(&inf)?;
    for (i, f) in seq.frames.iter().enumerate() {
        let name = format!("{:06}.png", i + 1);
        write_image(&f.rgb, &vis.join(&name))?;
        write_image(&f.tir, &inf.join(&name))?;
    }
    let gt: String = seq.gt.iter().map(|b| format!("{},{},{},{}\n", b.x, b.y, b.w, b.h)).collect();
    std::fs::write(dir.join(GROUNDTRUTH), gt)?;
    if seq.attributes.iter().any(|a| !a.is_empty()) {
        let text: String = seq
            .attributes
            .iter()
            .map(|a| a.iter().map(|t| t.tag()).collect::<Vec<_>>().join(",") + "\n")
            .collect();
        std::fs::write(dir.join(ATTRIBUTES), text)?;
    }
    Ok(())
}
