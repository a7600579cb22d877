use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};

use super::{FrameDataset, FrameRecord, CHANNELS, FRAME_LEN, FRAME_SIZE};
use crate::error::{Error, Result};

/// Resizes so the shorter side is 64 (bilinear), then center-crops to 64x64.
/// For landscape frames this is "height 64, then crop the middle columns".
pub(crate) fn preprocess(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let side = FRAME_SIZE as u32;
    let resized;
    let src = if (w, h) == (side, side) {
        img
    } else {
        let scale = (f64::from(side) / f64::from(h)).max(f64::from(side) / f64::from(w));
        let nw = ((f64::from(w) * scale).round() as u32).max(side);
        let nh = ((f64::from(h) * scale).round() as u32).max(side);
        resized = imageops::resize(img, nw, nh, FilterType::Triangle);
        &resized
    };
    let x0 = (src.width() - side) / 2;
    let y0 = (src.height() - side) / 2;
    let mut out = vec![0.0f32; FRAME_LEN];
    let plane = FRAME_SIZE * FRAME_SIZE;
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let Rgb(px) = *src.get_pixel(x0 + x as u32, y0 + y as u32);
            for c in 0..CHANNELS {
                out[c * plane + y * FRAME_SIZE + x] = f32::from(px[c]) / 255.0;
            }
        }
    }
    out
}

pub(crate) fn to_rgb(pixels: &[f32]) -> RgbImage {
    let plane = FRAME_SIZE * FRAME_SIZE;
    RgbImage::from_fn(FRAME_SIZE as u32, FRAME_SIZE as u32, |x, y| {
        let i = y as usize * FRAME_SIZE + x as usize;
        let q = |c: usize| (pixels[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

/// `filename,label` rows (header required) into a filename lookup.
pub fn read_labels(path: &Path) -> Result<HashMap<String, bool>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "filename" || &headers[1] != "label" {
        return Err(Error::format(path, "expected header `filename,label`"));
    }
    let mut labels = HashMap::new();
    for row in reader.records() {
        let row = row?;
        let label = match row[1].trim() {
            "0" => false,
            "1" => true,
            other => return Err(Error::format(path, format!("label must be 0 or 1, got `{other}`"))),
        };
        labels.insert(row[0].trim().to_string(), label);
    }
    Ok(labels)
}

/// Loads every `.png` in `dir` in lexicographic order. A frame's index is
/// its position in that order, so undecodable files leave gaps and are
/// counted in [`FrameDataset::skipped`].
pub fn load_frames(dir: &Path, labels_file: Option<&Path>) -> Result<FrameDataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if Path::new(&name)
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            names.push(name);
        }
    }
    names.sort();

    let mut labels = match labels_file {
        Some(p) => Some(read_labels(p)?),
        None => None,
    };
    if let Some(map) = &labels {
        let mut missing: Vec<&String> = map.keys().filter(|k| names.binary_search(k).is_err()).collect();
        missing.sort();
        if let Some(first) = missing.first() {
            return Err(Error::invalid(format!(
                "labels reference {} missing file(s), first `{first}`",
                missing.len()
            )));
        }
    }

    let mut frames = Vec::with_capacity(names.len());
    let mut skipped = 0;
    for (index, name) in names.into_iter().enumerate() {
        let path = dir.join(&name);
        let img = match image::open(&path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping unreadable frame {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let label = labels.as_mut().and_then(|m| m.remove(&name));
        frames.push(FrameRecord {
            index,
            filename: name,
            pixels: preprocess(&img),
            label,
        });
    }
    let mut dataset = FrameDataset::new(frames)?;
    dataset.skipped = skipped;
    Ok(dataset)
}

/// Writes each frame as an 8-bit PNG named after its `filename`.
pub fn write_frames(dataset: &FrameDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in dataset.frames() {
        let path = dir.join(&f.filename);
        to_rgb(&f.pixels)
            .save(&path)
            .map_err(|e| Error::format(&path, e.to_string()))?;
    }
    Ok(())
}

/// `filename,label` for every labelled frame.
pub fn write_labels(dataset: &FrameDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["filename", "label"])?;
    for f in dataset.frames() {
        if let Some(l) = f.label {
            w.write_record([f.filename.as_str(), if l { "1" } else { "0" }])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Audit manifest `index,filename,split,label`; label is blank when unknown.
pub fn write_manifest(dataset: &FrameDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "filename", "split", "label"])?;
    for (pos, f) in dataset.frames().iter().enumerate() {
        let label = match f.label {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        w.write_record([
            f.index.to_string().as_str(),
            f.filename.as_str(),
            dataset.split_of(pos).as_str(),
            label,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
