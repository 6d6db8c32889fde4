//! On-disk layout: `<root>/<id>/{left.png, right.png, disp.pfm, mask.pgm, meta}`.
//! `mask.pgm` is binary 8-bit with 255 on valid pixels; `meta` holds
//! `key=value` lines.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage as PngImage};
use rayon::prelude::*;

use super::generator::{generate_sample, RgbImage, SampleMeta, StereoSample, SynthConfig};
use super::pfm::{read_pfm, write_pfm};
use crate::error::{Error, Result};
use crate::objective::GroundTruth;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image(format!("{}: {e}", path.display()))
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    let buf = PngImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    RgbImage::new(img.height() as usize, img.width() as usize, img.into_raw())
}

fn write_mask(valid: &[bool], h: usize, w: usize, path: &Path) -> Result<()> {
    let raw = valid.iter().map(|&v| if v { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    buf.save_with_format(path, ImageFormat::Pnm).map_err(|e| image_err(path, e))
}

fn read_mask(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|e| image_err(path, e))?.to_luma8())
}

fn meta_text(m: &SampleMeta) -> String {
    format!("seed={}\nscale={}\nscene={}\n", m.seed, m.scale, m.scene)
}

fn parse_meta(text: &str) -> Result<SampleMeta> {
    let mut meta = SampleMeta { seed: 0, scale: 1.0, scene: String::new() };
    let mut offset = 0;
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::format(offset, format!("expected key=value, got {line:?}")))?;
        let bad = || Error::format(offset, format!("bad value for {k}: {v:?}"));
        match k.trim() {
            "seed" => meta.seed = v.trim().parse().map_err(|_| bad())?,
            "scale" => meta.scale = v.trim().parse().map_err(|_| bad())?,
            "scene" => meta.scene = v.trim().to_string(),
            _ => {}
        }
        offset += line.len() + 1;
    }
    Ok(meta)
}

pub fn write_sample(root: &Path, id: &str, s: &StereoSample) -> Result<PathBuf> {
    let dir = root.join(id);
    fs::create_dir_all(&dir)?;
    write_png(&s.left, &dir.join("left.png"))?;
    write_png(&s.right, &dir.join("right.png"))?;
    write_pfm(&s.gt.disparity, dir.join("disp.pfm"))?;
    write_mask(&s.gt.valid, s.gt.height(), s.gt.width(), &dir.join("mask.pgm"))?;
    fs::write(dir.join("meta"), meta_text(&s.meta))?;
    Ok(dir)
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let disparity = read_pfm(dir.join("disp.pfm"))?;
    let mask_path = dir.join("mask.pgm");
    let valid = if mask_path.exists() {
        let m = read_mask(&mask_path)?;
        if (m.height() as usize, m.width() as usize) != (disparity.height, disparity.width) {
            return Err(Error::Shape(format!("{}: mask extents differ from disparity", mask_path.display())));
        }
        m.into_raw().into_iter().map(|v| v > 127).collect()
    } else {
        vec![true; disparity.data.len()]
    };
    GroundTruth::new(disparity, valid)
}

pub fn read_sample(dir: &Path) -> Result<StereoSample> {
    let left = read_image(&dir.join("left.png"))?;
    let right = read_image(&dir.join("right.png"))?;
    let gt = read_ground_truth(dir)?;
    let meta = parse_meta(&fs::read_to_string(dir.join("meta"))?)?;
    if (left.height, left.width) != (right.height, right.width) || (left.height, left.width) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!("{}: left, right and disparity extents differ", dir.display())));
    }
    Ok(StereoSample { left, right, gt, meta })
}

/// Sample ids are zero-padded indices so lexical order is numeric order.
pub fn sample_id(i: usize) -> String {
    format!("{i:06}")
}

/// Sorted subdirectory names under `root`.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for e in fs::read_dir(root)? {
        let e = e?;
        if e.file_type()?.is_dir() {
            ids.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// In-memory dataset; ids key the file-backed prior and the directory layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub samples: Vec<StereoSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples `seed + i` for `i < n`, generated in parallel.
    pub fn generate(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Self> {
        let samples = (0..n).into_par_iter().map(|i| generate_sample(seed + i as u64, cfg)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { ids: (0..n).map(sample_id).collect(), samples })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let ids = list_ids(root)?;
        let samples = ids.par_iter().map(|id| read_sample(&root.join(id))).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { ids, samples })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        self.ids.par_iter().zip(&self.samples).try_for_each(|(id, s)| write_sample(root, id, s).map(|_| ()))
    }
}

/// Counts of valid disparities in `bins` equal-width bins over `[0, max)`.
pub fn disparity_histogram(samples: &[StereoSample], bins: usize, max: f64) -> Vec<usize> {
    let mut h = vec![0; bins];
    for s in samples {
        for (&d, &v) in s.gt.disparity.data.iter().zip(&s.gt.valid) {
            if v {
                let b = ((d as f64 / max) * bins as f64) as usize;
                h[b.min(bins - 1)] += 1;
            }
        }
    }
    h
}
