//! Binary PGM (P5) image IO and directory ingestion.
//!
//! The sole on-disk image format: 8-bit grayscale, maxval 255. Loaded
//! pixels are normalized to [0, 1]; written pixels quantize to 255
//! levels, so a round trip moves a value by at most 1/255. Directory
//! layouts: `flat` (no class information) or `per_class_subdirs`
//! (hidden class ids assigned by sorted subdirectory name). Generated
//! datasets are written with a JSON manifest listing relative paths and
//! class ids.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use umtra_core::data::{LabeledDataset, UnlabeledDataset};
use umtra_core::Tensor;

use crate::config::DirLayout;
use crate::csvio::write_atomic;

/// Serializes one [C, H, W] image as P5 (channels averaged to gray).
pub fn pgm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 {
        bail!("PGM writer expects [C, H, W], got {shape:?}");
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for p in 0..h * w {
        let mut v = 0.0;
        for ch in 0..c {
            v += data[ch * h * w + p];
        }
        v /= c as f64;
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    write_atomic(path, &pgm_bytes(image)?)
}

/// Parses P5 bytes into a [1, H, W] tensor in [0, 1].
pub fn parse_pgm(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            bail!("{origin}: truncated PGM header");
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if token(&mut pos)? != "P5" {
        bail!("{origin}: not a binary PGM (P5) file");
    }
    let w: usize = token(&mut pos)?.parse().with_context(|| format!("{origin}: bad width"))?;
    let h: usize = token(&mut pos)?.parse().with_context(|| format!("{origin}: bad height"))?;
    let maxval: usize = token(&mut pos)?
        .parse()
        .with_context(|| format!("{origin}: bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        bail!("{origin}: maxval {maxval} outside 1..=255");
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h;
    let raster = bytes
        .get(pos..pos + need)
        .with_context(|| format!("{origin}: raster shorter than {need} bytes"))?;
    let data: Vec<f64> = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
    Tensor::new(vec![1, h, w], data).map_err(|e| anyhow::anyhow!("{origin}: {e}"))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes =
        fs::read(path).with_context(|| format!("cannot read image {}", path.display()))?;
    parse_pgm(&bytes, &path.display().to_string())
}

pub enum LoadedDataset {
    Labeled(LabeledDataset),
    Flat(UnlabeledDataset),
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("cannot read directory {}", dir.display()))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    Ok(entries)
}

/// Loads a directory of PGM files. `flat` yields an unlabeled pool;
/// `per_class_subdirs` assigns hidden class ids by sorted subdirectory
/// name. Mixed image sizes are an error naming the offending file.
pub fn load_image_dir(dir: &Path, layout: &DirLayout) -> Result<LoadedDataset> {
    let mut images: Vec<Tensor> = Vec::new();
    let mut classes: Vec<usize> = Vec::new();

    let ingest = |path: &Path, class: Option<usize>, images: &mut Vec<Tensor>, classes: &mut Vec<usize>| -> Result<()> {
        let img = read_pgm(path)?;
        if let Some(first) = images.first() {
            if first.shape() != img.shape() {
                bail!(
                    "mixed image sizes: {} is {:?}, expected {:?}",
                    path.display(),
                    img.shape(),
                    first.shape()
                );
            }
        }
        images.push(img);
        classes.push(class.unwrap_or(0));
        Ok(())
    };

    match layout {
        DirLayout::Flat => {
            for path in sorted_entries(dir)? {
                if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
                    ingest(&path, None, &mut images, &mut classes)?;
                }
            }
            if images.is_empty() {
                bail!("no samples found in {}", dir.display());
            }
            Ok(LoadedDataset::Flat(
                UnlabeledDataset::new(images, None).map_err(|e| anyhow::anyhow!("{e}"))?,
            ))
        }
        DirLayout::PerClassSubdirs => {
            let mut class_id = 0usize;
            for sub in sorted_entries(dir)? {
                if !sub.is_dir() {
                    continue;
                }
                let mut any = false;
                for path in sorted_entries(&sub)? {
                    if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
                        ingest(&path, Some(class_id), &mut images, &mut classes)?;
                        any = true;
                    }
                }
                if any {
                    class_id += 1;
                }
            }
            if images.is_empty() {
                bail!("no samples found in {}", dir.display());
            }
            Ok(LoadedDataset::Labeled(
                LabeledDataset::new(images, classes).map_err(|e| anyhow::anyhow!("{e}"))?,
            ))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    class: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    images: Vec<ManifestEntry>,
}

/// Writes a labeled dataset as per-class PGM subdirectories plus a
/// `manifest.json` listing relative paths and class ids.
pub fn write_dataset_dir(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest { images: Vec::new() };
    let mut per_class_counter: std::collections::BTreeMap<usize, usize> = Default::default();
    for i in 0..dataset.len() {
        let class = dataset.class_of(i);
        let n = per_class_counter.entry(class).or_insert(0);
        let rel = format!("class_{class:04}/img_{n:04}.pgm");
        *n += 1;
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().unwrap())?;
        write_pgm(&path, dataset.image(i))?;
        manifest.images.push(ManifestEntry { path: rel, class });
    }
    write_atomic(
        &dir.join("manifest.json"),
        crate::config::to_canonical_json(&manifest)?.as_bytes(),
    )
}
