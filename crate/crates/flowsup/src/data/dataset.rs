//! On-disk dataset layout: PNG image pairs, `.flo` ground truth, and a JSON
//! manifest listing sample triples with their domain tag.
//!
//! Unlabeled (target-domain training) datasets keep their generated ground
//! truth in a `quarantine_gt/` subdirectory that is *not* referenced by the
//! manifest; the ordinary loader therefore cannot see it. Evaluation code
//! that legitimately needs held-out truth goes through
//! [`load_quarantined_gt`] explicitly.

use super::{flo, Domain, FlowField, FlowSample, Image, Mask};
use crate::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub x1: String,
    pub x2: String,
    pub flow: Option<String>,
    pub valid: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub domain: Domain,
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
}

/// A dataset directory opened for reading.
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn domain(&self) -> Domain {
        self.manifest.domain
    }

    pub fn load(&self, index: usize) -> Result<FlowSample> {
        let entry = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::Data(format!("sample index {index} out of range")))?;
        let x1 = load_png(&self.root.join(&entry.x1))?;
        let x2 = load_png(&self.root.join(&entry.x2))?;
        let flow = match &entry.flow {
            Some(p) => Some(FlowField::new(flo::read_flo(&self.root.join(p))?)?),
            None => None,
        };
        let valid = match &entry.valid {
            Some(p) => Some(load_mask(&self.root.join(p))?),
            None => None,
        };
        Ok(FlowSample {
            x1,
            x2,
            flow,
            valid,
            domain: self.manifest.domain,
        })
    }
}

/// Write samples to `dir`. With `quarantine_gt`, ground truth is stored
/// under `quarantine_gt/` and omitted from the manifest, making the dataset
/// unlabeled for every consumer except the explicit held-out accessor.
pub fn write_dataset(
    dir: &Path,
    name: &str,
    seed: u64,
    samples: &[FlowSample],
    quarantine_gt: bool,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    let domain = samples.first().map(|s| s.domain).unwrap_or(Domain::Source);
    let mut entries = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let id = format!("{i:05}");
        let x1_rel = format!("images/{id}_1.png");
        let x2_rel = format!("images/{id}_2.png");
        save_png(&dir.join(&x1_rel), &sample.x1)?;
        save_png(&dir.join(&x2_rel), &sample.x2)?;
        let (mut flow_rel, mut valid_rel) = (None, None);
        if let (Some(flow), Some(valid)) = (&sample.flow, &sample.valid) {
            let (flow_dir, valid_dir, in_manifest) = if quarantine_gt {
                ("quarantine_gt/flow", "quarantine_gt/valid", false)
            } else {
                ("flow", "valid", true)
            };
            std::fs::create_dir_all(dir.join(flow_dir))?;
            std::fs::create_dir_all(dir.join(valid_dir))?;
            let f_rel = format!("{flow_dir}/{id}.flo");
            let v_rel = format!("{valid_dir}/{id}.png");
            flo::write_flo(&dir.join(&f_rel), flow.vectors())?;
            save_mask(&dir.join(&v_rel), valid)?;
            if in_manifest {
                flow_rel = Some(f_rel);
                valid_rel = Some(v_rel);
            }
        }
        entries.push(ManifestEntry {
            id,
            x1: x1_rel,
            x2: x2_rel,
            flow: flow_rel,
            valid: valid_rel,
        });
    }
    let manifest = Manifest {
        name: name.to_string(),
        domain,
        seed,
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Held-out accessor for quarantined ground truth. Only evaluation and
/// analysis tooling may call this; training paths have no route to it.
pub fn load_quarantined_gt(dir: &Path, id: &str) -> Result<(FlowField, Mask)> {
    let flow = flo::read_flo(&dir.join(format!("quarantine_gt/flow/{id}.flo")))?;
    let valid = load_mask(&dir.join(format!("quarantine_gt/valid/{id}.png")))?;
    Ok((FlowField::new(flow)?, valid))
}

fn save_png(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = image.size();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = image.pixels();
            img.put_pixel(
                j as u32,
                i as u32,
                image::Rgb([
                    (px[[i, j, 0]] * 255.0).round() as u8,
                    (px[[i, j, 1]] * 255.0).round() as u8,
                    (px[[i, j, 2]] * 255.0).round() as u8,
                ]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let p = img.get_pixel(j as u32, i as u32);
            for c in 0..3 {
                pixels[[i, j, c]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Image::new(pixels)
}

fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.weights().dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            img.put_pixel(
                j as u32,
                i as u32,
                image::Luma([(mask.weights()[[i, j]] * 255.0).round() as u8]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let weights = Array2::from_shape_fn((h, w), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0
    });
    Mask::new(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_pair, BackgroundKind, SceneSpec};

    fn samples(n: usize, quarantined: bool) -> Vec<FlowSample> {
        (0..n)
            .map(|i| {
                let spec = SceneSpec {
                    background: BackgroundKind::Textured,
                    object_count: 1,
                    rng_seed: 40 + i as u64,
                    ..SceneSpec::default()
                };
                gen_synthetic_pair(
                    &spec,
                    if quarantined { Domain::Target } else { Domain::Source },
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn labeled_roundtrip_preserves_flow_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ss = samples(2, false);
        write_dataset(dir.path(), "src", 1, &ss, false).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        let loaded = ds.load(0).unwrap();
        // Flow is f32-quantized at generation, so .flo roundtrip is exact.
        assert_eq!(loaded.flow.unwrap(), ss[0].flow.clone().unwrap());
        assert_eq!(loaded.valid.unwrap(), ss[0].valid.clone().unwrap());
    }

    #[test]
    fn quarantined_gt_is_invisible_to_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        let ss = samples(2, true);
        write_dataset(dir.path(), "tgt", 2, &ss, true).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let loaded = ds.load(1).unwrap();
        assert!(loaded.flow.is_none());
        assert!(loaded.valid.is_none());
        // The held-out accessor still reaches it.
        let (flow, _) = load_quarantined_gt(dir.path(), "00001").unwrap();
        assert_eq!(&flow, ss[1].flow.as_ref().unwrap());
    }

    #[test]
    fn empty_dataset_has_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), "empty", 0, &[], false).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(ds.is_empty());
    }
}
