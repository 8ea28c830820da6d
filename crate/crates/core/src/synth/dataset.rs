use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::CLASS_NAMES;
use crate::error::{Error, Result};
use crate::imaging::encode_png;
use crate::io_util::{atomic_write, read_text};
use crate::tensor::parallel::map_range;

use super::{gen_slide, load_annotations, save_annotations, Annotation, SlideSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Seed of item `index` under `master` (SplitMix64 of the pair), independent
/// of how many items are generated.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub file: String,
    pub seed: u64,
    pub grains: usize,
    pub bubbles: usize,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub n_images: usize,
    pub class_totals: BTreeMap<String, usize>,
    pub total_grains: usize,
    pub total_bubbles: usize,
    pub annotations_file: String,
    pub annotations_crc32: u32,
    pub images: Vec<ImageEntry>,
    pub spec: SlideSpec,
}

impl Manifest {
    pub fn summary(&self) -> String {
        let per_class: Vec<String> = CLASS_NAMES
            .iter()
            .map(|n| format!("{n} {}", self.class_totals.get(*n).copied().unwrap_or(0)))
            .collect();
        format!(
            "{} images, {} labeled grains ({}), {} bubbles",
            self.n_images,
            self.total_grains,
            per_class.join(", "),
            self.total_bubbles
        )
    }
}

const GENERATION_CHUNK: usize = 16;

/// Writes `n` slides as `slide_NNNN.png` plus the annotation file and the
/// manifest into `out_dir`.
pub fn gen_dataset(
    spec: &SlideSpec,
    n: usize,
    master_seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut annotations: Vec<Annotation> = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = GENERATION_CHUNK.min(n - start);
        let batch = map_range(len, |k| -> Result<_> {
            let i = start + k;
            let id = format!("slide_{i:04}");
            let seed = derive_seed(master_seed, i as u64);
            let (slide, ann) = gen_slide(spec, &id, seed)?;
            Ok((id, seed, encode_png(&slide.image), ann))
        });
        for item in batch {
            let (id, seed, png, ann) = item?;
            let file = format!("{id}.png");
            atomic_write(&out_dir.join(&file), &png)?;
            images.push(ImageEntry {
                id,
                file,
                seed,
                grains: ann.boxes.len(),
                bubbles: ann.bubbles.len(),
                crc32: crc32fast::hash(&png),
            });
            annotations.push(ann);
        }
        start += len;
    }
    let ann_path = out_dir.join(ANNOTATIONS_FILE);
    save_annotations(&annotations, &ann_path)?;
    let ann_bytes = crate::io_util::read_file(&ann_path)?;
    let mut class_totals: BTreeMap<String, usize> =
        CLASS_NAMES.iter().map(|n| (n.to_string(), 0)).collect();
    for a in &annotations {
        for (c, k) in a.class_counts().iter().enumerate() {
            *class_totals.get_mut(CLASS_NAMES[c]).expect("known class") += k;
        }
    }
    let manifest = Manifest {
        master_seed,
        n_images: n,
        total_grains: annotations.iter().map(|a| a.boxes.len()).sum(),
        total_bubbles: annotations.iter().map(|a| a.bubbles.len()).sum(),
        class_totals,
        annotations_file: ANNOTATIONS_FILE.to_string(),
        annotations_crc32: crc32fast::hash(&ann_bytes),
        images,
        spec: spec.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("plain struct");
    atomic_write(&out_dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    serde_json::from_str(&read_text(&path)?).map_err(|e| Error::Parse {
        line: e.line(),
        msg: format!("{}: {e}", path.display()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub annotation: Annotation,
    pub image_path: PathBuf,
}

/// Annotations of a dataset directory paired with their image files
/// (`<id>.png`, or `<id>.ppm` when no PNG exists).
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetItem>> {
    let anns = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
    anns.into_iter()
        .map(|annotation| {
            let png = dir.join(format!("{}.png", annotation.image));
            let ppm = dir.join(format!("{}.ppm", annotation.image));
            let image_path = if png.exists() {
                png
            } else if ppm.exists() {
                ppm
            } else {
                return Err(Error::Validation {
                    image: annotation.image.clone(),
                    msg: format!("no image file in {}", dir.display()),
                });
            };
            Ok(DatasetItem {
                annotation,
                image_path,
            })
        })
        .collect()
}
