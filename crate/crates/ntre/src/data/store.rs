//! In-memory dataset loaded from the standard directory layout:
//! `classes.txt` (line index = class_id), `images/<id>.png` (8-bit RGB),
//! `masks/<id>.png` (8-bit gray, pixel value = class_id + 1, 0 = unlabeled),
//! `index.json` (id → class ids present in the mask). The same layout serves
//! the synthetic generator and externally converted real data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::BinaryMask;

use super::types::ImageMaskPair;

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    /// Per-pixel class labels, value = class_id + 1, 0 = unlabeled.
    pub labels: Vec<u8>,
    /// Classes annotated in this sample's mask.
    pub classes: Vec<usize>,
}

impl Sample {
    pub fn binary_mask_for(&self, class_id: usize) -> BinaryMask {
        let want = (class_id + 1) as u8;
        BinaryMask {
            h: self.image.h,
            w: self.image.w,
            data: self.labels.iter().map(|&v| u8::from(v == want)).collect(),
        }
    }

    pub fn pair_for(&self, class_id: usize) -> Result<ImageMaskPair> {
        ImageMaskPair::new(
            self.image.clone(),
            self.binary_mask_for(class_id),
            class_id,
            self.id.clone(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    /// class_id → indices into `samples`, in id order.
    pub by_class: BTreeMap<usize, Vec<usize>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let classes_path = dir.join("classes.txt");
        let classes_raw =
            fs::read_to_string(&classes_path).map_err(|e| Error::io(&classes_path, e))?;
        let classes: Vec<String> = classes_raw
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if classes.is_empty() {
            return Err(Error::Dataset("classes.txt holds no classes".into()));
        }

        let index_path = dir.join("index.json");
        let index_raw = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: BTreeMap<String, Vec<usize>> = serde_json::from_str(&index_raw)
            .map_err(|e| Error::Dataset(format!("index.json parse: {e}")))?;

        let mut samples = Vec::with_capacity(index.len());
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (id, sample_classes) in &index {
            let img_path = dir.join("images").join(format!("{id}.png"));
            let img = image::open(&img_path)
                .map_err(|e| Error::image(&img_path, e))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut tensor = Tensor::zeros(h, w, 3);
            for y in 0..h {
                for x in 0..w {
                    let p = img.get_pixel(x as u32, y as u32);
                    for ch in 0..3 {
                        *tensor.at_mut(y, x, ch) = p.0[ch] as f64 / 255.0;
                    }
                }
            }

            let mask_path = dir.join("masks").join(format!("{id}.png"));
            let mask = image::open(&mask_path)
                .map_err(|e| Error::image(&mask_path, e))?
                .to_luma8();
            if (mask.width() as usize, mask.height() as usize) != (w, h) {
                return Err(Error::Dataset(format!("sample {id}: image/mask size mismatch")));
            }
            let labels: Vec<u8> = mask.into_raw();

            for &c in sample_classes {
                if c >= classes.len() {
                    return Err(Error::Dataset(format!(
                        "sample {id} lists class {c} outside classes.txt"
                    )));
                }
                let want = (c + 1) as u8;
                if !labels.iter().any(|&v| v == want) {
                    return Err(Error::Dataset(format!(
                        "sample {id}: indexed class {c} absent from mask"
                    )));
                }
                by_class.entry(c).or_default().push(samples.len());
            }
            samples.push(Sample {
                id: id.clone(),
                image: tensor,
                labels,
                classes: sample_classes.clone(),
            });
        }

        Ok(Dataset {
            classes,
            samples,
            by_class,
        })
    }

    pub fn class_ids(&self) -> Vec<usize> {
        (0..self.classes.len()).collect()
    }

    pub fn samples_of_class(&self, class_id: usize) -> &[usize] {
        self.by_class
            .get(&class_id)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}
