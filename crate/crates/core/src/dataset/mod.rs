//! Industrial-layout datasets: indexing, loading and a synthetic generator.
//!
//! Expected layout under a root directory:
//!
//! ```text
//! <category>/train/good/*.png
//! <category>/test/good/*.png
//! <category>/test/<defect>/*.png
//! <category>/ground_truth/<defect>/<stem>_mask.png
//! ```

mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vlmdiff_nn::{exec, Tensor};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::util;

pub use synth::{
    generate_sample, synthesize_shapes_dataset, DefectKind, Manifest, ManifestEntry, Sample,
    SampleSlot, ShapeKind, SynthConfig, BACKGROUND, PALETTE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub category: String,
    pub split: Split,
    pub label: Label,
    /// `good` for normal images, else the defect directory name.
    pub defect: String,
    pub mask_path: Option<PathBuf>,
}

impl ImageRecord {
    pub fn stem(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    /// Root-relative key, stable across machines.
    pub fn key(&self, root: &Path) -> String {
        self.path
            .strip_prefix(root)
            .unwrap_or(&self.path)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    pub categories: Vec<String>,
    /// `(height, width)`.
    pub resolution: (usize, usize),
}

impl DatasetIndex {
    pub fn train(&self) -> impl Iterator<Item = (usize, &ImageRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = (usize, &ImageRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Test)
    }

    pub fn load_image(&self, id: usize) -> Result<Image> {
        let rec = self
            .records
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("record id {id} out of range")))?;
        Image::load(&rec.path, self.resolution)
    }

    /// Ground-truth mask; normal records yield an all-zero mask.
    pub fn load_mask(&self, id: usize) -> Result<Mask> {
        let rec = &self.records[id];
        match &rec.mask_path {
            Some(p) => Mask::load(p, self.resolution),
            None => Ok(Mask::zeros(self.resolution.0, self.resolution.1)),
        }
    }

    pub fn load_images(&self, ids: &[usize]) -> Result<Vec<Image>> {
        exec::map_slice(ids, |&i| self.load_image(i))
            .into_iter()
            .collect()
    }

    /// Content hash over every image and mask file, in index order.
    pub fn content_hash(&self) -> Result<String> {
        let mut parts = Vec::new();
        for r in &self.records {
            parts.push(r.key(&self.root));
            parts.push(util::file_hash(&r.path)?);
            if let Some(m) = &r.mask_path {
                parts.push(util::file_hash(m)?);
            }
        }
        Ok(util::sha256_hex(parts.join("\n").as_bytes()))
    }
}

/// Loads `ids` into a dense `[B, H, W, 3]` array of values in `[0, 1]`.
pub fn load_batch(index: &DatasetIndex, ids: &[usize]) -> Result<Tensor> {
    let images = index.load_images(ids)?;
    let (h, w) = index.resolution;
    let mut data = Vec::with_capacity(ids.len() * h * w * 3);
    for im in images {
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::new(&[ids.len(), h, w, 3], data)?)
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image_file(p))
        .collect())
}

fn find_mask(gt_dir: &Path, stem: &str) -> Option<PathBuf> {
    let p = gt_dir.join(format!("{stem}_mask.png"));
    p.is_file().then_some(p)
}

pub fn scan_industrial_layout(root: &Path, resolution: (usize, usize)) -> Result<DatasetIndex> {
    if resolution.0 == 0 || resolution.1 == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut records = Vec::new();
    let mut categories = Vec::new();
    for cat_dir in sorted_entries(root)? {
        if !cat_dir.join("train").is_dir() && !cat_dir.join("test").is_dir() {
            continue;
        }
        let category = cat_dir
            .file_name()
            .unwrap()
            .to_string_lossy()
            .into_owned();
        let train = image_files(&cat_dir.join("train/good"))?;
        if train.is_empty() {
            return Err(Error::Dataset(format!(
                "category {category}: empty train split ({}/train/good)",
                cat_dir.display()
            )));
        }
        for path in train {
            records.push(ImageRecord {
                path,
                category: category.clone(),
                split: Split::Train,
                label: Label::Normal,
                defect: "good".into(),
                mask_path: None,
            });
        }
        let test_dir = cat_dir.join("test");
        if test_dir.is_dir() {
            for defect_dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
                let defect = defect_dir.file_name().unwrap().to_string_lossy().into_owned();
                let normal = defect == "good";
                let gt_dir = cat_dir.join("ground_truth").join(&defect);
                for path in image_files(&defect_dir)? {
                    let mask_path = if normal {
                        None
                    } else {
                        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
                        Some(find_mask(&gt_dir, &stem).ok_or_else(|| Error::MaskNotFound(path.clone()))?)
                    };
                    records.push(ImageRecord {
                        path,
                        category: category.clone(),
                        split: Split::Test,
                        label: if normal { Label::Normal } else { Label::Anomalous },
                        defect: defect.clone(),
                        mask_path,
                    });
                }
            }
        }
        categories.push(category);
    }
    if categories.is_empty() {
        return Err(Error::Dataset(format!(
            "no category directories with train/ or test/ under {}",
            root.display()
        )));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        records,
        categories,
        resolution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, im: &Image) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, im.to_png_bytes()).unwrap();
    }

    fn write_mask(path: &Path) {
        let mut m = Mask::zeros(8, 8);
        m.data[9] = 1;
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, m.to_png_bytes()).unwrap();
    }

    fn layout(root: &Path, cat: &str, with_mask: bool) {
        let im = Image::filled(8, 8, [0.5; 3]);
        write_png(&root.join(cat).join("train/good/a.png"), &im);
        write_png(&root.join(cat).join("train/good/b.png"), &im);
        write_png(&root.join(cat).join("test/good/c.png"), &im);
        write_png(&root.join(cat).join("test/crack/d.png"), &im);
        if with_mask {
            write_mask(&root.join(cat).join("ground_truth/crack/d_mask.png"));
        }
    }

    #[test]
    fn scans_one_category() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), "bottle", true);
        let idx = scan_industrial_layout(dir.path(), (8, 8)).unwrap();
        assert_eq!(idx.records.len(), 4);
        assert_eq!(idx.categories, vec!["bottle".to_string()]);
        let anomalous: Vec<_> = idx.records.iter().filter(|r| r.label == Label::Anomalous).collect();
        assert_eq!(anomalous.len(), 1);
        assert!(anomalous[0].mask_path.is_some());
        let good_test = idx.records.iter().find(|r| r.stem() == "c").unwrap();
        assert_eq!(good_test.label, Label::Normal);
        assert!(good_test.mask_path.is_none());
    }

    #[test]
    fn missing_mask_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), "bottle", false);
        let err = scan_industrial_layout(dir.path(), (8, 8)).unwrap_err();
        assert!(matches!(err, Error::MaskNotFound(_)));
        assert!(err.to_string().contains("mask not found"));
        assert!(err.to_string().contains("d.png"));
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("cat/test/good/x.png"), &Image::filled(8, 8, [0.0; 3]));
        fs::create_dir_all(dir.path().join("cat/train/good")).unwrap();
        assert!(matches!(
            scan_industrial_layout(dir.path(), (8, 8)),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn categories_sorted() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), "zipper", true);
        layout(dir.path(), "apple", true);
        let idx = scan_industrial_layout(dir.path(), (8, 8)).unwrap();
        assert_eq!(idx.categories, vec!["apple".to_string(), "zipper".to_string()]);
    }

    #[test]
    fn black_and_white_pngs_load_as_zeros_and_ones() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_png(&root.join("c/train/good/black.png"), &Image::filled(8, 8, [0.0; 3]));
        write_png(&root.join("c/train/good/white.png"), &Image::filled(8, 8, [1.0; 3]));
        let idx = scan_industrial_layout(root, (8, 8)).unwrap();
        let batch = load_batch(&idx, &[0, 1]).unwrap();
        assert_eq!(batch.shape(), &[2, 8, 8, 3]);
        let per = 8 * 8 * 3;
        assert!(batch.data()[..per].iter().all(|&v| v == 0.0));
        assert!(batch.data()[per..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rescan_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), "bottle", true);
        let a = scan_industrial_layout(dir.path(), (8, 8)).unwrap();
        let b = scan_industrial_layout(dir.path(), (8, 8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(load_batch(&a, &[0, 3]).unwrap(), load_batch(&b, &[0, 3]).unwrap());
    }
}
