//! MVTec-style layout: `<category>/train/good/*`, `<category>/test/<defect>/*`
//! and `<category>/ground_truth/<defect>/<stem>_mask.png`.

use std::path::{Path, PathBuf};

use super::image_io::{read_image, read_mask};
use crate::error::{Error, Result};
use crate::sample::ImageSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRoot {
    pub root: PathBuf,
    /// Sorted category directory names.
    pub categories: Vec<String>,
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().starts_with('.')).unwrap_or(true);
        if name || path.is_dir() != want_dirs {
            continue;
        }
        if !want_dirs && !is_image(&path) {
            continue;
        }
        out.push(path);
    }
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png")
    )
}

fn file_name(path: &Path) -> String {
    path.file_name().expect("entry has a name").to_string_lossy().into_owned()
}

impl DatasetRoot {
    /// Discovers categories: every subdirectory holding `train` or `test`.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
            ));
        }
        let categories: Vec<String> = sorted_entries(root, true)?
            .into_iter()
            .filter(|p| p.join("train").is_dir() || p.join("test").is_dir())
            .map(|p| file_name(&p))
            .collect();
        if categories.is_empty() {
            return Err(Error::DatasetIntegrity(format!("no categories under {}", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            categories,
        })
    }

    /// Image files of one split in `(category, defect, file)` order.
    pub fn files(&self, split: Split, filter: Option<&[String]>) -> Result<Vec<(String, String, PathBuf)>> {
        let mut out = Vec::new();
        for cat in self.selected(filter)? {
            let dir = self.root.join(&cat).join(split.dir_name());
            if !dir.is_dir() {
                return Err(Error::DatasetIntegrity(format!("{} is missing", dir.display())));
            }
            for defect_dir in sorted_entries(&dir, true)? {
                let defect = file_name(&defect_dir);
                if split == Split::Train && defect != "good" {
                    return Err(Error::DatasetIntegrity(format!(
                        "train split of {cat} contains non-good images in {defect}/"
                    )));
                }
                for f in sorted_entries(&defect_dir, false)? {
                    out.push((cat.clone(), defect.clone(), f));
                }
            }
        }
        Ok(out)
    }

    fn selected(&self, filter: Option<&[String]>) -> Result<Vec<String>> {
        match filter {
            None => Ok(self.categories.clone()),
            Some(wanted) => {
                for w in wanted {
                    if !self.categories.contains(w) {
                        return Err(Error::Input(format!("unknown category {w}")));
                    }
                }
                Ok(self.categories.iter().filter(|c| wanted.contains(c)).cloned().collect())
            }
        }
    }

    pub fn mask_path(&self, category: &str, defect: &str, image: &Path) -> PathBuf {
        let stem = image.file_stem().expect("image has a stem").to_string_lossy();
        self.root
            .join(category)
            .join("ground_truth")
            .join(defect)
            .join(format!("{stem}_mask.png"))
    }
}

/// Loads one split as a stable `(category, defect, file)`-ordered stream,
/// resizing to `resolution × resolution` when given.
pub fn load_dataset(
    root: &DatasetRoot,
    split: Split,
    filter: Option<&[String]>,
    resolution: Option<usize>,
) -> Result<Vec<ImageSample>> {
    let mut out = Vec::new();
    for (cat, defect, path) in root.files(split, filter)? {
        let mut s = read_image(&path, resolution)?;
        s.category = cat.clone();
        s.defect = defect.clone();
        s.name = path.strip_prefix(&root.root).unwrap_or(&path).display().to_string();
        if defect != "good" {
            let mask_path = root.mask_path(&cat, &defect, &path);
            if !mask_path.is_file() {
                return Err(Error::DatasetIntegrity(format!("{} has no mask at {}", s.name, mask_path.display())));
            }
            let original = image::image_dimensions(&path).map_err(|e| Error::Format(e.to_string()))?;
            let (mask, dims) = read_mask(&mask_path, resolution)?;
            if (dims.1 as u32, dims.0 as u32) != original {
                return Err(Error::DatasetIntegrity(format!(
                    "mask {}×{} does not match image {}×{} for {}",
                    dims.0, dims.1, original.1, original.0, s.name
                )));
            }
            if mask.iter().all(|&m| m == 0) {
                return Err(Error::DatasetIntegrity(format!("mask of {} is empty", s.name)));
            }
            s.mask = Some(mask);
            s.is_anomalous = true;
        }
        out.push(s);
    }
    Ok(out)
}
