//! The image pool: every `<person>/<image_id>.png` under a directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolImage {
    pub image_id: String,
    pub person_id: String,
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ImagePool {
    images: Vec<PoolImage>,
    by_id: HashMap<String, usize>,
}

impl ImagePool {
    /// Scans `root` recursively for PNG files. The person id is the first
    /// directory below `root`; files directly in `root` are their own person.
    /// Images are ordered by path so that seeded draws are reproducible.
    pub fn scan(root: &Path) -> Result<Self> {
        let mut paths = Vec::new();
        collect_pngs(root, &mut paths)?;
        paths.sort();
        let mut images = Vec::with_capacity(paths.len());
        for path in paths {
            let image_id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| ServiceError::Pool(format!("{}: file name is not UTF-8", path.display())))?
                .to_string();
            let rel = path.strip_prefix(root).expect("scanned below root");
            let person_id = match rel.components().count() {
                1 => image_id.clone(),
                _ => rel
                    .components()
                    .next()
                    .and_then(|c| c.as_os_str().to_str())
                    .ok_or_else(|| ServiceError::Pool(format!("{}: directory name is not UTF-8", path.display())))?
                    .to_string(),
            };
            let (w, h) = image::image_dimensions(&path)
                .map_err(|e| ServiceError::Pool(format!("{}: {e}", path.display())))?;
            images.push(PoolImage {
                image_id,
                person_id,
                path,
                width: w as usize,
                height: h as usize,
            });
        }
        Self::from_images(images)
    }

    pub fn from_images(images: Vec<PoolImage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if let Some(prev) = by_id.insert(img.image_id.clone(), i) {
                return Err(ServiceError::Pool(format!(
                    "image id {:?} appears twice: {} and {}",
                    img.image_id,
                    images[prev].path.display(),
                    img.path.display()
                )));
            }
        }
        Ok(Self { images, by_id })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[PoolImage] {
        &self.images
    }

    pub fn get(&self, image_id: &str) -> Option<&PoolImage> {
        self.by_id.get(image_id).map(|&i| &self.images[i])
    }
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| ServiceError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| ServiceError::io(dir, e))?.path();
        if path.is_dir() {
            collect_pngs(&path, out)?;
        } else if path
            .extension()
            .is_some_and(|ext| ext.eq_ignore_ascii_case("png"))
        {
            out.push(path);
        }
    }
    Ok(())
}
