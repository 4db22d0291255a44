//! Dataset ingestion, disjoint-class splitting, augmentation, and episodic
//! sampling.

mod augment;
mod episodes;
mod split;
mod synthetic;

pub use augment::{apply_augment, augment, resize_bilinear, sample_augment_params, CropRect};
pub use episodes::{sample_episode, Episode, EpisodeSpec, SplitPart};
pub use split::{read_split_manifest, split_classes, write_split_manifest, DatasetSplit};
pub use synthetic::{make_synthetic_dataset, synth_class_images};

use crate::error::{DcnError, Result};
use ndarray::Array3;
use std::collections::BTreeMap;
use std::path::Path;

/// One normalized image with its class label and provenance key.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// Channel-first pixels `[3, size, size]`, mean-subtracted floats.
    pub pixels: Array3<f64>,
    /// Index into the dataset's class-name table.
    pub label: usize,
    /// Stable provenance key (`<class>/<file>`), unique within a dataset.
    pub source_id: String,
}

/// A loaded dataset: images plus the lexicographic class-name table.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    /// Class names sorted lexicographically; position = integer label.
    pub class_names: Vec<String>,
    pub image_size: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Image indices grouped by class label.
    pub fn per_class_index(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, img) in self.images.iter().enumerate() {
            index.entry(img.label).or_default().push(i);
        }
        index
    }

    /// Per-channel pixel mean over the given images (all images if `None`).
    pub fn channel_mean(&self, indices: Option<&[usize]>) -> [f64; 3] {
        let owned: Vec<usize>;
        let indices = match indices {
            Some(ix) => ix,
            None => {
                owned = (0..self.images.len()).collect();
                &owned
            }
        };
        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for &i in indices {
            let px = &self.images[i].pixels;
            for (c, sum) in sums.iter_mut().enumerate() {
                *sum += px.index_axis(ndarray::Axis(0), c).sum();
            }
            count += px.shape()[1] * px.shape()[2];
        }
        [sums[0] / count as f64, sums[1] / count as f64, sums[2] / count as f64]
    }
}

/// Subtract the whole-dataset per-channel mean in place; returns the means.
pub(crate) fn center_per_channel(images: &mut [LabeledImage]) -> [f64; 3] {
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for img in images.iter() {
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += img.pixels.index_axis(ndarray::Axis(0), c).sum();
        }
        count += img.pixels.shape()[1] * img.pixels.shape()[2];
    }
    let means = [
        sums[0] / count as f64,
        sums[1] / count as f64,
        sums[2] / count as f64,
    ];
    for img in images.iter_mut() {
        for (c, mean) in means.iter().enumerate() {
            img.pixels
                .index_axis_mut(ndarray::Axis(0), c)
                .mapv_inplace(|v| v - mean);
        }
    }
    means
}

fn io_err(path: &Path, source: std::io::Error) -> DcnError {
    DcnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Load a `root/<class_name>/<image file>` directory tree (PNG/JPEG).
///
/// Class names are sorted lexicographically to assign stable integer labels;
/// images are decoded, resized to `image_size`, scaled to `[0,1]`, and then
/// centered by the whole-dataset per-channel mean.
pub fn load_directory_dataset(path: impl AsRef<Path>, image_size: usize) -> Result<Dataset> {
    let root = path.as_ref();
    if image_size == 0 {
        return Err(DcnError::invalid("image_size must be positive"));
    }
    let entries = std::fs::read_dir(root).map_err(|e| io_err(root, e))?;
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(root, e))?;
        let p = entry.path();
        if p.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            class_dirs.push((name, p));
        }
    }
    if class_dirs.is_empty() {
        return Err(DcnError::Dataset(format!(
            "no class folders under {}",
            root.display()
        )));
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut images = Vec::new();
    let mut class_names = Vec::new();
    for (label, (name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| io_err(dir, e))?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        if files.is_empty() {
            return Err(DcnError::Dataset(format!(
                "class folder {} holds no images",
                dir.display()
            )));
        }
        files.sort();
        for file in files {
            let decoded = image::open(&file).map_err(|e| DcnError::ImageDecode {
                path: file.clone(),
                message: e.to_string(),
            })?;
            let rgb = decoded.to_rgb8();
            let rgb = if rgb.dimensions() == (image_size as u32, image_size as u32) {
                rgb
            } else {
                image::imageops::resize(
                    &rgb,
                    image_size as u32,
                    image_size as u32,
                    image::imageops::FilterType::Triangle,
                )
            };
            let mut pixels = Array3::<f64>::zeros((3, image_size, image_size));
            for y in 0..image_size {
                for x in 0..image_size {
                    let px = rgb.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        pixels[[c, y, x]] = px.0[c] as f64 / 255.0;
                    }
                }
            }
            let file_name = file
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default();
            images.push(LabeledImage {
                pixels,
                label,
                source_id: format!("{name}/{file_name}"),
            });
        }
        class_names.push(name.clone());
    }
    center_per_channel(&mut images);
    Ok(Dataset {
        images,
        class_names,
        image_size,
    })
}
