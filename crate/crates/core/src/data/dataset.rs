use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{color_normalize, decode_image, encode_image, resize, Augmentation, ChannelStats, DataError, Image, Sample};
use crate::engine::Tensor;

/// Samples with their decoded planar `[3, H, W]` images, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    images: Vec<Tensor>,
}

impl Dataset {
    /// Pairs samples with in-memory images, resizing to `input_hw` where needed.
    pub fn from_images(samples: Vec<Sample>, images: &[Image], input_hw: usize) -> Result<Self, DataError> {
        if samples.len() != images.len() {
            return Err(DataError::Image(format!("{} samples but {} images", samples.len(), images.len())));
        }
        let images = images.iter().map(|img| fit(img, input_hw).to_tensor()).collect();
        Ok(Self { samples, images })
    }

    /// Decodes every sample's PNG relative to `base_dir`.
    pub fn load(samples: Vec<Sample>, base_dir: &Path, input_hw: usize) -> Result<Self, DataError> {
        let images = samples
            .par_iter()
            .map(|s| read_image(&base_dir.join(&s.path)).map(|img| fit(&img, input_hw).to_tensor()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { samples, images })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    /// Stacked `[N, 3, H, W]` inputs and class indices for the given rows.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let views: Vec<&Tensor> = rows.iter().map(|&i| &self.images[i]).collect();
        let x = Tensor::stack(&views).expect("dataset images share one shape");
        (x, rows.iter().map(|&i| self.samples[i].label.index()).collect())
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            samples: rows.iter().map(|&i| self.samples[i].clone()).collect(),
            images: rows.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }
}

fn fit(img: &Image, hw: usize) -> Image {
    if img.height() == hw && img.width() == hw {
        img.clone()
    } else {
        resize(img, hw, hw)
    }
}

pub fn read_image(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        DataError::Format(m) => DataError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Normalize, then optionally expand six ways, then optionally resize.
pub fn preprocess_image(img: &Image, reference: &ChannelStats, augment: bool, size: Option<usize>) -> Vec<(Augmentation, Image)> {
    let normalized = color_normalize(img, reference);
    let variants: Vec<Augmentation> = if augment {
        Augmentation::ALL.to_vec()
    } else {
        vec![Augmentation::Orig]
    };
    variants
        .into_iter()
        .map(|a| {
            let out = a.apply(&normalized);
            let out = match size {
                Some(s) => fit(&out, s),
                None => out,
            };
            (a, out)
        })
        .collect()
}

/// Output path for a preprocessed variant: `<stem>__<aug>.png` when augmenting,
/// otherwise the input path unchanged.
pub fn variant_path(path: &str, aug: Augmentation, augment: bool) -> String {
    if !augment {
        return path.to_string();
    }
    let stem = path.strip_suffix(".png").unwrap_or(path);
    format!("{stem}__{}.png", aug.name())
}

/// Runs [`preprocess_image`] over a manifest, writing PNGs under `out_dir` and
/// returning the new manifest rows ordered by input row then variant.
pub fn preprocess_dataset(
    samples: &[Sample],
    in_dir: &Path,
    out_dir: &Path,
    reference: &ChannelStats,
    augment: bool,
    size: Option<usize>,
) -> Result<Vec<Sample>, DataError> {
    let per_row = samples
        .par_iter()
        .map(|s| -> Result<Vec<Sample>, DataError> {
            let img = read_image(&in_dir.join(&s.path))?;
            let mut rows = Vec::new();
            for (aug, out) in preprocess_image(&img, reference, augment, size) {
                let rel = variant_path(&s.path, aug, augment);
                let dest: PathBuf = out_dir.join(&rel);
                if let Some(parent) = dest.parent() {
                    fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
                }
                fs::write(&dest, encode_image(&out)?).map_err(|e| DataError::io(&dest, e))?;
                rows.push(Sample { path: rel, ..s.clone() });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_row.concat())
}
