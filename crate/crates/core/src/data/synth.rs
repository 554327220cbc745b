use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{encode_image, write_manifest, DataError, Image, Label, Magnification, Sample};

/// Knobs of the synthetic texture task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub per_class: usize,
    pub image_size: usize,
    pub patients_per_class: usize,
    pub seed: u64,
    /// Selects a palette and noise level; variants share the texture rule.
    pub variant: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_class: 8,
            image_size: 32,
            patients_per_class: 2,
            seed: 0,
            variant: 0,
        }
    }
}

struct Style {
    benign: [f32; 3],
    malignant: [f32; 3],
    amplitude: f32,
    noise: f32,
}

fn style(variant: u32) -> Style {
    match variant % 3 {
        // H&E-like pink against purple
        0 => Style {
            benign: [0.85, 0.60, 0.75],
            malignant: [0.62, 0.42, 0.70],
            amplitude: 0.18,
            noise: 0.05,
        },
        // a neighbouring stain: shifted hue, weaker colour cue, more noise
        1 => Style {
            benign: [0.78, 0.62, 0.80],
            malignant: [0.70, 0.55, 0.78],
            amplitude: 0.16,
            noise: 0.09,
        },
        _ => Style {
            benign: [0.60, 0.55, 0.80],
            malignant: [0.45, 0.50, 0.70],
            amplitude: 0.20,
            noise: 0.08,
        },
    }
}

/// Renders one image: oriented sinusoidal stripes, low frequency for benign and
/// high frequency for malignant, over a class-tinted base with Gaussian noise.
pub fn render_texture(label: Label, size: usize, variant: u32, rng: &mut impl Rng) -> Image {
    let st = style(variant);
    let base = match label {
        Label::Benign => st.benign,
        Label::Malignant => st.malignant,
    };
    let cycles = match label {
        Label::Benign => rng.random_range(1.0..2.0f32),
        Label::Malignant => rng.random_range(4.0..6.0f32),
    };
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    let noise = Normal::new(0.0f32, st.noise).expect("valid sigma");
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 * c + y as f32 * s) / size as f32;
            let wave = (2.0 * PI * cycles * u + phase).sin();
            for ch in 0..3 {
                // the green channel swings opposite to red and blue, like hematoxylin vs eosin
                let sign = if ch == 1 { -1.0 } else { 1.0 };
                let v = base[ch] + sign * st.amplitude * wave + noise.sample(rng);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::from_parts(size, size, pixels)
}

/// In-memory synthetic dataset. Images of each class are dealt round-robin to
/// `patients_per_class` patients and tagged with cycling magnifications.
pub fn generate_synthetic_samples(cfg: &SynthConfig) -> Result<Vec<(Sample, Image)>, DataError> {
    if cfg.per_class == 0 || cfg.image_size == 0 || cfg.patients_per_class == 0 {
        return Err(DataError::Synth("per_class, image_size and patients_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.per_class * 2);
    for label in Label::ALL {
        let tag = match label {
            Label::Benign => "B",
            Label::Malignant => "M",
        };
        for i in 0..cfg.per_class {
            let patient = i % cfg.patients_per_class;
            let magnification = Magnification::ALL[(i / cfg.patients_per_class) % 4];
            let img = render_texture(label, cfg.image_size, cfg.variant, &mut rng);
            out.push((
                Sample {
                    path: format!("{}/{tag}{:02}_{i:04}.png", label.as_str(), patient + 1),
                    label,
                    patient_id: format!("{tag}{:02}", patient + 1),
                    magnification,
                },
                img,
            ));
        }
    }
    Ok(out)
}

/// Writes the synthetic PNGs and `manifest.csv` under `dir`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Vec<Sample>, DataError> {
    let items = generate_synthetic_samples(cfg)?;
    for (s, img) in &items {
        let path = dir.join(&s.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
        }
        fs::write(&path, encode_image(img)?).map_err(|e| DataError::io(&path, e))?;
    }
    let samples: Vec<Sample> = items.into_iter().map(|(s, _)| s).collect();
    let manifest = dir.join("manifest.csv");
    let file = fs::File::create(&manifest).map_err(|e| DataError::io(&manifest, e))?;
    write_manifest(std::io::BufWriter::new(file), &samples)?;
    Ok(samples)
}
