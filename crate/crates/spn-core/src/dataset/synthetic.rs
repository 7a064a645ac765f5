//! Synthetic nodule corpus for desk-scale experiments.
//!
//! Benign images are a centered Gaussian blob; malignant images add radial
//! spikes to the same blob, mimicking spiculated margins. Every nodule gets
//! its own RNG substream, so corpora are reproducible image-by-image and
//! insensitive to generation order.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::pgm::{save_image, IMAGE_EXTENT};
use crate::dataset::{Label, Manifest, NoduleRecord};
use crate::error::{Error, Result};
use crate::rng::{substream, tags};
use crate::tensor::Tensor;

/// Physical pixel pitch assumed when converting blob radius to diameter.
const MM_PER_PIXEL: f64 = 0.9375;
/// Additive pixel noise, standard deviation in intensity units.
const NOISE_SIGMA: f64 = 0.05;

struct Spike {
    angle: f64,
    length: f64,
    width: f64,
}

struct NoduleShape {
    radius: f64,
    intensity: f64,
    spikes: Vec<Spike>,
}

/// Draw order is part of the format: radius, intensity, spike count,
/// per-spike (angle, length, width), then per-pixel noise, then ratings.
/// Reordering would silently change every generated corpus.
fn draw_shape(label: Label, rng: &mut impl Rng) -> NoduleShape {
    let radius = rng.gen_range(4.0..=10.0);
    let intensity = rng.gen_range(0.5..=1.0);
    let spikes = match label {
        Label::Benign => Vec::new(),
        Label::Malignant => {
            let n = rng.gen_range(5..=12);
            (0..n)
                .map(|_| Spike {
                    angle: rng.gen_range(0.0..TAU),
                    length: rng.gen_range(3.0..=8.0),
                    width: rng.gen_range(1.0..=2.0),
                })
                .collect()
        }
    };
    NoduleShape { radius, intensity, spikes }
}

fn render(shape: &NoduleShape, rng: &mut impl Rng) -> Tensor {
    let n = IMAGE_EXTENT;
    let center = (n as f64 - 1.0) / 2.0;
    let sigma = shape.radius / 2.0;
    let mut px = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            let d2 = dy * dy + dx * dx;
            px[y * n + x] = shape.intensity * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    for spike in &shape.spikes {
        let (dy, dx) = (spike.angle.sin(), spike.angle.cos());
        // Start just inside the blob edge so the spike reads as attached.
        let start = shape.radius * 0.9;
        let steps = (spike.length / 0.25).ceil() as usize;
        for s in 0..=steps {
            let t = start + s as f64 * 0.25;
            if t > start + spike.length {
                break;
            }
            let py = center + t * dy;
            let px_ = center + t * dx;
            let half = spike.width / 2.0;
            let y0 = (py - half).floor().max(0.0) as usize;
            let y1 = (py + half).ceil().min(n as f64 - 1.0) as usize;
            let x0 = (px_ - half).floor().max(0.0) as usize;
            let x1 = (px_ + half).ceil().min(n as f64 - 1.0) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if (y as f64 - py).abs() <= half && (x as f64 - px_).abs() <= half {
                        let v = &mut px[y * n + x];
                        *v = v.max(shape.intensity);
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("constant sigma is valid");
    for v in &mut px {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![n, n, 1], px).expect("length matches shape")
}

fn draw_ratings(label: Label, rng: &mut impl Rng) -> Vec<u8> {
    let range = match label {
        Label::Benign => 1..=2u8,
        Label::Malignant => 4..=5u8,
    };
    (0..3).map(|_| rng.gen_range(range.clone())).collect()
}

/// Generates `n_per_class` benign and `n_per_class` malignant nodules (one
/// image each), writes the images and a `synthetic.csv` manifest under
/// `out_dir`, and returns the manifest. Nodule `i` of class `c` depends only
/// on `(seed, c, i)`, never on `n_per_class`.
pub fn generate_synthetic_dataset(
    n_per_class: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if n_per_class == 0 {
        return Err(Error::invalid(
            "generate_synthetic_dataset",
            "n_per_class must be positive",
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(2 * n_per_class);
    for label in [Label::Benign, Label::Malignant] {
        let prefix = match label {
            Label::Benign => "b",
            Label::Malignant => "m",
        };
        for i in 0..n_per_class {
            let mut rng = substream(seed, &[tags::SYNTH, label.class_index() as u64, i as u64]);
            let shape = draw_shape(label, &mut rng);
            let image = render(&shape, &mut rng);
            let ratings = draw_ratings(label, &mut rng);
            let id = format!("{prefix}{i:04}");
            let file = format!("{id}.pgm");
            save_image(&out_dir.join(&file), &image)?;
            records.push(NoduleRecord {
                image_path: file,
                nodule_id: id.clone(),
                patient_id: format!("p{id}"),
                label,
                diameter_mm: Some(2.0 * shape.radius * MM_PER_PIXEL),
                ratings: Some(ratings),
            });
        }
    }
    let manifest = Manifest::from_records("synthetic", out_dir, records)?;
    manifest.save(&out_dir.join("synthetic.csv"))?;
    Ok(manifest)
}
