//! Seeded synthetic dataset: one parametric color/texture pattern per class,
//! with per-image jitter scaled by a difficulty knob.

use super::{center_per_channel, Dataset, LabeledImage};
use crate::error::{DcnError, Result};
use crate::seed::sub_rng;
use ndarray::Array3;
use rand::Rng;

/// Golden-ratio conjugate: spreads class hues evenly around the color wheel.
const HUE_STEP: f64 = 0.618_033_988_749_894_9;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone)]
struct ClassPattern {
    color_a: [f64; 3],
    color_b: [f64; 3],
    kind: usize,
    frequency: f64,
    orientation: f64,
    phase: f64,
    blobs: Vec<(f64, f64, f64)>,
}

fn class_pattern(seed: u64, class: usize) -> ClassPattern {
    let mut rng = sub_rng(seed, &format!("synth/class/{class}"));
    let hue = (class as f64 * HUE_STEP).fract();
    let color_a = hsv_to_rgb(
        hue,
        rng.gen_range(0.55..0.95),
        rng.gen_range(0.55..0.95),
    );
    let color_b = hsv_to_rgb(
        hue + 0.5,
        rng.gen_range(0.35..0.75),
        rng.gen_range(0.25..0.65),
    );
    let blobs = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.12..0.3),
            )
        })
        .collect();
    ClassPattern {
        color_a,
        color_b,
        kind: class % 4,
        frequency: rng.gen_range(1.5..3.5),
        orientation: rng.gen_range(0.0..std::f64::consts::PI),
        phase: rng.gen_range(0.0..1.0),
        blobs,
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Jitter {
    phase: f64,
    freq_factor: f64,
    orientation: f64,
    dx: f64,
    dy: f64,
    color_scale: [f64; 3],
}

/// Pattern intensity in `[0,1]` at normalized coordinates.
fn field(p: &ClassPattern, j: &Jitter, x: f64, y: f64) -> f64 {
    let freq = p.frequency * (1.0 + j.freq_factor);
    let phase = p.phase + j.phase;
    let (x, y) = (x + j.dx, y + j.dy);
    match p.kind {
        0 => {
            let angle = p.orientation + j.orientation;
            let u = x * angle.cos() + y * angle.sin();
            0.5 + 0.5 * (std::f64::consts::TAU * (freq * u + phase)).sin()
        }
        1 => {
            let r = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
            0.5 + 0.5 * (std::f64::consts::TAU * (freq * 2.0 * r + phase)).sin()
        }
        2 => {
            let fx = (x * freq * 2.0 + phase).floor() as i64;
            let fy = (y * freq * 2.0 + phase).floor() as i64;
            ((fx + fy).rem_euclid(2)) as f64
        }
        _ => {
            let mut acc = 0.0;
            for &(cx, cy, r) in &p.blobs {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                acc += (-d2 / (2.0 * r * r)).exp();
            }
            acc.min(1.0)
        }
    }
}

/// Render one image of a class as row-major RGB bytes.
fn render_image(p: &ClassPattern, seed: u64, class: usize, index: usize, size: usize, difficulty: f64) -> Vec<u8> {
    let mut rng = sub_rng(seed, &format!("synth/img/{class}/{index}"));
    let d = difficulty;
    let jitter = Jitter {
        phase: d * rng.gen_range(-0.5..0.5),
        freq_factor: d * rng.gen_range(-0.25..0.25),
        orientation: d * rng.gen_range(-0.3..0.3),
        dx: d * rng.gen_range(-0.15..0.15),
        dy: d * rng.gen_range(-0.15..0.15),
        color_scale: [
            1.0 + d * rng.gen_range(-0.25..0.25),
            1.0 + d * rng.gen_range(-0.25..0.25),
            1.0 + d * rng.gen_range(-0.25..0.25),
        ],
    };
    let mut bytes = Vec::with_capacity(size * size * 3);
    for yi in 0..size {
        for xi in 0..size {
            let x = (xi as f64 + 0.5) / size as f64;
            let y = (yi as f64 + 0.5) / size as f64;
            let t = field(p, &jitter, x, y);
            for c in 0..3 {
                let v = p.color_a[c] * t + p.color_b[c] * (1.0 - t);
                let noise = d * rng.gen_range(-0.08..0.08);
                let byte = ((v * jitter.color_scale[c] + noise) * 255.0).round();
                bytes.push(byte.clamp(0.0, 255.0) as u8);
            }
        }
    }
    bytes
}

fn validate(num_classes: usize, per_class: usize, image_size: usize, difficulty: f64) -> Result<()> {
    if num_classes < 2 {
        return Err(DcnError::invalid("num_classes must be at least 2"));
    }
    if per_class < 2 {
        return Err(DcnError::invalid("per_class must be at least 2"));
    }
    if image_size == 0 {
        return Err(DcnError::invalid("image_size must be positive"));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(DcnError::invalid("difficulty must lie in [0,1]"));
    }
    Ok(())
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len()
}

/// Raw class/file/RGB-byte triples, exactly what `synth-data` writes as PNGs.
#[allow(clippy::type_complexity)]
pub fn synth_class_images(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    difficulty: f64,
    seed: u64,
) -> Result<Vec<(String, Vec<(String, Vec<u8>)>)>> {
    validate(num_classes, per_class, image_size, difficulty)?;
    let cw = digits(num_classes - 1).max(2);
    let iw = digits(per_class - 1).max(3);
    let mut out = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let pattern = class_pattern(seed, class);
        let files = (0..per_class)
            .map(|i| {
                (
                    format!("img_{i:0iw$}.png"),
                    render_image(&pattern, seed, class, i, image_size, difficulty),
                )
            })
            .collect();
        out.push((format!("class_{class:0cw$}"), files));
    }
    Ok(out)
}

/// In-memory synthetic dataset, identical to loading `synth-data` output.
///
/// Bytes are scaled to `[0,1]` and centered by the whole-dataset per-channel
/// mean, matching the directory-loading path.
pub fn make_synthetic_dataset(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    difficulty: f64,
    seed: u64,
) -> Result<Dataset> {
    let classes = synth_class_images(num_classes, per_class, image_size, difficulty, seed)?;
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut class_names = Vec::with_capacity(num_classes);
    for (label, (class_name, files)) in classes.into_iter().enumerate() {
        for (file_name, bytes) in files {
            let mut pixels = Array3::<f64>::zeros((3, image_size, image_size));
            for y in 0..image_size {
                for x in 0..image_size {
                    for c in 0..3 {
                        pixels[[c, y, x]] = bytes[(y * image_size + x) * 3 + c] as f64 / 255.0;
                    }
                }
            }
            images.push(LabeledImage {
                pixels,
                label,
                source_id: format!("{class_name}/{file_name}"),
            });
        }
        class_names.push(class_name);
    }
    center_per_channel(&mut images);
    Ok(Dataset {
        images,
        class_names,
        image_size,
    })
}
