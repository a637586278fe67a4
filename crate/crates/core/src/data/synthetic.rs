use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Normalization};
use crate::error::{Error, Result};

/// Parameters of the procedural dataset: each class is an oriented colour
/// grating with a class-specific tint, random phase and additive noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub side: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { classes: 10, train: 2000, test: 500, side: 32, noise: 24.0, seed: 0 }
    }
}

fn render(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng, noise: &Normal<f32>, out: &mut Vec<u8>) {
    let side = spec.side;
    let k = class as f32;
    let n = spec.classes as f32;
    let angle = std::f32::consts::PI * k / n;
    let freq = 2.0 + (class % 3) as f32;
    let tint = [
        0.5 + 0.5 * (2.1 * k).sin(),
        0.5 + 0.5 * (1.3 * k + 2.0).sin(),
        0.5 + 0.5 * (0.7 * k + 4.0).sin(),
    ];
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    for t in tint {
        for y in 0..side {
            for x in 0..side {
                let u = (x as f32 * dx + y as f32 * dy) / side as f32;
                let wave = (std::f32::consts::TAU * freq * u + phase).sin();
                let v = 128.0 + 60.0 * (t - 0.5) + 55.0 * t * wave + noise.sample(rng);
                out.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.side == 0 || spec.train == 0 {
        return Err(Error::invalid("synthetic dataset needs classes, side and training samples"));
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |count: usize| {
        let mut images = Vec::with_capacity(count * 3 * spec.side * spec.side);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % spec.classes;
            render(spec, class, &mut rng, &noise, &mut images);
            labels.push(class);
        }
        (images, labels)
    };
    let (ti, tl) = make(spec.train);
    let (si, sl) = make(spec.test);
    let names: Vec<String> = (0..spec.classes).map(|c| format!("class_{c}")).collect();
    Ok((
        Dataset::from_raw(spec.classes, spec.side, names.clone(), Normalization::UNIT, ti, tl)?,
        Dataset::from_raw(spec.classes, spec.side, names, Normalization::UNIT, si, sl)?,
    ))
}
