//! Seeded synthetic two-modality dataset.
//!
//! Every sample has two `1×16×16` maps. Sample `i` gets
//! `task1 = i mod 4 = 2·orient + band` and a sign `s = +1` when `(i/4)` is
//! even, else `−1`. Then, with `u_A ~ U[−1,1]`, `v ~ U[0,1]`,
//! `u_B = s·U[0.1,1]`, phase `φ ~ U[0,4)` and pixel noise `N(0, 0.05²)`:
//!
//! * image (modality A): stripes of period 4 and amplitude `0.6 + 0.3·u_A`,
//!   horizontal (`cos(2π(r+φ)/4)` along rows) if `orient = 0`, vertical
//!   (along columns) if `orient = 1`.
//! * audio (modality B): `0.3 + 0.25·u_B + (0.6 + 0.3·v)·p(r)` where the row
//!   profile `p` is `cos(2π(r+φ)/8)` if `band = 0` and `(−1)^r` if `band = 1`.
//! * `task2 = [u_B + 0.15·u_A > 0]`.
//!
//! Consequences that can be checked by hand with depth-1 threshold rules on
//! per-map features (mean, row variation, column variation):
//!
//! * `mean(audio) > 0.3` recovers `task2` except when `|u_B| < 0.15` and the
//!   image term flips the sign, which happens for well under 5% of samples.
//! * `orient` is read from the image (row vs column variation) and `band`
//!   from the audio (row variation), so either modality alone pins down at
//!   most one of the two bits of `task1`: 50% accuracy at best.

use std::collections::BTreeMap;
use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MimoError, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 16;
pub const NOISE_STD: f32 = 0.05;
/// `mean(audio)` threshold of the documented `task2` rule.
pub const TASK2_THRESHOLD: f32 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    /// `[N,1,16,16]`
    pub image: Tensor,
    /// `[N,1,16,16]`
    pub audio: Tensor,
    pub task1: Vec<usize>,
    pub task2: Vec<usize>,
}

impl SyntheticDataset {
    pub fn generate(seed: u64, n: usize) -> Result<Self> {
        if n < 8 {
            return Err(MimoError::Config(format!(
                "dataset needs at least 8 samples, got {n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, NOISE_STD).expect("valid std");
        let px = SIDE * SIDE;
        let mut image = Vec::with_capacity(n * px);
        let mut audio = Vec::with_capacity(n * px);
        let mut task1 = Vec::with_capacity(n);
        let mut task2 = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 4;
            let (orient, band) = (label / 2, label % 2);
            let sign = if (i / 4) % 2 == 0 { 1.0 } else { -1.0 };
            let u_a: f32 = rng.random_range(-1.0..1.0);
            let v: f32 = rng.random_range(0.0..1.0);
            let u_b: f32 = sign * rng.random_range(0.1..1.0);
            let phi_a: f32 = rng.random_range(0.0..4.0);
            let phi_b: f32 = rng.random_range(0.0..4.0);
            let amp_a = 0.6 + 0.3 * u_a;
            let amp_b = 0.6 + 0.3 * v;
            for r in 0..SIDE {
                for c in 0..SIDE {
                    let t = if orient == 0 { r } else { c } as f32;
                    image.push(
                        amp_a * (2.0 * PI * (t + phi_a) / 4.0).cos() + noise.sample(&mut rng),
                    );
                }
            }
            for r in 0..SIDE {
                let profile = if band == 0 {
                    (2.0 * PI * (r as f32 + phi_b) / 8.0).cos()
                } else if r % 2 == 0 {
                    1.0
                } else {
                    -1.0
                };
                for _ in 0..SIDE {
                    audio.push(0.3 + 0.25 * u_b + amp_b * profile + noise.sample(&mut rng));
                }
            }
            task1.push(label);
            task2.push((u_b + 0.15 * u_a > 0.0) as usize);
        }
        let shape = vec![n, 1, SIDE, SIDE];
        Ok(SyntheticDataset {
            seed,
            image: Tensor::from_vec(shape.clone(), image)?,
            audio: Tensor::from_vec(shape, audio)?,
            task1,
            task2,
        })
    }

    pub fn len(&self) -> usize {
        self.task1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task1.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(SyntheticDataset {
            seed: self.seed,
            image: self.image.select_axis0(idx)?,
            audio: self.audio.select_axis0(idx)?,
            task1: idx.iter().map(|&i| self.task1[i]).collect(),
            task2: idx.iter().map(|&i| self.task2[i]).collect(),
        })
    }

    /// Seeded shuffle, then the first `1 − test_fraction` for training.
    pub fn split(&self, seed: u64, test_fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(MimoError::Config(format!(
                "test fraction {test_fraction} not in [0,1)"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let (train, test) = idx.split_at(self.len() - n_test);
        Ok((self.subset(train)?, self.subset(test)?))
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Result<Self> {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Named inputs for the whole set.
    pub fn inputs(&self) -> BTreeMap<String, Tensor> {
        BTreeMap::from([
            ("image".to_string(), self.image.clone()),
            ("audio".to_string(), self.audio.clone()),
        ])
    }

    pub fn batch_inputs(&self, idx: &[usize]) -> Result<BTreeMap<String, Tensor>> {
        Ok(BTreeMap::from([
            ("image".to_string(), self.image.select_axis0(idx)?),
            ("audio".to_string(), self.audio.select_axis0(idx)?),
        ]))
    }

    /// Labels for a head name (`task1` or `task2`).
    pub fn labels(&self, head: &str) -> Result<&[usize]> {
        match head {
            "task1" => Ok(&self.task1),
            "task2" => Ok(&self.task2),
            other => Err(MimoError::Config(format!(
                "dataset has no labels for head `{other}`"
            ))),
        }
    }
}

/// Scalar summary of one `16×16` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    Mean,
    /// Mean absolute difference between vertically adjacent pixels.
    RowVariation,
    /// Mean absolute difference between horizontally adjacent pixels.
    ColVariation,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::Mean, Feature::RowVariation, Feature::ColVariation];

    pub fn of(self, map: &[f32]) -> f32 {
        let at = |r: usize, c: usize| map[r * SIDE + c];
        match self {
            Feature::Mean => map.iter().sum::<f32>() / map.len() as f32,
            Feature::RowVariation => {
                let s: f32 = (1..SIDE)
                    .flat_map(|r| (0..SIDE).map(move |c| (r, c)))
                    .map(|(r, c)| (at(r, c) - at(r - 1, c)).abs())
                    .sum();
                s / ((SIDE - 1) * SIDE) as f32
            }
            Feature::ColVariation => {
                let s: f32 = (0..SIDE)
                    .flat_map(|r| (1..SIDE).map(move |c| (r, c)))
                    .map(|(r, c)| (at(r, c) - at(r, c - 1)).abs())
                    .sum();
                s / ((SIDE - 1) * SIDE) as f32
            }
        }
    }
}

/// Per-sample feature values of one modality tensor `[N,1,16,16]`.
pub fn features(maps: &Tensor, f: Feature) -> Vec<f32> {
    maps.data().chunks(SIDE * SIDE).map(|m| f.of(m)).collect()
}

/// The documented `task2` rule: `mean(audio) > 0.3`.
pub fn task2_rule(data: &SyntheticDataset) -> Vec<usize> {
    features(&data.audio, Feature::Mean)
        .into_iter()
        .map(|m| (m > TASK2_THRESHOLD) as usize)
        .collect()
}
