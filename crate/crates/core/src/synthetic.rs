//! Synthetic datasets: Gaussian class clusters, optionally in two modalities
//! whose confusable class pairs are disjoint.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::{FeatureMatrix, PairedDataset};
use crate::rng::{self, Stream, Rng};

/// Clipped Gaussian blobs around uniform random prototypes in [0.2, 0.8]^dim,
/// `rows` samples with labels cycling through `0..classes`.
pub fn gaussian_blobs(classes: usize, rows: usize, dim: usize, spread: f64, seed: u64) -> FeatureMatrix {
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let labels: Vec<u16> = (0..rows).map(|i| (i % classes) as u16).collect();
    let values = sample_rows(&protos, &labels, spread, &mut rng);
    FeatureMatrix::new(dim, values, labels).expect("shape is consistent by construction")
}

fn sample_rows(protos: &[Vec<f64>], labels: &[u16], spread: f64, rng: &mut Rng) -> Vec<f32> {
    let noise = Normal::new(0.0, spread).expect("spread must be finite and non-negative");
    let mut values = Vec::with_capacity(labels.len() * protos[0].len());
    for &l in labels {
        for &p in &protos[l as usize] {
            values.push((p + noise.sample(rng)).clamp(0.0, 1.0) as f32);
        }
    }
    values
}

/// Two-modality generator. In modality x the classes `(2k, 2k+1)` have
/// nearby prototypes; in modality y the pairs are `(2k+1, 2k+2)` (wrapping).
/// Each modality alone confuses its pairs, but no pair is confusable in both.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoModalitySpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim_x: usize,
    pub dim_y: usize,
    /// Per-feature Gaussian noise standard deviation.
    pub noise: f64,
    /// Distance between the prototypes of a confusable pair, as a fraction of
    /// the typical distance between unrelated prototypes.
    pub pair_separation: f64,
}

impl Default for TwoModalitySpec {
    fn default() -> Self {
        TwoModalitySpec {
            classes: 10,
            train_per_class: 300,
            test_per_class: 100,
            dim_x: 16,
            dim_y: 16,
            noise: 0.12,
            pair_separation: 0.25,
        }
    }
}

fn paired_prototypes(classes: usize, dim: usize, sep: f64, offset: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.15..0.85)).collect())
        .collect();
    // pull the partner of each anchor towards it
    let mut k = offset;
    while k + 1 < classes + offset {
        let a = k % classes;
        let b = (k + 1) % classes;
        if a != b {
            let anchor = protos[a].clone();
            for (pb, pa) in protos[b].iter_mut().zip(&anchor) {
                *pb = pa + sep * (*pb - pa);
            }
        }
        k += 2;
    }
    protos
}

impl TwoModalitySpec {
    /// Returns (train, test), each row-aligned across modalities.
    pub fn generate(&self, seed: u64) -> (PairedDataset, PairedDataset) {
        let mut rng = rng::stream(seed, Stream::Synthetic);
        let px = paired_prototypes(self.classes, self.dim_x, self.pair_separation, 0, &mut rng);
        let py = paired_prototypes(self.classes, self.dim_y, self.pair_separation, 1, &mut rng);
        let mut split = |per_class: usize| {
            let labels: Vec<u16> = (0..self.classes * per_class).map(|i| (i % self.classes) as u16).collect();
            let x = FeatureMatrix::new(self.dim_x, sample_rows(&px, &labels, self.noise, &mut rng), labels.clone())
                .expect("consistent shape");
            let y = FeatureMatrix::new(self.dim_y, sample_rows(&py, &labels, self.noise, &mut rng), labels)
                .expect("consistent shape");
            PairedDataset::aligned(x, y).expect("labels aligned by construction")
        };
        let train = split(self.train_per_class);
        let test = split(self.test_per_class);
        (train, test)
    }
}
