//! Neuron labeling from a small labeled subset.
//!
//! Each labeled sample adds every neuron's activity, divided by the BMU
//! activity, to that neuron's accumulator for the sample's class. The sums
//! are averaged per class and each neuron takes the class with the largest
//! average.

use rand::seq::index;
use rayon::prelude::*;

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::som::{ActivationField, SomGrid};

/// Per-neuron, per-class activity sums.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAccumulators {
    neurons: usize,
    classes: usize,
    acc: Vec<f64>,
    samples_per_class: Vec<usize>,
}

impl ClassAccumulators {
    pub fn new(neurons: usize, classes: usize) -> Self {
        ClassAccumulators {
            neurons,
            classes,
            acc: vec![0.0; neurons * classes],
            samples_per_class: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples_per_class(&self) -> &[usize] {
        &self.samples_per_class
    }

    /// Adds one presentation: `contributions[n]` goes to neuron `n`'s `class` slot.
    pub fn add(&mut self, class: usize, contributions: &[f64]) {
        debug_assert_eq!(contributions.len(), self.neurons);
        self.samples_per_class[class] += 1;
        for (n, &c) in contributions.iter().enumerate() {
            self.acc[n * self.classes + class] += c;
        }
    }

    pub fn merge(&mut self, other: &ClassAccumulators) {
        for (a, b) in self.acc.iter_mut().zip(&other.acc) {
            *a += b;
        }
        for (a, b) in self.samples_per_class.iter_mut().zip(&other.samples_per_class) {
            *a += b;
        }
    }

    pub fn raw(&self, neuron: usize, class: usize) -> f64 {
        self.acc[neuron * self.classes + class]
    }

    /// Accumulator averaged over the class's sample count (0 for absent classes).
    pub fn normalized(&self, neuron: usize, class: usize) -> f64 {
        match self.samples_per_class[class] {
            0 => 0.0,
            count => self.raw(neuron, class) / count as f64,
        }
    }

    /// Per-neuron argmax of the normalized accumulators, lowest class on ties.
    /// A neuron whose accumulators are all zero gets label 0.
    pub fn labels(&self) -> Vec<u16> {
        (0..self.neurons)
            .map(|n| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.normalized(n, c) > self.normalized(n, best) {
                        best = c;
                    }
                }
                best as u16
            })
            .collect()
    }
}

/// A trained map with one class label per neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSom {
    pub som: SomGrid,
    pub labels: Vec<u16>,
}

impl LabeledSom {
    pub fn new(som: SomGrid, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != som.len() {
            return Err(Error::DimensionMismatch { expected: som.len(), found: labels.len() });
        }
        Ok(LabeledSom { som, labels })
    }

    pub fn label(&self, n: usize) -> usize {
        self.labels[n] as usize
    }

    /// Unimodal prediction: the label of the nearest neuron.
    pub fn classify(&self, v: &[f32]) -> Result<usize> {
        Ok(self.label(self.som.nearest(v)?))
    }

    pub fn accuracy(&self, data: &FeatureMatrix) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("evaluation data"));
        }
        let mut correct = 0usize;
        for i in 0..data.rows() {
            if self.classify(data.row(i))? == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.rows() as f64)
    }
}

/// Seeded uniform sample of `round(fraction * rows)` rows without
/// replacement, kept in original row order.
pub fn select_label_subset(data: &FeatureMatrix, fraction: f64, seed: u64) -> Result<FeatureMatrix> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!("label fraction must be in (0, 1], got {fraction}")));
    }
    let n = (fraction * data.rows() as f64).round() as usize;
    if n == 0 {
        return Err(Error::Empty("label subset"));
    }
    let mut rng = rng::stream(seed, Stream::LabelSubset);
    let mut picked = index::sample(&mut rng, data.rows(), n).into_vec();
    picked.sort_unstable();
    Ok(data.select(&picked))
}

/// [`select_label_subset`], redrawn (seed, seed + 2^32, ...) until every one
/// of `num_classes` classes is represented.
pub fn select_covering_subset(
    data: &FeatureMatrix,
    fraction: f64,
    seed: u64,
    num_classes: usize,
) -> Result<FeatureMatrix> {
    const MAX_DRAWS: u64 = 100;
    for attempt in 0..MAX_DRAWS {
        let subset = select_label_subset(data, fraction, seed.wrapping_add(attempt << 32))?;
        if subset.class_counts(num_classes).iter().all(|&c| c > 0) {
            return Ok(subset);
        }
    }
    Err(Error::InvalidParameter(format!(
        "no {fraction} subset covering all {num_classes} classes after {MAX_DRAWS} draws"
    )))
}

/// Contributions of one presentation: activities divided by the BMU activity.
pub fn normalized_contributions(field: &ActivationField) -> Vec<f64> {
    let top = field.bmu_activity();
    if top > 0.0 {
        field.activities.iter().map(|a| a / top).collect()
    } else {
        vec![0.0; field.len()]
    }
}

const CHUNK: usize = 64;

/// Runs `contrib` over every subset row in fixed-size chunks (in parallel)
/// and merges the partial accumulators in chunk order.
pub(crate) fn accumulate<F>(subset: &FeatureMatrix, neurons: usize, classes: usize, contrib: F) -> Result<ClassAccumulators>
where
    F: Fn(&[f32]) -> Result<Vec<f64>> + Sync,
{
    let rows: Vec<usize> = (0..subset.rows()).collect();
    let partials: Vec<Result<ClassAccumulators>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ClassAccumulators::new(neurons, classes);
            for &i in chunk {
                let label = subset.label(i);
                if label >= classes {
                    return Err(Error::InvalidParameter(format!("label {label} outside 0..{classes}")));
                }
                acc.add(label, &contrib(subset.row(i))?);
            }
            Ok(acc)
        })
        .collect();
    let mut total = ClassAccumulators::new(neurons, classes);
    for p in partials {
        total.merge(&p?);
    }
    Ok(total)
}

/// Accumulators for direct labeling with kernel width `alpha`.
pub fn label_accumulators(som: &SomGrid, subset: &FeatureMatrix, alpha: f64, classes: usize) -> Result<ClassAccumulators> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    // relative_activities already equals a_n / a_bmu
    accumulate(subset, som.len(), classes, |v| Ok(som.relative_activities(v, alpha)?.activities))
}

/// Labels every neuron of `som` from `subset` with kernel width `alpha`.
/// Every class in `0..classes` must appear in the subset.
pub fn label_som(som: &SomGrid, subset: &FeatureMatrix, alpha: f64, classes: usize) -> Result<LabeledSom> {
    if subset.is_empty() {
        return Err(Error::Empty("label subset"));
    }
    if let Some(c) = subset.class_counts(classes).iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(c));
    }
    let acc = label_accumulators(som, subset, alpha, classes)?;
    LabeledSom::new(som.clone(), acc.labels())
}
