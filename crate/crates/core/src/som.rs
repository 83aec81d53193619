//! Kohonen self-organizing map: activity kernel, winner election,
//! neighborhood, decay schedules and the centralized training loop.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const RSOM_MAGIC: &[u8; 4] = b"RSOM";

/// Distance between grid positions used by the neighborhood kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GridMetric {
    #[default]
    Euclidean,
    /// Matches the hop distance produced by the cellular winner wave.
    Manhattan,
}

impl std::str::FromStr for GridMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(GridMetric::Euclidean),
            "manhattan" => Ok(GridMetric::Manhattan),
            other => Err(Error::InvalidParameter(format!("unknown grid metric {other:?}"))),
        }
    }
}

/// Integer lattice coordinate of a neuron.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Position {
    pub row: usize,
    pub col: usize,
}

impl Position {
    pub fn manhattan(self, other: Position) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    pub fn euclidean_sq(self, other: Position) -> usize {
        let dr = self.row.abs_diff(other.row);
        let dc = self.col.abs_diff(other.col);
        dr * dr + dc * dc
    }

    /// Squared grid distance under `metric`, as fed to the neighborhood kernel.
    pub fn grid_distance_sq(self, other: Position, metric: GridMetric) -> f64 {
        match metric {
            GridMetric::Euclidean => self.euclidean_sq(other) as f64,
            GridMetric::Manhattan => {
                let d = self.manhattan(other) as f64;
                d * d
            }
        }
    }
}

/// Epoch count and geometric decay endpoints for the learning rate and the
/// neighborhood width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub sigma_initial: f64,
    pub sigma_final: f64,
    pub metric: GridMetric,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 10,
            lr_initial: 1.0,
            lr_final: 0.01,
            sigma_initial: 5.0,
            sigma_final: 0.01,
            metric: GridMetric::Euclidean,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs >= 1
            && self.lr_final > 0.0
            && self.lr_initial >= self.lr_final
            && self.sigma_final > 0.0
            && self.sigma_initial >= self.sigma_final;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid schedule {self:?}")))
        }
    }

    /// Learning rate used during epoch `t`.
    pub fn learning_rate(&self, t: usize) -> f64 {
        decay(t, self.epochs, self.lr_initial, self.lr_final)
    }

    /// Neighborhood width used during epoch `t`.
    pub fn sigma(&self, t: usize) -> f64 {
        decay(t, self.epochs, self.sigma_initial, self.sigma_final)
    }
}

/// Geometric interpolation `v_i * (v_f / v_i)^(t / t_f)`.
pub fn decay(t: usize, t_final: usize, initial: f64, final_: f64) -> f64 {
    if t == 0 {
        return initial;
    }
    if t >= t_final {
        return final_;
    }
    initial * (final_ / initial).powf(t as f64 / t_final as f64)
}

/// Gaussian neighborhood `exp(-|p_n - p_s|^2 / (2 sigma^2))` on Euclidean
/// grid distance.
pub fn neighborhood(p_n: Position, p_s: Position, sigma: f64) -> f64 {
    neighborhood_from_sq(p_n.euclidean_sq(p_s) as f64, sigma)
}

pub fn neighborhood_from_sq(dist_sq: f64, sigma: f64) -> f64 {
    (-dist_sq / (2.0 * sigma * sigma)).exp()
}

/// Squared Euclidean distance, accumulated in eight f32 lanes.
pub fn distance_sq(v: &[f32], w: &[f32]) -> f32 {
    debug_assert_eq!(v.len(), w.len());
    let mut acc = [0f32; 8];
    let vc = v.chunks_exact(8);
    let wc = w.chunks_exact(8);
    let (vr, wr) = (vc.remainder(), wc.remainder());
    for (a, b) in vc.zip(wc) {
        for i in 0..8 {
            let d = a[i] - b[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0f32;
    for (a, b) in vr.iter().zip(wr) {
        let d = a - b;
        tail += d * d;
    }
    acc.iter().sum::<f32>() + tail
}

pub fn distance(v: &[f32], w: &[f32]) -> f64 {
    (distance_sq(v, w) as f64).sqrt()
}

/// Afferent activity `exp(-|v - w| / width)` on the (non-squared) Euclidean
/// distance.
pub fn activity(v: &[f32], w: &[f32], width: f64) -> Result<f64> {
    if v.len() != w.len() {
        return Err(Error::DimensionMismatch { expected: w.len(), found: v.len() });
    }
    if width.is_nan() || width <= 0.0 {
        return Err(Error::InvalidParameter(format!("kernel width must be positive, got {width}")));
    }
    Ok(kernel(distance(v, w), width))
}

pub fn kernel(distance: f64, width: f64) -> f64 {
    (-distance / width).exp()
}

/// Argmax and argmin of `field`, lowest index on ties.
pub fn elect_bmu_wmu(field: &[f64]) -> Result<(usize, usize)> {
    if field.is_empty() {
        return Err(Error::Empty("activation field"));
    }
    let (mut bmu, mut wmu) = (0, 0);
    for (i, &a) in field.iter().enumerate().skip(1) {
        if a > field[bmu] {
            bmu = i;
        }
        if a < field[wmu] {
            wmu = i;
        }
    }
    Ok((bmu, wmu))
}

/// Per-neuron activities for one input plus the elected extremes.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationField {
    pub activities: Vec<f64>,
    pub bmu: usize,
    pub wmu: usize,
}

impl ActivationField {
    pub fn from_activities(activities: Vec<f64>) -> Result<Self> {
        let (bmu, wmu) = elect_bmu_wmu(&activities)?;
        Ok(ActivationField { activities, bmu, wmu })
    }

    pub fn bmu_activity(&self) -> f64 {
        self.activities[self.bmu]
    }

    pub fn wmu_activity(&self) -> f64 {
        self.activities[self.wmu]
    }

    pub fn len(&self) -> usize {
        self.activities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activities.is_empty()
    }
}

/// A `width x height` lattice of neurons with `dim`-dimensional weights.
/// Neuron `n` sits at row `n / width`, column `n % width`.
#[derive(Clone, Debug, PartialEq)]
pub struct SomGrid {
    width: usize,
    height: usize,
    dim: usize,
    weights: Vec<f32>,
}

impl SomGrid {
    pub fn from_weights(width: usize, height: usize, dim: usize, weights: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || dim == 0 {
            return Err(Error::InvalidParameter("grid sides and dimension must be positive".into()));
        }
        if weights.len() != width * height * dim {
            return Err(Error::DimensionMismatch { expected: width * height * dim, found: weights.len() });
        }
        Ok(SomGrid { width, height, dim, weights })
    }

    /// Weights drawn uniformly from [0, 1).
    pub fn random(width: usize, height: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, Stream::WeightInit);
        let weights = (0..width * height * dim).map(|_| rng.random::<f32>()).collect();
        Self::from_weights(width, height, dim, weights)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, n: usize) -> Position {
        Position { row: n / self.width, col: n % self.width }
    }

    pub fn index(&self, p: Position) -> usize {
        p.row * self.width + p.col
    }

    pub fn weight(&self, n: usize) -> &[f32] {
        &self.weights[n * self.dim..(n + 1) * self.dim]
    }

    pub(crate) fn weight_mut(&mut self, n: usize) -> &mut [f32] {
        &mut self.weights[n * self.dim..(n + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    fn check_dim(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: v.len() });
        }
        Ok(())
    }

    /// Euclidean distance from `v` to every neuron's weights.
    pub fn distances(&self, v: &[f32]) -> Result<Vec<f64>> {
        self.check_dim(v)?;
        Ok((0..self.len()).map(|n| distance(v, self.weight(n))).collect())
    }

    /// Index of the nearest neuron (lowest index on ties). This is the same
    /// neuron as the activity argmax for any positive kernel width.
    pub fn nearest(&self, v: &[f32]) -> Result<usize> {
        self.check_dim(v)?;
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for n in 0..self.len() {
            let d = distance_sq(v, self.weight(n));
            if d < best_d {
                best = n;
                best_d = d;
            }
        }
        Ok(best)
    }

    /// Activity field for input `v` with kernel width `width`.
    pub fn activities(&self, v: &[f32], width: f64) -> Result<ActivationField> {
        if width.is_nan() || width <= 0.0 {
            return Err(Error::InvalidParameter(format!("kernel width must be positive, got {width}")));
        }
        let d = self.distances(v)?;
        ActivationField::from_activities(d.into_iter().map(|d| kernel(d, width)).collect())
    }

    /// Activities divided by the BMU activity, i.e. `exp(-(d_n - d_min) / width)`.
    /// Same ordering as [`SomGrid::activities`] but immune to underflow of
    /// the raw kernel for small widths.
    pub fn relative_activities(&self, v: &[f32], width: f64) -> Result<ActivationField> {
        let d = self.distances(v)?;
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        ActivationField::from_activities(d.into_iter().map(|d| kernel(d - dmin, width)).collect())
    }

    /// One Kohonen update towards `v`, given the winner and the epoch's
    /// learning rate and neighborhood width.
    pub fn learn(&mut self, v: &[f32], bmu: usize, lr: f64, sigma: f64, metric: GridMetric) {
        let winner = self.position(bmu);
        for n in 0..self.len() {
            let d2 = self.position(n).grid_distance_sq(winner, metric);
            let rate = lr * neighborhood_from_sq(d2, sigma);
            pull_toward(self.weight_mut(n), v, rate);
        }
    }

    /// Trains in place: one shuffled pass per epoch, winner by nearest
    /// weight, learning rate and width decayed at each epoch boundary.
    pub fn train(&mut self, data: &FeatureMatrix, schedule: &TrainSchedule, seed: u64) -> Result<()> {
        schedule.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        self.check_dim(data.row(0))?;
        for t in 0..schedule.epochs {
            let lr = schedule.learning_rate(t);
            let sigma = schedule.sigma(t);
            for i in epoch_order(seed, t, data.rows()) {
                let v = data.row(i);
                let bmu = self.nearest(v)?;
                self.learn(v, bmu, lr, sigma, schedule.metric);
            }
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        write_rsom(&mut buf, self, None).expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

/// `w += rate * (v - w)`, evaluated in f64 and rounded once.
pub(crate) fn pull_toward(w: &mut [f32], v: &[f32], rate: f64) {
    if rate == 0.0 {
        return;
    }
    for (wi, &vi) in w.iter_mut().zip(v) {
        let cur = *wi as f64;
        *wi = (cur + rate * (vi as f64 - cur)) as f32;
    }
}

/// Sample presentation order for epoch `t`.
pub fn epoch_order(seed: u64, t: usize, rows: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut rng::substream(seed, Stream::EpochShuffle, t as u64));
    order
}

/// Convenience wrapper: random init from `seed`, then [`SomGrid::train`].
pub fn train(
    width: usize,
    height: usize,
    data: &FeatureMatrix,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<SomGrid> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let mut som = SomGrid::random(width, height, data.cols(), seed)?;
    som.train(data, schedule, seed)?;
    Ok(som)
}

/// RSOM layout (little-endian): `"RSOM"`, u32 width, u32 height, u32 dim,
/// f32 weights row-major, u8 label flag, then `width*height` u16 labels when
/// the flag is 1.
pub fn write_rsom<W: Write>(mut w: W, som: &SomGrid, labels: Option<&[u16]>) -> Result<()> {
    w.write_all(RSOM_MAGIC)?;
    w.write_u32::<LittleEndian>(som.width as u32)?;
    w.write_u32::<LittleEndian>(som.height as u32)?;
    w.write_u32::<LittleEndian>(som.dim as u32)?;
    for &x in &som.weights {
        w.write_f32::<LittleEndian>(x)?;
    }
    match labels {
        Some(l) => {
            if l.len() != som.len() {
                return Err(Error::DimensionMismatch { expected: som.len(), found: l.len() });
            }
            w.write_u8(1)?;
            for &x in l {
                w.write_u16::<LittleEndian>(x)?;
            }
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

pub fn read_rsom<R: Read>(mut r: R) -> Result<(SomGrid, Option<Vec<u16>>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RSOM_MAGIC {
        return Err(Error::BadTag { expected: "RSOM", found: String::from_utf8_lossy(&magic).into_owned() });
    }
    let width = r.read_u32::<LittleEndian>()? as usize;
    let height = r.read_u32::<LittleEndian>()? as usize;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let mut weights = vec![0f32; width * height * dim];
    r.read_f32_into::<LittleEndian>(&mut weights)?;
    let som = SomGrid::from_weights(width, height, dim, weights)?;
    let labels = match r.read_u8()? {
        0 => None,
        _ => {
            let mut l = vec![0u16; width * height];
            r.read_u16_into::<LittleEndian>(&mut l)?;
            Some(l)
        }
    };
    Ok((som, labels))
}

pub fn save_rsom(path: impl AsRef<Path>, som: &SomGrid, labels: Option<&[u16]>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_rsom(&mut w, som, labels)?;
    w.flush()?;
    Ok(())
}

pub fn load_rsom(path: impl AsRef<Path>) -> Result<(SomGrid, Option<Vec<u16>>)> {
    read_rsom(BufReader::new(File::open(path)?))
}
