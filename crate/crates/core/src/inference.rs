//! Cross-modal inference over two labeled maps and their lateral synapses:
//! divergence (labeling one map through the other) and convergence
//! (multimodal classification by cooperation then global competition).

use std::fmt::Write as _;
use std::io::{self, Write};

use rayon::prelude::*;

use crate::association::{Association, LateralSynapses};
use crate::data::{FeatureMatrix, PairedDataset};
use crate::error::{Error, Result};
use crate::labeling::{accumulate, ClassAccumulators, LabeledSom};
use crate::som::{ActivationField, SomGrid};

/// Divergent activity of target neuron `y`: the largest `w_xy * a_x` over
/// its incoming synapses, or 0 when it has none.
pub fn divergent_activity(syn_xy: &LateralSynapses, field_x: &ActivationField, y: usize) -> f64 {
    (0..syn_xy.sources())
        .filter_map(|x| syn_xy.get(x, y).map(|w| w * field_x.activities[x]))
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        .unwrap_or(0.0)
}

/// [`divergent_activity`] for every target neuron at once.
pub fn divergent_field(syn_xy: &LateralSynapses, field_x: &ActivationField) -> Vec<f64> {
    let mut best: Vec<Option<f64>> = vec![None; syn_xy.targets()];
    for x in 0..syn_xy.sources() {
        let a = field_x.activities[x];
        for (y, w) in syn_xy.outgoing(x) {
            let v = w * a;
            best[y] = Some(best[y].map_or(v, |b| b.max(v)));
        }
    }
    best.into_iter().map(|b| b.unwrap_or(0.0)).collect()
}

/// Accumulators for labeling the target map of `syn_xy` from the
/// source-modality subset. Divergent activities are divided by their
/// maximum, like afferent activities in direct labeling.
pub fn divergence_accumulators(
    som_x: &SomGrid,
    syn_xy: &LateralSynapses,
    subset_x: &FeatureMatrix,
    beta: f64,
    classes: usize,
) -> Result<ClassAccumulators> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    if syn_xy.sources() != som_x.len() {
        return Err(Error::DimensionMismatch { expected: som_x.len(), found: syn_xy.sources() });
    }
    accumulate(subset_x, syn_xy.targets(), classes, |v| {
        // the per-presentation normalization makes the kernel's scale irrelevant
        let fx = som_x.relative_activities(v, beta)?;
        let ay = divergent_field(syn_xy, &fx);
        let top = ay.iter().cloned().fold(0.0, f64::max);
        Ok(if top > 0.0 { ay.iter().map(|a| a / top).collect() } else { ay })
    })
}

/// Labels `som_y` using only the x-modality labeled subset and the x->y
/// synapses. Neurons that never receive activity keep label 0.
pub fn diverge_label(
    som_x: &SomGrid,
    som_y: &SomGrid,
    syn_xy: &LateralSynapses,
    subset_x: &FeatureMatrix,
    beta: f64,
    classes: usize,
) -> Result<LabeledSom> {
    if syn_xy.targets() != som_y.len() {
        return Err(Error::DimensionMismatch { expected: som_y.len(), found: syn_xy.targets() });
    }
    let acc = divergence_accumulators(som_x, syn_xy, subset_x, beta, classes)?;
    LabeledSom::new(som_y.clone(), acc.labels())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LateralUpdate {
    Max,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivityMode {
    Raw,
    Norm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeuronScope {
    All,
    BmuOnly,
}

/// What a neuron with no lateral synapse does during the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Disconnected {
    #[default]
    Zero,
    Keep,
}

macro_rules! parse_enum {
    ($ty:ty, $what:literal, $($s:literal => $v:expr),+) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok($v),)+
                    other => Err(Error::InvalidParameter(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
    };
}

parse_enum!(LateralUpdate, "update", "max" => LateralUpdate::Max, "sum" => LateralUpdate::Sum);
parse_enum!(ActivityMode, "activity mode", "raw" => ActivityMode::Raw, "norm" => ActivityMode::Norm);
parse_enum!(NeuronScope, "neuron scope", "all" => NeuronScope::All, "bmu" => NeuronScope::BmuOnly, "bmuonly" => NeuronScope::BmuOnly);
parse_enum!(Disconnected, "disconnected policy", "zero" => Disconnected::Zero, "keep" => Disconnected::Keep);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceConfig {
    pub update: LateralUpdate,
    pub activities: ActivityMode,
    pub neurons: NeuronScope,
    pub beta_x: f64,
    pub beta_y: f64,
    pub disconnected: Disconnected,
}

impl ConvergenceConfig {
    pub fn new(update: LateralUpdate, activities: ActivityMode, neurons: NeuronScope, beta: f64) -> Self {
        ConvergenceConfig { update, activities, neurons, beta_x: beta, beta_y: beta, disconnected: Disconnected::Zero }
    }

    /// The eight update/activity/scope combinations.
    pub fn variants(beta: f64) -> Vec<ConvergenceConfig> {
        let mut out = Vec::with_capacity(8);
        for update in [LateralUpdate::Max, LateralUpdate::Sum] {
            for activities in [ActivityMode::Raw, ActivityMode::Norm] {
                for neurons in [NeuronScope::All, NeuronScope::BmuOnly] {
                    out.push(ConvergenceConfig::new(update, activities, neurons, beta));
                }
            }
        }
        out
    }

    pub fn name(&self) -> String {
        let u = match self.update {
            LateralUpdate::Max => "max",
            LateralUpdate::Sum => "sum",
        };
        let a = match self.activities {
            ActivityMode::Raw => "raw",
            ActivityMode::Norm => "norm",
        };
        let n = match self.neurons {
            NeuronScope::All => "all",
            NeuronScope::BmuOnly => "bmu",
        };
        format!("{u}-{a}-{n}")
    }

    fn validate(&self) -> Result<()> {
        if self.beta_x > 0.0 && self.beta_y > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("kernel widths must be positive: {self:?}")))
        }
    }
}

/// Min-max rescaling with the field's BMU/WMU activities. A flat field maps
/// to all ones.
pub fn minmax_normalize(field: &ActivationField) -> ActivationField {
    let (hi, lo) = (field.bmu_activity(), field.wmu_activity());
    let span = hi - lo;
    let activities = if span > 0.0 {
        field.activities.iter().map(|a| (a - lo) / span).collect()
    } else {
        vec![1.0; field.len()]
    };
    ActivationField { activities, bmu: field.bmu, wmu: field.wmu }
}

fn lateral_term(syn: &LateralSynapses, src: usize, other: &[f64], update: LateralUpdate) -> Option<f64> {
    let n = syn.out_degree(src);
    if n == 0 {
        return None;
    }
    let terms = syn.outgoing(src).map(|(d, w)| w * other[d]);
    Some(match update {
        LateralUpdate::Max => terms.fold(f64::NEG_INFINITY, f64::max),
        LateralUpdate::Sum => terms.sum::<f64>() / n as f64,
    })
}

fn cooperate(
    own: &[f64],
    other_lateral: &[f64],
    syn: &LateralSynapses,
    bmu: usize,
    cfg: &ConvergenceConfig,
) -> Vec<f64> {
    let updated = |n: usize| match lateral_term(syn, n, other_lateral, cfg.update) {
        Some(l) => own[n] * l,
        None => match cfg.disconnected {
            Disconnected::Zero => 0.0,
            Disconnected::Keep => own[n],
        },
    };
    match cfg.neurons {
        NeuronScope::All => (0..own.len()).map(updated).collect(),
        NeuronScope::BmuOnly => {
            let mut out = vec![0.0; own.len()];
            out[bmu] = updated(bmu);
            out
        }
    }
}

/// Cooperation step on precomputed afferent fields. Returns the updated
/// x and y activities.
pub fn converge_fields(
    fx: &ActivationField,
    fy: &ActivationField,
    xy: &LateralSynapses,
    yx: &LateralSynapses,
    cfg: &ConvergenceConfig,
) -> (Vec<f64>, Vec<f64>) {
    let (own_x, own_y, lat_x, lat_y) = match (cfg.activities, cfg.neurons) {
        (ActivityMode::Raw, _) => (&fx.activities, &fy.activities, &fx.activities, &fy.activities),
        (ActivityMode::Norm, NeuronScope::All) => {
            let (nx, ny) = (minmax_normalize(fx).activities, minmax_normalize(fy).activities);
            let x = cooperate(&nx, &ny, xy, fx.bmu, cfg);
            let y = cooperate(&ny, &nx, yx, fy.bmu, cfg);
            return (x, y);
        }
        (ActivityMode::Norm, NeuronScope::BmuOnly) => {
            // the BMUs keep their raw afferent activity; only the lateral
            // activities they read are normalized
            let (nx, ny) = (minmax_normalize(fx).activities, minmax_normalize(fy).activities);
            let x = cooperate(&fx.activities, &ny, xy, fx.bmu, cfg);
            let y = cooperate(&fy.activities, &nx, yx, fy.bmu, cfg);
            return (x, y);
        }
    };
    (cooperate(own_x, lat_y, xy, fx.bmu, cfg), cooperate(own_y, lat_x, yx, fy.bmu, cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MapId {
    X,
    Y,
}

/// Winner of the global competition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GlobalDecision {
    Winner { map: MapId, neuron: usize, label: usize, activity: f64 },
    /// Both maps were entirely zero after cooperation.
    NoDecision,
}

impl GlobalDecision {
    pub fn label(&self) -> Option<usize> {
        match self {
            GlobalDecision::Winner { label, .. } => Some(*label),
            GlobalDecision::NoDecision => None,
        }
    }
}

/// Global BMU over both updated fields: x before y, lowest index first on ties.
pub fn elect_global(ax: &[f64], ay: &[f64], labels_x: &[u16], labels_y: &[u16]) -> GlobalDecision {
    let mut best: Option<(MapId, usize, f64)> = None;
    for (map, field) in [(MapId::X, ax), (MapId::Y, ay)] {
        for (n, &a) in field.iter().enumerate() {
            if a > best.map_or(0.0, |b| b.2) {
                best = Some((map, n, a));
            }
        }
    }
    match best {
        Some((map, neuron, activity)) => {
            let label = match map {
                MapId::X => labels_x[neuron],
                MapId::Y => labels_y[neuron],
            } as usize;
            GlobalDecision::Winner { map, neuron, label, activity }
        }
        None => GlobalDecision::NoDecision,
    }
}

/// Full convergence for one multimodal input.
pub fn converge_classify(
    v_x: &[f32],
    v_y: &[f32],
    som_x: &LabeledSom,
    som_y: &LabeledSom,
    assoc: &Association,
    cfg: &ConvergenceConfig,
) -> Result<GlobalDecision> {
    Ok(converge_detailed(v_x, v_y, som_x, som_y, assoc, cfg)?.decision)
}

struct Detailed {
    decision: GlobalDecision,
    bmu_x: usize,
    bmu_y: usize,
}

fn converge_detailed(
    v_x: &[f32],
    v_y: &[f32],
    som_x: &LabeledSom,
    som_y: &LabeledSom,
    assoc: &Association,
    cfg: &ConvergenceConfig,
) -> Result<Detailed> {
    cfg.validate()?;
    let fx = som_x.som.activities(v_x, cfg.beta_x)?;
    let fy = som_y.som.activities(v_y, cfg.beta_y)?;
    let (ax, ay) = converge_fields(&fx, &fy, &assoc.xy, &assoc.yx, cfg);
    Ok(Detailed {
        decision: elect_global(&ax, &ay, &som_x.labels, &som_y.labels),
        bmu_x: fx.bmu,
        bmu_y: fy.bmu,
    })
}

/// Counts with true classes on rows and predictions on columns. Missing
/// decisions are tallied per true class and count as errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    no_decision: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes], no_decision: vec![0; classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, predicted: Option<usize>) {
        match predicted {
            Some(p) if p < self.classes => self.counts[truth * self.classes + p] += 1,
            _ => self.no_decision[truth] += 1,
        }
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes].iter().sum::<u64>() + self.no_decision[truth]
    }

    pub fn total(&self) -> u64 {
        (0..self.classes).map(|c| self.row_total(c)).sum()
    }

    pub fn no_decisions(&self) -> u64 {
        self.no_decision.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }

    /// Row-normalized fractions; rows of absent classes are zero.
    pub fn normalized(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.classes * self.classes];
        for t in 0..self.classes {
            let total = self.row_total(t);
            if total == 0 {
                continue;
            }
            for p in 0..self.classes {
                out[t * self.classes + p] = self.get(t, p) as f64 / total as f64;
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write_square_csv(&mut w, self.classes, |t, p| self.get(t, p).to_string())
    }
}

fn write_square_csv<W: Write>(w: &mut W, classes: usize, cell: impl Fn(usize, usize) -> String) -> io::Result<()> {
    write!(w, "true\\pred")?;
    for p in 0..classes {
        write!(w, ",{p}")?;
    }
    writeln!(w)?;
    for t in 0..classes {
        write!(w, "{t}")?;
        for p in 0..classes {
            write!(w, ",{}", cell(t, p))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Row-normalized convergence confusion minus row-normalized unimodal
/// confusion. Each row sums to zero when neither matrix has missing
/// decisions for that class.
pub fn gain_matrix(convergence: &ConfusionMatrix, unimodal: &ConfusionMatrix) -> Result<Vec<f64>> {
    if convergence.classes != unimodal.classes {
        return Err(Error::DimensionMismatch { expected: convergence.classes, found: unimodal.classes });
    }
    Ok(convergence.normalized().iter().zip(unimodal.normalized()).map(|(a, b)| a - b).collect())
}

pub fn write_gain_csv<W: Write>(mut w: W, gain: &[f64], classes: usize) -> io::Result<()> {
    write_square_csv(&mut w, classes, |t, p| format!("{:.6}", gain[t * classes + p]))
}

/// Accuracy, confusion and per-neuron BMU win counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub confusion: ConfusionMatrix,
    /// Times each x-map neuron won (global winner for convergence, local BMU
    /// for unimodal evaluation).
    pub wins_x: Vec<u64>,
    pub wins_y: Vec<u64>,
    /// Samples where the two local BMUs disagreed on the label and exactly
    /// one was right, and how many of those were decided correctly.
    pub disagreements: u64,
    pub disagreements_resolved: u64,
}

impl Metrics {
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }

    /// Line-oriented `key=value` summary.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy={:.6}", self.accuracy());
        let _ = writeln!(s, "samples={}", self.confusion.total());
        let _ = writeln!(s, "no_decision={}", self.confusion.no_decisions());
        let _ = writeln!(s, "disagreements={}", self.disagreements);
        let _ = writeln!(s, "disagreements_resolved={}", self.disagreements_resolved);
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "wins_x={}", join(&self.wins_x));
        let _ = writeln!(s, "wins_y={}", join(&self.wins_y));
        s
    }
}

/// Unimodal classification by the label of the local BMU.
pub fn evaluate_unimodal(som: &LabeledSom, data: &FeatureMatrix, classes: usize) -> Result<Metrics> {
    let preds: Vec<usize> = (0..data.rows())
        .into_par_iter()
        .map(|i| som.som.nearest(data.row(i)))
        .collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix::new(classes);
    let mut wins = vec![0u64; som.som.len()];
    for (i, &bmu) in preds.iter().enumerate() {
        wins[bmu] += 1;
        confusion.record(data.label(i), Some(som.label(bmu)));
    }
    Ok(Metrics { confusion, wins_x: wins, wins_y: Vec::new(), disagreements: 0, disagreements_resolved: 0 })
}

/// Convergence classification over a paired test set.
pub fn evaluate_convergence(
    test: &PairedDataset,
    som_x: &LabeledSom,
    som_y: &LabeledSom,
    assoc: &Association,
    cfg: &ConvergenceConfig,
    classes: usize,
) -> Result<Metrics> {
    let outcomes: Vec<Detailed> = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let (vx, vy) = test.pair(i);
            converge_detailed(vx, vy, som_x, som_y, assoc, cfg)
        })
        .collect::<Result<_>>()?;
    let mut m = Metrics {
        confusion: ConfusionMatrix::new(classes),
        wins_x: vec![0; som_x.som.len()],
        wins_y: vec![0; som_y.som.len()],
        disagreements: 0,
        disagreements_resolved: 0,
    };
    for (i, o) in outcomes.iter().enumerate() {
        let truth = test.label(i);
        let predicted = o.decision.label();
        m.confusion.record(truth, predicted);
        if let GlobalDecision::Winner { map, neuron, .. } = o.decision {
            match map {
                MapId::X => m.wins_x[neuron] += 1,
                MapId::Y => m.wins_y[neuron] += 1,
            }
        }
        let (lx, ly) = (som_x.label(o.bmu_x), som_y.label(o.bmu_y));
        if lx != ly && (lx == truth || ly == truth) {
            m.disagreements += 1;
            if predicted == Some(truth) {
                m.disagreements_resolved += 1;
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::{Direction, LearningRule};

    fn field(a: &[f64]) -> ActivationField {
        ActivationField::from_activities(a.to_vec()).unwrap()
    }

    #[test]
    fn divergent_activity_examples() {
        let mut s = LateralSynapses::new(Direction::XToY, LearningRule::Hebb, 3, 2);
        s.insert(0, 0, 2.0);
        s.insert(1, 0, 1.0);
        let f = field(&[0.3, 0.9, 0.5]);
        assert!((divergent_activity(&s, &f, 0) - 0.9).abs() < 1e-15);
        assert_eq!(divergent_activity(&s, &f, 1), 0.0);
        s.insert(2, 1, 0.5);
        assert!((divergent_activity(&s, &f, 1) - 0.25).abs() < 1e-15);
        assert_eq!(divergent_field(&s, &f), vec![divergent_activity(&s, &f, 0), 0.25]);
    }

    #[test]
    fn minmax_pins_extremes() {
        let n = minmax_normalize(&field(&[0.25, 0.75, 0.5]));
        assert_eq!(n.activities, vec![0.0, 1.0, 0.5]);
        assert_eq!(minmax_normalize(&field(&[0.3, 0.3])).activities, vec![1.0, 1.0]);
    }

    #[test]
    fn global_election_prefers_x_on_ties() {
        let d = elect_global(&[0.1, 0.5], &[0.5, 0.2], &[3, 4], &[5, 6]);
        assert_eq!(d, GlobalDecision::Winner { map: MapId::X, neuron: 1, label: 4, activity: 0.5 });
        assert_eq!(elect_global(&[0.0], &[0.0], &[0], &[0]), GlobalDecision::NoDecision);
    }

    #[test]
    fn disconnected_policy() {
        let xy = LateralSynapses::new(Direction::XToY, LearningRule::Hebb, 2, 2);
        let yx = LateralSynapses::new(Direction::YToX, LearningRule::Hebb, 2, 2);
        let (fx, fy) = (field(&[0.4, 0.8]), field(&[0.3, 0.1]));
        let mut cfg = ConvergenceConfig::new(LateralUpdate::Max, ActivityMode::Raw, NeuronScope::All, 1.0);
        let (ax, ay) = converge_fields(&fx, &fy, &xy, &yx, &cfg);
        assert!(ax.iter().chain(&ay).all(|&a| a == 0.0));
        cfg.disconnected = Disconnected::Keep;
        let (ax, ay) = converge_fields(&fx, &fy, &xy, &yx, &cfg);
        assert_eq!((ax, ay), (fx.activities.clone(), fy.activities.clone()));
    }

    #[test]
    fn gain_rows_sum_to_zero() {
        let mut a = ConfusionMatrix::new(3);
        let mut b = ConfusionMatrix::new(3);
        for (t, p) in [(0, 0), (0, 1), (1, 1), (2, 2), (2, 0), (1, 1)] {
            a.record(t, Some(p));
        }
        for (t, p) in [(0, 0), (0, 0), (1, 2), (2, 2), (2, 2), (1, 0)] {
            b.record(t, Some(p));
        }
        let g = gain_matrix(&a, &b).unwrap();
        for t in 0..3 {
            assert!(g[t * 3..t * 3 + 3].iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_counts_missing_decisions_as_errors() {
        let mut c = ConfusionMatrix::new(2);
        c.record(0, Some(0));
        c.record(1, None);
        assert_eq!(c.accuracy(), 0.5);
        assert_eq!(c.no_decisions(), 1);
        let mut out = Vec::new();
        c.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "true\\pred,0,1\n0,1,0\n1,0,0\n");
    }

    #[test]
    fn variant_names_are_unique() {
        let mut names: Vec<String> = ConvergenceConfig::variants(1.0).iter().map(|c| c.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 8);
    }
}
