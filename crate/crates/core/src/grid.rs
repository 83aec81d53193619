//! Iterative Grid simulator.
//!
//! Every cell of an `rows x cols` lattice talks only to its four cardinal
//! neighbors. One synchronous step reads the previous snapshot and writes a
//! fresh one. After `T_p = rows + cols - 2` steps of the winner wave every
//! cell knows the best and worst activities of the whole grid, and the step
//! at which its best value last changed is its Manhattan distance to the BMU.

use std::io::{self, Write};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::som::{self, epoch_order, neighborhood_from_sq, pull_toward, Position, SomGrid, TrainSchedule};

/// An activity together with the cell it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tagged {
    pub value: f64,
    pub origin: Position,
}

impl Tagged {
    /// Larger value wins; on equal values the lexicographically smaller origin.
    fn beats_as_max(&self, other: &Tagged) -> bool {
        self.value > other.value || (self.value == other.value && self.origin < other.origin)
    }

    fn beats_as_min(&self, other: &Tagged) -> bool {
        self.value < other.value || (self.value == other.value && self.origin < other.origin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellState {
    pub own: f64,
    pub best: Tagged,
    pub worst: Tagged,
    /// Step at which `best` last changed (0 if it never did).
    pub best_hop: usize,
}

impl CellState {
    fn seed(own: f64, at: Position) -> Self {
        let t = Tagged { value: own, origin: at };
        CellState { own, best: t, worst: t, best_hop: 0 }
    }
}

/// What one cell may see during a step: its own previous state and those of
/// its existing cardinal neighbors.
pub struct Neighborhood<'a> {
    pub own: &'a CellState,
    pub neighbors: [Option<&'a CellState>; 4],
}

/// Winner-wave transition for one cell.
pub fn wave_rule(n: &Neighborhood<'_>, step: usize) -> CellState {
    let mut next = *n.own;
    for s in n.neighbors.iter().flatten() {
        if s.best.beats_as_max(&next.best) {
            next.best = s.best;
            next.best_hop = step;
        }
        if s.worst.beats_as_min(&next.worst) {
            next.worst = s.worst;
        }
    }
    next
}

/// Double-buffered cellular state of one wave.
#[derive(Clone, Debug)]
pub struct CellGrid {
    rows: usize,
    cols: usize,
    cells: Vec<CellState>,
    steps: usize,
    messages: u64,
    log_reads: bool,
    reads: Vec<(usize, usize)>,
}

impl CellGrid {
    pub fn new(rows: usize, cols: usize, activities: &[f64]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter("grid sides must be positive".into()));
        }
        if activities.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, found: activities.len() });
        }
        let cells = activities
            .iter()
            .enumerate()
            .map(|(i, &a)| CellState::seed(a, Position { row: i / cols, col: i % cols }))
            .collect();
        Ok(CellGrid { rows, cols, cells, steps: 0, messages: 0, log_reads: false, reads: Vec::new() })
    }

    /// Records every (reader, source) cell pair accessed by subsequent steps.
    pub fn with_read_log(mut self) -> Self {
        self.log_reads = true;
        self
    }

    pub fn reads(&self) -> &[(usize, usize)] {
        &self.reads
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> &[CellState] {
        &self.cells
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn messages(&self) -> u64 {
        self.messages
    }

    /// Propagation time `T_p = rows + cols - 2`.
    pub fn propagation_time(&self) -> usize {
        self.rows + self.cols - 2
    }

    fn neighbor_indices(&self, i: usize) -> [Option<usize>; 4] {
        let (r, c) = (i / self.cols, i % self.cols);
        [
            (r > 0).then(|| i - self.cols),
            (r + 1 < self.rows).then(|| i + self.cols),
            (c > 0).then(|| i - 1),
            (c + 1 < self.cols).then(|| i + 1),
        ]
    }

    /// Applies `rule` to every cell against the previous snapshot.
    pub fn step_with<F>(&mut self, rule: F)
    where
        F: Fn(&Neighborhood<'_>, usize) -> CellState,
    {
        let step = self.steps + 1;
        let prev = &self.cells;
        let mut next = Vec::with_capacity(prev.len());
        for i in 0..prev.len() {
            let idx = self.neighbor_indices(i);
            let neighbors = idx.map(|j| j.map(|j| &prev[j]));
            let reads = idx.iter().flatten().count();
            self.messages += reads as u64;
            if self.log_reads {
                self.reads.extend(idx.iter().flatten().map(|&j| (i, j)));
            }
            next.push(rule(&Neighborhood { own: &prev[i], neighbors }, step));
        }
        self.cells = next;
        self.steps = step;
    }

    pub fn step(&mut self) {
        self.step_with(wave_rule);
    }

    /// Runs the full winner wave (exactly `T_p` steps).
    pub fn run_wave(&mut self) {
        for _ in 0..self.propagation_time() {
            self.step();
        }
    }

    fn index(&self, p: Position) -> usize {
        p.row * self.cols + p.col
    }

    /// `step,row,col,own,best,best_row,best_col,worst,worst_row,worst_col,best_hop`
    pub fn write_trace_rows<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (i, c) in self.cells.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.steps,
                i / self.cols,
                i % self.cols,
                c.own,
                c.best.value,
                c.best.origin.row,
                c.best.origin.col,
                c.worst.value,
                c.worst.origin.row,
                c.worst.origin.col,
                c.best_hop
            )?;
        }
        Ok(())
    }
}

pub const TRACE_HEADER: &str = "step,row,col,own,best,best_row,best_col,worst,worst_row,worst_col,best_hop";

/// What every cell knows once the winner wave has finished.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveResult {
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
    pub messages: u64,
    pub bmu: usize,
    pub wmu: usize,
    pub bmu_activity: f64,
    pub wmu_activity: f64,
    /// Per-cell view: (bmu activity, wmu activity, hops to the BMU).
    pub cells: Vec<(f64, f64, usize)>,
}

impl WaveResult {
    fn from_grid(g: &CellGrid) -> Self {
        let c0 = &g.cells[0];
        WaveResult {
            rows: g.rows,
            cols: g.cols,
            steps: g.steps,
            messages: g.messages,
            bmu: g.index(c0.best.origin),
            wmu: g.index(c0.worst.origin),
            bmu_activity: c0.best.value,
            wmu_activity: c0.worst.value,
            cells: g.cells.iter().map(|c| (c.best.value, c.worst.value, c.best_hop)).collect(),
        }
    }

    pub fn distance(&self, cell: usize) -> usize {
        self.cells[cell].2
    }
}

/// Runs a complete winner wave over `activities` laid out row-major on a
/// `rows x cols` grid.
pub fn winner_wave(rows: usize, cols: usize, activities: &[f64]) -> Result<WaveResult> {
    let mut g = CellGrid::new(rows, cols, activities)?;
    g.run_wave();
    Ok(WaveResult::from_grid(&g))
}

/// Winner wave that also returns the per-step state trace as CSV lines.
pub fn winner_wave_traced<W: Write>(rows: usize, cols: usize, activities: &[f64], mut out: W) -> Result<WaveResult> {
    let mut g = CellGrid::new(rows, cols, activities)?;
    writeln!(out, "{TRACE_HEADER}")?;
    g.write_trace_rows(&mut out)?;
    for _ in 0..g.propagation_time() {
        g.step();
        g.write_trace_rows(&mut out)?;
    }
    Ok(WaveResult::from_grid(&g))
}

/// A SOM hosted on the Iterative Grid: one neuron per cell, each cell
/// holding only its own weight vector.
#[derive(Clone, Debug)]
pub struct IgSom {
    som: SomGrid,
    pending: Option<WaveResult>,
    steps: u64,
    messages: u64,
}

impl IgSom {
    pub fn new(som: SomGrid) -> Self {
        IgSom { som, pending: None, steps: 0, messages: 0 }
    }

    pub fn som(&self) -> &SomGrid {
        &self.som
    }

    pub fn into_som(self) -> SomGrid {
        self.som
    }

    /// Simulator steps spent so far (waves plus local learning steps).
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn messages(&self) -> u64 {
        self.messages
    }

    /// Every cell computes its own activity (training kernel, width 1) from
    /// the broadcast input, then the winner wave runs.
    pub fn present(&mut self, v: &[f32]) -> Result<&WaveResult> {
        if v.len() != self.som.dim() {
            return Err(Error::DimensionMismatch { expected: self.som.dim(), found: v.len() });
        }
        let activities: Vec<f64> =
            (0..self.som.len()).map(|n| som::kernel(som::distance(v, self.som.weight(n)), 1.0)).collect();
        let wave = winner_wave(self.som.height(), self.som.width(), &activities)?;
        self.steps += wave.steps as u64;
        self.messages += wave.messages;
        Ok(self.pending.insert(wave))
    }

    /// Local learning step: each cell updates its own weights from the hop
    /// distance it learned during the last wave. Consumes that wave.
    pub fn learn(&mut self, v: &[f32], lr: f64, sigma: f64) -> Result<()> {
        let wave = self.pending.take().ok_or(Error::WaveNotRun)?;
        for n in 0..self.som.len() {
            let hops = wave.distance(n) as f64;
            let rate = lr * neighborhood_from_sq(hops * hops, sigma);
            pull_toward(self.som.weight_mut(n), v, rate);
        }
        self.steps += 1;
        Ok(())
    }

    /// One epoch over `data` in the given presentation order.
    pub fn train_epoch(&mut self, data: &FeatureMatrix, order: &[usize], lr: f64, sigma: f64) -> Result<()> {
        for &i in order {
            let v = data.row(i);
            self.present(v)?;
            self.learn(v, lr, sigma)?;
        }
        Ok(())
    }

    /// Full training with the same schedule and shuffles as
    /// [`SomGrid::train`]. Only equivalent to it in Manhattan mode.
    pub fn train(&mut self, data: &FeatureMatrix, schedule: &TrainSchedule, seed: u64) -> Result<()> {
        schedule.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        for t in 0..schedule.epochs {
            let order = epoch_order(seed, t, data.rows());
            self.train_epoch(data, &order, schedule.learning_rate(t), schedule.sigma(t))?;
        }
        Ok(())
    }
}

/// Step and message accounting for running `samples` presentations on a
/// `rows x cols` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub rows: usize,
    pub cols: usize,
    pub cells: usize,
    pub wave_steps: usize,
    pub steps_per_sample: usize,
    pub total_steps: u64,
    pub messages_per_wave: u64,
    pub message_bound_per_wave: u64,
    /// Sequential comparisons a centralized argmax/argmin scan needs per sample.
    pub centralized_ops_per_sample: usize,
}

impl CostReport {
    pub fn to_kv(&self) -> String {
        format!(
            "rows={}\ncols={}\ncells={}\nwave_steps={}\nsteps_per_sample={}\ntotal_steps={}\nmessages_per_wave={}\nmessage_bound_per_wave={}\ncentralized_ops_per_sample={}\n",
            self.rows,
            self.cols,
            self.cells,
            self.wave_steps,
            self.steps_per_sample,
            self.total_steps,
            self.messages_per_wave,
            self.message_bound_per_wave,
            self.centralized_ops_per_sample
        )
    }
}

/// Measures one simulated wave and extrapolates to `samples` presentations.
pub fn ig_cost_report(rows: usize, cols: usize, samples: u64) -> Result<CostReport> {
    let cells = rows * cols;
    let wave = winner_wave(rows, cols, &vec![0.0; cells])?;
    Ok(CostReport {
        rows,
        cols,
        cells,
        wave_steps: wave.steps,
        steps_per_sample: wave.steps + 1,
        total_steps: (wave.steps as u64 + 1) * samples,
        messages_per_wave: wave.messages,
        message_bound_per_wave: (cells * 4 * wave.steps) as u64,
        centralized_ops_per_sample: 2 * cells.saturating_sub(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_by_ten_takes_eighteen_steps() {
        let w = winner_wave(10, 10, &vec![0.5; 100]).unwrap();
        assert_eq!(w.steps, 18);
        // all equal: ties resolve to the top-left cell
        assert_eq!((w.bmu, w.wmu), (0, 0));
    }

    #[test]
    fn singleton_grid() {
        let w = winner_wave(1, 1, &[0.7]).unwrap();
        assert_eq!((w.steps, w.bmu, w.wmu, w.distance(0), w.messages), (0, 0, 0, 0, 0));
    }

    #[test]
    fn rejects_non_rectangular_field() {
        assert!(matches!(winner_wave(3, 3, &[0.0; 8]), Err(Error::DimensionMismatch { .. })));
        assert!(winner_wave(0, 3, &[]).is_err());
    }

    #[test]
    fn reads_only_neighbors() {
        let acts: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64).collect();
        let mut g = CellGrid::new(3, 4, &acts).unwrap().with_read_log();
        g.run_wave();
        assert!(!g.reads().is_empty());
        for &(a, b) in g.reads() {
            let pa = Position { row: a / 4, col: a % 4 };
            let pb = Position { row: b / 4, col: b % 4 };
            assert_eq!(pa.manhattan(pb), 1);
        }
    }

    #[test]
    fn learning_requires_a_wave() {
        let mut ig = IgSom::new(SomGrid::random(2, 2, 3, 0).unwrap());
        assert!(matches!(ig.learn(&[0.0; 3], 0.5, 1.0), Err(Error::WaveNotRun)));
        ig.present(&[0.1, 0.2, 0.3]).unwrap();
        ig.learn(&[0.1, 0.2, 0.3], 0.5, 1.0).unwrap();
        assert!(matches!(ig.learn(&[0.0; 3], 0.5, 1.0), Err(Error::WaveNotRun)));
        assert_eq!(ig.steps(), 3);
    }

    #[test]
    fn cost_report_counts() {
        let r = ig_cost_report(4, 6, 10).unwrap();
        assert_eq!(r.wave_steps, 8);
        assert_eq!(r.steps_per_sample, 9);
        assert_eq!(r.total_steps, 90);
        // directed neighbor links: 4 per cell minus the missing boundary ones
        assert_eq!(r.messages_per_wave, 8 * (4 * 6 * 4 - 2 * 4 - 2 * 6) as u64);
        assert!(r.messages_per_wave < r.message_bound_per_wave);
    }

    #[test]
    fn trace_has_one_block_per_step() {
        let mut out = Vec::new();
        winner_wave_traced(2, 2, &[0.1, 0.4, 0.3, 0.2], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 3);
        assert!(text.starts_with(TRACE_HEADER));
    }
}
