//! `resom` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error
//! (unreadable, malformed or inconsistent input), 4 failed verification,
//! 1 anything else.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};

use resom::association::{self, LearningRule, PruneSpec};
use resom::data::{self, FeatureMatrix, PairedDataset};
use resom::experiments::{self, ExperimentSpec, MapCache, PipelineOptions};
use resom::grid;
use resom::inference::{self, ConvergenceConfig, Disconnected};
use resom::labeling::{self, LabeledSom};
use resom::som::{self, GridMetric, SomGrid, TrainSchedule};
use resom::Error;

/// Raised when a verification command finds a mismatch.
#[derive(Debug)]
struct AssertionFailed(String);

impl std::fmt::Display for AssertionFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AssertionFailed {}

#[derive(Parser)]
#[command(name = "resom", version, about = "Reentrant self-organizing maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a SOM on a feature file.
    Train(TrainArgs),
    /// Label a trained SOM from a labeled subset.
    Label(LabelArgs),
    /// Learn and prune lateral synapses between two trained maps.
    Associate(AssociateArgs),
    /// Classify paired test data with the convergence mechanism.
    Converge(ConvergeArgs),
    /// Label the y map through the x->y synapses.
    DivergeLabel(DivergeArgs),
    /// Run a full experiment spec over its seeds.
    Pipeline(PipelineArgs),
    /// Divergence and convergence accuracy against the kept synapse fraction.
    PruneSweep(PruneSweepArgs),
    /// Labeling accuracy against the kernel width alpha.
    AlphaSweep(AlphaSweepArgs),
    /// Check the cellular winner wave against a centralized scan.
    IgVerify(IgVerifyArgs),
    /// Summarize a pipeline record CSV as mean and std per metric.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// RSM1 file or `images.idx,labels.idx`.
    #[arg(long)]
    data: String,
    /// Map size as WxH.
    #[arg(long, default_value = "10x10")]
    grid: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Learning rate as initial:final.
    #[arg(long, default_value = "1.0:0.01")]
    lr: String,
    /// Neighborhood width as initial:final.
    #[arg(long, default_value = "5.0:0.01")]
    sigma: String,
    #[arg(long, default_value = "euclidean")]
    grid_metric: GridMetric,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run the training on the cellular grid simulator (manhattan metric only).
    #[arg(long)]
    ig: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    map: PathBuf,
    /// Data the labeled subset is drawn from.
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 0.01)]
    subset_frac: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Try every alpha of the standard grid and keep the best on --test.
    #[arg(long, requires = "test")]
    alpha_sweep: bool,
    /// Held-out data to report accuracy on.
    #[arg(long)]
    test: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AssociateArgs {
    #[arg(long)]
    map_x: PathBuf,
    #[arg(long)]
    map_y: PathBuf,
    #[arg(long)]
    data_x: String,
    #[arg(long)]
    data_y: String,
    /// Pair rows by index instead of drawing same-class partners.
    #[arg(long)]
    aligned: bool,
    #[arg(long, default_value = "hebb")]
    rule: LearningRule,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 1)]
    assoc_epochs: usize,
    /// Fraction of the other map each neuron keeps connections to.
    #[arg(long, default_value_t = 1.0)]
    keep: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_xy: PathBuf,
    #[arg(long)]
    out_yx: PathBuf,
}

#[derive(Args)]
struct ConvergeArgs {
    /// Labeled x map.
    #[arg(long)]
    map_x: PathBuf,
    /// Labeled y map.
    #[arg(long)]
    map_y: PathBuf,
    #[arg(long)]
    syn_xy: PathBuf,
    #[arg(long)]
    syn_yx: PathBuf,
    #[arg(long)]
    test_x: String,
    #[arg(long)]
    test_y: String,
    #[arg(long)]
    aligned: bool,
    /// update,activities,neurons,beta e.g. `max,norm,bmu,10`.
    #[arg(long, default_value = "max,norm,bmu,10")]
    config: String,
    #[arg(long, default_value = "zero")]
    disconnected: Disconnected,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for confusion and gain matrices.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DivergeArgs {
    /// Labeled or unlabeled x map.
    #[arg(long)]
    map_x: PathBuf,
    #[arg(long)]
    map_y: PathBuf,
    #[arg(long)]
    syn_xy: PathBuf,
    /// x data the labeled subset is drawn from.
    #[arg(long)]
    data_x: String,
    #[arg(long, default_value_t = 0.01)]
    subset_frac: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long)]
    test_y: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Experiment spec (key = value).
    #[arg(long, alias = "config")]
    spec: PathBuf,
    /// Writes record.csv, summary.txt and per-seed artifacts here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the spec's seeds, e.g. `0-9` or `1,4`.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct PruneSweepArgs {
    #[arg(long, alias = "config")]
    spec: PathBuf,
    #[arg(long, default_value = "1.0,0.5,0.25,0.2,0.1,0.05,0.02,0.01")]
    fractions: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AlphaSweepArgs {
    #[arg(long, alias = "config")]
    spec: PathBuf,
    /// Comma-separated alphas; defaults to the standard grid.
    #[arg(long)]
    alphas: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IgVerifyArgs {
    #[arg(long, default_value = "10x10")]
    grid: String,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dump the per-step cell states of the first trial as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// record.csv written by `pipeline`.
    record: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<AssertionFailed>().is_some() {
        return 4;
    }
    if let Some(e) = err.downcast_ref::<Error>() {
        return match e.root() {
            Error::Config(_) | Error::InvalidParameter(_) => 2,
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::BadTag { .. }
            | Error::Truncated { .. }
            | Error::CountMismatch { .. }
            | Error::DimensionMismatch { .. }
            | Error::Empty(_)
            | Error::MissingClass(_) => 3,
            _ => 1,
        };
    }
    if err.downcast_ref::<io::Error>().is_some() {
        return 3;
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Label(a) => label(a),
        Command::Associate(a) => associate(a),
        Command::Converge(a) => converge(a),
        Command::DivergeLabel(a) => diverge(a),
        Command::Pipeline(a) => pipeline(a),
        Command::PruneSweep(a) => prune_sweep(a),
        Command::AlphaSweep(a) => alpha_sweep(a),
        Command::IgVerify(a) => ig_verify(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load(spec: &str) -> Result<FeatureMatrix> {
    data::load_any(spec).with_context(|| format!("loading {spec}"))
}

fn load_map(path: &Path) -> Result<(SomGrid, Option<Vec<u16>>)> {
    som::load_rsom(path).with_context(|| format!("loading {}", path.display()))
}

fn load_labeled(path: &Path) -> Result<LabeledSom> {
    let (som, labels) = load_map(path)?;
    let labels = labels.ok_or_else(|| Error::Config(format!("{} carries no labels", path.display())))?;
    Ok(LabeledSom::new(som, labels)?)
}

fn parse_range(s: &str, what: &str) -> Result<(f64, f64)> {
    let (a, b) = s.split_once(':').ok_or_else(|| Error::Config(format!("{what} must be initial:final, got {s}")))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| Error::Config(format!("{what}: {e}")));
    Ok((num(a)?, num(b)?))
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Config(format!("{t:?}: {e}")).into()))
        .collect()
}

fn pairs(x: FeatureMatrix, y: FeatureMatrix, aligned: bool, seed: u64) -> Result<PairedDataset> {
    Ok(if aligned { PairedDataset::aligned(x, y)? } else { data::pair_by_class(&x, &y, seed)? })
}

fn classes_of(ms: &[&FeatureMatrix]) -> usize {
    ms.iter().map(|m| m.num_classes()).max().unwrap_or(0)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let (width, height) = experiments::parse_grid(&a.grid)?;
    let (lr_initial, lr_final) = parse_range(&a.lr, "--lr")?;
    let (sigma_initial, sigma_final) = parse_range(&a.sigma, "--sigma")?;
    let schedule =
        TrainSchedule { epochs: a.epochs, lr_initial, lr_final, sigma_initial, sigma_final, metric: a.grid_metric };
    schedule.validate()?;
    let data = load(&a.data)?;
    let som = if a.ig {
        if a.grid_metric != GridMetric::Manhattan {
            bail!(Error::Config("--ig requires --grid-metric manhattan".into()));
        }
        let mut ig = grid::IgSom::new(SomGrid::random(width, height, data.cols(), a.seed)?);
        ig.train(&data, &schedule, a.seed)?;
        println!("ig_steps={}\nig_messages={}", ig.steps(), ig.messages());
        ig.into_som()
    } else {
        som::train(width, height, &data, &schedule, a.seed)?
    };
    som::save_rsom(&a.out, &som, None)?;
    println!("map={}\nsha256={}", a.out.display(), som.content_hash());
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    let (som, _) = load_map(&a.map)?;
    let data = load(&a.data)?;
    let test = a.test.as_deref().map(load).transpose()?;
    let classes = classes_of(&[Some(&data), test.as_ref()].into_iter().flatten().collect::<Vec<_>>());
    let subset = labeling::select_covering_subset(&data, a.subset_frac, a.seed, classes)?;
    let alphas = if a.alpha_sweep { experiments::ALPHA_GRID.to_vec() } else { vec![a.alpha] };
    let mut best: Option<(f64, LabeledSom, Option<f64>)> = None;
    for alpha in alphas {
        let labeled = labeling::label_som(&som, &subset, alpha, classes)?;
        let acc = test.as_ref().map(|t| labeled.accuracy(t)).transpose()?;
        if let Some(acc) = acc {
            println!("alpha={alpha} accuracy={acc:.6}");
        }
        if best.as_ref().is_none_or(|b| acc > b.2) {
            best = Some((alpha, labeled, acc));
        }
    }
    let (alpha, labeled, acc) = best.expect("at least one alpha");
    som::save_rsom(&a.out, &labeled.som, Some(&labeled.labels))?;
    println!("alpha={alpha}\nlabeled_samples={}", subset.rows());
    if let Some(acc) = acc {
        println!("accuracy={acc:.6}");
    }
    Ok(())
}

fn associate(a: AssociateArgs) -> Result<()> {
    let (sx, _) = load_map(&a.map_x)?;
    let (sy, _) = load_map(&a.map_y)?;
    let p = pairs(load(&a.data_x)?, load(&a.data_y)?, a.aligned, a.seed)?;
    let assoc = association::associate(&sx, &sy, &p, a.rule, a.eta, a.assoc_epochs)?;
    let pruned = assoc.prune(PruneSpec::new(a.keep)?)?;
    association::save_rlat(&a.out_xy, &pruned.xy)?;
    association::save_rlat(&a.out_yx, &pruned.yx)?;
    println!(
        "potential={}\nsprouted_xy={}\nsprouted_yx={}\nkept_xy={}\nkept_yx={}",
        assoc.xy.potential(),
        assoc.xy.count(),
        assoc.yx.count(),
        pruned.xy.count(),
        pruned.yx.count()
    );
    Ok(())
}

fn parse_config(s: &str, disconnected: Disconnected) -> Result<ConvergenceConfig> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [update, activities, neurons, beta] = parts[..] else {
        bail!(Error::Config(format!("--config expects update,activities,neurons,beta, got {s}")));
    };
    let beta: f64 = beta.parse().map_err(|e| Error::Config(format!("beta {beta:?}: {e}")))?;
    let mut cfg = experiments::parse_variant(&format!("{update}-{activities}-{neurons}"), beta)?;
    cfg.disconnected = disconnected;
    Ok(cfg)
}

fn converge(a: ConvergeArgs) -> Result<()> {
    let cfg = parse_config(&a.config, a.disconnected)?;
    let lx = load_labeled(&a.map_x)?;
    let ly = load_labeled(&a.map_y)?;
    let assoc = association::Association {
        xy: association::load_rlat(&a.syn_xy)?,
        yx: association::load_rlat(&a.syn_yx)?,
    };
    let test = pairs(load(&a.test_x)?, load(&a.test_y)?, a.aligned, a.seed)?;
    let classes = test.num_classes();
    let metrics = inference::evaluate_convergence(&test, &lx, &ly, &assoc, &cfg, classes)?;
    print!("variant={}\n{}", cfg.name(), metrics.to_kv());
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("confusion.csv"))?);
        metrics.confusion.write_csv(&mut w)?;
        w.flush()?;
        let uni_x = inference::evaluate_unimodal(&lx, &test.x, classes)?;
        let uni_y = inference::evaluate_unimodal(&ly, &test.y_aligned(), classes)?;
        for (name, uni) in [("x", &uni_x), ("y", &uni_y)] {
            let gain = inference::gain_matrix(&metrics.confusion, &uni.confusion)?;
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("gain_{name}.csv")))?);
            inference::write_gain_csv(&mut w, &gain, classes)?;
            w.flush()?;
        }
        println!("unimodal_x={:.6}\nunimodal_y={:.6}", uni_x.accuracy(), uni_y.accuracy());
    }
    Ok(())
}

fn diverge(a: DivergeArgs) -> Result<()> {
    let (sx, _) = load_map(&a.map_x)?;
    let (sy, _) = load_map(&a.map_y)?;
    let syn = association::load_rlat(&a.syn_xy)?;
    let data = load(&a.data_x)?;
    let test = a.test_y.as_deref().map(load).transpose()?;
    let classes = classes_of(&[Some(&data), test.as_ref()].into_iter().flatten().collect::<Vec<_>>());
    let subset = labeling::select_covering_subset(&data, a.subset_frac, a.seed, classes)?;
    let labeled = inference::diverge_label(&sx, &sy, &syn, &subset, a.beta, classes)?;
    som::save_rsom(&a.out, &labeled.som, Some(&labeled.labels))?;
    let disconnected = syn.in_degrees().iter().filter(|&&d| d == 0).count();
    println!("labeled_samples={}\ndisconnected_neurons={disconnected}", subset.rows());
    if let Some(t) = &test {
        println!("accuracy={:.6}", labeled.accuracy(t)?);
    }
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let mut spec = ExperimentSpec::load(&a.spec)?;
    if let Some(s) = &a.seeds {
        spec.seeds = experiments::parse_seeds(s)?;
    }
    let opts = PipelineOptions { cache: MapCache::from_env(), artifacts_dir: a.out_dir.as_ref().map(|d| d.join("artifacts")) };
    let rec = experiments::run_pipeline(&spec, &opts)?;
    let summary = rec.to_kv();
    print!("{summary}");
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("record.csv"), &rec.to_csv())?;
        write_file(&dir.join("summary.txt"), &summary)?;
        write_file(&dir.join("spec.txt"), &spec.canonical())?;
    }
    Ok(())
}

fn prune_sweep(a: PruneSweepArgs) -> Result<()> {
    let spec = ExperimentSpec::load(&a.spec)?;
    let fractions = parse_floats(&a.fractions)?;
    let curve = experiments::prune_sweep(&spec, &fractions, &PipelineOptions { cache: MapCache::from_env(), artifacts_dir: None })?;
    let csv = experiments::sweep_to_csv(&curve);
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn alpha_sweep(a: AlphaSweepArgs) -> Result<()> {
    let spec = ExperimentSpec::load(&a.spec)?;
    let alphas = match &a.alphas {
        Some(s) => parse_floats(s)?,
        None => experiments::ALPHA_GRID.to_vec(),
    };
    let sweep = experiments::alpha_sweep(&spec, &alphas, &PipelineOptions { cache: MapCache::from_env(), artifacts_dir: None })?;
    let mut csv = String::from("alpha,mean,std\n");
    for (alpha, accs) in &sweep {
        let (m, s) = experiments::mean_std(accs);
        let _ = writeln!(csv, "{alpha},{m:.6},{s:.6}");
    }
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn ig_verify(a: IgVerifyArgs) -> Result<()> {
    let (cols, rows) = experiments::parse_grid(&a.grid)?;
    let n = rows * cols;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let mut mismatches = 0usize;
    for t in 0..a.trials {
        let acts: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let wave = match (&a.trace, t) {
            (Some(path), 0) => {
                let mut w = BufWriter::new(fs::File::create(path)?);
                let wave = grid::winner_wave_traced(rows, cols, &acts, &mut w)?;
                w.flush()?;
                wave
            }
            _ => grid::winner_wave(rows, cols, &acts)?,
        };
        let (bmu, wmu) = som::elect_bmu_wmu(&acts)?;
        let distances_ok = (0..n).all(|c| {
            let (r, k) = (c / cols, c % cols);
            wave.distance(c) == r.abs_diff(bmu / cols) + k.abs_diff(bmu % cols)
        });
        if wave.bmu != bmu || wave.wmu != wmu || wave.steps != rows + cols - 2 || !distances_ok {
            mismatches += 1;
        }
    }
    print!("trials={}\nmismatches={mismatches}\n{}", a.trials, grid::ig_cost_report(rows, cols, 1)?.to_kv());
    if mismatches > 0 {
        return Err(anyhow!(AssertionFailed(format!("{mismatches} of {} waves disagree with the centralized scan", a.trials))));
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.record).with_context(|| format!("reading {}", a.record.display()))?;
    let mut per_metric: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let [_, metric, value] = fields[..] else {
            bail!(Error::Truncated { expected: 3, found: fields.len() });
        };
        let v: f64 = value.parse().map_err(|_| anyhow!(Error::Config(format!("line {}: bad value {value:?}", i + 1))))?;
        per_metric.entry(metric.to_string()).or_default().push(v);
    }
    if per_metric.is_empty() {
        bail!(Error::Empty("record"));
    }
    println!("{:<24} {:>8} {:>8} {:>6}", "metric", "mean%", "std%", "runs");
    for (m, vals) in &per_metric {
        let (mean, std) = experiments::mean_std(vals);
        println!("{m:<24} {:>8.2} {:>8.2} {:>6}", mean * 100.0, std * 100.0, vals.len());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_classes() {
        assert_eq!(exit_code(&anyhow!(AssertionFailed("x".into()))), 4);
        assert_eq!(exit_code(&anyhow!(Error::Config("x".into()))), 2);
        assert_eq!(exit_code(&anyhow!(Error::MissingClass(3))), 3);
        let staged = Error::Stage { stage: "load".into(), source: Box::new(Error::Truncated { expected: 4, found: 1 }) };
        assert_eq!(exit_code(&anyhow!(staged)), 3);
        assert_eq!(exit_code(&anyhow!(Error::WaveNotRun)), 1);
        assert_eq!(exit_code(&anyhow::Error::from(io::Error::other("x")).context("reading")), 3);
    }
}
