use std::time::Instant;

use resom::experiments::{self, mean_std, ExperimentSpec, MapCache, PipelineOptions};
use resom::Error;

fn small_spec(extra: &str) -> ExperimentSpec {
    ExperimentSpec::parse(&format!(
        "synthetic.train_per_class = 60\nsynthetic.test_per_class = 20\ngrid.x = 6x6\ngrid.y = 6x6\n\
         label_fraction.x = 0.2\nlabel_fraction.y = 0.2\nbeta = 1\nbeta.divergence = 0.05\nseeds = 0-2\n{extra}"
    ))
    .unwrap()
}

#[test]
fn summary_matches_recomputation() {
    let rec = experiments::run_pipeline(&small_spec(""), &PipelineOptions::default()).unwrap();
    for metric in rec.metric_names() {
        let values = rec.per_seed(&metric);
        assert_eq!(values.len(), 3);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let (m, s) = rec.summary(&metric);
        assert!((m - mean).abs() < 1e-12 && (s - std).abs() < 1e-12, "{metric}");
    }
    assert!(rec.to_csv().lines().count() > 3);
    assert!(rec.to_kv().contains("conv/max-norm-bmu.mean="));
}

#[test]
fn single_seed_has_zero_std() {
    let rec = experiments::run_pipeline(&small_spec("seeds = 4"), &PipelineOptions::default()).unwrap();
    assert_eq!(rec.summary("unimodal_x").1, 0.0);
    assert_eq!(mean_std(&[0.25]).1, 0.0);
}

#[test]
fn rerun_gives_identical_record_hash() {
    let spec = small_spec("");
    let a = experiments::run_pipeline(&spec, &PipelineOptions::default()).unwrap();
    let b = experiments::run_pipeline(&spec, &PipelineOptions::default()).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), experiments::run_pipeline(&small_spec("seeds = 0-1"), &PipelineOptions::default()).unwrap().hash());
}

#[test]
fn cached_maps_are_reused() {
    let spec = small_spec("epochs = 30\nsynthetic.train_per_class = 200\ngrid.x = 12x12\ngrid.y = 12x12");
    let dir = tempfile::tempdir().unwrap();
    let opts = PipelineOptions { cache: MapCache::new(Some(dir.path().to_path_buf())), artifacts_dir: None };
    let t0 = Instant::now();
    let cold = experiments::run_pipeline(&spec, &opts).unwrap();
    let cold_time = t0.elapsed();
    let t1 = Instant::now();
    let warm = experiments::run_pipeline(&spec, &opts).unwrap();
    let warm_time = t1.elapsed();
    assert_eq!(cold.cache_hits(), 0);
    assert_eq!(warm.cache_hits(), 6);
    assert_eq!(cold.hash(), warm.hash());
    assert!(warm_time < cold_time, "warm {warm_time:?} vs cold {cold_time:?}");
    // a downstream-only change still hits the cache
    let relabel = ExperimentSpec { label_fraction_x: 0.5, ..spec };
    assert_eq!(experiments::run_pipeline(&relabel, &opts).unwrap().cache_hits(), 6);
}

#[test]
fn full_keep_equals_unpruned() {
    let spec = small_spec("seeds = 0\nkeep.divergence = 1.0");
    let rec = experiments::run_pipeline(&spec, &PipelineOptions::default()).unwrap();
    let curve = experiments::prune_sweep(&spec, &[1.0], &PipelineOptions::default()).unwrap();
    assert_eq!(curve[0].divergence, rec.per_seed("divergence_y"));
    assert!(experiments::sweep_to_csv(&curve).starts_with("keep_fraction,"));
}

#[test]
fn alpha_sweep_covers_grid() {
    let spec = small_spec("seeds = 0-1");
    let sweep = experiments::alpha_sweep(&spec, &experiments::ALPHA_GRID, &PipelineOptions::default()).unwrap();
    assert_eq!(sweep.len(), 7);
    assert!(sweep.iter().all(|(_, accs)| accs.len() == 2 && accs.iter().all(|a| (0.0..=1.0).contains(a))));
}

#[test]
fn failures_carry_the_stage() {
    // an empty training file passes validation but fails once training starts
    let dir = tempfile::tempdir().unwrap();
    let m = resom::FeatureMatrix::new(2, vec![0.5; 8], vec![0, 1, 0, 1]).unwrap();
    let path = dir.path().join("bad.rsm1");
    resom::data::save_rsm1(&path, &m).unwrap();
    let empty = resom::FeatureMatrix::new(2, vec![], vec![]).unwrap();
    let empty_path = dir.path().join("empty.rsm1");
    resom::data::save_rsm1(&empty_path, &empty).unwrap();
    let spec = ExperimentSpec::parse(&format!(
        "source = files\nx.train = {}\nx.test = {}\ngrid.x = 2x2\nseeds = 0",
        empty_path.display(),
        path.display()
    ))
    .unwrap();
    match experiments::run_pipeline(&spec, &PipelineOptions::default()) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "train");
            assert!(matches!(*source, Error::Empty(_)));
        }
        other => panic!("expected a stage error, got {other:?}"),
    }
}

#[test]
fn spec_file_paths_resolve_against_the_spec_directory() {
    let dir = tempfile::tempdir().unwrap();
    let m = resom::FeatureMatrix::new(1, vec![0.1, 0.9], vec![0, 1]).unwrap();
    resom::data::save_rsm1(dir.path().join("a.rsm1"), &m).unwrap();
    std::fs::write(dir.path().join("run.spec"), "source = files\nx.train = a.rsm1\nx.test = a.rsm1\n").unwrap();
    let spec = ExperimentSpec::load(dir.path().join("run.spec")).unwrap();
    assert!(!spec.is_multimodal());
    assert!(matches!(ExperimentSpec::load(dir.path().join("missing.spec")), Err(Error::Config(_))));
}
