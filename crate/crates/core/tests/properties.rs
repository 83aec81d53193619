use proptest::prelude::*;

use resom::association::{self, Direction, LateralSynapses, LearningRule, PruneSpec};
use resom::data::{self, FeatureMatrix};
use resom::grid::{wave_rule, CellGrid, CellState, Neighborhood};
use resom::inference::{
    self, converge_fields, elect_global, minmax_normalize, ActivityMode, ConvergenceConfig, GlobalDecision, LateralUpdate,
    MapId, NeuronScope,
};
use resom::labeling;
use resom::som::{self, ActivationField, SomGrid, TrainSchedule};
use resom::synthetic;

fn matrix(rows: usize, cols: usize, classes: u16) -> impl Strategy<Value = FeatureMatrix> {
    (
        proptest::collection::vec(0.0f32..1.0, rows * cols),
        proptest::collection::vec(0..classes, rows),
    )
        .prop_map(move |(v, l)| FeatureMatrix::new(cols, v, l).unwrap())
}

fn field(n: usize) -> impl Strategy<Value = ActivationField> {
    proptest::collection::vec(0.0f64..1.0, n).prop_map(|a| ActivationField::from_activities(a).unwrap())
}

/// Random synapses with every source connected to at least one target.
fn synapses(dir: Direction, sources: usize, targets: usize, seed: u64) -> LateralSynapses {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut syn = LateralSynapses::new(dir, LearningRule::Hebb, sources, targets);
    for s in 0..sources {
        syn.insert(s, rng.random_range(0..targets), rng.random_range(0.1..5.0));
        for t in 0..targets {
            if rng.random_bool(0.3) {
                syn.insert(s, t, rng.random_range(0.0..5.0));
            }
        }
    }
    syn
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn minmax_is_idempotent(m in matrix(12, 5, 3)) {
        let once = m.normalize_minmax();
        prop_assert!(once.values().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(once.normalize_minmax(), once);
    }

    #[test]
    fn rsm1_round_trip_is_bit_exact(m in matrix(7, 9, 10)) {
        let mut buf = Vec::new();
        data::write_rsm1(&mut buf, &m).unwrap();
        let back = data::read_rsm1(&buf[..]).unwrap();
        prop_assert!(back.values().iter().zip(m.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.labels(), m.labels());
    }

    #[test]
    fn pairing_keeps_labels_and_uses_every_y(seed in 0u64..1000, nx in 6usize..40, ny in 6usize..40) {
        let x = FeatureMatrix::new(1, vec![0.0; nx], (0..nx).map(|i| (i % 3) as u16).collect()).unwrap();
        let y = FeatureMatrix::new(1, vec![0.0; ny], (0..ny).map(|i| (i % 3) as u16).collect()).unwrap();
        let p = data::pair_by_class(&x, &y, seed).unwrap();
        prop_assert_eq!(p.len(), nx);
        for i in 0..nx {
            prop_assert_eq!(x.label(i), y.label(p.pairing[i]));
        }
        if nx >= ny {
            let mut used = p.pairing.clone();
            used.sort_unstable();
            used.dedup();
            prop_assert_eq!(used.len(), ny);
        }
    }

    #[test]
    fn nearest_equals_activity_bmu(m in matrix(9, 4, 1), v in proptest::collection::vec(0.0f32..1.0, 4), width in 0.05f64..20.0) {
        let som = SomGrid::from_weights(3, 3, 4, m.values().to_vec()).unwrap();
        let f = som.activities(&v, width).unwrap();
        prop_assert_eq!(som.nearest(&v).unwrap(), f.bmu);
        let (bmu, wmu) = som::elect_bmu_wmu(&f.activities).unwrap();
        prop_assert_eq!((bmu, wmu), (f.bmu, f.wmu));
    }

    #[test]
    fn training_stays_in_unit_hull_and_is_deterministic(seed in 0u64..50) {
        let data = synthetic::gaussian_blobs(3, 30, 4, 0.3, seed);
        let schedule = TrainSchedule { epochs: 3, ..TrainSchedule::default() };
        let a = som::train(3, 3, &data, &schedule, seed).unwrap();
        prop_assert!(a.weights().iter().all(|w| (0.0..=1.0).contains(w)));
        let b = som::train(3, 3, &data, &schedule, seed).unwrap();
        prop_assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn hebb_never_decreases(w in 0.0f64..100.0, a in 0.0f64..1.0, b in 0.0f64..1.0, eta in 0.0f64..2.0) {
        prop_assert!(LearningRule::Hebb.update(w, a, b, eta) >= w);
    }

    #[test]
    fn oja_moves_towards_its_fixed_point(w in 0.0f64..10.0, a in 0.05f64..1.0, b in 0.05f64..1.0) {
        let target = a / b;
        let next = LearningRule::Oja.update(w, a, b, 0.1);
        prop_assert!((next - target).abs() <= (w - target).abs() + 1e-12);
    }

    #[test]
    fn prune_keeps_per_source_maxima(seed in 0u64..500, keep in 0.01f64..1.0) {
        let syn = synapses(Direction::XToY, 8, 20, seed);
        let kept = syn.prune(PruneSpec::new(keep).unwrap()).unwrap();
        for s in 0..8 {
            let quota = (keep * 20.0).ceil() as usize;
            prop_assert!(kept.out_degree(s) <= quota);
            prop_assert_eq!(kept.out_degree(s), quota.min(syn.out_degree(s)));
            let min_kept = kept.outgoing(s).map(|(_, w)| w).fold(f64::INFINITY, f64::min);
            let dropped_max = syn
                .outgoing(s)
                .filter(|(t, _)| kept.get(s, *t).is_none())
                .map(|(_, w)| w)
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_kept >= dropped_max);
        }
    }

    #[test]
    fn minmax_pins_bmu_and_wmu(f in field(12)) {
        let n = minmax_normalize(&f);
        if f.bmu_activity() > f.wmu_activity() {
            prop_assert_eq!(n.activities[f.bmu], 1.0);
            prop_assert_eq!(n.activities[f.wmu], 0.0);
        }
        prop_assert_eq!(som::elect_bmu_wmu(&n.activities).unwrap().0, f.bmu);
    }

    #[test]
    fn bmu_only_winner_is_a_local_bmu(fx in field(9), fy in field(6), seed in 0u64..200, sum in any::<bool>(), norm in any::<bool>()) {
        let xy = synapses(Direction::XToY, 9, 6, seed);
        let yx = synapses(Direction::YToX, 6, 9, seed + 1);
        let update = if sum { LateralUpdate::Sum } else { LateralUpdate::Max };
        let mode = if norm { ActivityMode::Norm } else { ActivityMode::Raw };
        let cfg = ConvergenceConfig::new(update, mode, NeuronScope::BmuOnly, 1.0);
        let (ax, ay) = converge_fields(&fx, &fy, &xy, &yx, &cfg);
        match elect_global(&ax, &ay, &[0; 9], &[0; 6]) {
            GlobalDecision::Winner { map: MapId::X, neuron, .. } => prop_assert_eq!(neuron, fx.bmu),
            GlobalDecision::Winner { map: MapId::Y, neuron, .. } => prop_assert_eq!(neuron, fy.bmu),
            GlobalDecision::NoDecision => {}
        }
    }

    #[test]
    fn decision_is_invariant_to_common_scaling(fx in field(9), fy in field(6), seed in 0u64..200, sum in any::<bool>(), k in -3i32..4) {
        let xy = synapses(Direction::XToY, 9, 6, seed);
        let yx = synapses(Direction::YToX, 6, 9, seed + 1);
        let update = if sum { LateralUpdate::Sum } else { LateralUpdate::Max };
        let cfg = ConvergenceConfig::new(update, ActivityMode::Raw, NeuronScope::All, 1.0);
        // powers of two scale exactly
        let c = 2f64.powi(k);
        let scale = |f: &ActivationField| ActivationField::from_activities(f.activities.iter().map(|a| a * c).collect()).unwrap();
        let labels_x: Vec<u16> = (0..9).collect();
        let labels_y: Vec<u16> = (0..6).collect();
        let (ax, ay) = converge_fields(&fx, &fy, &xy, &yx, &cfg);
        let (sx, sy) = converge_fields(&scale(&fx), &scale(&fy), &xy, &yx, &cfg);
        let a = elect_global(&ax, &ay, &labels_x, &labels_y);
        let b = elect_global(&sx, &sy, &labels_x, &labels_y);
        prop_assert_eq!(a.label(), b.label());
    }

    #[test]
    fn single_synapse_makes_sum_equal_max(fx in field(7), fy in field(5), targets in proptest::collection::vec((0usize..5, 0.1f64..3.0), 7), back in proptest::collection::vec((0usize..7, 0.1f64..3.0), 5)) {
        let mut xy = LateralSynapses::new(Direction::XToY, LearningRule::Hebb, 7, 5);
        for (s, (t, w)) in targets.iter().enumerate() {
            xy.insert(s, *t, *w);
        }
        let mut yx = LateralSynapses::new(Direction::YToX, LearningRule::Hebb, 5, 7);
        for (s, (t, w)) in back.iter().enumerate() {
            yx.insert(s, *t, *w);
        }
        for mode in [ActivityMode::Raw, ActivityMode::Norm] {
            for scope in [NeuronScope::All, NeuronScope::BmuOnly] {
                let max = converge_fields(&fx, &fy, &xy, &yx, &ConvergenceConfig::new(LateralUpdate::Max, mode, scope, 1.0));
                let sum = converge_fields(&fx, &fy, &xy, &yx, &ConvergenceConfig::new(LateralUpdate::Sum, mode, scope, 1.0));
                prop_assert_eq!(max, sum);
            }
        }
    }

    #[test]
    fn wave_step_is_order_independent(acts in proptest::collection::vec(0.0f64..1.0, 20), perm_seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (rows, cols) = (4, 5);
        let mut g = CellGrid::new(rows, cols, &acts).unwrap();
        g.step();
        let snapshot: Vec<CellState> = g.cells().to_vec();
        g.step();
        // oracle: visit cells in a random order, reading only the frozen snapshot
        let mut order: Vec<usize> = (0..rows * cols).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let mut expect = snapshot.clone();
        for &i in &order {
            let (r, c) = (i / cols, i % cols);
            let at = |rr: usize, cc: usize| &snapshot[rr * cols + cc];
            let neighbors = [
                (r > 0).then(|| at(r - 1, c)),
                (r + 1 < rows).then(|| at(r + 1, c)),
                (c > 0).then(|| at(r, c - 1)),
                (c + 1 < cols).then(|| at(r, c + 1)),
            ];
            expect[i] = wave_rule(&Neighborhood { own: &snapshot[i], neighbors }, 2);
        }
        prop_assert_eq!(g.cells(), &expect[..]);
    }
}

/// Oracle for one association direction: replay co-occurrences in order,
/// sprouting at zero on the first and applying Hebb afterwards.
#[test]
fn association_matches_replayed_co_occurrences() {
    let (train, _) = synthetic::TwoModalitySpec { train_per_class: 20, test_per_class: 1, ..Default::default() }.generate(4);
    let schedule = TrainSchedule { epochs: 2, ..TrainSchedule::default() };
    let sx = som::train(4, 4, &train.x, &schedule, 1).unwrap();
    let sy = som::train(3, 5, &train.y_aligned(), &schedule, 2).unwrap();
    let assoc = association::associate(&sx, &sy, &train, LearningRule::Hebb, 0.5, 2).unwrap();

    let mut xy = std::collections::BTreeMap::new();
    let mut yx = std::collections::BTreeMap::new();
    for _ in 0..2 {
        for i in 0..train.len() {
            let (vx, vy) = train.pair(i);
            let (bx, by) = (sx.nearest(vx).unwrap(), sy.nearest(vy).unwrap());
            let ax = (-som::distance(vx, sx.weight(bx))).exp();
            let ay = (-som::distance(vy, sy.weight(by))).exp();
            xy.entry((bx, by)).and_modify(|w: &mut f64| *w += 0.5 * ax * ay).or_insert(0.0);
            yx.entry((by, bx)).and_modify(|w: &mut f64| *w += 0.5 * ay * ax).or_insert(0.0);
        }
    }
    assert_eq!(assoc.xy.count(), xy.len());
    assert_eq!(assoc.yx.count(), yx.len());
    for ((s, t), w) in &xy {
        assert!((assoc.xy.get(*s, *t).unwrap() - w).abs() < 1e-9);
    }
    for ((s, t), w) in &yx {
        assert!((assoc.yx.get(*s, *t).unwrap() - w).abs() < 1e-9);
    }
    // learning one direction leaves the other untouched
    assert_eq!(assoc.xy.direction, Direction::XToY);
    let pruned = assoc.prune(PruneSpec::new(0.2).unwrap()).unwrap();
    assert_eq!(pruned.yx.count(), assoc.yx.prune(PruneSpec::new(0.2).unwrap()).unwrap().count());
}

#[test]
fn divergence_through_identity_synapses_reproduces_labeling() {
    let data = synthetic::gaussian_blobs(4, 200, 6, 0.15, 8);
    let schedule = TrainSchedule { epochs: 4, ..TrainSchedule::default() };
    let som_x = som::train(5, 5, &data, &schedule, 3).unwrap();
    let subset = labeling::select_covering_subset(&data, 0.2, 1, 4).unwrap();
    let mut identity = LateralSynapses::new(Direction::XToY, LearningRule::Hebb, 25, 25);
    for n in 0..25 {
        identity.insert(n, n, 1.0);
    }
    for beta in [0.1, 1.0, 5.0] {
        let direct = labeling::label_som(&som_x, &subset, beta, 4).unwrap();
        let diverged = inference::diverge_label(&som_x, &som_x, &identity, &subset, beta, 4).unwrap();
        assert_eq!(direct.labels, diverged.labels, "beta {beta}");
    }
}

/// Two neurons per map, one synapse each way. Activities and decisions are
/// worked out by hand.
#[test]
fn toy_two_by_two_convergence() {
    let som_x = SomGrid::from_weights(2, 1, 1, vec![0.0, 1.0]).unwrap();
    let som_y = SomGrid::from_weights(2, 1, 1, vec![0.0, 1.0]).unwrap();
    let lx = labeling::LabeledSom::new(som_x, vec![0, 1]).unwrap();
    let ly = labeling::LabeledSom::new(som_y, vec![0, 1]).unwrap();
    let mut xy = LateralSynapses::new(Direction::XToY, LearningRule::Hebb, 2, 2);
    xy.insert(0, 1, 1.0);
    xy.insert(1, 1, 4.0);
    let mut yx = LateralSynapses::new(Direction::YToX, LearningRule::Hebb, 2, 2);
    yx.insert(0, 0, 1.0);
    yx.insert(1, 1, 2.0);
    let assoc = association::Association { xy, yx };
    // x input 0.4: a_x = (e^-0.4, e^-0.6); y input 0.9: a_y = (e^-0.9, e^-0.1)
    let (vx, vy) = ([0.4f32], [0.9f32]);
    let e = |d: f64| (-d).exp();
    let ax = [e(0.4), e(0.6)];
    let ay = [e(0.9), e(0.1)];

    // raw, all neurons, max update
    let cfg = ConvergenceConfig::new(LateralUpdate::Max, ActivityMode::Raw, NeuronScope::All, 1.0);
    let ux = [ax[0] * ay[1], ax[1] * 4.0 * ay[1]];
    let uy = [ay[0] * ax[0], ay[1] * 2.0 * ax[1]];
    let brute = [(ux[0], 0), (ux[1], 1), (uy[0], 0), (uy[1], 1)]
        .into_iter()
        .fold((f64::NEG_INFINITY, 9), |b, c| if c.0 > b.0 { c } else { b });
    let d = inference::converge_classify(&vx, &vy, &lx, &ly, &assoc, &cfg).unwrap();
    assert_eq!(d.label(), Some(brute.1));
    assert_winner(d, MapId::X, 1, ux[1]);

    // normalized, BMUs only: x BMU 0 keeps e^-0.4 and reads the normalized
    // y activity of its target (y1 is the y BMU, so 1.0); y BMU 1 keeps
    // e^-0.1 and reads x1, the x WMU, so 0.0
    let cfg = ConvergenceConfig::new(LateralUpdate::Max, ActivityMode::Norm, NeuronScope::BmuOnly, 1.0);
    let d = inference::converge_classify(&vx, &vy, &lx, &ly, &assoc, &cfg).unwrap();
    assert_winner(d, MapId::X, 0, ax[0]);
}

// inputs are f32, so the hand-computed activities agree to about 1e-7
fn assert_winner(d: GlobalDecision, map: MapId, neuron: usize, activity: f64) {
    match d {
        GlobalDecision::Winner { map: m, neuron: n, label, activity: a } => {
            assert_eq!((m, n, label), (map, neuron, neuron));
            assert!((a - activity).abs() < 1e-6, "{a} vs {activity}");
        }
        GlobalDecision::NoDecision => panic!("expected a winner"),
    }
}

/// Two tight clusters on a 1x2 map: each neuron settles near one cluster
/// mean and gets that cluster's label.
#[test]
fn two_neuron_map_finds_two_clusters() {
    let rows: Vec<Vec<f32>> = (0..40).map(|i| if i % 2 == 0 { vec![0.1, 0.1] } else { vec![0.9, 0.8] }).collect();
    let labels = (0..40).map(|i| (i % 2) as u16).collect();
    let data = FeatureMatrix::from_rows(&rows, labels).unwrap();
    let schedule = TrainSchedule { epochs: 10, sigma_initial: 0.5, ..TrainSchedule::default() };
    let som = som::train(2, 1, &data, &schedule, 0).unwrap();
    let labeled = labeling::label_som(&som, &data, 1.0, 2).unwrap();
    for (proto, label) in [([0.1f32, 0.1], 0usize), ([0.9, 0.8], 1)] {
        let n = som.nearest(&proto).unwrap();
        assert!(som::distance(&proto, som.weight(n)) < 0.05);
        assert_eq!(labeled.label(n), label);
    }
    assert_ne!(som.nearest(&[0.1, 0.1]).unwrap(), som.nearest(&[0.9, 0.8]).unwrap());
}
