//! Lateral synapses between two maps: sprouting on first BMU co-occurrence,
//! Hebb or Oja updates afterwards, and per-neuron top-k pruning.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::som::SomGrid;

pub const RLAT_MAGIC: &[u8; 4] = b"RLAT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LearningRule {
    #[default]
    Hebb,
    Oja,
}

impl std::str::FromStr for LearningRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hebb" => Ok(LearningRule::Hebb),
            "oja" => Ok(LearningRule::Oja),
            other => Err(Error::InvalidParameter(format!("unknown learning rule {other:?}"))),
        }
    }
}

impl std::fmt::Display for LearningRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LearningRule::Hebb => "hebb",
            LearningRule::Oja => "oja",
        })
    }
}

impl LearningRule {
    /// New weight after one co-occurrence with source activity `a_src`
    /// and target activity `a_dst`.
    pub fn update(self, w: f64, a_src: f64, a_dst: f64, eta: f64) -> f64 {
        match self {
            LearningRule::Hebb => w + eta * a_src * a_dst,
            LearningRule::Oja => w + eta * (a_src * a_dst - w * a_dst * a_dst),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    XToY = 0,
    YToX = 1,
}

/// Sparse directed synapses, stored per source neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct LateralSynapses {
    pub direction: Direction,
    pub rule: LearningRule,
    targets: usize,
    out: Vec<BTreeMap<usize, f64>>,
}

impl LateralSynapses {
    pub fn new(direction: Direction, rule: LearningRule, sources: usize, targets: usize) -> Self {
        LateralSynapses { direction, rule, targets, out: vec![BTreeMap::new(); sources] }
    }

    pub fn sources(&self) -> usize {
        self.out.len()
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn get(&self, src: usize, dst: usize) -> Option<f64> {
        self.out[src].get(&dst).copied()
    }

    pub fn insert(&mut self, src: usize, dst: usize, w: f64) {
        assert!(dst < self.targets, "target {dst} out of range");
        self.out[src].insert(dst, w);
    }

    /// `(target, weight)` pairs of one source, in target order.
    pub fn outgoing(&self, src: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.out[src].iter().map(|(&d, &w)| (d, w))
    }

    pub fn out_degree(&self, src: usize) -> usize {
        self.out[src].len()
    }

    pub fn count(&self) -> usize {
        self.out.iter().map(BTreeMap::len).sum()
    }

    /// Maximum possible number of synapses, `sources * targets`.
    pub fn potential(&self) -> usize {
        self.sources() * self.targets
    }

    /// Number of incoming synapses per target neuron.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.targets];
        for m in &self.out {
            for &d in m.keys() {
                deg[d] += 1;
            }
        }
        deg
    }

    /// Sprouts the synapse with weight 0 if absent, otherwise applies the
    /// learning rule.
    pub fn observe(&mut self, src: usize, dst: usize, a_src: f64, a_dst: f64, eta: f64) {
        let rule = self.rule;
        self.out[src]
            .entry(dst)
            .and_modify(|w| *w = rule.update(*w, a_src, a_dst, eta))
            .or_insert(0.0);
    }

    /// Per-source top-k pruning, see [`PruneSpec`].
    pub fn prune(&self, spec: PruneSpec) -> Result<LateralSynapses> {
        spec.validate()?;
        let quota = spec.quota(self.targets);
        let out = self
            .out
            .iter()
            .map(|m| {
                if m.len() <= quota {
                    return m.clone();
                }
                let mut ranked: Vec<(usize, f64)> = m.iter().map(|(&d, &w)| (d, w)).collect();
                // strongest first, lower target index first on equal weights
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                ranked.truncate(quota);
                ranked.into_iter().collect()
            })
            .collect();
        Ok(LateralSynapses { direction: self.direction, rule: self.rule, targets: self.targets, out })
    }
}

/// How many synapses each source neuron keeps, as a fraction of the number
/// of neurons in the other map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneSpec {
    pub keep_fraction: f64,
}

impl PruneSpec {
    pub fn new(keep_fraction: f64) -> Result<Self> {
        let s = PruneSpec { keep_fraction };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.keep_fraction > 0.0 && self.keep_fraction <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("keep fraction must be in (0, 1], got {}", self.keep_fraction)))
        }
    }

    /// `ceil(keep_fraction * k_other)`; the 1e-9 slack absorbs products
    /// such as `0.1 * 100 = 10.000000000000002`.
    pub fn quota(&self, k_other: usize) -> usize {
        ((self.keep_fraction * k_other as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

/// Both directions of a learned association.
#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    pub xy: LateralSynapses,
    pub yx: LateralSynapses,
}

impl Association {
    pub fn prune(&self, spec: PruneSpec) -> Result<Association> {
        Ok(Association { xy: self.xy.prune(spec)?, yx: self.yx.prune(spec)? })
    }
}

/// One presentation's unimodal winners and their activities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoActivation {
    pub bmu_x: usize,
    pub a_x: f64,
    pub bmu_y: usize,
    pub a_y: f64,
}

/// Winners of both maps for every pair, with activities on the training
/// kernel (width 1).
pub fn co_activations(som_x: &SomGrid, som_y: &SomGrid, pairs: &PairedDataset) -> Result<Vec<CoActivation>> {
    if pairs.is_empty() {
        return Err(Error::Empty("paired dataset"));
    }
    (0..pairs.len())
        .into_par_iter()
        .map(|i| {
            let (vx, vy) = pairs.pair(i);
            let fx = som_x.activities(vx, 1.0)?;
            let fy = som_y.activities(vy, 1.0)?;
            Ok(CoActivation { bmu_x: fx.bmu, a_x: fx.bmu_activity(), bmu_y: fy.bmu, a_y: fy.bmu_activity() })
        })
        .collect()
}

/// Learns both synapse directions from the paired training set.
/// `epochs` passes are made over the pairs in dataset order.
pub fn associate(
    som_x: &SomGrid,
    som_y: &SomGrid,
    pairs: &PairedDataset,
    rule: LearningRule,
    eta: f64,
    epochs: usize,
) -> Result<Association> {
    let events = co_activations(som_x, som_y, pairs)?;
    let mut xy = LateralSynapses::new(Direction::XToY, rule, som_x.len(), som_y.len());
    let mut yx = LateralSynapses::new(Direction::YToX, rule, som_y.len(), som_x.len());
    for _ in 0..epochs {
        // each direction only touches its own map; sources are independent
        rayon::join(
            || learn_by_source(&mut xy, &events, |e| (e.bmu_x, e.bmu_y, e.a_x, e.a_y), eta),
            || learn_by_source(&mut yx, &events, |e| (e.bmu_y, e.bmu_x, e.a_y, e.a_x), eta),
        );
    }
    Ok(Association { xy, yx })
}

fn learn_by_source<F>(syn: &mut LateralSynapses, events: &[CoActivation], view: F, eta: f64)
where
    F: Fn(&CoActivation) -> (usize, usize, f64, f64) + Sync,
{
    let mut per_source: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); syn.sources()];
    for e in events {
        let (s, d, a_s, a_d) = view(e);
        per_source[s].push((d, a_s, a_d));
    }
    let rule = syn.rule;
    syn.out.par_iter_mut().zip(per_source.par_iter()).for_each(|(m, evs)| {
        for &(d, a_s, a_d) in evs {
            m.entry(d).and_modify(|w| *w = rule.update(*w, a_s, a_d, eta)).or_insert(0.0);
        }
    });
}

/// RLAT layout (little-endian): `"RLAT"`, u8 direction (0 = x->y, 1 = y->x),
/// u8 rule (0 = Hebb, 1 = Oja), u32 sources, u32 targets, u32 synapse count,
/// then `(u16 src, u16 dst, f32 w)` triples sorted by (src, dst).
pub fn write_rlat<W: Write>(mut w: W, syn: &LateralSynapses) -> Result<()> {
    if syn.sources() > u16::MAX as usize + 1 || syn.targets() > u16::MAX as usize + 1 {
        return Err(Error::InvalidParameter("maps larger than 65536 neurons cannot be stored".into()));
    }
    w.write_all(RLAT_MAGIC)?;
    w.write_u8(syn.direction as u8)?;
    w.write_u8(match syn.rule {
        LearningRule::Hebb => 0,
        LearningRule::Oja => 1,
    })?;
    w.write_u32::<LittleEndian>(syn.sources() as u32)?;
    w.write_u32::<LittleEndian>(syn.targets() as u32)?;
    w.write_u32::<LittleEndian>(syn.count() as u32)?;
    for s in 0..syn.sources() {
        for (d, weight) in syn.outgoing(s) {
            w.write_u16::<LittleEndian>(s as u16)?;
            w.write_u16::<LittleEndian>(d as u16)?;
            w.write_f32::<LittleEndian>(weight as f32)?;
        }
    }
    Ok(())
}

pub fn read_rlat<R: Read>(mut r: R) -> Result<LateralSynapses> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RLAT_MAGIC {
        return Err(Error::BadTag { expected: "RLAT", found: String::from_utf8_lossy(&magic).into_owned() });
    }
    let direction = match r.read_u8()? {
        0 => Direction::XToY,
        1 => Direction::YToX,
        t => return Err(Error::InvalidParameter(format!("bad direction tag {t}"))),
    };
    let rule = match r.read_u8()? {
        0 => LearningRule::Hebb,
        1 => LearningRule::Oja,
        t => return Err(Error::InvalidParameter(format!("bad rule tag {t}"))),
    };
    let sources = r.read_u32::<LittleEndian>()? as usize;
    let targets = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut syn = LateralSynapses::new(direction, rule, sources, targets);
    for _ in 0..count {
        let s = r.read_u16::<LittleEndian>()? as usize;
        let d = r.read_u16::<LittleEndian>()? as usize;
        let w = r.read_f32::<LittleEndian>()? as f64;
        if s >= sources || d >= targets {
            return Err(Error::InvalidParameter(format!("synapse ({s}, {d}) outside {sources}x{targets}")));
        }
        syn.insert(s, d, w);
    }
    Ok(syn)
}

pub fn save_rlat(path: impl AsRef<Path>, syn: &LateralSynapses) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_rlat(&mut w, syn)?;
    w.flush()?;
    Ok(())
}

pub fn load_rlat(path: impl AsRef<Path>) -> Result<LateralSynapses> {
    read_rlat(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sprout_then_hebb() {
        let mut s = LateralSynapses::new(Direction::XToY, LearningRule::Hebb, 2, 2);
        s.observe(0, 1, 0.5, 0.4, 1.0);
        assert_eq!(s.get(0, 1), Some(0.0));
        s.observe(0, 1, 0.5, 0.4, 1.0);
        assert!((s.get(0, 1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(s.get(1, 0), None);
    }

    #[test]
    fn oja_step() {
        let w = LearningRule::Oja.update(0.2, 0.5, 0.4, 1.0);
        assert!((w - 0.368).abs() < 1e-15);
    }

    #[test]
    fn prune_top_k() {
        let mut s = LateralSynapses::new(Direction::XToY, LearningRule::Hebb, 1, 3);
        s.insert(0, 0, 1.0);
        s.insert(0, 1, 5.0);
        s.insert(0, 2, 3.0);
        let p = s.prune(PruneSpec { keep_fraction: 0.5 }).unwrap();
        assert_eq!(p.outgoing(0).collect::<Vec<_>>(), vec![(1, 5.0), (2, 3.0)]);
        assert_eq!(s.prune(PruneSpec { keep_fraction: 1.0 }).unwrap(), s);
        assert!(s.prune(PruneSpec { keep_fraction: 0.0 }).is_err());
        assert!(PruneSpec::new(-0.5).is_err());
    }

    #[test]
    fn quota_rounding() {
        assert_eq!(PruneSpec { keep_fraction: 0.1 }.quota(100), 10);
        assert_eq!(PruneSpec { keep_fraction: 0.05 }.quota(256), 13);
        assert_eq!(PruneSpec { keep_fraction: 0.25 }.quota(10), 3);
        assert_eq!(PruneSpec { keep_fraction: 1.0 }.quota(7), 7);
    }

    #[test]
    fn rlat_round_trip() {
        let mut s = LateralSynapses::new(Direction::YToX, LearningRule::Oja, 3, 4);
        s.insert(0, 3, 0.25);
        s.insert(2, 1, 1.5);
        let mut buf = Vec::new();
        write_rlat(&mut buf, &s).unwrap();
        assert_eq!(buf.len(), 4 + 2 + 12 + 2 * 8);
        assert_eq!(read_rlat(&buf[..]).unwrap(), s);
        buf[0] = b'X';
        assert!(read_rlat(&buf[..]).is_err());
    }
}
