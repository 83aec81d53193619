//! Input matrices: IDX/RSM1 loading, normalization and cross-modal pairing.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const RSM1_MAGIC: &[u8; 4] = b"RSM1";

/// Dense row-major sample matrix with one integer class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
    labels: Vec<u16>,
}

impl FeatureMatrix {
    pub fn new(cols: usize, values: Vec<f32>, labels: Vec<u16>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::InvalidParameter("feature dimension must be positive".into()));
        }
        if values.len() != labels.len() * cols {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * cols,
                found: values.len(),
            });
        }
        Ok(FeatureMatrix { rows: labels.len(), cols, values, labels })
    }

    pub fn from_rows(rows: &[Vec<f32>], labels: Vec<u16>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.len() != labels.len() {
            return Err(Error::CountMismatch { images: rows.len(), labels: labels.len() });
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, found: r.len() });
            }
            values.extend_from_slice(r);
        }
        Self::new(cols, values, labels)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Number of classes C, taken as `max(label) + 1`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        FeatureMatrix { rows: indices.len(), cols: self.cols, values, labels }
    }

    /// Per-feature min-max rescaling to [0, 1] using this matrix's own range.
    /// Constant features map to 0.
    pub fn normalize_minmax(&self) -> FeatureMatrix {
        let (mins, maxs) = self.column_ranges();
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = &mut out.values[r * self.cols + c];
                *v = minmax_scale(*v as f64, mins[c], maxs[c]) as f32;
            }
        }
        out
    }

    fn column_ranges(&self) -> (Vec<f64>, Vec<f64>) {
        let mut mins = vec![f64::INFINITY; self.cols];
        let mut maxs = vec![f64::NEG_INFINITY; self.cols];
        for r in 0..self.rows {
            for (c, &v) in self.row(r).iter().enumerate() {
                mins[c] = mins[c].min(v as f64);
                maxs[c] = maxs[c].max(v as f64);
            }
        }
        (mins, maxs)
    }

    /// SHA-256 over the RSM1 encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::with_capacity(12 + self.values.len() * 4 + self.labels.len() * 2);
        write_rsm1(&mut buf, self).expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

fn minmax_scale(v: f64, min: f64, max: f64) -> f64 {
    let span = max - min;
    if span > 0.0 {
        ((v - min) / span).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_magic(cur: &mut &[u8], expected: u32) -> Result<()> {
    let found = cur.read_u32::<BigEndian>().map_err(|_| Error::Truncated { expected: 4, found: 0 })?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

fn read_be_u32(cur: &mut &[u8]) -> Result<usize> {
    let have = cur.len();
    cur.read_u32::<BigEndian>()
        .map(|v| v as usize)
        .map_err(|_| Error::Truncated { expected: 4, found: have })
}

/// Decodes an IDX3 ubyte image payload. Returns (count, pixels per image, bytes).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = bytes;
    read_magic(&mut cur, IDX_IMAGES_MAGIC)?;
    let n = read_be_u32(&mut cur)?;
    let rows = read_be_u32(&mut cur)?;
    let cols = read_be_u32(&mut cur)?;
    let expected = n * rows * cols;
    if cur.len() < expected {
        return Err(Error::Truncated { expected, found: cur.len() });
    }
    Ok((n, rows * cols, cur[..expected].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u16>> {
    let mut cur = bytes;
    read_magic(&mut cur, IDX_LABELS_MAGIC)?;
    let n = read_be_u32(&mut cur)?;
    if cur.len() < n {
        return Err(Error::Truncated { expected: n, found: cur.len() });
    }
    Ok(cur[..n].iter().map(|&b| b as u16).collect())
}

/// Loads an IDX image file and its label file (plain or gzipped).
/// Pixels are scaled to [0, 1] by dividing by 255.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let (n, dim, pixels) = parse_idx_images(&open_maybe_gz(images.as_ref())?)?;
    let labels = parse_idx_labels(&open_maybe_gz(labels.as_ref())?)?;
    if labels.len() != n {
        return Err(Error::CountMismatch { images: n, labels: labels.len() });
    }
    let values = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    FeatureMatrix::new(dim, values, labels)
}

/// Writes an uncompressed IDX image/label pair. Pixels are quantized with
/// `round(v * 255)`; `side` gives the (rows, cols) image shape.
pub fn write_idx(
    m: &FeatureMatrix,
    side: (usize, usize),
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<()> {
    if side.0 * side.1 != m.cols {
        return Err(Error::DimensionMismatch { expected: m.cols, found: side.0 * side.1 });
    }
    let mut w = BufWriter::new(File::create(images)?);
    w.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    w.write_u32::<BigEndian>(m.rows as u32)?;
    w.write_u32::<BigEndian>(side.0 as u32)?;
    w.write_u32::<BigEndian>(side.1 as u32)?;
    for &v in &m.values {
        w.write_u8((v.clamp(0.0, 1.0) * 255.0).round() as u8)?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(labels)?);
    w.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(m.rows as u32)?;
    for &l in &m.labels {
        w.write_u8(l as u8)?;
    }
    w.flush()?;
    Ok(())
}

/// RSM1 layout: `"RSM1"`, u32 rows, u32 cols, f32 data row-major, u16 labels.
/// All integers and floats little-endian.
pub fn write_rsm1<W: Write>(mut w: W, m: &FeatureMatrix) -> io::Result<()> {
    w.write_all(RSM1_MAGIC)?;
    w.write_u32::<LittleEndian>(m.rows as u32)?;
    w.write_u32::<LittleEndian>(m.cols as u32)?;
    for &v in &m.values {
        w.write_f32::<LittleEndian>(v)?;
    }
    for &l in &m.labels {
        w.write_u16::<LittleEndian>(l)?;
    }
    Ok(())
}

pub fn read_rsm1<R: Read>(mut r: R) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::Truncated { expected: 12, found: bytes.len() });
    }
    if &bytes[..4] != RSM1_MAGIC {
        return Err(Error::BadTag {
            expected: "RSM1",
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let mut cur = &bytes[4..];
    let rows = cur.read_u32::<LittleEndian>()? as usize;
    let cols = cur.read_u32::<LittleEndian>()? as usize;
    let expected = rows * cols * 4 + rows * 2;
    if cur.len() < expected {
        return Err(Error::Truncated { expected, found: cur.len() });
    }
    let mut values = vec![0f32; rows * cols];
    cur.read_f32_into::<LittleEndian>(&mut values)?;
    let mut labels = vec![0u16; rows];
    cur.read_u16_into::<LittleEndian>(&mut labels)?;
    FeatureMatrix::new(cols, values, labels)
}

pub fn save_rsm1(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_rsm1(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_rsm1(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    read_rsm1(BufReader::new(File::open(path)?))
}

/// Loads a feature matrix from either an RSM1 file or an IDX pair
/// given as `images.idx[.gz],labels.idx[.gz]`.
pub fn load_any(spec: &str) -> Result<FeatureMatrix> {
    match spec.split_once(',') {
        Some((images, labels)) => load_idx(images.trim(), labels.trim()),
        None => load_rsm1(spec),
    }
}

/// CSV dump: one row per sample, label first.
pub fn write_csv<W: Write>(mut w: W, m: &FeatureMatrix) -> io::Result<()> {
    write!(w, "label")?;
    for c in 0..m.cols {
        write!(w, ",f{c}")?;
    }
    writeln!(w)?;
    for r in 0..m.rows {
        write!(w, "{}", m.labels[r])?;
        for v in m.row(r) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Z-scores every feature with training-set mean and (population) standard
/// deviation, then min-max rescales with the training z-score range. Test
/// values are clamped to [0, 1]. Zero-variance features map to 0.
pub fn standardize_then_minmax(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    if train.is_empty() {
        return Err(Error::Empty("training matrix"));
    }
    if test.cols != train.cols {
        return Err(Error::DimensionMismatch { expected: train.cols, found: test.cols });
    }
    let cols = train.cols;
    let n = train.rows as f64;
    let mut mean = vec![0f64; cols];
    for r in 0..train.rows {
        for (c, &v) in train.row(r).iter().enumerate() {
            mean[c] += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; cols];
    for r in 0..train.rows {
        for (c, &v) in train.row(r).iter().enumerate() {
            let d = v as f64 - mean[c];
            var[c] += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();

    let zscore = |c: usize, v: f32| -> Option<f64> {
        (std[c] > 0.0).then(|| (v as f64 - mean[c]) / std[c])
    };
    let mut zmin = vec![f64::INFINITY; cols];
    let mut zmax = vec![f64::NEG_INFINITY; cols];
    for r in 0..train.rows {
        for (c, &v) in train.row(r).iter().enumerate() {
            if let Some(z) = zscore(c, v) {
                zmin[c] = zmin[c].min(z);
                zmax[c] = zmax[c].max(z);
            }
        }
    }
    let apply = |m: &FeatureMatrix| -> FeatureMatrix {
        let mut out = m.clone();
        for r in 0..m.rows {
            for c in 0..cols {
                let v = &mut out.values[r * cols + c];
                *v = match zscore(c, *v) {
                    Some(z) => minmax_scale(z, zmin[c], zmax[c]) as f32,
                    None => 0.0,
                };
            }
        }
        out
    };
    Ok((apply(train), apply(test)))
}

/// Two modalities plus a row-to-row pairing from `x` into `y`.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub x: FeatureMatrix,
    pub y: FeatureMatrix,
    pub pairing: Vec<usize>,
}

impl PairedDataset {
    /// Pairs that are already aligned row by row.
    pub fn aligned(x: FeatureMatrix, y: FeatureMatrix) -> Result<Self> {
        if x.rows != y.rows {
            return Err(Error::CountMismatch { images: x.rows, labels: y.rows });
        }
        if let Some(i) = (0..x.rows).find(|&i| x.labels[i] != y.labels[i]) {
            return Err(Error::InvalidParameter(format!("row {i} pairs different classes")));
        }
        let pairing = (0..x.rows).collect();
        Ok(PairedDataset { x, y, pairing })
    }

    pub fn len(&self) -> usize {
        self.pairing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairing.is_empty()
    }

    pub fn pair(&self, i: usize) -> (&[f32], &[f32]) {
        (self.x.row(i), self.y.row(self.pairing[i]))
    }

    pub fn label(&self, i: usize) -> usize {
        self.x.label(i)
    }

    pub fn num_classes(&self) -> usize {
        self.x.num_classes().max(self.y.num_classes())
    }

    /// The y-modality rows in pairing order, labeled like x.
    pub fn y_aligned(&self) -> FeatureMatrix {
        self.y.select(&self.pairing)
    }
}

/// Pairs every x-row with a same-class y-row. Within a class, y-rows are
/// shuffled with the seed; if the class has fewer y-rows than x-rows, every
/// y-row is used once and the remainder is drawn uniformly with replacement.
pub fn pair_by_class(x: &FeatureMatrix, y: &FeatureMatrix, seed: u64) -> Result<PairedDataset> {
    let classes = x.num_classes().max(y.num_classes());
    let mut by_class_y: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..y.rows {
        by_class_y[y.label(i)].push(i);
    }
    let mut by_class_x: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..x.rows {
        by_class_x[x.label(i)].push(i);
    }
    let mut rng = rng::stream(seed, Stream::Pairing);
    let mut pairing = vec![0usize; x.rows];
    for c in 0..classes {
        let xs = &by_class_x[c];
        if xs.is_empty() {
            continue;
        }
        let mut ys = by_class_y[c].clone();
        if ys.is_empty() {
            return Err(Error::MissingClass(c));
        }
        ys.shuffle(&mut rng);
        let base = ys.len();
        while ys.len() < xs.len() {
            ys.push(ys[rng.random_range(0..base)]);
        }
        if ys.len() > base {
            ys.shuffle(&mut rng);
        }
        for (k, &xi) in xs.iter().enumerate() {
            pairing[xi] = ys[k];
        }
    }
    Ok(PairedDataset { x: x.clone(), y: y.clone(), pairing })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.write_u32::<BigEndian>(IDX_IMAGES_MAGIC).unwrap();
        b.write_u32::<BigEndian>(n).unwrap();
        b.write_u32::<BigEndian>(rows).unwrap();
        b.write_u32::<BigEndian>(cols).unwrap();
        b.extend_from_slice(pixels);
        b
    }

    fn label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
        b.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_two_by_two_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_bytes(1, 2, 2, &[0, 255, 128, 64])).unwrap();
        std::fs::write(&lab, label_bytes(&[3])).unwrap();
        let m = load_idx(&img, &lab).unwrap();
        assert_eq!(m.rows(), 1);
        assert_eq!(m.cols(), 4);
        assert_eq!(m.row(0), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert_eq!(m.label(0), 3);
    }

    #[test]
    fn idx_zero_image() {
        let (n, dim, px) = parse_idx_images(&idx_bytes(1, 28, 28, &[0; 784])).unwrap();
        assert_eq!((n, dim), (1, 784));
        assert!(px.iter().all(|&p| p == 0));
    }

    #[test]
    fn idx_errors() {
        let mut bad = idx_bytes(1, 2, 2, &[1, 2, 3, 4]);
        bad[3] = 0x02;
        assert!(matches!(parse_idx_images(&bad), Err(Error::BadMagic { .. })));
        let short = idx_bytes(2, 2, 2, &[1, 2, 3, 4]);
        assert!(matches!(parse_idx_images(&short), Err(Error::Truncated { .. })));
        assert!(matches!(parse_idx_labels(&label_bytes(&[1, 2])[..9]), Err(Error::Truncated { .. })));

        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_bytes(2, 1, 2, &[1, 2, 3, 4])).unwrap();
        std::fs::write(&lab, label_bytes(&[1, 2, 3])).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::CountMismatch { images: 2, labels: 3 })));
    }

    #[test]
    fn idx_gzip_is_transparent() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.gz");
        let lab = dir.path().join("lab.gz");
        let mut e = GzEncoder::new(File::create(&img).unwrap(), flate2::Compression::fast());
        e.write_all(&idx_bytes(2, 1, 2, &[0, 51, 102, 255])).unwrap();
        e.finish().unwrap();
        let mut e = GzEncoder::new(File::create(&lab).unwrap(), flate2::Compression::fast());
        e.write_all(&label_bytes(&[0, 1])).unwrap();
        e.finish().unwrap();
        let m = load_idx(&img, &lab).unwrap();
        assert_eq!(m.row(1), &[102.0 / 255.0, 1.0]);
    }

    #[test]
    fn rsm1_bad_tag() {
        let err = read_rsm1(&b"RSM2\0\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::BadTag { .. }));
        let err = read_rsm1(&b"RSM1\x01\0\0\0\x01\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
    }

    #[test]
    fn standardize_example_column() {
        let train = FeatureMatrix::new(2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0], vec![0, 0, 0]).unwrap();
        let (t, _) = standardize_then_minmax(&train, &train).unwrap();
        let col0: Vec<f32> = (0..3).map(|r| t.row(r)[0]).collect();
        let col1: Vec<f32> = (0..3).map(|r| t.row(r)[1]).collect();
        assert_eq!(col0, vec![0.0, 0.5, 1.0]);
        assert_eq!(col1, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn standardize_uses_train_stats_and_clamps_test() {
        let train = FeatureMatrix::new(1, vec![1.0, 2.0, 3.0], vec![0, 0, 0]).unwrap();
        let test = FeatureMatrix::new(1, vec![0.0, 2.5, 10.0], vec![0, 0, 0]).unwrap();
        let (_, t) = standardize_then_minmax(&train, &test).unwrap();
        assert_eq!(t.values(), &[0.0, 0.75, 1.0]);
        let empty = FeatureMatrix::new(1, vec![], vec![]).unwrap();
        assert!(standardize_then_minmax(&empty, &test).is_err());
    }

    #[test]
    fn pairing_duplicates_short_class() {
        let x = FeatureMatrix::new(1, vec![0.0; 10], vec![7; 10]).unwrap();
        let y = FeatureMatrix::new(1, (0..4).map(|i| i as f32).collect(), vec![7; 4]).unwrap();
        let p = pair_by_class(&x, &y, 3).unwrap();
        assert_eq!(p.len(), 10);
        for j in 0..4 {
            assert!(p.pairing.contains(&j), "y-row {j} unused");
        }
    }

    #[test]
    fn pairing_bijection_when_counts_match() {
        let x = FeatureMatrix::new(1, vec![0.0; 6], vec![0, 1, 2, 0, 1, 2]).unwrap();
        let y = FeatureMatrix::new(1, vec![0.0; 6], vec![2, 2, 1, 1, 0, 0]).unwrap();
        let p = pair_by_class(&x, &y, 11).unwrap();
        let mut used = p.pairing.clone();
        used.sort_unstable();
        assert_eq!(used, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(p.pairing, pair_by_class(&x, &y, 11).unwrap().pairing);
    }

    #[test]
    fn pairing_missing_class() {
        let x = FeatureMatrix::new(1, vec![0.0; 2], vec![0, 1]).unwrap();
        let y = FeatureMatrix::new(1, vec![0.0; 2], vec![0, 0]).unwrap();
        assert!(matches!(pair_by_class(&x, &y, 0), Err(Error::MissingClass(1))));
    }

    #[test]
    fn csv_header_and_rows() {
        let m = FeatureMatrix::new(2, vec![0.5, 1.0], vec![4]).unwrap();
        let mut out = Vec::new();
        write_csv(&mut out, &m).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "label,f0,f1\n4,0.5,1\n");
    }
}
