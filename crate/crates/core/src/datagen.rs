//! Datasets and heterogeneity-controlled client partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::nncore::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Redraws of one class's proportions allowed while a client is still empty.
pub const EMPTY_SHARD_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(n, d)` feature matrix.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _) = features.batch_dims()?;
        if features.shape().len() != 2 || n != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {l} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        label_histogram(&self.labels, 0..self.len(), self.num_classes)
    }

    /// Holds out `test_fraction` of every class (rounded down, at least one
    /// sample stays in training) and returns `(train, test)`.
    pub fn split_stratified(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::config(format!(
                "test fraction must be in [0, 1), got {test_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for mut idx in class_indices(&self.labels, self.num_classes) {
            idx.shuffle(&mut rng);
            let k = ((idx.len() as f64 * test_fraction) as usize).min(idx.len().saturating_sub(1));
            test.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

fn class_indices(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

fn label_histogram(
    labels: &[usize],
    indices: impl Iterator<Item = usize>,
    num_classes: usize,
) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for i in indices {
        h[labels[i]] += 1;
    }
    h
}

/// Disjoint index sets, one per client, covering the whole training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub client_shards: Vec<Vec<usize>>,
    /// Dirichlet concentration, or `None` for an i.i.d. split.
    pub alpha: Option<f64>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_shards.len()
    }

    pub fn total(&self) -> usize {
        self.client_shards.iter().map(Vec::len).sum()
    }

    /// Label histogram of every shard.
    pub fn histograms(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        self.client_shards
            .iter()
            .map(|s| label_histogram(labels, s.iter().copied(), num_classes))
            .collect()
    }

    /// Average Shannon entropy (nats) of the per-client label distributions.
    pub fn mean_label_entropy(&self, labels: &[usize], num_classes: usize) -> f64 {
        let hs = self.histograms(labels, num_classes);
        let total: f64 = hs.iter().map(|h| entropy(h)).sum();
        total / hs.len() as f64
    }
}

pub fn entropy(histogram: &[usize]) -> f64 {
    let n: usize = histogram.iter().sum();
    if n == 0 {
        return 0.0;
    }
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

fn check_clients(n: usize, num_clients: usize) -> Result<()> {
    if num_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if num_clients > n {
        return Err(Error::config(format!(
            "{num_clients} clients cannot each receive a sample from {n} samples"
        )));
    }
    Ok(())
}

/// Shuffles all indices and deals them into near-equal shards.
pub fn iid_partition(n: usize, num_clients: usize, seed: u64) -> Result<Partition> {
    check_clients(n, num_clients)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut shards = vec![Vec::new(); num_clients];
    for (k, i) in idx.into_iter().enumerate() {
        shards[k % num_clients].push(i);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(Partition {
        client_shards: shards,
        alpha: None,
    })
}

fn dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(format!("alpha {alpha}: {e}")))?;
    // Very small alpha can underflow every draw to zero; draw again.
    for _ in 0..1000 {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 && s.is_finite() {
            return Ok(g.into_iter().map(|x| x / s).collect());
        }
    }
    Err(Error::Numerical(format!("Dirichlet({alpha}) draws kept underflowing")))
}

/// Cuts a shuffled index list into consecutive slices sized by `proportions`.
fn slice_by_proportions(idx: &[usize], proportions: &[f64]) -> Vec<Vec<usize>> {
    let n = idx.len();
    let mut out = Vec::with_capacity(proportions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (c, p) in proportions.iter().enumerate() {
        cum += p;
        let end = if c + 1 == proportions.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).clamp(start, n)
        };
        out.push(idx[start..end].to_vec());
        start = end;
    }
    out
}

/// Label-skewed split: for every class, client proportions are drawn from
/// `Dirichlet(alpha, ..., alpha)` and the class's shuffled indices are cut
/// into consecutive slices of those sizes.
///
/// While some client has no samples, the proportions of one class (cycling
/// from the largest class) are redrawn, at most [`EMPTY_SHARD_RETRIES`]
/// times. Any client still empty afterwards takes one sample from the
/// currently largest shard.
pub fn dirichlet_partition(
    labels: &[usize],
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    check_clients(labels.len(), num_clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be positive, got {alpha}")));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = class_indices(labels, num_classes);
    for idx in &mut per_class {
        idx.shuffle(&mut rng);
    }
    let mut slices: Vec<Vec<Vec<usize>>> = per_class
        .iter()
        .map(|idx| Ok(slice_by_proportions(idx, &dirichlet(alpha, num_clients, &mut rng)?)))
        .collect::<Result<_>>()?;

    let sizes = |slices: &Vec<Vec<Vec<usize>>>| -> Vec<usize> {
        (0..num_clients)
            .map(|c| slices.iter().map(|s| s[c].len()).sum())
            .collect()
    };
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by_key(|&c| std::cmp::Reverse(per_class[c].len()));
    for attempt in 0..EMPTY_SHARD_RETRIES {
        if sizes(&slices).iter().all(|&s| s > 0) {
            break;
        }
        let class = order[attempt % order.len()];
        slices[class] = slice_by_proportions(&per_class[class], &dirichlet(alpha, num_clients, &mut rng)?);
    }

    let mut shards: Vec<Vec<usize>> = (0..num_clients)
        .map(|c| slices.iter().flat_map(|s| s[c].iter().copied()).collect())
        .collect();
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..num_clients)
            .max_by_key(|&c| (shards[c].len(), std::cmp::Reverse(c)))
            .expect("at least one client");
        let moved = shards[donor].pop().expect("donor has samples");
        shards[empty].push(moved);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(Partition {
        client_shards: shards,
        alpha: Some(alpha),
    })
}

/// Gaussian blobs: each class mean is a random unit vector scaled by
/// `spread`, samples add unit-variance isotropic noise.
pub fn synth_classification(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::config(format!(
            "synthetic data needs positive classes/dim/per_class, got {num_classes}/{dim}/{per_class}"
        )));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::config(format!("spread must be positive, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| spread * x / norm).collect()
        })
        .collect();
    let n = num_classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            for m in mean {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(m + noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(n, dim, features)?, labels, num_classes)
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset,
            reason: "file ends inside the header".into(),
        })
}

/// Loads an IDX image/label pair (MNIST layout). Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;
    let fmt = |path: &Path, offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        reason,
    };

    let magic = read_u32_be(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(fmt(images_path, 0, format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = read_u32_be(&img, 4, images_path)? as usize;
    let rows = read_u32_be(&img, 8, images_path)? as usize;
    let cols = read_u32_be(&img, 12, images_path)? as usize;
    let dim = rows * cols;
    let body = &img[16..];
    if body.len() != n * dim {
        return Err(fmt(
            images_path,
            16 + body.len().min(n * dim),
            format!("expected {} pixel bytes, found {}", n * dim, body.len()),
        ));
    }

    let magic = read_u32_be(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(fmt(labels_path, 0, format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let m = read_u32_be(&lab, 4, labels_path)? as usize;
    if m != n {
        return Err(fmt(labels_path, 4, format!("{m} labels for {n} images")));
    }
    let body_l = &lab[8..];
    if body_l.len() != m {
        return Err(fmt(
            labels_path,
            8 + body_l.len().min(m),
            format!("expected {m} label bytes, found {}", body_l.len()),
        ));
    }
    let labels: Vec<usize> = body_l.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = body.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(Tensor::matrix(n, dim, features)?, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn assert_exact(p: &Partition, n: usize) {
        assert_eq!(p.total(), n);
        let all: BTreeSet<usize> = p.client_shards.iter().flatten().copied().collect();
        assert_eq!(all.len(), n);
        assert!(p.client_shards.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn single_client_gets_everything() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let p = dirichlet_partition(&labels, 1, 0.3, 1).unwrap();
        assert_eq!(p.client_shards, vec![(0..50).collect::<Vec<_>>()]);
    }

    #[test]
    fn partitions_are_exact_covers() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        for alpha in [0.05, 0.1, 1.0, 100.0] {
            for seed in 0..3 {
                assert_exact(&dirichlet_partition(&labels, 100, alpha, seed).unwrap(), 1000);
            }
        }
        assert_exact(&iid_partition(1000, 7, 2).unwrap(), 1000);
    }

    #[test]
    fn huge_alpha_tracks_global_histogram() {
        let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
        let p = dirichlet_partition(&labels, 10, 1e6, 4).unwrap();
        for h in p.histograms(&labels, 10) {
            let n: usize = h.iter().sum();
            for c in h {
                let frac = c as f64 / n as f64;
                assert!((frac - 0.1).abs() < 0.005, "{frac}");
            }
        }
    }

    #[test]
    fn iid_shards_are_close_to_global() {
        let labels: Vec<usize> = (0..4000).map(|i| i % 10).collect();
        let p = iid_partition(4000, 10, 8).unwrap();
        for h in p.histograms(&labels, 10) {
            let n: usize = h.iter().sum();
            assert!(n >= 200);
            let tv: f64 = h.iter().map(|&c| (c as f64 / n as f64 - 0.1).abs()).sum::<f64>() / 2.0;
            assert!(tv < 0.1);
        }
    }

    #[test]
    fn partition_errors() {
        let labels = vec![0, 1, 0];
        assert!(matches!(dirichlet_partition(&labels, 4, 0.5, 0), Err(Error::Config(_))));
        assert!(matches!(dirichlet_partition(&labels, 2, 0.0, 0), Err(Error::Config(_))));
        assert!(matches!(iid_partition(3, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_is_deterministic_and_separable() {
        let a = synth_classification(2, 5, 50, 10.0, 42).unwrap();
        let b = synth_classification(2, 5, 50, 10.0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        // nearest-centroid classifier on training data
        let d = a.dim();
        let mut centroids = vec![vec![0.0; d]; 2];
        for (i, &l) in a.labels.iter().enumerate() {
            for k in 0..d {
                centroids[l][k] += a.features.data()[i * d + k] / 50.0;
            }
        }
        for (i, &l) in a.labels.iter().enumerate() {
            let x = &a.features.data()[i * d..(i + 1) * d];
            let dist = |c: &Vec<f64>| x.iter().zip(c).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
            let pred = if dist(&centroids[0]) <= dist(&centroids[1]) { 0 } else { 1 };
            assert_eq!(pred, l);
        }
        assert!(synth_classification(2, 5, 0, 1.0, 0).is_err());
    }

    #[test]
    fn stratified_split_keeps_classes() {
        let d = synth_classification(4, 3, 20, 2.0, 1).unwrap();
        let (tr, te) = d.split_stratified(0.25, 5).unwrap();
        assert_eq!(tr.len(), 60);
        assert_eq!(te.class_histogram(), vec![5; 4]);
    }

    fn idx_pair(dir: &Path, n_img: u32, n_lab: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&n_img.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for k in 0..n_img * 4 {
            img.push((k * 60) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n_lab.to_be_bytes());
        for k in 0..n_lab {
            lab.push((k % 2) as u8);
        }
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 2, 2);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 4);
        assert_eq!(d.labels, vec![0, 1]);
        assert_eq!(d.features.data()[1], 60.0 / 255.0);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 2, 3);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 4, .. })));

        let (ip, lp) = idx_pair(dir.path(), 2, 2);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        fs::write(&ip, &bytes[..6]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 4, .. })));

        let mut bad = bytes.clone();
        bad[3] = 0x01;
        fs::write(&ip, bad).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 0, .. })));
    }
}
