//! Datasets, client partitioning and sensitive attributes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::ndmath::{Scalar, Tensor};

const CIFAR_RECORD: usize = 1 + 3072;
const CIFAR_PER_FILE: usize = 10_000;
const CIFAR_FILE_BYTES: usize = CIFAR_RECORD * CIFAR_PER_FILE;

/// Samples stored flat, row-major, alongside their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    sample_shape: Vec<usize>,
    features: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(sample_shape: Vec<usize>, features: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let width: usize = sample_shape.iter().product();
        if width == 0 || sample_shape.is_empty() {
            return Err(Error::invalid("sample_shape", format!("{sample_shape:?} is empty")));
        }
        if features.len() != width * labels.len() {
            return Err(Error::shape("dataset", &[labels.len(), width], &[features.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("labels", format!("label {bad} outside 0..{classes}")));
        }
        Ok(LabeledDataset {
            sample_shape,
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_width(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let w = self.sample_width();
        &self.features[i * w..(i + 1) * w]
    }

    /// Stacks the selected samples into `[B, ...sample_shape]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::invalid("indices", "empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.sample_width());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("indices", format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend(self.sample(i).iter().map(|&v| T::from_f64_lossy(v as f64)));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Concatenation of datasets with identical sample shape and class count.
    pub fn concat(parts: Vec<LabeledDataset>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let mut out = iter.next().ok_or_else(|| Error::invalid("datasets", "nothing to concatenate"))?;
        for part in iter {
            if part.sample_shape != out.sample_shape || part.classes != out.classes {
                return Err(Error::shape("concat", &out.sample_shape, &part.sample_shape));
            }
            out.features.extend(part.features);
            out.labels.extend(part.labels);
        }
        Ok(out)
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.features.truncate(n * self.sample_width());
            self.labels.truncate(n);
        }
    }

    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

fn normalize_pixel(p: u8) -> f32 {
    (p as f32 / 255.0 - 0.5) / 0.5
}

/// Parses one CIFAR-10 binary batch file.
pub fn load_cifar10_batch(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != CIFAR_FILE_BYTES {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            reason: format!("expected {CIFAR_FILE_BYTES} bytes, found {}", bytes.len()),
        });
    }
    parse_cifar_records(path, &bytes)
}

fn parse_cifar_records(path: &Path, bytes: &[u8]) -> Result<LabeledDataset> {
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * 3072);
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= 10 {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                reason: format!("record {r} has label {label}"),
            });
        }
        labels.push(label);
        features.extend(record[1..].iter().map(|&p| normalize_pixel(p)));
    }
    LabeledDataset::new(vec![3, 32, 32], features, labels, 10)
}

/// Loads `data_batch_1.bin` through `data_batch_5.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<LabeledDataset> {
    let parts = (1..=5)
        .map(|i| load_cifar10_batch(&dir.join(format!("data_batch_{i}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::concat(parts)
}

/// Class means for [`synthetic_blobs`]: unit vertices `e_{c mod dims}`,
/// lifted by `⌊c/dims⌋` along the all-ones direction when classes exceed dims.
pub fn blob_means(classes: usize, dims: usize) -> Vec<Vec<f32>> {
    (0..classes)
        .map(|c| {
            let lift = (c / dims.max(1)) as f32;
            let mut m = vec![lift; dims];
            if dims > 0 {
                m[c % dims] += 1.0;
            }
            m
        })
        .collect()
}

/// Isotropic Gaussian clusters with standard deviation `spread` around
/// [`blob_means`]. Samples are interleaved by class.
pub fn synthetic_blobs(classes: usize, dims: usize, per_class: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || per_class == 0 || dims == 0 {
        return Err(Error::invalid(
            "synthetic_blobs",
            format!("need classes >= 2, dims >= 1, per_class >= 1; got {classes}, {dims}, {per_class}"),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread", format!("{spread} is not a non-negative number")));
    }
    let means = blob_means(classes, dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push((m as f64 + spread * z) as f32);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(vec![dims], features, labels, classes)
}

/// Paired samples whose coordinates are bivariate normal with correlation `rho`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPairs {
    pub dims: usize,
    pub rho: f64,
    /// `n × dims`, row-major.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl GaussianPairs {
    pub fn len(&self) -> usize {
        self.x.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Analytic MI of the generating distribution, in nats.
    pub fn true_mi(&self) -> f64 {
        gaussian_true_mi(self.rho, self.dims)
    }

    /// Pearson correlation of the first coordinate.
    pub fn sample_correlation(&self) -> f64 {
        let n = self.len() as f64;
        let xs: Vec<f64> = self.x.iter().step_by(self.dims).copied().collect();
        let ys: Vec<f64> = self.y.iter().step_by(self.dims).copied().collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in xs.iter().zip(&ys) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        sxy / (sxx * syy).sqrt()
    }
}

/// `−(dims/2)·ln(1 − rho²)`.
pub fn gaussian_true_mi(rho: f64, dims: usize) -> f64 {
    -0.5 * dims as f64 * (1.0 - rho * rho).ln()
}

pub fn correlated_gaussian_pairs(rho: f64, dims: usize, n: usize, seed: u64) -> Result<GaussianPairs> {
    if !(rho.abs() < 1.0) {
        return Err(Error::invalid("rho", format!("|{rho}| must be below 1")));
    }
    if dims == 0 || n == 0 {
        return Err(Error::invalid("correlated_gaussian_pairs", format!("dims={dims}, n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (1.0 - rho * rho).sqrt();
    let mut x = Vec::with_capacity(n * dims);
    let mut y = Vec::with_capacity(n * dims);
    for _ in 0..n * dims {
        let a: f64 = StandardNormal.sample(&mut rng);
        let z: f64 = StandardNormal.sample(&mut rng);
        x.push(a);
        y.push(rho * a + noise * z);
    }
    Ok(GaussianPairs { dims, rho, x, y })
}

/// Per-client index lists into a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Checks disjointness, range and non-empty clients against a dataset of `n` samples.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (c, idx) in self.clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::invalid("partition", format!("client {c} is empty")));
            }
            for &i in idx {
                if i >= n || seen[i] {
                    return Err(Error::invalid("partition", format!("index {i} repeated or out of range")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

fn check_clients(clients: usize, n: usize) -> Result<()> {
    if clients == 0 || clients > n {
        return Err(Error::invalid("clients", format!("{clients} clients for {n} samples")));
    }
    Ok(())
}

/// Random permutation of `pool` cut into near-equal shards.
pub fn partition_iid_indices(pool: &[usize], clients: usize, seed: u64) -> Result<PartitionPlan> {
    check_clients(clients, pool.len())?;
    let mut perm = pool.to_vec();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = perm.len() / clients;
    let extra = perm.len() % clients;
    let mut out = Vec::with_capacity(clients);
    let mut start = 0;
    for c in 0..clients {
        let len = base + usize::from(c < extra);
        out.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(PartitionPlan { clients: out })
}

pub fn partition_iid(dataset: &LabeledDataset, clients: usize, seed: u64) -> Result<PartitionPlan> {
    let pool: Vec<usize> = (0..dataset.len()).collect();
    partition_iid_indices(&pool, clients, seed)
}

fn dirichlet(rng: &mut impl Rng, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Dirichlet label skew over the samples in `pool`. Afterwards every client
/// holds at least two samples when the pool allows it, else at least one.
pub fn partition_label_skew_indices(
    dataset: &LabeledDataset,
    pool: &[usize],
    clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::invalid("concentration", format!("{concentration} must be positive")));
    }
    check_clients(clients, pool.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes()];
    for &i in pool {
        by_label[dataset.labels()[i]].push(i);
    }
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for mut idx in by_label {
        idx.shuffle(&mut rng);
        let p = dirichlet(&mut rng, clients, concentration);
        let n = idx.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (c, share) in p.iter().enumerate() {
            cum += share;
            let end = if c + 1 == clients { n } else { ((cum * n as f64).round() as usize).min(n) };
            out[c].extend_from_slice(&idx[start..end.max(start)]);
            start = end.max(start);
        }
    }
    let floor = if pool.len() >= 2 * clients { 2 } else { 1 };
    loop {
        let Some(needy) = (0..clients).find(|&c| out[c].len() < floor) else {
            break;
        };
        let donor = (0..clients).max_by_key(|&c| (out[c].len(), std::cmp::Reverse(c))).expect("clients > 0");
        let moved = out[donor].pop().expect("donor holds more than the floor");
        out[needy].push(moved);
    }
    Ok(PartitionPlan { clients: out })
}

pub fn partition_label_skew(
    dataset: &LabeledDataset,
    clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    let pool: Vec<usize> = (0..dataset.len()).collect();
    partition_label_skew_indices(dataset, &pool, clients, concentration, seed)
}

/// Shuffles `indices` and splits off `round(ratio·n)` for training, keeping
/// both parts non-empty.
pub fn split_local(indices: &[usize], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("ratio", format!("{ratio} must lie in (0, 1)")));
    }
    let n = indices.len();
    if n < 2 {
        return Err(Error::invalid("indices", format!("need at least 2 indices, got {n}")));
    }
    let mut perm = indices.to_vec();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let test = perm.split_off(n_train);
    Ok((perm, test))
}

/// Named binary sensitive attributes, each a total function of the label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeMap {
    classes: usize,
    attributes: Vec<(String, Vec<u8>)>,
}

impl AttributeMap {
    pub fn new(classes: usize, attributes: Vec<(String, Vec<u8>)>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::invalid("attributes", "no attribute defined"));
        }
        for (name, table) in &attributes {
            if table.len() != classes {
                return Err(Error::invalid(
                    "attributes",
                    format!("'{name}' covers {} of {classes} labels", table.len()),
                ));
            }
            if table.iter().any(|&v| v > 1) || !table.contains(&0) || !table.contains(&1) {
                return Err(Error::invalid(
                    "attributes",
                    format!("'{name}' must map labels onto both 0 and 1"),
                ));
            }
        }
        Ok(AttributeMap { classes, attributes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|(n, _)| n.as_str())
    }

    /// Group of `label` under the attribute at position `attr`.
    pub fn value(&self, attr: usize, label: usize) -> u8 {
        self.attributes[attr].1[label]
    }

    /// Parses `label=value` lines. `[name]` starts a new attribute; lines
    /// before any header belong to `custom`. `#` starts a comment.
    pub fn parse(text: &str, classes: usize) -> Result<Self> {
        let mut tables: Vec<(String, BTreeMap<usize, u8>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                tables.push((name.trim().to_string(), BTreeMap::new()));
                continue;
            }
            let bad = || Error::Config {
                key: format!("attributes line {}", lineno + 1),
                reason: format!("expected label=value, got '{raw}'"),
            };
            let (l, v) = line.split_once('=').ok_or_else(bad)?;
            let label: usize = l.trim().parse().map_err(|_| bad())?;
            let value: u8 = v.trim().parse().map_err(|_| bad())?;
            if label >= classes {
                return Err(Error::Config {
                    key: format!("attributes line {}", lineno + 1),
                    reason: format!("label {label} outside 0..{classes}"),
                });
            }
            if tables.is_empty() {
                tables.push(("custom".to_string(), BTreeMap::new()));
            }
            tables.last_mut().expect("pushed above").1.insert(label, value);
        }
        let attributes = tables
            .into_iter()
            .map(|(name, map)| {
                let table: Vec<u8> = (0..classes).map(|l| map.get(&l).copied().unwrap_or(u8::MAX)).collect();
                (name, table)
            })
            .collect();
        AttributeMap::new(classes, attributes)
    }
}

/// One attribute, `label-parity`, equal to `label mod 2`.
pub fn default_attributes(classes: usize) -> Result<AttributeMap> {
    AttributeMap::new(classes, vec![("label-parity".to_string(), (0..classes).map(|l| (l % 2) as u8).collect())])
}
