//! Datasets: synthetic generation, IDX ingestion, stratified splitting and
//! Dirichlet label-skew partitioning across clients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::mix;
use crate::tensor::Tensor;

/// Images with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn empty(classes: usize) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of each class, ascending.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub noise_sigma: f64,
    /// Set by the caller; experiment configs derive it from their own seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            samples_per_class: 200,
            image_h: 16,
            image_w: 16,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Integer wave vectors of the class templates. Each pattern has period 4
/// along both axes, so every 4-aligned tile of a template is identical.
const WAVE_VECTORS: [(i64, i64); 8] = [(1, 0), (0, 1), (1, 1), (1, 3), (2, 0), (0, 2), (2, 1), (1, 2)];

/// Noise-free template of class `c`: a plane wave `0.5 + 0.5·cos(2π(a·x + b·y)/4 + φ)`
/// with a class-specific wave vector (and phase once the vectors run out).
pub fn class_template(c: usize, h: usize, w: usize) -> Tensor {
    let (a, b) = WAVE_VECTORS[c % WAVE_VECTORS.len()];
    let phase = (c / WAVE_VECTORS.len()) as f64 * 0.7;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let arg = std::f64::consts::TAU * ((a * x + b * y) as f64) / 4.0 + phase;
            data.push(0.5 + 0.5 * arg.cos());
        }
    }
    Tensor::from_parts(vec![h, w, 1], data)
}

/// Class templates plus i.i.d. Gaussian pixel noise, clamped to `[0, 1]`.
/// Samples are ordered class-major.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.samples_per_class == 0 || spec.image_h == 0 || spec.image_w == 0 {
        return Err(Error::Config("synthetic counts must be positive".into()));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return Err(Error::Config("synthetic noise_sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
    let mut images = Vec::with_capacity(spec.classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for c in 0..spec.classes {
        let template = class_template(c, spec.image_h, spec.image_w);
        for _ in 0..spec.samples_per_class {
            let data = template
                .data()
                .iter()
                .map(|&v| {
                    let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (v + n).clamp(0.0, 1.0)
                })
                .collect();
            images.push(Tensor::from_parts(vec![spec.image_h, spec.image_w, 1], data));
            labels.push(c);
        }
    }
    Dataset::new(images, labels, spec.classes)
}

/// Stratified split into `(train, test)`. Each class contributes
/// `round(n_c · test_fraction)` samples to test, clamped to `[1, n_c − 1]`.
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    split_impl(data, test_fraction, seed, true)
}

/// Like [`train_test_split`] but classes with a single sample go to train
/// instead of failing, and a non-empty test side is guaranteed whenever the
/// dataset has at least two samples.
pub fn train_test_split_lenient(
    data: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    split_impl(data, test_fraction, seed, false)
}

fn split_impl(data: &Dataset, frac: f64, seed: u64, strict: bool) -> Result<(Dataset, Dataset)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!("test_fraction {frac} must lie in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in data.indices_by_class().into_iter().enumerate() {
        let n = idx.len();
        if n == 0 {
            continue;
        }
        if n < 2 {
            if strict {
                return Err(Error::ClassTooSmall { class, count: n });
            }
            train.extend(idx);
            continue;
        }
        idx.shuffle(&mut rng);
        let n_test = ((n as f64 * frac).round() as usize).clamp(1, n - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    if !strict && test.is_empty() && train.len() >= 2 {
        // every class was a singleton: move one sample over
        let moved = train.remove(rng.random_range(0..train.len()));
        test.push(moved);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train), data.subset(&test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_min_per_client")]
    pub min_per_client: usize,
}

fn default_min_per_client() -> usize {
    1
}

impl PartitionSpec {
    pub fn new(num_clients: usize, alpha: f64, seed: u64) -> Self {
        Self {
            num_clients,
            alpha,
            seed,
            min_per_client: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("partition.num_clients must be >= 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config("partition.alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Client assignment produced by [`dirichlet_indices`].
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Sample indices held by each client, ascending.
    pub client_indices: Vec<Vec<usize>>,
    /// `proportions[c][k]`: Dirichlet share of class `c` given to client `k`.
    pub proportions: Vec<Vec<f64>>,
    /// Number of re-draws needed to satisfy `min_per_client`.
    pub retries: usize,
}

pub const MAX_PARTITION_RETRIES: usize = 100;

/// Per class `c`, draws `p_c ~ Dirichlet(α·1_m)` and hands the class's
/// (shuffled) samples to clients by largest-remainder apportionment of
/// `p_c · n_c`. Re-draws with the next sub-seed while any client holds
/// fewer than `min_per_client` samples.
pub fn dirichlet_indices(labels: &[usize], classes: usize, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let m = spec.num_clients;
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    for attempt in 0..=MAX_PARTITION_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.seed, attempt as u64]));
        let mut clients = vec![Vec::new(); m];
        let mut proportions = Vec::with_capacity(classes);
        for members in &by_class {
            let p = draw_dirichlet(&gamma, m, &mut rng);
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let counts = largest_remainder(&p, members.len());
            let mut offset = 0;
            for (k, &cnt) in counts.iter().enumerate() {
                clients[k].extend_from_slice(&shuffled[offset..offset + cnt]);
                offset += cnt;
            }
            proportions.push(p);
        }
        if clients.iter().all(|c| c.len() >= spec.min_per_client) {
            for c in &mut clients {
                c.sort_unstable();
            }
            return Ok(Partition {
                client_indices: clients,
                proportions,
                retries: attempt,
            });
        }
    }
    Err(Error::RetryBudgetExhausted {
        attempts: MAX_PARTITION_RETRIES + 1,
    })
}

fn draw_dirichlet(gamma: &Gamma<f64>, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 && total.is_finite() {
            return g.into_iter().map(|v| v / total).collect();
        }
    }
}

/// Hamilton apportionment of `n` items by shares `p` (summing to ~1).
/// Leftover items go to the largest fractional remainders, ties to the
/// lower index.
pub fn largest_remainder(p: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = p.iter().map(|&s| s * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Size-skewed variant: client 0 receives a stratified `share` of every
/// class, the rest is split over the other `num_clients − 1` clients by
/// [`dirichlet_indices`].
pub fn dominant_indices(
    labels: &[usize],
    classes: usize,
    share: f64,
    spec: &PartitionSpec,
) -> Result<Partition> {
    spec.validate()?;
    if !(share > 0.0 && share < 1.0) {
        return Err(Error::Config(format!("dominant share {share} must lie in (0, 1)")));
    }
    if spec.num_clients < 2 {
        return Err(Error::Config("a dominant client needs num_clients >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.seed, u64::MAX]));
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut dominant = Vec::new();
    let mut rest = Vec::new();
    for mut members in by_class {
        members.shuffle(&mut rng);
        let k = (members.len() as f64 * share).round() as usize;
        dominant.extend_from_slice(&members[..k]);
        rest.extend_from_slice(&members[k..]);
    }
    rest.sort_unstable();
    dominant.sort_unstable();
    let rest_labels: Vec<usize> = rest.iter().map(|&i| labels[i]).collect();
    let inner = dirichlet_indices(
        &rest_labels,
        classes,
        &PartitionSpec {
            num_clients: spec.num_clients - 1,
            ..spec.clone()
        },
    )?;
    if dominant.len() < spec.min_per_client {
        return Err(Error::RetryBudgetExhausted { attempts: 1 });
    }
    let mut client_indices = vec![dominant];
    client_indices.extend(
        inner
            .client_indices
            .iter()
            .map(|idx| idx.iter().map(|&j| rest[j]).collect()),
    );
    let proportions = inner
        .proportions
        .iter()
        .map(|p| std::iter::once(share).chain(p.iter().map(|v| v * (1.0 - share))).collect())
        .collect();
    Ok(Partition {
        client_indices,
        proportions,
        retries: inner.retries,
    })
}

/// Splits `data` across clients; see [`dirichlet_indices`].
pub fn dirichlet_partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    let part = dirichlet_indices(&data.labels, data.classes, spec)?;
    Ok(part.client_indices.iter().map(|idx| data.subset(idx)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityStats {
    pub sizes: Vec<usize>,
    /// `histograms[k][c]`: count of class `c` on client `k`.
    pub histograms: Vec<Vec<usize>>,
    /// `frequencies[k][c]`: share of class `c` within client `k`.
    pub frequencies: Vec<Vec<f64>>,
    /// Mean over classes of the (population) variance across clients of
    /// the per-client class frequency.
    pub dispersion: f64,
}

pub fn heterogeneity_stats(parts: &[Dataset]) -> Result<HeterogeneityStats> {
    let first = parts.first().ok_or(Error::Empty("partition"))?;
    let classes = first.classes;
    let histograms: Vec<Vec<usize>> = parts.iter().map(Dataset::class_counts).collect();
    let sizes: Vec<usize> = parts.iter().map(Dataset::len).collect();
    let frequencies: Vec<Vec<f64>> = histograms
        .iter()
        .zip(&sizes)
        .map(|(h, &n)| {
            h.iter()
                .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect()
        })
        .collect();
    let m = parts.len() as f64;
    let mut dispersion = 0.0;
    for c in 0..classes {
        let mean = frequencies.iter().map(|f| f[c]).sum::<f64>() / m;
        dispersion += frequencies.iter().map(|f| (f[c] - mean).powi(2)).sum::<f64>() / m;
    }
    dispersion /= classes as f64;
    Ok(HeterogeneityStats {
        sizes,
        histograms,
        frequencies,
        dispersion,
    })
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads an IDX image/label pair (unsigned-byte payloads). Pixels are
/// scaled to `[0, 1]` and returned as `rows×cols×1` tensors.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img_bytes = std::fs::read(ip)?;
    let lbl_bytes = std::fs::read(lp)?;
    parse_idx(&img_bytes, ip, &lbl_bytes, lp)
}

fn read_u32(bytes: &[u8], at: usize, file: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            file: file.to_path_buf(),
        })
}

fn parse_idx(img: &[u8], ip: &Path, lbl: &[u8], lp: &Path) -> Result<Dataset> {
    let magic = read_u32(img, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            file: ip.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = read_u32(lbl, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            file: lp.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(img, 4, ip)? as usize;
    let rows = read_u32(img, 8, ip)? as usize;
    let cols = read_u32(img, 12, ip)? as usize;
    let n_labels = read_u32(lbl, 4, lp)? as usize;
    if n != n_labels {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    let payload = img.get(16..16 + n * pixels).ok_or_else(|| Error::Truncated {
        file: ip.to_path_buf(),
    })?;
    let labels_raw = lbl.get(8..8 + n).ok_or_else(|| Error::Truncated {
        file: lp.to_path_buf(),
    })?;
    if pixels == 0 {
        return Err(Error::Config(format!("{}: zero-sized images", ip.display())));
    }
    let images = payload
        .chunks(pixels)
        .map(|chunk| {
            Tensor::from_parts(
                vec![rows, cols, 1],
                chunk.iter().map(|&b| f64::from(b) / 255.0).collect(),
            )
        })
        .collect();
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(images, labels, classes)
}
