//! Streaming cluster banks.
//!
//! A [`ClusterBank`] buffers frames until it can seed `N` centers with
//! k-means++, then for every batch runs one Lloyd step (re-allocate to the
//! nearest center, renew centers as cache means) followed by a re-sampling
//! pass. The balanced re-sampler caps every cluster at
//! `S_thr = min(len(B) / N, S_max)` by keeping the samples nearest to the
//! center, and grows clusters below the threshold by one point interpolated
//! between the center and its nearest sample. The pruning baseline caps
//! clusters by keeping a uniform random subset and never grows them.
//!
//! The overall cache `B` is not stored separately; it is the union of the
//! cluster caches (plus the pre-initialization buffer).

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};

const SNAPSHOT_MAGIC: &[u8; 8] = b"VPMBANK1";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    /// Cluster count `N`.
    pub clusters: usize,
    /// Maximum cluster size `S_max`.
    pub max_cluster_size: usize,
    /// Frames buffered before k-means++ seeding (at least `N`).
    pub init_buffer_min: usize,
    /// Lloyd iterations per batch; one is the streaming default.
    pub lloyd_iterations: usize,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self::with_clusters(40)
    }
}

impl BankConfig {
    pub fn with_clusters(clusters: usize) -> Self {
        Self {
            clusters,
            max_cluster_size: 20,
            init_buffer_min: 5 * clusters,
            lloyd_iterations: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::config("clusters", "must be at least 1"));
        }
        if self.max_cluster_size == 0 {
            return Err(Error::config("max_cluster_size", "must be at least 1"));
        }
        if self.lloyd_iterations == 0 {
            return Err(Error::config("lloyd_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleStrategy {
    /// Nearest-to-center undersampling plus interpolating oversampling.
    Balanced,
    /// Uniform random pruning of oversized clusters, no oversampling.
    RandomPruning,
}

#[derive(Clone, Debug, PartialEq)]
struct Sample {
    values: Vec<f64>,
    /// Interpolated during the current batch; never used as a donor.
    synthetic: bool,
}

impl Sample {
    fn real(values: Vec<f64>) -> Self {
        Self {
            values,
            synthetic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterBank {
    config: BankConfig,
    dim: usize,
    centers: Vec<Vec<f64>>,
    clusters: Vec<Vec<Sample>>,
    /// Appended to `B` but not yet allocated to a cluster.
    pending: Vec<Sample>,
    initialized: bool,
    last_threshold: Option<usize>,
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center under Euclidean distance; ties go to the
/// lowest index.
pub fn nearest_index<C: AsRef<[f64]>>(centers: &[C], frame: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in centers.iter().enumerate() {
        let d = squared_distance(c.as_ref(), frame);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

/// k-means++ seeding: the first center is uniform over `samples`, each next
/// one is drawn with probability proportional to its squared distance to the
/// nearest chosen center. Centers are distinct sample indices; if every
/// remaining sample coincides with a chosen center, the next pick is uniform
/// over the unchosen indices.
pub fn kmeanspp_init<S: AsRef<[f64]>, R: Rng>(samples: &[S], n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::config("clusters", "must be at least 1"));
    }
    if samples.len() < n {
        return Err(Error::InsufficientData {
            needed: n,
            got: samples.len(),
        });
    }
    let mut chosen = vec![false; samples.len()];
    let first = rng.random_range(0..samples.len());
    chosen[first] = true;
    let mut centers = vec![samples[first].as_ref().to_vec()];
    let mut nearest: Vec<f64> = samples
        .iter()
        .map(|s| squared_distance(s.as_ref(), &centers[0]))
        .collect();
    while centers.len() < n {
        let weights: Vec<f64> = nearest
            .iter()
            .zip(&chosen)
            .map(|(&d, &c)| if c { 0.0 } else { d })
            .collect();
        let pick = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            Err(_) => {
                let free: Vec<usize> = (0..samples.len()).filter(|&i| !chosen[i]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen[pick] = true;
        let center = samples[pick].as_ref().to_vec();
        for (d, s) in nearest.iter_mut().zip(samples) {
            *d = d.min(squared_distance(s.as_ref(), &center));
        }
        centers.push(center);
    }
    Ok(centers)
}

fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let a: f64 = rng.random();
        if a > 0.0 {
            return a;
        }
    }
}

impl ClusterBank {
    pub fn new(config: BankConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        Ok(Self {
            clusters: vec![Vec::new(); config.clusters],
            config,
            dim,
            centers: Vec::new(),
            pending: Vec::new(),
            initialized: false,
            last_threshold: None,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Centers as an `N x D` matrix (empty before initialization).
    pub fn centers_matrix(&self) -> Array2<f64> {
        crate::corpus::rows_to_matrix(self.centers.iter().map(Vec::as_slice), self.dim)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    pub fn cluster(&self, i: usize) -> impl Iterator<Item = &[f64]> {
        self.clusters[i].iter().map(|s| s.values.as_slice())
    }

    /// The overall cache `B`: every cluster cache in index order followed by
    /// anything appended but not yet allocated.
    pub fn overall_cache(&self) -> Vec<&[f64]> {
        self.clusters
            .iter()
            .flatten()
            .chain(&self.pending)
            .map(|s| s.values.as_slice())
            .collect()
    }

    pub fn overall_len(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum::<usize>() + self.pending.len()
    }

    /// `S_thr` computed by the most recent re-sampling pass.
    pub fn last_threshold(&self) -> Option<usize> {
        self.last_threshold
    }

    fn require_initialized(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::State("cluster bank is not initialized".into()))
        }
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::Shape(format!("frame has {len} values, bank expects {}", self.dim)));
        }
        Ok(())
    }

    pub fn nearest_center(&self, frame: &[f64]) -> Result<(usize, &[f64])> {
        self.require_initialized()?;
        self.check_dim(frame.len())?;
        let (i, _) = nearest_index(&self.centers, frame).expect("initialized bank has centers");
        Ok((i, &self.centers[i]))
    }

    /// Replaces every row by its nearest center.
    pub fn quantize(&self, frames: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<usize>)> {
        self.require_initialized()?;
        self.check_dim(frames.ncols())?;
        let mut out = Array2::zeros(frames.raw_dim());
        let mut ids = Vec::with_capacity(frames.nrows());
        for (r, row) in frames.rows().into_iter().enumerate() {
            let (i, c) = self.nearest_center(&row.to_vec())?;
            out.row_mut(r).assign(&ArrayView1::from(c));
            ids.push(i);
        }
        Ok((out, ids))
    }

    /// Seeds the bank from explicit centers and allocates whatever is
    /// buffered.
    pub fn initialize_with(&mut self, centers: Vec<Vec<f64>>) -> Result<()> {
        if centers.len() != self.config.clusters {
            return Err(Error::Shape(format!(
                "{} centers for a bank of {}",
                centers.len(),
                self.config.clusters
            )));
        }
        for c in &centers {
            self.check_dim(c.len())?;
        }
        self.centers = centers;
        self.initialized = true;
        self.reallocate()
    }

    /// Moves every sample of `B` into the cache of its nearest center.
    pub fn reallocate(&mut self) -> Result<()> {
        self.require_initialized()?;
        let mut pool: Vec<Sample> = Vec::with_capacity(self.overall_len());
        for cache in &mut self.clusters {
            pool.append(cache);
        }
        pool.append(&mut self.pending);
        for sample in pool {
            let (i, _) = nearest_index(&self.centers, &sample.values).expect("centers present");
            self.clusters[i].push(sample);
        }
        Ok(())
    }

    /// Each center with a nonempty cache becomes the mean of that cache.
    pub fn renew_centers(&mut self) {
        for (center, cache) in self.centers.iter_mut().zip(&self.clusters) {
            if cache.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; self.dim];
            for s in cache {
                for (m, v) in mean.iter_mut().zip(&s.values) {
                    *m += v;
                }
            }
            let n = cache.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            *center = mean;
        }
    }

    fn threshold(&self) -> usize {
        (self.overall_len() / self.config.clusters).min(self.config.max_cluster_size)
    }

    /// Balanced re-sampling. Returns `S_thr`.
    pub fn resample<R: Rng>(&mut self, rng: &mut R) -> usize {
        let thr = self.threshold();
        self.last_threshold = Some(thr);
        for (center, cache) in self.centers.iter().zip(self.clusters.iter_mut()) {
            if cache.len() > thr {
                let mut keyed: Vec<(f64, Sample)> = cache
                    .drain(..)
                    .map(|s| (squared_distance(&s.values, center), s))
                    .collect();
                keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
                keyed.truncate(thr);
                cache.extend(keyed.into_iter().map(|(_, s)| s));
            } else if cache.len() < thr {
                let donor = cache
                    .iter()
                    .filter(|s| !s.synthetic)
                    .map(|s| (squared_distance(&s.values, center), s))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                let Some((_, near)) = donor else {
                    continue;
                };
                let alpha = open_unit(rng);
                let values = near
                    .values
                    .iter()
                    .zip(center)
                    .map(|(d, c)| d * alpha + c * (1.0 - alpha))
                    .collect();
                cache.push(Sample {
                    values,
                    synthetic: true,
                });
            }
        }
        thr
    }

    /// Random-pruning baseline: clusters above `S_thr` keep a uniform random
    /// subset of `S_thr` samples. Returns `S_thr`.
    pub fn prune<R: Rng>(&mut self, rng: &mut R) -> usize {
        let thr = self.threshold();
        self.last_threshold = Some(thr);
        for cache in &mut self.clusters {
            if cache.len() > thr {
                let mut keep = rand::seq::index::sample(rng, cache.len(), thr).into_vec();
                keep.sort_unstable();
                let old = std::mem::take(cache);
                let mut old: Vec<Option<Sample>> = old.into_iter().map(Some).collect();
                cache.extend(keep.into_iter().map(|i| old[i].take().expect("distinct indices")));
            }
        }
        thr
    }

    /// Balanced streaming update for one batch of frames.
    pub fn ingest_batch<R: Rng>(&mut self, frames: ArrayView2<f64>, rng: &mut R) -> Result<()> {
        self.ingest_with(ResampleStrategy::Balanced, frames, rng)
    }

    /// Streaming update with random pruning instead of re-sampling.
    pub fn ingest_batch_pruning_baseline<R: Rng>(&mut self, frames: ArrayView2<f64>, rng: &mut R) -> Result<()> {
        self.ingest_with(ResampleStrategy::RandomPruning, frames, rng)
    }

    pub fn ingest_with<R: Rng>(
        &mut self,
        strategy: ResampleStrategy,
        frames: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<()> {
        self.check_dim(frames.ncols())?;
        for cache in &mut self.clusters {
            cache.iter_mut().for_each(|s| s.synthetic = false);
        }
        self.pending
            .extend(frames.rows().into_iter().map(|r| Sample::real(r.to_vec())));

        if !self.initialized {
            let needed = self.config.clusters.max(self.config.init_buffer_min);
            if self.pending.len() < needed {
                return Ok(());
            }
            let buffered: Vec<&[f64]> = self.pending.iter().map(|s| s.values.as_slice()).collect();
            let centers = kmeanspp_init(&buffered, self.config.clusters, rng)?;
            return self.initialize_with(centers);
        }

        for _ in 0..self.config.lloyd_iterations {
            self.reallocate()?;
            self.renew_centers();
        }
        match strategy {
            ResampleStrategy::Balanced => self.resample(rng),
            ResampleStrategy::RandomPruning => self.prune(rng),
        };
        Ok(())
    }

    /// Binary snapshot: JSON header, float32 centers, then the float32
    /// samples of every cluster (or of the buffer, before initialization).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = SnapshotHeader {
            version: SNAPSHOT_VERSION,
            clusters: self.config.clusters,
            max_cluster_size: self.config.max_cluster_size,
            init_buffer_min: self.config.init_buffer_min,
            lloyd_iterations: self.config.lloyd_iterations,
            seed: self.config.seed,
            dim: self.dim,
            initialized: self.initialized,
            cluster_sizes: self.cluster_sizes(),
            pending: self.pending.len(),
            last_threshold: self.last_threshold,
        };
        let mut payload = Vec::new();
        blob::push_f32(&mut payload, self.centers.iter().flatten().copied());
        for s in self.clusters.iter().flatten().chain(&self.pending) {
            blob::push_f32(&mut payload, s.values.iter().copied());
        }
        blob::encode(SNAPSHOT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, mut rest): (SnapshotHeader, _) = blob::decode(SNAPSHOT_MAGIC, bytes)?;
        if h.version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("bank snapshot version {} unsupported", h.version)));
        }
        let config = BankConfig {
            clusters: h.clusters,
            max_cluster_size: h.max_cluster_size,
            init_buffer_min: h.init_buffer_min,
            lloyd_iterations: h.lloyd_iterations,
            seed: h.seed,
        };
        let mut bank = ClusterBank::new(config, h.dim)?;
        if h.cluster_sizes.len() != h.clusters {
            return Err(Error::Format("cluster size list does not match N".into()));
        }
        if h.initialized {
            let (flat, r) = blob::read_f32(rest, h.clusters * h.dim)?;
            rest = r;
            bank.centers = flat.chunks_exact(h.dim).map(<[f64]>::to_vec).collect();
        }
        for (i, &size) in h.cluster_sizes.iter().enumerate() {
            let (flat, r) = blob::read_f32(rest, size * h.dim)?;
            rest = r;
            bank.clusters[i] = flat.chunks_exact(h.dim).map(|c| Sample::real(c.to_vec())).collect();
        }
        let (flat, r) = blob::read_f32(rest, h.pending * h.dim)?;
        bank.pending = flat.chunks_exact(h.dim).map(|c| Sample::real(c.to_vec())).collect();
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after bank snapshot".into()));
        }
        bank.initialized = h.initialized;
        bank.last_threshold = h.last_threshold;
        Ok(bank)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    version: u32,
    clusters: usize,
    max_cluster_size: usize,
    init_buffer_min: usize,
    lloyd_iterations: usize,
    seed: u64,
    dim: usize,
    initialized: bool,
    cluster_sizes: Vec<usize>,
    pending: usize,
    last_threshold: Option<usize>,
}
