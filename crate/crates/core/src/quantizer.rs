//! k-means codebook training and nearest-centroid assignment.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::encoder::FrameEmbeddings;
use crate::error::{Error, Result};
use crate::units::UnitSequence;

const KM_MAGIC: &[u8] = b"EZVCKM1\n";
const KM_VERSION: u32 = 1;
/// Points per rayon task in the assignment step.
const ASSIGN_CHUNK: usize = 256;

/// `k × dim` centroid matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Codebook {
    pub centroids: Vec<f32>,
    pub k: usize,
    pub dim: usize,
    pub trained_on: String,
    /// Mean squared distance of the training points to their centroids.
    pub inertia: f64,
}

impl Codebook {
    pub fn new(centroids: Vec<f32>, dim: usize, trained_on: impl Into<String>, inertia: f64) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(Error::contract("centroid matrix must be a non-empty k × dim"));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite centroid".into()));
        }
        Ok(Self {
            k: centroids.len() / dim,
            centroids,
            dim,
            trained_on: trained_on.into(),
            inertia,
        })
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the closest centroid and its squared distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, x: &[f32]) -> (usize, f64) {
        nearest(&self.centroids, self.dim, x)
    }

    /// True when no two centroids are bitwise equal.
    pub fn centroids_distinct(&self) -> bool {
        let mut rows: Vec<Vec<u32>> = self
            .centroids
            .chunks_exact(self.dim)
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort_unstable();
        rows.windows(2).all(|w| w[0] != w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum KMeansMode {
    /// Full-batch Lloyd iterations with a fixed-order reduction.
    Full,
    /// Sculley-style minibatch updates; approximate, for very large corpora.
    MiniBatch { batch_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Keep every n-th frame of the training stream.
    pub subsample: usize,
    pub mode: KMeansMode,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 500,
            seed: 0,
            max_iters: 100,
            rel_tol: 1e-4,
            subsample: 1,
            mode: KMeansMode::Full,
        }
    }
}

/// A trained codebook plus the per-iteration inertia trace.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub codebook: Codebook,
    /// Mean squared distance after the initial assignment and after every
    /// update step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    /// Final assignment of every training point.
    pub assignments: Vec<u32>,
}

/// Train a codebook over a stream of embedding matrices.
pub fn train_kmeans<'a, I>(data: I, cfg: &KMeansConfig) -> Result<Codebook>
where
    I: IntoIterator<Item = &'a FrameEmbeddings>,
{
    Ok(train_kmeans_run(data, cfg)?.codebook)
}

pub fn train_kmeans_run<'a, I>(data: I, cfg: &KMeansConfig) -> Result<KMeansRun>
where
    I: IntoIterator<Item = &'a FrameEmbeddings>,
{
    let mut points = Vec::new();
    let mut dim = None;
    let mut tags = Vec::new();
    let step = cfg.subsample.max(1);
    let mut counter = 0usize;
    for emb in data {
        match dim {
            None => dim = Some(emb.dim),
            Some(d) if d != emb.dim => {
                return Err(Error::contract(format!(
                    "embedding dim {} differs from earlier dim {d}",
                    emb.dim
                )))
            }
            _ => {}
        }
        if !tags.contains(&emb.source_tag) {
            tags.push(emb.source_tag.clone());
        }
        for row in emb.rows() {
            if counter % step == 0 {
                points.extend_from_slice(row);
            }
            counter += 1;
        }
    }
    let dim = dim.ok_or_else(|| Error::domain("no embeddings to cluster"))?;
    let mut run = kmeans_points(&points, dim, cfg)?;
    run.codebook.trained_on = tags.join("+");
    Ok(run)
}

/// Cluster a flat `n × dim` point matrix.
pub fn kmeans_points(points: &[f32], dim: usize, cfg: &KMeansConfig) -> Result<KMeansRun> {
    let n = points.len() / dim;
    if cfg.k == 0 {
        return Err(Error::domain("k must be positive"));
    }
    if n < cfg.k {
        return Err(Error::domain(format!("{n} points cannot fill {} clusters", cfg.k)));
    }
    if points.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN in clustering input".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("infinite value in clustering input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = plus_plus_init(points, dim, cfg.k, &mut rng);

    let run = match cfg.mode {
        KMeansMode::Full => lloyd(points, dim, &mut centroids, cfg),
        KMeansMode::MiniBatch { batch_size } => {
            minibatch(points, dim, &mut centroids, cfg, batch_size.max(1), &mut rng)
        }
    };
    let (history, iterations, assignments) = run;
    let codebook = Codebook::new(centroids, dim, "", *history.last().unwrap())?;
    if !codebook.centroids_distinct() {
        return Err(Error::domain(format!(
            "training data has fewer than {} distinct points",
            cfg.k
        )));
    }
    Ok(KMeansRun {
        codebook,
        inertia_history: history,
        iterations,
        assignments,
    })
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn nearest(centroids: &[f32], dim: usize, x: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Nearest centroid for every point, with squared distances.
fn assign_all(points: &[f32], dim: usize, centroids: &[f32]) -> (Vec<u32>, Vec<f64>) {
    let pairs: Vec<(u32, f64)> = points
        .par_chunks(dim * ASSIGN_CHUNK)
        .flat_map_iter(|chunk| {
            chunk.chunks_exact(dim).map(|x| {
                let (j, d) = nearest(centroids, dim, x);
                (j as u32, d)
            })
        })
        .collect();
    pairs.into_iter().unzip()
}

fn plus_plus_init(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // rounding can walk past the end onto a zero-weight point
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&d| d > 0.0).unwrap();
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn mean_of(dists: &[f64]) -> f64 {
    dists.iter().sum::<f64>() / dists.len() as f64
}

fn lloyd(points: &[f32], dim: usize, centroids: &mut [f32], cfg: &KMeansConfig) -> (Vec<f64>, usize, Vec<u32>) {
    let k = cfg.k;
    let (mut labels, mut dists) = assign_all(points, dim, centroids);
    let mut history = vec![mean_of(&dists)];
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (x, &l) in points.chunks_exact(dim).zip(&labels) {
            let l = l as usize;
            counts[l] += 1;
            for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(x) {
                *s += v as f64;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let c = &mut centroids[j * dim..(j + 1) * dim];
                for (cv, s) in c.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *cv = (*s / counts[j] as f64) as f32;
                }
            }
        }
        // an empty cluster takes over the point worst served by its centroid
        let mut spare = dists.clone();
        for j in 0..k {
            if counts[j] == 0 {
                let far = argmax(&spare);
                centroids[j * dim..(j + 1) * dim].copy_from_slice(&points[far * dim..(far + 1) * dim]);
                spare[far] = f64::NEG_INFINITY;
            }
        }
        let prev = *history.last().unwrap();
        (labels, dists) = assign_all(points, dim, centroids);
        let cur = mean_of(&dists);
        history.push(cur);
        if cur == 0.0 || prev - cur < cfg.rel_tol * prev {
            break;
        }
    }
    (history, iterations, labels)
}

fn minibatch(
    points: &[f32],
    dim: usize,
    centroids: &mut [f32],
    cfg: &KMeansConfig,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, usize, Vec<u32>) {
    let n = points.len() / dim;
    let mut counts = vec![0u64; cfg.k];
    let (_, dists) = assign_all(points, dim, centroids);
    let mut history = vec![mean_of(&dists)];
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let labels: Vec<usize> = idx
            .iter()
            .map(|&i| nearest(centroids, dim, &points[i * dim..(i + 1) * dim]).0)
            .collect();
        for (&i, &l) in idx.iter().zip(&labels) {
            counts[l] += 1;
            let eta = 1.0 / counts[l] as f64;
            let c = &mut centroids[l * dim..(l + 1) * dim];
            for (cv, &x) in c.iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
                *cv = (*cv as f64 + eta * (x as f64 - *cv as f64)) as f32;
            }
        }
        let prev = *history.last().unwrap();
        let (_, dists) = assign_all(points, dim, centroids);
        let cur = mean_of(&dists);
        history.push(cur);
        if cur == 0.0 || (prev - cur).abs() < cfg.rel_tol * prev {
            break;
        }
    }
    let (labels, _) = assign_all(points, dim, centroids);
    (history, iterations, labels)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Map every frame to its nearest centroid (lowest index on ties).
pub fn assign(cb: &Codebook, emb: &FrameEmbeddings) -> Result<UnitSequence> {
    if emb.dim != cb.dim {
        return Err(Error::contract(format!(
            "embedding dim {} does not match codebook dim {}",
            emb.dim, cb.dim
        )));
    }
    let (labels, _) = assign_all(&emb.data, emb.dim, &cb.centroids);
    Ok(UnitSequence::new(labels))
}

#[derive(Debug, Serialize, Deserialize)]
struct KmHeader {
    version: u32,
    k: usize,
    dim: usize,
    inertia: f64,
    trained_on: String,
}

pub(crate) fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let header = KmHeader {
        version: KM_VERSION,
        k: cb.k,
        dim: cb.dim,
        inertia: cb.inertia,
        trained_on: cb.trained_on.clone(),
    };
    container::encode(KM_MAGIC, &header, &cb.centroids)
}

pub(crate) fn decode_codebook(bytes: &[u8]) -> Result<Codebook> {
    let (h, payload): (KmHeader, _) = container::decode(KM_MAGIC, bytes)?;
    if h.version != KM_VERSION {
        return Err(Error::format(format!("unsupported codebook version {}", h.version)));
    }
    if h.k == 0 || h.dim == 0 {
        return Err(Error::format("codebook declares an empty matrix"));
    }
    let centroids = container::read_f32s(payload, h.k * h.dim, "codebook")?;
    Codebook::new(centroids, h.dim, h.trained_on, h.inertia)
}

pub fn save_codebook(cb: &Codebook, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &encode_codebook(cb))
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::ArtifactMissing(path.to_path_buf()));
    }
    decode_codebook(&container::read_file(path)?)
}
