//! Patch embedders standing in for the frozen feature extractor.
//!
//! Two backends exist: a deterministic mock computed from pixel statistics,
//! and a remote HTTP service (`GET /info`, `POST /embed`). Embeddings are
//! cached on disk in the vector-index file format, one file per
//! (backend, dim) pair.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use image::{ImageFormat, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slide::{luma, read_patch, PatchRef, SlideStore};
use crate::vindex::{Metric, VectorIndex};

pub const MIN_DIM: usize = 8;
pub const DEFAULT_DIM: usize = 1024;
pub const URL_ENV: &str = "SPIDER_EMBEDDER_URL";

const HIST_BINS: usize = 32;
const POOL: usize = 16;
/// Length of the raw mock feature vector before tiling to `dim`.
pub const MOCK_FEATURES: usize = 3 * HIST_BINS + POOL * POOL + 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub patch: PatchRef,
    pub vector: Vec<f32>,
}

impl Embedding {
    pub fn new(patch: PatchRef, vector: Vec<f32>) -> Self {
        Self { patch, vector }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Mock,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub backend: Backend,
    pub dim: usize,
    pub normalize: bool,
    pub remote_url: Option<String>,
    pub batch_size: usize,
    /// Maximum concurrent in-flight remote batches.
    pub max_in_flight: usize,
    /// Total attempts per remote batch on retriable failures.
    pub retry_budget: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            dim: DEFAULT_DIM,
            normalize: true,
            remote_url: None,
            batch_size: 64,
            max_in_flight: 4,
            retry_budget: 3,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < MIN_DIM {
            return Err(Error::DimTooSmall(self.dim));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Remote URL with the environment override applied.
    pub fn resolved_url(&self) -> Option<String> {
        std::env::var(URL_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.remote_url.clone())
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        Ok(match self.backend {
            Backend::Mock => Box::new(MockEmbedder::new(self.dim, self.normalize)?),
            Backend::Remote => Box::new(RemoteEmbedder::connect(self.clone())?),
        })
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifier used in cache file names.
    fn backend_id(&self) -> String;

    /// One vector per block, in input order.
    fn embed_batch(&self, blocks: &[RgbImage]) -> Result<Vec<Vec<f32>>>;
}

/// Deterministic pixel-statistics embedding.
///
/// Raw features, in order: 32-bin normalized histograms of R, G and B;
/// 16×16 average-pooled luma scaled to [0, 1]; then mean and standard
/// deviation of each channel (R, G, B) scaled to [0, 1]. The raw vector is
/// repeated cyclically and truncated to `dim`.
pub fn embed_mock(pixels: &RgbImage, dim: usize, normalize: bool) -> Result<Vec<f32>> {
    if dim < MIN_DIM {
        return Err(Error::DimTooSmall(dim));
    }
    let (w, h) = pixels.dimensions();
    if w != h || w == 0 {
        return Err(Error::Invalid(format!("expected a square block, got {w}x{h}")));
    }
    let side = w as usize;
    let n = (side * side) as f64;

    let mut hist = [[0u64; HIST_BINS]; 3];
    let mut pool_sum = [0u64; POOL * POOL];
    let mut pool_count = [0u64; POOL * POOL];
    let mut sum = [0f64; 3];
    let mut sum_sq = [0f64; 3];
    for (x, y, p) in pixels.enumerate_pixels() {
        for c in 0..3 {
            let v = p.0[c];
            hist[c][v as usize * HIST_BINS / 256] += 1;
            sum[c] += v as f64;
            sum_sq[c] += v as f64 * v as f64;
        }
        let cell = (y as usize * POOL / side) * POOL + x as usize * POOL / side;
        pool_sum[cell] += luma(p.0) as u64;
        pool_count[cell] += 1;
    }

    let mut raw = Vec::with_capacity(MOCK_FEATURES);
    for channel in &hist {
        raw.extend(channel.iter().map(|&c| c as f64 / n));
    }
    raw.extend(pool_sum.iter().zip(&pool_count).map(|(&s, &c)| {
        if c == 0 {
            0.0
        } else {
            s as f64 / c as f64 / 255.0
        }
    }));
    for c in 0..3 {
        let mean = sum[c] / n;
        let var = (sum_sq[c] / n - mean * mean).max(0.0);
        raw.push(mean / 255.0);
        raw.push(var.sqrt() / 255.0);
    }
    debug_assert_eq!(raw.len(), MOCK_FEATURES);

    let mut v: Vec<f64> = raw.iter().copied().cycle().take(dim).collect();
    if normalize {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(v.into_iter().map(|x| x as f32).collect())
}

#[derive(Clone, Debug)]
pub struct MockEmbedder {
    dim: usize,
    normalize: bool,
}

impl MockEmbedder {
    pub fn new(dim: usize, normalize: bool) -> Result<Self> {
        if dim < MIN_DIM {
            return Err(Error::DimTooSmall(dim));
        }
        Ok(Self { dim, normalize })
    }
}

impl Embedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn backend_id(&self) -> String {
        "mock".into()
    }

    fn embed_batch(&self, blocks: &[RgbImage]) -> Result<Vec<Vec<f32>>> {
        blocks
            .par_iter()
            .map(|b| embed_mock(b, self.dim, self.normalize))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
pub struct RemoteInfo {
    pub dim: usize,
    #[serde(default)]
    pub name: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    patches: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

pub struct RemoteEmbedder {
    config: EmbedderConfig,
    base: String,
    name: String,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    /// Connect and check the server's reported dimension against the config.
    pub fn connect(config: EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let base = config
            .resolved_url()
            .ok_or_else(|| Error::Config(format!("remote backend needs remote_url or {URL_ENV}")))?
            .trim_end_matches('/')
            .to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let info: RemoteInfo = with_retries(config.retry_budget, || {
            let resp = client
                .get(format!("{base}/info"))
                .send()
                .map_err(|e| Error::Transport(e.to_string()))?;
            let body = read_success(resp)?;
            Ok(serde_json::from_slice(&body)?)
        })?;
        if info.dim != config.dim {
            return Err(Error::DimensionMismatch {
                expected: config.dim,
                actual: info.dim,
            });
        }
        Ok(Self {
            config,
            base,
            name: info.name,
            client,
        })
    }

    pub fn server_name(&self) -> &str {
        &self.name
    }

    fn post_batch(&self, blocks: &[RgbImage]) -> Result<Vec<Vec<f32>>> {
        let encoded = blocks.iter().map(encode_png_b64).collect::<Result<Vec<_>>>()?;
        let body = serde_json::to_vec(&EmbedRequest { patches: &encoded })?;
        let resp: EmbedResponse = with_retries(self.config.retry_budget, || {
            let resp = self
                .client
                .post(format!("{}/embed", self.base))
                .header("content-type", "application/json")
                .body(body.clone())
                .send()
                .map_err(|e| Error::Transport(e.to_string()))?;
            Ok(serde_json::from_slice(&read_success(resp)?)?)
        })?;
        if resp.vectors.len() != blocks.len() {
            return Err(Error::Invalid(format!(
                "server returned {} vectors for {} patches",
                resp.vectors.len(),
                blocks.len()
            )));
        }
        let mut out = resp.vectors;
        for v in &mut out {
            if v.len() != self.config.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.config.dim,
                    actual: v.len(),
                });
            }
            if self.config.normalize {
                let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
                }
            }
        }
        Ok(out)
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn backend_id(&self) -> String {
        if self.name.is_empty() {
            "remote".into()
        } else {
            format!("remote-{}", sanitize(&self.name))
        }
    }

    fn embed_batch(&self, blocks: &[RgbImage]) -> Result<Vec<Vec<f32>>> {
        embed_remote(self, blocks)
    }
}

/// Embed through the remote service, splitting into `batch_size` requests
/// with at most `max_in_flight` outstanding; output keeps input order.
pub fn embed_remote(embedder: &RemoteEmbedder, blocks: &[RgbImage]) -> Result<Vec<Vec<f32>>> {
    let chunks: Vec<&[RgbImage]> = blocks.chunks(embedder.config.batch_size).collect();
    let mut results: Vec<Option<Result<Vec<Vec<f32>>>>> = (0..chunks.len()).map(|_| None).collect();
    let width = embedder.config.max_in_flight.max(1);
    for (wave_idx, wave) in chunks.chunks(width).enumerate() {
        std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|chunk| s.spawn(move || embedder.post_batch(chunk)))
                .collect();
            for (i, h) in handles.into_iter().enumerate() {
                let r = h
                    .join()
                    .unwrap_or_else(|_| Err(Error::Transport("worker panicked".into())));
                results[wave_idx * width + i] = Some(r);
            }
        });
    }
    let mut out = Vec::with_capacity(blocks.len());
    for r in results {
        out.extend(r.expect("every chunk ran")?);
    }
    Ok(out)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn encode_png_b64(block: &RgbImage) -> Result<String> {
    let mut buf = Cursor::new(Vec::new());
    block.write_to(&mut buf, ImageFormat::Png)?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

fn read_success(resp: reqwest::blocking::Response) -> Result<Vec<u8>> {
    let status = resp.status();
    let body = resp.bytes().map_err(|e| Error::Transport(e.to_string()))?;
    if status.is_success() {
        Ok(body.to_vec())
    } else {
        Err(Error::Server {
            status: status.as_u16(),
            message: String::from_utf8_lossy(&body).into_owned(),
        })
    }
}

fn retriable(err: &Error) -> bool {
    match err {
        Error::Transport(_) => true,
        Error::Server { status, .. } => *status >= 500,
        _ => false,
    }
}

fn with_retries<T>(budget: usize, mut f: impl FnMut() -> Result<T>) -> Result<T> {
    let attempts = budget.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        match f() {
            Err(e) if attempt < attempts && retriable(&e) => {
                tracing::warn!(attempt, error = %e, "retrying remote embedder request");
                std::thread::sleep(Duration::from_millis(50 * attempt as u64));
            }
            other => return other,
        }
    }
}

/// Embeddings keyed by patch, for one backend and dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    entries: BTreeMap<PatchRef, Vec<f32>>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    /// Conventional cache file for a backend and dimension inside `dir`.
    pub fn path_in(dir: &Path, backend_id: &str, dim: usize) -> PathBuf {
        dir.join(format!("{backend_id}-{dim}.spix"))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, patch: &PatchRef) -> Option<&[f32]> {
        self.entries.get(patch).map(Vec::as_slice)
    }

    pub fn contains(&self, patch: &PatchRef) -> bool {
        self.entries.contains_key(patch)
    }

    pub fn insert(&mut self, patch: PatchRef, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        self.entries.insert(patch, vector);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PatchRef, &[f32])> {
        self.entries.iter().map(|(p, v)| (p, v.as_slice()))
    }

    pub fn embeddings(&self) -> Vec<Embedding> {
        self.entries
            .iter()
            .map(|(p, v)| Embedding::new(p.clone(), v.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self
            .entries
            .values()
            .enumerate()
            .map(|(i, v)| (i as u64, v.clone()))
            .collect();
        let refs = self
            .entries
            .keys()
            .enumerate()
            .map(|(i, p)| (i as u64, p.clone()))
            .collect();
        VectorIndex::from_entries(Metric::L2, self.dim, entries, refs)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let index = VectorIndex::load(path)?;
        let mut cache = Self::new(index.dim());
        for &id in index.ids() {
            let patch = index
                .patch(id)
                .ok_or_else(|| Error::CorruptIndex(format!("cache entry {id} has no patch ref")))?;
            cache
                .entries
                .insert(patch.clone(), index.vector(id).expect("listed id").to_vec());
        }
        Ok(cache)
    }

    /// Load if the file exists, otherwise start empty.
    pub fn open_or_new(path: &Path, dim: usize) -> Result<Self> {
        if path.exists() {
            let cache = Self::load(path)?;
            if cache.dim != dim && !cache.is_empty() {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: cache.dim,
                });
            }
            Ok(Self { dim, ..cache })
        } else {
            Ok(Self::new(dim))
        }
    }

    /// Embed every listed patch not already cached. Off-slide pixels are
    /// filled with `pad_value`. Returns the number of new entries.
    pub fn materialize(
        &mut self,
        store: &SlideStore,
        refs: &[PatchRef],
        embedder: &dyn Embedder,
        batch_size: usize,
        pad_value: u8,
    ) -> Result<usize> {
        if embedder.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: embedder.dim(),
            });
        }
        let mut todo: Vec<&PatchRef> = refs.iter().filter(|p| !self.contains(p)).collect();
        todo.sort();
        todo.dedup();
        let added = todo.len();
        for chunk in todo.chunks(batch_size.max(1)) {
            let blocks = chunk
                .par_iter()
                .map(|p| Ok(read_patch(&*store.get(&p.slide_id)?, p, pad_value)))
                .collect::<Result<Vec<_>>>()?;
            let vectors = embedder.embed_batch(&blocks)?;
            for (p, v) in chunk.iter().zip(vectors) {
                self.insert((*p).clone(), v)?;
            }
        }
        Ok(added)
    }
}
