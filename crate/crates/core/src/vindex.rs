//! Exact flat nearest-neighbour index over patch embeddings.
//!
//! On-disk layout (little-endian):
//!
//! ```text
//! "SPIX" | version u32 = 1 | metric u8 (0 = L2, 1 = cosine) | dim u32 | count u64
//! count × u64 ids
//! count × dim × f32 vectors, row-major
//! JSON trailer {"<id>": PatchRef, ...} | trailer length u64
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::slide::PatchRef;

const MAGIC: &[u8; 4] = b"SPIX";
const VERSION: u32 = 1;
const PARALLEL_SCAN_MIN: usize = 4096;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L2,
    #[default]
    Cosine,
}

impl Metric {
    fn tag(self) -> u8 {
        match self {
            Metric::L2 => 0,
            Metric::Cosine => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Metric::L2),
            1 => Ok(Metric::Cosine),
            t => Err(Error::CorruptIndex(format!("unknown metric tag {t}"))),
        }
    }

    /// Best-first ordering of scores: ascending distance or descending similarity.
    fn rank(self, a: f64, b: f64) -> Ordering {
        match self {
            Metric::L2 => a.total_cmp(&b),
            Metric::Cosine => b.total_cmp(&a),
        }
    }

    /// True if score `a` ranks strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        self.rank(a, b) == Ordering::Less
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L2 => "l2",
            Metric::Cosine => "cosine",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Invalid(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub patch_id: u64,
    /// Distance for L2, similarity for cosine.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    metric: Metric,
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
    id_map: BTreeMap<u64, PatchRef>,
    row_of: HashMap<u64, usize>,
    id_of: HashMap<PatchRef, u64>,
}

fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

impl VectorIndex {
    pub fn empty(metric: Metric, dim: usize) -> Self {
        Self {
            metric,
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            id_map: BTreeMap::new(),
            row_of: HashMap::new(),
            id_of: HashMap::new(),
        }
    }

    /// Build from explicit ids. `refs` may cover any subset of the ids.
    pub fn from_entries(
        metric: Metric,
        dim: usize,
        entries: Vec<(u64, Vec<f32>)>,
        refs: BTreeMap<u64, PatchRef>,
    ) -> Result<Self> {
        let mut index = Self::empty(metric, dim);
        index.ids.reserve(entries.len());
        index.data.reserve(entries.len() * dim);
        for (id, mut v) in entries {
            if v.len() != dim {
                return Err(Error::MixedDimensions {
                    first: dim,
                    other: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("non-finite vector for id {id}")));
            }
            if index.row_of.insert(id, index.ids.len()).is_some() {
                return Err(Error::DuplicateKey(format!("patch id {id}")));
            }
            if metric == Metric::Cosine {
                l2_normalize(&mut v);
            }
            index.ids.push(id);
            index.data.extend_from_slice(&v);
        }
        for (id, r) in refs {
            if !index.row_of.contains_key(&id) {
                return Err(Error::Invalid(format!("patch ref for unknown id {id}")));
            }
            if let Some(prev) = index.id_of.insert(r.clone(), id) {
                return Err(Error::DuplicateKey(format!("{r} (ids {prev} and {id})")));
            }
            index.id_map.insert(id, r);
        }
        Ok(index)
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Stored vector (normalized for cosine).
    pub fn vector(&self, id: u64) -> Option<&[f32]> {
        self.row_of.get(&id).map(|&r| self.row(r))
    }

    pub fn patch(&self, id: u64) -> Option<&PatchRef> {
        self.id_map.get(&id)
    }

    pub fn id_of(&self, patch: &PatchRef) -> Option<u64> {
        self.id_of.get(patch).copied()
    }

    pub fn refs(&self) -> &BTreeMap<u64, PatchRef> {
        &self.id_map
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    fn score(&self, query: &[f64], row: &[f32]) -> f64 {
        match self.metric {
            Metric::L2 => query
                .iter()
                .zip(row)
                .map(|(&q, &v)| {
                    let d = q - v as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => query.iter().zip(row).map(|(&q, &v)| q * v as f64).sum(),
        }
    }

    /// Exact top-k, best first, ties broken by ascending id.
    pub fn query(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let mut q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
        if self.metric == Metric::Cosine {
            let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                q.iter_mut().for_each(|x| *x /= norm);
            }
        }
        let score_row = |r: usize| Neighbor {
            patch_id: self.ids[r],
            score: self.score(&q, self.row(r)),
        };
        let mut all: Vec<Neighbor> = if self.len() >= PARALLEL_SCAN_MIN {
            (0..self.len()).into_par_iter().map(score_row).collect()
        } else {
            (0..self.len()).map(score_row).collect()
        };
        let metric = self.metric;
        let cmp = |a: &Neighbor, b: &Neighbor| metric.rank(a.score, b.score).then(a.patch_id.cmp(&b.patch_id));
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, cmp);
            all.truncate(k);
        }
        all.sort_unstable_by(cmp);
        Ok(all)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let trailer = serde_json::to_vec(&self.id_map)?;
        let mut out = Vec::with_capacity(25 + self.ids.len() * 8 + self.data.len() * 4 + trailer.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.metric.tag());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&trailer);
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::CorruptIndex("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.array()?);
        if version != VERSION {
            return Err(Error::CorruptIndex(format!("unsupported version {version}")));
        }
        let metric = Metric::from_tag(cur.take(1)?[0])?;
        let dim = u32::from_le_bytes(cur.array()?) as usize;
        let count = u64::from_le_bytes(cur.array()?) as usize;
        let needed = count
            .checked_mul(8 + dim * 4)
            .ok_or_else(|| Error::CorruptIndex("entry count overflow".into()))?;
        if cur.remaining() < needed {
            return Err(Error::UnexpectedEof);
        }
        let ids: Vec<u64> = (0..count)
            .map(|_| cur.array().map(u64::from_le_bytes))
            .collect::<Result<_>>()?;
        let data: Vec<f32> = (0..count * dim)
            .map(|_| cur.array().map(f32::from_le_bytes))
            .collect::<Result<_>>()?;
        if cur.remaining() < 8 {
            return Err(Error::UnexpectedEof);
        }
        let tail = &bytes[bytes.len() - 8..];
        let trailer_len = u64::from_le_bytes(tail.try_into().expect("8 bytes")) as usize;
        if cur.remaining() - 8 < trailer_len {
            return Err(Error::UnexpectedEof);
        }
        if cur.remaining() - 8 != trailer_len {
            return Err(Error::CorruptIndex("trailer length mismatch".into()));
        }
        let id_map: BTreeMap<u64, PatchRef> = serde_json::from_slice(cur.take(trailer_len)?)
            .map_err(|e| Error::CorruptIndex(format!("trailer: {e}")))?;

        let mut index = Self::empty(metric, dim);
        for (r, &id) in ids.iter().enumerate() {
            if index.row_of.insert(id, r).is_some() {
                return Err(Error::CorruptIndex(format!("duplicate id {id}")));
            }
        }
        for (id, p) in &id_map {
            if !index.row_of.contains_key(id) {
                return Err(Error::CorruptIndex(format!("trailer names unknown id {id}")));
            }
            index.id_of.insert(p.clone(), *id);
        }
        index.ids = ids;
        index.data = data;
        index.id_map = id_map;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::UnexpectedEof);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

/// Build an index over embeddings. Ids are assigned 0.. in canonical patch
/// order, so the result does not depend on input order.
pub fn index_build(embeddings: &[Embedding], metric: Metric) -> Result<VectorIndex> {
    let Some(first) = embeddings.first() else {
        return Ok(VectorIndex::empty(metric, 0));
    };
    let dim = first.vector.len();
    if let Some(e) = embeddings.iter().find(|e| e.vector.len() != dim) {
        return Err(Error::MixedDimensions {
            first: dim,
            other: e.vector.len(),
        });
    }
    let mut sorted: Vec<&Embedding> = embeddings.iter().collect();
    sorted.sort_by(|a, b| a.patch.cmp(&b.patch));
    if let Some(w) = sorted.windows(2).find(|w| w[0].patch == w[1].patch) {
        return Err(Error::DuplicateKey(w[0].patch.to_string()));
    }
    let entries = sorted
        .iter()
        .enumerate()
        .map(|(i, e)| (i as u64, e.vector.clone()))
        .collect();
    let refs = sorted
        .iter()
        .enumerate()
        .map(|(i, e)| (i as u64, e.patch.clone()))
        .collect();
    VectorIndex::from_entries(metric, dim, entries, refs)
}
