//! Seed expansion by similarity retrieval, and per-class candidate queues.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slide::{Organ, PatchRef};
use crate::vindex::VectorIndex;

pub const DEFAULT_K_PER_SEED: usize = 50;
pub const DEFAULT_CAP: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    pub class_label: String,
    pub organ: Organ,
    pub patches: Vec<PatchRef>,
}

/// One line of a seeds file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub class_label: String,
    #[serde(default)]
    pub organ: Organ,
    #[serde(flatten)]
    pub patch: PatchRef,
}

/// Group seed records by class, classes sorted by name.
pub fn group_seeds(records: Vec<SeedRecord>) -> Vec<SeedSet> {
    let mut by_class: BTreeMap<String, SeedSet> = BTreeMap::new();
    for r in records {
        by_class
            .entry(r.class_label.clone())
            .or_insert_with(|| SeedSet {
                class_label: r.class_label.clone(),
                organ: r.organ,
                patches: Vec::new(),
            })
            .patches
            .push(r.patch);
    }
    by_class.into_values().collect()
}

pub fn load_seeds(path: &Path) -> Result<Vec<SeedSet>> {
    Ok(group_seeds(read_jsonl(path)?))
}

pub fn save_seeds(path: &Path, seeds: &[SeedSet]) -> Result<()> {
    let records: Vec<SeedRecord> = seeds
        .iter()
        .flat_map(|s| {
            s.patches.iter().map(|p| SeedRecord {
                class_label: s.class_label.clone(),
                organ: s.organ,
                patch: p.clone(),
            })
        })
        .collect();
    write_jsonl(path, &records)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateStatus {
    #[default]
    Pending,
    Accepted,
    Rejected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub patch: PatchRef,
    pub score: f64,
    pub status: CandidateStatus,
}

/// Candidates for one class, best-first.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateQueue {
    pub class_label: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct QueueLine {
    class_label: String,
    slide_id: String,
    x: i64,
    y: i64,
    size: u32,
    score: f64,
    status: CandidateStatus,
}

impl CandidateQueue {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let lines: Vec<QueueLine> = self
            .candidates
            .iter()
            .map(|c| QueueLine {
                class_label: self.class_label.clone(),
                slide_id: c.patch.slide_id.clone(),
                x: c.patch.x,
                y: c.patch.y,
                size: c.patch.size,
                score: c.score,
                status: c.status,
            })
            .collect();
        write_jsonl(path, &lines)
    }

    /// Read a queue file. The class label comes from the lines, falling back
    /// to `default_class` for an empty file.
    pub fn load(path: &Path, default_class: &str) -> Result<Self> {
        let lines: Vec<QueueLine> = read_jsonl(path)?;
        let class_label = lines
            .first()
            .map(|l| l.class_label.clone())
            .unwrap_or_else(|| default_class.to_string());
        if let Some(l) = lines.iter().find(|l| l.class_label != class_label) {
            return Err(Error::Invalid(format!(
                "{}: mixed classes {class_label:?} and {:?}",
                path.display(),
                l.class_label
            )));
        }
        let candidates = lines
            .into_iter()
            .map(|l| Candidate {
                patch: PatchRef::new(l.slide_id, l.x, l.y, l.size),
                score: l.score,
                status: l.status,
            })
            .collect();
        Ok(Self {
            class_label,
            candidates,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub k_per_seed: usize,
    pub cap: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k_per_seed: DEFAULT_K_PER_SEED,
            cap: DEFAULT_CAP,
        }
    }
}

/// Union of each seed's top-k neighbours, minus seeds and non-tissue
/// patches, deduplicated on the best score and truncated to `cap`.
pub fn retrieve_candidates(
    seeds: &SeedSet,
    index: &VectorIndex,
    params: RetrievalParams,
    is_tissue: impl Fn(&PatchRef) -> bool + Sync,
) -> Result<CandidateQueue> {
    if seeds.patches.is_empty() {
        return Err(Error::EmptySeedSet);
    }
    if params.k_per_seed == 0 {
        return Err(Error::Invalid("k_per_seed must be at least 1".into()));
    }
    let seed_ids: HashSet<u64> = seeds
        .patches
        .iter()
        .map(|p| index.id_of(p).ok_or_else(|| Error::SeedNotIndexed(p.to_string())))
        .collect::<Result<_>>()?;
    let mut seed_ids: Vec<u64> = seed_ids.into_iter().collect();
    seed_ids.sort_unstable();

    let hits = seed_ids
        .par_iter()
        .map(|&id| {
            let v = index.vector(id).expect("seed id is indexed");
            index.query(v, params.k_per_seed)
        })
        .collect::<Result<Vec<_>>>()?;

    let metric = index.metric();
    let seed_set: HashSet<u64> = seed_ids.iter().copied().collect();
    let mut best: HashMap<u64, f64> = HashMap::new();
    for n in hits.into_iter().flatten() {
        if seed_set.contains(&n.patch_id) {
            continue;
        }
        best.entry(n.patch_id)
            .and_modify(|s| {
                if metric.better(n.score, *s) {
                    *s = n.score;
                }
            })
            .or_insert(n.score);
    }
    let mut ranked: Vec<(u64, f64)> = best
        .into_iter()
        .filter(|(id, _)| index.patch(*id).map(&is_tissue).unwrap_or(false))
        .collect();
    ranked.sort_by(|a, b| {
        if metric.better(a.1, b.1) {
            std::cmp::Ordering::Less
        } else if metric.better(b.1, a.1) {
            std::cmp::Ordering::Greater
        } else {
            a.0.cmp(&b.0)
        }
    });
    ranked.truncate(params.cap);

    Ok(CandidateQueue {
        class_label: seeds.class_label.clone(),
        candidates: ranked
            .into_iter()
            .map(|(id, score)| Candidate {
                patch: index.patch(id).expect("filtered on presence").clone(),
                score,
                status: CandidateStatus::Pending,
            })
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueStats {
    pub total: usize,
    pub pending: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// accepted / (accepted + rejected); `None` before any decision.
    pub acceptance_rate: Option<f64>,
}

pub fn queue_stats(queue: &CandidateQueue) -> QueueStats {
    stats_of(queue.candidates.iter().map(|c| c.status))
}

pub(crate) fn stats_of(statuses: impl Iterator<Item = CandidateStatus>) -> QueueStats {
    let (mut pending, mut accepted, mut rejected) = (0, 0, 0);
    for s in statuses {
        match s {
            CandidateStatus::Pending => pending += 1,
            CandidateStatus::Accepted => accepted += 1,
            CandidateStatus::Rejected => rejected += 1,
        }
    }
    let decided = accepted + rejected;
    QueueStats {
        total: pending + decided,
        pending,
        accepted,
        rejected,
        acceptance_rate: (decided > 0).then(|| accepted as f64 / decided as f64),
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
