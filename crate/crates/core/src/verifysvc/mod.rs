//! Binary verification service.
//!
//! Reviewers pull the best pending candidate of a queue under a lease,
//! look at its 9×9-cell context, and post accept/reject decisions. Every
//! decision is appended to a JSONL log before it takes effect; on startup
//! the log is replayed over the queue files with last-write-wins per
//! (patch, class).

mod http;
mod log;
mod render;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use self::http::{router, serve};
pub use self::log::{effective_decisions, read_log, Decision, DecisionLog, PatchKey, Verdict};
pub use self::render::{render_context, render_context_png, CONTEXT_GRID, OUTLINE_COLOR, OUTLINE_WIDTH};

use crate::curation::{stats_of, CandidateQueue, CandidateStatus, QueueStats};
use crate::error::{Error, Result};
use crate::slide::PatchRef;

pub const DECISION_LOG: &str = "decisions.jsonl";
pub const DEFAULT_LEASE_TTL_MS: u64 = 120_000;

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Clock advanced by hand; for tests and replay tools.
#[derive(Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(Arc::new(AtomicU64::new(start_ms)))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Describes the context image a reviewer should see for a candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewContext {
    pub central: PatchRef,
    pub grid: u32,
    pub image_size: u32,
    /// Central cell as `[x, y, width, height]` in image pixels.
    pub highlight: [u32; 4],
    pub url: String,
}

impl ReviewContext {
    pub fn for_patch(central: &PatchRef) -> Self {
        let s = central.size;
        let half = CONTEXT_GRID / 2;
        Self {
            central: central.clone(),
            grid: CONTEXT_GRID,
            image_size: CONTEXT_GRID * s,
            highlight: [half * s, half * s, s, s],
            url: format!(
                "/api/patches/context.png?slide_id={}&x={}&y={}&size={}",
                encode_query(&central.slide_id),
                central.x,
                central.y,
                s
            ),
        }
    }
}

fn encode_query(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-_.~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServedCandidate {
    pub queue_id: String,
    pub class_label: String,
    #[serde(flatten)]
    pub patch: PatchRef,
    pub score: f64,
    /// Position in the queue's best-first order.
    pub rank: usize,
    pub lease_expires_ms: u64,
    pub context: ReviewContext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum NextCandidate {
    Candidate(Box<ServedCandidate>),
    Drained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub slide_id: String,
    pub x: i64,
    pub y: i64,
    #[serde(default = "default_size")]
    pub size: u32,
    pub class_label: String,
    pub verdict: String,
    pub reviewer: String,
}

fn default_size() -> u32 {
    crate::slide::DEFAULT_PATCH_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueSummary {
    pub id: String,
    pub class_label: String,
    #[serde(flatten)]
    pub stats: QueueStats,
}

struct QueueState {
    queue: CandidateQueue,
    position: HashMap<PatchKey, usize>,
}

#[derive(Clone, Debug)]
struct Lease {
    reviewer: String,
    expires_ms: u64,
}

struct State {
    queues: BTreeMap<String, QueueState>,
    leases: HashMap<(String, PatchKey), Lease>,
    effective: HashMap<(PatchKey, String), Decision>,
    log: DecisionLog,
}

pub struct ReviewService {
    state: Mutex<State>,
    clock: Arc<dyn Clock>,
    lease_ttl_ms: u64,
    queues_dir: Option<PathBuf>,
}

impl ReviewService {
    /// Queues from every `*.jsonl` file in `dir` (the queue id is the file
    /// stem) plus the decision log `dir/decisions.jsonl`.
    pub fn open(dir: &Path, clock: Arc<dyn Clock>, lease_ttl_ms: u64) -> Result<Self> {
        let mut queues = BTreeMap::new();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "jsonl").unwrap_or(false))
            .filter(|p| p.file_name().map(|n| n != DECISION_LOG).unwrap_or(false))
            .collect();
        files.sort();
        for path in files {
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            queues.insert(id.clone(), CandidateQueue::load(&path, &id)?);
        }
        let log = DecisionLog::open(&dir.join(DECISION_LOG))?;
        let mut svc = Self::with_log(queues, log, clock, lease_ttl_ms)?;
        svc.queues_dir = Some(dir.to_path_buf());
        Ok(svc)
    }

    pub fn with_log(
        queues: BTreeMap<String, CandidateQueue>,
        log: DecisionLog,
        clock: Arc<dyn Clock>,
        lease_ttl_ms: u64,
    ) -> Result<Self> {
        let mut states = BTreeMap::new();
        for (id, queue) in queues {
            let mut position = HashMap::new();
            for (i, c) in queue.candidates.iter().enumerate() {
                if position.insert(PatchKey::from(&c.patch), i).is_some() {
                    return Err(Error::DuplicateKey(format!("{} in queue {id}", c.patch)));
                }
            }
            states.insert(id, QueueState { queue, position });
        }
        let effective = effective_decisions(log.decisions());
        let mut state = State {
            queues: states,
            leases: HashMap::new(),
            effective: HashMap::new(),
            log,
        };
        for ((key, class), d) in effective {
            state.apply(&key, &class, d.verdict);
            state.effective.insert((key, class), d);
        }
        Ok(Self {
            state: Mutex::new(state),
            clock,
            lease_ttl_ms,
            queues_dir: None,
        })
    }

    pub fn queues_dir(&self) -> Option<&Path> {
        self.queues_dir.as_deref()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("review state poisoned")
    }

    pub fn list_queues(&self) -> Vec<QueueSummary> {
        let st = self.lock();
        st.queues
            .iter()
            .map(|(id, q)| QueueSummary {
                id: id.clone(),
                class_label: q.queue.class_label.clone(),
                stats: stats_of(q.queue.candidates.iter().map(|c| c.status)),
            })
            .collect()
    }

    pub fn stats(&self, queue_id: &str) -> Result<QueueStats> {
        let st = self.lock();
        let q = st
            .queues
            .get(queue_id)
            .ok_or_else(|| Error::UnknownQueue(queue_id.to_string()))?;
        Ok(stats_of(q.queue.candidates.iter().map(|c| c.status)))
    }

    /// Current queue contents with effective statuses.
    pub fn queue(&self, queue_id: &str) -> Result<CandidateQueue> {
        let st = self.lock();
        st.queues
            .get(queue_id)
            .map(|q| q.queue.clone())
            .ok_or_else(|| Error::UnknownQueue(queue_id.to_string()))
    }

    pub fn next_candidate(&self, queue_id: &str, reviewer: &str) -> Result<NextCandidate> {
        let now = self.clock.now_ms();
        let mut guard = self.lock();
        let st = &mut *guard;
        let q = st
            .queues
            .get(queue_id)
            .ok_or_else(|| Error::UnknownQueue(queue_id.to_string()))?;
        st.leases.retain(|_, l| l.expires_ms > now);

        let pending = q
            .queue
            .candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.status == CandidateStatus::Pending);
        let mut pick = None;
        for (i, c) in pending {
            let key = (queue_id.to_string(), PatchKey::from(&c.patch));
            match st.leases.get(&key) {
                Some(l) if l.reviewer == reviewer => {
                    pick = Some(i);
                    break;
                }
                Some(_) => continue,
                None => {
                    if pick.is_none() {
                        pick = Some(i);
                    }
                }
            }
        }
        // A lease already held by this reviewer wins over the first free one.
        let Some(i) = pick else {
            return Ok(NextCandidate::Drained);
        };
        let c = &q.queue.candidates[i];
        let expires_ms = now + self.lease_ttl_ms;
        st.leases.insert(
            (queue_id.to_string(), PatchKey::from(&c.patch)),
            Lease {
                reviewer: reviewer.to_string(),
                expires_ms,
            },
        );
        Ok(NextCandidate::Candidate(Box::new(ServedCandidate {
            queue_id: queue_id.to_string(),
            class_label: q.queue.class_label.clone(),
            patch: c.patch.clone(),
            score: c.score,
            rank: i,
            lease_expires_ms: expires_ms,
            context: ReviewContext::for_patch(&c.patch),
        })))
    }

    /// Record a decision; identical repeats return the existing sequence number.
    pub fn post_decision(&self, req: &DecisionRequest) -> Result<u64> {
        let verdict: Verdict = req.verdict.parse()?;
        let patch = PatchRef::new(req.slide_id.clone(), req.x, req.y, req.size);
        let key = PatchKey::from(&patch);
        let now = self.clock.now_ms();
        let mut guard = self.lock();
        let st = &mut *guard;
        let known = st.queues.values().any(|q| {
            q.queue.class_label == req.class_label && q.position.contains_key(&key)
        });
        if !known {
            return Err(Error::UnknownCandidate(format!("{patch} for class {}", req.class_label)));
        }
        let eff_key = (key.clone(), req.class_label.clone());
        if let Some(prev) = st.effective.get(&eff_key) {
            if prev.verdict == verdict && prev.reviewer == req.reviewer {
                return Ok(prev.seq);
            }
        }
        let decision = st.log.append(patch, &req.class_label, verdict, &req.reviewer, now)?;
        let seq = decision.seq;
        st.apply(&key, &req.class_label, verdict);
        st.effective.insert(eff_key, decision);
        let State { queues, leases, .. } = st;
        for (id, q) in queues.iter() {
            if q.queue.class_label == req.class_label {
                leases.remove(&(id.clone(), key.clone()));
            }
        }
        Ok(seq)
    }

    /// Patches whose effective verdict is accept, with their class.
    pub fn accepted(&self) -> Vec<(PatchRef, String)> {
        let st = self.lock();
        let mut out: Vec<(PatchRef, String)> = st
            .effective
            .values()
            .filter(|d| d.verdict == Verdict::Accept)
            .map(|d| (d.patch(), d.class_label.clone()))
            .collect();
        out.sort();
        out
    }

    pub fn decisions(&self) -> Vec<Decision> {
        self.lock().log.decisions().to_vec()
    }
}

impl State {
    fn apply(&mut self, key: &PatchKey, class: &str, verdict: Verdict) {
        let status = match verdict {
            Verdict::Accept => CandidateStatus::Accepted,
            Verdict::Reject => CandidateStatus::Rejected,
        };
        for q in self.queues.values_mut() {
            if q.queue.class_label != class {
                continue;
            }
            if let Some(&i) = q.position.get(key) {
                q.queue.candidates[i].status = status;
            }
        }
    }
}
