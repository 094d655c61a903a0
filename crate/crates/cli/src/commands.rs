use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use serde::Serialize;
use spider_core::curation::{
    load_seeds, read_jsonl, retrieve_candidates, save_seeds, write_jsonl, RetrievalParams, SeedSet,
};
use spider_core::dataset::{
    class_stats, compile, context_refs, split_slides, ContextSpec, DatasetManifest, Split, SplitReport,
};
use spider_core::embedder::{Backend, EmbedderConfig, EmbeddingCache};
use spider_core::model::{Checkpoint, CHECKPOINT_FILE};
use spider_core::segmenter::{palette, proportions, render_overlay, segment_slide, SegmentOptions, DEFAULT_ALPHA};
use spider_core::slide::{mask_patches, tile_slide, PatchRef, RegionMask, SlideRaster, SlideStore, TissueVerdict};
use spider_core::train_eval::{ablate, evaluate, train, HISTORY_FILE};
use spider_core::verifysvc::{router, serve, ReviewService, SystemClock, DEFAULT_LEASE_TTL_MS};
use spider_core::vindex::{index_build, Metric};
use spider_core::Error;

use crate::config::PipelineConfig;
use crate::{Cli, Command, Global};

pub enum CliError {
    /// Missing or inconsistent arguments; exit code 2.
    Usage(String),
    Runtime(Error),
}

impl<E: Into<Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Ctx {
    cfg: PipelineConfig,
    json: bool,
    seed: u64,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> CliResult<()> {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value)?);
        } else {
            let text = text();
            println!("{}", text.trim_end());
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let Global {
        config,
        seed,
        threads,
        json,
        ..
    } = cli.global;
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = match &config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let ctx = Ctx { cfg, json, seed };
    match cli.command {
        Command::Tile(a) => cmd_tile(&ctx, a),
        Command::Embed(a) => cmd_embed(&ctx, a),
        Command::Index(a) => cmd_index(&ctx, a),
        Command::Retrieve(a) => cmd_retrieve(&ctx, a),
        Command::Serve(a) => cmd_serve(&ctx, a),
        Command::Compile(a) => cmd_compile(&ctx, a),
        Command::Split(a) => cmd_split(&ctx, a),
        Command::Stats(a) => cmd_stats(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
        Command::Segment(a) => cmd_segment(&ctx, a),
    }
}

/// Flag value, else the config value, else a usage error naming both.
fn need(flag: Option<PathBuf>, cfg: &Option<PathBuf>, name: &str, key: &str) -> CliResult<PathBuf> {
    flag.or_else(|| cfg.clone())
        .ok_or_else(|| CliError::Usage(format!("{name} is required (or set {key} in the config file)")))
}

/// Output file: the flag, else `file_name` inside `paths.out`.
fn out_file(flag: Option<PathBuf>, ctx: &Ctx, name: &str, file_name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| ctx.cfg.paths.out.as_ref().map(|d| d.join(file_name)))
        .ok_or_else(|| CliError::Usage(format!("{name} is required (or set paths.out in the config file)")))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    match s {
        "mock" => Ok(Backend::Mock),
        "remote" => Ok(Backend::Remote),
        other => Err(format!("unknown backend {other:?} (expected mock or remote)")),
    }
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    match s {
        "cosine" => Ok(Metric::Cosine),
        "l2" => Ok(Metric::L2),
        other => Err(format!("unknown metric {other:?} (expected cosine or l2)")),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?} (expected train or test)")),
    }
}

fn context_spec(ctx: &Ctx, grid: Option<u32>) -> CliResult<ContextSpec> {
    let spec = ContextSpec {
        pad_value: ctx.cfg.context.pad_value,
        ..ContextSpec::new(grid.unwrap_or(ctx.cfg.context.grid))?
    };
    Ok(spec)
}

/// Embedder selection shared by `embed` and `segment`.
#[derive(Args, Debug, Clone, Default)]
pub struct EmbedderFlags {
    /// Embedding backend: mock or remote.
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<Backend>,
    /// Embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Remote embedder base URL.
    #[arg(long)]
    pub url: Option<String>,
    /// Patches per embedding request.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl EmbedderFlags {
    fn resolve(&self, base: &EmbedderConfig) -> CliResult<EmbedderConfig> {
        let mut cfg = base.clone();
        if let Some(b) = self.backend {
            cfg.backend = b;
        }
        if let Some(d) = self.dim {
            cfg.dim = d;
        }
        if let Some(u) = &self.url {
            cfg.remote_url = Some(u.clone());
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A cache argument may name the cache file or a directory holding it.
fn resolve_cache_read(path: &Path, emb: &EmbedderConfig) -> CliResult<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "spix").unwrap_or(false))
        .collect();
    files.sort();
    if files.len() == 1 {
        return Ok(files.remove(0));
    }
    let backend = match emb.backend {
        Backend::Mock => "mock",
        Backend::Remote => "remote",
    };
    let candidate = EmbeddingCache::path_in(path, backend, emb.dim);
    if candidate.exists() {
        return Ok(candidate);
    }
    Err(CliError::Usage(format!(
        "{} holds {} cache files; name one explicitly",
        path.display(),
        files.len()
    )))
}

fn load_cache(path: &Path, emb: &EmbedderConfig) -> CliResult<EmbeddingCache> {
    let file = resolve_cache_read(path, emb)?;
    tracing::debug!(cache = %file.display(), "loading embedding cache");
    Ok(EmbeddingCache::load(&file)?)
}

fn tissue_set(tiles: &[TissueVerdict]) -> HashSet<PatchRef> {
    tiles.iter().filter(|t| t.is_tissue).map(|t| t.patch.clone()).collect()
}

// ---------------------------------------------------------------- tile

#[derive(Args, Debug)]
pub struct TileArgs {
    /// Directory of slide images with JSON sidecars.
    #[arg(long)]
    pub slides: Option<PathBuf>,
    /// Patch edge in pixels.
    #[arg(long)]
    pub size: Option<u32>,
    /// Output JSONL of tissue verdicts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory of polygon mask JSON files; seeds are the covered tissue patches.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Output seeds JSONL (with --masks).
    #[arg(long)]
    pub seeds_out: Option<PathBuf>,
    /// Minimum mask coverage for a seed patch.
    #[arg(long)]
    pub min_coverage: Option<f64>,
}

#[derive(Serialize)]
struct TileSlideRow {
    slide_id: String,
    threshold: u8,
    patches: usize,
    tissue: usize,
    background: usize,
}

#[derive(Serialize)]
struct SeedRow {
    class_label: String,
    seeds: usize,
    dropped_background: usize,
}

#[derive(Serialize)]
struct TileReport {
    tiles: PathBuf,
    slides: Vec<TileSlideRow>,
    seeds_file: Option<PathBuf>,
    seeds: Vec<SeedRow>,
}

fn cmd_tile(ctx: &Ctx, a: TileArgs) -> CliResult<()> {
    let slides_dir = need(a.slides, &ctx.cfg.paths.slides, "--slides", "paths.slides")?;
    let out = out_file(a.out, ctx, "--out", "tiles.jsonl")?;
    let size = a.size.unwrap_or(ctx.cfg.tiling.patch_size);
    if size == 0 {
        return Err(CliError::Usage("--size must be positive".into()));
    }
    let min_coverage = a.min_coverage.unwrap_or(ctx.cfg.tiling.min_coverage);
    let masks_dir = a.masks.or_else(|| ctx.cfg.paths.masks.clone());

    let store = SlideStore::open(&slides_dir)?;
    let mut all = Vec::new();
    let mut rows = Vec::new();
    for id in store.slide_ids() {
        let slide = store.get(&id)?;
        let (threshold, verdicts) = tile_slide(&slide, size)?;
        let tissue = verdicts.iter().filter(|v| v.is_tissue).count();
        tracing::debug!(slide = %id, threshold, tissue, "tiled");
        rows.push(TileSlideRow {
            slide_id: id.clone(),
            threshold,
            patches: verdicts.len(),
            tissue,
            background: verdicts.len() - tissue,
        });
        all.extend(verdicts);
    }
    ensure_parent(&out)?;
    write_jsonl(&out, &all)?;

    let mut seed_rows = Vec::new();
    let mut seeds_file = None;
    if let Some(masks_dir) = masks_dir {
        let seeds_out = match a.seeds_out {
            Some(p) => p,
            None => out.with_file_name("seeds.jsonl"),
        };
        let tissue = tissue_set(&all);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&masks_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
            .collect();
        files.sort();
        let mut by_class: BTreeMap<String, (SeedSet, usize)> = BTreeMap::new();
        for file in files {
            let mask = RegionMask::load(&file)?;
            let slide = store.get(&mask.slide_id)?;
            let organ = store.meta(&mask.slide_id).map(|m| m.organ).unwrap_or_default();
            let covered = mask_patches(&slide, &mask, size, min_coverage)?;
            let (set, dropped) = by_class.entry(mask.class_label.clone()).or_insert_with(|| {
                (
                    SeedSet {
                        class_label: mask.class_label.clone(),
                        organ,
                        patches: Vec::new(),
                    },
                    0,
                )
            });
            for p in covered {
                if tissue.contains(&p) {
                    set.patches.push(p);
                } else {
                    *dropped += 1;
                }
            }
        }
        let mut records = Vec::new();
        for (class_label, (mut set, dropped)) in by_class {
            set.patches.sort();
            set.patches.dedup();
            seed_rows.push(SeedRow {
                class_label,
                seeds: set.patches.len(),
                dropped_background: dropped,
            });
            records.push(set);
        }
        ensure_parent(&seeds_out)?;
        save_seeds(&seeds_out, &records)?;
        seeds_file = Some(seeds_out);
    }

    let report = TileReport {
        tiles: out,
        slides: rows,
        seeds_file,
        seeds: seed_rows,
    };
    ctx.emit(&report, || {
        let mut s = format!("{:<24} {:>9} {:>8} {:>7} {:>10}\n", "slide", "threshold", "patches", "tissue", "background");
        for r in &report.slides {
            let _ = writeln!(
                s,
                "{:<24} {:>9} {:>8} {:>7} {:>10}",
                r.slide_id, r.threshold, r.patches, r.tissue, r.background
            );
        }
        let _ = writeln!(s, "tiles -> {}", report.tiles.display());
        if let Some(f) = &report.seeds_file {
            for r in &report.seeds {
                let _ = writeln!(
                    s,
                    "seeds {:<18} {:>6} ({} background dropped)",
                    r.class_label, r.seeds, r.dropped_background
                );
            }
            let _ = writeln!(s, "seeds -> {}", f.display());
        }
        s
    })
}

// ---------------------------------------------------------------- embed

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub slides: Option<PathBuf>,
    /// Cache directory or cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Tile verdicts; every tissue patch is embedded.
    #[arg(long)]
    pub tiles: Option<PathBuf>,
    /// Seeds JSONL; every seed patch is embedded.
    #[arg(long)]
    pub seeds: Option<PathBuf>,
    /// Dataset manifest; every context cell of every central is embedded.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Context grid for --manifest (default: the manifest's).
    #[arg(long)]
    pub context: Option<u32>,
    #[command(flatten)]
    pub embedder: EmbedderFlags,
}

#[derive(Serialize)]
struct EmbedReport {
    cache: PathBuf,
    backend: String,
    dim: usize,
    requested: usize,
    added: usize,
    total: usize,
}

fn cmd_embed(ctx: &Ctx, a: EmbedArgs) -> CliResult<()> {
    let slides_dir = need(a.slides, &ctx.cfg.paths.slides, "--slides", "paths.slides")?;
    let cache_arg = need(a.cache, &ctx.cfg.paths.cache, "--cache", "paths.cache")?;
    if a.tiles.is_none() && a.seeds.is_none() && a.manifest.is_none() {
        return Err(CliError::Usage("nothing to embed: pass --tiles, --seeds and/or --manifest".into()));
    }
    let emb_cfg = a.embedder.resolve(&ctx.cfg.embedder)?;
    let embedder = emb_cfg.build()?;
    let cache_path = if cache_arg.extension().map(|e| e == "spix").unwrap_or(false) {
        cache_arg
    } else {
        std::fs::create_dir_all(&cache_arg)?;
        EmbeddingCache::path_in(&cache_arg, &embedder.backend_id(), embedder.dim())
    };

    let mut refs: BTreeSet<PatchRef> = BTreeSet::new();
    let mut pad = ctx.cfg.context.pad_value;
    if let Some(tiles) = &a.tiles {
        let tiles: Vec<TissueVerdict> = read_jsonl(tiles)?;
        refs.extend(tiles.into_iter().filter(|t| t.is_tissue).map(|t| t.patch));
    }
    if let Some(seeds) = &a.seeds {
        for set in load_seeds(seeds)? {
            refs.extend(set.patches);
        }
    }
    if let Some(m) = &a.manifest {
        let manifest = DatasetManifest::load(m)?;
        let spec = ContextSpec {
            pad_value: manifest.context.pad_value,
            ..ContextSpec::new(a.context.unwrap_or(manifest.context.grid))?
        };
        pad = spec.pad_value;
        for p in &manifest.patches {
            refs.extend(context_refs(&p.patch, &spec));
        }
    }
    let refs: Vec<PatchRef> = refs.into_iter().collect();

    let store = SlideStore::open(&slides_dir)?;
    let mut cache = EmbeddingCache::open_or_new(&cache_path, embedder.dim())?;
    let added = cache.materialize(&store, &refs, embedder.as_ref(), emb_cfg.batch_size, pad)?;
    ensure_parent(&cache_path)?;
    cache.save(&cache_path)?;

    let report = EmbedReport {
        cache: cache_path,
        backend: embedder.backend_id(),
        dim: embedder.dim(),
        requested: refs.len(),
        added,
        total: cache.len(),
    };
    ctx.emit(&report, || {
        format!(
            "embedded {} new of {} requested patches ({} backend, dim {}); cache holds {} -> {}",
            report.added,
            report.requested,
            report.backend,
            report.dim,
            report.total,
            report.cache.display()
        )
    })
}

// ---------------------------------------------------------------- index

#[derive(Args, Debug)]
pub struct IndexArgs {
    /// Cache directory or cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Restrict to tissue patches of these tile verdicts.
    #[arg(long)]
    pub tiles: Option<PathBuf>,
    /// Output index file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// cosine or l2.
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<Metric>,
}

#[derive(Serialize)]
struct IndexReport {
    index: PathBuf,
    metric: Metric,
    dim: usize,
    entries: usize,
}

fn cmd_index(ctx: &Ctx, a: IndexArgs) -> CliResult<()> {
    let cache_arg = need(a.cache, &ctx.cfg.paths.cache, "--cache", "paths.cache")?;
    let out = out_file(a.out, ctx, "--out", "index.spix")?;
    let metric = a.metric.unwrap_or(ctx.cfg.index.metric);
    let cache = load_cache(&cache_arg, &ctx.cfg.embedder)?;
    let tissue = match &a.tiles {
        Some(t) => Some(tissue_set(&read_jsonl(t)?)),
        None => None,
    };
    let embeddings: Vec<_> = cache
        .embeddings()
        .into_iter()
        .filter(|e| match &tissue {
            Some(set) => set.contains(&e.patch),
            None => e.patch.x >= 0 && e.patch.y >= 0,
        })
        .collect();
    let index = index_build(&embeddings, metric)?;
    ensure_parent(&out)?;
    index.save(&out)?;
    let report = IndexReport {
        index: out,
        metric,
        dim: cache.dim(),
        entries: index.len(),
    };
    ctx.emit(&report, || {
        format!(
            "indexed {} vectors (dim {}, {:?}) -> {}",
            report.entries,
            report.dim,
            report.metric,
            report.index.display()
        )
    })
}

// ---------------------------------------------------------------- retrieve

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Seeds JSONL.
    #[arg(long)]
    pub seeds: PathBuf,
    /// Output directory; one `<class>.jsonl` queue per class.
    #[arg(long)]
    pub queues: Option<PathBuf>,
    /// Neighbours per seed.
    #[arg(long)]
    pub k: Option<usize>,
    /// Maximum candidates per class.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Only tissue patches of these tile verdicts become candidates.
    #[arg(long)]
    pub tiles: Option<PathBuf>,
}

#[derive(Serialize)]
struct RetrieveRow {
    class_label: String,
    seeds: usize,
    candidates: usize,
    queue: PathBuf,
}

fn queue_file_name(class_label: &str) -> CliResult<String> {
    if class_label.is_empty() || class_label.contains(['/', '\\']) || class_label.starts_with('.') {
        return Err(Error::Invalid(format!("class label {class_label:?} cannot name a queue file")).into());
    }
    Ok(format!("{class_label}.jsonl"))
}

fn cmd_retrieve(ctx: &Ctx, a: RetrieveArgs) -> CliResult<()> {
    let queues = need(a.queues, &ctx.cfg.paths.queues, "--queues", "paths.queues")?;
    let params = RetrievalParams {
        k_per_seed: a.k.unwrap_or(ctx.cfg.curation.k_per_seed),
        cap: a.cap.unwrap_or(ctx.cfg.curation.cap),
    };
    let index = spider_core::vindex::VectorIndex::load(&a.index)?;
    let seeds = load_seeds(&a.seeds)?;
    let tissue = match &a.tiles {
        Some(t) => Some(tissue_set(&read_jsonl(t)?)),
        None => None,
    };
    std::fs::create_dir_all(&queues)?;
    let mut rows = Vec::new();
    for set in &seeds {
        let queue = retrieve_candidates(set, &index, params, |p| {
            tissue.as_ref().map(|t| t.contains(p)).unwrap_or(true)
        })?;
        let path = queues.join(queue_file_name(&set.class_label)?);
        queue.save(&path)?;
        rows.push(RetrieveRow {
            class_label: set.class_label.clone(),
            seeds: set.patches.len(),
            candidates: queue.len(),
            queue: path,
        });
    }
    ctx.emit(&rows, || {
        let mut s = format!("{:<24} {:>6} {:>10}  queue\n", "class", "seeds", "candidates");
        for r in &rows {
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>10}  {}",
                r.class_label,
                r.seeds,
                r.candidates,
                r.queue.display()
            );
        }
        s
    })
}

// ---------------------------------------------------------------- serve

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
    /// Directory of queue files; decisions are logged to `decisions.jsonl` inside it.
    #[arg(long)]
    pub queues: Option<PathBuf>,
    /// Slides backing the context renderer.
    #[arg(long)]
    pub slides: Option<PathBuf>,
    /// Static files (the review client) served on non-API paths.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Candidate lease lifetime in seconds.
    #[arg(long)]
    pub lease_ttl: Option<u64>,
}

fn cmd_serve(ctx: &Ctx, a: ServeArgs) -> CliResult<()> {
    let queues = need(a.queues, &ctx.cfg.paths.queues, "--queues", "paths.queues")?;
    let slides = a.slides.or_else(|| ctx.cfg.paths.slides.clone());
    let host = a.host.unwrap_or_else(|| ctx.cfg.serve.host.clone());
    let port = a.port.unwrap_or(ctx.cfg.serve.port);
    let ttl_ms = a
        .lease_ttl
        .map(|s| s.saturating_mul(1000))
        .unwrap_or(ctx.cfg.serve.lease_ttl_secs.saturating_mul(1000));

    let svc = Arc::new(ReviewService::open(&queues, Arc::new(SystemClock), ttl_ms)?);
    let store = match slides {
        Some(dir) => Some(Arc::new(SlideStore::open(&dir)?)),
        None => None,
    };
    let app = router(svc.clone(), store, a.static_dir.as_deref());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
        let addr = listener.local_addr()?;
        let summary = svc.list_queues();
        ctx.emit(
            &serde_json::json!({ "listening": format!("http://{addr}"), "queues": summary }),
            || format!("listening on http://{addr} ({} queues)", summary.len()),
        )?;
        serve(listener, app).await?;
        Ok(())
    })
}

// ---------------------------------------------------------------- compile

#[derive(Args, Debug)]
pub struct CompileArgs {
    /// Queue directory holding `decisions.jsonl`.
    #[arg(long)]
    pub queues: Option<PathBuf>,
    /// Seeds JSONL; seeds join the dataset with their class.
    #[arg(long)]
    pub seeds: PathBuf,
    /// Output manifest JSONL.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Context grid recorded in the manifest: 1, 3 or 5.
    #[arg(long)]
    pub context: Option<u32>,
    /// Fixed class list (comma-separated); default is the observed labels.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
}

#[derive(Serialize)]
struct CompileReport {
    manifest: PathBuf,
    accepted: usize,
    seeds: usize,
    patches: usize,
    classes: Vec<String>,
    slides: usize,
}

fn cmd_compile(ctx: &Ctx, a: CompileArgs) -> CliResult<()> {
    let queues = need(a.queues, &ctx.cfg.paths.queues, "--queues", "paths.queues")?;
    let out = out_file(a.out, ctx, "--out", "manifest.jsonl")?;
    let spec = context_spec(ctx, a.context)?;
    let svc = ReviewService::open(&queues, Arc::new(SystemClock), DEFAULT_LEASE_TTL_MS)?;
    let accepted = svc.accepted();
    let seeds = load_seeds(&a.seeds)?;
    let mut manifest = compile(&accepted, &seeds, spec)?;
    if let Some(classes) = a.classes {
        manifest = manifest.with_class_list(classes)?;
    }
    ensure_parent(&out)?;
    manifest.save(&out)?;
    let report = CompileReport {
        manifest: out,
        accepted: accepted.len(),
        seeds: seeds.iter().map(|s| s.patches.len()).sum(),
        patches: manifest.patches.len(),
        classes: manifest.class_list.clone(),
        slides: manifest.slide_ids().len(),
    };
    ctx.emit(&report, || {
        format!(
            "compiled {} patches ({} accepted, {} seeds) over {} slides, classes [{}] -> {}",
            report.patches,
            report.accepted,
            report.seeds,
            report.slides,
            report.classes.join(", "),
            report.manifest.display()
        )
    })
}

// ---------------------------------------------------------------- split

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Target train fraction of patches.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Output manifest (default: rewrite --manifest in place).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SplitOutput {
    manifest: PathBuf,
    seed: u64,
    #[serde(flatten)]
    report: SplitReport,
}

fn cmd_split(ctx: &Ctx, a: SplitArgs) -> CliResult<()> {
    let ratio = a.ratio.unwrap_or(ctx.cfg.split.ratio);
    let manifest = DatasetManifest::load(&a.manifest)?;
    let (split, report) = split_slides(&manifest, ratio, ctx.seed)?;
    let out = a.out.unwrap_or(a.manifest);
    ensure_parent(&out)?;
    split.save(&out)?;
    let output = SplitOutput {
        manifest: out,
        seed: ctx.seed,
        report,
    };
    ctx.emit(&output, || {
        let r = &output.report;
        let mut s = format!(
            "train {} slides / {} patches, test {} slides / {} patches\ntrain fraction {:.4} (target {:.2}, deviation {:.4}{})\n",
            r.train_slides.len(),
            r.train_patches,
            r.test_slides.len(),
            r.test_patches,
            r.train_fraction,
            ratio,
            r.deviation,
            if r.within_tolerance { "" } else { ", OUTSIDE tolerance" }
        );
        for (class, f) in &r.class_train_fraction {
            let _ = writeln!(s, "  {class:<24} train fraction {f:.4}");
        }
        let _ = writeln!(s, "manifest -> {}", output.manifest.display());
        s
    })
}

// ---------------------------------------------------------------- stats

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Slides directory; clips context cells to slide bounds when counting unique patches.
    #[arg(long)]
    pub slides: Option<PathBuf>,
}

fn cmd_stats(ctx: &Ctx, a: StatsArgs) -> CliResult<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let store = match a.slides {
        Some(dir) => Some(SlideStore::open(&dir)?),
        None => None,
    };
    let stats = class_stats(&manifest, |id| store.as_ref().and_then(|s| s.dimensions(id).ok()));
    ctx.emit(&stats, || stats.to_string())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Cache directory or cache file holding every context cell.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Context grid: 1, 3 or 5.
    #[arg(long)]
    pub context: Option<u32>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
}

#[derive(Serialize)]
struct TrainReport {
    checkpoint: PathBuf,
    history: PathBuf,
    config: PathBuf,
    classes: Vec<String>,
    context_grid: u32,
    parameters: usize,
    steps: usize,
    final_loss: Option<f64>,
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> CliResult<()> {
    let cache_arg = need(a.cache, &ctx.cfg.paths.cache, "--cache", "paths.cache")?;
    let mut cfg = ctx.cfg.clone();
    cfg.seed = Some(ctx.seed);
    cfg.train.seed = ctx.seed;
    if let Some(g) = a.context {
        cfg.context.grid = g;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr_max = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.train.weight_decay = v;
    }
    if let Some(v) = a.label_smoothing {
        cfg.train.label_smoothing = v;
    }
    if let Some(v) = a.warmup_epochs {
        cfg.train.warmup_epochs = v;
    }
    cfg.train.validate()?;
    let spec = cfg.context()?;

    let manifest = DatasetManifest::load(&a.manifest)?;
    let cache = load_cache(&cache_arg, &cfg.embedder)?;
    cfg.head.embed_dim = cache.dim();
    cfg.embedder.dim = cache.dim();
    let output = train(&manifest, &cache, &cfg.head, &cfg.train, spec.grid)?;
    output.save(&a.out)?;
    let config_path = a.out.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()?)?;

    let report = TrainReport {
        checkpoint: a.out.join(CHECKPOINT_FILE),
        history: a.out.join(HISTORY_FILE),
        config: config_path,
        classes: output.checkpoint.class_list.clone(),
        context_grid: spec.grid,
        parameters: output.checkpoint.model.param_count(),
        steps: output.history.len(),
        final_loss: output.history.last().map(|h| h.loss),
    };
    ctx.emit(&report, || {
        format!(
            "trained {} steps ({} parameters, {}x{} context, {} classes), final loss {} -> {}",
            report.steps,
            report.parameters,
            report.context_grid,
            report.context_grid,
            report.classes.len(),
            report.final_loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".into()),
            report.checkpoint.display()
        )
    })
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file or directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Cache directory or cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// train or test.
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: Split,
    /// CSV report path (default: `eval-<split>.csv` beside the checkpoint).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> CliResult<()> {
    let cache_arg = need(a.cache, &ctx.cfg.paths.cache, "--cache", "paths.cache")?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let cache = load_cache(&cache_arg, &ctx.cfg.embedder)?;
    let report = evaluate(&ckpt, &manifest, &cache, a.split)?;
    let csv = match a.csv {
        Some(p) => p,
        None => {
            let dir = if a.ckpt.is_dir() {
                a.ckpt.clone()
            } else {
                a.ckpt.parent().map(Path::to_path_buf).unwrap_or_default()
            };
            dir.join(format!("eval-{}.csv", a.split))
        }
    };
    ensure_parent(&csv)?;
    std::fs::write(&csv, report.to_csv())?;
    ctx.emit(&report, || format!("{report}\ncsv -> {}", csv.display()))
}

// ---------------------------------------------------------------- ablate

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Split manifests, one per organ.
    #[arg(long, required = true, num_args = 1..)]
    pub manifest: Vec<PathBuf>,
    /// One cache shared by all manifests, or one per manifest.
    #[arg(long, num_args = 1..)]
    pub cache: Vec<PathBuf>,
    /// Context grids to compare.
    #[arg(long, value_delimiter = ',', default_value = "5,3,1")]
    pub contexts: Vec<u32>,
    /// CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_ablate(ctx: &Ctx, a: AblateArgs) -> CliResult<()> {
    let cache_args: Vec<PathBuf> = if a.cache.is_empty() {
        vec![need(None, &ctx.cfg.paths.cache, "--cache", "paths.cache")?]
    } else {
        a.cache
    };
    if cache_args.len() != 1 && cache_args.len() != a.manifest.len() {
        return Err(CliError::Usage(format!(
            "{} caches for {} manifests; pass one shared cache or one per manifest",
            cache_args.len(),
            a.manifest.len()
        )));
    }
    for &g in &a.contexts {
        ContextSpec::new(g)?;
    }
    let manifests = a
        .manifest
        .iter()
        .map(|p| DatasetManifest::load(p))
        .collect::<spider_core::Result<Vec<_>>>()?;
    let caches = cache_args
        .iter()
        .map(|p| load_cache(p, &ctx.cfg.embedder))
        .collect::<CliResult<Vec<_>>>()?;
    let datasets: Vec<(&DatasetManifest, &EmbeddingCache)> = manifests
        .iter()
        .enumerate()
        .map(|(i, m)| (m, &caches[if caches.len() == 1 { 0 } else { i }]))
        .collect();
    let mut train_cfg = ctx.cfg.train.clone();
    train_cfg.seed = ctx.seed;
    let table = ablate(&datasets, &ctx.cfg.head, &train_cfg, &a.contexts)?;
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        std::fs::write(out, table.to_csv())?;
    }
    ctx.emit(&table, || match &a.out {
        Some(out) => format!("{table}\ncsv -> {}", out.display()),
        None => table.to_string(),
    })
}

// ---------------------------------------------------------------- segment

#[derive(Args, Debug)]
pub struct SegmentArgs {
    /// Slide image (a JSON sidecar with the same stem is optional).
    #[arg(long)]
    pub slide: PathBuf,
    /// Checkpoint file or directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Overlay PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Label map JSON.
    #[arg(long)]
    pub labels: PathBuf,
    /// Overlay opacity in [0, 1].
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Patch edge in pixels.
    #[arg(long)]
    pub size: Option<u32>,
    /// Embedder; --dim defaults to the checkpoint's embedding width.
    #[command(flatten)]
    pub embedder: EmbedderFlags,
}

#[derive(Serialize)]
struct SegmentReport {
    overlay: PathBuf,
    labels: PathBuf,
    grid: [usize; 2],
    #[serde(flatten)]
    proportions: spider_core::segmenter::ProportionReport,
}

fn cmd_segment(ctx: &Ctx, a: SegmentArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(CliError::Usage(format!("--alpha must lie in [0, 1], got {}", a.alpha)));
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mut flags = a.embedder.clone();
    flags.dim = flags.dim.or(Some(ckpt.model.config.embed_dim));
    let emb_cfg = flags.resolve(&ctx.cfg.embedder)?;
    let embedder = emb_cfg.build()?;
    let slide = SlideRaster::load(&a.slide)?;
    let opts = SegmentOptions {
        patch_size: a.size.unwrap_or(ctx.cfg.tiling.patch_size),
        pad_value: ctx.cfg.context.pad_value,
        batch_size: emb_cfg.batch_size,
    };
    let map = segment_slide(&slide, &ckpt, embedder.as_ref(), &opts)?;
    let png = render_overlay(&slide, &map, &palette(map.classes.len()), a.alpha)?;
    ensure_parent(&a.out)?;
    std::fs::write(&a.out, png)?;
    ensure_parent(&a.labels)?;
    map.save(&a.labels)?;
    let report = SegmentReport {
        overlay: a.out,
        labels: a.labels,
        grid: map.grid,
        proportions: proportions(&map),
    };
    ctx.emit(&report, || {
        format!(
            "{}\noverlay -> {}\nlabels -> {}",
            report.proportions,
            report.overlay.display(),
            report.labels.display()
        )
    })
}
