//! Dataset compilation: labeled central patches, slide-level splitting,
//! context geometry and distribution statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::{imageops, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::SeedSet;
use crate::error::{Error, Result};
use crate::slide::{read_patch, Organ, PatchRef, SlideRaster};
use crate::verifysvc::PatchKey;

pub const DEFAULT_CONTEXT_GRID: u32 = 5;
pub const DEFAULT_PAD_VALUE: u8 = 255;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;
/// Accepted deviation of the train patch fraction from the target ratio.
pub const SPLIT_TOLERANCE: f64 = 0.03;
/// Up to this many slides every assignment is searched.
pub const EXHAUSTIVE_SPLIT_MAX_SLIDES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub patch: PatchRef,
    pub class_label: String,
    pub split: Option<Split>,
}

/// Square context window of `grid`×`grid` cells around a central patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub grid: u32,
    pub pad_value: u8,
}

impl Default for ContextSpec {
    fn default() -> Self {
        Self {
            grid: DEFAULT_CONTEXT_GRID,
            pad_value: DEFAULT_PAD_VALUE,
        }
    }
}

impl ContextSpec {
    pub fn new(grid: u32) -> Result<Self> {
        if !matches!(grid, 1 | 3 | 5) {
            return Err(Error::Invalid(format!("context grid must be 1, 3 or 5, got {grid}")));
        }
        Ok(Self {
            grid,
            pad_value: DEFAULT_PAD_VALUE,
        })
    }

    pub fn tokens(&self) -> usize {
        (self.grid * self.grid) as usize
    }

    pub fn central_index(&self) -> usize {
        (self.tokens() - 1) / 2
    }

    /// Cell displacements `(dx, dy)` in row-major order.
    pub fn offsets(&self) -> Vec<(i64, i64)> {
        let h = (self.grid / 2) as i64;
        (-h..=h).flat_map(|dy| (-h..=h).map(move |dx| (dx, dy))).collect()
    }
}

pub fn context_refs(central: &PatchRef, spec: &ContextSpec) -> Vec<PatchRef> {
    spec.offsets()
        .into_iter()
        .map(|(dx, dy)| central.offset_cells(dx, dy))
        .collect()
}

/// The context window as one image, off-slide cells filled with the pad value.
pub fn assemble_context(slide: &SlideRaster, central: &PatchRef, spec: &ContextSpec) -> RgbImage {
    let s = central.size;
    let mut out = RgbImage::new(spec.grid * s, spec.grid * s);
    for (i, cell) in context_refs(central, spec).iter().enumerate() {
        let (r, c) = (i as u32 / spec.grid, i as u32 % spec.grid);
        let block = read_patch(slide, cell, spec.pad_value);
        imageops::replace(&mut out, &block, (c * s) as i64, (r * s) as i64);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub organ: Organ,
    pub class_list: Vec<String>,
    pub context: ContextSpec,
    pub split_seed: Option<u64>,
    pub ratio: Option<f64>,
    pub patches: Vec<LabeledPatch>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    organ: Organ,
    class_list: Vec<String>,
    context_grid: u32,
    pad_value: u8,
    split_seed: Option<u64>,
    ratio: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    slide_id: String,
    x: i64,
    y: i64,
    size: u32,
    level: String,
    class_label: String,
    split: Option<Split>,
}

impl DatasetManifest {
    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.class_list.iter().position(|c| c == class)
    }

    /// Replace the derived class list with an operator-supplied one.
    pub fn with_class_list(mut self, class_list: Vec<String>) -> Result<Self> {
        let known: HashSet<&str> = class_list.iter().map(String::as_str).collect();
        if known.len() != class_list.len() {
            return Err(Error::Invalid("duplicate class in class list".into()));
        }
        if let Some(p) = self.patches.iter().find(|p| !known.contains(p.class_label.as_str())) {
            return Err(Error::Invalid(format!(
                "class {:?} of {} is not in the class list",
                p.class_label, p.patch
            )));
        }
        self.class_list = class_list;
        Ok(self)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &LabeledPatch> {
        self.patches.iter().filter(move |p| p.split == Some(split))
    }

    pub fn slide_ids(&self) -> BTreeSet<&str> {
        self.patches.iter().map(|p| p.patch.slide_id.as_str()).collect()
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        serde_json::to_writer(
            &mut out,
            &ManifestHeader {
                organ: self.organ,
                class_list: self.class_list.clone(),
                context_grid: self.context.grid,
                pad_value: self.context.pad_value,
                split_seed: self.split_seed,
                ratio: self.ratio,
            },
        )?;
        out.push(b'\n');
        for p in &self.patches {
            serde_json::to_writer(
                &mut out,
                &ManifestLine {
                    slide_id: p.patch.slide_id.clone(),
                    x: p.patch.x,
                    y: p.patch.y,
                    size: p.patch.size,
                    level: p.patch.level.clone(),
                    class_label: p.class_label.clone(),
                    split: p.split,
                },
            )?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header: ManifestHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::Invalid(format!("{}: empty manifest", path.display()))),
        };
        let mut patches = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: ManifestLine = serde_json::from_str(&line)
                .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 2)))?;
            patches.push(LabeledPatch {
                patch: PatchRef {
                    slide_id: l.slide_id,
                    x: l.x,
                    y: l.y,
                    size: l.size,
                    level: l.level,
                },
                class_label: l.class_label,
                split: l.split,
            });
        }
        let m = Self {
            organ: header.organ,
            class_list: header.class_list,
            context: ContextSpec {
                grid: header.context_grid,
                pad_value: header.pad_value,
            },
            split_seed: header.split_seed,
            ratio: header.ratio,
            patches,
        };
        ContextSpec::new(m.context.grid)?;
        Ok(m)
    }
}

/// Seeds plus accepted candidates, one label per patch, ordered by
/// (slide, y, x). The class list is the sorted set of labels.
pub fn compile(accepted: &[(PatchRef, String)], seeds: &[SeedSet], context: ContextSpec) -> Result<DatasetManifest> {
    let mut labels: BTreeMap<PatchKey, (PatchRef, String)> = BTreeMap::new();
    let all = seeds
        .iter()
        .flat_map(|s| s.patches.iter().map(move |p| (p, &s.class_label)))
        .chain(accepted.iter().map(|(p, c)| (p, c)));
    for (patch, class) in all {
        match labels.get(&PatchKey::from(patch)) {
            Some((_, prev)) if prev != class => {
                return Err(Error::ClassConflict(format!("{patch} labeled both {prev:?} and {class:?}")));
            }
            Some(_) => {}
            None => {
                labels.insert(PatchKey::from(patch), (patch.clone(), class.clone()));
            }
        }
    }
    let mut patches: Vec<LabeledPatch> = labels
        .into_values()
        .map(|(patch, class_label)| LabeledPatch {
            patch,
            class_label,
            split: None,
        })
        .collect();
    patches.sort_by(|a, b| a.patch.cmp(&b.patch));
    let class_list: Vec<String> = patches
        .iter()
        .map(|p| p.class_label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(DatasetManifest {
        organ: seeds.first().map(|s| s.organ).unwrap_or_default(),
        class_list,
        context,
        split_seed: None,
        ratio: None,
        patches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train_slides: Vec<String>,
    pub test_slides: Vec<String>,
    pub train_patches: usize,
    pub test_patches: usize,
    /// Train share of all patches.
    pub train_fraction: f64,
    /// |train_fraction − ratio|.
    pub deviation: f64,
    /// Train share per class.
    pub class_train_fraction: BTreeMap<String, f64>,
    pub within_tolerance: bool,
}

/// Per-slide patch counts by class index.
struct SlideCounts {
    id: String,
    counts: Vec<usize>,
    total: usize,
}

struct SplitProblem<'a> {
    slides: &'a [SlideCounts],
    class_totals: Vec<usize>,
    total: usize,
    ratio: f64,
}

/// Ordering key for an assignment, smaller is better: first the overall
/// deviation beyond the tolerance, then the patch-weighted squared per-class
/// deviation, then the overall deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cost(f64, f64, f64);

impl Cost {
    fn better_than(&self, other: &Cost) -> bool {
        (self.0, self.1, self.2)
            .partial_cmp(&(other.0, other.1, other.2))
            .map(|o| o == std::cmp::Ordering::Less)
            .unwrap_or(false)
    }
}

impl SplitProblem<'_> {
    fn cost(&self, train: &[bool]) -> Option<Cost> {
        let n_train = train.iter().filter(|&&t| t).count();
        if n_train == 0 || n_train == train.len() {
            return None;
        }
        let mut class_train = vec![0usize; self.class_totals.len()];
        let mut train_total = 0;
        for (s, &t) in self.slides.iter().zip(train) {
            if t {
                train_total += s.total;
                for (acc, c) in class_train.iter_mut().zip(&s.counts) {
                    *acc += c;
                }
            }
        }
        let dev = (train_total as f64 / self.total as f64 - self.ratio).abs();
        let class_cost: f64 = class_train
            .iter()
            .zip(&self.class_totals)
            .filter(|(_, &tot)| tot > 0)
            .map(|(&tr, &tot)| {
                let d = tr as f64 / tot as f64 - self.ratio;
                tot as f64 / self.total as f64 * d * d
            })
            .sum();
        Some(Cost((dev - SPLIT_TOLERANCE).max(0.0), class_cost, dev))
    }

    fn exhaustive(&self, order: &[usize]) -> Vec<bool> {
        let n = self.slides.len();
        let mut best: Option<(Cost, Vec<bool>)> = None;
        let mut train = vec![false; n];
        for mask in 1u32..(1u32 << n) - 1 {
            for (bit, &slide) in order.iter().enumerate() {
                train[slide] = mask & (1 << bit) != 0;
            }
            if let Some(c) = self.cost(&train) {
                if best.as_ref().map(|(b, _)| c.better_than(b)).unwrap_or(true) {
                    best = Some((c, train.clone()));
                }
            }
        }
        best.expect("at least two slides").1
    }

    fn greedy(&self, order: &[usize]) -> Vec<bool> {
        let n = self.slides.len();
        let k = self.class_totals.len();
        let mut train = vec![false; n];
        let mut tr = vec![0f64; k];
        let mut te = vec![0f64; k];
        let target_tr: Vec<f64> = self.class_totals.iter().map(|&t| t as f64 * self.ratio).collect();
        let target_te: Vec<f64> = self.class_totals.iter().map(|&t| t as f64 * (1.0 - self.ratio)).collect();
        let gap = |acc: &[f64], target: &[f64], add: &[usize]| -> f64 {
            acc.iter()
                .zip(target)
                .zip(add)
                .map(|((&a, &t), &c)| {
                    let after = (a + c as f64 - t).max(0.0);
                    let before = (a - t).max(0.0);
                    after * after - before * before
                })
                .sum()
        };
        for &i in order {
            let c = &self.slides[i].counts;
            // Prefer the side whose targets the slide overshoots least.
            let to_train = gap(&tr, &target_tr, c) <= gap(&te, &target_te, c);
            let acc = if to_train { &mut tr } else { &mut te };
            for (a, &x) in acc.iter_mut().zip(c) {
                *a += x as f64;
            }
            train[i] = to_train;
        }
        if train.iter().all(|&t| t) {
            train[*order.last().expect("non-empty")] = false;
        } else if train.iter().all(|&t| !t) {
            train[order[0]] = true;
        }
        self.improve(train)
    }

    /// Single moves and pairwise swaps until no step lowers the cost.
    fn improve(&self, mut train: Vec<bool>) -> Vec<bool> {
        let n = train.len();
        let mut cost = self.cost(&train).expect("both sides populated");
        loop {
            let mut improved = false;
            for i in 0..n {
                train[i] = !train[i];
                match self.cost(&train) {
                    Some(c) if c.better_than(&cost) => {
                        cost = c;
                        improved = true;
                    }
                    _ => train[i] = !train[i],
                }
            }
            for i in 0..n {
                for j in i + 1..n {
                    if train[i] == train[j] {
                        continue;
                    }
                    train.swap(i, j);
                    match self.cost(&train) {
                        Some(c) if c.better_than(&cost) => {
                            cost = c;
                            improved = true;
                        }
                        _ => train.swap(i, j),
                    }
                }
            }
            if !improved {
                return train;
            }
        }
    }
}

/// Assign whole slides to train or test so the train share of patches is as
/// close to `ratio` as slide granularity allows, per class where possible.
/// Both splits receive at least one slide. Deterministic for a given seed.
pub fn split_slides(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<(DatasetManifest, SplitReport)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("ratio {ratio} outside (0, 1)")));
    }
    let class_idx: HashMap<&str, usize> = manifest
        .class_list
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut per_slide: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for p in &manifest.patches {
        let ci = *class_idx
            .get(p.class_label.as_str())
            .ok_or_else(|| Error::Invalid(format!("class {:?} not in class list", p.class_label)))?;
        per_slide
            .entry(p.patch.slide_id.as_str())
            .or_insert_with(|| vec![0; manifest.class_list.len()])[ci] += 1;
    }
    if per_slide.len() < 2 {
        return Err(Error::CannotSplit(format!("{} slide(s); need at least 2", per_slide.len())));
    }
    let slides: Vec<SlideCounts> = per_slide
        .into_iter()
        .map(|(id, counts)| SlideCounts {
            id: id.to_string(),
            total: counts.iter().sum(),
            counts,
        })
        .collect();
    let mut class_totals = vec![0usize; manifest.class_list.len()];
    for s in &slides {
        for (t, c) in class_totals.iter_mut().zip(&s.counts) {
            *t += c;
        }
    }
    let problem = SplitProblem {
        slides: &slides,
        total: class_totals.iter().sum(),
        class_totals,
        ratio,
    };

    // Seeded shuffle, then a stable sort largest-first: ties keep the shuffled order.
    let mut order: Vec<usize> = (0..slides.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|&a, &b| slides[b].total.cmp(&slides[a].total));

    let train = if slides.len() <= EXHAUSTIVE_SPLIT_MAX_SLIDES {
        problem.exhaustive(&order)
    } else {
        problem.greedy(&order)
    };

    let assignment: HashMap<&str, Split> = slides
        .iter()
        .zip(&train)
        .map(|(s, &t)| (s.id.as_str(), if t { Split::Train } else { Split::Test }))
        .collect();
    let mut out = manifest.clone();
    for p in &mut out.patches {
        p.split = Some(assignment[p.patch.slide_id.as_str()]);
    }
    out.split_seed = Some(seed);
    out.ratio = Some(ratio);

    let report = split_report(&out, ratio);
    if !report.within_tolerance {
        tracing::warn!(
            deviation = report.deviation,
            "train fraction {:.3} misses target {ratio} by more than {SPLIT_TOLERANCE}",
            report.train_fraction
        );
    }
    Ok((out, report))
}

pub fn split_report(manifest: &DatasetManifest, ratio: f64) -> SplitReport {
    let mut train_slides = BTreeSet::new();
    let mut test_slides = BTreeSet::new();
    let mut by_class: BTreeMap<String, (usize, usize)> = manifest
        .class_list
        .iter()
        .map(|c| (c.clone(), (0, 0)))
        .collect();
    for p in &manifest.patches {
        let e = by_class.entry(p.class_label.clone()).or_default();
        match p.split {
            Some(Split::Train) => {
                train_slides.insert(p.patch.slide_id.clone());
                e.0 += 1;
            }
            Some(Split::Test) => {
                test_slides.insert(p.patch.slide_id.clone());
                e.1 += 1;
            }
            None => {}
        }
    }
    let train_patches: usize = by_class.values().map(|v| v.0).sum();
    let test_patches: usize = by_class.values().map(|v| v.1).sum();
    let total = (train_patches + test_patches).max(1);
    let train_fraction = train_patches as f64 / total as f64;
    let deviation = (train_fraction - ratio).abs();
    SplitReport {
        train_slides: train_slides.into_iter().collect(),
        test_slides: test_slides.into_iter().collect(),
        train_patches,
        test_patches,
        train_fraction,
        deviation,
        class_train_fraction: by_class
            .into_iter()
            .filter(|(_, (a, b))| a + b > 0)
            .map(|(c, (a, b))| (c, a as f64 / (a + b) as f64))
            .collect(),
        within_tolerance: deviation <= SPLIT_TOLERANCE + 1e-12,
    }
}

/// Distinct context cells over all centrals. Cells sharing no pixel with
/// their slide are padding and not counted; slides without known bounds
/// only drop cells at negative coordinates.
pub fn unique_patch_count(manifest: &DatasetManifest, bounds: impl Fn(&str) -> Option<(u32, u32)>) -> u64 {
    let mut seen: HashSet<PatchKey> = HashSet::new();
    for p in &manifest.patches {
        let b = bounds(&p.patch.slide_id);
        for cell in context_refs(&p.patch, &manifest.context) {
            let on_slide = match b {
                Some((w, h)) => cell.overlaps(w, h),
                None => cell.x >= 0 && cell.y >= 0,
            };
            if on_slide {
                seen.insert(PatchKey::from(&cell));
            }
        }
    }
    seen.len() as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class_label: String,
    pub train: usize,
    pub test: usize,
    pub total: usize,
}

/// Table-1-shaped dataset summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub organ: Organ,
    pub classes: Vec<ClassCount>,
    pub train: usize,
    pub test: usize,
    pub total_central_patches: usize,
    pub total_unique_patches: u64,
    pub total_slides: usize,
    pub total_classes: usize,
}

pub fn class_stats(manifest: &DatasetManifest, bounds: impl Fn(&str) -> Option<(u32, u32)>) -> DatasetStats {
    let mut rows: Vec<ClassCount> = manifest
        .class_list
        .iter()
        .map(|c| ClassCount {
            class_label: c.clone(),
            train: 0,
            test: 0,
            total: 0,
        })
        .collect();
    for p in &manifest.patches {
        let Some(i) = manifest.class_index(&p.class_label) else {
            continue;
        };
        rows[i].total += 1;
        match p.split {
            Some(Split::Train) => rows[i].train += 1,
            Some(Split::Test) => rows[i].test += 1,
            None => {}
        }
    }
    DatasetStats {
        organ: manifest.organ,
        train: rows.iter().map(|r| r.train).sum(),
        test: rows.iter().map(|r| r.test).sum(),
        total_central_patches: manifest.patches.len(),
        total_unique_patches: unique_patch_count(manifest, bounds),
        total_slides: manifest.slide_ids().len(),
        total_classes: manifest.class_list.len(),
        classes: rows,
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>10} {:>10} {:>22} {:>21} {:>13} {:>13}",
            "Organ", "Train", "Test", "Total Central Patches", "Total Unique Patches", "Total Slides", "Total Classes"
        )?;
        writeln!(
            f,
            "{:<12} {:>10} {:>10} {:>22} {:>21} {:>13} {:>13}",
            self.organ.to_string(),
            self.train,
            self.test,
            self.total_central_patches,
            self.total_unique_patches,
            self.total_slides,
            self.total_classes
        )?;
        writeln!(f)?;
        let width = self.classes.iter().map(|c| c.class_label.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$} {:>10} {:>10} {:>10}", "Class", "Train", "Test", "Total")?;
        for c in &self.classes {
            writeln!(f, "{:<width$} {:>10} {:>10} {:>10}", c.class_label, c.train, c.test, c.total)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(slide: &str, col: i64, row: i64) -> PatchRef {
        PatchRef::new(slide, col * 224, row * 224, 224)
    }

    fn seeds(class: &str, patches: Vec<PatchRef>) -> SeedSet {
        SeedSet {
            class_label: class.into(),
            organ: Organ::Skin,
            patches,
        }
    }

    fn manifest_of(slides: &[(&str, usize)]) -> DatasetManifest {
        let mut accepted = Vec::new();
        for (s, n) in slides {
            for i in 0..*n {
                accepted.push((p(s, i as i64, 0), "a".to_string()));
            }
        }
        compile(&accepted, &[], ContextSpec::default()).unwrap()
    }

    #[test]
    fn compile_counts_and_order() {
        let seed_patches: Vec<PatchRef> = (0..10).map(|i| p("s2", i, 3)).collect();
        let accepted: Vec<(PatchRef, String)> = (0..5).map(|i| (p("s1", i, 9 - i), "b".to_string())).collect();
        let m = compile(&accepted, &[seeds("a", seed_patches)], ContextSpec::default()).unwrap();
        assert_eq!(m.patches.len(), 15);
        assert_eq!(m.class_list, vec!["a", "b"]);
        let keys: Vec<_> = m.patches.iter().map(|l| (l.patch.slide_id.clone(), l.patch.y, l.patch.x)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn compile_rejects_cross_class() {
        let accepted = vec![(p("s", 0, 0), "a".to_string()), (p("s", 0, 0), "b".to_string())];
        let err = compile(&accepted, &[], ContextSpec::default()).unwrap_err();
        assert!(matches!(err, Error::ClassConflict(_)));
        assert!(err.to_string().contains("s@(0,0)"));
    }

    #[test]
    fn compile_seeds_only() {
        let m = compile(&[], &[seeds("a", vec![p("s", 0, 0), p("s", 1, 0)])], ContextSpec::default()).unwrap();
        assert_eq!(m.patches.len(), 2);
    }

    #[test]
    fn split_uniform_slides_exact() {
        let slides: Vec<(String, usize)> = (0..10).map(|i| (format!("s{i}"), 100)).collect();
        let refs: Vec<(&str, usize)> = slides.iter().map(|(s, n)| (s.as_str(), *n)).collect();
        let m = manifest_of(&refs);
        for seed in [0, 1, 42] {
            let (_, r) = split_slides(&m, 0.8, seed).unwrap();
            assert_eq!((r.train_slides.len(), r.test_slides.len()), (8, 2));
            assert_eq!((r.train_patches, r.test_patches), (800, 200));
        }
    }

    #[test]
    fn split_granularity_bound() {
        let m = manifest_of(&[("big", 90), ("small", 10)]);
        let (_, r) = split_slides(&m, 0.8, 7).unwrap();
        assert_eq!((r.train_patches, r.test_patches), (90, 10));
        assert!(!r.within_tolerance);
        assert!((r.deviation - 0.1).abs() < 1e-12);
    }

    #[test]
    fn split_is_deterministic() {
        let m = manifest_of(&[("a", 10), ("b", 10), ("c", 10), ("d", 10), ("e", 7)]);
        assert_eq!(split_slides(&m, 0.8, 3).unwrap(), split_slides(&m, 0.8, 3).unwrap());
    }

    #[test]
    fn split_needs_two_slides() {
        let m = manifest_of(&[("a", 10)]);
        assert!(split_slides(&m, 0.8, 0).unwrap_err().to_string().contains("cannot split"));
    }

    #[test]
    fn split_greedy_path_many_slides() {
        let slides: Vec<(String, usize)> = (0..40).map(|i| (format!("s{i:02}"), 5 + (i * 7) % 23)).collect();
        let refs: Vec<(&str, usize)> = slides.iter().map(|(s, n)| (s.as_str(), *n)).collect();
        let m = manifest_of(&refs);
        let (out, r) = split_slides(&m, 0.8, 11).unwrap();
        assert!(r.within_tolerance, "{r:?}");
        let train: HashSet<_> = out.in_split(Split::Train).map(|p| &p.patch.slide_id).collect();
        assert!(out.in_split(Split::Test).all(|p| !train.contains(&p.patch.slide_id)));
    }

    #[test]
    fn context_refs_geometry() {
        let spec = ContextSpec::new(5).unwrap();
        let refs = context_refs(&PatchRef::new("s", 448, 448, 224), &spec);
        assert_eq!(refs.len(), 25);
        let mut cells: Vec<(i64, i64)> = refs.iter().map(|r| (r.x / 224, r.y / 224)).collect();
        cells.sort();
        let expected: Vec<(i64, i64)> = (0..5).flat_map(|x| (0..5).map(move |y| (x, y))).collect();
        assert_eq!(cells, expected);
        assert_eq!(refs[spec.central_index()], PatchRef::new("s", 448, 448, 224));

        let corner = context_refs(&PatchRef::new("s", 0, 0, 224), &spec);
        assert_eq!(corner.iter().filter(|r| r.x < 0 || r.y < 0).count(), 16);

        let one = context_refs(&PatchRef::new("s", 0, 0, 224), &ContextSpec::new(1).unwrap());
        assert_eq!(one, vec![PatchRef::new("s", 0, 0, 224)]);
        assert!(ContextSpec::new(4).is_err());
    }

    #[test]
    fn unique_counts() {
        let big = |_: &str| Some((224 * 20, 224 * 20));
        let mut m = compile(&[(p("s", 5, 5), "a".to_string())], &[], ContextSpec::default()).unwrap();
        assert_eq!(unique_patch_count(&m, big), 25);
        m = compile(
            &[(p("s", 5, 5), "a".to_string()), (p("s", 6, 5), "a".to_string())],
            &[],
            ContextSpec::default(),
        )
        .unwrap();
        assert_eq!(unique_patch_count(&m, big), 30);
        m.context = ContextSpec::new(1).unwrap();
        assert_eq!(unique_patch_count(&m, big), 2);
    }

    #[test]
    fn stats_rows_and_totals() {
        let mut m = compile(
            &(0..15)
                .map(|i| (p(if i < 8 { "s1" } else { "s2" }, i, 0), if i % 3 == 0 { "x" } else { "y" }.to_string()))
                .collect::<Vec<_>>(),
            &[],
            ContextSpec::default(),
        )
        .unwrap()
        .with_class_list(vec!["x".into(), "y".into(), "z".into()])
        .unwrap();
        m = split_slides(&m, 0.5, 1).unwrap().0;
        let st = class_stats(&m, |_| None);
        assert_eq!(st.classes.iter().map(|c| c.total).sum::<usize>(), 15);
        assert_eq!(st.train + st.test, st.total_central_patches);
        assert_eq!(st.classes[2].total, 0);
        assert_eq!(st.total_classes, 3);
        assert_eq!(st.total_slides, 2);
    }

    #[test]
    fn manifest_save_load_save_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_of(&[("a", 3), ("b", 4)]);
        let (m, _) = split_slides(&m, 0.8, 5).unwrap();
        let path = dir.path().join("m.jsonl");
        m.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back, m);
        back.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}
