//! Training loop, evaluation metrics and the context-size ablation.

use std::fmt::{self, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{context_refs, ContextSpec, DatasetManifest, Split};
use crate::embedder::EmbeddingCache;
use crate::error::{Error, Result};
use crate::model::{head_init, Checkpoint, Gradients, HeadConfig, HeadModel, LossConfig, Real, Reduction, Tensor};
use crate::slide::PatchRef;

pub const HISTORY_FILE: &str = "history.csv";
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub lr_max: f64,
    pub weight_decay: f64,
    /// Linear warmup length; cosine annealing to zero afterwards.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            label_smoothing: 0.2,
            lr_max: 4e-4,
            weight_decay: 0.01,
            warmup_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.lr_max < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr_max and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

fn cast<T: Real>(x: f64) -> T {
    T::from(x).expect("representable")
}

/// Loss and its gradient with respect to the logits (softmax − target).
pub(crate) fn smoothed_ce_grad<T: Real>(logits: &[T], class: usize, eps: f64) -> Result<(T, Vec<T>)> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::ShapeMismatch(format!("{k} logits; need at least 2")));
    }
    if class >= k {
        return Err(Error::Invalid(format!("class {class} out of range for {k} logits")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let m = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
    let off: T = cast(eps / k as f64);
    let on: T = cast::<T>(1.0 - eps) + off;
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(k);
    for (c, &l) in logits.iter().enumerate() {
        let t = if c == class { on } else { off };
        let logp = l - lse;
        loss = loss - t * logp;
        grad.push(logp.exp() - t);
    }
    Ok((loss, grad))
}

/// Cross-entropy against `(1−ε)·onehot + ε/K`.
pub fn smoothed_ce<T: Real>(logits: &[T], true_class: usize, eps: f64) -> Result<T> {
    Ok(smoothed_ce_grad(logits, true_class, eps)?.0)
}

/// Linear warmup from 0 to `lr_max`, then half-cosine down to 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, lr_max: f64) -> f64 {
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = (step.min(total_steps) - warmup_steps) as f64 / span;
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &HeadModel<T>) -> Self {
        let z = Gradients::zeros_like(model).tensors;
        Self { m: z.clone(), v: z, t: 0 }
    }
}

/// One AdamW update with bias correction. Weight decay is decoupled:
/// each parameter is first scaled by (1 − lr·wd).
pub fn optimizer_step<T: Real>(
    model: &mut HeadModel<T>,
    grads: &Gradients<T>,
    lr: f64,
    weight_decay: f64,
    state: &mut AdamState<T>,
) -> Result<()> {
    let shapes_match = grads.tensors.len() == model.params.len()
        && state.m.len() == model.params.len()
        && model
            .params
            .iter()
            .zip(&grads.tensors)
            .zip(&state.m)
            .all(|((p, g), m)| p.data.len() == g.len() && g.len() == m.len());
    if !shapes_match {
        return Err(Error::ShapeMismatch("gradients do not match parameters".into()));
    }
    state.t += 1;
    let (b1, b2): (T, T) = (cast(ADAM_BETA1), cast(ADAM_BETA2));
    let bc1: T = cast(1.0 - ADAM_BETA1.powi(state.t as i32));
    let bc2: T = cast(1.0 - ADAM_BETA2.powi(state.t as i32));
    let lr_t: T = cast(lr);
    let decay: T = cast(1.0 - lr * weight_decay);
    let eps: T = cast(ADAM_EPS);
    for (((p, g), m), v) in model.params.iter_mut().zip(&grads.tensors).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.data.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] = p.data[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Token matrix for a central patch: one cached embedding per context cell,
/// row-major.
pub fn context_tokens<T: Real>(cache: &EmbeddingCache, central: &PatchRef, spec: &ContextSpec) -> Result<Tensor<T>> {
    let refs = context_refs(central, spec);
    let mut data = Vec::with_capacity(refs.len() * cache.dim());
    for r in &refs {
        let v = cache.get(r).ok_or_else(|| Error::MissingEmbedding(r.to_string()))?;
        data.extend(v.iter().map(|&x| T::from(x).expect("castable")));
    }
    Tensor::matrix(refs.len(), cache.dim(), data)
}

fn labeled_split<'a>(manifest: &'a DatasetManifest, split: Split) -> Result<Vec<(&'a PatchRef, usize)>> {
    manifest
        .in_split(split)
        .map(|p| {
            manifest
                .class_index(&p.class_label)
                .map(|c| (&p.patch, c))
                .ok_or_else(|| Error::Invalid(format!("class {:?} not in class list", p.class_label)))
        })
        .collect()
}

fn check_cached(cache: &EmbeddingCache, samples: &[(&PatchRef, usize)], spec: &ContextSpec) -> Result<()> {
    for (p, _) in samples {
        if let Some(missing) = context_refs(p, spec).into_iter().find(|r| !cache.contains(r)) {
            return Err(Error::MissingEmbedding(format!("{missing} (context of {p})")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for h in history {
        let _ = writeln!(s, "{},{},{}", h.step, h.lr, h.loss);
    }
    s
}

pub struct TrainRun<T> {
    pub model: HeadModel<T>,
    pub initial: HeadModel<T>,
    pub history: Vec<HistoryRow>,
}

/// Train a head on the manifest's train split at context grid `g`. The
/// head's `embed_dim` and `num_classes` are taken from the cache and the
/// manifest. Generic over precision; `train` is the f32 entry point.
pub fn train_with<T: Real>(
    manifest: &DatasetManifest,
    cache: &EmbeddingCache,
    head: &HeadConfig,
    cfg: &TrainConfig,
    g: u32,
) -> Result<TrainRun<T>> {
    cfg.validate()?;
    let spec = ContextSpec {
        grid: ContextSpec::new(g)?.grid,
        pad_value: manifest.context.pad_value,
    };
    let head = HeadConfig {
        embed_dim: cache.dim(),
        num_classes: manifest.class_list.len(),
        ..head.clone()
    };
    head.position_ids(spec.tokens())?;
    let samples = labeled_split(manifest, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Invalid("manifest has no train patches".into()));
    }
    check_cached(cache, &samples, &spec)?;

    let mut model: HeadModel<T> = head_init(&head, cfg.seed)?;
    let initial = model.clone();
    let mut adam = AdamState::new(&model);
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size) as u64;
    let total = cfg.epochs as u64 * steps_per_epoch;
    let warmup = cfg.warmup_epochs as u64 * steps_per_epoch;
    let loss_cfg = LossConfig {
        label_smoothing: cfg.label_smoothing,
        reduction: Reduction::Mean,
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let tokens: Vec<Tensor<T>> = batch
                .par_iter()
                .map(|&i| context_tokens(cache, samples[i].0, &spec))
                .collect::<Result<_>>()?;
            let refs: Vec<(&Tensor<T>, usize)> = tokens.iter().zip(batch).map(|(t, &i)| (t, samples[i].1)).collect();
            let dropout_seed = cfg.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let (loss, grads) = model.batch_gradients(&refs, &loss_cfg, Some(dropout_seed))?;
            let lr = lr_at(step, total, warmup, cfg.lr_max);
            optimizer_step(&mut model, &grads, lr, cfg.weight_decay, &mut adam)?;
            let loss = loss.to_f64().unwrap_or(f64::NAN);
            tracing::debug!(epoch, step, lr, loss, "train step");
            history.push(HistoryRow { step, lr, loss });
        }
    }
    Ok(TrainRun {
        model,
        initial,
        history,
    })
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
}

impl TrainOutput {
    /// Writes `model.ckpt` and `history.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.checkpoint.save(&dir.join(crate::model::CHECKPOINT_FILE))?;
        std::fs::write(dir.join(HISTORY_FILE), history_csv(&self.history))?;
        Ok(())
    }
}

pub fn train(
    manifest: &DatasetManifest,
    cache: &EmbeddingCache,
    head: &HeadConfig,
    cfg: &TrainConfig,
    g: u32,
) -> Result<TrainOutput> {
    let run = train_with::<f32>(manifest, cache, head, cfg, g)?;
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            class_list: manifest.class_list.clone(),
            seed: cfg.seed,
            context_grid: g,
            model: run.model,
        },
        history: run.history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_label: String,
    pub support: u64,
    /// Class-conditional accuracy (recall).
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassMetrics>,
    pub micro_accuracy: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    /// Metrics from a confusion matrix. Undefined ratios are 0; macro
    /// averages run over classes that occur as truth or prediction.
    pub fn from_confusion(class_list: &[String], confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = class_list.len();
        if confusion.len() != k || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch(format!("confusion matrix is not {k}×{k}")));
        }
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let mut classes = Vec::with_capacity(k);
        let (mut p_sum, mut f_sum, mut present) = (0.0, 0.0, 0usize);
        for (i, name) in class_list.iter().enumerate() {
            let support: u64 = confusion[i].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[i]).sum();
            let tp = confusion[i][i];
            let recall = ratio(tp, support);
            let precision = ratio(tp, predicted);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            if support + predicted > 0 {
                present += 1;
                p_sum += precision;
                f_sum += f1;
            }
            classes.push(ClassMetrics {
                class_label: name.clone(),
                support,
                accuracy: recall,
                precision,
                f1,
            });
        }
        let macro_of = |s: f64| if present == 0 { 0.0 } else { s / present as f64 };
        Ok(Self {
            classes,
            micro_accuracy: ratio(trace, total),
            macro_precision: macro_of(p_sum),
            macro_f1: macro_of(f_sum),
            confusion,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,support,accuracy,precision,f1\n");
        for c in &self.classes {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", c.class_label, c.support, c.accuracy, c.precision, c.f1);
        }
        let support: u64 = self.classes.iter().map(|c| c.support).sum();
        let _ = writeln!(
            s,
            "Total,{support},{:.6},{:.6},{:.6}",
            self.micro_accuracy, self.macro_precision, self.macro_f1
        );
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.classes.iter().map(|c| c.class_label.len()).max().unwrap_or(0).max(5);
        writeln!(f, "{:<w$} {:>8} {:>9} {:>10} {:>9}", "Class", "Support", "Accuracy", "Precision", "F1")?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<w$} {:>8} {:>9.4} {:>10.4} {:>9.4}",
                c.class_label, c.support, c.accuracy, c.precision, c.f1
            )?;
        }
        let support: u64 = self.classes.iter().map(|c| c.support).sum();
        writeln!(
            f,
            "{:<w$} {:>8} {:>9.4} {:>10.4} {:>9.4}",
            "Total", support, self.micro_accuracy, self.macro_precision, self.macro_f1
        )?;
        write!(f, "(Total: micro accuracy, macro precision, macro F1)")
    }
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class index and softmax confidence for one token matrix.
pub fn classify<T: Real>(model: &HeadModel<T>, tokens: &Tensor<T>) -> Result<(usize, f64)> {
    let logits = model.logits(tokens)?;
    let c = argmax(&logits);
    let m = logits[c];
    let z: T = logits.iter().map(|&l| (l - m).exp()).sum();
    Ok((c, (T::one() / z).to_f64().unwrap_or(0.0)))
}

/// Evaluate a checkpoint on one split of the manifest.
pub fn evaluate(ckpt: &Checkpoint, manifest: &DatasetManifest, cache: &EmbeddingCache, split: Split) -> Result<EvalReport> {
    if ckpt.class_list != manifest.class_list {
        return Err(Error::ClassListMismatch(format!(
            "checkpoint {:?} vs manifest {:?}",
            ckpt.class_list, manifest.class_list
        )));
    }
    if cache.dim() != ckpt.model.config.embed_dim {
        return Err(Error::DimensionMismatch {
            expected: ckpt.model.config.embed_dim,
            actual: cache.dim(),
        });
    }
    let spec = ContextSpec {
        grid: ckpt.context_grid,
        pad_value: manifest.context.pad_value,
    };
    let samples = labeled_split(manifest, split)?;
    check_cached(cache, &samples, &spec)?;
    let preds: Vec<(usize, usize)> = samples
        .par_iter()
        .map(|(p, truth)| {
            let tokens = context_tokens::<f32>(cache, p, &spec)?;
            Ok((*truth, classify(&ckpt.model, &tokens)?.0))
        })
        .collect::<Result<_>>()?;
    let k = manifest.class_list.len();
    let mut confusion = vec![vec![0u64; k]; k];
    for (t, p) in preds {
        confusion[t][p] += 1;
    }
    EvalReport::from_confusion(&manifest.class_list, confusion)
}

pub fn context_label(g: u32, patch_size: u32) -> String {
    let side = g * patch_size;
    let name = match g {
        5 => "Large",
        3 => "Medium",
        1 => "No Context",
        _ => "Context",
    };
    format!("{name} {side}×{side}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub organ: String,
    /// Test micro-accuracy per context, in `AblationTable::contexts` order.
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub contexts: Vec<u32>,
    pub patch_size: u32,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("organ");
        for &g in &self.contexts {
            let _ = write!(s, ",{}", context_label(g, self.patch_size));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.organ);
            for a in &r.accuracy {
                let _ = write!(s, ",{a:.6}");
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = self.contexts.iter().map(|&g| context_label(g, self.patch_size)).collect();
        let w = self.rows.iter().map(|r| r.organ.len()).max().unwrap_or(0).max(5);
        write!(f, "{:<w$}", "Organ")?;
        for l in &labels {
            write!(f, " {:>22}", l)?;
        }
        for r in &self.rows {
            write!(f, "\n{:<w$}", r.organ)?;
            for a in &r.accuracy {
                write!(f, " {:>22.4}", a)?;
            }
        }
        Ok(())
    }
}

/// Train and test one model per context size with identical seeds, one
/// table row per dataset in input order.
pub fn ablate(
    datasets: &[(&DatasetManifest, &EmbeddingCache)],
    head: &HeadConfig,
    cfg: &TrainConfig,
    contexts: &[u32],
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(datasets.len());
    let mut patch_size = crate::slide::DEFAULT_PATCH_SIZE;
    for (manifest, cache) in datasets {
        if let Some(p) = manifest.patches.first() {
            patch_size = p.patch.size;
        }
        let mut accuracy = Vec::with_capacity(contexts.len());
        for &g in contexts {
            let out = train(manifest, cache, head, cfg, g)?;
            let report = evaluate(&out.checkpoint, manifest, cache, Split::Test)?;
            tracing::info!(organ = %manifest.organ, g, accuracy = report.micro_accuracy, "ablation run");
            accuracy.push(report.micro_accuracy);
        }
        rows.push(AblationRow {
            organ: manifest.organ.to_string(),
            accuracy,
        });
    }
    Ok(AblationTable {
        contexts: contexts.to_vec(),
        patch_size,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compile, split_slides};
    use crate::model::head_forward;
    use rand::Rng;

    #[test]
    fn smoothed_ce_worked_examples() {
        assert!((smoothed_ce(&[0.0f64, 0.0], 1, 0.2).unwrap() - 2f64.ln()).abs() < 1e-12);
        let v = smoothed_ce(&[3f64.ln(), 0.0], 0, 0.2).unwrap();
        let hand = 0.9 * (4.0f64 / 3.0).ln() + 0.1 * 4f64.ln();
        assert!((v - hand).abs() < 1e-12);
        assert!((v - 0.397543).abs() < 1e-6);
        assert!(matches!(smoothed_ce(&[f64::NAN, 0.0], 0, 0.2), Err(Error::NonFiniteLogits)));
        assert!(smoothed_ce(&[1.0f64], 0, 0.2).is_err());
    }

    #[test]
    fn smoothed_ce_zero_eps_is_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let k = rng.gen_range(2..8);
            let l: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = rng.gen_range(0..k);
            let naive = -(l[c].exp() / l.iter().map(|x| x.exp()).sum::<f64>()).ln();
            assert!((smoothed_ce(&l, c, 0.0).unwrap() - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule_points() {
        let (total, warm) = (1000, 100);
        assert_eq!(lr_at(0, total, warm, 4e-4), 0.0);
        assert_eq!(lr_at(warm, total, warm, 4e-4), 4e-4);
        assert!((lr_at(50, total, warm, 4e-4) - 2e-4).abs() < 1e-18);
        assert!((lr_at(warm + (total - warm) / 2, total, warm, 4e-4) - 2e-4).abs() < 1e-12);
        assert_eq!(lr_at(total, total, warm, 4e-4), 0.0);
        let before = lr_at(warm - 1, total, warm, 4e-4);
        let after = lr_at(warm + 1, total, warm, 4e-4);
        assert!((4e-4 - before) < 1e-5 && (4e-4 - after) < 1e-5);
    }

    fn tiny_model() -> HeadModel<f64> {
        let cfg = HeadConfig {
            embed_dim: 5,
            hidden: 4,
            intermediate: 3,
            num_classes: 2,
            ..HeadConfig::default()
        };
        head_init(&cfg, 1).unwrap()
    }

    #[test]
    fn adamw_zero_gradient() {
        let mut m = tiny_model();
        let before = m.clone();
        let zero = Gradients::zeros_like(&m);
        let mut st = AdamState::new(&m);
        optimizer_step(&mut m, &zero, 1e-3, 0.0, &mut st).unwrap();
        assert_eq!(m, before);
        optimizer_step(&mut m, &zero, 1e-3, 0.01, &mut st).unwrap();
        for (a, b) in m.params.iter().zip(&before.params) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y * (1.0 - 1e-5)).abs() <= 1e-15 * y.abs());
                assert!(x.abs() <= y.abs());
            }
        }
        let mut bad = zero.clone();
        bad.tensors.pop();
        assert!(optimizer_step(&mut m, &bad, 1e-3, 0.01, &mut st).is_err());
    }

    #[test]
    fn adamw_matches_reference_update() {
        let mut m = tiny_model();
        let mut flat: Vec<f64> = m.params.iter().flat_map(|p| p.data.clone()).collect();
        let (mut mm, mut vv) = (vec![0.0; flat.len()], vec![0.0; flat.len()]);
        let mut st = AdamState::new(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in 1..=100 {
            let mut g = Gradients::zeros_like(&m);
            g.tensors.iter_mut().flatten().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let lr = rng.gen_range(0.0..1e-2);
            let wd = 0.01;
            optimizer_step(&mut m, &g, lr, wd, &mut st).unwrap();
            for (i, gi) in g.tensors.iter().flatten().enumerate() {
                flat[i] -= lr * wd * flat[i];
                mm[i] = 0.9 * mm[i] + 0.1 * gi;
                vv[i] = 0.999 * vv[i] + 0.001 * gi * gi;
                let mh = mm[i] / (1.0 - 0.9f64.powi(t));
                let vh = vv[i] / (1.0 - 0.999f64.powi(t));
                flat[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in m.params.iter().flat_map(|p| p.data.iter()).zip(&flat) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn report_from_fixed_confusion() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let r = EvalReport::from_confusion(&classes, vec![vec![8, 2], vec![1, 9]]).unwrap();
        assert!((r.micro_accuracy - 0.85).abs() < 1e-12);
        assert!((r.classes[0].precision - 8.0 / 9.0).abs() < 1e-12);
        assert!((r.classes[0].accuracy - 0.8).abs() < 1e-12);
        assert!((r.classes[0].f1 - 0.842105).abs() < 1e-6);
        assert_eq!(r.classes.iter().map(|c| c.support).collect::<Vec<_>>(), vec![10, 10]);
        let text = r.to_string();
        for col in ["Accuracy", "Precision", "F1", "Total"] {
            assert!(text.contains(col));
        }
        assert!(r.to_csv().starts_with("class,support,accuracy,precision,f1\n"));

        let perfect = EvalReport::from_confusion(&classes, vec![vec![5, 0], vec![0, 7]]).unwrap();
        assert_eq!(
            (perfect.micro_accuracy, perfect.macro_precision, perfect.macro_f1),
            (1.0, 1.0, 1.0)
        );
        assert!(perfect.classes.iter().all(|c| (c.accuracy, c.precision, c.f1) == (1.0, 1.0, 1.0)));
    }

    #[test]
    fn empty_class_is_zero_and_excluded_from_macro() {
        let classes = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let r = EvalReport::from_confusion(&classes, vec![vec![4, 0, 0], vec![0, 4, 0], vec![0, 0, 0]]).unwrap();
        assert_eq!(r.classes[2].precision, 0.0);
        assert_eq!(r.macro_precision, 1.0);
    }

    /// Two-class toy set: central embedding carries the class in its first
    /// coordinate; context cells are noise.
    fn toy(n_slides: usize, per_slide: usize, dim: usize) -> (DatasetManifest, EmbeddingCache) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut cache = EmbeddingCache::new(dim);
        let mut accepted = Vec::new();
        for s in 0..n_slides {
            for i in 0..per_slide {
                let p = PatchRef::new(format!("s{s}"), (i as i64) * 5 * 224 + 448, 448, 224);
                let class = (i + s) % 2;
                for cell in context_refs(&p, &ContextSpec::default()) {
                    let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
                    if cell == p {
                        v[0] = if class == 0 { 1.5 } else { -1.5 };
                    }
                    cache.insert(cell, v).unwrap();
                }
                accepted.push((p, ["neg", "pos"][class].to_string()));
            }
        }
        let m = compile(&accepted, &[], ContextSpec::default()).unwrap();
        (split_slides(&m, 0.75, 1).unwrap().0, cache)
    }

    fn toy_head() -> HeadConfig {
        HeadConfig {
            embed_dim: 8,
            hidden: 8,
            intermediate: 8,
            ..HeadConfig::default()
        }
    }

    fn toy_train() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr_max: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let (m, cache) = toy(4, 10, 8);
        let a = train_with::<f64>(&m, &cache, &toy_head(), &toy_train(), 3).unwrap();
        let b = train_with::<f64>(&m, &cache, &toy_head(), &toy_train(), 3).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        let n_train = m.in_split(Split::Train).count();
        let spe = n_train.div_ceil(8) as u64;
        assert_eq!(a.history.len() as u64, 3 * spe);
        for h in &a.history {
            assert_eq!(h.lr, lr_at(h.step, 3 * spe, spe, 1e-2));
        }
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let (m, cache) = toy(4, 6, 8);
        let cfg = TrainConfig {
            lr_max: 0.0,
            ..toy_train()
        };
        let run = train_with::<f64>(&m, &cache, &toy_head(), &cfg, 5).unwrap();
        assert_eq!(run.model, run.initial);
    }

    #[test]
    fn missing_context_embedding_is_named() {
        let (m, mut cache) = toy(2, 2, 8);
        let victim = m.patches[0].patch.offset_cells(1, 1);
        let mut rebuilt = EmbeddingCache::new(8);
        for (p, v) in cache.iter() {
            if *p != victim {
                rebuilt.insert(p.clone(), v.to_vec()).unwrap();
            }
        }
        cache = rebuilt;
        let err = train(&m, &cache, &toy_head(), &toy_train(), 5).err().unwrap();
        assert!(matches!(err, Error::MissingEmbedding(_)));
        assert!(err.to_string().contains(&victim.to_string()));
    }

    #[test]
    fn evaluation_is_pure_and_checks_classes() {
        let (m, cache) = toy(4, 10, 8);
        let out = train(&m, &cache, &toy_head(), &toy_train(), 1).unwrap();
        let r1 = evaluate(&out.checkpoint, &m, &cache, Split::Test).unwrap();
        let r2 = evaluate(&out.checkpoint, &m, &cache, Split::Test).unwrap();
        assert_eq!(r1, r2);
        let support: u64 = r1.confusion.iter().flatten().sum();
        assert_eq!(support as usize, m.in_split(Split::Test).count());
        let mut other = m.clone();
        other.class_list.reverse();
        assert!(matches!(
            evaluate(&out.checkpoint, &other, &cache, Split::Test),
            Err(Error::ClassListMismatch(_))
        ));
    }

    #[test]
    fn classify_matches_forward() {
        let (m, cache) = toy(2, 2, 8);
        let out = train(&m, &cache, &toy_head(), &toy_train(), 3).unwrap();
        let spec = ContextSpec::new(3).unwrap();
        let t = context_tokens::<f32>(&cache, &m.patches[0].patch, &spec).unwrap();
        let (c, conf) = classify(&out.checkpoint.model, &t).unwrap();
        let f = head_forward(&out.checkpoint.model, &t, crate::model::Mode::Eval, false).unwrap();
        assert_eq!(c, argmax(&f.logits));
        assert!(conf > 0.0 && conf <= 1.0);
    }

    #[test]
    fn ablation_g1_matches_direct_run_and_formats() {
        let (m, cache) = toy(4, 6, 8);
        let table = ablate(&[(&m, &cache)], &toy_head(), &toy_train(), &[5, 3, 1]).unwrap();
        let direct = train(&m, &cache, &toy_head(), &toy_train(), 1).unwrap();
        let acc = evaluate(&direct.checkpoint, &m, &cache, Split::Test).unwrap().micro_accuracy;
        assert_eq!(table.rows[0].accuracy[2], acc);
        let text = table.to_string();
        assert!(text.contains("Large 1120×1120"));
        assert!(text.contains("Medium 672×672"));
        assert!(text.contains("No Context 224×224"));
        assert!(table.to_csv().lines().nth(1).unwrap().starts_with("other,"));
    }

    #[test]
    fn history_csv_format() {
        let h = vec![HistoryRow {
            step: 1,
            lr: 0.5,
            loss: 0.25,
        }];
        assert_eq!(history_csv(&h), "step,lr,loss\n1,0.5,0.25\n");
    }
}
