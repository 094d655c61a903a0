//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use image::{imageops, Rgb, RgbImage};
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spider_core::curation::{Candidate, CandidateQueue, CandidateStatus};
use spider_core::dataset::{
    assemble_context, split_slides, unique_patch_count, ContextSpec, DatasetManifest, LabeledPatch, Split,
};
use spider_core::embedder::{Embedder, EmbeddingCache, MockEmbedder};
use spider_core::model::{head_backward, head_init, Checkpoint, HeadConfig, HeadModel, Mode, Tensor};
use spider_core::segmenter::{palette, proportions, render_overlay, segment_slide, SegmentOptions, BACKGROUND};
use spider_core::slide::{otsu_threshold, Organ, PatchRef, SlideRaster};
use spider_core::train_eval::{evaluate, lr_at, smoothed_ce, train, EvalReport, TrainConfig};
use spider_core::verifysvc::{DecisionRequest, ManualClock, ReviewService, DECISION_LOG};
use spider_core::vindex::{Metric, VectorIndex};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(elapsed < limit, format!("{detail}; {:.2}s of {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

// ------------------------------------------------------------------ otsu

/// Exhaustive argmax of w0·w1·(μ0−μ1)² in exact rationals, smallest t on ties.
fn otsu_oracle(hist: &[u64; 256]) -> u8 {
    let populated: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if populated.len() == 1 {
        return populated[0] as u8;
    }
    let n: u64 = hist.iter().sum();
    let int = |v: u64| BigRational::from_integer(BigInt::from(v));
    let mut best: Option<(BigRational, usize)> = None;
    for t in 0..256 {
        let c0: u64 = hist[..=t].iter().sum();
        let c1 = n - c0;
        if c0 == 0 || c1 == 0 {
            continue;
        }
        let m0: u64 = (0..=t).map(|i| i as u64 * hist[i]).sum();
        let m1: u64 = (t + 1..256).map(|i| i as u64 * hist[i]).sum();
        let w0 = int(c0) / int(n);
        let w1 = int(c1) / int(n);
        let d = int(m0) / int(c0) - int(m1) / int(c1);
        let var = w0 * w1 * &d * &d;
        if best.as_ref().map(|(b, _)| var > *b).unwrap_or(true) {
            best = Some((var, t));
        }
    }
    best.unwrap().1 as u8
}

fn otsu() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let hists: Vec<[u64; 256]> = (0..1000)
        .map(|i| {
            let mut h = [0u64; 256];
            match i % 4 {
                // Dense noise.
                0 => h.iter_mut().for_each(|c| *c = rng.gen_range(0..1000)),
                // A few populated bins, where ties are likely.
                1 => {
                    for _ in 0..rng.gen_range(1..6) {
                        h[rng.gen_range(0..256)] = rng.gen_range(1..4);
                    }
                }
                // Mirror-symmetric, so two thresholds often tie.
                2 => {
                    for b in 0..128 {
                        let v = if rng.gen_bool(0.2) { rng.gen_range(1..50) } else { 0 };
                        h[b] = v;
                        h[255 - b] = v;
                    }
                    h[rng.gen_range(0..256)] += 1;
                }
                // Bimodal image-like histogram with large counts.
                _ => {
                    let (a, b) = (rng.gen_range(20..120), rng.gen_range(140..240));
                    for _ in 0..20_000 {
                        let centre = if rng.gen_bool(0.4) { a } else { b };
                        let v = (centre + rng.gen_range(-25i32..=25)).clamp(0, 255);
                        h[v as usize] += rng.gen_range(1..1_000_000);
                    }
                }
            }
            h
        })
        .collect();
    let start = Instant::now();
    let got: Vec<u8> = hists.iter().map(|h| otsu_threshold(h).unwrap()).collect();
    let elapsed = start.elapsed();
    let mismatches = hists.iter().zip(&got).filter(|(h, &t)| otsu_oracle(h) != t).count();
    if mismatches > 0 {
        return Err(format!("{mismatches} of 1000 histograms disagree with the oracle"));
    }
    within(elapsed, Duration::from_secs(5), "1000/1000 exact".into())
}

// ------------------------------------------------------------------ knn

fn knn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, dim, k) = (10_000u64, 64usize, 10usize);
    let mut report = Vec::new();
    let mut total = Duration::ZERO;
    for metric in [Metric::Cosine, Metric::L2] {
        // Coarse values plus duplicated rows make exact score ties common.
        let mut vectors: Vec<Vec<f32>> =
            (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-3i32..=3) as f32 * 0.5).collect()).collect();
        for i in 0..500 {
            let src = rng.gen_range(0..n as usize);
            vectors[(i * 19) % n as usize] = vectors[src].clone();
        }
        let entries: Vec<(u64, Vec<f32>)> = vectors.into_iter().enumerate().map(|(i, v)| (i as u64 * 3 + 1, v)).collect();
        let index = VectorIndex::from_entries(metric, dim, entries.clone(), BTreeMap::new()).unwrap();
        let queries: Vec<Vec<f32>> = (0..100)
            .map(|i| {
                if i % 2 == 0 {
                    entries[rng.gen_range(0..entries.len())].1.clone()
                } else {
                    (0..dim).map(|_| rng.gen_range(-3i32..=3) as f32 * 0.5).collect()
                }
            })
            .collect();
        let start = Instant::now();
        let results: Vec<Vec<u64>> =
            queries.iter().map(|q| index.query(q, k).unwrap().iter().map(|nb| nb.patch_id).collect()).collect();
        total += start.elapsed();
        for (q, got) in queries.iter().zip(&results) {
            let want = brute_force(&index, &entries, q, k, metric);
            if &want != got {
                return Err(format!("{metric}: ids {got:?} expected {want:?}"));
            }
        }
        report.push(format!("{metric} 100/100"));
    }
    within(total, Duration::from_secs(30), report.join(", "))
}

/// Full scan in f64. Cosine compares against the stored unit rows, the query
/// normalized here; L2 uses exact squared distances on the half-integer data.
fn brute_force(index: &VectorIndex, entries: &[(u64, Vec<f32>)], q: &[f32], k: usize, metric: Metric) -> Vec<u64> {
    let qn = q.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, u64)> = entries
        .iter()
        .map(|(id, v)| {
            let key = match metric {
                Metric::L2 => v.iter().zip(q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>(),
                Metric::Cosine => {
                    let stored = index.vector(*id).unwrap();
                    let qs: Vec<f64> = q.iter().map(|&x| if qn > 0.0 { x as f64 / qn } else { x as f64 }).collect();
                    -qs.iter().zip(stored).map(|(a, &b)| a * b as f64).sum::<f64>()
                }
            };
            (key, *id)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, id)| id).collect()
}

// ------------------------------------------------------------------ gradient check

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = HeadConfig {
        embed_dim: 5,
        hidden: 8,
        layers: 2,
        heads: 2,
        intermediate: 12,
        max_positions: 25,
        num_classes: 3,
        ..HeadConfig::default()
    };
    let eps = 1e-4;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut model: HeadModel<f64> = head_init(&cfg, seed).unwrap();
        // Move biases and gains off their initial constants.
        for p in &mut model.params {
            p.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let t = [1usize, 9, 25, 9, 25][seed as usize];
        let tokens = Tensor::matrix(t, 5, (0..t * 5).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let class = rng.gen_range(0..3);
        let loss = |m: &HeadModel<f64>| {
            let fwd = m.forward(&tokens, Mode::Eval, false).unwrap();
            smoothed_ce(&fwd.logits, class, 0.2).unwrap()
        };
        let fwd = model.forward(&tokens, Mode::Eval, true).unwrap();
        let (_, grads) = head_backward(&model, &fwd, class, 0.2).unwrap();
        drop(fwd);
        let names = cfg.param_specs();
        for (pi, (name, _)) in names.iter().enumerate() {
            for j in 0..model.params[pi].data.len() {
                let orig = model.params[pi].data[j];
                model.params[pi].data[j] = orig + eps;
                let up = loss(&model);
                model.params[pi].data[j] = orig - eps;
                let down = loss(&model);
                model.params[pi].data[j] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.tensors[pi][j];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                    worst_at = format!("seed {seed} {name}[{j}]");
                }
            }
        }
    }
    if worst > 1e-4 {
        return Err(format!("max relative error {worst:.3e} at {worst_at}"));
    }
    within(
        start.elapsed(),
        Duration::from_secs(60),
        format!("{} tensors × 5 seeds, max relative error {worst:.2e}", cfg.param_specs().len()),
    )
}

// ------------------------------------------------------------------ schedule

fn schedule() -> Outcome {
    let lr_max = 4e-4;
    let mut worst = 0.0f64;
    for (total, warm) in [(1000u64, 100u64), (320, 32), (10, 1), (7, 3)] {
        let closed = |s: u64| {
            if s < warm {
                lr_max * s as f64 / warm as f64
            } else {
                lr_max / 2.0 * (1.0 + (std::f64::consts::PI * (s - warm) as f64 / (total - warm) as f64).cos())
            }
        };
        let end = lr_at(warm, total, warm, lr_max);
        if end != 4e-4 {
            return Err(format!("warmup end {end:e} is not exactly 4e-4"));
        }
        let checks = [(warm, 4e-4), (total, 0.0)];
        for (s, v) in checks {
            worst = worst.max((lr_at(s, total, warm, lr_max) - v).abs());
        }
        if (total - warm) % 2 == 0 {
            worst = worst.max((lr_at(warm + (total - warm) / 2, total, warm, lr_max) - 2e-4).abs());
        }
        for s in 0..=total {
            worst = worst.max((lr_at(s, total, warm, lr_max) - closed(s)).abs());
        }
    }
    check(worst <= 1e-12, format!("max deviation {worst:.1e}"))
}

// ------------------------------------------------------------------ loss

fn loss() -> Outcome {
    let v = smoothed_ce(&[3f64.ln(), 0.0], 0, 0.2).unwrap();
    let literal_err = (v - 0.397540).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let k = rng.gen_range(2..10);
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let class = rng.gen_range(0..k);
        let eps = if i % 2 == 0 { 0.0 } else { rng.gen_range(0.0..0.5) };
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let naive: f64 = (0..k)
            .map(|j| {
                let target = if j == class { 1.0 - eps } else { 0.0 } + eps / k as f64;
                -target * (logits[j].exp() / z).ln()
            })
            .sum();
        worst = worst.max((smoothed_ce(&logits, class, eps).unwrap() - naive).abs());
    }
    let detail = format!("worked example {v:.7} vs 0.397540 (error {literal_err:.1e}); naive oracle max error {worst:.1e}");
    check(literal_err <= 1e-6 && worst <= 1e-9, detail)
}

// ------------------------------------------------------------------ split

fn manifest_from(slides: &[Vec<usize>], classes: usize, grid: u32) -> DatasetManifest {
    let mut patches = Vec::new();
    for (s, counts) in slides.iter().enumerate() {
        let mut col = 0i64;
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                patches.push(LabeledPatch {
                    patch: PatchRef::new(format!("slide{s:03}"), col * 224, 0, 224),
                    class_label: format!("class{c}"),
                    split: None,
                });
                col += 1;
            }
        }
    }
    DatasetManifest {
        organ: Organ::Skin,
        class_list: (0..classes).map(|c| format!("class{c}")).collect(),
        context: ContextSpec { grid, pad_value: 255 },
        split_seed: None,
        ratio: None,
        patches,
    }
}

/// Smallest achievable |train share − ratio| over every two-sided assignment.
fn best_deviation(totals: &[usize], ratio: f64) -> f64 {
    let n = totals.len();
    let all: usize = totals.iter().sum();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) - 1 {
        let train: usize = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| totals[i]).sum();
        best = best.min((train as f64 / all as f64 - ratio).abs());
    }
    best
}

fn split_safety() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut feasible, mut exhaustive) = (0, 0);
    for i in 0..200 {
        let n_slides = if i < 150 { rng.gen_range(2..=12) } else { rng.gen_range(13..=40) };
        let classes = rng.gen_range(1..=4);
        let slides: Vec<Vec<usize>> = (0..n_slides)
            .map(|_| {
                let mut counts: Vec<usize> = (0..classes).map(|_| rng.gen_range(0..40)).collect();
                if counts.iter().all(|&c| c == 0) {
                    counts[0] = 1;
                }
                counts
            })
            .collect();
        let ratio = [0.8, 0.7, 0.5, rng.gen_range(0.3..0.9)][i % 4];
        let m = manifest_from(&slides, classes, 5);
        let (out, report) = split_slides(&m, ratio, i as u64).unwrap();
        let train: HashSet<&str> = out.in_split(Split::Train).map(|p| p.patch.slide_id.as_str()).collect();
        let test: HashSet<&str> = out.in_split(Split::Test).map(|p| p.patch.slide_id.as_str()).collect();
        if !train.is_disjoint(&test) {
            return Err(format!("corpus {i}: a slide is in both splits"));
        }
        if train.len() + test.len() != n_slides || out.patches.iter().any(|p| p.split.is_none()) {
            return Err(format!("corpus {i}: unassigned slides or patches"));
        }
        if n_slides <= 12 {
            exhaustive += 1;
            let totals: Vec<usize> = slides.iter().map(|c| c.iter().sum()).collect();
            let best = best_deviation(&totals, ratio);
            if best <= 0.03 + 1e-12 {
                feasible += 1;
                if report.deviation > 0.03 + 1e-12 {
                    return Err(format!(
                        "corpus {i}: deviation {:.4} although {best:.4} is achievable",
                        report.deviation
                    ));
                }
            }
        }
    }
    Ok(format!("200 corpora disjoint; {feasible} of {exhaustive} oracle-checked corpora feasible and met"))
}

// ------------------------------------------------------------------ context geometry

fn context_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let img = RgbImage::from_fn(7 * 224, 7 * 224, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
    let slide = SlideRaster::new("g", Organ::Skin, None, img).unwrap();
    let spec = ContextSpec::default();
    for cy in 2..=4u32 {
        for cx in 2..=4u32 {
            let central = PatchRef::new("g", cx as i64 * 224, cy as i64 * 224, 224);
            let got = assemble_context(&slide, &central, &spec);
            let want = imageops::crop_imm(slide.image(), (cx - 2) * 224, (cy - 2) * 224, 1120, 1120).to_image();
            if got.dimensions() != (1120, 1120) || got != want {
                return Err(format!("context at cell ({cx},{cy}) differs from the slide crop"));
            }
        }
    }

    let union = |m: &DatasetManifest| {
        let mut cells: HashSet<(String, i64, i64)> = HashSet::new();
        for p in &m.patches {
            for dy in -2..=2i64 {
                for dx in -2..=2i64 {
                    let (x, y) = (p.patch.x + dx * 224, p.patch.y + dy * 224);
                    if x >= 0 && y >= 0 {
                        cells.insert((p.patch.slide_id.clone(), x, y));
                    }
                }
            }
        }
        cells.len() as u64
    };
    let at = |s: &str, cx: i64, cy: i64| LabeledPatch {
        patch: PatchRef::new(s, cx * 224, cy * 224, 224),
        class_label: "class0".into(),
        split: None,
    };
    let mut pair = manifest_from(&[], 1, 5);
    pair.patches = vec![at("p", 10, 10), at("p", 11, 10)];
    let adjacent = unique_patch_count(&pair, |_| None);
    if adjacent != 30 || union(&pair) != 30 {
        return Err(format!("adjacent pair counts {adjacent}, expected 30"));
    }
    for i in 0..100 {
        let mut m = manifest_from(&[], 1, 5);
        let n = rng.gen_range(1..40);
        let mut seen = HashSet::new();
        for _ in 0..n {
            let s = format!("s{}", rng.gen_range(0..3));
            let (cx, cy) = (rng.gen_range(0..15), rng.gen_range(0..15));
            if seen.insert((s.clone(), cx, cy)) {
                m.patches.push(at(&s, cx, cy));
            }
        }
        let (got, want) = (unique_patch_count(&m, |_| None), union(&m));
        if got != want {
            return Err(format!("manifest {i}: count {got}, set union {want}"));
        }
    }
    Ok("9 interior crops bit-identical; 100 manifests match the set union; adjacent pair 30".into())
}

// ------------------------------------------------------------------ training tasks

/// One central per sample on its own row of cells, windows never overlapping.
fn sample_patch(i: usize) -> PatchRef {
    let slide = format!("t{:03}", i / 10);
    PatchRef::new(slide, ((i % 10) as i64 * 5 + 2) * 16, 2 * 16, 16)
}

fn labeled(n_train: usize, n_test: usize, labels: &[usize], classes: usize) -> DatasetManifest {
    let mut m = manifest_from(&[], classes, 5);
    m.patches = (0..n_train + n_test)
        .map(|i| LabeledPatch {
            patch: sample_patch(i),
            class_label: format!("class{}", labels[i]),
            split: Some(if i < n_train { Split::Train } else { Split::Test }),
        })
        .collect();
    m
}

fn small_head() -> HeadConfig {
    HeadConfig {
        hidden: 32,
        heads: 2,
        intermediate: 64,
        dropout_hidden: 0.1,
        dropout_attn: 0.1,
        dropout_head: 0.1,
        ..HeadConfig::default()
    }
}

fn separable_task() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let colours = [[120u8, 50, 150], [200, 110, 150], [60, 60, 140], [220, 170, 120]];
    let (n_train, n_test) = (1000, 200);
    let labels: Vec<usize> = (0..n_train + n_test).map(|i| i % 4).collect();
    let embedder = MockEmbedder::new(64, true).unwrap();
    let mut cache = EmbeddingCache::new(64);
    for (i, &c) in labels.iter().enumerate() {
        let base = colours[c];
        let block = RgbImage::from_fn(16, 16, |_, _| {
            Rgb(base.map(|v| (v as i32 + rng.gen_range(-30..=30)).clamp(0, 255) as u8))
        });
        let v = embedder.embed_batch(&[block]).unwrap().remove(0);
        cache.insert(sample_patch(i), v).unwrap();
    }
    let m = labeled(n_train, n_test, &labels, 4);
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 32,
        lr_max: 2e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&m, &cache, &small_head(), &cfg, 1).unwrap();
    let acc = evaluate(&out.checkpoint, &m, &cache, Split::Test).unwrap().micro_accuracy;
    if acc < 0.95 {
        return Err(format!("test accuracy {acc:.4} after 10 epochs"));
    }
    within(start.elapsed(), Duration::from_secs(300), format!("test accuracy {acc:.4} after 10 epochs"))
}

/// Two classes. The central cell is pure noise; the inner ring carries a weak
/// class signal and the outer ring a stronger one.
fn context_task(seed: u64) -> (DatasetManifest, EmbeddingCache) {
    let dim = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_train, n_test) = (1000, 200);
    let labels: Vec<usize> = (0..n_train + n_test).map(|_| rng.gen_range(0..2)).collect();
    let mut cache = EmbeddingCache::new(dim);
    for (i, &label) in labels.iter().enumerate() {
        let sign = if label == 0 { -1.0 } else { 1.0 };
        let central = sample_patch(i);
        for dy in -2..=2i64 {
            for dx in -2..=2i64 {
                let ring = dx.abs().max(dy.abs());
                let signal = [0.0, 0.35, 0.5][ring as usize];
                let v: Vec<f32> = (0..dim)
                    .map(|d| {
                        let noise: f64 = rng.gen_range(-1.0..1.0) * 3f64.sqrt();
                        (noise + if d == 0 { sign * signal } else { 0.0 }) as f32
                    })
                    .collect();
                cache.insert(central.offset_cells(dx, dy), v).unwrap();
            }
        }
    }
    (labeled(n_train, n_test, &labels, 2), cache)
}

fn ablation() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let (m, cache) = context_task(200 + seed);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 32,
            lr_max: 2e-3,
            seed,
            ..TrainConfig::default()
        };
        let acc: Vec<f64> = [5u32, 3, 1]
            .iter()
            .map(|&g| {
                let out = train(&m, &cache, &small_head(), &cfg, g).unwrap();
                evaluate(&out.checkpoint, &m, &cache, Split::Test).unwrap().micro_accuracy
            })
            .collect();
        let (a5, a3, a1) = (acc[0], acc[1], acc[2]);
        ok &= a5 >= a3 && a3 >= a1 && a5 - a1 >= 0.10;
        lines.push(format!("seed {seed}: {a5:.3}/{a3:.3}/{a1:.3}"));
    }
    check(ok, format!("accuracy 1120/672/224 {}", lines.join(", ")))
}

// ------------------------------------------------------------------ metrics

fn metrics() -> Outcome {
    let classes = vec!["a".to_string(), "b".to_string()];
    let r = EvalReport::from_confusion(&classes, vec![vec![8, 2], vec![1, 9]]).unwrap();
    let (acc, p0, f0) = (r.micro_accuracy, r.classes[0].precision, r.classes[0].f1);
    let ok = (acc - 0.85).abs() <= 1e-12 && (p0 - 0.8889).abs() <= 1e-4 && (f0 - 0.8421).abs() <= 1e-4;
    check(ok, format!("micro accuracy {acc:.4}, class-0 precision {p0:.4}, F1 {f0:.4}"))
}

// ------------------------------------------------------------------ persistence

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);

    let entries: Vec<(u64, Vec<f32>)> = (0..2000u64).map(|i| (i, (0..32).map(|_| rng.gen()).collect())).collect();
    let refs: BTreeMap<u64, PatchRef> = (0..2000u64).map(|i| (i, PatchRef::new("s", i as i64 * 224, 0, 224))).collect();
    let index = VectorIndex::from_entries(Metric::Cosine, 32, entries.clone(), refs).unwrap();
    let path = dir.path().join("index.spix");
    index.save(&path).unwrap();
    let back = VectorIndex::load(&path).unwrap();
    if back.to_bytes().unwrap() != index.to_bytes().unwrap() {
        return Err("index bytes differ after reload".into());
    }
    for (_, q) in entries.iter().step_by(97) {
        let (a, b) = (index.query(q, 10).unwrap(), back.query(q, 10).unwrap());
        let same = a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.patch_id == y.patch_id && x.score.to_bits() == y.score.to_bits());
        if !same {
            return Err("query results differ after index reload".into());
        }
    }

    let cfg = HeadConfig {
        embed_dim: 16,
        ..small_head()
    };
    let ckpt = Checkpoint {
        class_list: vec!["a".into(), "b".into()],
        seed: 3,
        context_grid: 5,
        model: head_init::<f32>(&cfg, 3).unwrap(),
    };
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    for _ in 0..20 {
        let x = Tensor::matrix(25, 16, (0..400).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let (a, b) = (ckpt.model.logits(&x).unwrap(), loaded.model.logits(&x).unwrap());
        if a.iter().zip(&b).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return Err("logits differ after checkpoint reload".into());
        }
    }

    let qdir = dir.path().join("queues");
    std::fs::create_dir_all(&qdir).unwrap();
    let queue = CandidateQueue {
        class_label: "tumor".into(),
        candidates: (0..30)
            .map(|i| Candidate {
                patch: PatchRef::new("s", i * 224, 0, 224),
                score: 1.0,
                status: CandidateStatus::Pending,
            })
            .collect(),
    };
    queue.save(&qdir.join("tumor.jsonl")).unwrap();
    let requests: Vec<DecisionRequest> = (0..60)
        .map(|_| DecisionRequest {
            slide_id: "s".into(),
            x: rng.gen_range(0..30) * 224,
            y: 0,
            size: 224,
            class_label: "tumor".into(),
            verdict: if rng.gen_bool(0.6) { "accept" } else { "reject" }.into(),
            reviewer: format!("r{}", rng.gen_range(0..3)),
        })
        .collect();
    let clock = Arc::new(ManualClock::new(0));
    let mut snapshots = Vec::new();
    let mut ends = Vec::new();
    {
        let svc = ReviewService::open(&qdir, clock.clone(), 60_000).unwrap();
        for r in &requests {
            svc.post_decision(r).unwrap();
            snapshots.push(svc.queue("tumor").unwrap());
            ends.push(std::fs::metadata(qdir.join(DECISION_LOG)).unwrap().len());
        }
    }
    // Kill in the middle of a write: keep the log up to a point inside a line.
    let log = qdir.join(DECISION_LOG);
    let bytes = std::fs::read(&log).unwrap();
    let k = 37;
    let cut = (ends[k] + ends[k + 1]) / 2;
    std::fs::write(&log, &bytes[..cut as usize]).unwrap();
    let svc = ReviewService::open(&qdir, clock, 60_000).unwrap();
    if svc.queue("tumor").unwrap() != snapshots[k] {
        return Err("queue state after replay differs from the state before the interrupted write".into());
    }
    Ok("index and checkpoint reload bitwise identical; replay after a torn write restores the queue".into())
}

// ------------------------------------------------------------------ segmentation

fn segmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let img = RgbImage::from_fn(320, 256, |x, y| {
        let j: u8 = rng.gen_range(0..25);
        if y >= 192 || (x / 32 + y / 32) % 5 == 0 {
            Rgb([245, 245, 245])
        } else if x < 160 {
            Rgb([110 + j, 50 + j, 150 + j])
        } else {
            Rgb([170 + j, 90 + j, 140 + j])
        }
    });
    let slide = SlideRaster::new("seg", Organ::Skin, None, img).unwrap();
    let white = SlideRaster::new("white", Organ::Skin, None, RgbImage::from_pixel(256, 192, Rgb([255, 255, 255]))).unwrap();
    let cfg = HeadConfig {
        embed_dim: 96,
        num_classes: 3,
        ..small_head()
    };
    let ckpt = Checkpoint {
        class_list: vec!["a".into(), "b".into(), "c".into()],
        seed: 5,
        context_grid: 5,
        model: head_init::<f32>(&cfg, 5).unwrap(),
    };
    let embedder = MockEmbedder::new(96, true).unwrap();
    let opts = SegmentOptions {
        patch_size: 32,
        ..SegmentOptions::default()
    };
    let first = segment_slide(&slide, &ckpt, &embedder, &opts).unwrap();
    let second = segment_slide(&slide, &ckpt, &embedder, &opts).unwrap();
    let same_conf = first
        .confidences
        .iter()
        .flatten()
        .zip(second.confidences.iter().flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let pal = palette(3);
    if first != second || !same_conf || render_overlay(&slide, &first, &pal, 0.5).unwrap() != render_overlay(&slide, &second, &pal, 0.5).unwrap() {
        return Err("repeated segmentation differs".into());
    }
    let report = proportions(&first);
    let sum: f64 = report.classes.iter().map(|c| c.fraction).sum();
    if report.tissue_patch_count == 0 || (sum - 1.0).abs() > 1e-9 {
        return Err(format!("proportions sum to {sum} over {} tissue cells", report.tissue_patch_count));
    }
    let blank = segment_slide(&white, &ckpt, &embedder, &opts).unwrap();
    if blank.cells.iter().flatten().any(|&c| c != BACKGROUND) {
        return Err("white slide has classified cells".into());
    }
    Ok(format!(
        "proportions sum {sum:.12} over {} tissue cells; white slide all background; repeat bit-identical",
        report.tissue_patch_count
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("otsu oracle", otsu),
        ("knn oracle", knn),
        ("gradient check", gradient_check),
        ("schedule", schedule),
        ("loss", loss),
        ("split safety", split_safety),
        ("context geometry", context_geometry),
        ("separable task", separable_task),
        ("ablation direction", ablation),
        ("metrics", metrics),
        ("persistence", persistence),
        ("segmentation", segmentation),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
