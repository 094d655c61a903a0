//! Context-aware classification head: input projection, position
//! embeddings, a post-norm transformer encoder and a classifier read from
//! the central token. Gradients come from a small reverse-mode tape.

use std::fmt;
use std::io::Write;
use std::path::Path;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train_eval::smoothed_ce_grad;

pub const CHECKPOINT_SCHEMA: u32 = 1;
pub const CHECKPOINT_FILE: &str = "model.ckpt";
const LN_EPS: f64 = 1e-5;
/// Samples per gradient partial sum; fixed so reduction order never
/// depends on the thread count.
const GRAD_CHUNK: usize = 16;
const PARAMS_PER_LAYER: usize = 16;

pub trait Real: Float + Default + Send + Sync + fmt::Debug + std::iter::Sum + 'static {}
impl Real for f32 {}
impl Real for f64 {}

#[inline]
fn c<T: Real>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

/// Dense row-major tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from(x).expect("castable")).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|&x| U::from(x).expect("castable")).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub dropout_hidden: f64,
    pub dropout_attn: f64,
    pub dropout_head: f64,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            embed_dim: 1024,
            hidden: 128,
            layers: 1,
            heads: 1,
            intermediate: 128,
            max_positions: 25,
            dropout_hidden: 0.5,
            dropout_attn: 0.3,
            dropout_head: 0.3,
            num_classes: 2,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.hidden == 0 || self.intermediate == 0 || self.layers == 0 || self.heads == 0 {
            return bad("dimensions, layers and heads must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        for (name, p) in [
            ("dropout_hidden", self.dropout_hidden),
            ("dropout_attn", self.dropout_attn),
            ("dropout_head", self.dropout_head),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (e, h, i, k) = (self.embed_dim, self.hidden, self.intermediate, self.num_classes);
        let mut v = vec![
            ("in_proj.weight".to_string(), vec![e, h]),
            ("in_proj.bias".to_string(), vec![h]),
            ("pos_embed".to_string(), vec![self.max_positions, h]),
        ];
        for l in 0..self.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            for proj in ["q", "k", "v", "o"] {
                v.push((p(&format!("attn.{proj}.weight")), vec![h, h]));
                v.push((p(&format!("attn.{proj}.bias")), vec![h]));
            }
            v.push((p("ln1.gain"), vec![h]));
            v.push((p("ln1.bias"), vec![h]));
            v.push((p("ffn.w1"), vec![h, i]));
            v.push((p("ffn.b1"), vec![i]));
            v.push((p("ffn.w2"), vec![i, h]));
            v.push((p("ffn.b2"), vec![h]));
            v.push((p("ln2.gain"), vec![h]));
            v.push((p("ln2.bias"), vec![h]));
        }
        v.push(("classifier.weight".to_string(), vec![h, k]));
        v.push(("classifier.bias".to_string(), vec![k]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Position-table rows for a square token grid. When the table itself is
    /// an odd square grid, smaller grids take its central cells.
    pub fn position_ids(&self, tokens: usize) -> Result<Vec<usize>> {
        if tokens > self.max_positions {
            return Err(Error::TooManyTokens {
                tokens,
                max: self.max_positions,
            });
        }
        let g = (tokens as f64).sqrt().round() as usize;
        let gmax = (self.max_positions as f64).sqrt().round() as usize;
        if g * g == tokens && g % 2 == 1 && gmax * gmax == self.max_positions && gmax % 2 == 1 {
            let off = (gmax - g) / 2;
            Ok((0..tokens).map(|t| (t / g + off) * gmax + t % g + off).collect())
        } else {
            Ok((0..tokens).collect())
        }
    }
}

const IN_W: usize = 0;
const IN_B: usize = 1;
const POS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel<T> {
    pub config: HeadConfig,
    pub params: Vec<Tensor<T>>,
}

/// Xavier-uniform weights (the position table uses fan (max_positions,
/// hidden)), zero biases, unit layer-norm gains.
pub fn head_init<T: Real>(config: &HeadConfig, seed: u64) -> Result<HeadModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = config
        .param_specs()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("gain") {
                vec![T::one(); n]
            } else if shape.len() == 1 {
                vec![T::zero(); n]
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| c(rng.gen_range(-bound..bound))).collect()
            };
            Tensor { shape, data, grad: None }
        })
        .collect();
    Ok(HeadModel {
        config: config.clone(),
        params,
    })
}

/// Per-parameter gradients in checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &HeadModel<T>) -> Self {
        Self {
            tensors: model.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x = *x * s;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing: 0.2,
            reduction: Reduction::Mean,
        }
    }
}

pub enum Mode<'r> {
    Eval,
    /// Dropout active, masks drawn from the given generator.
    Train(&'r mut ChaCha8Rng),
}

type Id = usize;

enum Op<T> {
    Param(usize),
    Input,
    MatMul(Id, Id),
    AddBias(Id, Id),
    Add(Id, Id),
    Gather(Id, Vec<usize>),
    Transpose(Id),
    Scale(Id, T),
    Softmax(Id),
    LayerNorm { x: Id, g: Id, b: Id, xhat: Vec<T>, inv: Vec<T> },
    Gelu(Id),
    Dropout(Id, Vec<T>),
    SelectRow(Id, usize),
    SliceCols(Id, usize),
    ConcatCols(Vec<Id>),
}

struct Node<T> {
    op: Op<T>,
    /// None for parameters, whose values live in the model.
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

/// Recorded forward computation. Parameter `i` is node `i`.
struct Tape<'m, T> {
    params: &'m [Tensor<T>],
    nodes: Vec<Node<T>>,
}

fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// aᵀ·d for a: m×k, d: m×n.
fn matmul_tn<T: Real>(a: &[T], d: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &dv) in orow.iter_mut().zip(drow) {
                *o = *o + av * dv;
            }
        }
    }
    out
}

/// d·bᵀ for d: m×n, b: k×n.
fn matmul_nt<T: Real>(d: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = drow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
        }
    }
    out
}

const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
fn gelu<T: Real>(x: T) -> T {
    let a: T = c((2.0 / std::f64::consts::PI).sqrt());
    let u = a * (x + c::<T>(GELU_C) * x * x * x);
    c::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let a: T = c((2.0 / std::f64::consts::PI).sqrt());
    let u = a * (x + c::<T>(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = a * (T::one() + c::<T>(3.0 * GELU_C) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * du
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: Id, g: Vec<T>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<'m, T: Real> Tape<'m, T> {
    fn new(params: &'m [Tensor<T>]) -> Self {
        let nodes = (0..params.len())
            .map(|i| Node {
                op: Op::Param(i),
                value: None,
                needs_grad: true,
            })
            .collect();
        Self { params, nodes }
    }

    fn val(&self, id: Id) -> &Tensor<T> {
        match &self.nodes[id].value {
            Some(v) => v,
            None => &self.params[id],
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Id]) -> Id {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn input(&mut self, t: Tensor<T>) -> Id {
        self.nodes.push(Node {
            op: Op::Input,
            value: Some(t),
            needs_grad: false,
        });
        self.nodes.len() - 1
    }

    fn matmul(&mut self, a: Id, b: Id) -> Id {
        let (av, bv) = (self.val(a), self.val(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        debug_assert_eq!(k, bv.rows());
        let out = matmul(&av.data, &bv.data, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::zeros_from(vec![m, n], out), &[a, b])
    }

    fn add_bias(&mut self, x: Id, b: Id) -> Id {
        let (xv, bv) = (self.val(x), self.val(b));
        let n = xv.cols();
        let data = xv.data.iter().enumerate().map(|(i, &v)| v + bv.data[i % n]).collect();
        let shape = xv.shape.clone();
        self.push(Op::AddBias(x, b), Tensor::zeros_from(shape, data), &[x, b])
    }

    fn linear(&mut self, x: Id, w: Id, b: Id) -> Id {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    fn add(&mut self, a: Id, b: Id) -> Id {
        let (av, bv) = (self.val(a), self.val(b));
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let shape = av.shape.clone();
        self.push(Op::Add(a, b), Tensor::zeros_from(shape, data), &[a, b])
    }

    fn gather(&mut self, table: Id, rows: Vec<usize>) -> Id {
        let tv = self.val(table);
        let n = tv.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(tv.row(r));
        }
        let shape = vec![rows.len(), n];
        self.push(Op::Gather(table, rows), Tensor::zeros_from(shape, data), &[table])
    }

    fn transpose(&mut self, a: Id) -> Id {
        let av = self.val(a);
        let (m, n) = (av.rows(), av.cols());
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av.data[i * n + j];
            }
        }
        self.push(Op::Transpose(a), Tensor::zeros_from(vec![n, m], data), &[a])
    }

    fn scale(&mut self, a: Id, s: T) -> Id {
        let av = self.val(a);
        let data = av.data.iter().map(|&x| x * s).collect();
        let shape = av.shape.clone();
        self.push(Op::Scale(a, s), Tensor::zeros_from(shape, data), &[a])
    }

    fn softmax(&mut self, a: Id) -> Id {
        let av = self.val(a);
        let n = av.cols();
        let mut data = vec![T::zero(); av.data.len()];
        for (row, out) in av.data.chunks(n).zip(data.chunks_mut(n)) {
            softmax_row(row, out);
        }
        let shape = av.shape.clone();
        self.push(Op::Softmax(a), Tensor::zeros_from(shape, data), &[a])
    }

    fn layer_norm(&mut self, x: Id, g: Id, b: Id) -> Id {
        let (xv, gv, bv) = (self.val(x), self.val(g), self.val(b));
        let n = xv.cols();
        let nt: T = c(n as f64);
        let mut xhat = vec![T::zero(); xv.data.len()];
        let mut inv = Vec::with_capacity(xv.rows());
        let mut out = vec![T::zero(); xv.data.len()];
        for (r, row) in xv.data.chunks(n).enumerate() {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let is = T::one() / (var + c(LN_EPS)).sqrt();
            inv.push(is);
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = gv.data[j] * xh + bv.data[j];
            }
        }
        let shape = xv.shape.clone();
        self.push(Op::LayerNorm { x, g, b, xhat, inv }, Tensor::zeros_from(shape, out), &[x, g, b])
    }

    fn gelu(&mut self, a: Id) -> Id {
        let av = self.val(a);
        let data = av.data.iter().map(|&x| gelu(x)).collect();
        let shape = av.shape.clone();
        self.push(Op::Gelu(a), Tensor::zeros_from(shape, data), &[a])
    }

    /// Inverted dropout; identity when no generator is given or p = 0.
    fn dropout(&mut self, a: Id, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Id {
        let Some(rng) = rng.as_deref_mut() else {
            return a;
        };
        if p == 0.0 {
            return a;
        }
        let keep: T = c(1.0 / (1.0 - p));
        let av = self.val(a);
        let mask: Vec<T> = (0..av.data.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = av.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = av.shape.clone();
        self.push(Op::Dropout(a, mask), Tensor::zeros_from(shape, data), &[a])
    }

    fn select_row(&mut self, a: Id, r: usize) -> Id {
        let av = self.val(a);
        let data = av.row(r).to_vec();
        let n = data.len();
        self.push(Op::SelectRow(a, r), Tensor::zeros_from(vec![1, n], data), &[a])
    }

    fn slice_cols(&mut self, a: Id, start: usize, len: usize) -> Id {
        let av = self.val(a);
        let n = av.cols();
        let data: Vec<T> = av.data.chunks(n).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let rows = av.rows();
        self.push(Op::SliceCols(a, start), Tensor::zeros_from(vec![rows, len], data), &[a])
    }

    fn concat_cols(&mut self, parts: Vec<Id>) -> Id {
        let rows = self.val(parts[0]).rows();
        let width: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in &parts {
                data.extend_from_slice(self.val(p).row(r));
            }
        }
        let inputs = parts.clone();
        self.push(Op::ConcatCols(parts), Tensor::zeros_from(vec![rows, width], data), &inputs)
    }

    /// Reverse sweep from `root` with upstream gradient `seed`; returns
    /// parameter gradients.
    fn backward(&self, root: Id, seed: Vec<T>) -> Vec<Vec<T>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Param(i) => {
                    for (a, b) in pgrads[*i].iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, matmul_nt(&g, &bv.data, m, k, n));
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, matmul_tn(&av.data, &g, m, k, n));
                    }
                }
                Op::AddBias(x, b) => {
                    let n = self.val(*b).data.len();
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s = *s + v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Gather(table, rows) => {
                    let tv = self.val(*table);
                    let n = tv.cols();
                    let mut gt = vec![T::zero(); tv.data.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            gt[r * n + j] = gt[r * n + j] + g[i * n + j];
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Transpose(a) => {
                    let av = self.val(*a);
                    let (m, n) = (av.rows(), av.cols());
                    let mut ga = vec![T::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = g[j * m + i];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.iter().map(|&v| v * *s).collect());
                }
                Op::Softmax(a) => {
                    let y = self.val(id);
                    let n = y.cols();
                    let mut ga = vec![T::zero(); g.len()];
                    for ((yr, gr), out) in y.data.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&y, &g)| s + y * g);
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, g: gain, b, xhat, inv } => {
                    let gv = self.val(*gain);
                    let n = gv.data.len();
                    let nt: T = c(n as f64);
                    let mut gg = vec![T::zero(); n];
                    let mut gb = vec![T::zero(); n];
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, (dy, xh)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..n {
                            gg[j] = gg[j] + dy[j] * xh[j];
                            gb[j] = gb[j] + dy[j];
                            let d = dy[j] * gv.data[j];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xh[j];
                        }
                        for j in 0..n {
                            let d = dy[j] * gv.data[j];
                            gx[r * n + j] = inv[r] / nt * (nt * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(a) => {
                    let av = self.val(*a);
                    accumulate(&mut grads, *a, av.data.iter().zip(&g).map(|(&x, &d)| gelu_grad(x) * d).collect());
                }
                Op::Dropout(a, mask) => {
                    accumulate(&mut grads, *a, g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
                }
                Op::SelectRow(a, r) => {
                    let av = self.val(*a);
                    let n = av.cols();
                    let mut ga = vec![T::zero(); av.data.len()];
                    ga[r * n..(r + 1) * n].copy_from_slice(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let av = self.val(*a);
                    let n = av.cols();
                    let len = self.val(id).cols();
                    let mut ga = vec![T::zero(); av.data.len()];
                    for (r, row) in g.chunks(len).enumerate() {
                        ga[r * n + start..r * n + start + len].copy_from_slice(row);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let width = self.val(id).cols();
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.val(p);
                        let w = pv.cols();
                        let mut gp = Vec::with_capacity(pv.data.len());
                        for row in g.chunks(width) {
                            gp.extend_from_slice(&row[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, p, gp);
                    }
                }
            }
        }
        pgrads
    }
}

impl<T: Real> Tensor<T> {
    fn zeros_from(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, grad: None }
    }
}

/// Result of a forward pass. Holds the tape when recorded.
pub struct ForwardOutput<'m, T> {
    pub logits: Vec<T>,
    /// Last layer's attention probabilities (T×T, head-averaged, before dropout).
    pub attention: Tensor<T>,
    tape: Option<(Tape<'m, T>, Id)>,
}

impl<T: Real> HeadModel<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> HeadModel<U> {
        HeadModel {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Logits for a `T × embed_dim` token matrix in row-major grid order;
    /// the central token is at index (T−1)/2.
    pub fn forward(&self, tokens: &Tensor<T>, mode: Mode<'_>, record: bool) -> Result<ForwardOutput<'_, T>> {
        let cfg = &self.config;
        let t = tokens.rows();
        if tokens.shape.len() != 2 || tokens.cols() != cfg.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: cfg.embed_dim,
                actual: tokens.cols(),
            });
        }
        if t == 0 {
            return Err(Error::ShapeMismatch("no tokens".into()));
        }
        let pos = cfg.position_ids(t)?;
        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        };
        let mut tp = Tape::new(&self.params);
        let x = tp.input(tokens.clone());
        let mut h = tp.linear(x, IN_W, IN_B);
        let pe = tp.gather(POS, pos);
        h = tp.add(h, pe);
        h = tp.dropout(h, cfg.dropout_hidden, &mut rng);
        let dh = cfg.head_dim();
        let scale: T = c(1.0 / (dh as f64).sqrt());
        let mut attn_maps = Vec::new();
        for l in 0..cfg.layers {
            let p = 3 + l * PARAMS_PER_LAYER;
            let q = tp.linear(h, p, p + 1);
            let k = tp.linear(h, p + 2, p + 3);
            let v = tp.linear(h, p + 4, p + 5);
            attn_maps.clear();
            let mut ctxs = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let (qh, kh, vh) = if cfg.heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tp.slice_cols(q, head * dh, dh),
                        tp.slice_cols(k, head * dh, dh),
                        tp.slice_cols(v, head * dh, dh),
                    )
                };
                let kt = tp.transpose(kh);
                let s = tp.matmul(qh, kt);
                let s = tp.scale(s, scale);
                let a = tp.softmax(s);
                attn_maps.push(a);
                let a = tp.dropout(a, cfg.dropout_attn, &mut rng);
                ctxs.push(tp.matmul(a, vh));
            }
            let ctx = if ctxs.len() == 1 { ctxs[0] } else { tp.concat_cols(ctxs) };
            let o = tp.linear(ctx, p + 6, p + 7);
            let o = tp.dropout(o, cfg.dropout_hidden, &mut rng);
            let r = tp.add(h, o);
            let h1 = tp.layer_norm(r, p + 8, p + 9);
            let f = tp.linear(h1, p + 10, p + 11);
            let f = tp.gelu(f);
            let f = tp.linear(f, p + 12, p + 13);
            let f = tp.dropout(f, cfg.dropout_hidden, &mut rng);
            let r = tp.add(h1, f);
            h = tp.layer_norm(r, p + 14, p + 15);
        }
        let center = tp.select_row(h, (t - 1) / 2);
        let center = tp.dropout(center, cfg.dropout_head, &mut rng);
        let np = self.params.len();
        let logits_id = tp.linear(center, np - 2, np - 1);
        let logits = tp.val(logits_id).data.clone();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        let mut attention = Tensor::zeros(vec![t, t]);
        let inv_heads: T = c(1.0 / attn_maps.len() as f64);
        for &a in &attn_maps {
            for (o, &v) in attention.data.iter_mut().zip(&tp.val(a).data) {
                *o = *o + v * inv_heads;
            }
        }
        Ok(ForwardOutput {
            logits,
            attention,
            tape: record.then_some((tp, logits_id)),
        })
    }

    pub fn logits(&self, tokens: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.forward(tokens, Mode::Eval, false)?.logits)
    }

    /// Batch loss and gradients. Samples are processed in parallel in fixed
    /// chunks and reduced in order, so results do not depend on thread count.
    /// With `dropout_seed`, sample `i` draws its masks from stream `i` of a
    /// generator seeded by that value.
    pub fn batch_gradients(
        &self,
        samples: &[(&Tensor<T>, usize)],
        loss: &LossConfig,
        dropout_seed: Option<u64>,
    ) -> Result<(T, Gradients<T>)> {
        let weight: T = match loss.reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean => c(1.0 / samples.len().max(1) as f64),
        };
        let partials: Vec<Result<(T, Gradients<T>)>> = samples
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut total = T::zero();
                let mut acc = Gradients::zeros_like(self);
                for (j, &(tokens, class)) in chunk.iter().enumerate() {
                    let mut rng = dropout_seed.map(|s| {
                        let mut r = ChaCha8Rng::seed_from_u64(s);
                        r.set_stream((ci * GRAD_CHUNK + j) as u64);
                        r
                    });
                    let mode = match rng.as_mut() {
                        Some(r) => Mode::Train(r),
                        None => Mode::Eval,
                    };
                    let fwd = self.forward(tokens, mode, true)?;
                    let (l, g) = head_backward_weighted(self, &fwd, class, loss.label_smoothing, weight)?;
                    total = total + l * weight;
                    acc.add_assign(&g);
                }
                Ok((total, acc))
            })
            .collect();
        let mut total = T::zero();
        let mut grads = Gradients::zeros_like(self);
        for p in partials {
            let (l, g) = p?;
            total = total + l;
            grads.add_assign(&g);
        }
        Ok((total, grads))
    }
}

pub fn head_forward<'m, T: Real>(
    model: &'m HeadModel<T>,
    tokens: &Tensor<T>,
    mode: Mode<'_>,
    record: bool,
) -> Result<ForwardOutput<'m, T>> {
    model.forward(tokens, mode, record)
}

/// Loss of one recorded forward pass and the gradient for every parameter.
/// Tokens are constants and receive no gradient.
pub fn head_backward<T: Real>(
    model: &HeadModel<T>,
    fwd: &ForwardOutput<'_, T>,
    true_class: usize,
    label_smoothing: f64,
) -> Result<(T, Gradients<T>)> {
    head_backward_weighted(model, fwd, true_class, label_smoothing, T::one())
}

fn head_backward_weighted<T: Real>(
    model: &HeadModel<T>,
    fwd: &ForwardOutput<'_, T>,
    true_class: usize,
    label_smoothing: f64,
    weight: T,
) -> Result<(T, Gradients<T>)> {
    let Some((tape, logits_id)) = &fwd.tape else {
        return Err(Error::NoRecordedForward);
    };
    if !std::ptr::eq(tape.params.as_ptr(), model.params.as_ptr()) {
        return Err(Error::Invalid("forward record belongs to a different model".into()));
    }
    let (loss, grad) = smoothed_ce_grad(&fwd.logits, true_class, label_smoothing)?;
    let seed: Vec<T> = grad.iter().map(|&g| g * weight).collect();
    Ok((loss, Gradients { tensors: tape.backward(*logits_id, seed) }))
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    config: HeadConfig,
    class_list: Vec<String>,
    seed: u64,
    context_grid: u32,
    parameters: Vec<ParamEntry>,
}

/// A trained head with what is needed to apply it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub class_list: Vec<String>,
    pub seed: u64,
    pub context_grid: u32,
    pub model: HeadModel<f32>,
}

impl Checkpoint {
    /// One JSON header line, then the parameters as little-endian f32 in
    /// `HeadConfig::param_specs` order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA,
            config: self.model.config.clone(),
            class_list: self.class_list.clone(),
            seed: self.seed,
            context_grid: self.context_grid,
            parameters: self
                .model
                .config
                .param_specs()
                .into_iter()
                .map(|(name, shape)| ParamEntry { name, shape })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for p in &self.model.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Invalid("checkpoint header not terminated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Invalid(format!(
                "checkpoint schema {} (expected {CHECKPOINT_SCHEMA})",
                header.schema_version
            )));
        }
        header.config.validate()?;
        let specs = header.config.param_specs();
        let listed: Vec<(String, Vec<usize>)> = header.parameters.into_iter().map(|p| (p.name, p.shape)).collect();
        if listed != specs {
            return Err(Error::Invalid("checkpoint parameter list does not match its config".into()));
        }
        if header.class_list.len() != header.config.num_classes {
            return Err(Error::ClassListMismatch(format!(
                "{} classes listed for a {}-way head",
                header.class_list.len(),
                header.config.num_classes
            )));
        }
        let blob = &bytes[nl + 1..];
        let expected = header.config.param_count() * 4;
        if blob.len() != expected {
            return Err(Error::Invalid(format!("checkpoint blob is {} bytes, expected {expected}", blob.len())));
        }
        let mut values = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = values.by_ref().take(n).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("non-finite value in {name}")));
            }
            params.push(Tensor { shape, data, grad: None });
        }
        Ok(Self {
            class_list: header.class_list,
            seed: header.seed,
            context_grid: header.context_grid,
            model: HeadModel {
                config: header.config,
                params,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        Ok(())
    }

    /// Accepts the checkpoint file or a directory containing `model.ckpt`.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
        Self::from_bytes(&std::fs::read(&path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train_eval::smoothed_ce;

    fn small(heads: usize) -> HeadConfig {
        HeadConfig {
            embed_dim: 6,
            hidden: 4,
            heads,
            intermediate: 5,
            num_classes: 3,
            ..HeadConfig::default()
        }
    }

    fn tokens(t: usize, e: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(t, e, (0..t * e).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Initialized model with biases and gains jittered so every path carries signal.
    fn jittered(cfg: &HeadConfig, seed: u64) -> HeadModel<f64> {
        let mut m: HeadModel<f64> = head_init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in &mut m.params {
            for v in &mut p.data {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        m
    }

    #[test]
    fn param_count_hand_tally() {
        let cfg = HeadConfig {
            num_classes: 10,
            ..HeadConfig::default()
        };
        let in_proj = 1024 * 128 + 128;
        let pos = 25 * 128;
        let attn = 4 * (128 * 128 + 128);
        let ln = 2 * (128 + 128);
        let ffn = 128 * 128 + 128 + 128 * 128 + 128;
        let cls = 128 * 10 + 10;
        assert_eq!(in_proj + pos + attn + ln + ffn + cls, 235_274);
        assert_eq!(cfg.param_count(), 235_274);
        assert_eq!(head_init::<f32>(&cfg, 0).unwrap().param_count(), 235_274);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = small(1);
        let a: HeadModel<f64> = head_init(&cfg, 1).unwrap();
        assert_eq!(a, head_init(&cfg, 1).unwrap());
        assert_ne!(a, head_init(&cfg, 2).unwrap());
        let gains: Vec<_> = a.params[11].data.clone();
        assert_eq!(gains, vec![1.0; 4]);
        assert!(a.params[1].data.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn eval_forward_deterministic_and_normalized() {
        let m = jittered(&small(1), 3);
        let x = tokens(25, 6, 9);
        let a = m.forward(&x, Mode::Eval, false).unwrap();
        let b = m.forward(&x, Mode::Eval, false).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.logits.len(), 3);
        assert_eq!(a.attention.shape, vec![25, 25]);
        for r in 0..25 {
            let s: f64 = a.attention.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_params_give_classifier_bias() {
        let mut m = jittered(&small(1), 4);
        let n = m.params.len();
        for p in &mut m.params[..n - 1] {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        m.params[n - 1].data = vec![0.5, -1.25, 2.0];
        assert_eq!(m.logits(&tokens(9, 6, 1)).unwrap(), vec![0.5, -1.25, 2.0]);
    }

    #[test]
    fn single_token_and_limits() {
        let m = jittered(&small(1), 5);
        let out = m.forward(&tokens(1, 6, 2), Mode::Eval, false).unwrap();
        assert_eq!(out.attention.data, vec![1.0]);
        assert!(out.logits.iter().all(|v| v.is_finite()));
        assert!(matches!(
            m.forward(&tokens(26, 6, 2), Mode::Eval, false),
            Err(Error::TooManyTokens { tokens: 26, max: 25 })
        ));
        assert!(matches!(
            m.forward(&tokens(9, 5, 2), Mode::Eval, false),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn position_ids_use_central_cells() {
        let cfg = small(1);
        assert_eq!(cfg.position_ids(1).unwrap(), vec![12]);
        assert_eq!(cfg.position_ids(9).unwrap(), vec![6, 7, 8, 11, 12, 13, 16, 17, 18]);
        assert_eq!(cfg.position_ids(25).unwrap(), (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn backward_requires_recording() {
        let m = jittered(&small(1), 6);
        let x = tokens(9, 6, 3);
        let fwd = m.forward(&x, Mode::Eval, false).unwrap();
        assert!(matches!(head_backward(&m, &fwd, 0, 0.2), Err(Error::NoRecordedForward)));
    }

    fn loss_of(m: &HeadModel<f64>, x: &Tensor<f64>, class: usize) -> f64 {
        smoothed_ce(&m.logits(x).unwrap(), class, 0.2).unwrap()
    }

    fn gradient_check(heads: usize, tokens_n: usize, seed: u64) {
        let mut m = jittered(&small(heads), seed);
        let x = tokens(tokens_n, 6, seed + 50);
        let class = seed as usize % 3;
        let fwd = m.forward(&x, Mode::Eval, true).unwrap();
        let (loss, g) = head_backward(&m, &fwd, class, 0.2).unwrap();
        drop(fwd);
        assert!((loss - loss_of(&m, &x, class)).abs() < 1e-14);
        let names = m.config.param_specs();
        let eps = 1e-4;
        for pi in 0..m.params.len() {
            let mut num = vec![0.0; m.params[pi].data.len()];
            for (j, slot) in num.iter_mut().enumerate() {
                let orig = m.params[pi].data[j];
                m.params[pi].data[j] = orig + eps;
                let up = loss_of(&m, &x, class);
                m.params[pi].data[j] = orig - eps;
                let down = loss_of(&m, &x, class);
                m.params[pi].data[j] = orig;
                *slot = (up - down) / (2.0 * eps);
            }
            let diff: f64 = num.iter().zip(&g.tensors[pi]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let na: f64 = g.tensors[pi].iter().map(|v| v * v).sum::<f64>().sqrt();
            let nn: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Key biases have identically zero gradient (softmax shift
            // invariance); the floor keeps finite-difference noise from
            // reading as relative error there.
            let rel = diff / na.max(nn).max(1e-6);
            assert!(rel <= 1e-4, "{} rel err {rel:e} (seed {seed})", names[pi].0);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            gradient_check(1, 25, seed);
        }
        gradient_check(2, 9, 7);
        gradient_check(1, 1, 8);
    }

    #[test]
    fn duplicated_row_doubles_sum_gradient() {
        let m = jittered(&small(1), 9);
        let x = tokens(9, 6, 4);
        let loss = LossConfig {
            label_smoothing: 0.2,
            reduction: Reduction::Sum,
        };
        let (l1, g1) = m.batch_gradients(&[(&x, 1)], &loss, None).unwrap();
        let (l2, g2) = m.batch_gradients(&[(&x, 1), (&x, 1)], &loss, None).unwrap();
        assert_eq!(l2, 2.0 * l1);
        let mut doubled = g1.clone();
        doubled.scale(2.0);
        assert_eq!(g2, doubled);
    }

    #[test]
    fn relabeling_non_central_tokens_is_symmetric() {
        let m = jittered(&small(1), 10);
        let x = tokens(25, 6, 5);
        // Swap a few non-central cells; the centre (12) stays.
        let mut perm: Vec<usize> = (0..25).collect();
        perm.swap(0, 24);
        perm.swap(3, 17);
        perm.swap(11, 13);
        let mut x2 = x.clone();
        for i in 0..25 {
            x2.data[i * 6..(i + 1) * 6].copy_from_slice(x.row(perm[i]));
        }
        let mut m2 = m.clone();
        for i in 0..25 {
            m2.params[POS].data[i * 4..(i + 1) * 4].copy_from_slice(m.params[POS].row(perm[i]));
        }
        let f1 = m.forward(&x, Mode::Eval, true).unwrap();
        let f2 = m2.forward(&x2, Mode::Eval, true).unwrap();
        let (l1, g1) = head_backward(&m, &f1, 2, 0.2).unwrap();
        let (l2, g2) = head_backward(&m2, &f2, 2, 0.2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for pi in 0..g1.tensors.len() {
            let b: Vec<f64> = if pi == POS {
                let mut back = vec![0.0; 100];
                for i in 0..25 {
                    back[perm[i] * 4..(perm[i] + 1) * 4].copy_from_slice(&g2.tensors[pi][i * 4..(i + 1) * 4]);
                }
                back
            } else {
                g2.tensors[pi].clone()
            };
            for (a, b) in g1.tensors[pi].iter().zip(&b) {
                assert!((a - b).abs() < 1e-12, "param {pi}");
            }
        }
    }

    #[test]
    fn train_mode_dropout_is_seeded() {
        let m = jittered(&small(1), 11);
        let x = tokens(9, 6, 6);
        let run = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            m.forward(&x, Mode::Train(&mut r), false).unwrap().logits
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        assert_ne!(run(1), m.logits(&x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let cfg = small(1);
        let model = jittered(&cfg, 12).cast::<f32>();
        let ck = Checkpoint {
            class_list: vec!["a".into(), "b".into(), "c".into()],
            seed: 12,
            context_grid: 3,
            model,
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let x = tokens(9, 6, 7).cast::<f32>();
        let (a, b) = (ck.model.logits(&x).unwrap(), back.model.logits(&x).unwrap());
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let mut bytes = ck.to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
