//! A small reverse-mode autodiff tape over dense `f64` matrices, with a
//! named parameter store, AdamW and global-norm gradient clipping.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    MaskedSoftmax(Var),
    RmsNorm(Var, Mat),
    Sum(Var),
    Mean(Var),
    Bce(Var, Mat, f64),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn row_sums(m: &Mat) -> Mat {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Mat) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Mat) -> Mat, op: Op) -> Var {
        let value = f(&self.value(a));
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Mat, &Mat) -> Mat, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(y), Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "add shape mismatch");
            x + y
        }, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "sub shape mismatch");
            x - y
        }, Op::Sub(a, b))
    }

    /// `a` (n×m) plus the 1×m row `r` broadcast over rows.
    pub fn add_row(&self, a: Var, r: Var) -> Var {
        self.binary(a, r, |x, y| {
            assert_eq!((1, x.ncols()), y.dim(), "add_row shape mismatch");
            x + y
        }, Op::AddRow(a, r))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "mul shape mismatch");
            x * y
        }, Op::Mul(a, b))
    }

    pub fn mul_row(&self, a: Var, r: Var) -> Var {
        self.binary(a, r, |x, y| {
            assert_eq!((1, x.ncols()), y.dim(), "mul_row shape mismatch");
            x * y
        }, Op::MulRow(a, r))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::tanh), Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(sigmoid), Op::Sigmoid(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| v * sigmoid(v)), Op::Silu(a))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        self.unary(a, |x| x.slice(s![.., start..end]).to_owned(), Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
            concatenate(Axis(1), &views).expect("concat_cols row mismatch")
        };
        let rg = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
            concatenate(Axis(0), &views).expect("concat_rows column mismatch")
        };
        let rg = self.needs(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Gathers rows by index (repeats allowed); embedding lookup.
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Var {
        self.unary(a, |x| x.select(Axis(0), rows), Op::SelectRows(a, rows.to_vec()))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, |x| x.t().to_owned(), Op::Transpose(a))
    }

    /// Row-wise softmax over entries where `mask` is true; masked entries are 0.
    pub fn masked_softmax(&self, a: Var, mask: &Array2<bool>) -> Var {
        let value = {
            let x = self.value(a);
            assert_eq!(x.dim(), mask.dim(), "mask shape mismatch");
            let mut out = Mat::zeros(x.dim());
            for ((xr, mr), mut or) in x.rows().into_iter().zip(mask.rows()).zip(out.rows_mut()) {
                let max = xr
                    .iter()
                    .zip(mr)
                    .filter(|(_, &m)| m)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for ((o, v), &m) in or.iter_mut().zip(xr).zip(mr) {
                    if m {
                        *o = (v - max).exp();
                        total += *o;
                    }
                }
                or.mapv_inplace(|o| o / total);
            }
            out
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::MaskedSoftmax(a), rg)
    }

    /// Row-wise x / sqrt(mean(x²) + eps), without a gain.
    pub fn rms_norm(&self, a: Var, eps: f64) -> Var {
        let (value, r) = {
            let x = self.value(a);
            let r = (x.mapv(|v| v * v).mean_axis(Axis(1)).unwrap() + eps)
                .mapv(f64::sqrt)
                .insert_axis(Axis(1));
            (&*x / &r, r)
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::RmsNorm(a, r), rg)
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Mat::from_elem((1, 1), x.sum()), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(a, |x| Mat::from_elem((1, 1), x.mean().unwrap_or(0.0)), Op::Mean(a))
    }

    /// Summed binary cross entropy of probabilities `p` against `targets`,
    /// with `p` clipped to [eps, 1 − eps] (zero gradient where clipped).
    pub fn bce(&self, p: Var, targets: Mat, eps: f64) -> Var {
        let value = {
            let x = self.value(p);
            assert_eq!(x.dim(), targets.dim(), "bce shape mismatch");
            let total: f64 = x
                .iter()
                .zip(&targets)
                .map(|(&p, &y)| {
                    let p = p.clamp(eps, 1.0 - eps);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum();
            Mat::from_elem((1, 1), total)
        };
        let rg = self.needs(&[p]);
        self.push(value, Op::Bce(p, targets, eps), rg)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        let accumulate = |grads: &mut Vec<Option<Mat>>, v: Var, g: Mat| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        };
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: &Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g.dot(&val(b).t()));
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, val(a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut grads, *r, row_sums(&g));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * val(b));
                    accumulate(&mut grads, *b, &g * val(a));
                }
                Op::MulRow(a, r) => {
                    accumulate(&mut grads, *r, row_sums(&(&g * val(a))));
                    accumulate(&mut grads, *a, &g * val(r));
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => accumulate(&mut grads, *a, &g * &node.value.mapv(|y| 1.0 - y * y)),
                Op::Sigmoid(a) => accumulate(&mut grads, *a, &g * &node.value.mapv(|y| y * (1.0 - y))),
                Op::Silu(a) => {
                    let d = val(a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::SliceCols(a, start, end) => {
                    let mut full = Mat::zeros(val(a).dim());
                    full.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = val(p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = val(p).nrows();
                        accumulate(&mut grads, *p, g.slice(s![offset..offset + h, ..]).to_owned());
                        offset += h;
                    }
                }
                Op::SelectRows(a, rows) => {
                    let mut full = Mat::zeros(val(a).dim());
                    for (gi, &r) in rows.iter().enumerate() {
                        let mut dst = full.row_mut(r);
                        dst += &g.row(gi);
                    }
                    accumulate(&mut grads, *a, full);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, y * &(&g - &dot));
                }
                Op::RmsNorm(a, r) => {
                    let y = &node.value;
                    let m = (&g * y).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                    accumulate(&mut grads, *a, (&g - &(y * &m)) / r);
                }
                Op::Sum(a) => {
                    let c = g[[0, 0]];
                    accumulate(&mut grads, *a, Mat::from_elem(val(a).dim(), c));
                }
                Op::Mean(a) => {
                    let x = val(a);
                    let c = g[[0, 0]] / x.len().max(1) as f64;
                    accumulate(&mut grads, *a, Mat::from_elem(x.dim(), c));
                }
                Op::Bce(p, targets, eps) => {
                    let c = g[[0, 0]];
                    let mut d = Mat::zeros(targets.dim());
                    for ((o, &p), &y) in d.iter_mut().zip(val(p)).zip(targets) {
                        if p > *eps && p < 1.0 - *eps {
                            *o = c * (-(y / p) + (1.0 - y) / (1.0 - p));
                        }
                    }
                    accumulate(&mut grads, *p, d);
                }
            }
        }
        Gradients(grads)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Gradients(Vec<Option<Mat>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
}

pub type GradMap = BTreeMap<String, Mat>;

/// Named parameter matrices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Mat>,
}

/// Parameters placed on a tape; trainable ones carry gradients.
pub struct Bound {
    vars: BTreeMap<String, (Var, bool)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound")).0
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).map(|(v, _)| *v)
    }

    pub fn collect(&self, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .map(|(name, (v, _))| {
                let g = grads.get(*v).cloned();
                (name.clone(), g)
            })
            .filter_map(|(n, g)| g.map(|g| (n, g)))
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Puts every parameter on `tape`; `trainable` decides which get gradients.
    pub fn bind(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, m)| {
                let t = trainable(name);
                (name.clone(), (tape.leaf(m.clone(), t), t))
            })
            .collect();
        Bound { vars }
    }
}

pub fn add_into(acc: &mut GradMap, other: GradMap) {
    for (k, g) in other {
        match acc.get_mut(&k) {
            Some(a) => *a += &g,
            None => {
                acc.insert(k, g);
            }
        }
    }
}

pub fn scale_grads(grads: &mut GradMap, c: f64) {
    for g in grads.values_mut() {
        g.mapv_inplace(|v| v * c);
    }
}

pub fn grad_norm(grads: &GradMap) -> f64 {
    grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales so the global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        scale_grads(grads, max_norm / norm);
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * wd * *p;
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Largest relative error between analytic gradients and central finite
/// differences of `loss` over every entry of the named parameters.
pub fn finite_difference_check(
    params: &ParamStore,
    names: &[&str],
    analytic: &GradMap,
    h: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for &name in names {
        let shape = params.get(name).unwrap_or_else(|| panic!("no parameter `{name}`")).dim();
        for idx in 0..shape.0 * shape.1 {
            let (r, c) = (idx / shape.1, idx % shape.1);
            let orig = params.get(name).unwrap()[[r, c]];
            probe.get_mut(name).unwrap()[[r, c]] = orig + h;
            let up = loss(&probe);
            probe.get_mut(name).unwrap()[[r, c]] = orig - h;
            let down = loss(&probe);
            probe.get_mut(name).unwrap()[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic.get(name).map(|g| g[[r, c]]).unwrap_or(0.0);
            let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
