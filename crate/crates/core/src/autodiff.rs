//! Dense reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns gradients for the registered parameters. Tapes are rebuilt for
//! every forward pass.

use std::cell::{Cell, RefCell};
use std::f64::consts::PI;
use std::rc::Rc;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return invalid(format!(
                "shape {shape:?} needs {len} entries, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => invalid(format!("expected a 2-D tensor, got shape {s:?}")),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named parameters with a stable (insertion) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return invalid(format!("duplicate parameter name {name}"));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_value()?)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(s)?)
    }

    pub fn to_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params: self.params.clone(),
        })?)
    }

    pub fn from_value(v: serde_json::Value) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_value(v)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return invalid(format!(
                "unsupported checkpoint format version {}",
                ck.format_version
            ));
        }
        for (name, t) in &ck.params {
            Tensor::new(t.shape.clone(), t.data.clone())
                .map_err(|e| Error::InvalidArgument(format!("parameter {name}: {e}")))?;
        }
        Ok(Self { params: ck.params })
    }
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<usize>,
    },
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    Reshape(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    Take(usize, Rc<Vec<usize>>),
    ScatterRows {
        src: usize,
        index: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
    },
    BatchedMatVec(usize, usize),
    GatherMatVec {
        mats: usize,
        vecs: usize,
        index: Rc<Vec<usize>>,
    },
    ComplexMul(usize, usize),
    ModeMix(usize, usize),
    Dft {
        src: usize,
        freqs: Rc<Vec<i64>>,
    },
    IdftReal {
        src: usize,
        freqs: Rc<Vec<i64>>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Operation record from leaves to a scalar loss.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    flops: Cell<u64>,
    n_params: Cell<usize>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, shape {:?})", self.id, self.shape())
    }
}

/// Parameter handles registered on a tape, in store order.
pub struct ParamVars<'t> {
    vars: Vec<Var<'t>>,
    names: IndexMap<String, usize>,
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.names
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            flops: Cell::new(0),
            n_params: Cell::new(0),
        }
    }

    /// Multiply-add count recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn count(&self, n: usize) {
        self.flops.set(self.flops.get() + n as u64);
    }

    /// A constant input (no gradient reported).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf { param: None })
    }

    /// Registers every parameter of `store` as a differentiable leaf.
    pub fn params(&self, store: &ParamStore) -> ParamVars<'_> {
        let mut vars = Vec::with_capacity(store.len());
        let mut names = IndexMap::new();
        let base = self.n_params.get();
        for (i, (name, t)) in store.iter().enumerate() {
            vars.push(self.push(
                t.clone(),
                Op::Leaf {
                    param: Some(base + i),
                },
            ));
            names.insert(name.clone(), i);
        }
        self.n_params.set(base + store.len());
        ParamVars { vars, names }
    }

    /// Reverse sweep from a scalar `loss`; returns one gradient per registered
    /// parameter, in registration order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor {
            shape: nodes[loss.id].value.shape.clone(),
            data: vec![1.0],
        });
        let mut out = vec![None; self.n_params.get()];
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let mut acc = |i: usize, d: Vec<f64>| match &mut grads[i] {
                Some(t) => t.data.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => {
                    *slot = Some(Tensor {
                        shape: nodes[i].value.shape.clone(),
                        data: d,
                    })
                }
            };
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        out[*p] = Some(g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let (_, n) = val(*b).dims2()?;
                    let da = matmul_raw(&g.data, &transpose_raw(&val(*b).data, k, n), m, n, k);
                    let db = matmul_raw(&transpose_raw(&val(*a).data, m, k), &g.data, k, m, n);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Add(a, b) => {
                    acc(*a, g.data.clone());
                    acc(*b, g.data);
                }
                Op::AddRow(a, row) => {
                    let n = val(*row).len();
                    let mut dr = vec![0.0; n];
                    for chunk in g.data.chunks(n) {
                        dr.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    acc(*a, g.data);
                    acc(*row, dr);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.data.iter().map(|v| -v).collect());
                    acc(*a, g.data);
                }
                Op::Mul(a, b) => {
                    let da = g
                        .data
                        .iter()
                        .zip(&val(*b).data)
                        .map(|(x, y)| x * y)
                        .collect();
                    let db = g
                        .data
                        .iter()
                        .zip(&val(*a).data)
                        .map(|(x, y)| x * y)
                        .collect();
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale(a, s) => acc(*a, g.data.iter().map(|v| v * s).collect()),
                Op::Tanh(a) => {
                    let d = g
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let d = g
                        .data
                        .iter()
                        .zip(&val(*a).data)
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc(*a, d);
                }
                Op::Sqrt(a) => {
                    let d = g
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .map(|(gv, y)| gv * 0.5 / y)
                        .collect();
                    acc(*a, d);
                }
                Op::Sum(a) => acc(*a, vec![g.data[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    acc(*a, vec![g.data[0] / n as f64; n]);
                }
                Op::Concat(parts) => {
                    let rows = node.value.shape[0];
                    let total = node.value.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).shape[1];
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(
                                &g.data[r * total + offset..r * total + offset + c],
                            );
                        }
                        acc(p, d);
                        offset += c;
                    }
                }
                Op::Reshape(a) => acc(*a, g.data),
                Op::GatherRows(a, index) => {
                    let (rows, c) = val(*a).dims2()?;
                    let mut d = vec![0.0; rows * c];
                    for (e, &r) in index.iter().enumerate() {
                        let src = &g.data[e * c..(e + 1) * c];
                        d[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                    acc(*a, d);
                }
                Op::Take(a, index) => {
                    let mut d = vec![0.0; val(*a).len()];
                    for (o, &i) in index.iter().enumerate() {
                        d[i] += g.data[o];
                    }
                    acc(*a, d);
                }
                Op::ScatterRows {
                    src,
                    index,
                    weights,
                } => {
                    let c = node.value.shape[1];
                    let mut d = vec![0.0; index.len() * c];
                    for (e, (&r, &w)) in index.iter().zip(weights.iter()).enumerate() {
                        let gr = &g.data[r * c..(r + 1) * c];
                        d[e * c..(e + 1) * c]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(x, y)| *x = w * y);
                    }
                    acc(*src, d);
                }
                Op::BatchedMatVec(mats, vecs) => {
                    let (e, c) = val(*vecs).dims2()?;
                    let r = node.value.shape[1];
                    let mv = &val(*mats).data;
                    let vv = &val(*vecs).data;
                    let mut dm = vec![0.0; e * r * c];
                    let mut dv = vec![0.0; e * c];
                    for ei in 0..e {
                        let gi = &g.data[ei * r..(ei + 1) * r];
                        let vi = &vv[ei * c..(ei + 1) * c];
                        let m = &mv[ei * r * c..(ei + 1) * r * c];
                        let dmi = &mut dm[ei * r * c..(ei + 1) * r * c];
                        let dvi = &mut dv[ei * c..(ei + 1) * c];
                        for ri in 0..r {
                            let gr = gi[ri];
                            let mrow = &m[ri * c..(ri + 1) * c];
                            let dmrow = &mut dmi[ri * c..(ri + 1) * c];
                            for ci in 0..c {
                                dmrow[ci] = gr * vi[ci];
                                dvi[ci] += gr * mrow[ci];
                            }
                        }
                    }
                    acc(*mats, dm);
                    acc(*vecs, dv);
                }
                Op::GatherMatVec { mats, vecs, index } => {
                    let (e, c) = val(*vecs).dims2()?;
                    let r = node.value.shape[1];
                    let mv = &val(*mats).data;
                    let vv = &val(*vecs).data;
                    let mut dm = vec![0.0; mv.len()];
                    let mut dv = vec![0.0; e * c];
                    for (ei, &row) in index.iter().enumerate() {
                        let gi = &g.data[ei * r..(ei + 1) * r];
                        let vi = &vv[ei * c..(ei + 1) * c];
                        let m = &mv[row * r * c..(row + 1) * r * c];
                        let dmi = &mut dm[row * r * c..(row + 1) * r * c];
                        let dvi = &mut dv[ei * c..(ei + 1) * c];
                        for ri in 0..r {
                            let gr = gi[ri];
                            let mrow = &m[ri * c..(ri + 1) * c];
                            let dmrow = &mut dmi[ri * c..(ri + 1) * c];
                            for ci in 0..c {
                                dmrow[ci] += gr * vi[ci];
                                dvi[ci] += gr * mrow[ci];
                            }
                        }
                    }
                    acc(*mats, dm);
                    acc(*vecs, dv);
                }
                Op::ComplexMul(a, b) => {
                    let av = &val(*a).data;
                    let bv = &val(*b).data;
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..av.len() / 2 {
                        let (gr, gi) = (g.data[2 * i], g.data[2 * i + 1]);
                        let (ar, ai) = (av[2 * i], av[2 * i + 1]);
                        let (br, bi) = (bv[2 * i], bv[2 * i + 1]);
                        // g * conj(other)
                        da[2 * i] = gr * br + gi * bi;
                        da[2 * i + 1] = gi * br - gr * bi;
                        db[2 * i] = gr * ar + gi * ai;
                        db[2 * i + 1] = gi * ar - gr * ai;
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::ModeMix(w, f) => {
                    let ws = &val(*w).shape;
                    let (modes, o, i) = (ws[0], ws[1], ws[2]);
                    let wv = &val(*w).data;
                    let fv = &val(*f).data;
                    let mut dw = vec![0.0; wv.len()];
                    let mut df = vec![0.0; fv.len()];
                    for m in 0..modes {
                        for oi in 0..o {
                            let gidx = 2 * (m * o + oi);
                            let (gr, gim) = (g.data[gidx], g.data[gidx + 1]);
                            for ii in 0..i {
                                let widx = 2 * ((m * o + oi) * i + ii);
                                let fidx = 2 * (m * i + ii);
                                let (fr, fi) = (fv[fidx], fv[fidx + 1]);
                                let (wr, wi) = (wv[widx], wv[widx + 1]);
                                dw[widx] += gr * fr + gim * fi;
                                dw[widx + 1] += gim * fr - gr * fi;
                                df[fidx] += gr * wr + gim * wi;
                                df[fidx + 1] += gim * wr - gr * wi;
                            }
                        }
                    }
                    acc(*w, dw);
                    acc(*f, df);
                }
                Op::Dft { src, freqs } => {
                    let (n, c) = val(*src).dims2()?;
                    let tw = Twiddles::new(n);
                    let mut d = vec![0.0; n * c];
                    for (m, &k) in freqs.iter().enumerate() {
                        for x in 0..n {
                            let (cs, sn) = tw.at(k, x);
                            let row = &mut d[x * c..(x + 1) * c];
                            for ci in 0..c {
                                let gi = 2 * (m * c + ci);
                                // F = sum f (cos - i sin)
                                row[ci] += g.data[gi] * cs - g.data[gi + 1] * sn;
                            }
                        }
                    }
                    acc(*src, d);
                }
                Op::IdftReal { src, freqs } => {
                    let n = node.value.shape[0];
                    let c = node.value.shape[1];
                    let tw = Twiddles::new(n);
                    let inv_n = 1.0 / n as f64;
                    let mut d = vec![0.0; freqs.len() * c * 2];
                    for (m, &k) in freqs.iter().enumerate() {
                        for x in 0..n {
                            let (cs, sn) = tw.at(k, x);
                            let row = &g.data[x * c..(x + 1) * c];
                            for ci in 0..c {
                                let di = 2 * (m * c + ci);
                                d[di] += row[ci] * cs * inv_n;
                                d[di + 1] -= row[ci] * sn * inv_n;
                            }
                        }
                    }
                    acc(*src, d);
                }
            }
        }
        Ok(out
            .into_iter()
            .enumerate()
            .map(|(p, g)| g.unwrap_or_else(|| Tensor::zeros(&self.param_shape(&nodes, p))))
            .collect())
    }

    fn param_shape(&self, nodes: &[Node], p: usize) -> Vec<usize> {
        nodes
            .iter()
            .find(|n| matches!(n.op, Op::Leaf { param: Some(q) } if q == p))
            .map(|n| n.value.shape.clone())
            .unwrap_or_default()
    }
}

/// cos/sin of `2 pi j / n`.
pub(crate) struct Twiddles {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    pub(crate) fn new(n: usize) -> Self {
        let (cos, sin) = (0..n)
            .map(|j| {
                let t = 2.0 * PI * j as f64 / n as f64;
                (t.cos(), t.sin())
            })
            .unzip();
        Self { n, cos, sin }
    }

    pub(crate) fn at(&self, k: i64, x: usize) -> (f64, f64) {
        let j = (k * x as i64).rem_euclid(self.n as i64) as usize;
        (self.cos[j], self.sin[j])
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return invalid(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        ));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().data[0]
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value();
        let data = v.data.iter().map(|&x| f(x)).collect();
        self.tape.push(
            Tensor {
                shape: v.shape.clone(),
                data,
            },
            op,
        )
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, name)?;
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape.push(
            Tensor {
                shape: a.shape.clone(),
                data,
            },
            op,
        ))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return invalid(format!("matmul: inner dimensions {k} and {k2} differ"));
        }
        self.tape.count(m * k * n);
        let data = matmul_raw(&a.data, &b.data, m, k, n);
        Ok(self.tape.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(self.id, other.id),
        ))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    /// Adds a length-`n` row to every row of an `m x n` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        let (_, n) = a.dims2()?;
        if r.len() != n {
            return invalid(format!(
                "add_row: row of length {} for {n} columns",
                r.len()
            ));
        }
        let data = a
            .data
            .chunks(n)
            .flat_map(|c| c.iter().zip(&r.data).map(|(x, y)| x + y))
            .collect();
        Ok(self.tape.push(
            Tensor {
                shape: a.shape.clone(),
                data,
            },
            Op::AddRow(self.id, row.id),
        ))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn tanh_act(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu_act(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data.iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if shape.iter().product::<usize>() != v.len() {
            return invalid(format!("reshape: {:?} to {shape:?}", v.shape));
        }
        Ok(self.tape.push(
            Tensor {
                shape: shape.to_vec(),
                data: v.data.clone(),
            },
            Op::Reshape(self.id),
        ))
    }

    /// Row `e` of the output is row `index[e]` of `self`.
    pub fn gather_rows(&self, index: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value();
        let (rows, c) = v.dims2()?;
        if let Some(&bad) = index.iter().find(|&&r| r >= rows) {
            return invalid(format!("gather_rows: index {bad} out of {rows} rows"));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &r in index.iter() {
            data.extend_from_slice(&v.data[r * c..(r + 1) * c]);
        }
        self.tape.count(index.len() * c);
        Ok(self.tape.push(
            Tensor {
                shape: vec![index.len(), c],
                data,
            },
            Op::GatherRows(self.id, index),
        ))
    }

    /// Flat gather: `out[i] = self[index[i]]`, reshaped to `shape`.
    pub fn take(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if shape.iter().product::<usize>() != index.len() {
            return invalid(format!("take: {} indices for shape {shape:?}", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
            return invalid(format!("take: index {bad} out of {} entries", v.len()));
        }
        let data = index.iter().map(|&i| v.data[i]).collect();
        Ok(self.tape.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Take(self.id, index),
        ))
    }

    /// `out[index[e]] += weights[e] * self[e]`, with `n_out` output rows.
    pub fn scatter_rows(
        &self,
        index: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
        n_out: usize,
    ) -> Result<Var<'t>> {
        let v = self.value();
        let (e, c) = v.dims2()?;
        if index.len() != e || weights.len() != e {
            return invalid("scatter_rows: index/weights length must match rows");
        }
        if let Some(&bad) = index.iter().find(|&&r| r >= n_out) {
            return invalid(format!("scatter_rows: index {bad} out of {n_out} rows"));
        }
        let mut data = vec![0.0; n_out * c];
        for (ei, (&r, &w)) in index.iter().zip(weights.iter()).enumerate() {
            let src = &v.data[ei * c..(ei + 1) * c];
            data[r * c..(r + 1) * c]
                .iter_mut()
                .zip(src)
                .for_each(|(o, s)| *o += w * s);
        }
        self.tape.count(e * c);
        Ok(self.tape.push(
            Tensor {
                shape: vec![n_out, c],
                data,
            },
            Op::ScatterRows {
                src: self.id,
                index,
                weights,
            },
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = vals[0].dims2()?.0;
        let mut total = 0;
        for v in &vals {
            let (r, c) = v.dims2()?;
            if r != rows {
                return invalid(format!("concat: row counts {rows} and {r} differ"));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                let c = v.shape[1];
                data.extend_from_slice(&v.data[r * c..(r + 1) * c]);
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Op::Concat(ids),
        ))
    }

    /// `self` holds `E` row-major `r x c` matrices as an `E x (r c)` tensor,
    /// `vecs` is `E x c`; returns the `E x r` products.
    pub fn batched_matvec(&self, vecs: Var<'t>, r: usize) -> Result<Var<'t>> {
        let (m, v) = (self.value(), vecs.value());
        let (e, rc) = m.dims2()?;
        let (e2, c) = v.dims2()?;
        if e != e2 || rc != r * c {
            return invalid(format!(
                "batched_matvec: {:?} with {:?} and r = {r}",
                m.shape, v.shape
            ));
        }
        let mut data = vec![0.0; e * r];
        for ei in 0..e {
            let mi = &m.data[ei * rc..(ei + 1) * rc];
            let vi = &v.data[ei * c..(ei + 1) * c];
            for ri in 0..r {
                data[ei * r + ri] = mi[ri * c..(ri + 1) * c]
                    .iter()
                    .zip(vi)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        self.tape.count(e * rc);
        Ok(self.tape.push(
            Tensor {
                shape: vec![e, r],
                data,
            },
            Op::BatchedMatVec(self.id, vecs.id),
        ))
    }

    /// `out[e] = M[index[e]] vecs[e]` where `self` holds `K` row-major `r x c`
    /// matrices as a `K x (r c)` tensor; equivalent to gathering rows and then
    /// [`Var::batched_matvec`] without materializing the gathered matrices.
    pub fn gather_matvec(&self, vecs: Var<'t>, index: Rc<Vec<usize>>, r: usize) -> Result<Var<'t>> {
        let (m, v) = (self.value(), vecs.value());
        let (k, rc) = m.dims2()?;
        let (e, c) = v.dims2()?;
        if rc != r * c || index.len() != e {
            return invalid(format!(
                "gather_matvec: {:?} with {:?}, {} indices and r = {r}",
                m.shape,
                v.shape,
                index.len()
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return invalid(format!("gather_matvec: index {bad} out of {k} rows"));
        }
        let mut data = vec![0.0; e * r];
        for (ei, &row) in index.iter().enumerate() {
            let mi = &m.data[row * rc..(row + 1) * rc];
            let vi = &v.data[ei * c..(ei + 1) * c];
            for ri in 0..r {
                data[ei * r + ri] = mi[ri * c..(ri + 1) * c]
                    .iter()
                    .zip(vi)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        self.tape.count(e * rc);
        Ok(self.tape.push(
            Tensor {
                shape: vec![e, r],
                data,
            },
            Op::GatherMatVec {
                mats: self.id,
                vecs: vecs.id,
                index,
            },
        ))
    }

    /// Elementwise complex product; the last dimension holds `(re, im)` pairs.
    pub fn complex_mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "complex_mul")?;
        if a.shape.last() != Some(&2) {
            return invalid("complex_mul: last dimension must be 2");
        }
        let mut data = vec![0.0; a.len()];
        for i in 0..a.len() / 2 {
            let (ar, ai, br, bi) = (
                a.data[2 * i],
                a.data[2 * i + 1],
                b.data[2 * i],
                b.data[2 * i + 1],
            );
            data[2 * i] = ar * br - ai * bi;
            data[2 * i + 1] = ar * bi + ai * br;
        }
        self.tape.count(2 * a.len());
        Ok(self.tape.push(
            Tensor {
                shape: a.shape.clone(),
                data,
            },
            Op::ComplexMul(self.id, other.id),
        ))
    }

    /// Per-mode complex matrix-vector product: `self` is `M x o x i x 2`,
    /// `spectrum` is `M x i x 2`, result `M x o x 2`.
    pub fn mode_mix(&self, spectrum: Var<'t>) -> Result<Var<'t>> {
        let (w, f) = (self.value(), spectrum.value());
        let (modes, o, i) = match (w.shape.as_slice(), f.shape.as_slice()) {
            ([m, o, i, 2], [m2, i2, 2]) if m == m2 && i == i2 => (*m, *o, *i),
            _ => {
                return invalid(format!(
                    "mode_mix: weights {:?} with spectrum {:?}",
                    w.shape, f.shape
                ))
            }
        };
        let mut data = vec![0.0; modes * o * 2];
        for m in 0..modes {
            for oi in 0..o {
                let (mut re, mut im) = (0.0, 0.0);
                for ii in 0..i {
                    let widx = 2 * ((m * o + oi) * i + ii);
                    let fidx = 2 * (m * i + ii);
                    let (wr, wi, fr, fi) = (
                        w.data[widx],
                        w.data[widx + 1],
                        f.data[fidx],
                        f.data[fidx + 1],
                    );
                    re += wr * fr - wi * fi;
                    im += wr * fi + wi * fr;
                }
                data[2 * (m * o + oi)] = re;
                data[2 * (m * o + oi) + 1] = im;
            }
        }
        self.tape.count(4 * modes * o * i);
        Ok(self.tape.push(
            Tensor {
                shape: vec![modes, o, 2],
                data,
            },
            Op::ModeMix(self.id, spectrum.id),
        ))
    }

    /// DFT of each column of an `n x c` real tensor at the given signed
    /// frequencies: `F[m, c] = sum_x f[x, c] exp(-2 pi i k_m x / n)`.
    pub fn dft_modes(&self, freqs: Rc<Vec<i64>>) -> Result<Var<'t>> {
        let v = self.value();
        let (n, c) = v.dims2()?;
        let tw = Twiddles::new(n);
        let mut data = vec![0.0; freqs.len() * c * 2];
        for (m, &k) in freqs.iter().enumerate() {
            for x in 0..n {
                let (cs, sn) = tw.at(k, x);
                let row = &v.data[x * c..(x + 1) * c];
                for ci in 0..c {
                    data[2 * (m * c + ci)] += row[ci] * cs;
                    data[2 * (m * c + ci) + 1] -= row[ci] * sn;
                }
            }
        }
        self.tape.count(2 * n * c * freqs.len());
        Ok(self.tape.push(
            Tensor {
                shape: vec![freqs.len(), c, 2],
                data,
            },
            Op::Dft {
                src: self.id,
                freqs,
            },
        ))
    }

    /// Real part of the inverse DFT restricted to `freqs`:
    /// `out[x, c] = (1/n) Re sum_m G[m, c] exp(2 pi i k_m x / n)`.
    pub fn idft_modes_real(&self, freqs: Rc<Vec<i64>>, n: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (modes, c) = match v.shape.as_slice() {
            [m, c, 2] if *m == freqs.len() => (*m, *c),
            s => {
                return invalid(format!(
                    "idft_modes_real: spectrum shape {s:?} for {} modes",
                    freqs.len()
                ))
            }
        };
        let tw = Twiddles::new(n);
        let inv_n = 1.0 / n as f64;
        let mut data = vec![0.0; n * c];
        for (m, &k) in freqs.iter().enumerate() {
            for x in 0..n {
                let (cs, sn) = tw.at(k, x);
                let row = &mut data[x * c..(x + 1) * c];
                for ci in 0..c {
                    let (gr, gi) = (v.data[2 * (m * c + ci)], v.data[2 * (m * c + ci) + 1]);
                    row[ci] += (gr * cs - gi * sn) * inv_n;
                }
            }
        }
        self.tape.count(2 * n * c * modes);
        Ok(self.tape.push(
            Tensor {
                shape: vec![n, c],
                data,
            },
            Op::IdftReal {
                src: self.id,
                freqs,
            },
        ))
    }
}

/// Adam moments for one [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(&t.shape)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return invalid("adam_step: gradient/state count does not match parameters");
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if p.shape != g.shape || p.shape != m.shape {
            return invalid(format!(
                "adam_step: shape mismatch {:?} vs {:?}",
                p.shape, g.shape
            ));
        }
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m.data[i] / bc1;
            let vh = v.data[i] / bc2;
            p.data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Central-difference check of reverse-mode gradients.
///
/// For every parameter up to `coords_per_param` coordinates are probed
/// (all of them when the parameter is smaller), with step `h * max(1, |theta|)`.
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<F>(
    loss_fn: F,
    params: &ParamStore,
    h: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let pv = tape.params(params);
    let loss = loss_fn(&tape, &pv)?;
    let analytic = tape.backward(loss)?;
    let eval = |store: &ParamStore| -> Result<f64> {
        let t = Tape::new();
        let pv = t.params(store);
        Ok(loss_fn(&t, &pv)?.item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let len = params.get(name).unwrap().len();
        let coords: Vec<usize> = if len <= coords_per_param {
            (0..len).collect()
        } else {
            sample(&mut rng, len, coords_per_param).into_vec()
        };
        for c in coords {
            let theta = params.get(name).unwrap().data[c];
            let step = h * theta.abs().max(1.0);
            probe.get_mut(name).unwrap().data[c] = theta + step;
            let plus = eval(&probe)?;
            probe.get_mut(name).unwrap().data[c] = theta - step;
            let minus = eval(&probe)?;
            probe.get_mut(name).unwrap().data[c] = theta;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_examples() {
        let t = Tape::new();
        let id = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        assert_eq!(id.matmul(x).unwrap().value().data, x.value().data);
        let z = t.constant(Tensor::zeros(&[3, 2]));
        assert!(z.tanh_act().value().data.iter().all(|&v| v == 0.0));
        let v = t.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        assert_eq!(v.mean().item(), 3.0);
        assert!(x.matmul(x).is_err());
        assert!(x.add(id).is_err());
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let mut store = ParamStore::new();
        store
            .insert(
                "w",
                Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap(),
            )
            .unwrap();
        let x = Tensor::matrix(3, 1, vec![1.0, -2.0, 4.0]).unwrap();
        let t = Tape::new();
        let pv = t.params(&store);
        let loss = pv
            .get("w")
            .unwrap()
            .matmul(t.constant(x.clone()))
            .unwrap()
            .sum();
        let g = t.backward(loss).unwrap();
        assert_eq!(g[0].data, vec![1.0, -2.0, 4.0, 1.0, -2.0, 4.0]);
    }

    #[test]
    fn least_squares_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let x = rand_tensor(&mut rng, &[4, 1]);
        let y = rand_tensor(&mut rng, &[3, 1]);
        let mut store = ParamStore::new();
        store.insert("w", w.clone()).unwrap();
        let t = Tape::new();
        let pv = t.params(&store);
        let r = pv
            .get("w")
            .unwrap()
            .matmul(t.constant(x.clone()))
            .unwrap()
            .sub(t.constant(y.clone()))
            .unwrap();
        let loss = r.mul(r).unwrap().mean();
        let g = t.backward(loss).unwrap();
        let resid = r.value();
        for i in 0..3 {
            for j in 0..4 {
                let expect = 2.0 / 3.0 * resid.data[i] * x.data[j];
                assert_abs_diff_eq!(g[0].data[i * 4 + j], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x), Err(Error::InvalidArgument(_))));
    }

    fn mlp_loss<'t>(t: &'t Tape, pv: &ParamVars<'t>, x: &Tensor) -> Result<Var<'t>> {
        let h = t
            .constant(x.clone())
            .matmul(pv.get("w1")?)?
            .add_row(pv.get("b1")?)?
            .tanh_act();
        let o = h.matmul(pv.get("w2")?)?.add_row(pv.get("b2")?)?.tanh_act();
        Ok(o.mul(o)?.mean())
    }

    #[test]
    fn two_layer_mlp_passes_fd_check() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.insert("w1", rand_tensor(&mut rng, &[3, 8])).unwrap();
            store.insert("b1", rand_tensor(&mut rng, &[8])).unwrap();
            store.insert("w2", rand_tensor(&mut rng, &[8, 4])).unwrap();
            store.insert("b2", rand_tensor(&mut rng, &[4])).unwrap();
            let x = rand_tensor(&mut rng, &[5, 3]);
            let err = check_gradients(|t, pv| mlp_loss(t, pv, &x), &store, 1e-6, 32, seed).unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn linear_loss_fd_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.insert("w", rand_tensor(&mut rng, &[4, 3])).unwrap();
        let x = rand_tensor(&mut rng, &[2, 4]);
        let err = check_gradients(
            |t, pv| Ok(t.constant(x.clone()).matmul(pv.get("w")?)?.sum()),
            &store,
            1e-6,
            32,
            0,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    fn fd_check_op<F>(shapes: &[(&str, &[usize])], seed: u64, f: F) -> f64
    where
        F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in shapes {
            store.insert(*name, rand_tensor(&mut rng, shape)).unwrap();
        }
        check_gradients(f, &store, 1e-6, 32, seed).unwrap()
    }

    // squared so the loss is not linear in the op output
    fn sq_sum<'t>(v: Var<'t>) -> Result<Var<'t>> {
        Ok(v.mul(v)?.sum())
    }

    #[test]
    fn gather_scatter_concat_pass_fd_check() {
        let idx = Rc::new(vec![0, 2, 3, 3, 1]);
        let dst = Rc::new(vec![1, 0, 1, 2, 0]);
        let wts = Rc::new(vec![0.5, 1.0, 0.25, 2.0, -1.0]);
        let e = fd_check_op(&[("a", &[4, 3])], 1, |_, pv| {
            sq_sum(pv.get("a")?.gather_rows(idx.clone())?)
        });
        assert!(e < 1e-6, "gather {e}");
        let e = fd_check_op(&[("a", &[5, 3])], 2, |_, pv| {
            sq_sum(pv.get("a")?.scatter_rows(dst.clone(), wts.clone(), 3)?)
        });
        assert!(e < 1e-6, "scatter {e}");
        let e = fd_check_op(&[("a", &[5, 3]), ("b", &[5, 2])], 3, |_, pv| {
            sq_sum(Var::concat(&[pv.get("a")?, pv.get("b")?.tanh_act()])?)
        });
        assert!(e < 1e-6, "concat {e}");
    }

    #[test]
    fn take_passes_fd_check() {
        let idx = Rc::new(vec![5, 0, 0, 3, 2, 1]);
        let e = fd_check_op(&[("a", &[2, 3])], 10, |_, pv| {
            sq_sum(pv.get("a")?.take(idx.clone(), &[3, 2])?)
        });
        assert!(e < 1e-6, "take {e}");
    }

    #[test]
    fn batched_and_complex_ops_pass_fd_check() {
        let e = fd_check_op(&[("m", &[5, 6]), ("v", &[5, 2])], 4, |_, pv| {
            sq_sum(pv.get("m")?.batched_matvec(pv.get("v")?, 3)?)
        });
        assert!(e < 1e-6, "batched_matvec {e}");
        let idx = Rc::new(vec![2, 0, 2, 1, 1]);
        let e = fd_check_op(&[("m", &[3, 6]), ("v", &[5, 2])], 11, |_, pv| {
            sq_sum(pv.get("m")?.gather_matvec(pv.get("v")?, idx.clone(), 3)?)
        });
        assert!(e < 1e-6, "gather_matvec {e}");
        let e = fd_check_op(&[("a", &[3, 2, 2]), ("b", &[3, 2, 2])], 5, |_, pv| {
            sq_sum(pv.get("a")?.complex_mul(pv.get("b")?)?)
        });
        assert!(e < 1e-6, "complex_mul {e}");
        let e = fd_check_op(&[("w", &[3, 2, 4, 2]), ("f", &[3, 4, 2])], 6, |_, pv| {
            sq_sum(pv.get("w")?.mode_mix(pv.get("f")?)?)
        });
        assert!(e < 1e-6, "mode_mix {e}");
    }

    #[test]
    fn fourier_ops_pass_fd_check() {
        let freqs = Rc::new(vec![0, 1, -1, 2]);
        let e = fd_check_op(&[("a", &[6, 2])], 7, |_, pv| {
            sq_sum(pv.get("a")?.dft_modes(freqs.clone())?)
        });
        assert!(e < 1e-6, "dft {e}");
        let e = fd_check_op(&[("g", &[4, 2, 2])], 8, |_, pv| {
            sq_sum(pv.get("g")?.idft_modes_real(freqs.clone(), 6)?)
        });
        assert!(e < 1e-6, "idft {e}");
    }

    #[test]
    fn pointwise_ops_pass_fd_check() {
        let e = fd_check_op(&[("a", &[4, 3])], 9, |t, pv| {
            let a = pv.get("a")?;
            let pos = a
                .mul(a)?
                .add(t.constant(Tensor::new(vec![4, 3], vec![1.0; 12]).unwrap()))?;
            sq_sum(pos.sqrt().scale(0.7).sub(a.tanh_act())?.reshape(&[12])?)
        });
        assert!(e < 1e-6, "pointwise {e}");
    }

    #[test]
    fn sum_of_losses_gives_sum_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("w", rand_tensor(&mut rng, &[3, 3])).unwrap();
        let x = rand_tensor(&mut rng, &[2, 3]);
        let grad = |which: u8| {
            let t = Tape::new();
            let pv = t.params(&store);
            let h = t.constant(x.clone()).matmul(pv.get("w").unwrap()).unwrap();
            let l1 = h.tanh_act().sum();
            let l2 = h.mul(h).unwrap().mean();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => l1.add(l2).unwrap(),
            };
            t.backward(loss).unwrap().remove(0)
        };
        let (g1, g2, g12) = (grad(0), grad(1), grad(2));
        for i in 0..9 {
            assert_abs_diff_eq!(g1.data[i] + g2.data[i], g12.data[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn adam_zero_gradient_and_bounded_steps() {
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let mut st = AdamState::new(&store);
        st.m[0].data = vec![0.5, 0.5];
        let cfg = AdamConfig::default();
        adam_step(&mut store, &[Tensor::zeros(&[2])], &mut st, &cfg).unwrap();
        assert_eq!(st.m[0].data, vec![0.45, 0.45]);

        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::new(vec![1], vec![0.0]).unwrap())
            .unwrap();
        let mut st = AdamState::new(&store);
        let mut prev = 0.0;
        for _ in 0..200 {
            adam_step(
                &mut store,
                &[Tensor::new(vec![1], vec![3.0]).unwrap()],
                &mut st,
                &cfg,
            )
            .unwrap();
            let now = store.get("p").unwrap().data[0];
            assert!((prev - now) <= cfg.lr * (1.0 + 1e-6));
            prev = now;
        }
        assert!(adam_step(&mut store, &[Tensor::zeros(&[3])], &mut st, &cfg).is_err());
    }

    #[test]
    fn adam_decreases_quadratic_bowl() {
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig::default();
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let t = Tape::new();
            let pv = t.params(&store);
            let p = pv.get("p").unwrap();
            let loss = p.mul(p).unwrap().sum();
            assert!(loss.item() < prev);
            prev = loss.item();
            let g = t.backward(loss).unwrap();
            adam_step(&mut store, &g, &mut st, &cfg).unwrap();
        }
    }

    #[test]
    fn checkpoint_json() {
        let mut store = ParamStore::new();
        store
            .insert("lift", Tensor::matrix(1, 2, vec![0.25, -3.0]).unwrap())
            .unwrap();
        store
            .insert("bias", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let json = store.to_json().unwrap();
        assert!(json.contains("\"format_version\":1"));
        let back = ParamStore::from_json(&json).unwrap();
        assert_eq!(back, store);
        assert_eq!(
            back.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
            vec!["lift", "bias"]
        );
        assert!(ParamStore::from_json(
            &json.replace("\"format_version\":1", "\"format_version\":9")
        )
        .is_err());
        assert!(store.insert("lift", Tensor::scalar(1.0)).is_err());
    }
}
