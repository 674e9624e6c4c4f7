//! Graph kernel network on cluster centroids.
//!
//! Nodes are cluster centroids with features `(s, eps0)`, where `s` is the
//! centroid position normalized to `[0, 1]` over the domain. One layer is
//!
//! ```text
//! v' = sigma(W v + b + sum_{y in N(x)} w_xy kappa(e(x, y)) v(y))
//! ```
//!
//! with `w_xy = 1/|N(x)|` for exact aggregation. The kernel MLP `kappa` maps
//! edge features to an `n_v x n_v` matrix. Its last layer is linear, so the
//! message `kappa(e) v(y)` is evaluated as `U(y) h(e) + B v(y)` where `h(e)`
//! is the last hidden activation and `U(y)` depends only on the source node.
//! This keeps the per-edge cost at `n_v * hidden` instead of `n_v^2 * hidden`.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_raw, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::grid::{relative_l2, Domain1D};
use crate::sca::ScaOffline;
use crate::train::{fit, relative_loss, EpochRecord, TrainConfig};

/// Arrangement of the edge attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeFeatureMode {
    /// `(s_x, s_y, eps0)`
    Raw,
    /// `(s_x - s_y, eps0)`
    #[default]
    Difference,
}

impl EdgeFeatureMode {
    pub fn dim(self) -> usize {
        match self {
            EdgeFeatureMode::Raw => 3,
            EdgeFeatureMode::Difference => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn apply<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => v.tanh_act(),
            Activation::Relu => v.relu_act(),
            Activation::Identity => v,
        }
    }

    pub(crate) fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

pub const NODE_FEATURES: usize = 2;

/// Radius graph over centroids. Edges are grouped by destination node; within
/// a group sources are ordered by coordinate, so relabeling nodes does not
/// change the summation order.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidGraph {
    domain: Domain1D,
    centroids: Vec<f64>,
    eps_macro: f64,
    radius: f64,
    mode: EdgeFeatureMode,
    src: Vec<usize>,
    dst: Vec<usize>,
    offsets: Vec<usize>,
}

impl CentroidGraph {
    pub fn domain(&self) -> Domain1D {
        self.domain
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn eps_macro(&self) -> f64 {
        self.eps_macro
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn mode(&self) -> EdgeFeatureMode {
        self.mode
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// `(dst, src)` pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dst.iter().copied().zip(self.src.iter().copied())
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.src[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn has_edge(&self, dst: usize, src: usize) -> bool {
        self.neighbors(dst).contains(&src)
    }

    fn normalized(&self, i: usize) -> f64 {
        self.domain.normalize(self.centroids[i])
    }

    /// `K x 2` matrix of `(s, eps0)`.
    pub fn node_features(&self) -> Tensor {
        let data = (0..self.k())
            .flat_map(|i| [self.normalized(i), self.eps_macro])
            .collect();
        Tensor::matrix(self.k(), NODE_FEATURES, data).expect("node feature shape")
    }

    /// Edge attribute vector for the edge into `dst` from `src`.
    pub fn edge_feature(&self, dst: usize, src: usize) -> Vec<f64> {
        let (sx, sy) = (self.normalized(dst), self.normalized(src));
        match self.mode {
            EdgeFeatureMode::Raw => vec![sx, sy, self.eps_macro],
            EdgeFeatureMode::Difference => vec![sx - sy, self.eps_macro],
        }
    }

    /// Graph with the same nodes in the order `perm` (new node `i` is old node `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.k()];
        for &p in perm {
            if p >= self.k() || std::mem::replace(&mut seen[p], true) {
                return invalid("permutation is not a bijection on the nodes");
            }
        }
        if perm.len() != self.k() {
            return invalid("permutation length differs from node count");
        }
        let centroids: Vec<f64> = perm.iter().map(|&p| self.centroids[p]).collect();
        build_graph(
            self.domain,
            &centroids,
            self.eps_macro,
            self.radius,
            self.mode,
        )
    }
}

/// Nodes `I`, `J` are joined when `|x_I - x_J| <= r (b - a)`; self-loops are always present.
pub fn build_graph(
    domain: Domain1D,
    centroids: &[f64],
    eps_macro: f64,
    r: f64,
    mode: EdgeFeatureMode,
) -> Result<CentroidGraph> {
    if centroids.is_empty() {
        return invalid("centroid list is empty");
    }
    if !(r > 0.0 && r <= 1.0) {
        return invalid(format!("relative radius must lie in (0, 1], got {r}"));
    }
    if !eps_macro.is_finite() {
        return invalid("macroscopic strain must be finite");
    }
    if let Some(&x) = centroids.iter().find(|&&x| !domain.contains(x)) {
        return Err(Error::OutOfDomain {
            x,
            a: domain.a(),
            b: domain.b(),
        });
    }
    let k = centroids.len();
    let cutoff = r * domain.length();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| centroids[i].total_cmp(&centroids[j]).then(i.cmp(&j)));
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut offsets = Vec::with_capacity(k + 1);
    offsets.push(0);
    for i in 0..k {
        for &j in &order {
            if i == j || (centroids[i] - centroids[j]).abs() <= cutoff {
                dst.push(i);
                src.push(j);
            }
        }
        offsets.push(src.len());
    }
    Ok(CentroidGraph {
        domain,
        centroids: centroids.to_vec(),
        eps_macro,
        radius: r,
        mode,
        src,
        dst,
        offsets,
    })
}

/// Which edges each node aggregates over, with their weights. Entries are
/// grouped by destination node.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationPlan {
    src: Rc<Vec<usize>>,
    dst: Rc<Vec<usize>>,
    weights: Rc<Vec<f64>>,
    offsets: Vec<usize>,
}

impl AggregationPlan {
    /// Mean over the full neighborhood.
    pub fn exact(graph: &CentroidGraph) -> Self {
        let weights = (0..graph.k())
            .flat_map(|i| {
                let d = graph.degree(i);
                std::iter::repeat_n(1.0 / d as f64, d)
            })
            .collect();
        Self {
            src: Rc::new(graph.src.clone()),
            dst: Rc::new(graph.dst.clone()),
            weights: Rc::new(weights),
            offsets: graph.offsets.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dst(&self) -> &[usize] {
        &self.dst
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Nystrom plan: each node averages over `s` independent draws of `min(m, deg)`
/// neighbors sampled without replacement. `m = K, s = 1` reproduces
/// [`AggregationPlan::exact`].
pub fn nystrom_subsample(
    graph: &CentroidGraph,
    m: usize,
    s: usize,
    seed: u64,
) -> Result<AggregationPlan> {
    if m == 0 || m > graph.k() {
        return invalid(format!(
            "sample size m = {m} must lie in [1, K = {}]",
            graph.k()
        ));
    }
    if s == 0 {
        return invalid("need at least one repeat");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut src, mut dst, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    let mut offsets = vec![0];
    for i in 0..graph.k() {
        let nb = graph.neighbors(i);
        let take = m.min(nb.len());
        let w = 1.0 / (s * take) as f64;
        for _ in 0..s {
            let mut picked = sample(&mut rng, nb.len(), take).into_vec();
            picked.sort_unstable();
            for p in picked {
                src.push(nb[p]);
                dst.push(i);
                weights.push(w);
            }
        }
        offsets.push(src.len());
    }
    Ok(AggregationPlan {
        src: Rc::new(src),
        dst: Rc::new(dst),
        weights: Rc::new(weights),
        offsets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GknConfig {
    pub n_v: usize,
    pub layers: usize,
    pub kappa_hidden: Vec<usize>,
    pub activation: Activation,
    pub edge_mode: EdgeFeatureMode,
    pub radius: f64,
}

impl Default for GknConfig {
    fn default() -> Self {
        Self {
            n_v: 16,
            layers: 4,
            kappa_hidden: vec![64, 64],
            activation: Activation::Tanh,
            edge_mode: EdgeFeatureMode::Difference,
            radius: 0.5,
        }
    }
}

impl GknConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_v == 0 {
            return invalid("n_v must be positive");
        }
        if self.layers == 0 {
            return invalid("need at least one message-passing layer");
        }
        if self.kappa_hidden.is_empty() || self.kappa_hidden.contains(&0) {
            return invalid("kernel network needs at least one hidden layer of positive width");
        }
        if !(self.radius > 0.0 && self.radius <= 1.0) {
            return invalid(format!(
                "relative radius must lie in (0, 1], got {}",
                self.radius
            ));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter, in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let nv = self.n_v;
        let mut out = vec![("lift".to_string(), vec![NODE_FEATURES, nv])];
        let mut fan_in = self.edge_mode.dim();
        for (i, &w) in self.kappa_hidden.iter().enumerate() {
            out.push((format!("kappa.w{i}"), vec![fan_in, w]));
            out.push((format!("kappa.b{i}"), vec![w]));
            fan_in = w;
        }
        out.push(("kappa.w_out".into(), vec![fan_in, nv * nv]));
        out.push(("kappa.b_out".into(), vec![nv * nv]));
        for t in 0..self.layers {
            out.push((format!("layer{t}.w"), vec![nv, nv]));
            out.push((format!("layer{t}.b"), vec![nv]));
        }
        out.push(("proj".into(), vec![nv, 1]));
        out
    }

    fn hidden_out(&self) -> usize {
        *self.kappa_hidden.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GknModel {
    config: GknConfig,
    params: ParamStore,
    // flat-index permutations of kappa.w_out / kappa.b_out for the factorized message
    out_perm: Rc<Vec<usize>>,
    bias_perm: Rc<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct GknFile {
    kind: String,
    architecture: GknConfig,
    checkpoint: serde_json::Value,
}

impl GknModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: GknConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let len = shape.iter().product();
            let data = if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..len).map(|_| rng.random_range(-a..a)).collect()
            } else {
                vec![0.0; len]
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: GknConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return invalid(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            ));
        }
        let mut ordered = ParamStore::new();
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            if shape.as_slice() != t.shape() {
                return invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ));
            }
            ordered.insert(name.clone(), t.clone())?;
        }
        let params = ordered;
        let (nv, h) = (config.n_v, config.hidden_out());
        // U[b][a*h + j] = w_out[j][a*nv + b]
        let mut out_perm = vec![0; nv * nv * h];
        for b in 0..nv {
            for a in 0..nv {
                for j in 0..h {
                    out_perm[b * nv * h + a * h + j] = j * nv * nv + a * nv + b;
                }
            }
        }
        // B[b][a] = b_out[a*nv + b]
        let mut bias_perm = vec![0; nv * nv];
        for b in 0..nv {
            for a in 0..nv {
                bias_perm[b * nv + a] = a * nv + b;
            }
        }
        Ok(Self {
            config,
            params,
            out_perm: Rc::new(out_perm),
            bias_perm: Rc::new(bias_perm),
        })
    }

    pub fn config(&self) -> &GknConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn graph(
        &self,
        domain: Domain1D,
        centroids: &[f64],
        eps_macro: f64,
    ) -> Result<CentroidGraph> {
        build_graph(
            domain,
            centroids,
            eps_macro,
            self.config.radius,
            self.config.edge_mode,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&GknFile {
            kind: "gkn".into(),
            architecture: self.config.clone(),
            checkpoint: self.params.to_value()?,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: GknFile = serde_json::from_str(s)?;
        if f.kind != "gkn" {
            return invalid(format!("checkpoint holds a {} model, not gkn", f.kind));
        }
        Self::from_parts(f.architecture, ParamStore::from_value(f.checkpoint)?)
    }

    fn check_graph(&self, graph: &CentroidGraph) -> Result<()> {
        if graph.mode() != self.config.edge_mode {
            return invalid(format!(
                "graph uses {:?} edge features, model expects {:?}",
                graph.mode(),
                self.config.edge_mode
            ));
        }
        Ok(())
    }
}

/// Edge attributes for every plan entry.
fn plan_edge_features(graph: &CentroidGraph, plan: &AggregationPlan) -> Tensor {
    let ne = graph.mode().dim();
    let data = plan
        .dst
        .iter()
        .zip(plan.src.iter())
        .flat_map(|(&d, &s)| graph.edge_feature(d, s))
        .collect();
    Tensor::matrix(plan.len(), ne, data).expect("edge feature shape")
}

/// Recorded forward pass; returns the `K x 1` prediction.
pub fn gkn_forward_recorded<'t>(
    model: &GknModel,
    pv: &ParamVars<'t>,
    tape: &'t Tape,
    graph: &CentroidGraph,
    plan: &AggregationPlan,
) -> Result<Var<'t>> {
    model.check_graph(graph)?;
    if plan.num_nodes() != graph.k() || plan.src.iter().any(|&s| s >= graph.k()) {
        return invalid("aggregation plan does not belong to this graph");
    }
    let cfg = &model.config;
    let (nv, k, h) = (cfg.n_v, graph.k(), cfg.hidden_out());
    let mut v = tape
        .constant(graph.node_features())
        .matmul(pv.get("lift")?)?;
    let mut e = tape.constant(plan_edge_features(graph, plan));
    for i in 0..cfg.kappa_hidden.len() {
        e = e
            .matmul(pv.get(&format!("kappa.w{i}"))?)?
            .add_row(pv.get(&format!("kappa.b{i}"))?)?
            .tanh_act();
    }
    let w_out = pv
        .get("kappa.w_out")?
        .take(model.out_perm.clone(), &[nv, nv * h])?;
    let b_out = pv
        .get("kappa.b_out")?
        .take(model.bias_perm.clone(), &[nv, nv])?;
    for t in 0..cfg.layers {
        let u = v.matmul(w_out)?;
        let bias = v.matmul(b_out)?.gather_rows(plan.src.clone())?;
        let msg = u.gather_matvec(e, plan.src.clone(), nv)?.add(bias)?;
        let agg = msg.scatter_rows(plan.dst.clone(), plan.weights.clone(), k)?;
        let local = v
            .matmul(pv.get(&format!("layer{t}.w"))?)?
            .add_row(pv.get(&format!("layer{t}.b"))?)?;
        v = cfg.activation.apply(local.add(agg)?);
    }
    v.matmul(pv.get("proj")?)
}

/// Exact-aggregation prediction of the cluster strains.
pub fn gkn_forward(model: &GknModel, graph: &CentroidGraph) -> Result<Vec<f64>> {
    predict_with(
        model,
        graph,
        &AggregationPlan::exact(graph),
        Exec::default(),
    )
}

fn row_matmul(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), rows * k);
    matmul_raw(x, w.data(), rows, k, n)
}

fn permuted(t: &Tensor, perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&i| t.data()[i]).collect()
}

const EDGE_CHUNK: usize = 2048;

/// Tape-free forward pass with the same arithmetic as the recorded one.
/// Memory is `O(E * hidden)`; work is split over nodes and edge chunks.
pub fn predict_with(
    model: &GknModel,
    graph: &CentroidGraph,
    plan: &AggregationPlan,
    exec: Exec,
) -> Result<Vec<f64>> {
    model.check_graph(graph)?;
    if plan.num_nodes() != graph.k() {
        return invalid("aggregation plan does not belong to this graph");
    }
    let cfg = &model.config;
    let p = &model.params;
    let get = |n: &str| {
        p.get(n)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {n}")))
    };
    let (nv, k, h) = (cfg.n_v, graph.k(), cfg.hidden_out());
    let edges = plan_edge_features(graph, plan);
    let ne = graph.mode().dim();
    let n_edges = plan.len();
    let (src, weights, offsets) = (
        plan.src.as_slice(),
        plan.weights.as_slice(),
        plan.offsets.as_slice(),
    );
    let n_chunks = n_edges.div_ceil(EDGE_CHUNK);
    let hidden_chunks: Vec<Vec<f64>> = exec.map_range(n_chunks, |c| {
        let lo = c * EDGE_CHUNK;
        let hi = (lo + EDGE_CHUNK).min(n_edges);
        let mut x = edges.data()[lo * ne..hi * ne].to_vec();
        for i in 0..cfg.kappa_hidden.len() {
            let w = p.get(&format!("kappa.w{i}")).expect("validated");
            let b = p.get(&format!("kappa.b{i}")).expect("validated");
            x = row_matmul(&x, hi - lo, w);
            for row in x.chunks_mut(b.len()) {
                row.iter_mut()
                    .zip(b.data())
                    .for_each(|(v, bb)| *v = (*v + bb).tanh());
            }
        }
        x
    });
    let hidden: Vec<f64> = hidden_chunks.concat();
    let w_out = permuted(get("kappa.w_out")?, &model.out_perm);
    let b_out = permuted(get("kappa.b_out")?, &model.bias_perm);
    let mut v = row_matmul(graph.node_features().data(), k, get("lift")?);
    for t in 0..cfg.layers {
        let u = matmul_raw(&v, &w_out, k, nv, nv * h);
        let bias = matmul_raw(&v, &b_out, k, nv, nv);
        let local = row_matmul(&v, k, get(&format!("layer{t}.w"))?);
        let b = get(&format!("layer{t}.b"))?.data();
        let rows: Vec<Vec<f64>> = exec.map_range(k, |i| {
            let mut agg = vec![0.0; nv];
            let mut msg = vec![0.0; nv];
            for e in offsets[i]..offsets[i + 1] {
                let s = src[e];
                let w = weights[e];
                let he = &hidden[e * h..(e + 1) * h];
                let us = &u[s * nv * h..(s + 1) * nv * h];
                for a in 0..nv {
                    msg[a] = us[a * h..(a + 1) * h]
                        .iter()
                        .zip(he)
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
                        + bias[s * nv + a];
                }
                agg.iter_mut().zip(&msg).for_each(|(g, m)| *g += w * m);
            }
            (0..nv)
                .map(|a| cfg.activation.eval((local[i * nv + a] + b[a]) + agg[a]))
                .collect()
        });
        v = rows.concat();
    }
    Ok(row_matmul(&v, k, get("proj")?))
}

/// First-layer neighborhood aggregation `sum_y w_xy kappa(e(x, y)) v_0(y)` under
/// `plan`, as a `K x n_v` row-major matrix. Used to compare plans.
pub fn aggregate_messages(
    model: &GknModel,
    graph: &CentroidGraph,
    plan: &AggregationPlan,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let pv = tape.params(&model.params);
    model.check_graph(graph)?;
    let cfg = &model.config;
    let (nv, h) = (cfg.n_v, cfg.hidden_out());
    let v = tape
        .constant(graph.node_features())
        .matmul(pv.get("lift")?)?;
    let mut e = tape.constant(plan_edge_features(graph, plan));
    for i in 0..cfg.kappa_hidden.len() {
        e = e
            .matmul(pv.get(&format!("kappa.w{i}"))?)?
            .add_row(pv.get(&format!("kappa.b{i}"))?)?
            .tanh_act();
    }
    let w_out = pv
        .get("kappa.w_out")?
        .take(model.out_perm.clone(), &[nv, nv * h])?;
    let b_out = pv
        .get("kappa.b_out")?
        .take(model.bias_perm.clone(), &[nv, nv])?;
    let u = v.matmul(w_out)?;
    let bias = v.matmul(b_out)?.gather_rows(plan.src.clone())?;
    let msg = u.gather_matvec(e, plan.src.clone(), nv)?.add(bias)?;
    let agg = msg.scatter_rows(plan.dst.clone(), plan.weights.clone(), graph.k())?;
    Ok(agg.value().data().to_vec())
}

/// Cluster strains for one clustering and applied strain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub domain: Domain1D,
    pub centroids: Vec<f64>,
    pub eps_macro: f64,
    pub target: Vec<f64>,
}

impl TrainingSample {
    pub fn new(
        domain: Domain1D,
        centroids: Vec<f64>,
        eps_macro: f64,
        target: Vec<f64>,
    ) -> Result<Self> {
        if centroids.is_empty() || centroids.len() != target.len() {
            return invalid(format!(
                "{} centroids with {} targets",
                centroids.len(),
                target.len()
            ));
        }
        if !target.iter().chain(&centroids).all(|v| v.is_finite()) || !eps_macro.is_finite() {
            return invalid("sample values must be finite");
        }
        Ok(Self {
            domain,
            centroids,
            eps_macro,
            target,
        })
    }

    /// Solves the clustered system at `eps_macro`.
    pub fn from_sca(offline: &ScaOffline, eps_macro: f64) -> Result<Self> {
        let sol = offline.solve(eps_macro)?;
        Self::new(
            offline.clustering.grid().domain(),
            offline.clustering.centroids().to_vec(),
            eps_macro,
            sol.eps,
        )
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

struct Prepared {
    graph: CentroidGraph,
    plan: AggregationPlan,
    target: Vec<f64>,
    target_norm: f64,
}

fn prepare(model: &GknModel, samples: &[TrainingSample]) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let graph = model.graph(s.domain, &s.centroids, s.eps_macro)?;
            let target_norm = s.target.iter().map(|v| v * v).sum::<f64>().sqrt();
            if target_norm == 0.0 {
                return invalid("training target has zero norm");
            }
            let plan = AggregationPlan::exact(&graph);
            Ok(Prepared {
                graph,
                plan,
                target: s.target.clone(),
                target_norm,
            })
        })
        .collect()
}

/// Mean relative L2 error of `model` over `samples`.
pub fn mean_relative_error(model: &GknModel, samples: &[TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return invalid("no samples");
    }
    let mut total = 0.0;
    for s in samples {
        let g = model.graph(s.domain, &s.centroids, s.eps_macro)?;
        total += evaluate_gkn(model, &g, &s.target)?;
    }
    Ok(total / samples.len() as f64)
}

/// Adam on the mean relative L2 loss over shuffled mini-batches.
pub fn train_gkn(
    mut model: GknModel,
    train: &[TrainingSample],
    test: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<(GknModel, Vec<EpochRecord>)> {
    let prepared = prepare(&model, train)?;
    let mut params = model.params.clone();
    let history = fit(
        &mut params,
        prepared.len(),
        cfg,
        |tape, pv, i| {
            let p = &prepared[i];
            let pred = gkn_forward_recorded(&model, pv, tape, &p.graph, &p.plan)?;
            relative_loss(tape, pred, &p.target, p.target_norm)
        },
        |params| {
            if test.is_empty() {
                return Ok(None);
            }
            let snapshot = GknModel {
                params: params.clone(),
                ..model.clone()
            };
            mean_relative_error(&snapshot, test).map(Some)
        },
    )?;
    model.params = params;
    Ok((model, history))
}

/// `||pred - reference|| / ||reference||` with exact aggregation.
pub fn evaluate_gkn(model: &GknModel, graph: &CentroidGraph, reference: &[f64]) -> Result<f64> {
    if reference.len() != graph.k() {
        return invalid(format!(
            "{} reference values for {} nodes",
            reference.len(),
            graph.k()
        ));
    }
    if reference.iter().all(|&v| v == 0.0) {
        return invalid("reference has zero norm");
    }
    let pred = gkn_forward(model, graph)?;
    Ok(relative_l2(&pred, reference))
}
