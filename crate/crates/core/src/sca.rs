//! Self-consistent clustering analysis, linear-elastic 1D specialization.
//!
//! Offline: cluster grid points by strain concentration, then integrate the
//! Green's operator against cluster indicators to get the interaction tensor.
//! Online: one dense `K x K` solve per macro strain.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::grid::{Grid1D, ScalarField1D};
use crate::linalg::{DenseMatrix, Lu};
use crate::ls::{green_apply_values, ReferenceMedium, StiffnessField};

/// Assignment of grid points to `k` non-empty clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    grid: Grid1D,
    labels: Vec<usize>,
    k: usize,
    centroids: Vec<f64>,
    volume_fractions: Vec<f64>,
}

impl Clustering {
    /// Builds a clustering from labels, computing centroids (mean member
    /// coordinate) and volume fractions (member count / n).
    pub fn from_labels(grid: Grid1D, labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.len() != grid.n() {
            return invalid(format!(
                "{} labels for a {}-point grid",
                labels.len(),
                grid.n()
            ));
        }
        if k == 0 {
            return invalid("clustering needs at least one cluster");
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0; k];
        for (&l, &x) in labels.iter().zip(grid.points()) {
            if l >= k {
                return invalid(format!("label {l} out of range for {k} clusters"));
            }
            counts[l] += 1;
            sums[l] += x;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return invalid(format!("cluster {empty} is empty"));
        }
        let n = grid.n() as f64;
        let centroids = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s / c as f64)
            .collect();
        let volume_fractions = counts.iter().map(|&c| c as f64 / n).collect();
        Ok(Self {
            grid,
            labels,
            k,
            centroids,
            volume_fractions,
        })
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn volume_fractions(&self) -> &[f64] {
        &self.volume_fractions
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indicator `chi^I` sampled on the grid.
    pub fn indicator(&self, cluster: usize) -> Result<ScalarField1D> {
        if cluster >= self.k {
            return invalid(format!(
                "cluster index {cluster} out of range for {} clusters",
                self.k
            ));
        }
        let values = self
            .labels
            .iter()
            .map(|&l| if l == cluster { 1.0 } else { 0.0 })
            .collect();
        ScalarField1D::new(self.grid.clone(), values)
    }

    /// Volume average of a grid field over each cluster.
    pub fn cluster_average(&self, field: &[f64]) -> Result<Vec<f64>> {
        if field.len() != self.grid.n() {
            return invalid("field length does not match clustering grid");
        }
        let mut sums = vec![0.0; self.k];
        for (&l, &v) in self.labels.iter().zip(field) {
            sums[l] += v;
        }
        Ok(sums
            .iter()
            .zip(self.counts())
            .map(|(s, c)| s / c as f64)
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::json!({
            "labels": self.labels,
            "centroids": self.centroids,
            "volume_fractions": self.volume_fractions,
        }))?)
    }
}

pub fn cluster_indicator(clustering: &Clustering, cluster: usize) -> Result<ScalarField1D> {
    clustering.indicator(cluster)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
}

/// Lloyd iteration with k-means++ seeding on a scalar feature.
///
/// Exact distance ties go to the lowest cluster index. Empty clusters are
/// refilled by splitting the largest cluster at its median feature. Labels are
/// renumbered by first appearance along the grid.
pub fn kmeans(
    features: &ScalarField1D,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Clustering> {
    kmeans_with(features, k, seed, max_iter, Exec::default())
}

pub fn kmeans_with(
    features: &ScalarField1D,
    k: usize,
    seed: u64,
    max_iter: usize,
    exec: Exec,
) -> Result<Clustering> {
    let labels = kmeans_labels(features.values(), k, seed, max_iter, exec)?;
    Clustering::from_labels(features.grid().clone(), labels, k)
}

fn kmeans_labels(
    x: &[f64],
    k: usize,
    seed: u64,
    max_iter: usize,
    exec: Exec,
) -> Result<Vec<usize>> {
    let n = x.len();
    if k == 0 || max_iter == 0 {
        return invalid("k-means needs k >= 1 and max_iter >= 1");
    }
    if k > n {
        return invalid(format!("k = {k} exceeds the number of points {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(x, k, &mut rng);
    let mut labels = assign(x, &centers, exec);
    for _ in 0..max_iter {
        repair_empty(x, &mut labels, k);
        centers = update_centers(x, &labels, k);
        let next = assign(x, &centers, exec);
        if next == labels {
            break;
        }
        labels = next;
    }
    repair_empty(x, &mut labels, k);
    Ok(canonical_relabel(&labels, k))
}

fn plus_plus_init(x: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = x.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(x[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = x.iter().map(|&v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // roundoff can leave target just above the running sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        let c = x[idx];
        centers.push(c);
        for (d, &v) in d2.iter_mut().zip(x) {
            *d = d.min((v - c).powi(2));
        }
    }
    centers
}

fn nearest(v: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = (v - centers[0]).abs();
    for (j, &c) in centers.iter().enumerate().skip(1) {
        let d = (v - c).abs();
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

const ASSIGN_CHUNK: usize = 1024;

fn assign(x: &[f64], centers: &[f64], exec: Exec) -> Vec<usize> {
    let mut labels = vec![0usize; x.len()];
    exec.for_each_chunk_mut(&mut labels, ASSIGN_CHUNK, |ci, out| {
        let start = ci * ASSIGN_CHUNK;
        for (o, &v) in out.iter_mut().zip(&x[start..]) {
            *o = nearest(v, centers);
        }
    });
    labels
}

fn update_centers(x: &[f64], labels: &[usize], k: usize) -> Vec<f64> {
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&l, &v) in labels.iter().zip(x) {
        sums[l] += v;
        counts[l] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect()
}

fn repair_empty(x: &[f64], labels: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k)
            .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
            .unwrap();
        let mut members: Vec<usize> = (0..x.len()).filter(|&i| labels[i] == largest).collect();
        members.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
        let half = members.len() / 2;
        for &i in &members[half..] {
            labels[i] = empty;
        }
    }
}

fn canonical_relabel(labels: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &l in labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    labels.iter().map(|&l| map[l]).collect()
}

/// Independent k-means on `x <= split` and `x > split`, merged with the right
/// side's labels offset by `k_left`.
pub fn composite_clustering(
    grid: &Grid1D,
    split: f64,
    k_left: usize,
    k_right: usize,
    features: &ScalarField1D,
    seed: u64,
) -> Result<Clustering> {
    let d = grid.domain();
    if !(split > d.a() && split < d.b()) {
        return invalid(format!(
            "split {split} must lie strictly inside [{}, {}]",
            d.a(),
            d.b()
        ));
    }
    if k_left == 0 || k_right == 0 {
        return invalid("both sides need at least one cluster");
    }
    if features.grid().n() != grid.n() {
        return invalid("feature field does not match grid");
    }
    let (left, right): (Vec<usize>, Vec<usize>) =
        (0..grid.n()).partition(|&i| grid.points()[i] <= split);
    if left.len() < k_left || right.len() < k_right {
        return invalid(format!(
            "sides have {} and {} points for {k_left} and {k_right} clusters",
            left.len(),
            right.len()
        ));
    }
    let fv = features.values();
    let lx: Vec<f64> = left.iter().map(|&i| fv[i]).collect();
    let rx: Vec<f64> = right.iter().map(|&i| fv[i]).collect();
    let ll = kmeans_labels(&lx, k_left, seed, DEFAULT_KMEANS_ITER, Exec::default())?;
    let rl = kmeans_labels(
        &rx,
        k_right,
        seed.wrapping_add(1),
        DEFAULT_KMEANS_ITER,
        Exec::default(),
    )?;
    let mut labels = vec![0usize; grid.n()];
    for (&i, &l) in left.iter().zip(&ll) {
        labels[i] = l;
    }
    for (&i, &l) in right.iter().zip(&rl) {
        labels[i] = k_left + l;
    }
    Clustering::from_labels(grid.clone(), labels, k_left + k_right)
}

pub const DEFAULT_KMEANS_ITER: usize = 300;

/// Cluster interaction tensor `D^{IJ}`, row-major `K x K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionTensor {
    pub d: DenseMatrix,
    pub c0: f64,
}

impl InteractionTensor {
    pub fn k(&self) -> usize {
        self.d.rows()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.k() {
            let row: Vec<String> = self.d.row(i).iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `D^{IJ} = 1/(c^I |Omega|) sum_{x in I} dx Gamma[chi^J](x)`.
pub fn interaction_tensor(
    clustering: &Clustering,
    reference: &ReferenceMedium,
) -> InteractionTensor {
    interaction_tensor_with(clustering, reference, Exec::default())
}

pub fn interaction_tensor_with(
    clustering: &Clustering,
    reference: &ReferenceMedium,
    exec: Exec,
) -> InteractionTensor {
    let k = clustering.k();
    let grid = clustering.grid();
    let dx = grid.dx();
    let len = grid.domain().length();
    let labels = clustering.labels();
    let fractions = clustering.volume_fractions();
    let columns: Vec<Vec<f64>> = exec.map_range(k, |j| {
        let chi: Vec<f64> = labels
            .iter()
            .map(|&l| if l == j { 1.0 } else { 0.0 })
            .collect();
        let g = green_apply_values(&chi, reference.c0);
        let mut col = vec![0.0; k];
        for (&l, &gv) in labels.iter().zip(&g) {
            col[l] += dx * gv;
        }
        col.iter()
            .zip(fractions)
            .map(|(s, c)| s / (c * len))
            .collect()
    });
    let d = DenseMatrix::from_fn(k, k, |i, j| columns[j][i]);
    InteractionTensor {
        d,
        c0: reference.c0,
    }
}

/// Per-cluster strains from the online stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSolution {
    pub eps: Vec<f64>,
    pub eps_macro: f64,
}

impl ClusterSolution {
    pub fn k(&self) -> usize {
        self.eps.len()
    }
}

/// Volume average of `C` over each cluster.
pub fn cluster_stiffness(clustering: &Clustering, c: &StiffnessField) -> Result<Vec<f64>> {
    clustering.cluster_average(c.values())
}

/// Solves `(I + D diag(C^J - C0)) eps = eps_macro 1`.
pub fn solve_clustered(
    d: &InteractionTensor,
    c_cluster: &[f64],
    eps_macro: f64,
) -> Result<ClusterSolution> {
    let k = d.k();
    if c_cluster.len() != k {
        return invalid(format!(
            "{} cluster stiffnesses for {k} clusters",
            c_cluster.len()
        ));
    }
    if c_cluster.iter().any(|&c| !(c > 0.0)) {
        return invalid("cluster stiffness must be positive");
    }
    let m = DenseMatrix::from_fn(k, k, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id + d.d[(i, j)] * (c_cluster[j] - d.c0)
    });
    let lu = Lu::factor(&m, 1e-13).map_err(|e| match e {
        Error::NumericalFailure { condition, .. } => Error::NumericalFailure {
            reason: "clustered Lippmann-Schwinger system is singular".into(),
            condition,
        },
        other => other,
    })?;
    let eps = lu.solve(&vec![eps_macro; k])?;
    Ok(ClusterSolution { eps, eps_macro })
}

/// Grid field equal to `eps^I` on every point of cluster `I`.
pub fn reconstruct_field(clustering: &Clustering, sol: &ClusterSolution) -> Result<ScalarField1D> {
    if sol.k() != clustering.k() {
        return invalid(format!(
            "solution has {} clusters, clustering {}",
            sol.k(),
            clustering.k()
        ));
    }
    let values = clustering.labels().iter().map(|&l| sol.eps[l]).collect();
    ScalarField1D::new(clustering.grid().clone(), values)
}

/// Offline products for one stiffness field and cluster count.
#[derive(Debug, Clone)]
pub struct ScaOffline {
    pub clustering: Clustering,
    pub interaction: InteractionTensor,
    pub cluster_stiffness: Vec<f64>,
}

impl ScaOffline {
    pub fn from_clustering(
        clustering: Clustering,
        c: &StiffnessField,
        reference: &ReferenceMedium,
    ) -> Result<Self> {
        let interaction = interaction_tensor(&clustering, reference);
        let cluster_stiffness = cluster_stiffness(&clustering, c)?;
        Ok(Self {
            clustering,
            interaction,
            cluster_stiffness,
        })
    }

    /// Strain concentration, k-means, interaction tensor.
    pub fn build(
        c: &StiffnessField,
        reference: &ReferenceMedium,
        kmeans_cfg: KMeansConfig,
        tol: f64,
    ) -> Result<Self> {
        let a = crate::ls::strain_concentration(c, reference, tol)?;
        let clustering = kmeans(&a, kmeans_cfg.k, kmeans_cfg.seed, kmeans_cfg.max_iter)?;
        Self::from_clustering(clustering, c, reference)
    }

    pub fn solve(&self, eps_macro: f64) -> Result<ClusterSolution> {
        solve_clustered(&self.interaction, &self.cluster_stiffness, eps_macro)
    }
}
