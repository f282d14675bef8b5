//! The training objective and its gradients.
//!
//! The total loss is `λ·L_sc + L_gc + L_cac`:
//!
//! * `L_sc = Tr(Fᵀ L F) = ½ Σ_ij A_ij ‖F_i − F_j‖²` pulls the k smallest
//!   Laplacian eigenvalues of the consensus graph toward 0, which forces the
//!   graph apart into exactly k components.
//! * `L_gc = Σ_leaves [Σ_ij D_ij z̃_ij + ‖z̃‖_F²]` ties each leaf's latent
//!   representation z̃ = (z + zᵀ)/2 to its raw distance information.
//! * `L_cac = Σ_ij D^(c)_ij S^(c)_ij + ‖S^(c)‖_F²` ties the consensus graph
//!   to the agglomerated raw distances (plus `Σ‖b‖_F²` when biases exist).
//!
//! Two operating modes share this machinery. In the plain mode the leaf
//! distance matrices are fixed, computed once from raw features. In the
//! learnable-data-space mode each feature dimension is reparameterized as
//! `tanh(h_j·(X_ij − mean_j))` with trainable scales h, the distances are
//! recomputed every pass, internal nodes gain trainable bias matrices, and
//! gradients flow through the distance computation into h. The k-nearest
//! retention mask is frozen per pass: it is a discrete selector, so freezing
//! it yields a valid subgradient.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{
    activate_matrix, backward_row, ConnectionGraph, RowActivation,
};
use crate::linalg::{ensure_finite, knn_retained, knn_retained_margins, pairwise_distances};
use crate::view::ViewStructure;

/// Which variant of the engine runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fixed leaf distances from raw features.
    Ann,
    /// Learnable data space: trainable feature scales and node biases.
    Annld,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ann" => Ok(Mode::Ann),
            "annld" => Ok(Mode::Annld),
            other => Err(Error::InvalidArgument {
                name: "mode",
                reason: format!("unknown mode `{other}`, expected `ann` or `annld`"),
            }),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Ann => "ann",
            Mode::Annld => "annld",
        })
    }
}

/// All trainable quantities, indexed by leaf slot (`z`, `h`) or internal
/// slot (`w`, `b`) of the view structure.
///
/// `h` and `b` are populated only in [`Mode::Annld`]. Gradient sets reuse
/// this type: every field holds the partial derivative of the total loss
/// with respect to the matching parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    /// Latent affinity representation per leaf, n×n.
    pub z: Vec<Array2<f64>>,
    /// Mixing weights per internal node, one per child.
    pub w: Vec<Vec<f64>>,
    /// Feature scales per leaf, one per feature dimension.
    pub h: Vec<Vec<f64>>,
    /// Bias matrix per internal node, n×n.
    pub b: Vec<Array2<f64>>,
}

/// Gradients have exactly the shapes of the parameters they refer to.
pub type Gradients = ParameterSet;

impl ParameterSet {
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            z: self.z.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
            w: self.w.iter().map(|v| vec![0.0; v.len()]).collect(),
            h: self.h.iter().map(|v| vec![0.0; v.len()]).collect(),
            b: self.b.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
        }
    }

    /// All tensors as flat slices, in a fixed order (z, w, h, b).
    pub(crate) fn flat(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.extend(self.z.iter().map(|m| m.as_slice().expect("standard layout")));
        out.extend(self.w.iter().map(|v| v.as_slice()));
        out.extend(self.h.iter().map(|v| v.as_slice()));
        out.extend(self.b.iter().map(|m| m.as_slice().expect("standard layout")));
        out
    }

    pub(crate) fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(
            self.z
                .iter_mut()
                .map(|m| m.as_slice_mut().expect("standard layout")),
        );
        out.extend(self.w.iter_mut().map(|v| v.as_mut_slice()));
        out.extend(self.h.iter_mut().map(|v| v.as_mut_slice()));
        out.extend(
            self.b
                .iter_mut()
                .map(|m| m.as_slice_mut().expect("standard layout")),
        );
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Loss values of one forward pass. `sc` already includes the λ factor,
/// so `total = sc + gc + cac`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub sc: f64,
    pub gc: f64,
    pub cac: f64,
    pub total: f64,
}

/// Everything one forward pass produces, indexed by node id of the
/// structure that built it.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Connection graph S per node.
    pub node_graphs: Vec<Array2<f64>>,
    /// Agglomerated raw distances D per node; the root entry is D^(c).
    pub node_raw: Vec<Array2<f64>>,
    pub losses: LossBreakdown,
    root: usize,
    /// Pre-activation input per node: z̃ for leaves, the weighted sum for
    /// internal nodes.
    pub(crate) pre_act: Vec<Array2<f64>>,
    pub(crate) acts: Vec<Vec<RowActivation>>,
    /// Smallest sort gap at the kNN retention boundary (∞ when fixed).
    pub(crate) knn_gap: f64,
    /// Smallest retained distance (∞ when fixed).
    pub(crate) min_retained_dist: f64,
}

impl ForwardTrace {
    /// The consensus graph matrix S^(c).
    pub fn consensus(&self) -> &Array2<f64> {
        &self.node_graphs[self.root]
    }

    /// The consensus graph as a checked [`ConnectionGraph`].
    pub fn consensus_graph(&self) -> ConnectionGraph {
        ConnectionGraph::from_weights(self.node_graphs[self.root].clone())
            .expect("activation output satisfies graph invariants")
    }

    pub fn consensus_raw(&self) -> &Array2<f64> {
        &self.node_raw[self.root]
    }

    /// Distance from this evaluation point to the nearest decision boundary
    /// of any activation row (entry signs, minimum location, fallback
    /// argmax, denominator guard) or of the kNN retention. Small margins
    /// mean finite differences of the loss are unreliable here.
    ///
    /// Entries that are exactly zero are treated as pinned: they arise
    /// structurally (zeroed activation outputs mixed upward) and do not
    /// move under parameter perturbations, so they are not near-crossings.
    /// Their upstream causes carry their own margins at the child nodes.
    pub fn branch_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for (pre, acts) in self.pre_act.iter().zip(&self.acts) {
            let n = pre.nrows();
            for i in 0..n {
                let live: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| pre[[i, j]])
                    .collect();
                for &v in &live {
                    if v != 0.0 {
                        margin = margin.min(v.abs());
                    }
                }
                match &acts[i] {
                    RowActivation::Formula { denom, .. } => {
                        margin = margin.min(denom.abs());
                        let mut two_smallest = [f64::INFINITY; 2];
                        for &v in &live {
                            if v < two_smallest[0] {
                                two_smallest[1] = two_smallest[0];
                                two_smallest[0] = v;
                            } else if v < two_smallest[1] {
                                two_smallest[1] = v;
                            }
                        }
                        // The argmin can only migrate between two moving
                        // entries; a pinned zero endpoint is covered by the
                        // sign margin of the other entry.
                        if two_smallest[1].is_finite()
                            && two_smallest[0] != 0.0
                            && two_smallest[1] != 0.0
                        {
                            margin = margin.min(two_smallest[1] - two_smallest[0]);
                        }
                    }
                    RowActivation::Fallback { .. } => {
                        let mut two_largest = [f64::NEG_INFINITY; 2];
                        for &v in &live {
                            if v > two_largest[0] {
                                two_largest[1] = two_largest[0];
                                two_largest[0] = v;
                            } else if v > two_largest[1] {
                                two_largest[1] = v;
                            }
                        }
                        if two_largest[1].is_finite()
                            && two_largest[0] != 0.0
                            && two_largest[1] != 0.0
                        {
                            margin = margin.min(two_largest[0] - two_largest[1]);
                        }
                    }
                    RowActivation::Isolated => {}
                }
            }
        }
        margin.min(self.knn_gap).min(self.min_retained_dist)
    }
}

/// Per-leaf inputs to the graph pipeline for one pass.
pub(crate) struct LeafInputs {
    /// Sparsified distance matrix.
    pub dist: Array2<f64>,
    /// Retained columns per row.
    pub mask: Vec<Vec<usize>>,
    /// Projected features (learnable-space mode).
    pub proj: Option<Array2<f64>>,
    /// Margin data for [`ForwardTrace::branch_margin`].
    pub knn_gap: f64,
    pub min_retained: f64,
}

fn ensure_p(p: f64) -> Result<()> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::InvalidArgument {
            name: "p",
            reason: format!("P = {p} must be finite and > 1"),
        });
    }
    Ok(())
}

fn check_params(
    params: &ParameterSet,
    dataset: &Dataset,
    structure: &ViewStructure,
    mode: Mode,
) -> Result<()> {
    let n = structure.n_samples();
    if dataset.n() != n {
        return Err(Error::ShapeMismatch {
            context: "forward",
            expected: format!("dataset with n = {n}"),
            found: format!("n = {}", dataset.n()),
        });
    }
    let leaves = structure.leaves().len();
    let internals = structure.internals().len();
    if params.z.len() != leaves {
        return Err(Error::ShapeMismatch {
            context: "ParameterSet.z",
            expected: format!("{leaves} matrices"),
            found: format!("{}", params.z.len()),
        });
    }
    for (slot, z) in params.z.iter().enumerate() {
        if z.nrows() != n || z.ncols() != n {
            return Err(Error::ShapeMismatch {
                context: "ParameterSet.z",
                expected: format!("{n}x{n}"),
                found: format!("{}x{} at leaf slot {slot}", z.nrows(), z.ncols()),
            });
        }
        ensure_finite("ParameterSet.z", z)?;
    }
    if params.w.len() != internals {
        return Err(Error::ShapeMismatch {
            context: "ParameterSet.w",
            expected: format!("{internals} weight vectors"),
            found: format!("{}", params.w.len()),
        });
    }
    for (slot, &u) in structure.internals().iter().enumerate() {
        let want = structure.node(u).children.len();
        if params.w[slot].len() != want {
            return Err(Error::ShapeMismatch {
                context: "ParameterSet.w",
                expected: format!("{want} weights at internal slot {slot}"),
                found: format!("{}", params.w[slot].len()),
            });
        }
    }
    if mode == Mode::Annld {
        if params.h.len() != leaves {
            return Err(Error::ShapeMismatch {
                context: "ParameterSet.h",
                expected: format!("{leaves} scale vectors"),
                found: format!("{}", params.h.len()),
            });
        }
        for (slot, &leaf) in structure.leaves().iter().enumerate() {
            let d = dataset
                .view_at(structure.node(leaf).view_index.expect("leaf has view"))
                .1
                .ncols();
            if params.h[slot].len() != d {
                return Err(Error::ShapeMismatch {
                    context: "ParameterSet.h",
                    expected: format!("{d} scales at leaf slot {slot}"),
                    found: format!("{}", params.h[slot].len()),
                });
            }
        }
        if params.b.len() != internals {
            return Err(Error::ShapeMismatch {
                context: "ParameterSet.b",
                expected: format!("{internals} bias matrices"),
                found: format!("{}", params.b.len()),
            });
        }
        for b in &params.b {
            if b.nrows() != n || b.ncols() != n {
                return Err(Error::ShapeMismatch {
                    context: "ParameterSet.b",
                    expected: format!("{n}x{n}"),
                    found: format!("{}x{}", b.nrows(), b.ncols()),
                });
            }
            ensure_finite("ParameterSet.b", b)?;
        }
    }
    Ok(())
}

/// tanh reparameterization of a feature block: X'_ij = tanh(h_j·(X_ij − mean_j)).
pub fn project_data(x: &Array2<f64>, h: &[f64]) -> Result<Array2<f64>> {
    ensure_finite("project_data input", x)?;
    if h.len() != x.ncols() {
        return Err(Error::ShapeMismatch {
            context: "project_data",
            expected: format!("{} scales", x.ncols()),
            found: format!("{}", h.len()),
        });
    }
    let n = x.nrows();
    let means: Vec<f64> = (0..x.ncols())
        .map(|j| x.column(j).sum() / n.max(1) as f64)
        .collect();
    Ok(Array2::from_shape_fn(x.raw_dim(), |(i, j)| {
        (h[j] * (x[[i, j]] - means[j])).tanh()
    }))
}

/// Min gap at the retention boundary and min retained value of one
/// sparsified row set, for branch-margin reporting.
/// Computes the per-leaf distance inputs for one pass.
pub(crate) fn compute_leaf_inputs(
    params: &ParameterSet,
    dataset: &Dataset,
    structure: &ViewStructure,
    mode: Mode,
    r: usize,
) -> Result<Vec<LeafInputs>> {
    let leaves: Vec<usize> = structure.leaves().to_vec();
    leaves
        .par_iter()
        .enumerate()
        .map(|(slot, &leaf)| {
            let view = structure.node(leaf).view_index.expect("leaf has view");
            let x = dataset.view_at(view).1;
            match mode {
                Mode::Ann => {
                    let dense = pairwise_distances(x)?;
                    let (dist, mask) = knn_retained(&dense, r)?;
                    Ok(LeafInputs {
                        dist,
                        mask,
                        proj: None,
                        knn_gap: f64::INFINITY,
                        min_retained: f64::INFINITY,
                    })
                }
                Mode::Annld => {
                    let proj = project_data(x, &params.h[slot])?;
                    let dense = pairwise_distances(&proj)?;
                    let (dist, mask, knn_gap, min_retained) = knn_retained_margins(&dense, r)?;
                    Ok(LeafInputs {
                        dist,
                        mask,
                        proj: Some(proj),
                        knn_gap,
                        min_retained,
                    })
                }
            }
        })
        .collect()
}

/// Averages leaf distance matrices up the tree: every internal node's D is
/// the unweighted mean of its children's. Returns one matrix per node id;
/// the root entry is the consensus D^(c).
pub fn agglomerate_raw(
    d_leaves: &[Array2<f64>],
    structure: &ViewStructure,
) -> Result<Vec<Array2<f64>>> {
    let leaves = structure.leaves();
    if d_leaves.len() != leaves.len() {
        return Err(Error::ShapeMismatch {
            context: "agglomerate_raw",
            expected: format!("{} leaf matrices", leaves.len()),
            found: format!("{}", d_leaves.len()),
        });
    }
    let n = d_leaves.first().map(|m| m.nrows()).unwrap_or(0);
    for d in d_leaves {
        if d.nrows() != n || d.ncols() != n {
            return Err(Error::ShapeMismatch {
                context: "agglomerate_raw",
                expected: format!("{n}x{n}"),
                found: format!("{}x{}", d.nrows(), d.ncols()),
            });
        }
        ensure_finite("agglomerate_raw input", d)?;
    }

    let refs: Vec<&Array2<f64>> = d_leaves.iter().collect();
    Ok(agglomerate_raw_refs(&refs, structure))
}

/// [`agglomerate_raw`] over borrowed leaves, for callers that have already
/// validated their inputs and should not pay for an extra copy.
pub(crate) fn agglomerate_raw_refs(
    d_leaves: &[&Array2<f64>],
    structure: &ViewStructure,
) -> Vec<Array2<f64>> {
    let n = d_leaves.first().map(|m| m.nrows()).unwrap_or(0);
    let mut out: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); structure.node_count()];
    for (slot, &leaf) in structure.leaves().iter().enumerate() {
        out[leaf] = d_leaves[slot].clone();
    }
    for &u in structure.internals() {
        let children = &structure.node(u).children;
        let scale = 1.0 / children.len() as f64;
        let mut acc: Array2<f64> = Array2::zeros((n, n));
        for &c in children {
            acc.scaled_add(scale, &out[c]);
        }
        out[u] = acc;
    }
    out
}

/// Raw-information consistency loss: Σ over leaves of
/// Σ_ij D_ij z̃_ij + ‖z̃‖_F², with z̃ = (z + zᵀ)/2.
pub fn loss_gc(z: &[Array2<f64>], d_leaves: &[Array2<f64>]) -> Result<f64> {
    let refs: Vec<&Array2<f64>> = d_leaves.iter().collect();
    loss_gc_refs(z, &refs)
}

pub(crate) fn loss_gc_refs(z: &[Array2<f64>], d_leaves: &[&Array2<f64>]) -> Result<f64> {
    if z.len() != d_leaves.len() {
        return Err(Error::ShapeMismatch {
            context: "loss_gc",
            expected: format!("{} latent matrices", d_leaves.len()),
            found: format!("{}", z.len()),
        });
    }
    let mut total = 0.0;
    for (zv, dv) in z.iter().zip(d_leaves) {
        if zv.raw_dim() != dv.raw_dim() {
            return Err(Error::ShapeMismatch {
                context: "loss_gc",
                expected: format!("{}x{}", dv.nrows(), dv.ncols()),
                found: format!("{}x{}", zv.nrows(), zv.ncols()),
            });
        }
        let n = zv.nrows();
        let zs = zv.as_slice().expect("standard layout");
        let ds = dv.as_slice().expect("standard layout");
        for i in 0..n {
            for j in 0..n {
                let zt = 0.5 * (zs[i * n + j] + zs[j * n + i]);
                total += ds[i * n + j] * zt + zt * zt;
            }
        }
    }
    Ok(total)
}

/// Squared row differences of F weighted by edges: ‖F_i − F_j‖² per pair.
fn row_diff_sq(f: &Array2<f64>) -> Array2<f64> {
    let n = f.nrows();
    let k = f.ncols();
    let rows = f.as_slice().expect("standard layout");
    let mut out = Array2::zeros((n, n));
    let dst = out.as_slice_mut().expect("standard layout");
    for i in 0..n {
        let fi = &rows[i * k..(i + 1) * k];
        for j in (i + 1)..n {
            let fj = &rows[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for c in 0..k {
                let d = fi[c] - fj[c];
                acc += d * d;
            }
            dst[i * n + j] = acc;
            dst[j * n + i] = acc;
        }
    }
    out
}

/// Rank-pressure loss λ·Tr(Fᵀ L F), evaluated through the quadratic form
/// ½ Σ_ij A_ij ‖F_i − F_j‖² over the symmetrized edges A of S_c.
pub fn loss_sc(f: &Array2<f64>, s_c: &ConnectionGraph, lambda: f64) -> Result<f64> {
    if f.nrows() != s_c.n() {
        return Err(Error::ShapeMismatch {
            context: "loss_sc",
            expected: format!("F with {} rows", s_c.n()),
            found: format!("{}", f.nrows()),
        });
    }
    ensure_finite("loss_sc F", f)?;
    let a = s_c.symmetrized();
    let e = row_diff_sq(f);
    let mut acc = 0.0;
    for (av, ev) in a.iter().zip(e.iter()) {
        acc += av * ev;
    }
    Ok(lambda * 0.5 * acc)
}

/// Consensus-assignment loss: Σ_ij D^(c)_ij S^(c)_ij + ‖S^(c)‖_F², plus the
/// bias penalty Σ_v ‖b^(v)‖_F² when biases are in play.
pub fn loss_cac(s_c: &ConnectionGraph, d_c: &Array2<f64>, b: Option<&[Array2<f64>]>) -> Result<f64> {
    let s = s_c.matrix();
    if d_c.raw_dim() != s.raw_dim() {
        return Err(Error::ShapeMismatch {
            context: "loss_cac",
            expected: format!("{}x{}", s.nrows(), s.ncols()),
            found: format!("{}x{}", d_c.nrows(), d_c.ncols()),
        });
    }
    let mut acc = 0.0;
    for (dv, sv) in d_c.iter().zip(s.iter()) {
        acc += dv * sv + sv * sv;
    }
    if let Some(biases) = b {
        for bm in biases {
            acc += bm.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(acc)
}

fn sym(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let src = m.as_slice().expect("standard layout");
    let mut out = Array2::zeros((n, n));
    let dst = out.as_slice_mut().expect("standard layout");
    for i in 0..n {
        dst[i * n + i] = src[i * n + i];
        for j in (i + 1)..n {
            let v = 0.5 * (src[i * n + j] + src[j * n + i]);
            dst[i * n + j] = v;
            dst[j * n + i] = v;
        }
    }
    out
}

/// Runs the graph pipeline and assembles the losses for one parameter
/// state. `f` is treated as a constant (its update happens elsewhere).
pub fn forward(
    params: &ParameterSet,
    dataset: &Dataset,
    structure: &ViewStructure,
    mode: Mode,
    p: f64,
    lambda: f64,
    f: &Array2<f64>,
    r: usize,
) -> Result<ForwardTrace> {
    let inputs = compute_leaf_inputs(params, dataset, structure, mode, r)?;
    forward_core(params, dataset, structure, mode, p, lambda, f, &inputs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_core(
    params: &ParameterSet,
    dataset: &Dataset,
    structure: &ViewStructure,
    mode: Mode,
    p: f64,
    lambda: f64,
    f: &Array2<f64>,
    inputs: &[LeafInputs],
) -> Result<ForwardTrace> {
    ensure_p(p)?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidArgument {
            name: "lambda",
            reason: format!("λ = {lambda} must be finite and >= 0"),
        });
    }
    check_params(params, dataset, structure, mode)?;
    let n = structure.n_samples();
    if f.nrows() != n || f.ncols() == 0 {
        return Err(Error::ShapeMismatch {
            context: "forward F",
            expected: format!("{n}xk, k >= 1"),
            found: format!("{}x{}", f.nrows(), f.ncols()),
        });
    }
    ensure_finite("forward F", f)?;

    let node_count = structure.node_count();

    // Raw-distance side.
    let d_leaves: Vec<&Array2<f64>> = inputs.iter().map(|li| &li.dist).collect();
    let node_raw = agglomerate_raw_refs(&d_leaves, structure);

    // Graph side: leaves in parallel, then internal layers bottom-up.
    let mut pre_act: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); node_count];
    let mut node_graphs: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); node_count];
    let mut acts: Vec<Vec<RowActivation>> = vec![Vec::new(); node_count];

    let leaf_results: Vec<(Array2<f64>, Array2<f64>, Vec<RowActivation>)> = params
        .z
        .par_iter()
        .map(|z| {
            let m = sym(z);
            let (s, a) = activate_matrix(&m, p);
            (m, s, a)
        })
        .collect();
    for (slot, (m, s, a)) in leaf_results.into_iter().enumerate() {
        let leaf = structure.leaves()[slot];
        pre_act[leaf] = m;
        node_graphs[leaf] = s;
        acts[leaf] = a;
    }

    for (slot, &u) in structure.internals().iter().enumerate() {
        let children = &structure.node(u).children;
        let mut t: Array2<f64> = Array2::zeros((n, n));
        for (ci, &c) in children.iter().enumerate() {
            t.scaled_add(params.w[slot][ci], &node_graphs[c]);
        }
        if mode == Mode::Annld {
            t += &params.b[slot];
        }
        let (s, a) = activate_matrix(&t, p);
        pre_act[u] = t;
        node_graphs[u] = s;
        acts[u] = a;
    }

    let root = structure.root();
    let s_c = &node_graphs[root];
    let d_c = &node_raw[root];

    // Losses.
    let e = row_diff_sq(f);
    let a_c = sym(s_c);
    let mut sc = 0.0;
    for (av, ev) in a_c.iter().zip(e.iter()) {
        sc += av * ev;
    }
    sc *= lambda * 0.5;

    let gc = loss_gc_refs(&params.z, &d_leaves)?;

    let mut cac = 0.0;
    for (dv, sv) in d_c.iter().zip(s_c.iter()) {
        cac += dv * sv + sv * sv;
    }
    if mode == Mode::Annld {
        for bm in &params.b {
            cac += bm.iter().map(|v| v * v).sum::<f64>();
        }
    }

    let losses = LossBreakdown {
        sc,
        gc,
        cac,
        total: sc + gc + cac,
    };

    Ok(ForwardTrace {
        node_graphs,
        node_raw,
        losses,
        root,
        pre_act,
        acts,
        knn_gap: inputs.iter().map(|li| li.knn_gap).fold(f64::INFINITY, f64::min),
        min_retained_dist: inputs
            .iter()
            .map(|li| li.min_retained)
            .fold(f64::INFINITY, f64::min),
    })
}

fn backward_matrix(
    p: f64,
    acts: &[RowActivation],
    y: &Array2<f64>,
    g_out: &Array2<f64>,
) -> Array2<f64> {
    let n = y.nrows();
    let mut g_in = Array2::zeros((n, n));
    for i in 0..n {
        backward_row(
            p,
            &acts[i],
            y.row(i).as_slice().expect("row is contiguous"),
            g_out.row(i).as_slice().expect("row is contiguous"),
            g_in.row_mut(i).as_slice_mut().expect("row is contiguous"),
        );
    }
    g_in
}

/// Gradients of the total loss with respect to every parameter, with F held
/// constant. Runs its own forward pass; use [`forward_with_gradients`] when
/// the trace is also needed.
#[allow(clippy::too_many_arguments)]
pub fn gradients(
    params: &ParameterSet,
    dataset: &Dataset,
    structure: &ViewStructure,
    mode: Mode,
    p: f64,
    lambda: f64,
    f: &Array2<f64>,
    r: usize,
) -> Result<Gradients> {
    Ok(forward_with_gradients(params, dataset, structure, mode, p, lambda, f, r)?.1)
}

/// One forward pass plus the full gradient set for it.
#[allow(clippy::too_many_arguments)]
pub fn forward_with_gradients(
    params: &ParameterSet,
    dataset: &Dataset,
    structure: &ViewStructure,
    mode: Mode,
    p: f64,
    lambda: f64,
    f: &Array2<f64>,
    r: usize,
) -> Result<(ForwardTrace, Gradients)> {
    let inputs = compute_leaf_inputs(params, dataset, structure, mode, r)?;
    forward_with_gradients_core(params, dataset, structure, mode, p, lambda, f, &inputs)
}

/// Same as [`forward_with_gradients`] but over precomputed leaf inputs, so
/// the trainer can reuse fixed-mode distances across iterations.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_with_gradients_core(
    params: &ParameterSet,
    dataset: &Dataset,
    structure: &ViewStructure,
    mode: Mode,
    p: f64,
    lambda: f64,
    f: &Array2<f64>,
    inputs: &[LeafInputs],
) -> Result<(ForwardTrace, Gradients)> {
    let trace = forward_core(params, dataset, structure, mode, p, lambda, f, inputs)?;
    let grads = backward_core(params, dataset, structure, mode, p, lambda, f, inputs, &trace)?;
    Ok((trace, grads))
}

#[allow(clippy::too_many_arguments)]
fn backward_core(
    params: &ParameterSet,
    dataset: &Dataset,
    structure: &ViewStructure,
    mode: Mode,
    p: f64,
    lambda: f64,
    f: &Array2<f64>,
    inputs: &[LeafInputs],
    trace: &ForwardTrace,
) -> Result<Gradients> {
    let n = structure.n_samples();
    let root = structure.root();
    let s_c = &trace.node_graphs[root];
    let d_c = &trace.node_raw[root];

    let mut grads = params.zeros_like();

    // Seed at the consensus: ∂L/∂S^(c) = λ/2·E + D^(c) + 2·S^(c).
    let e = row_diff_sq(f);
    let mut g_nodes: Vec<Array2<f64>> = vec![Array2::zeros((n, n)); structure.node_count()];
    {
        let g_root = &mut g_nodes[root];
        for i in 0..n {
            let er = e.row(i);
            let er = er.as_slice().expect("row is contiguous");
            let dr = d_c.row(i);
            let dr = dr.as_slice().expect("row is contiguous");
            let sr = s_c.row(i);
            let sr = sr.as_slice().expect("row is contiguous");
            let mut gr = g_root.row_mut(i);
            let gr = gr.as_slice_mut().expect("row is contiguous");
            for j in 0..n {
                gr[j] = 0.5 * lambda * er[j] + dr[j] + 2.0 * sr[j];
            }
        }
    }

    // Internal nodes top-down: push through each activation, split between
    // mixing weights, biases, and child graphs.
    for (slot, &u) in structure.internals().iter().enumerate().rev() {
        let g_t = backward_matrix(p, &trace.acts[u], &trace.node_graphs[u], &g_nodes[u]);
        let children = structure.node(u).children.clone();
        for (ci, &c) in children.iter().enumerate() {
            let mut gw = 0.0;
            for (gt, sv) in g_t.iter().zip(trace.node_graphs[c].iter()) {
                gw += gt * sv;
            }
            grads.w[slot][ci] = gw;
            g_nodes[c].scaled_add(params.w[slot][ci], &g_t);
        }
        if mode == Mode::Annld {
            let mut gb = g_t.clone();
            gb.scaled_add(2.0, &params.b[slot]);
            grads.b[slot] = gb;
        }
    }

    // Leaves: activation backward plus the direct L_gc term, then (in the
    // learnable mode) the distance chain into the feature scales.
    let omega = structure.leaf_mix_weights();
    let leaf_list: Vec<(usize, usize)> = structure
        .leaves()
        .iter()
        .copied()
        .enumerate()
        .collect();

    let leaf_grads: Vec<(Array2<f64>, Option<Vec<f64>>)> = leaf_list
        .par_iter()
        .map(|&(slot, leaf)| {
            let g_m = backward_matrix(p, &trace.acts[leaf], &trace.node_graphs[leaf], &g_nodes[leaf]);
            let zt = &trace.pre_act[leaf];
            let dv = &inputs[slot].dist;
            // ∂L/∂z_ab = sym(g_m + D + 2z̃)_ab; the result is symmetric, so
            // fill the triangle and mirror.
            let mut g_z = Array2::zeros((n, n));
            {
                let gm_s = g_m.as_slice().expect("standard layout");
                let dv_s = dv.as_slice().expect("standard layout");
                let zt_s = zt.as_slice().expect("standard layout");
                let gz_s = g_z.as_slice_mut().expect("standard layout");
                for a in 0..n {
                    gz_s[a * n + a] = gm_s[a * n + a] + dv_s[a * n + a] + 2.0 * zt_s[a * n + a];
                    for b in (a + 1)..n {
                        let up_ab = gm_s[a * n + b] + dv_s[a * n + b] + 2.0 * zt_s[a * n + b];
                        let up_ba = gm_s[b * n + a] + dv_s[b * n + a] + 2.0 * zt_s[b * n + a];
                        let v = 0.5 * (up_ab + up_ba);
                        gz_s[a * n + b] = v;
                        gz_s[b * n + a] = v;
                    }
                }
            }

            let g_h = if mode == Mode::Annld {
                let proj = inputs[slot].proj.as_ref().expect("projection stored");
                let view = structure.node(leaf).view_index.expect("leaf has view");
                let x = dataset.view_at(view).1;
                let d = x.ncols();
                let means: Vec<f64> = (0..d)
                    .map(|j| x.column(j).sum() / n.max(1) as f64)
                    .collect();

                // ∂L/∂D_ij on retained entries: z̃_ij from L_gc plus the
                // leaf's share of the consensus term of L_cac.
                let mut g_x: Array2<f64> = Array2::zeros((n, d));
                for (i, cols) in inputs[slot].mask.iter().enumerate() {
                    for &j in cols {
                        let dist = dv[[i, j]];
                        if dist <= 1e-12 {
                            continue;
                        }
                        let g_d = zt[[i, j]] + omega[slot] * s_c[[i, j]];
                        let coef = g_d / dist;
                        for c in 0..d {
                            let delta = proj[[i, c]] - proj[[j, c]];
                            g_x[[i, c]] += coef * delta;
                            g_x[[j, c]] -= coef * delta;
                        }
                    }
                }
                let mut g_h = vec![0.0; d];
                for i in 0..n {
                    for c in 0..d {
                        let t = proj[[i, c]];
                        g_h[c] += g_x[[i, c]] * (1.0 - t * t) * (x[[i, c]] - means[c]);
                    }
                }
                Some(g_h)
            } else {
                None
            };
            (g_z, g_h)
        })
        .collect();

    for (slot, (g_z, g_h)) in leaf_grads.into_iter().enumerate() {
        grads.z[slot] = g_z;
        if let Some(gh) = g_h {
            grads.h[slot] = gh;
        }
    }

    debug_assert!(grads.is_finite());
    Ok(grads)
}

/// Builds the canonical starting parameters for a structure.
///
/// z starts as a symmetric nearest-neighbor affinity: on retained kNN
/// entries, the row's largest retained distance minus the entry's distance
/// (closer neighbors get larger affinity), zero elsewhere. Mixing weights
/// start uniform at 1/|children|; feature scales start at 1 and biases at 0
/// in the learnable mode.
pub fn init_params(
    dataset: &Dataset,
    structure: &ViewStructure,
    mode: Mode,
    r: usize,
) -> Result<ParameterSet> {
    let n = structure.n_samples();
    let leaves = structure.leaves();

    let mut h: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<Array2<f64>> = Vec::new();
    if mode == Mode::Annld {
        for &leaf in leaves {
            let view = structure.node(leaf).view_index.expect("leaf has view");
            h.push(vec![1.0; dataset.view_at(view).1.ncols()]);
        }
        for _ in structure.internals() {
            b.push(Array2::zeros((n, n)));
        }
    }

    let probe = ParameterSet {
        z: vec![Array2::zeros((n, n)); leaves.len()],
        w: Vec::new(),
        h: h.clone(),
        b: Vec::new(),
    };
    let inputs = compute_leaf_inputs(&probe, dataset, structure, mode, r)?;

    let mut z: Vec<Array2<f64>> = Vec::with_capacity(leaves.len());
    for li in &inputs {
        let mut z0: Array2<f64> = Array2::zeros((n, n));
        for (i, cols) in li.mask.iter().enumerate() {
            let row_max = cols
                .iter()
                .map(|&j| li.dist[[i, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            for &j in cols {
                z0[[i, j]] = row_max - li.dist[[i, j]];
            }
        }
        z.push(sym(&z0));
    }

    let w: Vec<Vec<f64>> = structure
        .internals()
        .iter()
        .map(|&u| {
            let c = structure.node(u).children.len();
            vec![1.0 / c as f64; c]
        })
        .collect();

    Ok(ParameterSet { z, w, h, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{connected_components, laplacian};
    use crate::linalg::sym_eigs_smallest;
    use crate::view::StructureSpec;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn toy_dataset(names: &[&str], n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let views = names
            .iter()
            .map(|&name| {
                (
                    name.to_string(),
                    Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0)),
                )
            })
            .collect();
        Dataset::new(views, None).unwrap()
    }

    fn nested_structure(ds: &Dataset) -> ViewStructure {
        use crate::view::NodeSpec;
        let spec = StructureSpec {
            nodes: vec![
                NodeSpec {
                    id: "v1".into(),
                    layer: 0,
                    children: vec![],
                    data: Some("v1".into()),
                },
                NodeSpec {
                    id: "v2".into(),
                    layer: 0,
                    children: vec![],
                    data: Some("v2".into()),
                },
                NodeSpec {
                    id: "v3".into(),
                    layer: 0,
                    children: vec![],
                    data: Some("v3".into()),
                },
                NodeSpec {
                    id: "A".into(),
                    layer: 1,
                    children: vec!["v1".into(), "v2".into()],
                    data: None,
                },
                NodeSpec {
                    id: "B".into(),
                    layer: 1,
                    children: vec!["v3".into()],
                    data: None,
                },
                NodeSpec {
                    id: "root".into(),
                    layer: 2,
                    children: vec!["A".into(), "B".into()],
                    data: None,
                },
            ],
        };
        spec.validate(ds).unwrap()
    }

    fn random_sym_dist(n: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
        let mut d = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.random_range(0.1..3.0);
                d[[i, j]] = v;
                d[[j, i]] = v;
            }
        }
        d
    }

    #[test]
    fn agglomerate_raw_single_leaf() {
        let ds = toy_dataset(&["v1"], 4, 2, 1);
        let vs = StructureSpec::flat(&["v1"]).validate(&ds).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let d = random_sym_dist(4, &mut rng);
        let out = agglomerate_raw(std::slice::from_ref(&d), &vs).unwrap();
        assert_eq!(out[vs.root()], d);
    }

    #[test]
    fn agglomerate_raw_flat_pair_is_mean() {
        let ds = toy_dataset(&["v1", "v2"], 4, 2, 3);
        let vs = StructureSpec::flat(&["v1", "v2"]).validate(&ds).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let d1 = random_sym_dist(4, &mut rng);
        let d2 = random_sym_dist(4, &mut rng);
        let out = agglomerate_raw(&[d1.clone(), d2.clone()], &vs).unwrap();
        let want = 0.5 * (&d1 + &d2);
        let diff = (&out[vs.root()] - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-15);
    }

    #[test]
    fn agglomerate_raw_two_layer_weights() {
        let ds = toy_dataset(&["v1", "v2", "v3"], 5, 2, 5);
        let vs = nested_structure(&ds);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let d1 = random_sym_dist(5, &mut rng);
        let d2 = random_sym_dist(5, &mut rng);
        let d3 = random_sym_dist(5, &mut rng);
        let out = agglomerate_raw(&[d1.clone(), d2.clone(), d3.clone()], &vs).unwrap();
        let want = 0.25 * &d1 + 0.25 * &d2 + 0.5 * &d3;
        let diff = (&out[vs.root()] - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-15);

        // Same telescoped weights as the structure reports.
        assert_eq!(vs.leaf_mix_weights(), vec![0.25, 0.25, 0.5]);
    }

    #[test]
    fn agglomerate_raw_rejects_mismatch() {
        let ds = toy_dataset(&["v1", "v2"], 4, 2, 7);
        let vs = StructureSpec::flat(&["v1", "v2"]).validate(&ds).unwrap();
        let d = Array2::zeros((4, 4));
        assert!(agglomerate_raw(std::slice::from_ref(&d), &vs).is_err());
    }

    #[test]
    fn project_data_basics() {
        let x = array![[1.0, 5.0], [0.0, 5.0]];
        // Zero scales flatten everything.
        let p0 = project_data(&x, &[0.0, 0.0]).unwrap();
        assert!(p0.iter().all(|&v| v == 0.0));
        // Constant columns are zero after centering regardless of scale.
        let p1 = project_data(&x, &[1.0, 3.7]).unwrap();
        assert_eq!(p1[[0, 1]], 0.0);
        assert_eq!(p1[[1, 1]], 0.0);
        // Deviation 0.5 at unit scale.
        assert!((p1[[0, 0]] - 0.4621).abs() < 5e-5);
        assert!((p1[[0, 0]] - 0.5f64.tanh()).abs() < 1e-15);

        assert!(project_data(&x, &[1.0]).is_err());
    }

    #[test]
    fn loss_gc_examples() {
        let d = array![[0.0, 1.0], [1.0, 0.0]];
        let z0 = Array2::zeros((2, 2));
        assert_eq!(loss_gc(&[z0], &[d.clone()]).unwrap(), 0.0);

        // Unconstrained minimum at z̃ = −D/2.
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let dr = random_sym_dist(5, &mut rng);
        let zmin = dr.mapv(|v| -0.5 * v);
        let norm_sq: f64 = dr.iter().map(|v| v * v).sum();
        let got = loss_gc(&[zmin], &[dr]).unwrap();
        assert!((got + 0.25 * norm_sq).abs() < 1e-12);

        // Asymmetric z symmetrizes before the products.
        let z = array![[0.0, 2.0], [0.0, 0.0]];
        assert_eq!(loss_gc(&[z], &[d]).unwrap(), 4.0);
    }

    #[test]
    fn loss_sc_examples() {
        // Constant vector: all row differences vanish.
        let n = 6;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    w[[i, j]] = rng.random_range(0.0..1.0);
                }
            }
        }
        let s = ConnectionGraph::from_weights(w).unwrap();
        let f_const = Array2::from_elem((n, 1), 1.0 / (n as f64).sqrt());
        assert!(loss_sc(&f_const, &s, 3.0).unwrap().abs() < 1e-12);

        // Block-diagonal graph with indicator eigenvectors: exactly zero.
        let s2 = ConnectionGraph::from_weights(array![
            [0.0, 0.9, 0.0, 0.0],
            [0.9, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.4],
            [0.0, 0.0, 0.4, 0.0]
        ])
        .unwrap();
        let inv = 1.0 / 2.0f64.sqrt();
        let f_ind = array![[inv, 0.0], [inv, 0.0], [0.0, inv], [0.0, inv]];
        assert_eq!(loss_sc(&f_ind, &s2, 100.0).unwrap(), 0.0);

        // Eigenvector F reproduces λ times the smallest eigenvalue sum.
        let k = 3;
        let lambda = 4.5;
        let l = laplacian(&s);
        let eig = sym_eigs_smallest(&l, k).unwrap();
        let want = lambda * eig.values.iter().sum::<f64>();
        let got = loss_sc(&eig.vectors, &s, lambda).unwrap();
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        assert!(got >= -1e-9);
    }

    #[test]
    fn loss_cac_examples() {
        let zero = ConnectionGraph::from_weights(Array2::zeros((2, 2))).unwrap();
        let d0 = Array2::zeros((2, 2));
        assert_eq!(loss_cac(&zero, &d0, None).unwrap(), 0.0);

        let ones = Array2::from_elem((2, 2), 1.0);
        assert_eq!(loss_cac(&zero, &d0, Some(&[ones])).unwrap(), 4.0);

        let s = ConnectionGraph::from_weights(array![[0.0, 0.5], [0.5, 0.0]]).unwrap();
        let d = array![[0.0, 2.0], [2.0, 0.0]];
        assert_eq!(loss_cac(&s, &d, None).unwrap(), 2.5);
    }

    fn default_f(
        params: &ParameterSet,
        ds: &Dataset,
        vs: &ViewStructure,
        mode: Mode,
        p: f64,
        r: usize,
        k: usize,
    ) -> Array2<f64> {
        let n = vs.n_samples();
        let f0 = Array2::zeros((n, 1));
        let t = forward(params, ds, vs, mode, p, 0.0, &f0, r)
            .map_err(|e| panic!("probe forward failed: {e}"))
            .unwrap();
        let l = laplacian(&t.consensus_graph());
        sym_eigs_smallest(&l, k).unwrap().vectors
    }

    #[test]
    fn forward_composes_losses_and_is_deterministic() {
        let ds = toy_dataset(&["v1", "v2", "v3"], 7, 3, 11);
        let vs = nested_structure(&ds);
        let params = init_params(&ds, &vs, Mode::Ann, 3).unwrap();
        let f = default_f(&params, &ds, &vs, Mode::Ann, 1.5, 3, 2);

        let t1 = forward(&params, &ds, &vs, Mode::Ann, 1.5, 7.0, &f, 3).unwrap();
        let t2 = forward(&params, &ds, &vs, Mode::Ann, 1.5, 7.0, &f, 3).unwrap();
        assert_eq!(t1.losses, t2.losses);
        assert_eq!(t1.node_graphs, t2.node_graphs);

        // Breakdown reassembles from the public loss operations.
        let d_leaves: Vec<Array2<f64>> = vs
            .leaves()
            .iter()
            .map(|&leaf| t1.node_raw[leaf].clone())
            .collect();
        let gc = loss_gc(&params.z, &d_leaves).unwrap();
        let sc = loss_sc(&f, &t1.consensus_graph(), 7.0).unwrap();
        let cac = loss_cac(&t1.consensus_graph(), t1.consensus_raw(), None).unwrap();
        assert!((t1.losses.gc - gc).abs() < 1e-12);
        assert!((t1.losses.sc - sc).abs() < 1e-12);
        assert!((t1.losses.cac - cac).abs() < 1e-12);
        assert!((t1.losses.total - (sc + gc + cac)).abs() < 1e-12);

        // Raw side matches the nested averaging weights.
        let want = 0.25 * &d_leaves[0] + 0.25 * &d_leaves[1] + 0.5 * &d_leaves[2];
        let diff = (t1.consensus_raw() - &want)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-15);
    }

    #[test]
    fn forward_is_identical_across_thread_counts() {
        let ds = toy_dataset(&["v1", "v2", "v3"], 8, 3, 13);
        let vs = StructureSpec::flat(&["v1", "v2", "v3"]).validate(&ds).unwrap();
        let params = init_params(&ds, &vs, Mode::Annld, 3).unwrap();
        let f = default_f(&params, &ds, &vs, Mode::Annld, 1.2, 3, 2);

        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| forward(&params, &ds, &vs, Mode::Annld, 1.2, 5.0, &f, 3).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.node_graphs, b.node_graphs);
    }

    #[test]
    fn zero_bias_learnable_mode_matches_plain_graphs() {
        let ds = toy_dataset(&["v1", "v2"], 6, 3, 17);
        let vs = StructureSpec::flat(&["v1", "v2"]).validate(&ds).unwrap();
        let ann = init_params(&ds, &vs, Mode::Ann, 2).unwrap();
        let mut ld = init_params(&ds, &vs, Mode::Annld, 2).unwrap();
        // Same latents and mixing weights; biases stay zero.
        ld.z = ann.z.clone();
        ld.w = ann.w.clone();
        let f = default_f(&ann, &ds, &vs, Mode::Ann, 1.4, 2, 2);

        let ta = forward(&ann, &ds, &vs, Mode::Ann, 1.4, 3.0, &f, 2).unwrap();
        let tl = forward(&ld, &ds, &vs, Mode::Annld, 1.4, 3.0, &f, 2).unwrap();
        // Graphs depend only on Z, W, B — identical with B = 0, even though
        // the distance side differs.
        assert_eq!(ta.consensus(), tl.consensus());
    }

    #[test]
    fn init_builds_connected_affinity() {
        let ds = toy_dataset(&["v1", "v2"], 9, 3, 19);
        let vs = StructureSpec::flat(&["v1", "v2"]).validate(&ds).unwrap();
        let params = init_params(&ds, &vs, Mode::Ann, 3).unwrap();
        for z in &params.z {
            // Symmetric with zero diagonal.
            for i in 0..9 {
                assert_eq!(z[[i, i]], 0.0);
                for j in 0..9 {
                    assert_eq!(z[[i, j]], z[[j, i]]);
                }
            }
        }
        assert_eq!(params.w, vec![vec![0.5, 0.5]]);
        assert!(params.h.is_empty());
        assert!(params.b.is_empty());

        let ld = init_params(&ds, &vs, Mode::Annld, 3).unwrap();
        assert_eq!(ld.h, vec![vec![1.0; 3]; 2]);
        assert_eq!(ld.b.len(), 1);

        // The initial consensus graph has positive rows.
        let f = default_f(&params, &ds, &vs, Mode::Ann, 1.5, 3, 2);
        let t = forward(&params, &ds, &vs, Mode::Ann, 1.5, 15.0, &f, 3).unwrap();
        assert!(t.consensus_graph().isolated_rows().is_empty());
        let (count, _) = connected_components(&t.consensus_graph());
        assert!(count >= 1);
    }

    #[test]
    fn sc_gradient_wrt_edges_is_half_lambda_row_diff() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let n = 5;
        let k = 2;
        let lambda = 3.0;
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    w[[i, j]] = rng.random_range(0.1..1.0);
                }
            }
        }
        let f = Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0));
        let e = row_diff_sq(&f);
        let h = 1e-6;
        for &(i, j) in &[(0usize, 1usize), (2, 4), (3, 0)] {
            let mut wp = w.clone();
            wp[[i, j]] += h;
            let mut wm = w.clone();
            wm[[i, j]] -= h;
            let lp = loss_sc(&f, &ConnectionGraph::from_weights(wp).unwrap(), lambda).unwrap();
            let lm = loss_sc(&f, &ConnectionGraph::from_weights(wm).unwrap(), lambda).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let analytic = 0.5 * lambda * e[[i, j]];
            assert!(
                (fd - analytic).abs() < 1e-6 * (1.0 + analytic.abs()),
                "edge ({i},{j}): {fd} vs {analytic}"
            );
            assert!(analytic >= 0.0);
        }
    }

    // Finite-difference validation of the full gradient set.

    struct Instance {
        ds: Dataset,
        vs: ViewStructure,
        params: ParameterSet,
        p: f64,
        lambda: f64,
        f: Array2<f64>,
        r: usize,
    }

    fn random_instance(mode: Mode, seed: u64) -> Instance {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = rng.random_range(6..=9);
        let n_leaves = rng.random_range(2..=4);
        let two_layers = rng.random_bool(0.5) && n_leaves >= 3;
        let d = rng.random_range(2..=4);
        let r = rng.random_range(2..=3.min(n - 1));

        let names: Vec<String> = (0..n_leaves).map(|i| format!("v{i}")).collect();
        let views = names
            .iter()
            .map(|name| {
                (
                    name.clone(),
                    Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0)),
                )
            })
            .collect();
        let ds = Dataset::new(views, None).unwrap();
        let spec = if two_layers {
            let split = rng.random_range(1..n_leaves);
            let g0: Vec<String> = names[..split].to_vec();
            let g1: Vec<String> = names[split..].to_vec();
            StructureSpec::two_layer(&[("g0".to_string(), g0), ("g1".to_string(), g1)])
        } else {
            StructureSpec::flat(&names)
        };
        let vs = spec.validate(&ds).unwrap();

        let mut params = init_params(&ds, &vs, mode, r).unwrap();
        for z in &mut params.z {
            for v in z.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        for w in &mut params.w {
            for v in w.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        for h in &mut params.h {
            for v in h.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        for b in &mut params.b {
            for v in b.iter_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }

        let p = rng.random_range(1.1..2.0);
        let lambda = rng.random_range(1.0..10.0);
        let k = rng.random_range(2..=3);
        let f = default_f(&params, &ds, &vs, mode, p, r, k);
        Instance {
            ds,
            vs,
            params,
            p,
            lambda,
            f,
            r,
        }
    }

    fn fd_check(mode: Mode, base_seed: u64) {
        // Resample until the evaluation point sits clear of every
        // activation branch boundary; finite differences are meaningless
        // across the jumps.
        let mut inst = None;
        for attempt in 0..50 {
            let cand = random_instance(mode, base_seed * 1000 + attempt);
            let trace = forward(
                &cand.params,
                &cand.ds,
                &cand.vs,
                mode,
                cand.p,
                cand.lambda,
                &cand.f,
                cand.r,
            )
            .unwrap();
            if trace.branch_margin() > 1e-3 {
                inst = Some(cand);
                break;
            }
        }
        let inst = inst.expect("found a well-separated evaluation point");

        let analytic = gradients(
            &inst.params,
            &inst.ds,
            &inst.vs,
            mode,
            inst.p,
            inst.lambda,
            &inst.f,
            inst.r,
        )
        .unwrap();
        assert!(analytic.is_finite());

        let eval = |params: &ParameterSet| -> f64 {
            forward(
                params,
                &inst.ds,
                &inst.vs,
                mode,
                inst.p,
                inst.lambda,
                &inst.f,
                inst.r,
            )
            .unwrap()
            .losses
            .total
        };

        let h = 1e-5;
        let mut checked = 0usize;
        let names = ["z", "w", "h", "b"];
        let counts = [
            inst.params.z.len(),
            inst.params.w.len(),
            inst.params.h.len(),
            inst.params.b.len(),
        ];
        let flat_a = analytic.flat();
        let mut tensor_idx = 0;
        for (group, &count) in names.iter().zip(&counts) {
            for slot in 0..count {
                let len = flat_a[tensor_idx].len();
                for idx in 0..len {
                    let mut plus = inst.params.clone();
                    plus.flat_mut()[tensor_idx][idx] += h;
                    let mut minus = inst.params.clone();
                    minus.flat_mut()[tensor_idx][idx] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let a = flat_a[tensor_idx][idx];
                    let ok = (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs())
                        || (a - fd).abs() <= 1e-7;
                    assert!(
                        ok,
                        "mode {mode}, seed {base_seed}: {group}[{slot}][{idx}] analytic {a} vs fd {fd}"
                    );
                    checked += 1;
                }
                tensor_idx += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn gradients_match_finite_differences_plain() {
        for seed in 0..20 {
            fd_check(Mode::Ann, seed);
        }
    }

    #[test]
    fn gradients_match_finite_differences_learnable() {
        for seed in 0..20 {
            fd_check(Mode::Annld, seed);
        }
    }
}
