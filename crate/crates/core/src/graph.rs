//! Connection graphs and the operations that build them.
//!
//! A connection graph is an n×n nonnegative affinity matrix with a zero
//! diagonal. Rows are produced by the activation C: given a row x and a
//! shape parameter P > 1, entries x_i <= 0 deactivate to 0, and entries
//! x_i > 0 map to
//!
//! ```text
//! y_i = (P·x_i − x_min) / (P·(Σ_{j ∈ x+} x_j − x_min))
//! ```
//!
//! where x_min is the minimum over all live entries and x+ the strictly
//! positive ones. The map keeps outputs in [0, 1], preserves the order of
//! positive entries, and — because x_min is subtracted on top — never lets
//! the weakest surviving edge reach exactly 0. When a row has no positive
//! entry (or the denominator degenerates), the maximal entry receives weight
//! 1 instead, so every point keeps its last edge.
//!
//! Agglomeration fuses child graphs by a weighted sum (plus an optional
//! bias), re-activated row by row. The diagonal is excluded from activation
//! throughout via an index mask, which acts like a minus-infinity sentinel:
//! it never joins x+, never supplies x_min, never wins the fallback, and
//! receives no gradient.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, ensure_square};

/// Edges weaker than this (after symmetrization) are treated as absent.
pub const EDGE_EPS: f64 = 1e-12;

/// Denominators smaller than this trigger the last-edge fallback.
const DENOM_EPS: f64 = 1e-12;

/// Nonnegative affinity matrix with zero diagonal.
///
/// The matrix need not be symmetric; consumers that require symmetry
/// (Laplacian, components, export) use [`ConnectionGraph::symmetrized`].
/// Rows without a single positive entry are reported by
/// [`ConnectionGraph::isolated_rows`] rather than rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionGraph {
    weights: Array2<f64>,
}

impl ConnectionGraph {
    /// Wraps an existing matrix, checking the invariants.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        ensure_square("ConnectionGraph", &weights)?;
        ensure_finite("ConnectionGraph", &weights)?;
        for ((i, j), &v) in weights.indexed_iter() {
            if v < 0.0 {
                return Err(Error::InvalidArgument {
                    name: "weights",
                    reason: format!("negative edge weight {v} at ({i}, {j})"),
                });
            }
            if i == j && v != 0.0 {
                return Err(Error::InvalidArgument {
                    name: "weights",
                    reason: format!("nonzero diagonal entry {v} at ({i}, {i})"),
                });
            }
        }
        Ok(ConnectionGraph { weights })
    }

    /// Wraps activation output, whose invariants hold by construction.
    pub(crate) fn from_activated(weights: Array2<f64>) -> Self {
        debug_assert!(weights.indexed_iter().all(|((i, j), &v)| {
            v >= 0.0 && (i != j || v == 0.0)
        }));
        ConnectionGraph { weights }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.weights
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    /// Rows with no strictly positive entry.
    pub fn isolated_rows(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| !self.weights.row(i).iter().any(|&v| v > 0.0))
            .collect()
    }

    /// A = (S + Sᵀ)/2.
    pub fn symmetrized(&self) -> Array2<f64> {
        let n = self.n();
        Array2::from_shape_fn((n, n), |(i, j)| {
            0.5 * (self.weights[[i, j]] + self.weights[[j, i]])
        })
    }
}

/// How the activation resolved one row; enough to replay the forward pass
/// and to push gradients back through it.
#[derive(Debug, Clone)]
pub(crate) enum RowActivation {
    /// The rescaling formula applied to `pos` with minimum at `min_idx`.
    Formula {
        pos: Vec<usize>,
        min_idx: usize,
        denom: f64,
    },
    /// No usable positives: the edge at `edge` gets weight 1.
    Fallback { edge: usize },
    /// No live entries at all (single-vertex graph); row stays zero.
    Isolated,
}

/// Classifies a row. `skip` marks the masked (diagonal) index.
pub(crate) fn analyze_row(x: &[f64], p: f64, skip: Option<usize>) -> RowActivation {
    let live = |j: usize| skip != Some(j);

    let mut min_idx = None;
    let mut pos: Vec<usize> = Vec::new();
    let mut pos_sum = 0.0;
    for (j, &v) in x.iter().enumerate() {
        if !live(j) {
            continue;
        }
        min_idx = match min_idx {
            None => Some(j),
            Some(m) if v < x[m] => Some(j),
            keep => keep,
        };
        if v > 0.0 {
            pos.push(j);
            pos_sum += v;
        }
    }

    let Some(min_idx) = min_idx else {
        return RowActivation::Isolated;
    };

    if pos.is_empty() {
        return RowActivation::Fallback {
            edge: argmax_live(x, skip),
        };
    }
    let denom = p * (pos_sum - x[min_idx]);
    if denom.abs() < DENOM_EPS {
        return RowActivation::Fallback {
            edge: argmax_live(x, skip),
        };
    }
    RowActivation::Formula {
        pos,
        min_idx,
        denom,
    }
}

/// Index of the maximal live entry, ties toward the lower index.
fn argmax_live(x: &[f64], skip: Option<usize>) -> usize {
    let mut best = None;
    for (j, &v) in x.iter().enumerate() {
        if skip == Some(j) {
            continue;
        }
        best = match best {
            None => Some(j),
            Some(b) if v > x[b] => Some(j),
            keep => keep,
        };
    }
    best.expect("row has at least one live entry")
}

/// Evaluates the activation for a classified row into `out`.
pub(crate) fn apply_row(x: &[f64], p: f64, act: &RowActivation, out: &mut [f64]) {
    out.fill(0.0);
    match act {
        RowActivation::Isolated => {}
        RowActivation::Fallback { edge } => out[*edge] = 1.0,
        RowActivation::Formula {
            pos,
            min_idx,
            denom,
        } => {
            let x_min = x[*min_idx];
            for &j in pos {
                out[j] = ((p * x[j] - x_min) / denom).max(0.0);
            }
        }
    }
}

/// Pushes `g_out = ∂L/∂y` back to `g_in = ∂L/∂x` for one activated row.
///
/// Fallback and isolated rows are locally constant, so they transmit
/// nothing; likewise the membership of `pos` and the location of the
/// minimum are frozen selectors (the subgradient at their switch points
/// is taken as 0).
pub(crate) fn backward_row(
    p: f64,
    act: &RowActivation,
    y: &[f64],
    g_out: &[f64],
    g_in: &mut [f64],
) {
    g_in.fill(0.0);
    let RowActivation::Formula {
        pos,
        min_idx,
        denom,
    } = act
    else {
        return;
    };
    let mut g_sum = 0.0;
    let mut gy_sum = 0.0;
    for &i in pos {
        g_sum += g_out[i];
        gy_sum += g_out[i] * y[i];
    }
    for &j in pos {
        g_in[j] = (p * g_out[j] - p * gy_sum) / denom;
    }
    // The minimum entry also moves the numerators and the denominator.
    g_in[*min_idx] += (-g_sum + p * gy_sum) / denom;
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

/// Activates a single free-standing row (no masked index).
pub fn activation_row(x: &[f64], p: f64) -> Result<Vec<f64>> {
    ensure_p(p)?;
    for (j, &v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "activation_row input",
                row: 0,
                col: j,
            });
        }
    }
    let act = analyze_row(x, p, None);
    let mut out = vec![0.0; x.len()];
    apply_row(x, p, &act, &mut out);
    Ok(out)
}

/// Activates every row of `t` with the diagonal masked out.
pub(crate) fn activate_matrix(t: &Array2<f64>, p: f64) -> (Array2<f64>, Vec<RowActivation>) {
    let n = t.nrows();
    let mut out = Array2::zeros((n, n));
    let mut acts = Vec::with_capacity(n);
    for i in 0..n {
        let x = t.row(i);
        let x = x.as_slice().expect("row is contiguous");
        let act = analyze_row(x, p, Some(i));
        apply_row(
            x,
            p,
            &act,
            out.row_mut(i).as_slice_mut().expect("row is contiguous"),
        );
        acts.push(act);
    }
    (out, acts)
}

/// Builds a connection graph from a latent representation z.
///
/// The effective input is the symmetrized (z + zᵀ)/2 with the diagonal
/// masked; each row then goes through the activation.
pub fn make_connection_graph(z: &Array2<f64>, p: f64) -> Result<ConnectionGraph> {
    ensure_p(p)?;
    let n = ensure_square("make_connection_graph", z)?;
    ensure_finite("make_connection_graph input", z)?;
    let m = Array2::from_shape_fn((n, n), |(i, j)| 0.5 * (z[[i, j]] + z[[j, i]]));
    let (out, _) = activate_matrix(&m, p);
    Ok(ConnectionGraph::from_activated(out))
}

/// Fuses child graphs: activate(Σ_i weights[i]·graphs[i] + bias), with the
/// diagonal masked. A final clamp to >= 0 mirrors the ReLU that follows the
/// activation in the biased variant; it is a no-op because the activation
/// already outputs nonnegative rows.
pub fn agglomerate(
    graphs: &[ConnectionGraph],
    weights: &[f64],
    p: f64,
    bias: Option<&Array2<f64>>,
) -> Result<ConnectionGraph> {
    ensure_p(p)?;
    if graphs.is_empty() {
        return Err(Error::InvalidArgument {
            name: "graphs",
            reason: "at least one child graph required".into(),
        });
    }
    if graphs.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            context: "agglomerate",
            expected: format!("{} weights", graphs.len()),
            found: format!("{}", weights.len()),
        });
    }
    let n = graphs[0].n();
    for g in graphs {
        if g.n() != n {
            return Err(Error::ShapeMismatch {
                context: "agglomerate",
                expected: format!("{n}x{n} graphs"),
                found: format!("{}x{}", g.n(), g.n()),
            });
        }
    }
    for (i, w) in weights.iter().enumerate() {
        if !w.is_finite() {
            return Err(Error::NonFinite {
                context: "agglomerate weights",
                row: 0,
                col: i,
            });
        }
    }

    let mut t: Array2<f64> = Array2::zeros((n, n));
    for (g, &w) in graphs.iter().zip(weights) {
        t.scaled_add(w, g.matrix());
    }
    if let Some(b) = bias {
        if b.nrows() != n || b.ncols() != n {
            return Err(Error::ShapeMismatch {
                context: "agglomerate bias",
                expected: format!("{n}x{n}"),
                found: format!("{}x{}", b.nrows(), b.ncols()),
            });
        }
        ensure_finite("agglomerate bias", b)?;
        t += b;
    }

    let (mut out, _) = activate_matrix(&t, p);
    out.mapv_inplace(|v| v.max(0.0));
    Ok(ConnectionGraph::from_activated(out))
}

/// Unnormalized graph Laplacian L = Dg − A with A = (S + Sᵀ)/2 and
/// Dg_ii = Σ_j A_ij. Symmetric, zero row sums, positive semidefinite.
pub fn laplacian(s: &ConnectionGraph) -> Array2<f64> {
    let a = s.symmetrized();
    let n = a.nrows();
    let mut l = -a;
    for i in 0..n {
        let degree: f64 = -l.row(i).sum();
        l[[i, i]] += degree;
    }
    l
}

/// Connected components of the undirected graph with edges where
/// (S_ij + S_ji)/2 exceeds [`EDGE_EPS`]. Labels are assigned in first-visit
/// order scanning vertices 0..n.
pub fn connected_components(s: &ConnectionGraph) -> (usize, Vec<usize>) {
    let n = s.n();
    let w = s.matrix();
    let mut labels = vec![usize::MAX; n];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if labels[start] != usize::MAX {
            continue;
        }
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if labels[j] == usize::MAX && 0.5 * (w[[i, j]] + w[[j, i]]) > EDGE_EPS {
                    labels[j] = count;
                    stack.push(j);
                }
            }
        }
        count += 1;
    }
    (count, labels)
}

/// DOT rendering of the symmetrized graph (undirected, weight attribute).
pub fn to_dot(s: &ConnectionGraph) -> String {
    let a = s.symmetrized();
    let n = a.nrows();
    let mut out = String::from("graph consensus {\n");
    for i in 0..n {
        out.push_str(&format!("  {i};\n"));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if a[[i, j]] > EDGE_EPS {
                out.push_str(&format!("  {i} -- {j} [weight={}];\n", a[[i, j]]));
            }
        }
    }
    out.push_str("}\n");
    out
}

/// Flat CSV of the symmetrized edges: header `i,j,weight`, one line per
/// undirected edge with i < j.
pub fn edge_list_csv(s: &ConnectionGraph) -> String {
    let a = s.symmetrized();
    let n = a.nrows();
    let mut out = String::from("i,j,weight\n");
    for i in 0..n {
        for j in (i + 1)..n {
            if a[[i, j]] > EDGE_EPS {
                out.push_str(&format!("{i},{j},{}\n", a[[i, j]]));
            }
        }
    }
    out
}
