//! Dense linear algebra kernels: pairwise distances, k-nearest-neighbor
//! sparsification, and a symmetric eigensolver.
//!
//! The eigensolver reduces the matrix to tridiagonal form with Householder
//! reflections, then diagonalizes it by the QL iteration with implicit
//! Wilkinson shifts, accumulating the orthogonal transforms so eigenvectors
//! come out of the same pass. Both stages are O(n^3) with small constants,
//! which keeps the per-iteration spectral step affordable at a few hundred
//! samples. An independent dense decomposition is used as a test oracle;
//! the implementation below never depends on it.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Checks every entry for NaN or infinity.
pub(crate) fn ensure_finite(context: &'static str, m: &Array2<f64>) -> Result<()> {
    // Fast vectorizable scan first; walk with indices only on failure.
    if m.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    for ((i, j), &v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context,
                row: i,
                col: j,
            });
        }
    }
    unreachable!("a non-finite entry was just observed");
}

/// Checks `|m[i,j] - m[j,i]| <= tol` for all pairs.
pub(crate) fn ensure_symmetric(context: &'static str, m: &Array2<f64>, tol: f64) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = (m[[i, j]] - m[[j, i]]).abs();
            if delta > tol {
                return Err(Error::NotSymmetric {
                    context,
                    row: i,
                    col: j,
                    delta,
                });
            }
        }
    }
    Ok(())
}

pub(crate) fn ensure_square(context: &'static str, m: &Array2<f64>) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::ShapeMismatch {
            context,
            expected: "square matrix".into(),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(m.nrows())
}

#[cfg(test)]
pub(crate) fn fro_norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Euclidean distance matrix of the rows of `x`.
///
/// Returns the `n x n` matrix with `d[i, j] = ||x[i, :] - x[j, :]||_2`.
/// Each unordered pair is computed once and mirrored, so the result is
/// exactly symmetric with an exactly zero diagonal.
pub fn pairwise_distances(x: &Array2<f64>) -> Result<Array2<f64>> {
    ensure_finite("pairwise_distances input", x)?;
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        let xi = x.row(i);
        for j in (i + 1)..n {
            let xj = x.row(j);
            let mut acc = 0.0;
            for (a, b) in xi.iter().zip(xj.iter()) {
                let diff = a - b;
                acc += diff * diff;
            }
            let dist = acc.sqrt();
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    Ok(d)
}

/// Keeps, per row, the `r` smallest strictly off-diagonal entries of a
/// symmetric distance matrix and zeroes everything else.
///
/// Ties are broken toward the lower column index. The result need not be
/// symmetric: row i may retain j while row j drops i. The diagonal stays 0.
pub fn knn_sparsify(d: &Array2<f64>, r: usize) -> Result<Array2<f64>> {
    Ok(knn_retained(d, r)?.0)
}

/// As [`knn_sparsify`], but also returns the retained column indices per row
/// (ascending). The index list is what downstream gradients need: a retained
/// entry whose distance happens to be 0 is invisible in the matrix alone.
pub(crate) fn knn_retained(d: &Array2<f64>, r: usize) -> Result<(Array2<f64>, Vec<Vec<usize>>)> {
    let (out, retained, _, _) = knn_retained_margins(d, r)?;
    Ok((out, retained))
}

/// Row-wise k-nearest retention plus the margins a caller needs to judge
/// how close the cutoff is to flipping: the smallest sorted-value gap at
/// the retain/drop boundary across rows, and the smallest retained
/// distance. One sort per row feeds all four outputs.
pub(crate) fn knn_retained_margins(
    d: &Array2<f64>,
    r: usize,
) -> Result<(Array2<f64>, Vec<Vec<usize>>, f64, f64)> {
    let n = ensure_square("knn_sparsify", d)?;
    ensure_finite("knn_sparsify input", d)?;
    ensure_symmetric("knn_sparsify", d, 1e-10)?;
    for i in 0..n {
        if d[[i, i]].abs() > 1e-12 {
            return Err(Error::InvalidArgument {
                name: "d",
                reason: format!("diagonal entry ({i}, {i}) = {} is not zero", d[[i, i]]),
            });
        }
    }
    if r < 1 || r > n.saturating_sub(1) {
        return Err(Error::InvalidArgument {
            name: "r",
            reason: format!("r = {r} must satisfy 1 <= r <= n - 1 = {}", n.saturating_sub(1)),
        });
    }

    let mut out = Array2::zeros((n, n));
    let mut retained = Vec::with_capacity(n);
    let mut boundary_gap = f64::INFINITY;
    let mut min_kept = f64::INFINITY;
    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let row = d.row(i);
        let row = row.as_slice().expect("row of a standard-layout matrix");
        pairs.clear();
        pairs.extend(
            row.iter()
                .copied()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, v)| (v, j)),
        );
        // Sort by (distance, column); the column component resolves ties
        // toward the lower index.
        pairs.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite distances")
                .then(a.1.cmp(&b.1))
        });
        let mut keep: Vec<usize> = pairs[..r].iter().map(|&(_, j)| j).collect();
        keep.sort_unstable();
        for &j in &keep {
            out[[i, j]] = row[j];
        }
        retained.push(keep);
        min_kept = min_kept.min(pairs[0].0);
        if r < pairs.len() {
            boundary_gap = boundary_gap.min(pairs[r].0 - pairs[r - 1].0);
        }
    }
    Ok((out, retained, boundary_gap, min_kept))
}

/// Eigenpairs returned by [`sym_eigs_smallest`].
///
/// `values` is ascending; column `j` of `vectors` is the unit eigenvector
/// paired with `values[j]`.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub values: Vec<f64>,
    pub vectors: Array2<f64>,
}

const QL_MAX_ITERS: usize = 50;

/// Householder reduction of a symmetric matrix to tridiagonal form.
///
/// `a` is a row-major n x n buffer. On return it holds the accumulated
/// orthogonal transform Q (so that Q^T M Q is tridiagonal), `d` the
/// diagonal, and `e` the subdiagonal with `e[0]` unused and set to 0.
fn householder_tridiag(a: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = a[i * n..i * n + i].iter().map(|v| v.abs()).sum();
            if scale == 0.0 {
                e[i] = a[i * n + l];
            } else {
                for k in 0..=l {
                    a[i * n + k] /= scale;
                    h += a[i * n + k] * a[i * n + k];
                }
                let f = a[i * n + l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i * n + l] = f - g;
                let mut f_sum = 0.0;
                for j in 0..=l {
                    a[j * n + i] = a[i * n + j] / h;
                    let mut g_sum = 0.0;
                    for k in 0..=j {
                        g_sum += a[j * n + k] * a[i * n + k];
                    }
                    for k in (j + 1)..=l {
                        g_sum += a[k * n + j] * a[i * n + k];
                    }
                    e[j] = g_sum / h;
                    f_sum += e[j] * a[i * n + j];
                }
                let hh = f_sum / (h + h);
                for j in 0..=l {
                    let f = a[i * n + j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    let (lo, hi) = a.split_at_mut(i * n);
                    let row_j = &mut lo[j * n..j * n + j + 1];
                    let row_i = &hi[..j + 1];
                    for k in 0..=j {
                        row_j[k] -= f * e[k] + g * row_i[k];
                    }
                }
            }
        } else {
            e[i] = a[i * n + l];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    // Accumulate the reflections into Q. The textbook column-sweeping form
    // is rearranged into row walks: g collects u^T Q over the live block,
    // then each live row k gets a rank-one correction scaled by Q[k, i].
    let mut g_buf = vec![0.0; n];
    for i in 0..n {
        if d[i] != 0.0 {
            g_buf[..i].fill(0.0);
            for k in 0..i {
                let uk = a[i * n + k];
                if uk != 0.0 {
                    let row_k = &a[k * n..k * n + i];
                    for j in 0..i {
                        g_buf[j] += uk * row_k[j];
                    }
                }
            }
            for k in 0..i {
                let f = a[k * n + i];
                if f != 0.0 {
                    let row_k = &mut a[k * n..k * n + i];
                    for j in 0..i {
                        row_k[j] -= f * g_buf[j];
                    }
                }
            }
        }
        d[i] = a[i * n + i];
        a[i * n + i] = 1.0;
        for j in 0..i {
            a[j * n + i] = 0.0;
            a[i * n + j] = 0.0;
        }
    }
}

/// QL iteration with implicit Wilkinson shifts on a tridiagonal matrix.
///
/// `d` and `e` are the diagonal and subdiagonal from
/// [`householder_tridiag`]; `zt` is the n x n row-major TRANSPOSE of the
/// accumulated transform, so each plane rotation mixes two contiguous rows
/// instead of two strided columns. On return row t of `zt` is the
/// eigenvector paired with the (unsorted) eigenvalue `d[t]`. Each
/// eigenvalue is allowed [`QL_MAX_ITERS`] shift iterations before
/// non-convergence is reported.
fn ql_implicit(d: &mut [f64], e: &mut [f64], zt: &mut [f64], n: usize) -> Result<()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    for l in 0..n {
        let mut iter = 0;
        loop {
            // First coupling at or after l that is negligible relative to
            // the neighboring diagonal mass; the block l..=m is then an
            // isolated subproblem.
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            if iter >= QL_MAX_ITERS {
                return Err(Error::EigenNotConverged {
                    sweeps: iter,
                    off_norm: e[l].abs(),
                });
            }
            iter += 1;

            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            let shifted = g + if g >= 0.0 { r } else { -r };
            g = d[m] - d[l] + e[l] / shifted;
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    // The rotation chain collapsed early; drop the shift
                    // accumulated so far and restart this block.
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let (lo, hi) = zt.split_at_mut((i + 1) * n);
                let row_i = &mut lo[i * n..];
                let row_i1 = &mut hi[..n];
                for k in 0..n {
                    let zk = row_i1[k];
                    row_i1[k] = s * row_i[k] + c * zk;
                    row_i[k] = c * row_i[k] - s * zk;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// The `k` smallest eigenpairs of a symmetric matrix.
///
/// Householder tridiagonalization followed by implicitly shifted QL with
/// accumulated transforms. Rejects asymmetric input (tolerance `1e-10`
/// entrywise) and reports non-convergence with the iteration count rather
/// than returning a partial answer.
pub fn sym_eigs_smallest(m: &Array2<f64>, k: usize) -> Result<EigenResult> {
    let n = ensure_square("sym_eigs_smallest", m)?;
    ensure_finite("sym_eigs_smallest input", m)?;
    ensure_symmetric("sym_eigs_smallest", m, 1e-10)?;
    if n == 0 {
        return Err(Error::ShapeMismatch {
            context: "sym_eigs_smallest",
            expected: "n >= 1".into(),
            found: "0x0".into(),
        });
    }
    if k < 1 || k > n {
        return Err(Error::InvalidArgument {
            name: "k",
            reason: format!("k = {k} must satisfy 1 <= k <= n = {n}"),
        });
    }

    // Scrub sub-tolerance asymmetry so the iteration sees an exactly
    // symmetric matrix.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m[[i, j]] + m[[j, i]]);
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    householder_tridiag(&mut a, n, &mut d, &mut e);
    // The QL stage wants the transform transposed so its rotations run
    // along rows.
    let mut zt = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            zt[j * n + i] = a[i * n + j];
        }
    }
    ql_implicit(&mut d, &mut e, &mut zt, n)?;

    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        d[i].partial_cmp(&d[j])
            .expect("finite eigenvalues")
            .then(i.cmp(&j))
    });

    let values: Vec<f64> = idx[..k].iter().map(|&i| d[i]).collect();
    let vectors = Array2::from_shape_fn((n, k), |(row, col)| zt[idx[col] * n + row]);
    Ok(EigenResult { values, vectors })
}
