//! Proper orthogonal decomposition of pre-model feature snapshots.
//!
//! Pre-model outputs x^(l) are unrolled as columns of a snapshot matrix
//! S = [x^(l),1 … x^(l),N]; its SVD S = ΨΣΘᵀ yields the POD modes Ψ, and the
//! first r modes form the frozen projection z = Ψ_rᵀ x.
//!
//! The SVD is a one-sided (Hestenes) Jacobi on the columns of S: simple,
//! accurate to machine precision, and with N_train small the O(n_l·N²) sweep
//! cost stays cheap. Mode signs are normalized (largest-magnitude entry
//! positive) so repeated runs are bit-identical.

use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::net::SplitNet;
use crate::tensor::Tensor;

/// Unrolled pre-model outputs, one column per training image.
/// Storage is column-major: column `j` occupies `data[j*n_rows..][..n_rows]`.
#[derive(Debug, Clone)]
pub struct SnapshotMatrix {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
    pub column_ids: Vec<String>,
}

impl SnapshotMatrix {
    pub fn from_columns(columns: Vec<Vec<f64>>, column_ids: Vec<String>) -> Result<Self> {
        if columns.is_empty() {
            return Err(invalid_arg!("snapshot matrix needs at least one column"));
        }
        if column_ids.len() != columns.len() {
            return Err(invalid_arg!(
                "{} column ids for {} columns",
                column_ids.len(),
                columns.len()
            ));
        }
        let n_rows = columns[0].len();
        if n_rows == 0 {
            return Err(invalid_arg!("snapshot columns must be non-empty"));
        }
        let mut data = Vec::with_capacity(n_rows * columns.len());
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n_rows {
                return Err(shape_err!(
                    "snapshot column {j} has {} entries, expected {n_rows}",
                    col.len()
                ));
            }
            data.extend_from_slice(col);
        }
        Ok(SnapshotMatrix { data, n_rows, n_cols: columns.len(), column_ids })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    /// Entry (i, j).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.n_rows + i]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Run every dataset image through the pre-model and unroll the outputs as
/// snapshot columns, in dataset order.
pub fn assemble_snapshots<'a, I>(split: &SplitNet, images: I) -> Result<SnapshotMatrix>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut columns = Vec::new();
    let mut ids = Vec::new();
    let mut expect_shape: Option<Vec<usize>> = None;
    for (id, image) in images {
        let x_l = split.forward_pre(image)?;
        match &expect_shape {
            None => expect_shape = Some(x_l.shape.clone()),
            Some(s) if *s != x_l.shape => {
                return Err(shape_err!(
                    "pre-model output for '{id}' has shape {:?}, earlier images had {:?}",
                    x_l.shape,
                    s
                ))
            }
            _ => {}
        }
        columns.push(x_l.data);
        ids.push(id.to_string());
    }
    SnapshotMatrix::from_columns(columns, ids)
}

/// Rank selection policy for the reduced space.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum RankPolicy {
    /// Keep exactly `r` modes.
    FixedR { r: usize },
    /// Keep the smallest r with Σ_{i≤r} σᵢ² / Σ σᵢ² ≥ epsilon.
    Energy { epsilon: f64 },
}

/// POD basis: orthonormal modes Ψ (left singular vectors), the full singular
/// spectrum, and optionally the right singular vectors Θ for verification.
#[derive(Debug, Clone)]
pub struct PodBasis {
    /// [n_l, rank] row-major; columns orthonormal.
    pub modes: Tensor,
    /// All min(n_l, N) singular values, non-increasing.
    pub singular_values: Vec<f64>,
    /// Θ as [N, rank] row-major when retained.
    pub right_vectors: Option<Vec<f64>>,
    pub rank: usize,
    /// Column mean subtracted before decomposition, when centering was on.
    pub mean: Option<Vec<f64>>,
}

impl PodBasis {
    pub fn n_rows(&self) -> usize {
        self.modes.shape[0]
    }

    /// Mode `k` as a dense column.
    pub fn mode(&self, k: usize) -> Vec<f64> {
        let (n, r) = (self.modes.shape[0], self.modes.shape[1]);
        (0..n).map(|i| self.modes.data[i * r + k]).collect()
    }

    /// Keep only the first `r` modes. The singular spectrum is kept whole.
    pub fn truncate(&self, r: usize) -> Result<PodBasis> {
        let k = self.rank;
        if r < 1 || r > k {
            return Err(invalid_arg!("rank {r} outside [1, {k}]"));
        }
        let n = self.n_rows();
        let mut modes = Vec::with_capacity(n * r);
        for i in 0..n {
            modes.extend_from_slice(&self.modes.data[i * k..i * k + r]);
        }
        let right_vectors = self.right_vectors.as_ref().map(|theta| {
            let cols = theta.len() / k;
            let mut out = Vec::with_capacity(cols * r);
            for i in 0..cols {
                out.extend_from_slice(&theta[i * k..i * k + r]);
            }
            out
        });
        Ok(PodBasis {
            modes: Tensor::new(vec![n, r], modes)?,
            singular_values: self.singular_values.clone(),
            right_vectors,
            rank: r,
            mean: self.mean.clone(),
        })
    }

    /// z = Ψ_rᵀ · flatten(x); the reduction layer's forward map.
    pub fn project(&self, x_l: &Tensor) -> Result<Tensor> {
        let n = self.n_rows();
        if x_l.numel() != n {
            return Err(shape_err!(
                "cannot project {:?} ({} values) through a basis over {n}-dim snapshots",
                x_l.shape,
                x_l.numel()
            ));
        }
        let r = self.rank;
        let mut z = vec![0.0; r];
        match &self.mean {
            None => {
                for (i, &xi) in x_l.data.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &self.modes.data[i * r..(i + 1) * r];
                    for (zk, &m) in z.iter_mut().zip(row) {
                        *zk += m * xi;
                    }
                }
            }
            Some(mean) => {
                for i in 0..n {
                    let xi = x_l.data[i] - mean[i];
                    let row = &self.modes.data[i * r..(i + 1) * r];
                    for (zk, &m) in z.iter_mut().zip(row) {
                        *zk += m * xi;
                    }
                }
            }
        }
        Tensor::new(vec![r], z)
    }

    /// Ψ_r z, mapping a reduced vector back to snapshot space.
    pub fn lift(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.rank {
            return Err(shape_err!("expected {} reduced coordinates, got {}", self.rank, z.len()));
        }
        let n = self.n_rows();
        let r = self.rank;
        let mut x = vec![0.0; n];
        for i in 0..n {
            let row = &self.modes.data[i * r..(i + 1) * r];
            let mut acc = 0.0;
            for (zk, &m) in z.iter().zip(row) {
                acc += m * zk;
            }
            x[i] = acc;
        }
        if let Some(mean) = &self.mean {
            for (xi, mi) in x.iter_mut().zip(mean) {
                *xi += mi;
            }
        }
        Ok(x)
    }

    /// Cumulative energy fractions Σ_{i≤k} σᵢ² / Σ σᵢ².
    pub fn cumulative_energy(&self) -> Vec<f64> {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        let mut acc = 0.0;
        self.singular_values
            .iter()
            .map(|s| {
                acc += s * s;
                if total > 0.0 {
                    acc / total
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Relative magnitude below which a singular value is treated as zero
/// (rank-deficient direction).
const RANK_TOL: f64 = 1e-12;

/// Decompose the snapshot matrix: S = ΨΣΘᵀ with the full thin basis
/// (rank = min(n_l, N)). Rejects non-finite snapshot entries.
pub fn compute_pod(snapshots: &SnapshotMatrix) -> Result<PodBasis> {
    compute_pod_centered(snapshots, false)
}

/// As [`compute_pod`]; `mean_center` subtracts the column mean before the
/// decomposition (off by default — the decomposition acts on raw snapshots).
pub fn compute_pod_centered(snapshots: &SnapshotMatrix, mean_center: bool) -> Result<PodBasis> {
    if !snapshots.data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("snapshot matrix contains non-finite entries".into()));
    }
    let n = snapshots.n_rows;
    let cols = snapshots.n_cols;
    let mut work = snapshots.data.clone();
    let mean = if mean_center {
        let mut m = vec![0.0; n];
        for j in 0..cols {
            for (mi, &v) in m.iter_mut().zip(snapshots.column(j)) {
                *mi += v;
            }
        }
        for mi in m.iter_mut() {
            *mi /= cols as f64;
        }
        for j in 0..cols {
            for (i, mi) in m.iter().enumerate() {
                work[j * n + i] -= mi;
            }
        }
        Some(m)
    } else {
        None
    };

    let (mut sigmas, mut u_cols, mut v) = jacobi_svd(&mut work, n, cols)?;
    let k = n.min(cols);

    // Completion of rank-deficient directions: replace near-zero modes with
    // canonical basis vectors orthogonalized against the accepted ones.
    let sigma_max = sigmas.first().copied().unwrap_or(0.0);
    let n_keep = sigmas.iter().take(k).filter(|&&s| s > RANK_TOL * sigma_max && s > 0.0).count();
    complete_basis(&mut u_cols, n, n_keep, k);
    for s in sigmas.iter_mut().skip(n_keep) {
        *s = 0.0;
    }

    // Sign convention: largest-magnitude entry of each kept mode positive.
    for (j, col) in u_cols.iter_mut().enumerate().take(k) {
        let mut best = 0usize;
        let mut best_abs = 0.0;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            for v in col.iter_mut() {
                *v = -*v;
            }
            if j < v.len() {
                for vv in v[j].iter_mut() {
                    *vv = -*vv;
                }
            }
        }
    }

    // Pack Ψ [n, k] row-major.
    let mut modes = vec![0.0; n * k];
    for (j, col) in u_cols.iter().enumerate().take(k) {
        for i in 0..n {
            modes[i * k + j] = col[i];
        }
    }
    // Pack Θ [cols, k] row-major.
    let mut theta = vec![0.0; cols * k];
    for (j, vc) in v.iter().enumerate().take(k) {
        for i in 0..cols {
            theta[i * k + j] = vc[i];
        }
    }
    sigmas.truncate(k);

    Ok(PodBasis {
        modes: Tensor::new(vec![n, k], modes)?,
        singular_values: sigmas,
        right_vectors: Some(theta),
        rank: k,
        mean,
    })
}

/// One-sided Jacobi on the columns of a column-major n×cols matrix.
/// Returns (singular values desc, left singular columns, right singular
/// columns), ordering ties resolved by post-sweep column order.
#[allow(clippy::type_complexity)]
fn jacobi_svd(
    work: &mut [f64],
    n: usize,
    cols: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    const MAX_SWEEPS: usize = 60;
    const ORTH_TOL: f64 = 1e-14;

    // v[j] is the j-th column of the accumulated rotation matrix V.
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let column_norms_sq = |w: &[f64]| -> Vec<f64> {
        (0..cols).map(|j| w[j * n..(j + 1) * n].iter().map(|x| x * x).sum()).collect()
    };
    let mut norms_sq = column_norms_sq(work);
    let frob2: f64 = norms_sq.iter().sum();
    // Columns this small are numerically zero; rotating them only churns
    // round-off noise and stalls convergence.
    let zero_floor = frob2 * 1e-30;

    let mut converged = false;
    for sweep in 0..MAX_SWEEPS {
        if sweep > 0 {
            norms_sq = column_norms_sq(work);
        }
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let (alpha, beta) = (norms_sq[i], norms_sq[j]);
                if alpha <= zero_floor || beta <= zero_floor {
                    continue;
                }
                let mut gamma = 0.0;
                {
                    let (lo, hi) = (i.min(j), i.max(j));
                    let (left, right) = work.split_at(hi * n);
                    let ci = &left[lo * n..(lo + 1) * n];
                    let cj = &right[..n];
                    for (a, b) in ci.iter().zip(cj) {
                        gamma += a * b;
                    }
                }
                if gamma.abs() <= ORTH_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                {
                    let (left, right) = work.split_at_mut(j * n);
                    let ci = &mut left[i * n..(i + 1) * n];
                    let cj = &mut right[..n];
                    for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
                        let (x, y) = (*a, *b);
                        *a = c * x - s * y;
                        *b = s * x + c * y;
                    }
                }
                {
                    let (vi, vj) = {
                        let (left, right) = v.split_at_mut(j);
                        (&mut left[i], &mut right[0])
                    };
                    for (a, b) in vi.iter_mut().zip(vj.iter_mut()) {
                        let (x, y) = (*a, *b);
                        *a = c * x - s * y;
                        *b = s * x + c * y;
                    }
                }
                let cs2 = 2.0 * c * s * gamma;
                norms_sq[i] = c * c * alpha - cs2 + s * s * beta;
                norms_sq[j] = s * s * alpha + cs2 + c * c * beta;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "one-sided Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    // Stable sort by norm descending; equal values keep sweep column order.
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms_sq[b].partial_cmp(&norms_sq[a]).unwrap().then(a.cmp(&b)));

    let mut sigmas = Vec::with_capacity(cols);
    let mut u_cols = Vec::with_capacity(cols);
    let mut v_cols = Vec::with_capacity(cols);
    for &j in &order {
        let sigma = norms_sq[j].max(0.0).sqrt();
        let mut u = work[j * n..(j + 1) * n].to_vec();
        if sigma > 0.0 {
            for x in u.iter_mut() {
                *x /= sigma;
            }
        }
        sigmas.push(sigma);
        u_cols.push(u);
        v_cols.push(v[j].clone());
    }
    Ok((sigmas, u_cols, v_cols))
}

/// Replace columns `n_keep..k` with canonical basis vectors orthogonalized
/// against all earlier columns (deterministic completion for rank-deficient
/// snapshot sets).
fn complete_basis(u_cols: &mut [Vec<f64>], n: usize, n_keep: usize, k: usize) {
    let mut filled = n_keep;
    let mut candidate = 0usize;
    while filled < k && candidate < n {
        let mut e = vec![0.0; n];
        e[candidate] = 1.0;
        candidate += 1;
        for col in u_cols.iter().take(filled) {
            let dot: f64 = col.iter().zip(&e).map(|(a, b)| a * b).sum();
            if dot != 0.0 {
                for (ei, &ci) in e.iter_mut().zip(col) {
                    *ei -= dot * ci;
                }
            }
        }
        let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for ei in e.iter_mut() {
                *ei /= norm;
            }
            u_cols[filled] = e;
            filled += 1;
        }
    }
    debug_assert_eq!(filled, k, "basis completion exhausted candidates");
}

/// Number of modes to keep under `policy`.
pub fn select_rank(basis: &PodBasis, policy: RankPolicy) -> Result<usize> {
    let k = basis.singular_values.len();
    match policy {
        RankPolicy::FixedR { r } => {
            if r < 1 || r > k {
                return Err(invalid_arg!("fixed rank {r} outside [1, {k}]"));
            }
            Ok(r)
        }
        RankPolicy::Energy { epsilon } => {
            if !(epsilon > 0.0 && epsilon <= 1.0) {
                return Err(invalid_arg!("energy threshold {epsilon} outside (0, 1]"));
            }
            let total: f64 = basis.singular_values.iter().map(|s| s * s).sum();
            if total == 0.0 {
                return Err(invalid_arg!("all singular values are zero; no energy to capture"));
            }
            let mut acc = 0.0;
            for (i, s) in basis.singular_values.iter().enumerate() {
                acc += s * s;
                if acc / total >= epsilon {
                    return Ok(i + 1);
                }
            }
            Ok(k)
        }
    }
}

/// Convenience composition z = reduce(x^(l), r): build the POD basis from the batch
/// itself, keep the first r modes, and project every element.
pub fn reduce(x_l_batch: &[Tensor], r: usize) -> Result<(PodBasis, Vec<Tensor>)> {
    let columns: Vec<Vec<f64>> = x_l_batch.iter().map(|t| t.data.clone()).collect();
    let ids: Vec<String> = (0..x_l_batch.len()).map(|i| format!("batch_{i}")).collect();
    let snapshots = SnapshotMatrix::from_columns(columns, ids)?;
    let basis = compute_pod(&snapshots)?.truncate(r)?;
    let zs = x_l_batch.iter().map(|x| basis.project(x)).collect::<Result<Vec<_>>>()?;
    Ok((basis, zs))
}
