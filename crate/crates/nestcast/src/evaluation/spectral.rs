//! Graph-spectral diagnostics: normalized Laplacian, dense symmetric
//! eigendecomposition, frequency response of node-signal operators, the
//! high-pass verification, and zonal Fourier spectra of lat-lon fields.

use crate::error::{Error, Result};
use crate::evaluation::metrics::LatWeights;
use crate::fieldio::FieldTensor;
use crate::rng::substream;
use crate::tensorcore::Tensor2;
use rand::Rng;

/// Dense adjacency from an undirected edge list.
pub fn adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> Tensor2<f64> {
    let mut a = Tensor2::zeros(n, n);
    for &(u, v) in edges {
        a.set(u, v, 1.0);
        a.set(v, u, 1.0);
    }
    a
}

/// Symmetric normalized Laplacian `I − D^{−1/2} A D^{−1/2}`. Rows and
/// columns of isolated vertices stay zero. Asymmetric input is rejected.
pub fn normalized_laplacian(adj: &Tensor2<f64>) -> Result<Tensor2<f64>> {
    let n = adj.rows();
    if adj.cols() != n {
        return Err(Error::shape("normalized_laplacian", "adjacency must be square"));
    }
    for i in 0..n {
        for j in 0..i {
            if (adj.get(i, j) - adj.get(j, i)).abs() > 1e-12 {
                return Err(Error::shape(
                    "normalized_laplacian",
                    format!("adjacency asymmetric at ({i},{j})"),
                ));
            }
        }
    }
    let degree: Vec<f64> = (0..n).map(|i| adj.row(i).iter().sum()).collect();
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut l = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let off = -inv_sqrt[i] * adj.get(i, j) * inv_sqrt[j];
            let diag = if i == j && degree[i] > 0.0 { 1.0 } else { 0.0 };
            l.set(i, j, diag + off);
        }
    }
    Ok(l)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues ascending and eigenvectors as matching columns of an
/// orthonormal matrix.
pub fn eigendecompose_sym(matrix: &Tensor2<f64>) -> Result<(Vec<f64>, Tensor2<f64>)> {
    let n = matrix.rows();
    if matrix.cols() != n {
        return Err(Error::shape("eigendecompose", "matrix must be square"));
    }
    for i in 0..n {
        for j in 0..i {
            if (matrix.get(i, j) - matrix.get(j, i)).abs() > 1e-10 {
                return Err(Error::shape(
                    "eigendecompose",
                    format!("matrix asymmetric at ({i},{j})"),
                ));
            }
        }
    }
    let mut a = matrix.clone();
    let mut v = Tensor2::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let off = |a: &Tensor2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..i {
                s += a.get(i, j) * a.get(i, j);
            }
        }
        s
    };
    for _sweep in 0..100 {
        if off(&a) < 1e-24 * n as f64 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of A.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).partial_cmp(&a.get(j, j)).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut u = Tensor2::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            u.set(row, col, v.get(row, src));
        }
    }
    Ok((eigvals, u))
}

/// Per-eigenpair gain of a node-signal operator, measured as the Rayleigh
/// projection `|u_iᵀ G u_i|`. For operators commuting with the Laplacian
/// this equals the eigen-relation gain exactly.
pub fn frequency_response(
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
    u: &Tensor2<f64>,
) -> Vec<f64> {
    let n = u.rows();
    (0..u.cols())
        .map(|i| {
            let ui: Vec<f64> = (0..n).map(|r| u.get(r, i)).collect();
            let gui = apply(&ui);
            assert_eq!(gui.len(), n, "operator changed signal length");
            ui.iter().zip(&gui).map(|(a, b)| a * b).sum::<f64>().abs()
        })
        .collect()
}

/// Spectral filter whose gain follows the gating profile `|λ − 1| + eps`.
pub fn gated_spectral_operator(eigvals: &[f64], u: &Tensor2<f64>, eps: f64) -> Tensor2<f64> {
    let n = u.rows();
    let mut g = Tensor2::zeros(n, n);
    for (idx, &lam) in eigvals.iter().enumerate() {
        let gain = (lam - 1.0).abs() + eps;
        for r in 0..n {
            for c in 0..n {
                let cur = g.get(r, c);
                g.set(r, c, cur + gain * u.get(r, idx) * u.get(c, idx));
            }
        }
    }
    g
}

pub fn mat_apply(m: &Tensor2<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Outcome of the high-pass verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HighpassStatus {
    Pass,
    Fail,
    /// Every eigenvalue fell inside an exclusion window; no constants can
    /// be fitted.
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct HighpassFit {
    /// min ρ(λ)/|λ−1| over eigenvalues away from 1.
    pub alpha: Option<f64>,
    /// min ρ(λ)/λ over eigenvalues away from 0.
    pub kappa: Option<f64>,
    pub status: HighpassStatus,
}

/// Fit the largest constants α, κ with ρ(λᵢ) ≥ α|λᵢ−1| and ρ(λᵢ) ≥ κλᵢ,
/// excluding eigenvalues within 1e-9 of 1 (for α) and of 0 (for κ). The
/// check passes when both fitted constants are positive.
pub fn verify_highpass(rho: &[f64], eigvals: &[f64]) -> HighpassFit {
    assert_eq!(rho.len(), eigvals.len());
    const EXCL: f64 = 1e-9;
    let alpha = rho
        .iter()
        .zip(eigvals)
        .filter(|(_, &l)| (l - 1.0).abs() > EXCL)
        .map(|(&r, &l)| r / (l - 1.0).abs())
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.min(v)))
        });
    let kappa = rho
        .iter()
        .zip(eigvals)
        .filter(|(_, &l)| l > EXCL)
        .map(|(&r, &l)| r / l)
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.min(v)))
        });
    let status = match (alpha, kappa) {
        (None, None) => HighpassStatus::Inconclusive,
        (a, k) => {
            if a.unwrap_or(1.0) > 0.0 && k.unwrap_or(1.0) > 0.0 && (a.is_some() || k.is_some()) {
                HighpassStatus::Pass
            } else {
                HighpassStatus::Fail
            }
        }
    };
    HighpassFit {
        alpha,
        kappa,
        status,
    }
}

/// Seeded random d-regular simple graph via the pairing model (retries
/// until a simple matching lands, which is fast for small n·d).
pub fn random_regular_graph(n: usize, degree: usize, seed: u64) -> Vec<(usize, usize)> {
    assert!((n * degree).is_multiple_of(2), "n*degree must be even");
    assert!(degree < n, "degree must be below n");
    let mut rng = substream(seed, "graph/regular");
    'attempt: for _ in 0..10_000 {
        let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, degree)).collect();
        // Fisher–Yates with the seeded stream.
        for i in (1..stubs.len()).rev() {
            let j = rng.gen_range(0..=i);
            stubs.swap(i, j);
        }
        let mut edges = Vec::with_capacity(n * degree / 2);
        let mut seen = std::collections::HashSet::new();
        for pair in stubs.chunks_exact(2) {
            let (u, v) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if u == v || !seen.insert((u, v)) {
                continue 'attempt;
            }
            edges.push((u, v));
        }
        edges.sort_unstable();
        return edges;
    }
    panic!("failed to sample a simple {degree}-regular graph on {n} vertices");
}

/// Zonal power spectrum of one channel: per-row DFT power along longitude,
/// latitude-weighted average over rows. Index k runs 0..=W/2; the spectrum
/// satisfies Σ_k P(k) = weighted mean square of the field.
pub fn zonal_spectrum(field: &FieldTensor, channel: usize, w: &LatWeights) -> Vec<f64> {
    let width = field.w;
    let kmax = width / 2;
    let mut power = vec![0.0; kmax + 1];
    for i in 0..field.h {
        let row: Vec<f64> = (0..width).map(|j| field.get(channel, i, j)).collect();
        let wi = w.get(i) / field.h as f64;
        for (k, pk) in power.iter_mut().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (j * k) as f64 / width as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            let mult = if k == 0 || (width.is_multiple_of(2) && k == kmax) {
                1.0
            } else {
                2.0
            };
            *pk += wi * mult * (re * re + im * im) / (width * width) as f64;
        }
    }
    power
}

/// Normalized per-wavenumber error |P_pred − P_truth| / P_truth.
pub fn spectral_error(p_pred: &[f64], p_truth: &[f64]) -> Vec<f64> {
    assert_eq!(p_pred.len(), p_truth.len());
    p_pred
        .iter()
        .zip(p_truth)
        .map(|(&p, &t)| (p - t).abs() / t.max(1e-30))
        .collect()
}
