//! Dense kernels shared by the tape and the graph-free inference paths, so
//! both produce bit-identical values.

use super::NORM_EPS;

/// `a` is `n x k`, `b` is `k x m`, both row-major.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` where `a` is `n x k` and `b` is `n x m`; result is `k x m`.
pub fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` where `a` is `n x m` and `b` is `k x m`; result is `n x k`.
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = dot(arow, brow);
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn add_bias_relu(x: &mut [f64], bias: &[f64], relu: bool) {
    let m = bias.len();
    for row in x.chunks_mut(m) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
            if relu && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Row norms of an `n x k` matrix.
pub fn row_norms(x: &[f64], k: usize) -> Vec<f64> {
    x.chunks(k).map(norm).collect()
}

/// Pairwise ε-stabilised cosine similarity between rows of `x` (`n x k`) and
/// rows of `y` (`m x k`). Returns the `n x m` matrix.
pub fn cosine_matrix(x: &[f64], y: &[f64], k: usize) -> Vec<f64> {
    let nx = row_norms(x, k);
    let ny = row_norms(y, k);
    cosine_matrix_with_norms(x, y, k, &nx, &ny)
}

pub fn cosine_matrix_with_norms(x: &[f64], y: &[f64], k: usize, nx: &[f64], ny: &[f64]) -> Vec<f64> {
    let n = nx.len();
    let m = ny.len();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let dx = nx[i].max(NORM_EPS);
        for j in 0..m {
            let yj = &y[j * k..(j + 1) * k];
            let dy = ny[j].max(NORM_EPS);
            out[i * m + j] = dot(xi, yj) / (dx * dy);
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a).max(NORM_EPS) * norm(b).max(NORM_EPS))
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}
