//! Small dense-vector helpers shared by the scoring, steering and metric code.

use crate::error::{Result, SemError};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / |a|`, or an error for a zero or non-finite norm.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if !(n.is_finite() && n > 0.0) {
        return Err(SemError::Degenerate("zero-norm vector".into()));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SemError::dim("cosine", a.len(), b.len()));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(SemError::Degenerate("cosine of zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

pub fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = rows.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Power iteration with deflation on a symmetric positive semi-definite matrix
/// given as rows. Returns up to `k` (eigenvalue, unit eigenvector) pairs in
/// descending order. Eigenvectors follow the sign convention that the
/// largest-magnitude entry is positive.
pub fn top_eigenpairs(matrix: &[Vec<f64>], k: usize, tol: f64, max_iter: usize) -> Vec<(f64, Vec<f64>)> {
    let n = matrix.len();
    let mut deflated: Vec<Vec<f64>> = matrix.to_vec();
    let mut pairs: Vec<(f64, Vec<f64>)> = Vec::with_capacity(k);
    let scale = matrix
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));

    for _ in 0..k.min(n) {
        // Deterministic start that is unlikely to be orthogonal to the top vector.
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3).collect();
        for (_, prev) in &pairs {
            let p = dot(&v, prev);
            v.iter_mut().zip(prev).for_each(|(x, y)| *x -= p * y);
        }
        let mut lambda = 0.0;
        match normalized(&v) {
            Ok(u) => v = u,
            Err(_) => break,
        }
        for _ in 0..max_iter {
            let mut w: Vec<f64> = deflated.iter().map(|row| dot(row, &v)).collect();
            // Re-orthogonalize against accepted vectors to fight round-off drift.
            for (_, prev) in &pairs {
                let p = dot(&w, prev);
                w.iter_mut().zip(prev).for_each(|(x, y)| *x -= p * y);
            }
            let wn = norm(&w);
            if wn <= scale * 1e-14 || wn == 0.0 {
                lambda = 0.0;
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / wn).collect();
            let diff: f64 = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            lambda = wn;
            if diff < tol {
                break;
            }
        }
        // Rayleigh quotient on the deflated matrix.
        let av: Vec<f64> = deflated.iter().map(|row| dot(row, &v)).collect();
        let rq = dot(&v, &av);
        if lambda > 0.0 {
            lambda = rq.max(0.0);
        }
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, row) in deflated.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x -= lambda * v[i] * v[j];
            }
        }
        pairs.push((lambda, v));
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn eigenpairs_of_diagonal_matrix() {
        let m = vec![vec![1.0, 0.0, 0.0], vec![0.0, 5.0, 0.0], vec![0.0, 0.0, 3.0]];
        let pairs = top_eigenpairs(&m, 2, 1e-12, 10_000);
        assert!((pairs[0].0 - 5.0).abs() < 1e-9);
        assert!((pairs[1].0 - 3.0).abs() < 1e-9);
        assert!((pairs[0].1[1] - 1.0).abs() < 1e-6);
        assert!((pairs[1].1[2] - 1.0).abs() < 1e-6);
    }
}
