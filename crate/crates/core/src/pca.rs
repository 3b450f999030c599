//! Two-component PCA for the qualitative embedding study.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Result, SemError};
use crate::linalg::{dot, mean_rows, top_eigenpairs};

const TOL: f64 = 1e-9;
const MAX_ITER: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub coords: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
    pub total_variance: f64,
    pub warning: Option<String>,
}

/// Sample covariance (divisor n - 1) of mean-centered rows.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    let mean = mean_rows(rows);
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i][j] += c[i] * c[j];
            }
        }
    }
    let denom = (rows.len().max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }
    cov
}

/// Projects mean-centered rows onto the top two principal directions.
pub fn pca_project_2d(rows: &[Vec<f64>]) -> Result<PcaProjection> {
    if rows.len() < 3 {
        return Err(SemError::InvalidArgument(format!("PCA needs at least 3 points, got {}", rows.len())));
    }
    let d = rows[0].len();
    if d == 0 {
        return Err(SemError::EmptyInput("PCA dimensions"));
    }
    for r in rows {
        ensure_len("PCA row", d, r.len())?;
        ensure_finite("PCA row", r)?;
    }
    let cov = covariance(rows);
    let total: f64 = (0..d).map(|i| cov[i][i]).sum();
    let pairs = top_eigenpairs(&cov, 2, TOL, MAX_ITER);
    let floor = total.max(f64::MIN_POSITIVE) * 1e-12;
    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut variance = [0.0; 2];
    let mut warning = None;
    for c in 0..2 {
        match pairs.get(c) {
            Some((lambda, v)) if *lambda > floor => {
                components[c] = v.clone();
                variance[c] = *lambda;
            }
            _ => {
                warning.get_or_insert_with(|| format!("input rank below 2; component {} zeroed", c + 1));
            }
        }
    }
    let mean = mean_rows(rows);
    let coords = rows
        .iter()
        .map(|r| {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
            [dot(&c, &components[0]), dot(&c, &components[1])]
        })
        .collect();
    Ok(PcaProjection {
        coords,
        components,
        explained_variance: variance,
        total_variance: total,
        warning,
    })
}

/// Plot-ready CSV with header `x,y,group,label`.
pub fn pca_csv(p: &PcaProjection, groups: &[String], labels: &[String]) -> Result<Vec<u8>> {
    ensure_len("PCA groups", p.coords.len(), groups.len())?;
    ensure_len("PCA labels", p.coords.len(), labels.len())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| SemError::Numeric(format!("csv encoding failed: {e}"));
    w.write_record(["x", "y", "group", "label"]).map_err(csv_err)?;
    for ((c, g), l) in p.coords.iter().zip(groups).zip(labels) {
        w.write_record([c[0].to_string(), c[1].to_string(), g.clone(), l.clone()])
            .map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| SemError::Numeric(format!("csv encoding failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn collinear_points_have_zero_second_variance() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let p = pca_project_2d(&rows).unwrap();
        assert_eq!(p.explained_variance[1], 0.0);
        assert!(p.warning.is_some());
        assert!((p.explained_variance[0] - p.total_variance).abs() < 1e-9);
        assert!(p.coords.iter().all(|c| c[1] == 0.0));
    }

    #[test]
    fn right_triangle_matches_closed_form() {
        let rows = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        // Covariance by hand: mean (2/3, 1/3).
        let a: f64 = (4.0 / 9.0 + 16.0 / 9.0 + 4.0 / 9.0) / 2.0;
        let c = (1.0 / 9.0 + 1.0 / 9.0 + 4.0 / 9.0) / 2.0;
        let b = ((-2.0 / 3.0) * (-1.0 / 3.0) + (4.0 / 3.0) * (-1.0 / 3.0) + (-2.0 / 3.0) * (2.0 / 3.0)) / 2.0;
        let half = (a + c) / 2.0;
        let r = (((a - c) / 2.0).powi(2) + b * b).sqrt();
        let p = pca_project_2d(&rows).unwrap();
        assert!((p.explained_variance[0] - (half + r)).abs() < 1e-9);
        assert!((p.explained_variance[1] - (half - r)).abs() < 1e-9);
        // Eigenvector of the top eigenvalue: (b, l1 - a), sign-fixed.
        let (vx, vy) = (b, half + r - a);
        let n = (vx * vx + vy * vy).sqrt();
        let mut v = [vx / n, vy / n];
        if v[0].abs().max(v[1].abs()) != v.iter().copied().fold(f64::NEG_INFINITY, f64::max) {
            v = [-v[0], -v[1]];
        }
        assert!((p.components[0][0] - v[0]).abs() < 1e-6);
        assert!((p.components[0][1] - v[1]).abs() < 1e-6);
    }

    #[test]
    fn isotropic_sample_has_balanced_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..4000)
            .map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let p = pca_project_2d(&rows).unwrap();
        let ratio = p.explained_variance[1] / p.explained_variance[0];
        assert!(ratio > 0.9, "ratio {ratio}");
        assert!(p.explained_variance.iter().sum::<f64>() <= p.total_variance + 1e-9);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        let p = pca_project_2d(&rows).unwrap();
        let names = |s: &str| vec![s.to_string(); 3];
        let text = String::from_utf8(pca_csv(&p, &names("g"), &names("l")).unwrap()).unwrap();
        assert!(text.starts_with("x,y,group,label\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
