//! Exact O(n²) t-SNE.

use std::collections::HashSet;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DiagnosticsError;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches to `final_momentum`.
    pub momentum_switch: usize,
    /// Per-coordinate adaptive step gains.
    pub gains: bool,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            gains: true,
            seed: 0,
        }
    }
}

/// Stopping tolerance on `|2^H − perplexity|` in the bandwidth search.
pub const PERPLEXITY_TOL: f64 = 1e-5;
const MAX_BISECTION_STEPS: usize = 200;

/// Per-point Gaussian bandwidths and the conditional distributions they give.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub n: usize,
    /// Row-major `p_{j|i}`, zero diagonal.
    pub conditional: Vec<f64>,
    /// Precision `β_i = 1 / (2σ_i²)`.
    pub betas: Vec<f64>,
    /// Achieved `2^H` per row.
    pub perplexities: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Projection2D {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    /// KL(P‖Q) at the first iteration without exaggeration.
    pub initial_kl: f64,
    pub final_kl: f64,
    pub config: TsneConfig,
}

fn check_points(points: &[Vec<f64>]) -> Result<usize, DiagnosticsError> {
    let d = points.first().map(Vec::len).ok_or(DiagnosticsError::Empty)?;
    if d < 2 {
        return Err(DiagnosticsError::Dimension(format!(
            "points need at least 2 dimensions, got {d}"
        )));
    }
    if let Some(i) = points.iter().position(|p| p.len() != d) {
        return Err(DiagnosticsError::Dimension(format!(
            "point {i} has {} dimensions, expected {d}",
            points[i].len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite("t-SNE input"));
    }
    Ok(d)
}

pub fn squared_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, out) in row.iter_mut().enumerate() {
            if i != j {
                *out = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
    });
    d
}

/// Conditional row for precision `beta` and its entropy in nats. Distances
/// are shifted by the row minimum, which leaves the normalized row unchanged.
fn conditional_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&dj, o)) in dist.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let shifted = dj - min;
        *o = (-beta * shifted).exp();
        sum += *o;
        weighted += shifted * *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    sum.ln() + beta * weighted / sum
}

/// Bisection on each row's precision until `2^H` is within
/// [`PERPLEXITY_TOL`] of `perplexity`.
pub fn calibrate(points: &[Vec<f64>], perplexity: f64) -> Result<Calibration, DiagnosticsError> {
    check_points(points)?;
    let n = points.len();
    check_size(points, perplexity)?;
    let dist = squared_distances(points);
    let target = perplexity.ln();
    let mut conditional = vec![0.0; n * n];
    let rows: Vec<Result<(f64, f64), usize>> = conditional
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| {
            let d = &dist[i * n..(i + 1) * n];
            let (mut lo, mut hi) = (0.0, f64::INFINITY);
            let mut beta = 1.0;
            for _ in 0..MAX_BISECTION_STEPS {
                let h = conditional_row(d, i, beta, row);
                let achieved = h.exp();
                if (achieved - perplexity).abs() <= PERPLEXITY_TOL {
                    return Ok((beta, achieved));
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
            }
            Err(i)
        })
        .collect();
    let mut betas = Vec::with_capacity(n);
    let mut perplexities = Vec::with_capacity(n);
    for r in rows {
        let (b, p) = r.map_err(|row| DiagnosticsError::Calibration { row, perplexity })?;
        betas.push(b);
        perplexities.push(p);
    }
    Ok(Calibration {
        n,
        conditional,
        betas,
        perplexities,
    })
}

fn check_size(points: &[Vec<f64>], perplexity: f64) -> Result<(), DiagnosticsError> {
    let n = points.len();
    if !(perplexity >= 1.0) || (n as f64) <= 3.0 * perplexity {
        return Err(DiagnosticsError::TooFewPoints { n, perplexity });
    }
    let distinct: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    if (distinct.len() as f64) <= 3.0 * perplexity {
        return Err(DiagnosticsError::TooFewDistinct {
            distinct: distinct.len(),
            perplexity,
        });
    }
    Ok(())
}

/// Symmetrized joint affinities `p_ij = (p_{j|i} + p_{i|j}) / 2n`.
pub fn joint_probabilities(cal: &Calibration) -> Vec<f64> {
    let n = cal.n;
    let c = &cal.conditional;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (c[i * n + j] + c[j * n + i]) / (2.0 * n as f64);
        }
    }
    p
}

/// Student-t kernel values `(1 + ‖y_i − y_j‖²)⁻¹` (zero diagonal) and their sum.
fn student_t(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, o) in row.iter_mut().enumerate() {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                *o = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    });
    let z = num.iter().sum();
    (num, z)
}

/// KL(P‖Q) for the embedding `y`, with terms where `p_ij = 0` omitted.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, z) = student_t(y);
    p.iter()
        .zip(&num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / z).max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Embeds `points` in two dimensions.
pub fn tsne(points: &[Vec<f64>], labels: &[usize], config: &TsneConfig) -> Result<Projection2D, DiagnosticsError> {
    if labels.len() != points.len() {
        return Err(DiagnosticsError::Dimension(format!(
            "{} labels for {} points",
            labels.len(),
            points.len()
        )));
    }
    let cal = calibrate(points, config.perplexity)?;
    let p = joint_probabilities(&cal);
    let n = points.len();
    let mut rng = seed::rng(config.seed, "tsne-init", &[]);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            [
                1e-4 * rng.sample::<f64, _>(StandardNormal),
                1e-4 * rng.sample::<f64, _>(StandardNormal),
            ]
        })
        .collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut initial_kl = None;
    for iter in 0..config.iterations {
        let exaggerate = iter < config.exaggeration_iters;
        if !exaggerate && initial_kl.is_none() {
            initial_kl = Some(kl_divergence(&p, &y));
        }
        let scale = if exaggerate { config.exaggeration } else { 1.0 };
        let momentum = if iter < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let (num, z) = student_t(&y);
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    let k = i * n + j;
                    let w = (scale * p[k] - num[k] / z) * num[k];
                    g[0] += w * (y[i][0] - y[j][0]);
                    g[1] += w * (y[i][1] - y[j][1]);
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();
        for i in 0..n {
            for a in 0..2 {
                if config.gains {
                    let gain = &mut gains[i][a];
                    *gain = if (grad[i][a] > 0.0) != (update[i][a] > 0.0) {
                        *gain + 0.2
                    } else {
                        (*gain * 0.8).max(0.01)
                    };
                }
                update[i][a] = momentum * update[i][a] - config.learning_rate * gains[i][a] * grad[i][a];
                y[i][a] += update[i][a];
            }
        }
        let mean = y.iter().fold([0.0; 2], |m, v| [m[0] + v[0], m[1] + v[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        for v in &mut y {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite("t-SNE coordinates"));
    }
    let final_kl = kl_divergence(&p, &y);
    Ok(Projection2D {
        coords: y,
        labels: labels.to_vec(),
        initial_kl: initial_kl.unwrap_or(final_kl),
        final_kl,
        config: config.clone(),
    })
}

/// Mean silhouette coefficient of a labeled 2-D embedding; singleton
/// clusters contribute 0.
pub fn silhouette(coords: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = coords.len();
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let total: f64 = (0..n)
        .map(|i| {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for j in (0..n).filter(|&j| j != i) {
                sums[labels[j]] += dist(&coords[i], &coords[j]);
                counts[labels[j]] += 1;
            }
            let own = labels[i];
            if counts[own] == 0 {
                return 0.0;
            }
            let a = sums[own] / counts[own] as f64;
            let b = (0..k)
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            (b - a) / a.max(b)
        })
        .sum();
    total / n as f64
}

impl Projection2D {
    /// `id,x,y,label` rows.
    pub fn write_csv(&self, ids: &[String], label_names: &[String], out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "x", "y", "label"])?;
        for ((id, c), &l) in ids.iter().zip(&self.coords).zip(&self.labels) {
            let name = label_names.get(l).cloned().unwrap_or_else(|| l.to_string());
            w.write_record([id.clone(), format!("{:.6}", c[0]), format!("{:.6}", c[1]), name])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed, "test", &[]);
        (0..n)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn joint_matrix_is_symmetric_with_unit_mass() {
        let pts = cloud(40, 5, 1);
        let p = joint_probabilities(&calibrate(&pts, 10.0).unwrap());
        let n = pts.len();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..n {
            assert_eq!(p[i * n + i], 0.0);
            for j in 0..n {
                assert_eq!(p[i * n + j], p[j * n + i]);
            }
        }
    }

    #[test]
    fn too_few_points_or_distinct_values_are_rejected() {
        assert!(matches!(
            calibrate(&cloud(30, 3, 0), 10.0),
            Err(DiagnosticsError::TooFewPoints { n: 30, .. })
        ));
        let mut pts = cloud(20, 3, 0);
        pts.extend(std::iter::repeat_n(vec![0.0, 0.0, 0.0], 20));
        let err = calibrate(&pts, 10.0).unwrap_err();
        assert!(matches!(err, DiagnosticsError::TooFewDistinct { distinct: 21, .. }));
        assert!(err.to_string().contains("jitter"));
        assert!(matches!(
            calibrate(&vec![vec![1.0]; 50], 5.0),
            Err(DiagnosticsError::Dimension(_))
        ));
    }

    #[test]
    fn silhouette_of_separated_and_mixed_clusters() {
        let coords = [[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]];
        assert!(silhouette(&coords, &[0, 0, 1, 1]) > 0.98);
        assert!(silhouette(&coords, &[0, 1, 0, 1]) < 0.0);
    }

    #[test]
    fn kl_is_zero_when_q_matches_p() {
        let y = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let (num, z) = student_t(&y);
        let p: Vec<f64> = num.iter().map(|v| v / z).collect();
        assert!(kl_divergence(&p, &y).abs() < 1e-15);
    }
}
