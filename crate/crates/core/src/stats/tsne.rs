use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Entropy tolerance of the per-point bandwidth search, in nats.
const ENTROPY_TOL: f64 = 1e-5;
const MIN_GAIN: f64 = 0.01;
const INIT_SD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iter: usize,
    pub learning_rate: f64,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    /// Iteration at which momentum switches and exaggeration ends.
    pub switch_iter: usize,
    pub exaggeration: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_iter: 1000,
            learning_rate: 200.0,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            switch_iter: 250,
            exaggeration: 12.0,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 10 {
            return Err(CoreError::Empty(format!("t-SNE needs at least 10 points, got {n}")));
        }
        if !(self.perplexity > 1.0 && self.perplexity < n as f64 / 3.0) {
            return Err(CoreError::InfeasiblePerplexity {
                perplexity: self.perplexity,
                n,
            });
        }
        if self.n_iter < 250 {
            return Err(CoreError::InvalidConfig(format!("n_iter {} below 250", self.n_iter)));
        }
        if !(self.learning_rate > 0.0) || !(self.exaggeration >= 1.0) {
            return Err(CoreError::InvalidConfig("learning_rate and exaggeration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub points: Vec<[f64; 2]>,
    /// KL divergence of the starting layout, without exaggeration.
    pub initial_kl: f64,
    pub final_kl: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Copies of `x` in which exact duplicate rows are nudged apart by 1e-12
/// multiples in their first coordinate.
fn separate_duplicates(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = x.to_vec();
    for i in 1..out.len() {
        let mut k = 0;
        while out[..i].iter().any(|r| r == &out[i]) {
            k += 1;
            out[i][0] = x[i][0] + 1e-12 * k as f64;
        }
    }
    out
}

/// Gaussian conditional affinities `p_{j|i}` with each row's bandwidth
/// set by bisection so that its Shannon entropy equals `ln(perplexity)`.
pub fn conditional_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<Vec<Vec<f64>>> {
    let n = x.len();
    let target = perplexity.ln();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let d: Vec<f64> = (0..n).map(|j| if j == i { 0.0 } else { sq_dist(&x[i], &x[j]) }).collect();
        let d_min = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        let mut row = vec![0.0; n];
        let mut converged = false;
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                // shifting by the nearest distance keeps at least one term at 1
                let e = (-beta * (d[j] - d_min)).exp();
                row[j] = e;
                sum += e;
                weighted += e * (d[j] - d_min);
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for v in row.iter_mut() {
                *v /= sum;
            }
            if (entropy - target).abs() < ENTROPY_TOL {
                converged = true;
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        if !converged {
            return Err(CoreError::InfeasiblePerplexity { perplexity, n });
        }
        p[i] = row;
    }
    Ok(p)
}

/// Student-t kernel numerators `1 / (1 + |y_i - y_j|^2)` and their sum.
fn kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            total += 2.0 * v;
        }
    }
    (num, total)
}

fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, total) = kernel(y);
    p.iter()
        .zip(&num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &q)| pij * (pij / (q / total).max(f64::MIN_POSITIVE)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Exact t-SNE: symmetrized affinities, gradient descent with momentum and
/// per-coordinate gains, early exaggeration until `switch_iter`.
///
/// Rows are processed in lexicographic order and the layout is mapped back,
/// so permuting the input permutes the output exactly.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<Embedding2D> {
    let n = x.len();
    cfg.validate(n)?;
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|r| r.len() != dim) {
        return Err(CoreError::DimensionMismatch {
            expected: dim,
            got: x.iter().map(Vec::len).find(|&l| l != dim).unwrap_or(0),
        });
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidConfig("t-SNE input has non-finite values".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
    let fit = tsne_ordered(&separate_duplicates(&sorted), cfg)?;
    let mut points = vec![[0.0; 2]; n];
    for (k, &i) in order.iter().enumerate() {
        points[i] = fit.points[k];
    }
    Ok(Embedding2D { points, ..fit })
}

fn tsne_ordered(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<Embedding2D> {
    let n = x.len();
    let cond = conditional_affinities(x, cfg.perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
        p[i * n + i] = 0.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_SD).expect("positive sd");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let initial_kl = kl_divergence(&p, &y);
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0; 2]; n];
    for iter in 0..cfg.n_iter {
        let early = iter < cfg.switch_iter;
        let exaggeration = if early { cfg.exaggeration } else { 1.0 };
        let momentum = if early { cfg.momentum_initial } else { cfg.momentum_final };
        let (num, total) = kernel(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exaggeration * p[i * n + j] - num[i * n + j] / total) * num[i * n + j];
                g[0] += w * (y[i][0] - y[j][0]);
                g[1] += w * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for k in 0..2 {
                // grow the gain while the gradient keeps opposing the motion
                gains[i][k] = if (grad[i][k] > 0.0) != (velocity[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(MIN_GAIN)
                };
                velocity[i][k] = momentum * velocity[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += velocity[i][k];
            }
        }
        let mean = y.iter().fold([0.0; 2], |m, p| [m[0] + p[0], m[1] + p[1]]);
        for pt in y.iter_mut() {
            pt[0] -= mean[0] / n as f64;
            pt[1] -= mean[1] / n as f64;
        }
        if y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Diverged { epoch: iter });
        }
    }
    let final_kl = kl_divergence(&p, &y);
    Ok(Embedding2D {
        points: y,
        initial_kl,
        final_kl,
    })
}

/// Mean silhouette width of a labelled point set under Euclidean distance.
pub fn silhouette(points: &[[f64; 2]], labels: &[u8]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(CoreError::DimensionMismatch {
            expected: points.len(),
            got: labels.len(),
        });
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(CoreError::SingleClass("silhouette needs two clusters".into()));
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mean_to = |c: u8| {
            let (s, k) = points
                .iter()
                .zip(labels)
                .enumerate()
                .filter(|&(j, (_, &l))| l == c && j != i)
                .fold((0.0, 0usize), |(s, k), (_, (q, _))| (s + dist(p, q), k + 1));
            if k == 0 {
                None
            } else {
                Some(s / k as f64)
            }
        };
        let Some(a) = mean_to(labels[i]) else { continue };
        let b = classes
            .iter()
            .filter(|&&c| c != labels[i])
            .filter_map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}
