use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::training::derive_seed;

pub const DEFAULT_PERMUTATIONS: usize = 9_999;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MantelResult {
    pub r: f64,
    /// `(#{r_perm >= r} + 1) / (n_perms + 1)`.
    pub p: f64,
    pub n_perms: usize,
}

/// Euclidean distance matrix of the rows of `x`.
pub fn euclidean_distances(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

fn check_distance_matrix(d: &[Vec<f64>], which: &str) -> Result<()> {
    let n = d.len();
    let bad = |m: String| Err(CoreError::InvalidDistanceMatrix(format!("{which}: {m}")));
    if d.iter().any(|r| r.len() != n) {
        return bad("not square".into());
    }
    for i in 0..n {
        if d[i][i] != 0.0 {
            return bad(format!("diagonal entry {i} is {}", d[i][i]));
        }
        for j in i + 1..n {
            let (a, b) = (d[i][j], d[j][i]);
            if !a.is_finite() || !b.is_finite() {
                return bad(format!("entry ({i}, {j}) is not finite"));
            }
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return bad(format!("asymmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

/// Pearson correlation of the upper triangles, with `b` read through the
/// row/column relabeling `perm`.
fn upper_correlation(a: &[Vec<f64>], b: &[Vec<f64>], perm: &[usize]) -> f64 {
    let n = a.len();
    let m = (n * (n - 1) / 2) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let x = a[i][j];
            let y = b[perm[i]][perm[j]];
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
    }
    let cov = sab - sa * sb / m;
    let va = saa - sa * sa / m;
    let vb = sbb - sb * sb / m;
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

fn spread(d: &[Vec<f64>]) -> bool {
    let n = d.len();
    let first = d[0][1];
    (0..n).any(|i| (i + 1..n).any(|j| d[i][j] != first))
}

/// Permutation test of the correlation between two distance matrices.
/// Permutation `k` relabels `dist_b` jointly by rows and columns using a
/// generator seeded from `(seed, k)`.
pub fn mantel_test(dist_a: &[Vec<f64>], dist_b: &[Vec<f64>], n_perms: usize, seed: u64) -> Result<MantelResult> {
    check_distance_matrix(dist_a, "first matrix")?;
    check_distance_matrix(dist_b, "second matrix")?;
    let n = dist_a.len();
    if dist_b.len() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: dist_b.len(),
        });
    }
    if n < 3 {
        return Err(CoreError::InvalidDistanceMatrix(format!("{n} points, need at least 3")));
    }
    if n_perms == 0 {
        return Err(CoreError::InvalidConfig("n_perms must be positive".into()));
    }
    if !spread(dist_a) || !spread(dist_b) {
        return Err(CoreError::DegenerateVariance("all off-diagonal distances are equal".into()));
    }
    let identity: Vec<usize> = (0..n).collect();
    let r = upper_correlation(dist_a, dist_b, &identity);
    let exceed = (0..n_perms as u64)
        .into_par_iter()
        .filter(|&k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k));
            let mut perm = identity.clone();
            perm.shuffle(&mut rng);
            upper_correlation(dist_a, dist_b, &perm) >= r
        })
        .count();
    Ok(MantelResult {
        r,
        p: (exceed + 1) as f64 / (n_perms + 1) as f64,
        n_perms,
    })
}
