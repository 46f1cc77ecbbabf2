use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PermMode {
    /// Fixed random channel permutation.
    #[default]
    Hard,
    /// Fixed random orthogonal mixing matrix.
    Orthogonal,
}

/// Builds the fixed `d x d` channel-mixing matrix applied as `z · P`.
/// Both modes are orthogonal, so the inverse is `P^T` and `log|det P| = 0`.
pub fn mixing_matrix<T: Scalar, R: Rng + ?Sized>(dim: usize, mode: PermMode, rng: &mut R) -> Tensor<T> {
    match mode {
        PermMode::Hard => {
            let mut perm: Vec<usize> = (0..dim).collect();
            perm.shuffle(rng);
            // out[:, j] = in[:, perm[j]]
            let mut m = Tensor::zeros(dim, dim);
            for (j, &src) in perm.iter().enumerate() {
                m.set(src, j, T::one());
            }
            m
        }
        PermMode::Orthogonal => {
            let gauss: Vec<f64> = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
            orthonormalize(&gauss, dim).cast()
        }
    }
}

/// Q factor of a square matrix by modified Gram-Schmidt on its columns, with
/// column signs chosen so that diag(R) > 0 (makes Q unique).
fn orthonormalize(a: &[f64], n: usize) -> Tensor<f64> {
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a[i * n + j]).collect()).collect();
    for j in 0..n {
        for k in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let dot: f64 = done[k].iter().zip(&rest[0]).map(|(x, y)| x * y).sum();
            for (v, q) in rest[0].iter_mut().zip(&done[k]) {
                *v -= dot * q;
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    Tensor::from_fn(n, n, |i, j| cols[j][i])
}

/// For a hard permutation matrix, the source channel of each output column.
pub fn as_permutation<T: Scalar>(m: &Tensor<T>) -> Option<Vec<usize>> {
    let n = m.rows();
    let mut perm = vec![usize::MAX; n];
    for j in 0..n {
        let mut src = None;
        for i in 0..n {
            let v = m.get(i, j);
            if v == T::one() {
                if src.is_some() {
                    return None;
                }
                src = Some(i);
            } else if v != T::zero() {
                return None;
            }
        }
        perm[j] = src?;
    }
    let mut seen = vec![false; n];
    for &p in &perm {
        if std::mem::replace(&mut seen[p], true) {
            return None;
        }
    }
    Some(perm)
}
