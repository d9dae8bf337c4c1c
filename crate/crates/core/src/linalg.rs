//! Small dense linear algebra: LU inverse and a power-iteration spectral norm.
//!
//! Matrices here stay at or below 32x32 (orthogonal-transform blocks), so a
//! plain partially pivoted LU is both adequate and easy to audit.

use crate::tensor::{NumArray, TensorError};

/// Condition-estimate ceiling above which inversion is refused.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Inverse of a square, well-conditioned matrix via partially pivoted LU.
///
/// Fails with [`TensorError::Singular`] when a pivot vanishes or the 1-norm
/// condition estimate `|A|_1 * |A^-1|_1` exceeds [`CONDITION_LIMIT`]; the
/// estimate travels with the error.
pub fn lu_inverse(a: &NumArray) -> Result<NumArray, TensorError> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(TensorError::NotSquare { rows, cols });
    }
    let n = rows;
    if n == 0 {
        return Ok(NumArray::zeros(0, 0));
    }

    // In-place factorization of a working copy: L (unit diagonal) below, U on
    // and above the diagonal, with row pivots.
    let mut lu = a.data().to_vec();
    let mut pivot: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut p = k;
        let mut best = lu[k * n + k].abs();
        for r in (k + 1)..n {
            let v = lu[r * n + k].abs();
            if v > best {
                best = v;
                p = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return Err(TensorError::Singular { condition: f64::INFINITY });
        }
        if p != k {
            for c in 0..n {
                lu.swap(k * n + c, p * n + c);
            }
            pivot.swap(k, p);
        }
        let d = lu[k * n + k];
        for r in (k + 1)..n {
            let m = lu[r * n + k] / d;
            lu[r * n + k] = m;
            for c in (k + 1)..n {
                lu[r * n + c] -= m * lu[k * n + c];
            }
        }
    }

    // Solve A x = e_j for each unit vector to assemble the inverse.
    let mut inv = NumArray::zeros(n, n);
    let mut x = vec![0.0; n];
    for j in 0..n {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = if pivot[i] == j { 1.0 } else { 0.0 };
        }
        for i in 1..n {
            let mut s = x[i];
            for c in 0..i {
                s -= lu[i * n + c] * x[c];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for c in (i + 1)..n {
                s -= lu[i * n + c] * x[c];
            }
            x[i] = s / lu[i * n + i];
        }
        for i in 0..n {
            inv.set(i, j, x[i]);
        }
    }

    if !inv.all_finite() {
        return Err(TensorError::Singular { condition: f64::INFINITY });
    }
    let condition = norm_1(a) * norm_1(&inv);
    if !condition.is_finite() || condition > CONDITION_LIMIT {
        return Err(TensorError::Singular { condition });
    }
    Ok(inv)
}

/// Matrix 1-norm (maximum absolute column sum).
pub fn norm_1(a: &NumArray) -> f64 {
    let (rows, cols) = a.shape();
    (0..cols)
        .map(|c| (0..rows).map(|r| a.get(r, c).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest singular value by power iteration on `A^T A`.
pub fn spectral_norm(a: &NumArray, iterations: usize) -> f64 {
    let (_, cols) = a.shape();
    if a.len() == 0 {
        return 0.0;
    }
    // Deterministic start vector; skewed so it is not orthogonal to the top
    // singular direction for the structured matrices used in tests.
    let mut v = NumArray::from_fn(cols, 1, |r, _| 1.0 + (r as f64 + 1.0).sqrt());
    let norm = v.l2_norm();
    v = v.scale(1.0 / norm);
    let at = a.transpose();
    let mut sigma_sq = 0.0;
    for _ in 0..iterations {
        let w = at.matmul(&a.matmul(&v).unwrap()).unwrap();
        let n = w.l2_norm();
        if n == 0.0 {
            return 0.0;
        }
        sigma_sq = n;
        v = w.scale(1.0 / n);
    }
    sigma_sq.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_rng, standard_normal};

    #[test]
    fn inverse_of_identity() {
        let i3 = NumArray::identity(3);
        assert_eq!(lu_inverse(&i3).unwrap(), i3);
    }

    #[test]
    fn inverse_of_diagonal() {
        let a = NumArray::new(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let inv = lu_inverse(&a).unwrap();
        assert_eq!(inv.data(), &[0.5, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn rank_deficient_is_singular() {
        let a = NumArray::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        match lu_inverse(&a) {
            Err(TensorError::Singular { .. }) => {}
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn ill_conditioned_carries_estimate() {
        let a = NumArray::new(2, 2, vec![1.0, 1.0, 1.0, 1.0 + 1e-14]).unwrap();
        match lu_inverse(&a) {
            Err(TensorError::Singular { condition }) => assert!(condition > CONDITION_LIMIT),
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn random_inverse_residual() {
        let mut rng = seeded_rng(7);
        for &n in &[1usize, 3, 8, 17, 32] {
            // Diagonally dominated so the draw is well-conditioned.
            let mut a = standard_normal(n, n, &mut rng);
            for i in 0..n {
                let v = a.get(i, i);
                a.set(i, i, v + n as f64);
            }
            let inv = lu_inverse(&a).unwrap();
            let residual = inv.matmul(&a).unwrap().sub(&NumArray::identity(n)).unwrap();
            assert!(residual.max_abs() < 1e-8, "n={n} residual={}", residual.max_abs());
        }
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = NumArray::new(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((spectral_norm(&a, 200) - 3.0).abs() < 1e-9);
    }
}
