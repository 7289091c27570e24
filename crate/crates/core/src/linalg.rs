//! Small dense linear algebra used by verification oracles.

/// Singular values of a row-major `rows x cols` matrix, descending.
///
/// One-sided Jacobi: orthogonalize column pairs until all inner products
/// vanish, then read singular values off as column norms. Working on the
/// matrix itself (not the Gram matrix) keeps tiny singular values accurate
/// near machine precision, which the low-rank contract checks rely on.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    let mut m = a.to_vec();
    let col = |m: &[f64], j: usize| -> Vec<f64> { (0..rows).map(|r| m[r * cols + j]).collect() };
    let _ = col;

    let dot = |m: &[f64], p: usize, q: usize| -> f64 {
        let mut s = 0.0;
        for r in 0..rows {
            s += m[r * cols + p] * m[r * cols + q];
        }
        s
    };

    let max_sweeps = 60;
    let tol = 1e-15;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let app = dot(&m, p, p);
                let aqq = dot(&m, q, q);
                let apq = dot(&m, p, q);
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let vp = m[r * cols + p];
                    let vq = m[r * cols + q];
                    m[r * cols + p] = c * vp - s * vq;
                    m[r * cols + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..cols).map(|j| dot(&m, j, j).sqrt()).collect();
    sigma.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sigma
}

/// Dense `rows x cols` product of `b [rows,k] * diag(lam) * a [k,cols]`.
pub fn low_rank_product(
    b: &[f64],
    lam: &[f64],
    a: &[f64],
    rows: usize,
    k: usize,
    cols: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for v in 0..k {
            let w = b[r * k + v] * lam[v];
            if w == 0.0 {
                continue;
            }
            for c in 0..cols {
                out[r * cols + c] += w * a[v * cols + c];
            }
        }
    }
    out
}

/// Worst trailing singular value of random `beta diag(lam) alpha` operators:
/// everything past index `v` must be numerically zero.
pub fn low_rank_oracle(d: usize, v: usize, trials: usize, seed: u64) -> f64 {
    let mut s = crate::rng::Stream::new("oracle-lowrank", seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let beta = s.normal_vec(d * v);
        let lam = s.normal_vec(v);
        let alpha = s.normal_vec(v * d);
        let dense = low_rank_product(&beta, &lam, &alpha, d, v, d);
        let sigma = singular_values(&dense, d, d);
        for &sv in &sigma[v..] {
            worst = worst.max(sv);
        }
    }
    worst
}
