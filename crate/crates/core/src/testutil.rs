//! Dense reference computations used only by tests. Gauss–Jordan with
//! partial pivoting, deliberately independent of the Cholesky routines.

pub fn dense_inverse(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&p, &q| m[p * n + col].abs().total_cmp(&m[q * n + col].abs()))
            .unwrap();
        for k in 0..n {
            m.swap(col * n + k, piv * n + k);
            inv.swap(col * n + k, piv * n + k);
        }
        let d = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                if f != 0.0 {
                    for k in 0..n {
                        m[r * n + k] -= f * m[col * n + k];
                        inv[r * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
    }
    inv
}

/// log |det A| via Gaussian elimination with partial pivoting.
pub fn dense_log_det(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&p, &q| m[p * n + col].abs().total_cmp(&m[q * n + col].abs()))
            .unwrap();
        for k in 0..n {
            m.swap(col * n + k, piv * n + k);
        }
        let d = m[col * n + col];
        acc += d.abs().ln();
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
        }
    }
    acc
}

/// Dense zero-mean Gaussian negative log-likelihood.
pub fn dense_mvn_nll(cov: &[f64], n: usize, y: &[f64]) -> f64 {
    let inv = dense_inverse(cov, n);
    let quad: f64 = (0..n)
        .map(|i| (0..n).map(|j| y[i] * inv[i * n + j] * y[j]).sum::<f64>())
        .sum();
    0.5 * dense_log_det(cov, n) + 0.5 * quad + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Conditional law of entry `i` given entries `c` by explicit inversion.
pub fn dense_conditional(cov: &[f64], n: usize, i: usize, c: &[usize]) -> (Vec<f64>, f64) {
    let k = c.len();
    let mut scc = vec![0.0; k * k];
    for (a, &ca) in c.iter().enumerate() {
        for (b, &cb) in c.iter().enumerate() {
            scc[a * k + b] = cov[ca * n + cb];
        }
    }
    let inv = dense_inverse(&scc, k);
    let sci: Vec<f64> = c.iter().map(|&ca| cov[ca * n + i]).collect();
    let beta: Vec<f64> = (0..k)
        .map(|a| (0..k).map(|b| inv[a * k + b] * sci[b]).sum())
        .collect();
    let var = cov[i * n + i] - beta.iter().zip(&sci).map(|(p, q)| p * q).sum::<f64>();
    (beta, var.sqrt())
}
