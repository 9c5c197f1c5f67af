//! Reference computations written independently of the production paths,
//! used by the self-test suite and the test suites.

use crate::linalg::{solve_psd, Gaussian, LinalgError, Mat};

/// Classical Kalman prediction `(A μ + B a, A P Aᵀ + Q)`.
pub fn kalman_predict(a: &Mat, b: &Mat, q: &Mat, prev: &Gaussian, action: &[f64]) -> Gaussian {
    let mean: Vec<f64> = a
        .mul_vec(&prev.mean)
        .unwrap()
        .iter()
        .zip(b.mul_vec(action).unwrap())
        .map(|(x, y)| x + y)
        .collect();
    let cov = a
        .matmul(&prev.cov)
        .unwrap()
        .matmul(&a.transpose())
        .unwrap()
        .add(q)
        .unwrap()
        .symmetrize();
    Gaussian { mean, cov }
}

/// Classical Kalman measurement update with an explicit observation matrix
/// `h` (k × D), measurement `y` (k) and measurement noise `r` (k × k).
pub fn kalman_update(prior: &Gaussian, h: &Mat, y: &[f64], r: &Mat) -> Result<Gaussian, LinalgError> {
    if h.rows() == 0 {
        return Ok(prior.clone());
    }
    let p = &prior.cov;
    let ht = h.transpose();
    let s = h.matmul(p)?.matmul(&ht)?.add(r)?.symmetrize();
    // K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ.
    let k = solve_psd(&s, &h.matmul(p)?)?.transpose();
    let hx = h.mul_vec(&prior.mean)?;
    let innov: Vec<f64> = y.iter().zip(hx).map(|(a, b)| a - b).collect();
    let shift = k.mul_vec(&innov)?;
    let mean = prior.mean.iter().zip(shift).map(|(m, s)| m + s).collect();
    let ikh = Mat::identity(p.rows()).sub(&k.matmul(h)?)?;
    let cov = ikh.matmul(p)?.symmetrize();
    Ok(Gaussian { mean, cov })
}

/// Closed-form conditioning of a bivariate Gaussian on a noisy reading
/// `y = s[observed] + ε`, `ε ~ N(0, noise_var)`. Returns the posterior mean
/// and covariance.
pub fn conjugate_condition_2d(
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
    noise_var: f64,
    observed: usize,
    y: f64,
) -> ([f64; 2], [[f64; 2]; 2]) {
    let o = observed;
    let u = 1 - observed;
    let s = cov[o][o] + noise_var;
    let k_o = cov[o][o] / s;
    let k_u = cov[u][o] / s;
    let r = y - mean[o];
    let mut m = mean;
    m[o] += k_o * r;
    m[u] += k_u * r;
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = cov[i][j] - cov[i][o] * cov[o][j] / s;
        }
    }
    (m, c)
}

/// Posterior moments of a bivariate Gaussian prior given a noisy reading of
/// one coordinate, by midpoint quadrature of the unnormalised posterior over
/// `±half_width` prior standard deviations.
pub fn quadrature_condition_2d(
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
    noise_var: f64,
    observed: usize,
    y: f64,
    points: usize,
    half_width: f64,
) -> ([f64; 2], [[f64; 2]; 2]) {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let inv = [
        [cov[1][1] / det, -cov[0][1] / det],
        [-cov[1][0] / det, cov[0][0] / det],
    ];
    let sd = [cov[0][0].sqrt(), cov[1][1].sqrt()];
    let lo = [mean[0] - half_width * sd[0], mean[1] - half_width * sd[1]];
    let step = [2.0 * half_width * sd[0] / points as f64, 2.0 * half_width * sd[1] / points as f64];
    let (mut w_sum, mut m1, mut m2) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
    for i in 0..points {
        let x0 = lo[0] + (i as f64 + 0.5) * step[0];
        for j in 0..points {
            let x1 = lo[1] + (j as f64 + 0.5) * step[1];
            let d = [x0 - mean[0], x1 - mean[1]];
            let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1])
                + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
            let x = [x0, x1];
            let e = y - x[observed];
            let w = (-0.5 * q - 0.5 * e * e / noise_var).exp();
            w_sum += w;
            for a in 0..2 {
                m1[a] += w * x[a];
                for b in 0..2 {
                    m2[a][b] += w * x[a] * x[b];
                }
            }
        }
    }
    let m = [m1[0] / w_sum, m1[1] / w_sum];
    let mut c = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            c[a][b] = m2[a][b] / w_sum - m[a] * m[b];
        }
    }
    (m, c)
}

/// `Â_t = Σ_k (γλ)^k δ_{t+k}` by explicit double summation, stopping after
/// the first done flag at or after `t`.
pub fn gae_brute_force(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = if dones[t] { 0.0 } else { values[t + 1] };
            rewards[t] + gamma * next - values[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for k in t..n {
                total += (gamma * lambda).powi((k - t) as i32) * delta[k];
                if dones[k] {
                    break;
                }
            }
            total
        })
        .collect()
}

/// Discounted Monte-Carlo return minus the value baseline, on an episode that
/// ends in a terminal state after the last reward.
pub fn monte_carlo_advantage(rewards: &[f64], values: &[f64], gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| {
            let ret: f64 = rewards[t..]
                .iter()
                .enumerate()
                .map(|(k, r)| gamma.powi(k as i32) * r)
                .sum();
            ret - values[t]
        })
        .collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(m: &Mat) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| m[(i, j)]).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        let m = Mat::from_rows(&[[2.0, 1.0], [1.0, 2.0]]);
        let ev = symmetric_eigenvalues(&m);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
        let d = Mat::from_diag(&[-0.5, 4.0, 1.0]);
        assert_eq!(symmetric_eigenvalues(&d), vec![-0.5, 1.0, 4.0]);
    }

    #[test]
    fn conjugate_matches_quadrature() {
        let mean = [0.3, -0.5];
        let cov = [[1.0, 0.6], [0.6, 2.0]];
        let (m, c) = conjugate_condition_2d(mean, cov, 0.25, 0, 1.1);
        let (mq, cq) = quadrature_condition_2d(mean, cov, 0.25, 0, 1.1, 400, 8.0);
        for a in 0..2 {
            assert!((m[a] - mq[a]).abs() < 1e-4);
            for b in 0..2 {
                assert!((c[a][b] - cq[a][b]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn kalman_update_without_rows_is_identity() {
        let g = Gaussian::standard(2);
        let h = Mat::zeros(0, 2);
        let r = Mat::zeros(0, 0);
        assert_eq!(kalman_update(&g, &h, &[], &r).unwrap(), g);
    }

    #[test]
    fn brute_force_gae_single_terminal() {
        assert_eq!(gae_brute_force(&[2.0], &[0.5, 3.0], &[true], 0.9, 0.9), vec![1.5]);
    }
}
