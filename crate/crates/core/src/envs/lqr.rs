//! Infinite-horizon discrete LQR via the structured doubling algorithm.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Solves `P = AᵀPA - AᵀPB (R + BᵀPB)⁻¹ BᵀPA + Q` by structured doubling.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Config("lqr: R is singular".into()))?;
    let mut ak = a.clone();
    let mut gk = b * r_inv * b.transpose();
    let mut hk = q.clone();
    let eye = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iter {
        let w = (&eye + &gk * &hk)
            .try_inverse()
            .ok_or_else(|| Error::Config("lqr: doubling step singular".into()))?;
        let a_w = &ak * &w;
        let a_next = &a_w * &ak;
        let g_next = &gk + &a_w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        let delta = (&h_next - &hk).abs().max();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if delta <= tol * (1.0 + hk.abs().max()) {
            return Ok(hk);
        }
    }
    Err(Error::Config("lqr: doubling did not converge".into()))
}

/// Feedback gain `K = (R + BᵀPB)⁻¹ BᵀPA`; the control law is `u = -K x`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = solve_dare(a, b, q, r, 1e-14, 200)?;
    let lhs = r + b.transpose() * &p * b;
    let lhs_inv = lhs
        .try_inverse()
        .ok_or_else(|| Error::Config("lqr: R + BᵀPB is singular".into()))?;
    Ok(lhs_inv * b.transpose() * &p * a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{LinearSystemConfig, LinearSystemEnv};

    /// Plain fixed-point Riccati iteration.
    fn riccati_iteration_gain(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let mut p = q.clone();
        for _ in 0..100_000 {
            let inner = (r + b.transpose() * &p * b).try_inverse().unwrap();
            let next = a.transpose() * &p * a
                - a.transpose() * &p * b * &inner * b.transpose() * &p * a
                + q;
            let done = (&next - &p).abs().max() < 1e-15;
            p = next;
            if done {
                break;
            }
        }
        (r + b.transpose() * &p * b).try_inverse().unwrap() * b.transpose() * &p * a
    }

    #[test]
    fn identity_system_matches_riccati_iteration_and_golden_ratio() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let k = lqr_gain(&eye, &eye, &eye, &eye).unwrap();
        let oracle = riccati_iteration_gain(&eye, &eye, &eye, &eye);
        assert!((&k - &oracle).abs().max() < 1e-8);
        // Scalar DARE p² - p - 1 = 0, so K = φ / (1 + φ) = 1/φ.
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((k[(0, 0)] - 1.0 / phi).abs() < 1e-12);
        assert!(k[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn double_integrator_matches_riccati_iteration() {
        let env = LinearSystemEnv::new(&LinearSystemConfig::default()).unwrap();
        let k = lqr_gain(&env.a, &env.b, &env.q, &env.r).unwrap();
        let oracle = riccati_iteration_gain(&env.a, &env.b, &env.q, &env.r);
        assert!((&k - &oracle).abs().max() < 1e-8, "{k} vs {oracle}");
        // Closed loop is stable.
        let closed = &env.a - &env.b * &k;
        assert!(crate::envs::linear::spectral_radius(&closed) < 1.0);
    }
}
