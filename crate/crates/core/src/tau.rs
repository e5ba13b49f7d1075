//! Stratum-weight estimation for fixed (N, beta): the fixed-point update, the
//! hyperbola identity satisfied at convergence, the implicit equation linking
//! tau and phi, and the closed-form Jacobian d tau / d phi' obtained by
//! rank-one inversion.
//!
//! Ties (n_i > 1) are handled throughout in omega-space, omega_i = tau_i/n_i,
//! which reduces the algebra to the one-subject-per-stratum case; the
//! Jacobian maps back through D_phi(tau) = diag(n) D_omega.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::Scalar;

/// Converged stratum weights plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct TauSolution<T> {
    pub tau: DVector<T>,
    pub iterations: usize,
    /// l1 distance between the last two iterates.
    pub residual: T,
    /// max_i |tau_i - n_i phibar / (N phibar - (N - n) phi_i)|.
    pub hyperbola_residual: T,
}

/// d tau / d phi' and the quantities of its closed form (omega-space).
#[derive(Debug, Clone)]
pub struct TauJacobian<T> {
    pub dphi: DMatrix<T>,
    pub d0: DVector<T>,
    pub d1: DVector<T>,
    pub a: DVector<T>,
    pub g: T,
}

fn check_inputs<T: Scalar>(phi: &DVector<T>, n_pop: T, counts: &DVector<T>) -> Result<T> {
    if phi.len() != counts.len() {
        return Err(Error::Dimension(format!(
            "phi has {} strata, counts has {}",
            phi.len(),
            counts.len()
        )));
    }
    if phi.iter().any(|&p| p < T::zero() || p >= T::one()) {
        return Err(Error::Degenerate("phi entries must lie in [0, 1)".into()));
    }
    let n_obs: T = counts.iter().copied().sum();
    if n_pop < n_obs {
        return Err(Error::Domain(format!(
            "population size {} below observed count {}",
            n_pop.to_f64().unwrap_or(f64::NAN),
            n_obs.to_f64().unwrap_or(f64::NAN)
        )));
    }
    Ok(n_obs)
}

/// One step of the fixed-point update
/// tau' = (1/N) [n + (N - n)/phibar * diag(phi) tau].
pub fn update_tau<T: Scalar>(
    tau: &DVector<T>,
    phi: &DVector<T>,
    n_pop: T,
    counts: &DVector<T>,
) -> Result<DVector<T>> {
    let n_obs = check_inputs(phi, n_pop, counts)?;
    let phibar = tau.dot(phi);
    let undercount = n_pop - n_obs;
    if phibar <= T::zero() {
        if undercount == T::zero() {
            // no never-captured mass is needed; the update ignores phi
            return Ok(counts / n_pop);
        }
        return Err(Error::Degenerate(
            "average never-capture probability is zero".into(),
        ));
    }
    let scaled = undercount / phibar;
    Ok(DVector::from_fn(tau.len(), |i, _| {
        (counts[i] + scaled * phi[i] * tau[i]) / n_pop
    }))
}

/// max_i |tau_i - n_i phibar / (N phibar - (N - n) phi_i)| (Lemma 1 keeps the
/// denominator positive at any interior solution).
pub fn hyperbola_residual<T: Scalar>(
    tau: &DVector<T>,
    phi: &DVector<T>,
    n_pop: T,
    counts: &DVector<T>,
) -> T {
    let n_obs: T = counts.iter().copied().sum();
    let phibar = tau.dot(phi);
    let mut worst = T::zero();
    for i in 0..tau.len() {
        let denom = n_pop * phibar - (n_pop - n_obs) * phi[i];
        let res = (tau[i] - counts[i] * phibar / denom).abs();
        worst = worst.max(res);
    }
    worst
}

/// max_i |N phibar omega_i - phibar - (N - n) phi_i omega_i|, the omega-space
/// implicit equation.
pub fn implicit_residual<T: Scalar>(
    tau: &DVector<T>,
    phi: &DVector<T>,
    n_pop: T,
    counts: &DVector<T>,
) -> T {
    let n_obs: T = counts.iter().copied().sum();
    let phibar = tau.dot(phi);
    let mut worst = T::zero();
    for i in 0..tau.len() {
        let omega = tau[i] / counts[i];
        let res = (n_pop * phibar * omega - phibar - (n_pop - n_obs) * phi[i] * omega).abs();
        worst = worst.max(res);
    }
    worst
}

/// Iterate [`update_tau`] from tau = counts/n until the l1 change falls below
/// `tol`.
pub fn solve_tau<T: Scalar>(
    phi: &DVector<T>,
    n_pop: T,
    counts: &DVector<T>,
    tol: T,
    max_iter: usize,
) -> Result<TauSolution<T>> {
    let n_obs = check_inputs(phi, n_pop, counts)?;
    let mut tau = counts / n_obs;
    if n_pop == n_obs || phi.len() == 1 {
        // exact fixed point: tau_i = n_i / n (single stratum: tau = 1)
        let hyper = hyperbola_residual(&tau, phi, n_pop, counts);
        return Ok(TauSolution {
            tau,
            iterations: 1,
            residual: T::zero(),
            hyperbola_residual: hyper,
        });
    }
    let mut residual = T::zero();
    for it in 1..=max_iter {
        let next = update_tau(&tau, phi, n_pop, counts)?;
        residual = (&next - &tau).abs().sum();
        tau = next;
        if residual <= tol {
            let hyper = hyperbola_residual(&tau, phi, n_pop, counts);
            return Ok(TauSolution {
                tau,
                iterations: it,
                residual,
                hyperbola_residual: hyper,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        message: format!(
            "tau fixed point stalled with l1 change {:.3e}",
            residual.to_f64().unwrap_or(f64::NAN)
        ),
    })
}

/// Closed-form Jacobian d tau / d phi' at a solution of the implicit
/// equation, via rank-one inversion in omega-space.
pub fn tau_jacobian<T: Scalar>(
    tau: &DVector<T>,
    phi: &DVector<T>,
    n_pop: T,
    counts: &DVector<T>,
) -> Result<TauJacobian<T>> {
    let n_obs = check_inputs(phi, n_pop, counts)?;
    let s = tau.len();
    let undercount = n_pop - n_obs;
    let omega = DVector::from_fn(s, |i, _| tau[i] / counts[i]);
    let a = DVector::from_fn(s, |i, _| n_pop * omega[i] - T::one());
    let d1 = &omega * undercount;

    if s == 1 {
        // tau is identically 1; no dependence on phi
        return Ok(TauJacobian {
            dphi: DMatrix::zeros(1, 1),
            d0: DVector::from_element(1, n_pop * phi[0]),
            d1,
            a,
            g: T::one(),
        });
    }

    let phibar = tau.dot(phi);
    let d0 = DVector::from_fn(s, |i, _| n_pop * phibar - undercount * phi[i]);
    if d0.iter().any(|&v| v <= T::zero()) {
        return Err(Error::Invariant(
            "d0 has a non-positive entry, contradicting the positivity lemma".into(),
        ));
    }
    if undercount == T::zero() {
        // d1 = 0: tau is fixed at n_i/n whatever phi does
        return Ok(TauJacobian {
            dphi: DMatrix::zeros(s, s),
            d0,
            d1,
            a,
            g: T::one(),
        });
    }

    // psi = diag(n) phi plays the role of phi in the tied case
    let d0inv_psi = DVector::from_fn(s, |i, _| counts[i] * phi[i] / d0[i]);
    let g = T::one() + a.dot(&d0inv_psi);
    // u = diag(d0)^{-1} psi + diag(d1)^{-1} tau; the second term is n_i/(N-n)
    let u = DVector::from_fn(s, |i, _| d0inv_psi[i] + counts[i] / undercount);

    // D_omega = diag(d0)^{-1} [I - a u'/g] diag(d1); D_phi = diag(n) D_omega
    let dphi = DMatrix::from_fn(s, s, |r, c| {
        let bracket = if r == c {
            T::one() - a[r] * u[c] / g
        } else {
            -a[r] * u[c] / g
        };
        counts[r] * bracket * d1[c] / d0[r]
    });
    Ok(TauJacobian { dphi, d0, d1, a, g })
}

/// Conditional-MLE stratum weights, tau_i proportional to n_i/(1 - phi_i).
pub fn conditional_tau<T: Scalar>(phi: &DVector<T>, counts: &DVector<T>) -> Result<DVector<T>> {
    if phi.len() != counts.len() {
        return Err(Error::Dimension(format!(
            "phi has {} strata, counts has {}",
            phi.len(),
            counts.len()
        )));
    }
    if phi.iter().any(|&p| p >= T::one() || p < T::zero()) {
        return Err(Error::Degenerate(
            "conditional weights need phi in [0, 1)".into(),
        ));
    }
    let raw = DVector::from_fn(phi.len(), |i, _| counts[i] / (T::one() - phi[i]));
    let total: T = raw.iter().copied().sum();
    Ok(raw / total)
}
