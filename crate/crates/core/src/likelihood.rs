//! The joint log-likelihood in (N, beta, tau) and its exact derivatives in
//! (N, beta) for fixed tau.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::special::{digamma, ln_gamma, trigamma};
use crate::Scalar;

/// Full parameter point: population size (continuous during optimization),
/// structural parameters beta = (zeta', lambda')', and stratum weights.
#[derive(Debug, Clone)]
pub struct Params<T> {
    pub n_pop: T,
    pub zeta: DVector<T>,
    pub lambda: DVector<T>,
    pub tau: DVector<T>,
}

impl<T: Scalar> Params<T> {
    pub fn beta(&self) -> DVector<T> {
        let mut out = DVector::zeros(self.zeta.len() + self.lambda.len());
        out.rows_mut(0, self.zeta.len()).copy_from(&self.zeta);
        out.rows_mut(self.zeta.len(), self.lambda.len())
            .copy_from(&self.lambda);
        out
    }

    pub fn with_beta(&self, beta: &DVector<T>) -> Params<T> {
        let dz = self.zeta.len();
        Params {
            n_pop: self.n_pop,
            zeta: DVector::from_iterator(dz, beta.iter().copied().take(dz)),
            lambda: DVector::from_iterator(beta.len() - dz, beta.iter().copied().skip(dz)),
            tau: self.tau.clone(),
        }
    }

    pub fn dim_beta(&self) -> usize {
        self.zeta.len() + self.lambda.len()
    }
}

/// Average never-capture probability phibar = tau' phi.
pub fn phi_bar<T: Scalar>(params: &Params<T>, state: &ModelState<T>) -> T {
    params.tau.dot(&state.phi)
}

/// Log-likelihood
/// L = log Gamma(N+1) - log Gamma(N-n+1) + (N-n) log(tau' phi)
///   + sum_i [y_i' log p_i + n_i log tau_i].
///
/// Returns negative infinity (a boundary, not an error) when some observed
/// configuration has zero probability.
pub fn log_likelihood<T: Scalar>(
    params: &Params<T>,
    state: &ModelState<T>,
    dataset: &Dataset<T>,
) -> T {
    let n_obs = T::from_u64(dataset.n_observed()).unwrap();
    let undercount = params.n_pop - n_obs;
    let phibar = phi_bar(params, state);

    let mut ll = ln_gamma(params.n_pop + T::one()) - ln_gamma(undercount + T::one());
    if undercount > T::zero() {
        if phibar <= T::zero() {
            return <T as Scalar>::neg_inf();
        }
        ll += undercount * phibar.ln();
    }
    let floor = T::c(1e-300);
    for (i, stratum) in dataset.strata.iter().enumerate() {
        for (cell, &count) in stratum.y.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let p = state.p[i][cell];
            if p < floor {
                return <T as Scalar>::neg_inf();
            }
            ll += T::from_u64(count).unwrap() * p.ln();
        }
        let tau_i = params.tau[i];
        if tau_i < floor {
            return <T as Scalar>::neg_inf();
        }
        ll += T::from_u64(stratum.n).unwrap() * tau_i.ln();
    }
    ll
}

/// Score with respect to beta:
/// s_beta = (N-n)/phibar Phi' tau + sum_i D_i' diag(p_i)^{-1} y_i.
pub fn score_beta<T: Scalar>(
    params: &Params<T>,
    state: &ModelState<T>,
    dataset: &Dataset<T>,
) -> Result<DVector<T>> {
    let dim = state.phi_grad.ncols();
    let n_obs = T::from_u64(dataset.n_observed()).unwrap();
    let undercount = params.n_pop - n_obs;
    let phibar = phi_bar(params, state);

    let mut score = DVector::zeros(dim);
    if undercount > T::zero() {
        if phibar <= T::zero() {
            return Err(Error::Boundary(
                "average never-capture probability is zero".into(),
            ));
        }
        score += state.phi_grad.tr_mul(&params.tau) * (undercount / phibar);
    }
    for (i, stratum) in dataset.strata.iter().enumerate() {
        for (cell, &count) in stratum.y.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let p = state.p[i][cell];
            if p <= T::zero() {
                return Err(Error::Boundary(format!(
                    "observed configuration {} in stratum {i} has zero probability",
                    cell + 1
                )));
            }
            let w = T::from_u64(count).unwrap() / p;
            score += state.d[i].row(cell).transpose() * w;
        }
    }
    Ok(score)
}

/// Expected information for beta at known tau:
/// F = N [Phi' tau tau' Phi / phibar + sum_i tau_i D_i' diag(p_i)^{-1} D_i].
pub fn expected_info_beta<T: Scalar>(params: &Params<T>, state: &ModelState<T>) -> DMatrix<T> {
    let dim = state.phi_grad.ncols();
    let phibar = phi_bar(params, state);
    let phit_tau = state.phi_grad.tr_mul(&params.tau);
    let mut info = &phit_tau * phit_tau.transpose() / phibar;
    for i in 0..state.n_strata() {
        let d = &state.d[i];
        let p = &state.p[i];
        let mut weighted = d.clone();
        for r in 0..weighted.nrows() {
            let w = params.tau[i] / p[r];
            weighted.row_mut(r).iter_mut().for_each(|e| *e *= w);
        }
        info += d.tr_mul(&weighted);
    }
    info *= params.n_pop;
    // enforce exact symmetry against accumulation order
    let mut sym = DMatrix::zeros(dim, dim);
    for r in 0..dim {
        for c in 0..dim {
            sym[(r, c)] = (info[(r, c)] + info[(c, r)]) * T::c(0.5);
        }
    }
    sym
}

/// Score for N: s_N = digamma(N+1) - digamma(N-n+1) + log(phibar).
pub fn score_n<T: Scalar>(n_pop: T, n_obs: T, phibar: T) -> Result<T> {
    if n_pop < n_obs {
        return Err(Error::Domain(
            "population size below observed count".into(),
        ));
    }
    Ok(digamma(n_pop + T::one()) - digamma(n_pop - n_obs + T::one()) + phibar.ln())
}

/// Observed information for N:
/// oF_N = trigamma(N-n+1) - trigamma(N+1), strictly positive.
pub fn obs_info_n<T: Scalar>(n_pop: T, n_obs: T) -> Result<T> {
    if n_pop < n_obs {
        return Err(Error::Domain(
            "population size below observed count".into(),
        ));
    }
    Ok(trigamma(n_pop - n_obs + T::one()) - trigamma(n_pop + T::one()))
}
