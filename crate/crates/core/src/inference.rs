//! Post-fit inference: the expected information of the profile likelihood,
//! its numerical observed counterpart, Wald standard errors, the
//! profile-likelihood confidence interval for N, a sampling-based
//! identifiability check, and a Kullback-Leibler model-comparison utility.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimate::{fit_with_fixed_n, FitOptions, FitResult};
use crate::likelihood::{phi_bar, score_beta, Params};
use crate::model::{model_state, ModelSpec};
use crate::special::chi2_quantile_1df;
use crate::tau::{solve_tau, tau_jacobian};
use crate::Scalar;

/// Expected-information blocks of the profile likelihood. The N-beta cross
/// block is zero by the asymptotic argument, so it is not stored.
#[derive(Debug, Clone)]
pub struct InfoMatrices<T> {
    /// F_NN = (1 - phibar)/phibar.
    pub f_nn: T,
    /// Per-unit expected information for beta, tau profiled out.
    pub f_bb: DMatrix<T>,
    /// sqrt(N phibar / (1 - phibar)); the Wald standard error of N.
    pub wald_se_n: Option<T>,
    /// sqrt(diag(F_bb^{-1}) / N).
    pub wald_se_beta: Option<DVector<T>>,
    pub warning: Option<String>,
}

/// Profile-likelihood confidence interval for N.
#[derive(Debug, Clone)]
pub struct ProfileCi<T> {
    pub level: T,
    pub lower: T,
    pub upper: T,
    /// Every profiled point (N, D_N) evaluated along the way.
    pub grid: Vec<(T, T)>,
    pub warnings: Vec<String>,
}

/// Expected information of the profile likelihood at the fitted point:
/// F_bb = sum_i tau_i D_i' diag(p_i)^{-1} D_i
///      + Phi' [(tau phi'/phibar - I) D_phi + tau tau'/phibar] Phi.
pub fn profile_expected_info<T: Scalar>(
    fit: &FitResult<T>,
    dataset: &Dataset<T>,
) -> Result<InfoMatrices<T>> {
    let params = &fit.params;
    let state = &fit.state;
    let s = state.n_strata();
    let dim = state.phi_grad.ncols();
    let phibar = phi_bar(params, state);
    let counts = dataset.counts();

    let mut f_bb: DMatrix<T> = DMatrix::zeros(dim, dim);
    for i in 0..s {
        let d = &state.d[i];
        let mut weighted = d.clone();
        for r in 0..weighted.nrows() {
            let w = params.tau[i] / state.p[i][r];
            weighted.row_mut(r).iter_mut().for_each(|e| *e *= w);
        }
        f_bb += d.tr_mul(&weighted);
    }

    let jac = tau_jacobian(&params.tau, &state.phi, params.n_pop, &counts)?;
    // middle = (tau phi'/phibar - I) D_phi + tau tau'/phibar
    let tau_phi = &params.tau * state.phi.transpose() / phibar;
    let middle = (tau_phi - DMatrix::identity(s, s)) * &jac.dphi
        + &params.tau * params.tau.transpose() / phibar;
    f_bb += state.phi_grad.tr_mul(&(middle * &state.phi_grad));

    // symmetrize against accumulation noise
    let f_bb = {
        let mut sym = DMatrix::zeros(dim, dim);
        for r in 0..dim {
            for c in 0..dim {
                sym[(r, c)] = (f_bb[(r, c)] + f_bb[(c, r)]) * T::c(0.5);
            }
        }
        sym
    };

    let f_nn = (T::one() - phibar) / phibar;
    let wald_se_n = Some((params.n_pop * phibar / (T::one() - phibar)).sqrt());
    let (wald_se_beta, warning) = match f_bb.clone().cholesky() {
        Some(chol) => {
            let inv = chol.inverse();
            let se = DVector::from_fn(dim, |j, _| (inv[(j, j)] / params.n_pop).sqrt());
            (Some(se), None)
        }
        None => (
            None,
            Some(
                "profile expected information is not positive definite; \
                 beta standard errors suppressed (possible identifiability problem)"
                    .into(),
            ),
        ),
    };
    Ok(InfoMatrices {
        f_nn,
        f_bb,
        wald_se_n,
        wald_se_beta,
        warning,
    })
}

/// Numerical observed information of the profile likelihood in beta: central
/// differences of the profile score s_beta(beta, tau_hat(beta)) at fixed N,
/// symmetrized.
pub fn profile_observed_info_beta<T: Scalar>(
    dataset: &Dataset<T>,
    spec: &ModelSpec<T>,
    fit: &FitResult<T>,
    step: T,
) -> Result<DMatrix<T>> {
    let counts = dataset.counts();
    let beta_hat = fit.params.beta();
    let dim = beta_hat.len();

    let profile_score = |beta: &DVector<T>, coord: usize| -> Result<DVector<T>> {
        let state = model_state(spec, dataset, beta)?;
        let sol = solve_tau(
            &state.phi,
            fit.params.n_pop,
            &counts,
            T::c(1e-13),
            50_000,
        )
        .map_err(|e| {
            Error::NoConvergence {
                iterations: 0,
                message: format!("tau solve failed while perturbing beta[{coord}]: {e}"),
            }
        })?;
        let params = Params {
            tau: sol.tau,
            ..fit.params.with_beta(beta)
        };
        score_beta(&params, &state, dataset)
    };

    let mut jac = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let mut hi = beta_hat.clone();
        hi[j] += step;
        let mut lo = beta_hat.clone();
        lo[j] -= step;
        let (sh, sl) = (profile_score(&hi, j)?, profile_score(&lo, j)?);
        for r in 0..dim {
            jac[(r, j)] = (sh[r] - sl[r]) / (step + step);
        }
    }
    // observed information is minus the symmetrized derivative
    let mut out = DMatrix::zeros(dim, dim);
    for r in 0..dim {
        for c in 0..dim {
            out[(r, c)] = -(jac[(r, c)] + jac[(c, r)]) * T::c(0.5);
        }
    }
    Ok(out)
}

/// Profile-likelihood confidence interval for N at the given level.
///
/// For each trial N the inner problem is re-maximized over (beta, tau), warm
/// started from the neighboring solution; the endpoints solve D_N = q by
/// bisection, with the lower endpoint floored at the observed count.
pub fn profile_ci_n<T: Scalar>(
    dataset: &Dataset<T>,
    spec: &ModelSpec<T>,
    fit: &FitResult<T>,
    level: T,
    options: &FitOptions<T>,
) -> Result<ProfileCi<T>> {
    if !(level > T::zero() && level < T::one()) {
        return Err(Error::Domain("confidence level must be in (0, 1)".into()));
    }
    let q = chi2_quantile_1df(level);
    let n_obs = T::from_u64(dataset.n_observed()).unwrap();
    let n_hat = fit.params.n_pop;
    let ll_hat = fit.loglik;

    // tightened inner tolerance keeps the profile smooth
    let inner_options = FitOptions {
        tol_loglik: T::c(1e-9),
        tol_param: T::c(1e-8),
        max_outer: options.max_outer.max(500),
        ..options.clone()
    };

    let mut grid: Vec<(T, T)> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut warm = fit.params.clone();
    let mut profile = |n_trial: T,
                       warm: &mut Params<T>,
                       grid: &mut Vec<(T, T)>,
                       warnings: &mut Vec<String>|
     -> Result<T> {
        let inner = fit_with_fixed_n(dataset, spec, n_trial, warm, &inner_options)?;
        *warm = inner.params.clone();
        let mut d = (ll_hat - inner.loglik) * T::c(2.0);
        if d < T::zero() {
            if d < T::c(-1e-6) {
                warnings.push(format!(
                    "profile found a better point at N = {:.3} (D_N = {:.3e}); \
                     the global fit may not be the maximum",
                    n_trial.to_f64().unwrap_or(f64::NAN),
                    d.to_f64().unwrap_or(f64::NAN)
                ));
            }
            d = T::zero();
        }
        grid.push((n_trial, d));
        Ok(d)
    };

    // ---- lower endpoint ----
    let lower = if n_hat - n_obs <= T::c(1e-9) {
        n_obs
    } else {
        let d_at_n = profile(n_obs, &mut warm, &mut grid, &mut warnings)?;
        if d_at_n <= q {
            // interval truncated at the observable floor
            n_obs
        } else {
            let mut lo = n_obs;
            let mut hi = n_hat;
            let mut warm_lo = warm.clone();
            for _ in 0..200 {
                let mid = (lo + hi) * T::c(0.5);
                let d = profile(mid, &mut warm_lo, &mut grid, &mut warnings)?;
                if d > q {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if (d - q).abs() <= T::c(1e-4) || hi - lo <= T::c(1e-7) * n_hat {
                    break;
                }
            }
            (lo + hi) * T::c(0.5)
        }
    };

    // ---- upper endpoint ----
    let mut warm_hi = fit.params.clone();
    let mut bracket_lo = n_hat;
    let mut bracket_hi = n_hat.max(n_obs + T::one()) * T::c(1.5);
    let cap = n_hat * T::c(100.0);
    let upper;
    loop {
        let d = profile(bracket_hi, &mut warm_hi, &mut grid, &mut warnings)?;
        if d > q {
            break;
        }
        bracket_lo = bracket_hi;
        bracket_hi *= T::c(1.5);
        if bracket_hi > cap {
            warnings.push(format!(
                "profile statistic stayed below the cutoff up to {:.1} times the estimate; \
                 interval unbounded above at this level",
                100.0
            ));
            break;
        }
    }
    if bracket_hi > cap {
        upper = bracket_hi;
    } else {
        let mut lo = bracket_lo;
        let mut hi = bracket_hi;
        for _ in 0..200 {
            let mid = (lo + hi) * T::c(0.5);
            let d = profile(mid, &mut warm_hi, &mut grid, &mut warnings)?;
            if d > q {
                hi = mid;
            } else {
                lo = mid;
            }
            if (d - q).abs() <= T::c(1e-4) || hi - lo <= T::c(1e-7) * n_hat {
                break;
            }
        }
        upper = (lo + hi) * T::c(0.5);
    }

    Ok(ProfileCi {
        level,
        lower,
        upper,
        grid,
        warnings,
    })
}

/// Identifiability report from sampling the expected information around the
/// estimate.
#[derive(Debug, Clone)]
pub struct IdentifiabilityReport<T> {
    pub points: Vec<IdentifiabilityPoint<T>>,
    pub any_flagged: bool,
    pub radius: T,
}

#[derive(Debug, Clone)]
pub struct IdentifiabilityPoint<T> {
    pub min_eigenvalue: T,
    pub max_eigenvalue: T,
    pub flagged: bool,
}

/// Sample beta points uniformly in a ball around the estimate and flag any
/// point where the expected information is near-singular
/// (min eigenvalue <= 1e-8 max eigenvalue).
pub fn identifiability_check<T: Scalar>(
    dataset: &Dataset<T>,
    spec: &ModelSpec<T>,
    fit: &FitResult<T>,
    n_points: usize,
    radius: T,
    seed: u64,
) -> Result<IdentifiabilityReport<T>> {
    let beta_hat = fit.params.beta();
    let dim = beta_hat.len();
    let counts = dataset.counts();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_points);
    let mut any_flagged = false;

    for point in 0..n_points {
        // uniform draw in the ball: gaussian direction, radius ~ u^(1/dim)
        let beta = if point == 0 {
            beta_hat.clone()
        } else {
            let mut dir = DVector::from_fn(dim, |_, _| {
                // Box-Muller from two uniforms
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                T::c((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
            });
            let norm = dir.norm();
            if norm > T::zero() {
                dir /= norm;
            }
            let u: f64 = rng.random();
            let r = radius * T::c(u.powf(1.0 / dim as f64));
            &beta_hat + dir * r
        };
        let state = model_state(spec, dataset, &beta)?;
        let sol = solve_tau(&state.phi, fit.params.n_pop, &counts, T::c(1e-12), 20_000)?;
        let params = Params {
            tau: sol.tau,
            ..fit.params.with_beta(&beta)
        };
        let info = crate::likelihood::expected_info_beta(&params, &state);
        let eig = info.symmetric_eigen();
        let min = eig.eigenvalues.iter().copied().fold(T::infinity(), |a, b| a.min(b));
        let max = eig.eigenvalues.iter().copied().fold(T::neg_inf(), |a, b| a.max(b));
        let flagged = min <= T::c(1e-8) * max;
        any_flagged |= flagged;
        points.push(IdentifiabilityPoint {
            min_eigenvalue: min,
            max_eigenvalue: max,
            flagged,
        });
    }
    Ok(IdentifiabilityReport {
        points,
        any_flagged,
        radius,
    })
}

/// N_A times the Kullback-Leibler divergence between the fitted manifest
/// distributions, accumulated over strata and all k configurations (the
/// never-captured cell included). Returns infinity when the B fit puts zero
/// mass where A does not.
pub fn kl_by_strata<T: Scalar>(fit_a: &FitResult<T>, fit_b: &FitResult<T>) -> Result<T> {
    let sa = &fit_a.state;
    let sb = &fit_b.state;
    if sa.n_strata() != sb.n_strata() {
        return Err(Error::Dimension(
            "fits compare different numbers of strata".into(),
        ));
    }
    let mut total = T::zero();
    for i in 0..sa.n_strata() {
        if sa.p[i].len() != sb.p[i].len() {
            return Err(Error::Dimension(
                "fits compare different configuration spaces".into(),
            ));
        }
        let mut div = T::zero();
        let cells = sa.p[i].len() + 1;
        for cell in 0..cells {
            let (pa, pb) = if cell == 0 {
                (sa.phi[i], sb.phi[i])
            } else {
                (sa.p[i][cell - 1], sb.p[i][cell - 1])
            };
            if pa <= T::zero() {
                continue;
            }
            if pb <= T::zero() {
                return Ok(T::infinity());
            }
            div += pa * (pa / pb).ln();
        }
        total += fit_a.params.tau[i] * div;
    }
    Ok(fit_a.params.n_pop * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{stratify, CaptureRecord};
    use crate::estimate::fit;
    use crate::model::{
        build_loglinear_design, ConditionalDesign, HistoryMatrix, LatentDesign, ModelSpec,
    };
    use approx::assert_relative_eq;

    fn small_fit() -> (Dataset<f64>, ModelSpec<f64>, FitResult<f64>) {
        let records = vec![
            CaptureRecord { history: vec![1, 1, 0], covariates: vec![] },
            CaptureRecord { history: vec![1, 0, 0], covariates: vec![] },
            CaptureRecord { history: vec![0, 1, 1], covariates: vec![] },
            CaptureRecord { history: vec![0, 0, 1], covariates: vec![] },
            CaptureRecord { history: vec![1, 1, 1], covariates: vec![] },
            CaptureRecord { history: vec![0, 1, 0], covariates: vec![] },
            CaptureRecord { history: vec![1, 0, 1], covariates: vec![] },
        ];
        let ds = stratify(&records).unwrap();
        let h = HistoryMatrix::build(3).unwrap();
        let design = build_loglinear_design(&h, &[]).unwrap();
        let spec = ModelSpec::new(
            1,
            LatentDesign::default(),
            ConditionalDesign::LogLinear(design),
            None,
        )
        .unwrap();
        let fitted = fit(&ds, &spec, &FitOptions::default()).unwrap();
        (ds, spec, fitted)
    }

    #[test]
    fn f_nn_at_one_half_is_one() {
        let phibar = 0.5;
        let f_nn = (1.0 - phibar) / phibar;
        assert_relative_eq!(f_nn, 1.0);
    }

    #[test]
    fn single_stratum_correction_reduces_to_rank_one_term() {
        // with s = 1 the D_phi part vanishes and the middle factor is
        // tau tau'/phibar = 1/phibar
        let (ds, _spec, fitted) = small_fit();
        let info = profile_expected_info(&fitted, &ds).unwrap();
        let state = &fitted.state;
        let dim = info.f_bb.nrows();
        let mut expect = DMatrix::<f64>::zeros(dim, dim);
        for r in 0..state.p[0].len() {
            let row = state.d[0].row(r);
            expect += row.transpose() * row / state.p[0][r];
        }
        let phi_row = state.phi_grad.row(0);
        expect += phi_row.transpose() * phi_row / state.phi[0];
        for r in 0..dim {
            for c in 0..dim {
                assert_relative_eq!(info.f_bb[(r, c)], expect[(r, c)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn profile_observed_matches_expected_for_single_stratum() {
        let (ds, spec, fitted) = small_fit();
        let obs = profile_observed_info_beta(&ds, &spec, &fitted, 1e-5).unwrap();
        let exp = profile_expected_info(&fitted, &ds).unwrap();
        // s = 1: no profiling effect; expected (per unit) times N approximates
        // the observed information at the MLE
        let scale = fitted.params.n_pop;
        for r in 0..obs.nrows() {
            for c in 0..obs.ncols() {
                let want = exp.f_bb[(r, c)] * scale;
                assert_relative_eq!(obs[(r, c)], want, max_relative = 0.10, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn profile_ci_contains_the_estimate_and_hits_the_cutoff() {
        let (ds, spec, fitted) = small_fit();
        let ci = profile_ci_n(&ds, &spec, &fitted, 0.90, &FitOptions::default()).unwrap();
        assert!(ci.lower <= fitted.params.n_pop);
        assert!(ci.upper >= fitted.params.n_pop);
        let q = chi2_quantile_1df(0.90);
        // endpoints satisfy D = q unless floored at n
        let n_obs = ds.n_observed() as f64;
        if ci.lower > n_obs + 1e-6 {
            let d_lower = ci
                .grid
                .iter()
                .filter(|(n, _)| (n - ci.lower).abs() < 1e-3 * fitted.params.n_pop)
                .map(|(_, d)| *d)
                .next()
                .unwrap();
            assert!((d_lower - q).abs() <= 1e-3);
        }
        let d_upper = ci
            .grid
            .iter()
            .filter(|(n, _)| (n - ci.upper).abs() < 1e-3 * fitted.params.n_pop)
            .map(|(_, d)| *d)
            .next()
            .unwrap();
        assert!((d_upper - q).abs() <= 1e-3);
        // D_N >= 0 on the whole grid
        assert!(ci.grid.iter().all(|&(_, d)| d >= 0.0));
    }

    #[test]
    fn identifiability_flags_duplicated_column() {
        use crate::model::{build_recursive_design, Coef, PartitionMatrices, Restriction};
        let h = HistoryMatrix::build(3).unwrap();
        let hv = PartitionMatrices::none(3).unwrap();
        let design = build_recursive_design(&h, &hv).unwrap();
        let restriction = Restriction {
            rows: vec![vec![vec![Coef::constant(1.0), Coef::constant(1.0)]]],
        };
        let spec = ModelSpec::new(
            1,
            LatentDesign::default(),
            ConditionalDesign::Recursive { partition: hv, design },
            Some(restriction),
        )
        .unwrap();
        let records = vec![
            CaptureRecord { history: vec![1, 0, 1], covariates: vec![] },
            CaptureRecord { history: vec![0, 1, 0], covariates: vec![] },
            CaptureRecord { history: vec![1, 1, 0], covariates: vec![] },
        ];
        let ds = stratify(&records).unwrap();
        let fitted = fit(&ds, &spec, &FitOptions::default()).unwrap();
        let report = identifiability_check(&ds, &spec, &fitted, 10, 0.1, 3).unwrap();
        assert!(report.any_flagged);
        assert!(report.points.iter().all(|p| p.flagged));
    }

    #[test]
    fn healthy_model_is_not_flagged() {
        let (ds, spec, fitted) = small_fit();
        let report = identifiability_check(&ds, &spec, &fitted, 10, 0.1, 3).unwrap();
        assert!(!report.any_flagged);
    }

    #[test]
    fn kl_divergence_of_a_fit_with_itself_is_zero() {
        let (_ds, _spec, fitted) = small_fit();
        let kl = kl_by_strata(&fitted, &fitted).unwrap();
        assert!(kl.abs() < 1e-12);

        // same distributions, different N: still zero
        let mut other = fitted.clone();
        other.params.n_pop += 5.0;
        let kl2 = kl_by_strata(&other, &fitted).unwrap();
        assert!(kl2.abs() < 1e-12);
    }
}
