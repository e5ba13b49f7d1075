//! Joint maximum-likelihood estimation of (N, beta, tau): Fisher scoring for
//! beta, the fixed-point solve for tau, and one-dimensional scoring for N,
//! cycled to joint convergence. Each block is monotone in the likelihood.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::{
    expected_info_beta, log_likelihood, obs_info_n, phi_bar, score_beta, score_n, Params,
};
use crate::model::{model_state, ModelSpec, ModelState};
use crate::special::ln_gamma;
use crate::tau::solve_tau;
use crate::Scalar;

/// Step-length schedule for the N update: a_u = 1 - damping/u, so the first
/// step is damped and later steps tend to a full Newton step.
#[derive(Debug, Clone, Copy)]
pub struct StepSchedule {
    pub damping: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule { damping: 0.5 }
    }
}

impl StepSchedule {
    pub fn length<T: Scalar>(&self, u: usize) -> T {
        T::one() - T::c(self.damping) / T::usize(u.max(1))
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions<T> {
    pub tol_loglik: T,
    pub tol_param: T,
    pub max_outer: usize,
    pub step: StepSchedule,
    pub seed: u64,
    pub n_starts: usize,
    pub inits: Option<Params<T>>,
    pub tau_tol: T,
    pub tau_max_iter: usize,
    /// Fisher-scoring iterations per beta block.
    pub max_beta_inner: usize,
}

impl<T: Scalar> Default for FitOptions<T> {
    fn default() -> Self {
        FitOptions {
            tol_loglik: T::c(1e-8),
            tol_param: T::c(1e-7),
            max_outer: 500,
            step: StepSchedule::default(),
            seed: 0,
            n_starts: 1,
            inits: None,
            tau_tol: T::c(1e-12),
            tau_max_iter: 10_000,
            max_beta_inner: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceReason {
    Converged,
    MaxOuterReached,
    StepFailure,
}

#[derive(Debug, Clone)]
pub struct TraceEntry<T> {
    pub outer: usize,
    pub loglik: T,
    pub score_beta_sup: T,
    pub n_pop: T,
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub params: Params<T>,
    pub loglik: T,
    pub converged: bool,
    pub reason: ConvergenceReason,
    pub trace: Vec<TraceEntry<T>>,
    pub state: ModelState<T>,
    pub warnings: Vec<String>,
    /// Best log-likelihood reached from each start.
    pub start_logliks: Vec<T>,
}

/// Starting point: tau proportional to counts, beta a small seeded
/// perturbation of zero, and N = n/(1 - phibar) floored at n + 1.
pub fn initialize<T: Scalar>(
    dataset: &Dataset<T>,
    spec: &ModelSpec<T>,
    seed: u64,
) -> Result<Params<T>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dim_zeta = spec.dim_zeta();
    let dim_lambda = spec.dim_lambda();
    let draw = |rng: &mut ChaCha12Rng| T::c(rng.random::<f64>() * 0.2 - 0.1);
    let zeta = DVector::from_fn(dim_zeta, |_, _| draw(&mut rng));
    let lambda = DVector::from_fn(dim_lambda, |_, _| draw(&mut rng));
    let counts = dataset.counts();
    let n_obs: T = counts.iter().copied().sum();
    let tau = &counts / n_obs;

    let mut beta = DVector::zeros(dim_zeta + dim_lambda);
    beta.rows_mut(0, dim_zeta).copy_from(&zeta);
    beta.rows_mut(dim_zeta, dim_lambda).copy_from(&lambda);
    let state = model_state(spec, dataset, &beta)?;
    let phibar = tau.dot(&state.phi);
    let n_pop = (n_obs / (T::one() - phibar)).max(n_obs + T::one());
    Ok(Params {
        n_pop,
        zeta,
        lambda,
        tau,
    })
}

/// Outcome of one accepted Fisher-scoring step.
#[derive(Debug, Clone)]
pub struct BetaStep<T> {
    pub beta: DVector<T>,
    pub state: ModelState<T>,
    pub loglik: T,
    /// Ridge fallback was needed to factorize the expected information.
    pub ridged: bool,
}

/// One Fisher-scoring update of beta with step halving; the returned point
/// never has lower likelihood than the input.
pub fn fisher_step_beta<T: Scalar>(
    params: &Params<T>,
    state: &ModelState<T>,
    dataset: &Dataset<T>,
    spec: &ModelSpec<T>,
) -> Result<BetaStep<T>> {
    let score = score_beta(params, state, dataset)?;
    let info = expected_info_beta(params, state);
    let dim = info.nrows();

    let mut ridged = false;
    let direction = match info.clone().cholesky() {
        Some(chol) => chol.solve(&score),
        None => {
            ridged = true;
            let eps = T::c(1e-8) * info.trace() / T::usize(dim);
            let ridge = &info + DMatrix::identity(dim, dim) * eps;
            ridge
                .cholesky()
                .ok_or_else(|| {
                    Error::StepFailure("expected information is not factorizable".into())
                })?
                .solve(&score)
        }
    };

    let beta0 = params.beta();
    let ll0 = log_likelihood(params, state, dataset);
    let mut alpha = T::one();
    for _ in 0..=20 {
        let beta_new = &beta0 + &direction * alpha;
        if let Ok(state_new) = model_state(spec, dataset, &beta_new) {
            let params_new = params.with_beta(&beta_new);
            let ll_new = log_likelihood(&params_new, &state_new, dataset);
            if ll_new.is_finite() && ll_new >= ll0 {
                return Ok(BetaStep {
                    beta: beta_new,
                    state: state_new,
                    loglik: ll_new,
                    ridged,
                });
            }
        }
        alpha *= T::c(0.5);
    }
    Err(Error::StepFailure(
        "no non-decreasing Fisher step found after 20 halvings".into(),
    ))
}

/// Damped Newton update of N, clamped below at the observed count:
/// N' = max(n, N + a_u s_N / oF_N).
pub fn newton_step_n<T: Scalar>(n_pop: T, n_obs: T, phibar: T, step_length: T) -> Result<T> {
    let s = score_n(n_pop, n_obs, phibar)?;
    let info = obs_info_n(n_pop, n_obs)?;
    Ok(n_obs.max(n_pop + step_length * s / info))
}

/// The N-dependent part of the log-likelihood, used to keep the N block
/// monotone without re-evaluating the full model.
fn loglik_n_part<T: Scalar>(n_pop: T, n_obs: T, phibar: T) -> T {
    let undercount = n_pop - n_obs;
    let mut ll = ln_gamma(n_pop + T::one()) - ln_gamma(undercount + T::one());
    if undercount > T::zero() {
        ll += undercount * phibar.ln();
    }
    ll
}

/// Maximize over N for fixed (beta, tau): damped Newton iterated to
/// stationarity, each step guarded to be non-decreasing.
fn maximize_n<T: Scalar>(n_start: T, n_obs: T, phibar: T, first_step: T) -> Result<T> {
    let mut n_pop = n_start;
    for inner in 0..200 {
        let s = score_n(n_pop, n_obs, phibar)?;
        if n_pop <= n_obs && s < T::zero() {
            return Ok(n_obs);
        }
        if s.abs() <= T::c(1e-9) {
            break;
        }
        let a = if inner == 0 { first_step } else { T::one() };
        let mut candidate = newton_step_n(n_pop, n_obs, phibar, a)?;
        // concavity makes overshoot rare; halve back towards the current
        // point if it happens
        let base = loglik_n_part(n_pop, n_obs, phibar);
        let mut tries = 0;
        while loglik_n_part(candidate, n_obs, phibar) < base && tries < 40 {
            candidate = n_pop + (candidate - n_pop) * T::c(0.5);
            tries += 1;
        }
        if (candidate - n_pop).abs() <= T::c(1e-12) * n_pop.max(T::one()) {
            n_pop = candidate;
            break;
        }
        n_pop = candidate;
    }
    Ok(n_pop)
}

struct SingleFit<T: Scalar> {
    params: Params<T>,
    state: ModelState<T>,
    loglik: T,
    converged: bool,
    reason: ConvergenceReason,
    trace: Vec<TraceEntry<T>>,
    warnings: Vec<String>,
}

fn single_fit<T: Scalar>(
    dataset: &Dataset<T>,
    spec: &ModelSpec<T>,
    init: Params<T>,
    options: &FitOptions<T>,
    fixed_n: Option<T>,
) -> Result<SingleFit<T>> {
    let counts = dataset.counts();
    let n_obs: T = counts.iter().copied().sum();
    let mut params = init;
    if let Some(n) = fixed_n {
        params.n_pop = n;
    }
    let mut state = model_state(spec, dataset, &params.beta())?;
    // bring tau in line with the starting beta before the first cycle
    params.tau = solve_tau(
        &state.phi,
        params.n_pop,
        &counts,
        options.tau_tol,
        options.tau_max_iter,
    )?
    .tau;
    let mut loglik = log_likelihood(&params, &state, dataset);
    if !loglik.is_finite() {
        return Err(Error::Boundary(
            "starting point has zero-probability cells".into(),
        ));
    }

    let mut warnings = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut reason = ConvergenceReason::MaxOuterReached;

    for outer in 1..=options.max_outer {
        let loglik_before = loglik;
        let beta_before = params.beta();
        let n_before = params.n_pop;
        let tau_before = params.tau.clone();

        // --- beta block ---
        let mut beta_failed = false;
        for _ in 0..options.max_beta_inner {
            match fisher_step_beta(&params, &state, dataset, spec) {
                Ok(step) => {
                    let gain = step.loglik - loglik;
                    if step.ridged {
                        let msg = "ridge fallback used for the expected information".to_string();
                        if !warnings.contains(&msg) {
                            warnings.push(msg);
                        }
                    }
                    params = params.with_beta(&step.beta);
                    state = step.state;
                    loglik = step.loglik;
                    if gain <= options.tol_loglik * T::c(0.1) {
                        break;
                    }
                }
                Err(Error::StepFailure(msg)) => {
                    warnings.push(format!("beta step stalled: {msg}"));
                    beta_failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        // --- tau block (exact maximizer given N, beta) ---
        let sol = solve_tau(
            &state.phi,
            params.n_pop,
            &counts,
            options.tau_tol,
            options.tau_max_iter,
        )?;
        params.tau = sol.tau;

        // --- N block ---
        if fixed_n.is_none() {
            let phibar = phi_bar(&params, &state);
            params.n_pop = maximize_n(
                params.n_pop,
                n_obs,
                phibar,
                options.step.length::<T>(outer),
            )?;
            // N moved, so re-solve the weights at the new undercount
            let sol = solve_tau(
                &state.phi,
                params.n_pop,
                &counts,
                options.tau_tol,
                options.tau_max_iter,
            )?;
            params.tau = sol.tau;
        }

        loglik = log_likelihood(&params, &state, dataset);
        let score_sup = score_beta(&params, &state, dataset)
            .map(|s| s.abs().max())
            .unwrap_or_else(|_| T::nan());
        trace.push(TraceEntry {
            outer,
            loglik,
            score_beta_sup: score_sup,
            n_pop: params.n_pop,
        });

        let beta_change = (params.beta() - &beta_before).abs().max();
        let n_change = (params.n_pop - n_before).abs();
        let tau_change = (&params.tau - &tau_before).abs().max();
        let param_change = beta_change.max(n_change).max(tau_change);

        if beta_failed {
            converged = false;
            reason = ConvergenceReason::StepFailure;
            break;
        }
        if outer > 1
            && (loglik - loglik_before).abs() <= options.tol_loglik
            && param_change <= options.tol_param
        {
            converged = true;
            reason = ConvergenceReason::Converged;
            break;
        }
    }

    if (params.n_pop - n_obs).abs() <= T::c(1e-9) && fixed_n.is_none() {
        warnings.push("population estimate sits at the boundary N = n".into());
    }
    let floor = T::one() / params.n_pop;
    if params
        .tau
        .iter()
        .zip(counts.iter())
        .any(|(&t, &c)| t <= c * floor + T::c(1e-12))
    {
        warnings.push("some stratum weight sits at its lower bound n_i/N".into());
    }

    Ok(SingleFit {
        params,
        state,
        loglik,
        converged,
        reason,
        trace,
        warnings,
    })
}

/// Full maximum-likelihood fit. With `n_starts > 1`, runs from several seeded
/// starting points and keeps the best likelihood.
pub fn fit<T: Scalar>(
    dataset: &Dataset<T>,
    spec: &ModelSpec<T>,
    options: &FitOptions<T>,
) -> Result<FitResult<T>> {
    spec.validate(dataset)?;
    let mut best: Option<SingleFit<T>> = None;
    let mut start_logliks = Vec::new();
    for start in 0..options.n_starts.max(1) {
        let init = match (&options.inits, start) {
            (Some(p), 0) => p.clone(),
            _ => initialize(dataset, spec, options.seed.wrapping_add(start as u64))?,
        };
        let run = single_fit(dataset, spec, init, options, None)?;
        start_logliks.push(run.loglik);
        let better = best
            .as_ref()
            .map_or(true, |b| run.loglik > b.loglik);
        if better {
            best = Some(run);
        }
    }
    let best = best.expect("at least one start");
    Ok(FitResult {
        params: best.params,
        loglik: best.loglik,
        converged: best.converged,
        reason: best.reason,
        trace: best.trace,
        state: best.state,
        warnings: best.warnings,
        start_logliks,
    })
}

/// Maximize over (beta, tau) with N held fixed; used by the profile
/// likelihood. `warm` seeds the search, typically with the global estimate.
pub fn fit_with_fixed_n<T: Scalar>(
    dataset: &Dataset<T>,
    spec: &ModelSpec<T>,
    n_fixed: T,
    warm: &Params<T>,
    options: &FitOptions<T>,
) -> Result<FitResult<T>> {
    let run = single_fit(dataset, spec, warm.clone(), options, Some(n_fixed))?;
    Ok(FitResult {
        params: run.params,
        loglik: run.loglik,
        converged: run.converged,
        reason: run.reason,
        trace: run.trace,
        state: run.state,
        warnings: run.warnings,
        start_logliks: vec![run.loglik],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{stratify, CaptureRecord};
    use crate::model::{
        build_loglinear_design, build_recursive_design, ConditionalDesign, HistoryMatrix,
        LatentDesign, ModelSpec, PartitionMatrices,
    };
    use approx::assert_relative_eq;

    fn independence_spec(n_lists: usize) -> ModelSpec<f64> {
        let h = HistoryMatrix::build(n_lists).unwrap();
        let design = build_loglinear_design(&h, &[]).unwrap();
        ModelSpec::new(
            1,
            LatentDesign::default(),
            ConditionalDesign::LogLinear(design),
            None,
        )
        .unwrap()
    }

    #[test]
    fn step_schedule_matches_paper_values() {
        let s = StepSchedule::default();
        assert_relative_eq!(s.length::<f64>(1), 0.5);
        assert_relative_eq!(s.length::<f64>(2), 0.75);
        assert_relative_eq!(s.length::<f64>(10), 0.95);
    }

    #[test]
    fn newton_step_direction_follows_boundary_score() {
        // single stratum, n = 1: s_N = 1 + log(phibar) at N = 1
        let up = newton_step_n(1.0, 1.0, 0.5, 1.0).unwrap();
        assert!(up > 1.0, "positive score must increase N");
        let down = newton_step_n(1.0, 1.0, 0.2, 1.0).unwrap();
        assert_eq!(down, 1.0, "negative score clamps at n");
        // zero score leaves N unchanged
        let phibar = (-1.0f64).exp();
        let stay = newton_step_n(1.0, 1.0, phibar, 1.0).unwrap();
        assert_relative_eq!(stay, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn fisher_scoring_reaches_closed_form_logit_mle() {
        // C = 1, one stratum, independence model with N and tau fixed:
        // the MLE of the list-j capture rate is x_j / N
        let records = vec![
            CaptureRecord { history: vec![1, 1], covariates: vec![] },
            CaptureRecord { history: vec![1, 0], covariates: vec![] },
            CaptureRecord { history: vec![1, 0], covariates: vec![] },
            CaptureRecord { history: vec![0, 1], covariates: vec![] },
        ];
        let ds = stratify(&records).unwrap();
        let spec = independence_spec(2);
        let n_pop = 6.0;
        let mut params = Params {
            n_pop,
            zeta: DVector::zeros(0),
            lambda: DVector::from_vec(vec![0.05, -0.05]),
            tau: DVector::from_element(1, 1.0),
        };
        let mut state = model_state(&spec, &ds, &params.beta()).unwrap();
        for _ in 0..200 {
            let step = fisher_step_beta(&params, &state, &ds, &spec).unwrap();
            params = params.with_beta(&step.beta);
            state = step.state;
        }
        let x1 = 3.0; // captures on list 1
        let x2 = 2.0;
        let logit = |p: f64| (p / (1.0 - p)).ln();
        assert_relative_eq!(params.lambda[0], logit(x1 / n_pop), epsilon = 1e-6);
        assert_relative_eq!(params.lambda[1], logit(x2 / n_pop), epsilon = 1e-6);
    }

    #[test]
    fn fisher_step_is_stationary_at_the_optimum() {
        let records = vec![
            CaptureRecord { history: vec![1, 1], covariates: vec![] },
            CaptureRecord { history: vec![1, 0], covariates: vec![] },
            CaptureRecord { history: vec![0, 1], covariates: vec![] },
        ];
        let ds = stratify(&records).unwrap();
        let spec = independence_spec(2);
        let fitted = fit(&ds, &spec, &FitOptions::default()).unwrap();
        let step = fisher_step_beta(&fitted.params, &fitted.state, &ds, &spec).unwrap();
        let moved = (step.beta - fitted.params.beta()).abs().max();
        assert!(moved < 1e-4, "step at optimum moved by {moved}");
    }

    #[test]
    fn ridge_fallback_on_duplicated_column() {
        // duplicating a lambda column makes the expected information singular
        let h = HistoryMatrix::build(2).unwrap();
        let hv = PartitionMatrices::none(2).unwrap();
        let design = build_recursive_design(&h, &hv).unwrap();
        let restriction = crate::model::Restriction {
            rows: vec![vec![vec![
                crate::model::Coef::constant(1.0),
                crate::model::Coef::constant(1.0),
            ]]],
        };
        let spec = ModelSpec::new(
            1,
            LatentDesign::default(),
            ConditionalDesign::Recursive {
                partition: hv,
                design,
            },
            Some(restriction),
        )
        .unwrap();
        let records = vec![
            CaptureRecord { history: vec![1, 0], covariates: vec![] },
            CaptureRecord { history: vec![1, 1], covariates: vec![] },
        ];
        let ds = stratify(&records).unwrap();
        let params = Params {
            n_pop: 3.0,
            zeta: DVector::zeros(0),
            lambda: DVector::from_vec(vec![0.1, 0.1]),
            tau: DVector::from_element(1, 1.0),
        };
        let state = model_state(&spec, &ds, &params.beta()).unwrap();
        let step = fisher_step_beta(&params, &state, &ds, &spec).unwrap();
        assert!(step.ridged, "singular information must trigger the ridge");
    }

    #[test]
    fn initialize_is_deterministic_and_floored() {
        let records = vec![
            CaptureRecord { history: vec![1, 0, 0], covariates: vec![0.0] },
            CaptureRecord { history: vec![0, 1, 1], covariates: vec![1.0] },
        ];
        let ds = stratify(&records).unwrap();
        let spec = independence_spec(3);
        let a = initialize(&ds, &spec, 42).unwrap();
        let b = initialize(&ds, &spec, 42).unwrap();
        assert_eq!(a.beta(), b.beta());
        assert_eq!(a.n_pop, b.n_pop);
        assert!(a.n_pop >= 3.0);

        // at beta = 0 every list has probability 1/2: N0 = n / (1 - 2^-J)
        let init = Params {
            n_pop: 0.0,
            zeta: DVector::zeros(0),
            lambda: DVector::zeros(3),
            tau: ds.counts() / 2.0,
        };
        let state = model_state(&spec, &ds, &init.beta()).unwrap();
        let phibar = init.tau.dot(&state.phi);
        assert_relative_eq!(2.0 / (1.0 - phibar), 2.0 / (1.0 - 0.125), epsilon = 1e-12);
    }

    #[test]
    fn fit_is_seed_deterministic() {
        let records = vec![
            CaptureRecord { history: vec![1, 1, 0], covariates: vec![] },
            CaptureRecord { history: vec![1, 0, 0], covariates: vec![] },
            CaptureRecord { history: vec![0, 1, 1], covariates: vec![] },
            CaptureRecord { history: vec![0, 0, 1], covariates: vec![] },
            CaptureRecord { history: vec![1, 0, 1], covariates: vec![] },
        ];
        let ds = stratify(&records).unwrap();
        let spec = independence_spec(3);
        let opts = FitOptions {
            seed: 7,
            ..FitOptions::default()
        };
        let a = fit(&ds, &spec, &opts).unwrap();
        let b = fit(&ds, &spec, &opts).unwrap();
        assert_eq!(a.loglik, b.loglik);
        assert_eq!(a.params.n_pop, b.params.n_pop);
        assert_eq!(a.params.beta(), b.params.beta());
    }

    #[test]
    fn fit_exit_is_self_consistent() {
        let records = vec![
            CaptureRecord { history: vec![1, 1, 0], covariates: vec![] },
            CaptureRecord { history: vec![1, 0, 0], covariates: vec![] },
            CaptureRecord { history: vec![0, 1, 1], covariates: vec![] },
            CaptureRecord { history: vec![0, 0, 1], covariates: vec![] },
            CaptureRecord { history: vec![1, 1, 1], covariates: vec![] },
            CaptureRecord { history: vec![0, 1, 0], covariates: vec![] },
        ];
        let ds = stratify(&records).unwrap();
        let spec = independence_spec(3);
        let fitted = fit(&ds, &spec, &FitOptions::default()).unwrap();
        assert!(fitted.converged);
        // monotone trace
        for w in fitted.trace.windows(2) {
            assert!(w[1].loglik >= w[0].loglik - 1e-9);
        }
        let score = score_beta(&fitted.params, &fitted.state, &ds).unwrap();
        assert!(score.abs().max() <= 1e-5 * (1.0 + fitted.loglik.abs()));
        let phibar = phi_bar(&fitted.params, &fitted.state);
        let n_obs = ds.n_observed() as f64;
        if fitted.params.n_pop > n_obs + 1e-9 {
            let s_n = score_n(fitted.params.n_pop, n_obs, phibar).unwrap();
            assert!(s_n.abs() <= 1e-6, "|s_N| = {}", s_n.abs());
        }
        let hyper = crate::tau::hyperbola_residual(
            &fitted.params.tau,
            &fitted.state.phi,
            fitted.params.n_pop,
            &ds.counts(),
        );
        assert!(hyper <= 1e-10);
    }

    #[test]
    fn tau_solve_maximizes_over_random_simplex_probes() {
        let records = vec![
            CaptureRecord { history: vec![1, 0], covariates: vec![0.0] },
            CaptureRecord { history: vec![1, 1], covariates: vec![1.0] },
            CaptureRecord { history: vec![0, 1], covariates: vec![2.0] },
            CaptureRecord { history: vec![0, 1], covariates: vec![2.0] },
        ];
        let ds = stratify(&records).unwrap();
        let spec = independence_spec(2);
        let fitted = fit(&ds, &spec, &FitOptions::default()).unwrap();
        let base = fitted.loglik;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut tau = fitted.params.tau.clone();
            for v in tau.iter_mut() {
                *v *= 1.0 + 0.02 * (rng.random::<f64>() - 0.5);
            }
            tau /= tau.sum();
            let probe = Params {
                tau,
                ..fitted.params.clone()
            };
            let ll = log_likelihood(&probe, &fitted.state, &ds);
            assert!(ll <= base + 1e-9, "perturbed tau improved: {ll} > {base}");
        }
    }
}
