//! Synthetic data generation from any model specification, a brute-force
//! likelihood oracle used by the test suites, and central finite differences.
//!
//! Random draws use ChaCha12 with one stream per population unit (stream id =
//! unit index + 1 on top of the user seed), so independently generated units
//! are reproducible regardless of traversal order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{stratify, CaptureRecord, Dataset};
use crate::error::{Error, Result};
use crate::likelihood::Params;
use crate::model::{latent_weights, ConditionalDesign, ModelSpec};
use crate::special::ln_gamma;
use crate::Scalar;

/// One covariate pattern of the population and its sampling weight.
#[derive(Debug, Clone)]
pub struct CovariateCell<T> {
    pub x: Vec<T>,
    pub weight: T,
}

/// Ground truth for the generator; the pool weights play the role of tau.
#[derive(Debug, Clone)]
pub struct SimConfig<T> {
    pub n_true: u64,
    pub zeta: DVector<T>,
    pub lambda: DVector<T>,
    pub covariate_pool: Vec<CovariateCell<T>>,
    pub seed: u64,
}

impl<T: Scalar> SimConfig<T> {
    fn validate(&self) -> Result<()> {
        if self.n_true == 0 {
            return Err(Error::Invalid("population size must be positive".into()));
        }
        if self.covariate_pool.is_empty() {
            return Err(Error::Invalid("covariate pool is empty".into()));
        }
        let total: T = self.covariate_pool.iter().map(|c| c.weight).sum();
        if (total - T::one()).abs() > T::c(1e-8)
            || self.covariate_pool.iter().any(|c| c.weight < T::zero())
        {
            return Err(Error::Invalid(
                "covariate pool weights must form a simplex".into(),
            ));
        }
        Ok(())
    }
}

fn draw_categorical<T: Scalar>(rng: &mut ChaCha12Rng, probs: &DVector<T>) -> usize {
    let u = T::c(rng.random::<f64>());
    let mut acc = T::zero();
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Generate the captured units of one synthetic population, in unit order.
pub fn generate_records<T: Scalar>(
    config: &SimConfig<T>,
    spec: &ModelSpec<T>,
) -> Result<Vec<CaptureRecord<T>>> {
    config.validate()?;
    let n_lists = spec.n_lists();
    let mut records = Vec::new();
    for unit in 0..config.n_true {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(unit + 1);

        // covariates
        let u = T::c(rng.random::<f64>());
        let mut cell = config.covariate_pool.len() - 1;
        let mut acc = T::zero();
        for (i, c) in config.covariate_pool.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                cell = i;
                break;
            }
        }
        let x = &config.covariate_pool[cell].x;

        // latent class
        let xi = latent_weights(&spec.latent_design_matrix(x), &config.zeta);
        let class = draw_categorical(&mut rng, &xi);

        let m = spec.restriction.matrix(class, x);
        let delta = &m * &config.lambda;

        let history = match &spec.conditional {
            ConditionalDesign::Recursive { partition, .. } => {
                let mut bits = vec![0u8; n_lists];
                let mut prefix = 0usize;
                for j in 0..n_lists {
                    // row whose leading bits match the partial history
                    let row = prefix << (n_lists - j);
                    let v = partition.class(row, j);
                    let p = T::one() / (T::one() + (-delta[v]).exp());
                    let caught = T::c(rng.random::<f64>()) < p;
                    bits[j] = caught as u8;
                    prefix = (prefix << 1) | caught as usize;
                }
                bits
            }
            ConditionalDesign::LogLinear(_) => {
                let q = crate::model::conditional_probs(&spec.conditional, &delta)?;
                let idx = draw_categorical(&mut rng, &q);
                crate::data::decode_history(idx, n_lists)
            }
        };
        if history.iter().any(|&b| b == 1) {
            records.push(CaptureRecord {
                history,
                covariates: x.clone(),
            });
        }
    }
    if records.is_empty() {
        return Err(Error::Invalid("no observable units".into()));
    }
    Ok(records)
}

/// Generate and stratify one synthetic dataset.
pub fn generate<T: Scalar>(config: &SimConfig<T>, spec: &ModelSpec<T>) -> Result<Dataset<T>> {
    stratify(&generate_records(config, spec)?)
}

fn log_sigmoid<T: Scalar>(eta: T) -> T {
    // log(sigma(eta)) without overflow
    if eta > T::zero() {
        -(-eta).exp().ln_1p()
    } else {
        eta - eta.exp().ln_1p()
    }
}

/// Conditional probability of one capture configuration, recomputed scalar
/// by scalar (no design-matrix algebra).
fn config_prob_scalar<T: Scalar>(
    spec: &ModelSpec<T>,
    delta: &DVector<T>,
    r: usize,
    n_lists: usize,
) -> T {
    match &spec.conditional {
        ConditionalDesign::Recursive { partition, .. } => {
            let mut log_p = T::zero();
            for j in 0..n_lists {
                let v = partition.class(r, j);
                let caught = (r >> (n_lists - 1 - j)) & 1 == 1;
                log_p += if caught {
                    log_sigmoid(delta[v])
                } else {
                    log_sigmoid(-delta[v])
                };
            }
            log_p.exp()
        }
        ConditionalDesign::LogLinear(d) => {
            let k = 1usize << n_lists;
            let row_dot = |row: usize| -> T {
                let mut acc = T::zero();
                for c in 0..d.g.ncols() {
                    acc += d.g[(row, c)] * delta[c];
                }
                acc
            };
            let mut max = T::neg_inf();
            for row in 0..k {
                max = max.max(row_dot(row));
            }
            let mut norm = T::zero();
            for row in 0..k {
                norm += (row_dot(row) - max).exp();
            }
            (row_dot(r) - max).exp() / norm
        }
    }
}

/// Brute-force evaluation of the log-likelihood by explicit summation over
/// latent classes and configurations, assembled from the three unsimplified
/// pieces: the binomial count term, the conditional configuration term, and
/// the covariate term. Intended for small problems only.
pub fn enumerate_loglik<T: Scalar>(
    dataset: &Dataset<T>,
    spec: &ModelSpec<T>,
    params: &Params<T>,
) -> Result<T> {
    let n_lists = spec.n_lists();
    if n_lists > 6 || dataset.n_strata() > 20 {
        return Err(Error::Invalid(
            "enumeration oracle is limited to J <= 6 and s <= 20".into(),
        ));
    }
    let k = 1usize << n_lists;
    let n_obs = T::from_u64(dataset.n_observed()).unwrap();
    let n_pop = params.n_pop;
    let undercount = n_pop - n_obs;

    // per-stratum manifest probabilities, by explicit summation over classes
    let s = dataset.n_strata();
    let mut ptilde = vec![vec![T::zero(); k]; s];
    for (i, stratum) in dataset.strata.iter().enumerate() {
        // latent weights by scalar softmax
        let xd = spec.latent_design_matrix(&stratum.x);
        let mut eta = vec![T::zero(); spec.n_classes];
        for c in 0..spec.n_classes {
            for col in 0..xd.ncols() {
                eta[c] += xd[(c, col)] * params.zeta[col];
            }
        }
        let emax = eta.iter().copied().fold(T::neg_inf(), |a, b| a.max(b));
        let znorm: T = eta.iter().map(|&e| (e - emax).exp()).sum();
        for c in 0..spec.n_classes {
            let xi_c = (eta[c] - emax).exp() / znorm;
            let m = spec.restriction.matrix(c, &stratum.x);
            let delta = &m * &params.lambda;
            for r in 0..k {
                ptilde[i][r] += xi_c * config_prob_scalar(spec, &delta, r, n_lists);
            }
        }
    }

    let phibar: T = (0..s).map(|i| params.tau[i] * ptilde[i][0]).sum();

    // 1. binomial term for n captures out of N
    let mut ll = ln_gamma(n_pop + T::one()) - ln_gamma(undercount + T::one());
    if undercount > T::zero() {
        ll += undercount * phibar.ln();
    }
    ll += n_obs * (T::one() - phibar).ln();
    // 2. configuration probabilities conditional on capture
    for (i, stratum) in dataset.strata.iter().enumerate() {
        let capture_prob = T::one() - ptilde[i][0];
        for (cell, &count) in stratum.y.iter().enumerate() {
            if count > 0 {
                ll += T::from_u64(count).unwrap() * (ptilde[i][cell + 1] / capture_prob).ln();
            }
        }
    }
    // 3. covariate distribution conditional on capture
    for (i, stratum) in dataset.strata.iter().enumerate() {
        let capture_prob = T::one() - ptilde[i][0];
        ll += T::from_u64(stratum.n).unwrap()
            * (params.tau[i] * capture_prob / (T::one() - phibar)).ln();
    }
    Ok(ll)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient<T: Scalar>(
    f: impl Fn(&DVector<T>) -> T,
    x: &DVector<T>,
    step: T,
) -> Result<DVector<T>> {
    let mut grad = DVector::zeros(x.len());
    for j in 0..x.len() {
        let mut hi = x.clone();
        hi[j] += step;
        let mut lo = x.clone();
        lo[j] -= step;
        let (fh, fl) = (f(&hi), f(&lo));
        if !fh.is_finite() || !fl.is_finite() {
            return Err(Error::NonFinite {
                stratum: j,
                message: "finite-difference evaluation is not finite".into(),
            });
        }
        grad[j] = (fh - fl) / (step + step);
    }
    Ok(grad)
}

/// Central-difference Jacobian of a vector-valued function.
pub fn finite_diff_jacobian<T: Scalar>(
    f: impl Fn(&DVector<T>) -> DVector<T>,
    x: &DVector<T>,
    step: T,
) -> Result<DMatrix<T>> {
    let probe = f(x);
    let mut jac = DMatrix::zeros(probe.len(), x.len());
    for j in 0..x.len() {
        let mut hi = x.clone();
        hi[j] += step;
        let mut lo = x.clone();
        lo[j] -= step;
        let (fh, fl) = (f(&hi), f(&lo));
        if fh.iter().chain(fl.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stratum: j,
                message: "finite-difference evaluation is not finite".into(),
            });
        }
        for r in 0..probe.len() {
            jac[(r, j)] = (fh[r] - fl[r]) / (step + step);
        }
    }
    Ok(jac)
}
