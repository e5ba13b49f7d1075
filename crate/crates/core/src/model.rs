//! Design structures for the latent-class capture model and the map from
//! parameters to per-stratum probabilities and their analytic derivatives.
//!
//! A model has three ingredients:
//! * a multinomial-logit design for the latent-class weights `xi_i` (class 1
//!   is the reference class and carries a zero design row);
//! * a conditional family for the capture-history distribution within a
//!   class: either a log-linear design `G` over the 2^J configurations or a
//!   recursive-logistic design built from a partition of the partial capture
//!   histories (matrices `A` and `B`);
//! * a linear restriction `delta_ic = M_ic lambda` tying the per-class
//!   conditional parameters to a common parameter vector, with coefficients
//!   that may depend on covariates.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::Scalar;
use crate::data::MAX_LISTS;

/// The k x J matrix of capture histories in lexicographic order; row r is the
/// J-bit binary expansion of r, so row 0 is all zeros.
#[derive(Debug, Clone)]
pub struct HistoryMatrix {
    pub n_lists: usize,
}

impl HistoryMatrix {
    pub fn build(n_lists: usize) -> Result<Self> {
        if !(2..=MAX_LISTS).contains(&n_lists) {
            return Err(Error::Dimension(format!(
                "number of lists {n_lists} outside 2..={MAX_LISTS}"
            )));
        }
        Ok(HistoryMatrix { n_lists })
    }

    pub fn k(&self) -> usize {
        1usize << self.n_lists
    }

    /// Entry (r, j): whether history r was captured by list j (0-based j).
    pub fn bit(&self, r: usize, j: usize) -> u8 {
        ((r >> (self.n_lists - 1 - j)) & 1) as u8
    }

    pub fn row(&self, r: usize) -> Vec<u8> {
        (0..self.n_lists).map(|j| self.bit(r, j)).collect()
    }

    pub fn dense<T: Scalar>(&self) -> DMatrix<T> {
        DMatrix::from_fn(self.k(), self.n_lists, |r, j| T::usize(self.bit(r, j) as usize))
    }
}

/// Disjoint, exhaustive classes of partial capture histories. Entry (r, j) of
/// the v-th indicator matrix depends only on the first j-1 bits of row r.
#[derive(Debug, Clone)]
pub struct PartitionMatrices {
    pub n_lists: usize,
    pub n_parts: usize,
    /// 0-based class of the partial history preceding occasion j in row r.
    class: Vec<Vec<usize>>,
}

impl PartitionMatrices {
    /// Build from a total classifier over partial histories; `classify`
    /// receives the first j-1 bits (possibly empty) and must return a 1-based
    /// class in `1..=n_parts`.
    pub fn build(
        n_lists: usize,
        n_parts: usize,
        classify: impl Fn(&[u8]) -> usize,
    ) -> Result<Self> {
        let h = HistoryMatrix::build(n_lists)?;
        if n_parts == 0 {
            return Err(Error::Invalid("partition needs at least one class".into()));
        }
        let mut class = Vec::with_capacity(h.k());
        for r in 0..h.k() {
            let row = h.row(r);
            let mut per_occ = Vec::with_capacity(n_lists);
            for j in 0..n_lists {
                let v = classify(&row[..j]);
                if v == 0 || v > n_parts {
                    return Err(Error::Invalid(format!(
                        "partial-history class {v} outside 1..={n_parts}"
                    )));
                }
                per_occ.push(v - 1);
            }
            class.push(per_occ);
        }
        Ok(PartitionMatrices {
            n_lists,
            n_parts,
            class,
        })
    }

    /// No dependence on the capture history: a single class.
    pub fn none(n_lists: usize) -> Result<Self> {
        Self::build(n_lists, 1, |_| 1)
    }

    /// Two classes: never captured before vs captured at least once before.
    pub fn captured_before(n_lists: usize) -> Result<Self> {
        Self::build(n_lists, 2, |partial| {
            if partial.iter().any(|&b| b == 1) {
                2
            } else {
                1
            }
        })
    }

    /// Four classes: crossing "captured more than once before" with
    /// "captured in the previous occasion".
    pub fn example1(n_lists: usize) -> Result<Self> {
        Self::build(n_lists, 4, |partial| {
            let count = partial.iter().filter(|&&b| b == 1).count();
            let prev = partial.last() == Some(&1);
            match (count >= 2, prev) {
                (false, false) => 1,
                (false, true) => 2,
                (true, false) => 3,
                (true, true) => 4,
            }
        })
    }

    /// Every distinct partial history is its own class (k - 1 classes).
    pub fn saturated(n_lists: usize) -> Result<Self> {
        let n_parts = (1usize << n_lists) - 1;
        Self::build(n_lists, n_parts, |partial| {
            let j = partial.len();
            let value = partial.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
            (1 << j) - 1 + value + 1
        })
    }

    /// 0-based class of the partial history before occasion j (0-based) in
    /// configuration r.
    pub fn class(&self, r: usize, j: usize) -> usize {
        self.class[r][j]
    }

    /// Materialize the v-th indicator matrix H_v (0-based v).
    pub fn matrix<T: Scalar>(&self, v: usize) -> DMatrix<T> {
        let k = 1usize << self.n_lists;
        DMatrix::from_fn(k, self.n_lists, |r, j| {
            if self.class[r][j] == v {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// The A and B matrices of the recursive-logistic family: column v of A is
/// (H * H_v) 1 and column v of B is H_v 1, with * the elementwise product.
#[derive(Debug, Clone)]
pub struct RecursiveDesign<T> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
}

pub fn build_recursive_design<T: Scalar>(
    h: &HistoryMatrix,
    hv: &PartitionMatrices,
) -> Result<RecursiveDesign<T>> {
    if h.n_lists != hv.n_lists {
        return Err(Error::Dimension(
            "history matrix and partition have different numbers of lists".into(),
        ));
    }
    let k = h.k();
    let mut a = DMatrix::zeros(k, hv.n_parts);
    let mut b = DMatrix::zeros(k, hv.n_parts);
    for r in 0..k {
        for j in 0..h.n_lists {
            let v = hv.class(r, j);
            b[(r, v)] += T::one();
            if h.bit(r, j) == 1 {
                a[(r, v)] += T::one();
            }
        }
    }
    Ok(RecursiveDesign { a, b })
}

/// Log-linear design over the 2^J configurations: main-effect columns (the
/// columns of H) plus optional two-way interaction columns.
#[derive(Debug, Clone)]
pub struct LogLinearDesign<T> {
    pub g: DMatrix<T>,
    /// 0-based list pairs behind the interaction columns, in column order.
    pub interactions: Vec<(usize, usize)>,
}

pub fn build_loglinear_design<T: Scalar>(
    h: &HistoryMatrix,
    interactions: &[(usize, usize)],
) -> Result<LogLinearDesign<T>> {
    let j = h.n_lists;
    let mut seen = std::collections::HashSet::new();
    for &(a, b) in interactions {
        if a >= j || b >= j || a == b {
            return Err(Error::Invalid(format!(
                "interaction pair ({}, {}) invalid for {j} lists",
                a + 1,
                b + 1
            )));
        }
        let key = (a.min(b), a.max(b));
        if !seen.insert(key) {
            return Err(Error::Invalid(format!(
                "duplicate interaction pair ({}, {})",
                key.0 + 1,
                key.1 + 1
            )));
        }
    }
    let k = h.k();
    let g = DMatrix::from_fn(k, j + interactions.len(), |r, c| {
        if c < j {
            T::usize(h.bit(r, c) as usize)
        } else {
            let (a, b) = interactions[c - j];
            T::usize((h.bit(r, a) * h.bit(r, b)) as usize)
        }
    });
    Ok(LogLinearDesign {
        g,
        interactions: interactions.to_vec(),
    })
}

/// Conditional capture-history family within a latent class.
#[derive(Debug, Clone)]
pub enum ConditionalDesign<T> {
    LogLinear(LogLinearDesign<T>),
    Recursive {
        partition: PartitionMatrices,
        design: RecursiveDesign<T>,
    },
}

impl<T: Scalar> ConditionalDesign<T> {
    /// Dimension of the per-class parameter vector delta_ic.
    pub fn dim_delta(&self) -> usize {
        match self {
            ConditionalDesign::LogLinear(d) => d.g.ncols(),
            ConditionalDesign::Recursive { design, .. } => design.a.ncols(),
        }
    }

    pub fn n_configs(&self) -> usize {
        match self {
            ConditionalDesign::LogLinear(d) => d.g.nrows(),
            ConditionalDesign::Recursive { design, .. } => design.a.nrows(),
        }
    }
}

/// One entry of a restriction matrix M_ic: `value`, optionally multiplied by
/// a covariate of the stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct Coef {
    pub value: f64,
    pub covariate: Option<usize>,
}

impl Coef {
    pub fn constant(value: f64) -> Self {
        Coef {
            value,
            covariate: None,
        }
    }

    pub fn eval<T: Scalar>(&self, x: &[T]) -> T {
        let base = T::c(self.value);
        match self.covariate {
            Some(ix) => base * x[ix],
            None => base,
        }
    }
}

/// Rule producing the restriction matrices delta_ic = M_ic lambda.
#[derive(Debug, Clone)]
pub struct Restriction {
    /// `rows[c][d]` is the coefficient row of delta-coordinate d for class c.
    pub rows: Vec<Vec<Vec<Coef>>>,
}

impl Restriction {
    /// Default unrestricted map: each class has its own delta block, so
    /// dim lambda = C * dim delta.
    pub fn block_diagonal(n_classes: usize, dim_delta: usize) -> Self {
        let dim_lambda = n_classes * dim_delta;
        let rows = (0..n_classes)
            .map(|c| {
                (0..dim_delta)
                    .map(|d| {
                        (0..dim_lambda)
                            .map(|l| Coef::constant(if l == c * dim_delta + d { 1.0 } else { 0.0 }))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Restriction { rows }
    }

    pub fn dim_lambda(&self) -> usize {
        self.rows
            .first()
            .and_then(|c| c.first())
            .map_or(0, |row| row.len())
    }

    pub fn matrix<T: Scalar>(&self, class: usize, x: &[T]) -> DMatrix<T> {
        let rows = &self.rows[class];
        DMatrix::from_fn(rows.len(), self.dim_lambda(), |d, l| rows[d][l].eval(x))
    }

    fn validate(&self, n_classes: usize, dim_delta: usize, n_covariates: usize) -> Result<()> {
        if self.rows.len() != n_classes {
            return Err(Error::Dimension(format!(
                "restriction defines {} classes, model has {n_classes}",
                self.rows.len()
            )));
        }
        let dim_lambda = self.dim_lambda();
        if dim_lambda == 0 {
            return Err(Error::Invalid("restriction has no lambda columns".into()));
        }
        for (c, rows) in self.rows.iter().enumerate() {
            if rows.len() != dim_delta {
                return Err(Error::Dimension(format!(
                    "restriction for class {} has {} rows, conditional family needs {dim_delta}",
                    c + 1,
                    rows.len()
                )));
            }
            for row in rows {
                if row.len() != dim_lambda {
                    return Err(Error::Dimension(format!(
                        "ragged restriction row in class {}",
                        c + 1
                    )));
                }
                for coef in row {
                    if let Some(ix) = coef.covariate {
                        if ix >= n_covariates {
                            return Err(Error::Dimension(format!(
                                "restriction references covariate {ix}, dataset has {n_covariates}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Covariates entering the latent-weight logits.
#[derive(Debug, Clone, Default)]
pub struct LatentDesign {
    pub covariates: Vec<usize>,
}

/// Full model specification.
#[derive(Debug, Clone)]
pub struct ModelSpec<T> {
    pub n_classes: usize,
    pub latent: LatentDesign,
    pub conditional: ConditionalDesign<T>,
    pub restriction: Restriction,
}

impl<T: Scalar> ModelSpec<T> {
    pub fn new(
        n_classes: usize,
        latent: LatentDesign,
        conditional: ConditionalDesign<T>,
        restriction: Option<Restriction>,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Invalid("need at least one latent class".into()));
        }
        let dim_delta = conditional.dim_delta();
        let restriction =
            restriction.unwrap_or_else(|| Restriction::block_diagonal(n_classes, dim_delta));
        Ok(ModelSpec {
            n_classes,
            latent,
            conditional,
            restriction,
        })
    }

    pub fn dim_zeta(&self) -> usize {
        (self.n_classes - 1) * (1 + self.latent.covariates.len())
    }

    pub fn dim_lambda(&self) -> usize {
        self.restriction.dim_lambda()
    }

    pub fn dim_beta(&self) -> usize {
        self.dim_zeta() + self.dim_lambda()
    }

    pub fn n_lists(&self) -> usize {
        match &self.conditional {
            ConditionalDesign::LogLinear(d) => d.g.nrows().trailing_zeros() as usize,
            ConditionalDesign::Recursive { partition, .. } => partition.n_lists,
        }
    }

    /// Latent design matrix X_i for one stratum: C rows, reference class
    /// first with a zero row; class c >= 2 has an intercept and the selected
    /// covariates in its own column block.
    pub fn latent_design_matrix(&self, x: &[T]) -> DMatrix<T> {
        let c = self.n_classes;
        let width = 1 + self.latent.covariates.len();
        let dim = self.dim_zeta();
        DMatrix::from_fn(c, dim, |row, col| {
            if row == 0 {
                return T::zero();
            }
            let block = row - 1;
            if col < block * width || col >= (block + 1) * width {
                return T::zero();
            }
            let within = col - block * width;
            if within == 0 {
                T::one()
            } else {
                x[self.latent.covariates[within - 1]]
            }
        })
    }

    pub fn validate(&self, dataset: &Dataset<T>) -> Result<()> {
        let n_cov = dataset.strata.first().map_or(0, |s| s.x.len());
        if self.n_configs() != dataset.n_configs() {
            return Err(Error::Dimension(format!(
                "model built for {} configurations, dataset has {}",
                self.n_configs(),
                dataset.n_configs()
            )));
        }
        for &ix in &self.latent.covariates {
            if ix >= n_cov {
                return Err(Error::Dimension(format!(
                    "latent design references covariate {ix}, dataset has {n_cov}"
                )));
            }
        }
        self.restriction
            .validate(self.n_classes, self.conditional.dim_delta(), n_cov)
    }

    pub fn n_configs(&self) -> usize {
        self.conditional.n_configs()
    }
}

/// Per-stratum probabilities and derivative blocks at one beta.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    /// Latent-class weights xi_i, one C-simplex vector per stratum.
    pub xi: Vec<DVector<T>>,
    /// Full conditional distributions, one k x C column-stochastic matrix per
    /// stratum; row 0 holds the never-captured probability of each class.
    pub qtilde: Vec<DMatrix<T>>,
    /// Manifest distributions p_i over the k - 1 observable configurations.
    pub p: Vec<DVector<T>>,
    /// Never-captured probabilities phi_i.
    pub phi: DVector<T>,
    /// Reduced derivative blocks D_i = d p_i / d beta', (k-1) x dim beta.
    pub d: Vec<DMatrix<T>>,
    /// Phi matrix: row i is d phi_i / d beta'.
    pub phi_grad: DMatrix<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn n_strata(&self) -> usize {
        self.phi.len()
    }
}

/// Latent-class weights from the multinomial-logit model
/// log xi = X zeta - 1 log(1' exp(X zeta)), evaluated with max subtraction.
pub fn latent_weights<T: Scalar>(x_design: &DMatrix<T>, zeta: &DVector<T>) -> DVector<T> {
    let eta = x_design * zeta;
    softmax(&eta)
}

fn softmax<T: Scalar>(eta: &DVector<T>) -> DVector<T> {
    let max = eta.iter().copied().fold(<T as Scalar>::neg_inf(), |a, b| a.max(b));
    let mut out = eta.map(|e| (e - max).exp());
    let total: T = out.iter().copied().sum();
    out /= total;
    out
}

/// log(1 + e^x) without overflow.
fn ln_one_plus_exp<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Full conditional distribution of one latent class over all k capture
/// configurations (the h = 0 cell included).
pub fn conditional_probs<T: Scalar>(
    design: &ConditionalDesign<T>,
    delta: &DVector<T>,
) -> Result<DVector<T>> {
    if delta.len() != design.dim_delta() {
        return Err(Error::Dimension(format!(
            "delta has length {}, conditional family needs {}",
            delta.len(),
            design.dim_delta()
        )));
    }
    let q = match design {
        ConditionalDesign::LogLinear(d) => {
            let eta = &d.g * delta;
            softmax(&eta)
        }
        ConditionalDesign::Recursive { design, .. } => {
            let log_norm: DVector<T> = delta.map(ln_one_plus_exp);
            let log_q = &design.a * delta - &design.b * log_norm;
            let q = log_q.map(|v| v.exp());
            debug_assert!(
                (q.iter().copied().sum::<T>() - T::one()).abs() < T::c(1e-10),
                "recursive probabilities must sum to one"
            );
            q
        }
    };
    Ok(q)
}

/// (diag(v) - v v') M without forming the k x k matrix.
fn omega_times<T: Scalar>(v: &DVector<T>, m: &DMatrix<T>) -> DMatrix<T> {
    let vtm = m.tr_mul(v); // M' v, length ncols
    let mut out = m.clone();
    for r in 0..m.nrows() {
        let scale = v[r];
        out.row_mut(r).iter_mut().enumerate().for_each(|(c, e)| {
            *e = *e * scale - scale * vtm[c];
        });
    }
    out
}

/// Evaluate all per-stratum probabilities and analytic derivative blocks.
pub fn model_state<T: Scalar>(
    spec: &ModelSpec<T>,
    dataset: &Dataset<T>,
    beta: &DVector<T>,
) -> Result<ModelState<T>> {
    spec.validate(dataset)?;
    if beta.len() != spec.dim_beta() {
        return Err(Error::Dimension(format!(
            "beta has length {}, model needs {}",
            beta.len(),
            spec.dim_beta()
        )));
    }
    let dim_zeta = spec.dim_zeta();
    let dim_lambda = spec.dim_lambda();
    let zeta = DVector::from_iterator(dim_zeta, beta.iter().copied().take(dim_zeta));
    let lambda = DVector::from_iterator(dim_lambda, beta.iter().copied().skip(dim_zeta));

    let s = dataset.n_strata();
    let k = spec.n_configs();
    let n_classes = spec.n_classes;
    let dim_beta = spec.dim_beta();

    let mut xi_all = Vec::with_capacity(s);
    let mut qtilde_all = Vec::with_capacity(s);
    let mut p_all = Vec::with_capacity(s);
    let mut phi = DVector::zeros(s);
    let mut d_all = Vec::with_capacity(s);
    let mut phi_grad = DMatrix::zeros(s, dim_beta);

    for (i, stratum) in dataset.strata.iter().enumerate() {
        let x_design = spec.latent_design_matrix(&stratum.x);
        let xi = latent_weights(&x_design, &zeta);

        // conditional distribution and derivative per class
        let mut qtilde = DMatrix::zeros(k, n_classes);
        let mut lambda_block: DMatrix<T> = DMatrix::zeros(k, dim_lambda);
        for c in 0..n_classes {
            let m_ic = spec.restriction.matrix(c, &stratum.x);
            let delta = &m_ic * &lambda;
            let q = conditional_probs(&spec.conditional, &delta)?;
            // d qtilde_c / d delta'
            let jac: DMatrix<T> = match &spec.conditional {
                ConditionalDesign::LogLinear(d) => omega_times(&q, &d.g),
                ConditionalDesign::Recursive { design, .. } => {
                    let sig: DVector<T> = delta.map(|v| T::one() / (T::one() + (-v).exp()));
                    let mut inner = design.a.clone();
                    for col in 0..inner.ncols() {
                        let sv = sig[col];
                        for row in 0..inner.nrows() {
                            inner[(row, col)] -= design.b[(row, col)] * sv;
                        }
                    }
                    for row in 0..inner.nrows() {
                        let qr = q[row];
                        inner.row_mut(row).iter_mut().for_each(|e| *e *= qr);
                    }
                    inner
                }
            };
            lambda_block += (jac * m_ic) * xi[c];
            qtilde.set_column(c, &q);
        }

        // zeta block: Qtilde Omega(xi) X
        let zeta_block = if dim_zeta > 0 {
            &qtilde * omega_times(&xi, &x_design)
        } else {
            DMatrix::zeros(k, 0)
        };

        let p_tilde = &qtilde * &xi;
        for (r, v) in p_tilde.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    stratum: i,
                    message: format!("probability at configuration {r} is not finite"),
                });
            }
        }
        phi[i] = p_tilde[0];
        let p = DVector::from_iterator(k - 1, p_tilde.iter().copied().skip(1));

        // assemble full derivative, then split off the h = 0 row
        let mut d_full = DMatrix::zeros(k, dim_beta);
        d_full.view_mut((0, 0), (k, dim_zeta)).copy_from(&zeta_block);
        d_full
            .view_mut((0, dim_zeta), (k, dim_lambda))
            .copy_from(&lambda_block);
        if d_full.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stratum: i,
                message: "derivative block is not finite".into(),
            });
        }
        phi_grad.row_mut(i).copy_from(&d_full.row(0));
        d_all.push(d_full.remove_row(0));

        xi_all.push(xi);
        qtilde_all.push(qtilde);
        p_all.push(p);
    }

    Ok(ModelState {
        xi: xi_all,
        qtilde: qtilde_all,
        p: p_all,
        phi,
        d: d_all,
        phi_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn history_matrix_examples() {
        let h = HistoryMatrix::build(2).unwrap();
        let rows: Vec<Vec<u8>> = (0..h.k()).map(|r| h.row(r)).collect();
        assert_eq!(rows, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);

        let h3 = HistoryMatrix::build(3).unwrap();
        assert_eq!(h3.k(), 8);
        assert_eq!(h3.row(5), vec![1, 0, 1]);

        assert_eq!(HistoryMatrix::build(6).unwrap().k(), 64);
        assert!(HistoryMatrix::build(1).is_err());
        assert!(HistoryMatrix::build(21).is_err());
    }

    #[test]
    fn captured_before_partition() {
        let hv = PartitionMatrices::captured_before(3).unwrap();
        let h = HistoryMatrix::build(3).unwrap();
        let h1: DMatrix<f64> = hv.matrix(0);
        for r in 0..8 {
            for j in 0..3 {
                let no_previous = (0..j).all(|jj| h.bit(r, jj) == 0);
                assert_eq!(h1[(r, j)] == 1.0, no_previous, "r={r} j={j}");
            }
        }
    }

    #[test]
    fn partition_matrices_are_disjoint_and_exhaustive() {
        for hv in [
            PartitionMatrices::none(4).unwrap(),
            PartitionMatrices::captured_before(4).unwrap(),
            PartitionMatrices::example1(4).unwrap(),
            PartitionMatrices::saturated(3).unwrap(),
        ] {
            let total: DMatrix<f64> = (0..hv.n_parts)
                .map(|v| hv.matrix::<f64>(v))
                .fold(DMatrix::zeros(1 << hv.n_lists, hv.n_lists), |a, b| a + b);
            assert!(total.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn example1_class4_needs_two_previous_with_previous_occasion() {
        let hv = PartitionMatrices::example1(3).unwrap();
        for r in 0..8 {
            let h = HistoryMatrix::build(3).unwrap();
            let is4 = hv.class(r, 2) == 3;
            let bits = (h.bit(r, 0), h.bit(r, 1));
            assert_eq!(is4, bits == (1, 1), "row {r}");
        }
    }

    #[test]
    fn single_class_partition_is_all_ones() {
        let hv = PartitionMatrices::none(3).unwrap();
        let m: DMatrix<f64> = hv.matrix(0);
        assert!(m.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn recursive_design_rows() {
        let h = HistoryMatrix::build(3).unwrap();
        let hv = PartitionMatrices::captured_before(3).unwrap();
        let d: RecursiveDesign<f64> = build_recursive_design(&h, &hv).unwrap();
        // row (1,0,1) = index 5
        assert_eq!((d.a[(5, 0)], d.a[(5, 1)]), (1.0, 1.0));
        assert_eq!((d.b[(5, 0)], d.b[(5, 1)]), (1.0, 2.0));
        // row (0,0,0)
        assert_eq!((d.a[(0, 0)], d.a[(0, 1)]), (0.0, 0.0));
        assert_eq!((d.b[(0, 0)], d.b[(0, 1)]), (3.0, 0.0));
        // all-ones row
        assert_eq!((d.a[(7, 0)], d.a[(7, 1)]), (1.0, 2.0));
        assert_eq!((d.b[(7, 0)], d.b[(7, 1)]), (1.0, 2.0));
    }

    #[test]
    fn recursive_design_identities() {
        // A column v = row sums of H * H_v; B column v = row sums of H_v
        let h = HistoryMatrix::build(4).unwrap();
        let hv = PartitionMatrices::example1(4).unwrap();
        let d: RecursiveDesign<f64> = build_recursive_design(&h, &hv).unwrap();
        let hd: DMatrix<f64> = h.dense();
        for v in 0..hv.n_parts {
            let m: DMatrix<f64> = hv.matrix(v);
            let prod = hd.component_mul(&m);
            for r in 0..h.k() {
                assert_eq!(d.a[(r, v)], prod.row(r).sum());
                assert_eq!(d.b[(r, v)], m.row(r).sum());
            }
        }
        // A <= B elementwise, row 0 of A is zero, B rows sum to J
        assert!(d.a.iter().zip(d.b.iter()).all(|(a, b)| a <= b));
        assert!(d.a.row(0).iter().all(|&x| x == 0.0));
        for r in 0..h.k() {
            assert_eq!(d.b.row(r).sum(), 4.0);
        }
    }

    #[test]
    fn latent_weights_examples() {
        // zeta = 0 -> uniform
        let spec = two_class_spec(3);
        let x = spec.latent_design_matrix(&[1.0]);
        let xi = latent_weights(&x, &DVector::from_vec(vec![0.0, 0.0]));
        assert_relative_eq!(xi[0], 0.5, epsilon = 1e-14);

        // C=1 -> (1)
        let one = ModelSpec::new(
            1,
            LatentDesign::default(),
            recursive_conditional(3),
            None,
        )
        .unwrap();
        let x1 = one.latent_design_matrix(&[0.0]);
        let xi1 = latent_weights(&x1, &DVector::zeros(0));
        assert_eq!(xi1.len(), 1);
        assert_relative_eq!(xi1[0], 1.0, epsilon = 1e-15);

        // two-class logit: X = [0; 1], zeta = 0.5
        let x2 = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let xi2 = latent_weights(&x2, &DVector::from_vec(vec![0.5]));
        let e = 0.5f64.exp();
        assert_relative_eq!(xi2[0], 1.0 / (1.0 + e), epsilon = 1e-14);
        assert_relative_eq!(xi2[1], e / (1.0 + e), epsilon = 1e-14);
    }

    #[test]
    fn latent_weights_survive_large_logits() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let xi = latent_weights(&x, &DVector::from_vec(vec![800.0]));
        assert!(xi.iter().all(|v| v.is_finite()));
        assert_relative_eq!(xi.sum(), 1.0, epsilon = 1e-12);
    }

    fn recursive_conditional(n_lists: usize) -> ConditionalDesign<f64> {
        let h = HistoryMatrix::build(n_lists).unwrap();
        let hv = PartitionMatrices::captured_before(n_lists).unwrap();
        let design = build_recursive_design(&h, &hv).unwrap();
        ConditionalDesign::Recursive {
            partition: hv,
            design,
        }
    }

    fn two_class_spec(n_lists: usize) -> ModelSpec<f64> {
        ModelSpec::new(
            2,
            LatentDesign {
                covariates: vec![0],
            },
            recursive_conditional(n_lists),
            None,
        )
        .unwrap()
    }

    #[test]
    fn loglinear_uniform_at_zero() {
        let h = HistoryMatrix::build(2).unwrap();
        let d: LogLinearDesign<f64> = build_loglinear_design(&h, &[]).unwrap();
        let q = conditional_probs(
            &ConditionalDesign::LogLinear(d),
            &DVector::from_vec(vec![0.0, 0.0]),
        )
        .unwrap();
        for v in q.iter() {
            assert_relative_eq!(*v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn recursive_uniform_at_zero() {
        for n_lists in [2usize, 3, 5] {
            let h = HistoryMatrix::build(n_lists).unwrap();
            let hv = PartitionMatrices::none(n_lists).unwrap();
            let design = build_recursive_design(&h, &hv).unwrap();
            let q = conditional_probs(
                &ConditionalDesign::Recursive {
                    partition: hv,
                    design,
                },
                &DVector::from_vec(vec![0.0]),
            )
            .unwrap();
            let want = 1.0 / (1 << n_lists) as f64;
            for v in q.iter() {
                assert_relative_eq!(*v, want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn recursive_probability_is_occasion_product() {
        // logits for first capture 0.26 and recapture 0.45
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let delta = DVector::from_vec(vec![logit(0.26), logit(0.45)]);
        let q = conditional_probs(&recursive_conditional(3), &delta).unwrap();
        // history (1,0,1) = index 5: capture, miss as recapture, recapture
        assert_relative_eq!(q[5], 0.26 * 0.55 * 0.45, epsilon = 1e-12);
        assert_relative_eq!(q.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn loglinear_interactions_validated() {
        let h = HistoryMatrix::build(3).unwrap();
        assert!(build_loglinear_design::<f64>(&h, &[(0, 0)]).is_err());
        assert!(build_loglinear_design::<f64>(&h, &[(0, 3)]).is_err());
        assert!(build_loglinear_design::<f64>(&h, &[(0, 1), (1, 0)]).is_err());
        let d = build_loglinear_design::<f64>(&h, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(d.g.ncols(), 5);
        assert!(d.g.row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn saturated_recursive_matches_saturated_loglinear() {
        // matched parameters, mapped through the chain factorization, give
        // identical probability vectors
        let n_lists = 3usize;
        let k = 1usize << n_lists;
        let h = HistoryMatrix::build(n_lists).unwrap();
        let hv = PartitionMatrices::saturated(n_lists).unwrap();
        let design = build_recursive_design::<f64>(&h, &hv).unwrap();
        let rec = ConditionalDesign::Recursive {
            partition: hv,
            design,
        };
        let delta = DVector::from_fn(k - 1, |i, _| 0.3 * (i as f64 + 1.0).sin() - 0.2);
        let q_rec = conditional_probs(&rec, &delta).unwrap();

        // saturated log-linear: one column per non-empty subset of lists
        let g = DMatrix::from_fn(k, k - 1, |r, c| {
            let subset = c + 1;
            if subset & r == subset {
                1.0
            } else {
                0.0
            }
        });
        // solve G_red theta = log q(h) - log q(0) on the non-zero rows
        let rhs = DVector::from_fn(k - 1, |r, _| (q_rec[r + 1] / q_rec[0]).ln());
        let g_red = g.rows(1, k - 1).into_owned();
        let theta = g_red.lu().solve(&rhs).expect("saturated design invertible");
        let ll = ConditionalDesign::LogLinear(LogLinearDesign {
            g,
            interactions: vec![],
        });
        let q_ll = conditional_probs(&ll, &theta).unwrap();
        for (a, b) in q_rec.iter().zip(q_ll.iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_class_state_has_no_zeta_block() {
        let spec = ModelSpec::new(
            1,
            LatentDesign::default(),
            recursive_conditional(3),
            None,
        )
        .unwrap();
        assert_eq!(spec.dim_zeta(), 0);
        let records = vec![crate::data::CaptureRecord {
            history: vec![1, 0, 1],
            covariates: vec![0.0],
        }];
        let ds = crate::data::stratify(&records).unwrap();
        let beta = DVector::from_vec(vec![-0.3, 0.4]);
        let st = model_state(&spec, &ds, &beta).unwrap();
        assert_eq!(st.d[0].ncols(), 2);
        assert_relative_eq!(st.xi[0][0], 1.0, epsilon = 1e-15);
        // phi + 1'p = 1
        assert_relative_eq!(st.phi[0] + st.p[0].sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_restriction_gives_zero_block() {
        // M_ic = 0 for class 2: its delta is frozen at zero and contributes a
        // zero derivative block
        let restriction = Restriction {
            rows: vec![
                vec![
                    vec![Coef::constant(1.0), Coef::constant(0.0)],
                    vec![Coef::constant(0.0), Coef::constant(1.0)],
                ],
                vec![
                    vec![Coef::constant(0.0), Coef::constant(0.0)],
                    vec![Coef::constant(0.0), Coef::constant(0.0)],
                ],
            ],
        };
        let spec = ModelSpec::new(
            2,
            LatentDesign::default(),
            recursive_conditional(3),
            Some(restriction),
        )
        .unwrap();
        let records = vec![crate::data::CaptureRecord {
            history: vec![1, 1, 0],
            covariates: vec![],
        }];
        let ds = crate::data::stratify(&records).unwrap();
        // beta = (zeta0, lambda1, lambda2); class-2 conditional fixed at delta = 0
        let beta = DVector::from_vec(vec![0.2, -0.4, 0.9]);
        let st = model_state(&spec, &ds, &beta).unwrap();
        let q2 = st.qtilde[0].column(1);
        for v in q2.iter() {
            assert_relative_eq!(*v, 1.0 / 8.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn columns_of_qtilde_are_stochastic() {
        let spec = two_class_spec(4);
        let records = vec![
            crate::data::CaptureRecord {
                history: vec![1, 0, 0, 1],
                covariates: vec![0.0],
            },
            crate::data::CaptureRecord {
                history: vec![0, 1, 1, 1],
                covariates: vec![1.0],
            },
        ];
        let ds = crate::data::stratify(&records).unwrap();
        let beta = DVector::from_vec(vec![0.3, -0.7, -1.1, 0.8, 0.25, -0.4]);
        let st = model_state(&spec, &ds, &beta).unwrap();
        for q in &st.qtilde {
            for c in 0..q.ncols() {
                assert_relative_eq!(q.column(c).sum(), 1.0, epsilon = 1e-12);
            }
        }
        for (i, p) in st.p.iter().enumerate() {
            assert_relative_eq!(st.phi[i] + p.sum(), 1.0, epsilon = 1e-12);
        }
        // Phi row = -(column sums of D_i)
        for i in 0..ds.n_strata() {
            for c in 0..spec.dim_beta() {
                let colsum: f64 = st.d[i].column(c).sum();
                assert_relative_eq!(st.phi_grad[(i, c)], -colsum, epsilon = 1e-12);
            }
        }
    }
}
