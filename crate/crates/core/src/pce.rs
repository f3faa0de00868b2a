//! Orthonormal polynomial chaos bases and tensor Gauss quadrature.
//!
//! Every public entry point takes parameters in physical coordinates; the
//! affine map to the canonical support of each family is owned by
//! [`PolyFamily`]. Polynomials are normalized so that `<phi_i, phi_j> = delta_ij`
//! under the probability density of the family.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of basis terms.
pub const DEFAULT_TERM_CAP: usize = 5000;

/// Slack allowed when checking that a parameter lies in a bounded support.
const SUPPORT_SLACK: f64 = 1e-12;

/// Univariate orthonormal family together with its physical-to-canonical map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PolyFamily {
    /// Uniform on `[lo, hi]`, mapped to `[-1, 1]`.
    Legendre { lo: f64, hi: f64 },
    /// Gaussian with the given mean and standard deviation, mapped to N(0, 1).
    Hermite { mean: f64, std: f64 },
}

impl PolyFamily {
    pub fn legendre(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::Contract(format!(
                "uniform range [{lo}, {hi}] is not a proper interval"
            )));
        }
        Ok(PolyFamily::Legendre { lo, hi })
    }

    pub fn hermite(mean: f64, std: f64) -> Result<Self> {
        if !(mean.is_finite() && std.is_finite() && std > 0.0) {
            return Err(Error::Contract(format!(
                "gaussian N({mean}, {std}^2) needs a positive finite std"
            )));
        }
        Ok(PolyFamily::Hermite { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PolyFamily::Legendre { lo, hi } => Self::legendre(lo, hi).map(|_| ()),
            PolyFamily::Hermite { mean, std } => Self::hermite(mean, std).map(|_| ()),
        }
    }

    pub fn to_canonical(&self, theta: f64) -> Result<f64> {
        if !theta.is_finite() {
            return Err(Error::Domain(format!("parameter {theta} is not finite")));
        }
        match *self {
            PolyFamily::Legendre { lo, hi } => {
                let xi = (2.0 * theta - lo - hi) / (hi - lo);
                if xi.abs() > 1.0 + SUPPORT_SLACK {
                    return Err(Error::Domain(format!(
                        "parameter {theta} outside uniform support [{lo}, {hi}]"
                    )));
                }
                Ok(xi.clamp(-1.0, 1.0))
            }
            PolyFamily::Hermite { mean, std } => Ok((theta - mean) / std),
        }
    }

    pub fn to_physical(&self, xi: f64) -> f64 {
        match *self {
            PolyFamily::Legendre { lo, hi } => 0.5 * (lo + hi) + 0.5 * (hi - lo) * xi,
            PolyFamily::Hermite { mean, std } => mean + std * xi,
        }
    }

    /// Whether `theta` lies in the support (always true for Gaussians).
    pub fn contains(&self, theta: f64) -> bool {
        self.to_canonical(theta).is_ok()
    }

    pub fn mean(&self) -> f64 {
        self.to_physical(0.0)
    }

    /// Draw one physical parameter value from the family's distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            PolyFamily::Legendre { lo, hi } => rng.random_range(lo..hi),
            PolyFamily::Hermite { mean, std } => mean + std * rng.sample::<f64, _>(StandardNormal),
        }
    }

    /// Off-diagonal entry `b_n` (n >= 1) of the Jacobi matrix of the
    /// orthonormal recurrence `x phi_n = b_{n+1} phi_{n+1} + b_n phi_{n-1}`.
    fn recurrence_coeff(&self, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let n = n as f64;
        match self {
            PolyFamily::Legendre { .. } => n / (4.0 * n * n - 1.0).sqrt(),
            PolyFamily::Hermite { .. } => n.sqrt(),
        }
    }

    /// Degree-`n` orthonormal polynomial at canonical coordinate `xi`.
    pub fn eval_canonical(&self, n: usize, xi: f64) -> f64 {
        let mut prev = 0.0;
        let mut cur = 1.0;
        for k in 0..n {
            let next = (xi * cur - self.recurrence_coeff(k) * prev) / self.recurrence_coeff(k + 1);
            prev = cur;
            cur = next;
        }
        cur
    }

    /// Values of degrees `0..=max_degree` at canonical `xi`, written into `out`.
    pub fn eval_all_canonical(&self, max_degree: usize, xi: f64, out: &mut [f64]) {
        debug_assert!(out.len() > max_degree);
        out[0] = 1.0;
        if max_degree == 0 {
            return;
        }
        out[1] = xi / self.recurrence_coeff(1);
        for k in 1..max_degree {
            out[k + 1] = (xi * out[k] - self.recurrence_coeff(k) * out[k - 1])
                / self.recurrence_coeff(k + 1);
        }
    }

    /// Value and derivative of the degree-`n` orthonormal polynomial.
    fn eval_with_derivative(&self, n: usize, xi: f64) -> (f64, f64) {
        let (mut p_prev, mut p) = (0.0, 1.0);
        let (mut d_prev, mut d) = (0.0, 0.0);
        for k in 0..n {
            let bk = self.recurrence_coeff(k);
            let bk1 = self.recurrence_coeff(k + 1);
            let p_next = (xi * p - bk * p_prev) / bk1;
            let d_next = (p + xi * d - bk * d_prev) / bk1;
            p_prev = p;
            p = p_next;
            d_prev = d;
            d = d_next;
        }
        (p, d)
    }

    /// `n`-point Gauss rule for the canonical probability density, computed
    /// by Golub-Welsch and polished with Newton steps on `phi_n`. Weights use
    /// the Christoffel formula so they sum to one.
    pub fn gauss_canonical(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if n == 0 {
            return Err(Error::Contract("quadrature needs at least one node".into()));
        }
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = self.recurrence_coeff(k);
            jacobi[(k, k - 1)] = b;
            jacobi[(k - 1, k)] = b;
        }
        let eig = SymmetricEigen::try_new(jacobi, 1e-14, 0)
            .ok_or_else(|| Error::Numeric("Jacobi eigensolve did not converge".into()))?;
        let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.total_cmp(b));

        let mut values = vec![0.0; n];
        let mut weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                let (p, dp) = self.eval_with_derivative(n, *x);
                if dp == 0.0 {
                    break;
                }
                let step = p / dp;
                *x -= step;
                if step.abs() <= 1e-16 * x.abs().max(1.0) {
                    break;
                }
            }
            self.eval_all_canonical(n - 1, *x, &mut values);
            let christoffel: f64 = values[..n].iter().map(|v| v * v).sum();
            weights.push(1.0 / christoffel);
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        Ok((nodes, weights))
    }
}

/// Ordered total-degree multi-index set.
///
/// Indices are grouped by total degree ascending. Within a degree block the
/// tuples appear in decreasing lexicographic order, so the first-degree block
/// reads `e_1, e_2, ..., e_d`. Truncating to a lower degree is a prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndexSet {
    dim: usize,
    degree: usize,
    indices: Vec<Vec<usize>>,
}

pub fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

impl MultiIndexSet {
    pub fn total_degree(dim: usize, degree: usize) -> Result<Self> {
        Self::total_degree_capped(dim, degree, DEFAULT_TERM_CAP)
    }

    pub fn total_degree_capped(dim: usize, degree: usize, cap: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("multi-index dimension must be >= 1".into()));
        }
        let terms = binomial((dim + degree) as u64, degree as u64).unwrap_or(u128::MAX);
        if terms > cap as u128 {
            return Err(Error::BasisTooLarge { terms, cap });
        }
        let mut indices = Vec::with_capacity(terms as usize);
        let mut scratch = vec![0usize; dim];
        for total in 0..=degree {
            push_with_total(&mut scratch, 0, total, &mut indices);
        }
        debug_assert_eq!(indices.len() as u128, terms);
        Ok(Self {
            dim,
            degree,
            indices,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }
}

fn push_with_total(scratch: &mut [usize], pos: usize, remaining: usize, out: &mut Vec<Vec<usize>>) {
    if pos + 1 == scratch.len() {
        scratch[pos] = remaining;
        out.push(scratch.to_vec());
        return;
    }
    for value in (0..=remaining).rev() {
        scratch[pos] = value;
        push_with_total(scratch, pos + 1, remaining - value, out);
    }
}

/// Tensor-product quadrature rule in physical parameter coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Build a rule from explicit weighted atoms. Weights must be nonnegative
    /// and sum to one.
    pub fn from_atoms(nodes: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(Error::Contract(format!(
                "{} nodes with {} weights",
                nodes.len(),
                weights.len()
            )));
        }
        let dim = nodes[0].len();
        if nodes.iter().any(|n| n.len() != dim) {
            return Err(Error::Contract("quadrature nodes have mixed dimension".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Contract("quadrature weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("quadrature weights sum to {total}, not 1")));
        }
        Ok(Self { nodes, weights })
    }

    /// Tensor product of univariate Gauss rules, one family per dimension.
    pub fn tensor_gauss(families: &[PolyFamily], n_per_dim: usize) -> Result<Self> {
        if families.is_empty() {
            return Err(Error::Contract("tensor rule needs at least one dimension".into()));
        }
        let rules = families
            .iter()
            .map(|f| {
                let (xs, ws) = f.gauss_canonical(n_per_dim)?;
                Ok((xs.into_iter().map(|x| f.to_physical(x)).collect::<Vec<_>>(), ws))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = n_per_dim.checked_pow(families.len() as u32).ok_or_else(|| {
            Error::Contract(format!("{n_per_dim}^{} nodes overflows", families.len()))
        })?;
        let mut nodes = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        let mut digits = vec![0usize; families.len()];
        for _ in 0..count {
            nodes.push(digits.iter().enumerate().map(|(d, &i)| rules[d].0[i]).collect());
            weights.push(digits.iter().enumerate().map(|(d, &i)| rules[d].1[i]).product());
            // odometer, last dimension fastest
            for d in (0..digits.len()).rev() {
                digits[d] += 1;
                if digits[d] < n_per_dim {
                    break;
                }
                digits[d] = 0;
            }
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nodes.first().map_or(0, Vec::len)
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.nodes.iter().map(Vec::as_slice).zip(self.weights.iter().copied())
    }

    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.iter().map(|(x, w)| w * f(x)).sum()
    }
}

/// Multivariate orthonormal basis `Phi_k(theta) = prod_i phi_{alpha_i}(theta_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PceBasis {
    families: Vec<PolyFamily>,
    index_set: MultiIndexSet,
}

impl PceBasis {
    pub fn total_degree(families: Vec<PolyFamily>, degree: usize) -> Result<Self> {
        Self::total_degree_capped(families, degree, DEFAULT_TERM_CAP)
    }

    pub fn total_degree_capped(families: Vec<PolyFamily>, degree: usize, cap: usize) -> Result<Self> {
        for f in &families {
            f.validate()?;
        }
        let index_set = MultiIndexSet::total_degree_capped(families.len(), degree, cap)?;
        Ok(Self {
            families,
            index_set,
        })
    }

    pub fn families(&self) -> &[PolyFamily] {
        &self.families
    }

    pub fn index_set(&self) -> &MultiIndexSet {
        &self.index_set
    }

    pub fn dim(&self) -> usize {
        self.families.len()
    }

    pub fn degree(&self) -> usize {
        self.index_set.degree()
    }

    pub fn len(&self) -> usize {
        self.index_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_set.is_empty()
    }

    /// Whether every coordinate of `theta` lies in its family's support.
    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && self.families.iter().zip(theta).all(|(f, &t)| f.contains(t))
    }

    /// Evaluate all basis functions at a physical parameter point.
    pub fn eval(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.len());
        self.eval_into(theta, out.as_mut_slice())?;
        Ok(out)
    }

    pub fn eval_into(&self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Contract(format!(
                "parameter has {} entries, basis has dimension {}",
                theta.len(),
                self.dim()
            )));
        }
        if out.len() != self.len() {
            return Err(Error::Contract("basis output buffer has wrong length".into()));
        }
        let degree = self.degree();
        let mut table = vec![0.0; self.dim() * (degree + 1)];
        for (i, (family, &t)) in self.families.iter().zip(theta).enumerate() {
            let xi = family.to_canonical(t)?;
            family.eval_all_canonical(degree, xi, &mut table[i * (degree + 1)..(i + 1) * (degree + 1)]);
        }
        for (slot, alpha) in out.iter_mut().zip(self.index_set.indices()) {
            *slot = alpha
                .iter()
                .enumerate()
                .map(|(i, &a)| table[i * (degree + 1) + a])
                .product();
        }
        Ok(())
    }

    pub fn gauss_rule(&self, n_per_dim: usize) -> Result<QuadratureRule> {
        QuadratureRule::tensor_gauss(&self.families, n_per_dim)
    }

    /// Coefficients `p_k = <p, Phi_k>` computed with `rule`.
    pub fn project<F: FnMut(&[f64]) -> f64>(&self, rule: &QuadratureRule, mut f: F) -> Result<Vec<f64>> {
        let mut coeffs = vec![0.0; self.len()];
        let mut phi = vec![0.0; self.len()];
        for (theta, w) in rule.iter() {
            self.eval_into(theta, &mut phi)?;
            let value = f(theta);
            for (c, p) in coeffs.iter_mut().zip(&phi) {
                *c += w * value * p;
            }
        }
        Ok(coeffs)
    }

    /// Gram matrix `<Phi_i, Phi_j>` under `rule`.
    pub fn gram(&self, rule: &QuadratureRule) -> Result<DMatrix<f64>> {
        let n = self.len();
        let mut gram = DMatrix::zeros(n, n);
        let mut phi = DVector::zeros(n);
        for (theta, w) in rule.iter() {
            self.eval_into(theta, phi.as_mut_slice())?;
            gram.ger(w, &phi, &phi, 1.0);
        }
        Ok(gram)
    }
}

/// Mean and variance of a scalar expansion from its coefficients.
pub fn moments(coeffs: &[f64]) -> (f64, f64) {
    let mean = coeffs.first().copied().unwrap_or(0.0);
    let variance = coeffs.iter().skip(1).map(|c| c * c).sum();
    (mean, variance)
}

/// Vector-valued expansion: one coefficient vector per basis index.
#[derive(Debug, Clone, PartialEq)]
pub struct PceVector {
    pub coeffs: Vec<DVector<f64>>,
}

impl PceVector {
    pub fn mean(&self) -> DVector<f64> {
        self.coeffs[0].clone()
    }

    pub fn variance(&self) -> DVector<f64> {
        let mut var = DVector::zeros(self.coeffs[0].len());
        for c in self.coeffs.iter().skip(1) {
            var += c.component_mul(c);
        }
        var
    }
}
