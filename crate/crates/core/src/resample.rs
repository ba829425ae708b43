//! Importance weights, effective sample size and (coupled) multinomial
//! resampling.
//!
//! Ancestor indices are zero based.

use rand::{Rng, RngCore};

use crate::error::{check_dim, Error, Result};

/// Log-weights together with their stably normalized probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    log_weights: Vec<f64>,
    normalized: Vec<f64>,
    log_sum: f64,
}

impl WeightVector {
    /// Normalizes by shifting with the maximum log-weight. Fails when every
    /// weight is zero.
    pub fn from_log_weights(log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.is_empty() {
            return Err(Error::Contract("weight vector must be non-empty".into()));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::Contract("log-weights must be finite or -inf".into()));
        }
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Degenerate);
        }
        let mut normalized: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = normalized.iter().sum();
        for p in normalized.iter_mut() {
            *p /= total;
        }
        Ok(WeightVector {
            log_weights,
            normalized,
            log_sum: max + total.ln(),
        })
    }

    /// Weights given as non-negative probabilities (need not sum to one).
    pub fn from_probabilities(p: &[f64]) -> Result<Self> {
        if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract("probabilities must be finite and non-negative".into()));
        }
        Self::from_log_weights(p.iter().map(|v| v.ln()).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_log_weights(vec![0.0; n.max(1)]).expect("uniform weights are valid")
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    /// `log sum_i exp(log_weights_i)`.
    pub fn log_sum(&self) -> f64 {
        self.log_sum
    }

    /// `log (1/N sum_i exp(log_weights_i))`.
    pub fn log_mean(&self) -> f64 {
        self.log_sum - (self.len() as f64).ln()
    }

    pub fn ess(&self) -> f64 {
        ess(self)
    }
}

/// Effective sample size `1 / sum_i w_i^2`.
pub fn ess(w: &WeightVector) -> f64 {
    let s: f64 = w.normalized.iter().map(|p| p * p).sum();
    (1.0 / s).clamp(1.0, w.len() as f64)
}

/// Inverse-CDF sampler over a finite mass function.
struct Categorical {
    cumulative: Vec<f64>,
}

impl Categorical {
    fn new(mass: impl Iterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = mass
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
        Categorical { cumulative }
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    fn sample(&self, rng: &mut dyn RngCore) -> usize {
        let u = rng.gen::<f64>() * self.total();
        let i = self.cumulative.partition_point(|&c| c <= u);
        // u < total, so i < len unless rounding pushes u onto the last edge;
        // step back over trailing zero-mass entries in that case
        let mut i = i.min(self.cumulative.len() - 1);
        while i > 0 && self.cumulative[i] == self.cumulative[i - 1] {
            i -= 1;
        }
        i
    }
}

/// `n` i.i.d. indices with `P(i) = w_i`.
pub fn multinomial_resample(n: usize, w: &WeightVector, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Contract("resample count must be at least 1".into()));
    }
    let cat = Categorical::new(w.normalized.iter().copied());
    Ok((0..n).map(|_| cat.sample(rng)).collect())
}

/// Ancestors of a jointly resampled system with one index vector per
/// marginal. `coupled[i]` marks slots drawn from the common (overlap) part,
/// where every marginal received the same ancestor.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledAncestors {
    pub ancestors: Vec<Vec<usize>>,
    pub coupled: Vec<bool>,
    /// `sum_i min_j w_j^i`.
    pub common_mass: f64,
}

/// Maximal-coupling-type resampling over any number of marginals with a
/// shared index set. Residuals are drawn independently across marginals.
pub fn coupled_resample(weights: &[&WeightVector], rng: &mut dyn RngCore) -> Result<CoupledAncestors> {
    let m = weights.len();
    if m == 0 {
        return Err(Error::Contract("need at least one weight vector".into()));
    }
    let n = weights[0].len();
    for w in weights {
        check_dim("coupled resampling weights", n, w.len())?;
    }
    let mins: Vec<f64> = (0..n)
        .map(|i| weights.iter().map(|w| w.normalized[i]).fold(f64::INFINITY, f64::min))
        .collect();
    let common = Categorical::new(mins.iter().copied());
    let common_mass = common.total();
    let residuals: Vec<Categorical> = weights
        .iter()
        .map(|w| Categorical::new(w.normalized.iter().zip(&mins).map(|(p, q)| (p - q).max(0.0))))
        .collect();
    let residual_ok = residuals.iter().all(|r| r.total() > 0.0);

    let mut ancestors = vec![Vec::with_capacity(n); m];
    let mut coupled = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        // the residual masses equal 1 - common_mass; if rounding leaves
        // u >= common_mass with an empty residual, the overlap is total
        if u < common_mass || !residual_ok {
            let a = common.sample(rng);
            for anc in ancestors.iter_mut() {
                anc.push(a);
            }
            coupled.push(true);
        } else {
            for (anc, r) in ancestors.iter_mut().zip(&residuals) {
                anc.push(r.sample(rng));
            }
            coupled.push(false);
        }
    }
    Ok(CoupledAncestors {
        ancestors,
        coupled,
        common_mass,
    })
}

/// Ancestors for the fine / coarse / antithetic marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct AncestorTriple {
    pub a1: Vec<usize>,
    pub a2: Vec<usize>,
    pub a3: Vec<usize>,
    pub coupled: Vec<bool>,
    pub common_mass: f64,
}

pub fn triple_coupled_resample(
    w1: &WeightVector,
    w2: &WeightVector,
    w3: &WeightVector,
    rng: &mut dyn RngCore,
) -> Result<AncestorTriple> {
    let c = coupled_resample(&[w1, w2, w3], rng)?;
    let mut it = c.ancestors.into_iter();
    Ok(AncestorTriple {
        a1: it.next().unwrap(),
        a2: it.next().unwrap(),
        a3: it.next().unwrap(),
        coupled: c.coupled,
        common_mass: c.common_mass,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AncestorPair {
    pub a1: Vec<usize>,
    pub a2: Vec<usize>,
    pub coupled: Vec<bool>,
    pub common_mass: f64,
}

pub fn pair_coupled_resample(w1: &WeightVector, w2: &WeightVector, rng: &mut dyn RngCore) -> Result<AncestorPair> {
    let c = coupled_resample(&[w1, w2], rng)?;
    let mut it = c.ancestors.into_iter();
    Ok(AncestorPair {
        a1: it.next().unwrap(),
        a2: it.next().unwrap(),
        coupled: c.coupled,
        common_mass: c.common_mass,
    })
}
