//! Bootstrap particle filter and the coupled (antithetic or Euler pair)
//! particle filters used for level differences.
//!
//! Estimates at time `k` are taken after the weight update and before any
//! resampling. Between resampling events log-weights accumulate. The
//! normalizing constant is the product over resampling epochs of the mean
//! accumulated unnormalized weight.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Marginal, Result};
use crate::model::StateSpaceModel;
use crate::resample::{coupled_resample, multinomial_resample, WeightVector};
use crate::scheme::{Discretization, Level, Workspace};
use crate::streams::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    EveryStep,
    Adaptive,
}

/// When to resample: always, or when the ESS falls below
/// `threshold_fraction * N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResamplePolicy {
    pub mode: ResampleMode,
    pub threshold_fraction: f64,
}

impl Default for ResamplePolicy {
    fn default() -> Self {
        ResamplePolicy {
            mode: ResampleMode::Adaptive,
            threshold_fraction: 0.5,
        }
    }
}

impl ResamplePolicy {
    pub fn every_step() -> Self {
        ResamplePolicy {
            mode: ResampleMode::EveryStep,
            threshold_fraction: 1.0,
        }
    }

    pub fn adaptive(threshold_fraction: f64) -> Result<Self> {
        let p = ResamplePolicy {
            mode: ResampleMode::Adaptive,
            threshold_fraction,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "policy.threshold must lie in (0, 1], got {}",
                self.threshold_fraction
            )))
        }
    }

    pub fn should_resample(&self, ess: f64, n: usize) -> bool {
        match self.mode {
            ResampleMode::EveryStep => true,
            ResampleMode::Adaptive => ess < self.threshold_fraction * n as f64,
        }
    }
}

/// A named function of the state whose filter expectation is estimated.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    /// `Some(i)` when the function is the `i`-th coordinate.
    pub coordinate: Option<usize>,
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TestFunction({})", self.name)
    }
}

impl TestFunction {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        TestFunction {
            name: name.into(),
            coordinate: None,
            f: Arc::new(f),
        }
    }

    /// `phi(x) = x_{i+1}`, named `x1`, `x2`, ...
    pub fn coordinate(i: usize) -> Self {
        TestFunction {
            name: format!("x{}", i + 1),
            coordinate: Some(i),
            f: Arc::new(move |x| x[i]),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// `sum_i w_i phi(x_i)` over an `N x d` state array.
pub fn weighted_estimate(states: &[f64], dim: usize, w: &WeightVector, phi: &TestFunction) -> f64 {
    states
        .chunks_exact(dim)
        .zip(w.normalized())
        .map(|(x, p)| p * phi.eval(x))
        .sum()
}

/// Particle states with log-weights accumulated since the last resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    pub dim: usize,
    pub states: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub level: Level,
    pub time: usize,
}

impl WeightedEnsemble {
    pub fn new(dim: usize, states: Vec<f64>, log_weights: Vec<f64>, level: Level, time: usize) -> Result<Self> {
        if dim == 0 || states.is_empty() {
            return Err(Error::Contract("ensemble needs at least one particle".into()));
        }
        check_dim("ensemble states", log_weights.len() * dim, states.len())?;
        Ok(WeightedEnsemble {
            dim,
            states,
            log_weights,
            level,
            time,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }
}

/// `pi^N(phi) = sum_i W^i phi(X^i)` with normalized weights.
pub fn filter_estimate(ensemble: &WeightedEnsemble, phi: &TestFunction) -> Result<f64> {
    let w = WeightVector::from_log_weights(ensemble.log_weights.clone())?;
    Ok(weighted_estimate(&ensemble.states, ensemble.dim, &w, phi))
}

/// Add `log(1/N sum_i exp(log_weights_i))` to the log normalizing constant.
pub fn nc_update(log_nc: f64, log_weights: &[f64]) -> Result<f64> {
    let w = WeightVector::from_log_weights(log_weights.to_vec())?;
    Ok(log_nc + w.log_mean())
}

/// Per-time record of a single-level filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStep {
    pub k: usize,
    pub estimates: Vec<f64>,
    pub log_nc: f64,
    pub cumulative_cost: u64,
    pub ess: f64,
    pub resampled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutput {
    pub level: Level,
    pub particles: usize,
    pub scheme: Discretization,
    pub phi_names: Vec<String>,
    pub steps: Vec<FilterStep>,
    /// Number of simulated substeps.
    pub cost: u64,
    pub resample_times: Vec<usize>,
}

impl FilterOutput {
    pub fn phi_index(&self, name: &str) -> Option<usize> {
        self.phi_names.iter().position(|n| n == name)
    }

    /// Estimate of `phi` at time `k` (one based).
    pub fn estimate(&self, k: usize, phi: &str) -> Option<f64> {
        let j = self.phi_index(phi)?;
        self.steps.get(k.checked_sub(1)?).map(|s| s.estimates[j])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "phi_name", "estimate", "log_nc", "cumulative_cost", "resampled"])?;
        for s in &self.steps {
            for (name, v) in self.phi_names.iter().zip(&s.estimates) {
                w.write_record([
                    s.k.to_string(),
                    name.clone(),
                    fmt_f64(*v),
                    fmt_f64(s.log_nc),
                    s.cumulative_cost.to_string(),
                    (s.resampled as u8).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-time record of a coupled filter. For the Euler pair the antithetic
/// fields are `None` and the difference is `fine - coarse`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledStep {
    pub k: usize,
    pub fine: Vec<f64>,
    pub coarse: Vec<f64>,
    pub anti: Option<Vec<f64>>,
    pub difference: Vec<f64>,
    pub log_nc_fine: f64,
    pub log_nc_coarse: f64,
    pub log_nc_anti: Option<f64>,
    pub cumulative_cost: u64,
    pub coarse_ess: f64,
    pub resampled: bool,
    /// Fraction of slots that received a common ancestor, when resampled.
    pub coupled_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledFilterOutput {
    pub level: Level,
    pub particles: usize,
    pub antithetic: bool,
    pub phi_names: Vec<String>,
    pub steps: Vec<CoupledStep>,
    pub cost: u64,
    pub resample_times: Vec<usize>,
}

impl CoupledFilterOutput {
    pub fn difference(&self, k: usize, phi: &str) -> Option<f64> {
        let j = self.phi_names.iter().position(|n| n == phi)?;
        self.steps.get(k.checked_sub(1)?).map(|s| s.difference[j])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "k",
            "phi_name",
            "fine",
            "coarse",
            "anti",
            "difference",
            "log_nc_fine",
            "log_nc_coarse",
            "log_nc_anti",
            "cumulative_cost",
            "resampled",
        ])?;
        for s in &self.steps {
            for (j, name) in self.phi_names.iter().enumerate() {
                w.write_record([
                    s.k.to_string(),
                    name.clone(),
                    fmt_f64(s.fine[j]),
                    fmt_f64(s.coarse[j]),
                    s.anti.as_ref().map_or(String::new(), |a| fmt_f64(a[j])),
                    fmt_f64(s.difference[j]),
                    fmt_f64(s.log_nc_fine),
                    fmt_f64(s.log_nc_coarse),
                    s.log_nc_anti.map_or(String::new(), fmt_f64),
                    s.cumulative_cost.to_string(),
                    (s.resampled as u8).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest representation that round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn check_inputs(ssm: &StateSpaceModel, obs: &[Vec<f64>], n: usize) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::Contract("need at least one observation".into()));
    }
    if n == 0 {
        return Err(Error::Contract("need at least one particle".into()));
    }
    for y in obs {
        check_dim("observation", ssm.observation.obs_dim(), y.len())?;
    }
    Ok(())
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<()> {
    for r in results {
        r?;
    }
    Ok(())
}

/// Advance every row of `states` over unit time; particle `i` uses the
/// stream `(key, k, i)`, so results do not depend on the thread count.
fn propagate(
    ssm: &StateSpaceModel,
    scheme: Discretization,
    level: Level,
    states: &mut [f64],
    key: StreamKey,
    k: usize,
) -> Result<()> {
    let d = ssm.dim();
    let results: Vec<Result<()>> = states
        .par_chunks_mut(d)
        .enumerate()
        .map_init(
            || Workspace::new(d),
            |ws, (i, x)| {
                let mut rng = key.particle(k, i);
                ws.unit_with_rng(scheme, &ssm.diffusion, level, x, &mut rng)
            },
        )
        .collect();
    first_error(results)
}

fn add_log_likelihood(ssm: &StateSpaceModel, states: &[f64], y: &[f64], log_w: &mut [f64]) {
    let d = ssm.dim();
    log_w
        .par_iter_mut()
        .zip(states.par_chunks(d))
        .for_each(|(lw, x)| *lw += ssm.observation.log_density(x, y));
}

fn gather(states: &[f64], d: usize, ancestors: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ancestors.len() * d);
    for &a in ancestors {
        out.extend_from_slice(&states[a * d..(a + 1) * d]);
    }
    out
}

fn weights(log_w: &[f64], time: usize, marginal: Marginal) -> Result<WeightVector> {
    WeightVector::from_log_weights(log_w.to_vec()).map_err(|e| match e {
        Error::Degenerate => Error::FilterCollapse { time, marginal },
        other => other,
    })
}

/// Bootstrap particle filter at `level` with the truncated Milstein kernel.
pub fn pf_run(
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    level: Level,
    n: usize,
    policy: ResamplePolicy,
    test_functions: &[TestFunction],
    key: StreamKey,
) -> Result<FilterOutput> {
    pf_run_with(Discretization::Milstein, ssm, obs, level, n, policy, test_functions, key)
}

/// Bootstrap particle filter with a chosen discretization.
#[allow(clippy::too_many_arguments)]
pub fn pf_run_with(
    scheme: Discretization,
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    level: Level,
    n: usize,
    policy: ResamplePolicy,
    test_functions: &[TestFunction],
    key: StreamKey,
) -> Result<FilterOutput> {
    check_inputs(ssm, obs, n)?;
    policy.validate()?;
    let d = ssm.dim();
    let mut states: Vec<f64> = ssm.x0.iter().copied().cycle().take(n * d).collect();
    let mut log_w = vec![0.0; n];
    let mut log_nc_base = 0.0;
    let step_cost = (n * level.steps()) as u64;
    let mut cost = 0u64;
    let mut steps = Vec::with_capacity(obs.len());
    let mut resample_times = Vec::new();

    for (idx, y) in obs.iter().enumerate() {
        let k = idx + 1;
        propagate(ssm, scheme, level, &mut states, key, k)?;
        cost += step_cost;
        add_log_likelihood(ssm, &states, y, &mut log_w);
        let w = weights(&log_w, k, Marginal::Single)?;
        let estimates = test_functions
            .iter()
            .map(|phi| weighted_estimate(&states, d, &w, phi))
            .collect();
        let log_nc = log_nc_base + w.log_mean();
        let ess = w.ess();
        let resampled = policy.should_resample(ess, n);
        if resampled {
            let mut rng = key.resample(k);
            let a = multinomial_resample(n, &w, &mut rng)?;
            states = gather(&states, d, &a);
            log_w.fill(0.0);
            log_nc_base = log_nc;
            resample_times.push(k);
        }
        steps.push(FilterStep {
            k,
            estimates,
            log_nc,
            cumulative_cost: cost,
            ess,
            resampled,
        });
    }
    Ok(FilterOutput {
        level,
        particles: n,
        scheme,
        phi_names: test_functions.iter().map(|t| t.name.clone()).collect(),
        steps,
        cost,
        resample_times,
    })
}

/// Antithetic coupled particle filter at `level >= 1`: fine, coarse and
/// antithetic truncated Milstein marginals resampled jointly.
pub fn cpf_run(
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    level: Level,
    n: usize,
    policy: ResamplePolicy,
    test_functions: &[TestFunction],
    key: StreamKey,
) -> Result<CoupledFilterOutput> {
    coupled_run(true, ssm, obs, level, n, policy, test_functions, key)
}

/// Euler pair coupled particle filter (the non-antithetic baseline).
pub fn euler_cpf_run(
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    level: Level,
    n: usize,
    policy: ResamplePolicy,
    test_functions: &[TestFunction],
    key: StreamKey,
) -> Result<CoupledFilterOutput> {
    coupled_run(false, ssm, obs, level, n, policy, test_functions, key)
}

#[allow(clippy::too_many_arguments)]
fn coupled_run(
    antithetic: bool,
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    level: Level,
    n: usize,
    policy: ResamplePolicy,
    test_functions: &[TestFunction],
    key: StreamKey,
) -> Result<CoupledFilterOutput> {
    check_inputs(ssm, obs, n)?;
    policy.validate()?;
    let coarse_level = level
        .coarser()
        .ok_or_else(|| Error::Contract("coupled filter needs level >= 1".into()))?;
    let scheme = if antithetic {
        Discretization::Milstein
    } else {
        Discretization::Euler
    };
    let d = ssm.dim();
    let init: Vec<f64> = ssm.x0.iter().copied().cycle().take(n * d).collect();
    let mut fine = init.clone();
    let mut coarse = init.clone();
    let mut anti = if antithetic { init } else { Vec::new() };
    let mut lw_fine = vec![0.0; n];
    let mut lw_coarse = vec![0.0; n];
    let mut lw_anti = vec![0.0; if antithetic { n } else { 0 }];
    let (mut base_fine, mut base_coarse, mut base_anti) = (0.0, 0.0, 0.0);
    let per_particle = level.steps() + coarse_level.steps() + if antithetic { level.steps() } else { 0 };
    let step_cost = (n * per_particle) as u64;
    let mut cost = 0u64;
    let mut steps = Vec::with_capacity(obs.len());
    let mut resample_times = Vec::new();

    for (idx, y) in obs.iter().enumerate() {
        let k = idx + 1;
        // propagate
        let results: Vec<Result<()>> = if antithetic {
            fine.par_chunks_mut(d)
                .zip(coarse.par_chunks_mut(d))
                .zip(anti.par_chunks_mut(d))
                .enumerate()
                .map_init(
                    || Workspace::new(d),
                    |ws, (i, ((f, c), a))| {
                        let mut rng = key.particle(k, i);
                        ws.coupled_unit_with_rng(scheme, &ssm.diffusion, level, f, c, Some(a), &mut rng)
                    },
                )
                .collect()
        } else {
            fine.par_chunks_mut(d)
                .zip(coarse.par_chunks_mut(d))
                .enumerate()
                .map_init(
                    || Workspace::new(d),
                    |ws, (i, (f, c))| {
                        let mut rng = key.particle(k, i);
                        ws.coupled_unit_with_rng(scheme, &ssm.diffusion, level, f, c, None, &mut rng)
                    },
                )
                .collect()
        };
        first_error(results)?;
        cost += step_cost;

        add_log_likelihood(ssm, &fine, y, &mut lw_fine);
        add_log_likelihood(ssm, &coarse, y, &mut lw_coarse);
        let w_fine = weights(&lw_fine, k, Marginal::Fine)?;
        let w_coarse = weights(&lw_coarse, k, Marginal::Coarse)?;
        let w_anti = if antithetic {
            add_log_likelihood(ssm, &anti, y, &mut lw_anti);
            Some(weights(&lw_anti, k, Marginal::Anti)?)
        } else {
            None
        };

        let est = |s: &[f64], w: &WeightVector| -> Vec<f64> {
            test_functions.iter().map(|phi| weighted_estimate(s, d, w, phi)).collect()
        };
        let e_fine = est(&fine, &w_fine);
        let e_coarse = est(&coarse, &w_coarse);
        let e_anti = w_anti.as_ref().map(|w| est(&anti, w));
        let difference = {
            let second = e_anti.as_ref().unwrap_or(&e_fine);
            e_fine
                .iter()
                .zip(second)
                .zip(&e_coarse)
                .map(|((f, a), c)| 0.5 * f + 0.5 * a - c)
                .collect()
        };
        let log_nc_fine = base_fine + w_fine.log_mean();
        let log_nc_coarse = base_coarse + w_coarse.log_mean();
        let log_nc_anti = w_anti.as_ref().map(|w| base_anti + w.log_mean());

        let coarse_ess = w_coarse.ess();
        let resampled = policy.should_resample(coarse_ess, n);
        let mut coupled_fraction = None;
        if resampled {
            let mut rng = key.resample(k);
            let c = match &w_anti {
                Some(wa) => coupled_resample(&[&w_fine, &w_coarse, wa], &mut rng)?,
                None => coupled_resample(&[&w_fine, &w_coarse], &mut rng)?,
            };
            coupled_fraction = Some(c.coupled.iter().filter(|&&b| b).count() as f64 / n as f64);
            fine = gather(&fine, d, &c.ancestors[0]);
            coarse = gather(&coarse, d, &c.ancestors[1]);
            if antithetic {
                anti = gather(&anti, d, &c.ancestors[2]);
                lw_anti.fill(0.0);
                base_anti = log_nc_anti.unwrap_or(0.0);
            }
            lw_fine.fill(0.0);
            lw_coarse.fill(0.0);
            base_fine = log_nc_fine;
            base_coarse = log_nc_coarse;
            resample_times.push(k);
        }
        steps.push(CoupledStep {
            k,
            fine: e_fine,
            coarse: e_coarse,
            anti: e_anti,
            difference,
            log_nc_fine,
            log_nc_coarse,
            log_nc_anti,
            cumulative_cost: cost,
            coarse_ess,
            resampled,
            coupled_fraction,
        });
    }
    Ok(CoupledFilterOutput {
        level,
        particles: n,
        antithetic,
        phi_names: test_functions.iter().map(|t| t.name.clone()).collect(),
        steps,
        cost,
        resample_times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, BuiltinModel, ObservationModel};

    fn lvl(l: u32) -> Level {
        Level::new(l).unwrap()
    }

    fn ids() -> Vec<TestFunction> {
        vec![TestFunction::coordinate(0)]
    }

    #[test]
    fn estimate_examples() {
        let phi = TestFunction::coordinate(0);
        let e = WeightedEnsemble::new(1, vec![0.0, 4.0], vec![0.25f64.ln(), 0.75f64.ln()], lvl(0), 1).unwrap();
        assert!((filter_estimate(&e, &phi).unwrap() - 3.0).abs() < 1e-15);
        let e = WeightedEnsemble::new(1, vec![1.0, 2.0, 6.0], vec![0.0; 3], lvl(0), 1).unwrap();
        assert!((filter_estimate(&e, &phi).unwrap() - 3.0).abs() < 1e-15);
        let e = WeightedEnsemble::new(1, vec![1.0, 2.0, 6.0], vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY], lvl(0), 1)
            .unwrap();
        assert_eq!(filter_estimate(&e, &phi).unwrap(), 2.0);
        let dead = WeightedEnsemble::new(1, vec![1.0], vec![f64::NEG_INFINITY], lvl(0), 1).unwrap();
        assert!(matches!(filter_estimate(&dead, &phi), Err(Error::Degenerate)));
        assert!(WeightedEnsemble::new(2, vec![1.0], vec![0.0], lvl(0), 1).is_err());
    }

    #[test]
    fn nc_update_examples() {
        let c = -0.7f64;
        let mut acc = 0.0;
        for _ in 0..4 {
            acc = nc_update(acc, &[c; 5]).unwrap();
        }
        assert!((acc - 4.0 * c).abs() < 1e-14);
        assert!((nc_update(0.0, &[0.0, 2f64.ln()]).unwrap() - 1.5f64.ln()).abs() < 1e-15);
        assert!(nc_update(0.0, &[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn single_particle_filter() {
        let ssm = builtin_model(BuiltinModel::Nlm);
        let obs = vec![vec![0.1], vec![-0.3], vec![0.5]];
        let out = pf_run(&ssm, &obs, lvl(3), 1, ResamplePolicy::default(), &ids(), StreamKey::new(2)).unwrap();
        // replay the single trajectory
        let key = StreamKey::new(2);
        let mut x = ssm.x0.clone();
        let mut ws = Workspace::new(2);
        let mut log_nc = 0.0;
        for (i, y) in obs.iter().enumerate() {
            let mut rng = key.particle(i + 1, 0);
            ws.unit_with_rng(Discretization::Milstein, &ssm.diffusion, lvl(3), &mut x, &mut rng).unwrap();
            log_nc += ssm.observation.log_density(&x, y);
            assert_eq!(out.steps[i].estimates[0], x[0]);
            assert!((out.steps[i].log_nc - log_nc).abs() < 1e-12);
        }
        assert!(out.resample_times.is_empty());
    }

    #[test]
    fn constant_likelihood_never_resamples() {
        let c = -0.4;
        let ssm = builtin_model(BuiltinModel::Gbm).with_observation(ObservationModel::Constant { log_value: c, obs_dim: 1 });
        let obs = vec![vec![0.0]; 6];
        let out = pf_run(&ssm, &obs, lvl(2), 50, ResamplePolicy::default(), &ids(), StreamKey::new(1)).unwrap();
        assert!(out.resample_times.is_empty());
        for s in &out.steps {
            assert!((s.log_nc - s.k as f64 * c).abs() < 1e-12);
            assert_eq!(s.ess, 50.0);
        }
    }

    #[test]
    fn cost_is_closed_form() {
        let ssm = builtin_model(BuiltinModel::ClarkCameron);
        let obs = vec![vec![0.0]; 4];
        let pf = pf_run(&ssm, &obs, lvl(3), 20, ResamplePolicy::default(), &ids(), StreamKey::new(1)).unwrap();
        assert_eq!(pf.cost, 4 * 20 * 8);
        assert_eq!(pf.steps[1].cumulative_cost, 2 * 20 * 8);
        let c = cpf_run(&ssm, &obs, lvl(3), 20, ResamplePolicy::default(), &ids(), StreamKey::new(1)).unwrap();
        assert_eq!(c.cost, 4 * 20 * (8 + 4 + 8));
        let e = euler_cpf_run(&ssm, &obs, lvl(3), 20, ResamplePolicy::default(), &ids(), StreamKey::new(1)).unwrap();
        assert_eq!(e.cost, 4 * 20 * (8 + 4));
    }

    #[test]
    fn adaptive_resampling_follows_ess() {
        let ssm = builtin_model(BuiltinModel::Gbm);
        let obs: Vec<Vec<f64>> = (0..8).map(|i| vec![0.05 * i as f64]).collect();
        let out = pf_run(&ssm, &obs, lvl(2), 200, ResamplePolicy::default(), &ids(), StreamKey::new(4)).unwrap();
        for s in &out.steps {
            assert_eq!(s.resampled, s.ess < 100.0);
            assert_eq!(out.resample_times.contains(&s.k), s.resampled);
        }
        let c = cpf_run(&ssm, &obs, lvl(2), 200, ResamplePolicy::default(), &ids(), StreamKey::new(4)).unwrap();
        for s in &c.steps {
            assert_eq!(s.resampled, s.coarse_ess < 100.0);
        }
        let every = pf_run(&ssm, &obs, lvl(2), 200, ResamplePolicy::every_step(), &ids(), StreamKey::new(4)).unwrap();
        assert_eq!(every.resample_times, (1..=8).collect::<Vec<_>>());
    }

    #[test]
    fn difference_identity_holds() {
        let ssm = builtin_model(BuiltinModel::Nlm);
        let obs: Vec<Vec<f64>> = (0..5).map(|i| vec![0.2 * i as f64 - 0.4]).collect();
        let phis = vec![TestFunction::coordinate(0), TestFunction::coordinate(1), TestFunction::new("sq", |x| x[0] * x[0])];
        let c = cpf_run(&ssm, &obs, lvl(3), 64, ResamplePolicy::default(), &phis, StreamKey::new(5)).unwrap();
        for s in &c.steps {
            let a = s.anti.as_ref().unwrap();
            for j in 0..3 {
                assert!((s.difference[j] - (0.5 * s.fine[j] + 0.5 * a[j] - s.coarse[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_particle_coupled_difference() {
        let ssm = builtin_model(BuiltinModel::Gbm);
        let obs = vec![vec![0.0], vec![0.1]];
        let c = cpf_run(&ssm, &obs, lvl(2), 1, ResamplePolicy::every_step(), &ids(), StreamKey::new(8)).unwrap();
        let key = StreamKey::new(8);
        let (mut f, mut co, mut a) = (vec![1.0], vec![1.0], vec![1.0]);
        let mut ws = Workspace::new(1);
        for (i, s) in c.steps.iter().enumerate() {
            let mut rng = key.particle(i + 1, 0);
            ws.coupled_unit_with_rng(Discretization::Milstein, &ssm.diffusion, lvl(2), &mut f, &mut co, Some(&mut a), &mut rng)
                .unwrap();
            assert_eq!(s.difference[0], 0.5 * f[0] + 0.5 * a[0] - co[0]);
        }
    }

    #[test]
    fn constant_model_differences_vanish() {
        let ssm = builtin_model(BuiltinModel::LinearGaussian);
        let obs: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64 * 0.7).sin()]).collect();
        let phis = vec![TestFunction::coordinate(0), TestFunction::new("cube", |x| x[0].powi(3))];
        for antithetic in [true, false] {
            let out = if antithetic {
                cpf_run(&ssm, &obs, lvl(4), 100, ResamplePolicy::default(), &phis, StreamKey::new(3)).unwrap()
            } else {
                euler_cpf_run(&ssm, &obs, lvl(4), 100, ResamplePolicy::default(), &phis, StreamKey::new(3)).unwrap()
            };
            for s in &out.steps {
                assert!(s.difference.iter().all(|&v| v == 0.0));
                assert_eq!(s.fine, s.coarse);
                assert_eq!(s.log_nc_fine, s.log_nc_coarse);
            }
        }
    }

    #[test]
    fn level_zero_coupled_is_rejected() {
        let ssm = builtin_model(BuiltinModel::Gbm);
        let r = cpf_run(&ssm, &[vec![0.0]], lvl(0), 5, ResamplePolicy::default(), &ids(), StreamKey::new(1));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn collapse_reports_time() {
        let ssm = builtin_model(BuiltinModel::Gbm).with_observation(ObservationModel::Custom {
            obs_dim: 1,
            log_density: Arc::new(|_, y| if y[0] > 0.5 { f64::NEG_INFINITY } else { 0.0 }),
        });
        let obs = vec![vec![0.0], vec![0.0], vec![1.0]];
        match pf_run(&ssm, &obs, lvl(1), 10, ResamplePolicy::default(), &ids(), StreamKey::new(1)) {
            Err(Error::FilterCollapse { time: 3, marginal: Marginal::Single }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match cpf_run(&ssm, &obs, lvl(1), 10, ResamplePolicy::default(), &ids(), StreamKey::new(1)) {
            Err(Error::FilterCollapse { time: 3, marginal: Marginal::Fine }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_inputs() {
        let ssm = builtin_model(BuiltinModel::Gbm);
        assert!(pf_run(&ssm, &[], lvl(1), 10, ResamplePolicy::default(), &ids(), StreamKey::new(1)).is_err());
        assert!(pf_run(&ssm, &[vec![0.0]], lvl(1), 0, ResamplePolicy::default(), &ids(), StreamKey::new(1)).is_err());
        assert!(pf_run(&ssm, &[vec![0.0, 1.0]], lvl(1), 3, ResamplePolicy::default(), &ids(), StreamKey::new(1)).is_err());
        let bad = ResamplePolicy {
            mode: ResampleMode::Adaptive,
            threshold_fraction: 0.0,
        };
        assert!(pf_run(&ssm, &[vec![0.0]], lvl(1), 3, bad, &ids(), StreamKey::new(1)).is_err());
    }

    #[test]
    fn csv_has_expected_columns() {
        let ssm = builtin_model(BuiltinModel::Gbm);
        let out = pf_run(&ssm, &[vec![0.0], vec![0.1]], lvl(1), 10, ResamplePolicy::default(), &ids(), StreamKey::new(1)).unwrap();
        let mut buf = Vec::new();
        out.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "k,phi_name,estimate,log_nc,cumulative_cost,resampled");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "1");
        assert_eq!(row[1], "x1");
        assert_eq!(row[2].parse::<f64>().unwrap(), out.steps[0].estimates[0]);
    }
}
