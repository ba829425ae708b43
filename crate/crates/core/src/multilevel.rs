//! Level allocation and the multilevel combinations of a base particle
//! filter with coupled level-difference filters.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::filter::{cpf_run, euler_cpf_run, fmt_f64, pf_run_with, CoupledFilterOutput, FilterOutput, ResamplePolicy, TestFunction};
use crate::model::StateSpaceModel;
use crate::scheme::{Discretization, Level};
use crate::streams::RunSeed;

/// `ceil` that ignores rounding noise just above an integer, so that
/// `0.1^-2 * 1` gives 100 rather than 101.
fn tolerant_ceil(v: f64) -> usize {
    let r = v.round();
    if (v - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as usize
    } else {
        v.ceil() as usize
    }
}

fn check_allocation_inputs(epsilon: f64, l_min: u32, l_max: u32, constants: (f64, f64)) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Usage(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if l_min >= l_max {
        return Err(Error::Usage("L_min < L_max required".into()));
    }
    if !(constants.0 > 0.0 && constants.1 > 0.0 && constants.0.is_finite() && constants.1.is_finite()) {
        return Err(Error::Usage("allocation constants must be positive".into()));
    }
    Ok(())
}

/// Particle counts for the antithetic estimator:
/// `N_Lmin = ceil(c0 eps^-2)` and
/// `N_l = max(1, ceil(c1 eps^-2 Delta_l (Lmax - Lmin + 1)))` above it.
pub fn allocate_levels(epsilon: f64, l_min: u32, l_max: u32, constants: (f64, f64)) -> Result<Vec<usize>> {
    check_allocation_inputs(epsilon, l_min, l_max, constants)?;
    let e2 = epsilon.powi(-2);
    let span = (l_max - l_min + 1) as f64;
    let mut counts = vec![tolerant_ceil(constants.0 * e2).max(1)];
    for l in l_min + 1..=l_max {
        let delta = 2f64.powi(-(l as i32));
        counts.push(tolerant_ceil(constants.1 * e2 * delta * span).max(1));
    }
    Ok(counts)
}

/// Particle counts for the Euler-coupled baseline, whose level differences
/// have variance of order `Delta_l^{1/2}`:
/// `N_l = max(1, ceil(c1 eps^-2 Delta_l^{3/4} sum_q Delta_q^{-1/4}))`.
pub fn allocate_levels_euler(epsilon: f64, l_min: u32, l_max: u32, constants: (f64, f64)) -> Result<Vec<usize>> {
    check_allocation_inputs(epsilon, l_min, l_max, constants)?;
    let e2 = epsilon.powi(-2);
    let delta = |l: u32| 2f64.powi(-(l as i32));
    let k: f64 = (l_min + 1..=l_max).map(|q| delta(q).powf(-0.25)).sum();
    let mut counts = vec![tolerant_ceil(constants.0 * e2).max(1)];
    for l in l_min + 1..=l_max {
        counts.push(tolerant_ceil(constants.1 * e2 * delta(l).powf(0.75) * k).max(1));
    }
    Ok(counts)
}

/// Level schedule `(Lmin, Lmax, N_Lmin..N_Lmax)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLConfig {
    pub l_min: u32,
    pub l_max: u32,
    pub particle_counts: Vec<usize>,
    pub allocation_constants: (f64, f64),
}

impl MLConfig {
    pub fn new(l_min: u32, l_max: u32, particle_counts: Vec<usize>) -> Result<Self> {
        let cfg = MLConfig {
            l_min,
            l_max,
            particle_counts,
            allocation_constants: (1.0, 1.0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schedule from [`allocate_levels`].
    pub fn allocated(epsilon: f64, l_min: u32, l_max: u32, constants: (f64, f64)) -> Result<Self> {
        Ok(MLConfig {
            l_min,
            l_max,
            particle_counts: allocate_levels(epsilon, l_min, l_max, constants)?,
            allocation_constants: constants,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_min >= self.l_max {
            return Err(Error::Config("L_min < L_max required".into()));
        }
        Level::new(self.l_max)?;
        let expected = (self.l_max - self.l_min + 1) as usize;
        if self.particle_counts.len() != expected {
            return Err(Error::Config(format!(
                "particle_counts needs {expected} entries for levels {}..={}, got {}",
                self.l_min,
                self.l_max,
                self.particle_counts.len()
            )));
        }
        if self.particle_counts.contains(&0) {
            return Err(Error::Config("particle_counts must all be >= 1".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> impl Iterator<Item = u32> {
        self.l_min..=self.l_max
    }

    pub fn count(&self, l: u32) -> usize {
        self.particle_counts[(l - self.l_min) as usize]
    }
}

/// A real number stored as `sign * exp(log_abs)`; zero has sign 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedLog {
    pub sign: i8,
    #[serde(serialize_with = "ser_log", deserialize_with = "de_log")]
    pub log_abs: f64,
}

fn ser_log<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_some(v)
    } else {
        s.serialize_none()
    }
}

fn de_log<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

impl SignedLog {
    pub const ZERO: SignedLog = SignedLog {
        sign: 0,
        log_abs: f64::NEG_INFINITY,
    };

    pub fn from_log(log_value: f64) -> Self {
        if log_value == f64::NEG_INFINITY {
            SignedLog::ZERO
        } else {
            SignedLog {
                sign: 1,
                log_abs: log_value,
            }
        }
    }

    /// `sum_i c_i exp(l_i)` evaluated with a common shift.
    pub fn linear_combination(terms: &[(f64, f64)]) -> Self {
        let m = terms
            .iter()
            .filter(|(c, _)| *c != 0.0)
            .map(|(_, l)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return SignedLog::ZERO;
        }
        let s: f64 = terms.iter().filter(|(c, _)| *c != 0.0).map(|(c, l)| c * (l - m).exp()).sum();
        if s == 0.0 {
            SignedLog::ZERO
        } else {
            SignedLog {
                sign: if s > 0.0 { 1 } else { -1 },
                log_abs: m + s.abs().ln(),
            }
        }
    }

    pub fn sum(values: &[SignedLog]) -> Self {
        let terms: Vec<(f64, f64)> = values.iter().map(|v| (v.sign as f64, v.log_abs)).collect();
        SignedLog::linear_combination(&terms)
    }

    pub fn value(&self) -> f64 {
        self.sign as f64 * self.log_abs.exp()
    }
}

/// Per-time multilevel estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedStep {
    pub k: usize,
    pub estimates: Vec<f64>,
    pub nc: SignedLog,
    /// Level-difference NC terms for `l = Lmin+1..=Lmax`.
    pub nc_terms: Vec<SignedLog>,
    pub cumulative_cost: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MLMethod {
    Amlpf,
    Mlpf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLOutput {
    pub method: MLMethod,
    pub config: MLConfig,
    pub phi_names: Vec<String>,
    pub base: FilterOutput,
    pub levels: Vec<CoupledFilterOutput>,
    pub combined: Vec<CombinedStep>,
    pub total_cost: u64,
}

impl MLOutput {
    pub fn estimate(&self, k: usize, phi: &str) -> Option<f64> {
        let j = self.phi_names.iter().position(|n| n == phi)?;
        self.combined.get(k.checked_sub(1)?).map(|s| s.estimates[j])
    }

    pub fn nc(&self, k: usize) -> Option<SignedLog> {
        self.combined.get(k.checked_sub(1)?).map(|s| s.nc)
    }

    /// Combined block as CSV: `k, phi_name, estimate, nc_sign, nc_log_abs, cumulative_cost`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "phi_name", "estimate", "nc_sign", "nc_log_abs", "cumulative_cost"])?;
        for s in &self.combined {
            for (name, v) in self.phi_names.iter().zip(&s.estimates) {
                w.write_record([
                    s.k.to_string(),
                    name.clone(),
                    fmt_f64(*v),
                    s.nc.sign.to_string(),
                    fmt_f64(s.nc.log_abs),
                    s.cumulative_cost.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn at_level<T>(l: u32, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Level {
        level: l,
        source: Box::new(e),
    })
}

/// Antithetic multilevel particle filter.
pub fn amlpf_run(
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    cfg: &MLConfig,
    policy: ResamplePolicy,
    test_functions: &[TestFunction],
    seed: RunSeed,
) -> Result<MLOutput> {
    ml_run(MLMethod::Amlpf, ssm, obs, cfg, policy, test_functions, seed)
}

/// Euler-coupled multilevel particle filter used as the baseline.
pub fn mlpf_baseline_run(
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    cfg: &MLConfig,
    policy: ResamplePolicy,
    test_functions: &[TestFunction],
    seed: RunSeed,
) -> Result<MLOutput> {
    ml_run(MLMethod::Mlpf, ssm, obs, cfg, policy, test_functions, seed)
}

fn ml_run(
    method: MLMethod,
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    cfg: &MLConfig,
    policy: ResamplePolicy,
    test_functions: &[TestFunction],
    seed: RunSeed,
) -> Result<MLOutput> {
    cfg.validate()?;
    let scheme = match method {
        MLMethod::Amlpf => Discretization::Milstein,
        MLMethod::Mlpf => Discretization::Euler,
    };
    let (base, coupled) = rayon::join(
        || {
            let l = cfg.l_min;
            at_level(
                l,
                pf_run_with(scheme, ssm, obs, Level::new(l)?, cfg.count(l), policy, test_functions, seed.level(l)),
            )
        },
        || {
            let runs: Vec<Result<CoupledFilterOutput>> = (cfg.l_min + 1..=cfg.l_max)
                .into_par_iter()
                .map(|l| {
                    let level = Level::new(l)?;
                    let r = match method {
                        MLMethod::Amlpf => cpf_run(ssm, obs, level, cfg.count(l), policy, test_functions, seed.level(l)),
                        MLMethod::Mlpf => euler_cpf_run(ssm, obs, level, cfg.count(l), policy, test_functions, seed.level(l)),
                    };
                    at_level(l, r)
                })
                .collect();
            runs.into_iter().collect::<Result<Vec<_>>>()
        },
    );
    let base = base?;
    let levels = coupled?;

    let combined = base
        .steps
        .iter()
        .enumerate()
        .map(|(t, b)| {
            let mut estimates = b.estimates.clone();
            let mut nc_terms = Vec::with_capacity(levels.len());
            let mut cumulative_cost = b.cumulative_cost;
            for lv in &levels {
                let s = &lv.steps[t];
                for (e, d) in estimates.iter_mut().zip(&s.difference) {
                    *e += d;
                }
                nc_terms.push(level_nc_term(s));
                cumulative_cost += s.cumulative_cost;
            }
            let mut all = vec![SignedLog::from_log(b.log_nc)];
            all.extend_from_slice(&nc_terms);
            CombinedStep {
                k: b.k,
                estimates,
                nc: SignedLog::sum(&all),
                nc_terms,
                cumulative_cost,
            }
        })
        .collect();
    let total_cost = base.cost + levels.iter().map(|l| l.cost).sum::<u64>();
    Ok(MLOutput {
        method,
        config: cfg.clone(),
        phi_names: base.phi_names.clone(),
        base,
        levels,
        combined,
        total_cost,
    })
}

/// `1/2 p_fine + 1/2 p_anti - p_coarse`, or `p_fine - p_coarse` for the pair.
pub fn level_nc_term(s: &crate::filter::CoupledStep) -> SignedLog {
    match s.log_nc_anti {
        Some(a) => SignedLog::linear_combination(&[(0.5, s.log_nc_fine), (0.5, a), (-1.0, s.log_nc_coarse)]),
        None => SignedLog::linear_combination(&[(1.0, s.log_nc_fine), (-1.0, s.log_nc_coarse)]),
    }
}
