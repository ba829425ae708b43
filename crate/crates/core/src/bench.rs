//! Experiment harness: data simulation, reference filters, MSE versus cost
//! sweeps and log-log rate fits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{fmt_f64, pf_run, ResamplePolicy, TestFunction};
use crate::model::{GaussianForm, StateSpaceModel};
use crate::multilevel::{allocate_levels, allocate_levels_euler, amlpf_run, mlpf_baseline_run, MLConfig, SignedLog};
use crate::scheme::{milstein_unit, Level};
use crate::streams::{RunSeed, StreamKey};

const TAG_BENCH: u64 = 0x6265_6e63_68;
const TAG_REFERENCE: u64 = 0x7265_66;

/// Observations `y_1..y_n` and, when simulated, the latent states `x_1..x_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub obs: Vec<Vec<f64>>,
    pub latent: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn horizon(&self) -> usize {
        self.obs.len()
    }

    /// Columns `k, y_1..y_q` and `x_1..x_d` when the latent path is known.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let q = self.obs.first().map_or(0, Vec::len);
        let d = self.latent.as_ref().and_then(|l| l.first()).map_or(0, Vec::len);
        let mut header = vec!["k".to_string()];
        header.extend((1..=q).map(|j| format!("y_{j}")));
        header.extend((1..=d).map(|j| format!("x_{j}")));
        w.write_record(&header)?;
        for (i, y) in self.obs.iter().enumerate() {
            let mut row = vec![(i + 1).to_string()];
            row.extend(y.iter().map(|v| fmt_f64(*v)));
            if let Some(l) = &self.latent {
                row.extend(l[i].iter().map(|v| fmt_f64(*v)));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the layout written by [`Dataset::write_csv`]; lines starting
    /// with `#` are skipped.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let header = r.headers()?.clone();
        let y_cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("y_")).map(|(i, _)| i).collect();
        let x_cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("x_")).map(|(i, _)| i).collect();
        if y_cols.is_empty() {
            return Err(Error::Config("dataset has no y_ columns".into()));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Config(format!("dataset value {s:?} is not a number")))
        };
        let mut obs = Vec::new();
        let mut latent = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            obs.push(y_cols.iter().map(|&i| parse(&rec[i])).collect::<Result<Vec<_>>>()?);
            if !x_cols.is_empty() {
                latent.push(x_cols.iter().map(|&i| parse(&rec[i])).collect::<Result<Vec<_>>>()?);
            }
        }
        if obs.is_empty() {
            return Err(Error::Config("dataset has no rows".into()));
        }
        Ok(Dataset {
            obs,
            latent: if x_cols.is_empty() { None } else { Some(latent) },
        })
    }
}

/// How the latent path is simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Exact transitions; fails for models without them.
    Exact,
    /// Truncated Milstein at the given level.
    Level(Level),
    /// Exact when available, otherwise Milstein at the given level.
    Auto(Level),
}

pub fn simulate_data(ssm: &StateSpaceModel, n: usize, fidelity: Fidelity, rng: &mut dyn RngCore) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("horizon must be at least 1".into()));
    }
    let coeffs = ssm.diffusion.coefficients();
    let exact_available = coeffs.has_exact_sampler();
    let level = match fidelity {
        Fidelity::Exact if !exact_available => {
            return Err(Error::Usage(format!("model {} has no exact transition sampler", ssm.name)))
        }
        Fidelity::Exact => None,
        Fidelity::Level(l) => Some(l),
        Fidelity::Auto(l) => (!exact_available).then_some(l),
    };
    let mut x = ssm.x0.clone();
    let mut obs = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    for _ in 0..n {
        x = match level {
            None => coeffs.sample_exact_unit(&x, rng).expect("exact sampler checked above"),
            Some(l) => milstein_unit(&ssm.diffusion, l, &x, rng)?,
        };
        obs.push(ssm.observation.sample(&x, rng)?);
        latent.push(x.clone());
    }
    Ok(Dataset {
        obs,
        latent: Some(latent),
    })
}

/// Exact filter moments of the transformed state and the log-evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanOutput {
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    /// `log p(y_{1:k})` for each `k`.
    pub log_evidence: Vec<f64>,
}

fn normal_logpdf(y: f64, m: f64, v: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (y - m).powi(2) / v)
}

/// Scalar predict/update recursion for a [`GaussianForm`].
pub fn kalman_filter(form: &GaussianForm, y: &[f64]) -> KalmanOutput {
    let (mut m, mut v, mut ll) = (form.initial, 0.0, 0.0);
    let mut out = KalmanOutput {
        means: Vec::with_capacity(y.len()),
        vars: Vec::with_capacity(y.len()),
        log_evidence: Vec::with_capacity(y.len()),
    };
    for &yk in y {
        m += form.drift;
        v += form.var;
        let s = v + form.obs_var;
        ll += normal_logpdf(yk, m, s);
        let gain = v / s;
        m += gain * (yk - m);
        v *= 1.0 - gain;
        out.means.push(m);
        out.vars.push(v);
        out.log_evidence.push(ll);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    KalmanExact,
    HighResolutionPf,
}

/// Reference filter values `values[k-1][j]` for test function `j` and the
/// reference `log p(y_{1:k})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub phi_names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub log_nc: Vec<f64>,
    pub provenance: Provenance,
    /// Root mean square of the per-cell standard errors.
    pub standard_error: f64,
    pub cell_standard_errors: Vec<Vec<f64>>,
}

/// Exact reference for models with a closed Gaussian form; only the first
/// coordinate is supported as a test function.
pub fn kalman_reference(ssm: &StateSpaceModel, obs: &[Vec<f64>], test_functions: &[TestFunction]) -> Result<ReferenceValue> {
    let form = ssm
        .gaussian_form
        .ok_or_else(|| Error::Usage(format!("kalman reference needs a linear-Gaussian model, got {}", ssm.name)))?;
    if let Some(tf) = test_functions.iter().find(|t| t.coordinate != Some(0)) {
        return Err(Error::Usage(format!("kalman reference supports only x1, got {}", tf.name)));
    }
    let y: Vec<f64> = obs.iter().map(|o| o[0]).collect();
    let kf = kalman_filter(&form, &y);
    let values = kf
        .means
        .iter()
        .zip(&kf.vars)
        .map(|(m, v)| {
            let e = if form.log_transform { (m + 0.5 * v).exp() } else { *m };
            vec![e; test_functions.len()]
        })
        .collect();
    Ok(ReferenceValue {
        phi_names: test_functions.iter().map(|t| t.name.clone()).collect(),
        values,
        log_nc: kf.log_evidence,
        provenance: Provenance::KalmanExact,
        standard_error: 0.0,
        cell_standard_errors: vec![vec![0.0; test_functions.len()]; obs.len()],
    })
}

/// Size of a high-resolution particle filter reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSettings {
    pub level: Level,
    pub particles: usize,
    pub repeats: usize,
    pub seed: u64,
}

/// Average of independent bootstrap filters at a fine level.
pub fn high_resolution_reference(
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    test_functions: &[TestFunction],
    settings: &ReferenceSettings,
    policy: ResamplePolicy,
) -> Result<ReferenceValue> {
    if settings.repeats < 2 {
        return Err(Error::Usage("reference needs at least 2 repeats".into()));
    }
    let runs = (0..settings.repeats)
        .into_par_iter()
        .map(|r| {
            let key = StreamKey::new(settings.seed).path(&[TAG_REFERENCE, r as u64]);
            pf_run(ssm, obs, settings.level, settings.particles, policy, test_functions, key)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let r = runs.len() as f64;
    let nphi = test_functions.len();
    let mut values = vec![vec![0.0; nphi]; obs.len()];
    let mut ses = vec![vec![0.0; nphi]; obs.len()];
    let mut log_nc = Vec::with_capacity(obs.len());
    for t in 0..obs.len() {
        for j in 0..nphi {
            let xs: Vec<f64> = runs.iter().map(|o| o.steps[t].estimates[j]).collect();
            let (m, v) = mean_var(&xs);
            values[t][j] = m;
            ses[t][j] = (v * r / (r - 1.0) / r).sqrt();
        }
        // average of the unbiased normalizing constant estimates
        let logs: Vec<(f64, f64)> = runs.iter().map(|o| (1.0 / r, o.steps[t].log_nc)).collect();
        log_nc.push(SignedLog::linear_combination(&logs).log_abs);
    }
    let cells = (obs.len() * nphi) as f64;
    let standard_error = (ses.iter().flatten().map(|s| s * s).sum::<f64>() / cells).sqrt();
    Ok(ReferenceValue {
        phi_names: test_functions.iter().map(|t| t.name.clone()).collect(),
        values,
        log_nc,
        provenance: Provenance::HighResolutionPf,
        standard_error,
        cell_standard_errors: ses,
    })
}

/// Kalman reference when the model and test functions allow it, otherwise a
/// high-resolution particle filter reference.
pub fn ground_truth(
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    test_functions: &[TestFunction],
    settings: &ReferenceSettings,
    policy: ResamplePolicy,
) -> Result<ReferenceValue> {
    if ssm.gaussian_form.is_some() && test_functions.iter().all(|t| t.coordinate == Some(0)) {
        kalman_reference(ssm, obs, test_functions)
    } else {
        high_resolution_reference(ssm, obs, test_functions, settings, policy)
    }
}

/// Population mean and variance.
fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pf,
    Mlpf,
    Amlpf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pf => "pf",
            Method::Mlpf => "mlpf",
            Method::Amlpf => "amlpf",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pf" => Ok(Method::Pf),
            "mlpf" => Ok(Method::Mlpf),
            "amlpf" => Ok(Method::Amlpf),
            other => Err(Error::Usage(format!("unknown method {other:?} (expected pf, mlpf or amlpf)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Filter,
    Nc,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Filter => "filter",
            Target::Nc => "nc",
        })
    }
}

/// One budget point: accuracy `epsilon` and terminal level `Lmax`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon: f64,
    pub l_max: u32,
}

/// Budgets `epsilon = scale * 2^-Lmax` for each terminal level.
pub fn budget_ladder(l_maxes: &[u32], scale: f64) -> Vec<Budget> {
    l_maxes
        .iter()
        .map(|&l| Budget {
            epsilon: scale * 2f64.powi(-(l as i32)),
            l_max: l,
        })
        .collect()
}

/// Allocation settings shared by every budget of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub l_min: u32,
    /// `(c0, c1)` for the antithetic estimator.
    pub amlpf_constants: (f64, f64),
    /// `(c0, c1)` for the Euler-coupled baseline.
    pub mlpf_constants: (f64, f64),
    /// Single-level filter uses `N = ceil(c * eps^-2)` at level `Lmax`.
    pub pf_constant: f64,
    pub repeats: usize,
    pub master_seed: u64,
    pub policy: ResamplePolicy,
    /// Replicate `r` uses the same streams at every budget point, which
    /// correlates the errors along the ladder and steadies the fitted slope.
    pub common_random_numbers: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            l_min: 2,
            amlpf_constants: (12.0, 1.0),
            mlpf_constants: (8.0, 1.0),
            pf_constant: 1.0,
            repeats: 20,
            master_seed: 1,
            policy: ResamplePolicy::default(),
            common_random_numbers: true,
        }
    }
}

/// What one method runs at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Plan {
    Single { level: Level, particles: usize },
    Multi(MLConfig),
}

impl Plan {
    pub fn max_particles(&self) -> usize {
        match self {
            Plan::Single { particles, .. } => *particles,
            Plan::Multi(cfg) => cfg.particle_counts.iter().copied().max().unwrap_or(1),
        }
    }

    pub fn levels(&self) -> (u32, u32) {
        match self {
            Plan::Single { level, .. } => (level.index(), level.index()),
            Plan::Multi(cfg) => (cfg.l_min, cfg.l_max),
        }
    }
}

pub fn plan(method: Method, budget: &Budget, s: &SweepSettings) -> Result<Plan> {
    Ok(match method {
        Method::Pf => {
            if !(budget.epsilon > 0.0) {
                return Err(Error::Usage("epsilon must be positive".into()));
            }
            let n = (s.pf_constant * budget.epsilon.powi(-2)).ceil().max(1.0) as usize;
            Plan::Single {
                level: Level::new(budget.l_max)?,
                particles: n,
            }
        }
        Method::Amlpf => Plan::Multi(MLConfig {
            l_min: s.l_min,
            l_max: budget.l_max,
            particle_counts: allocate_levels(budget.epsilon, s.l_min, budget.l_max, s.amlpf_constants)?,
            allocation_constants: s.amlpf_constants,
        }),
        Method::Mlpf => Plan::Multi(MLConfig {
            l_min: s.l_min,
            l_max: budget.l_max,
            particle_counts: allocate_levels_euler(budget.epsilon, s.l_min, budget.l_max, s.mlpf_constants)?,
            allocation_constants: s.mlpf_constants,
        }),
    })
}

/// How a high-resolution reference is sized relative to a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSizing {
    /// Reference level is `max Lmax + level_offset`.
    pub level_offset: u32,
    /// Reference particle count is `particle_factor * max_l N_l`.
    pub particle_factor: usize,
    pub repeats: usize,
}

impl Default for ReferenceSizing {
    fn default() -> Self {
        ReferenceSizing {
            level_offset: 2,
            particle_factor: 50,
            repeats: 20,
        }
    }
}

/// Reference settings sized from the sweep; the default sizing gives level
/// `max Lmax + 2`, `N = 50 max_l N_l` and 20 repeats.
pub fn reference_settings_for(
    methods: &[Method],
    budgets: &[Budget],
    s: &SweepSettings,
    sizing: ReferenceSizing,
) -> Result<ReferenceSettings> {
    let mut max_n = 1;
    for m in methods.iter().filter(|m| **m != Method::Pf) {
        for b in budgets {
            max_n = max_n.max(plan(*m, b, s)?.max_particles());
        }
    }
    let max_l = budgets.iter().map(|b| b.l_max).max().unwrap_or(0);
    Ok(ReferenceSettings {
        level: Level::new(max_l + sizing.level_offset)?,
        particles: sizing.particle_factor * max_n,
        repeats: sizing.repeats,
        seed: s.master_seed,
    })
}

/// One row of a sweep. The first nine columns are the stable schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: Method,
    pub model: String,
    pub target: Target,
    pub budget_index: usize,
    pub mse: f64,
    pub cost: f64,
    pub repeats: usize,
    #[serde(rename = "L_min")]
    pub l_min: u32,
    #[serde(rename = "L_max")]
    pub l_max: u32,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Variance across replicates (population form), averaged over cells.
    #[serde(default)]
    pub variance: Option<f64>,
    /// Squared bias to the reference, averaged over cells.
    #[serde(default)]
    pub bias_sq: Option<f64>,
    /// Fewer than 10 replicates.
    #[serde(default)]
    pub low_precision: bool,
}

pub fn write_records<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<BenchRecord>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

/// Replicate outputs for one method at one budget.
struct CellRuns {
    /// `estimates[r][k-1][j]`
    estimates: Vec<Vec<Vec<f64>>>,
    /// Final-time normalizing constant relative to the reference.
    nc_ratio: Vec<f64>,
    cost: u64,
}

fn run_cell(
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    tfs: &[TestFunction],
    reference: &ReferenceValue,
    method: Method,
    plan: &Plan,
    s: &SweepSettings,
    seed: u64,
) -> Result<CellRuns> {
    let ref_log_nc = *reference.log_nc.last().expect("non-empty reference");
    let runs = (0..s.repeats)
        .into_par_iter()
        .map(|r| -> Result<(Vec<Vec<f64>>, f64, u64)> {
            let rs = RunSeed::new(seed, r as u64);
            match plan {
                Plan::Single { level, particles } => {
                    let out = pf_run(ssm, obs, *level, *particles, s.policy, tfs, rs.level(level.index()))?;
                    let nc = (out.steps.last().unwrap().log_nc - ref_log_nc).exp();
                    Ok((out.steps.into_iter().map(|st| st.estimates).collect(), nc, out.cost))
                }
                Plan::Multi(cfg) => {
                    let out = match method {
                        Method::Mlpf => mlpf_baseline_run(ssm, obs, cfg, s.policy, tfs, rs)?,
                        _ => amlpf_run(ssm, obs, cfg, s.policy, tfs, rs)?,
                    };
                    let nc = out.combined.last().unwrap().nc;
                    let rel = nc.sign as f64 * (nc.log_abs - ref_log_nc).exp();
                    Ok((out.combined.into_iter().map(|c| c.estimates).collect(), rel, out.total_cost))
                }
            }
        })
        .collect::<Vec<_>>();
    let mut cell = CellRuns {
        estimates: Vec::with_capacity(s.repeats),
        nc_ratio: Vec::with_capacity(s.repeats),
        cost: 0,
    };
    for r in runs {
        let (e, nc, cost) = r?;
        cell.estimates.push(e);
        cell.nc_ratio.push(nc);
        cell.cost = cost;
    }
    Ok(cell)
}

/// `(mse, variance, bias_sq)` averaged over time points and test functions.
fn filter_errors(cell: &CellRuns, reference: &ReferenceValue) -> (f64, f64, f64) {
    let (mut mse, mut var, mut b2, mut cells) = (0.0, 0.0, 0.0, 0.0);
    for (t, ref_row) in reference.values.iter().enumerate() {
        for (j, rv) in ref_row.iter().enumerate() {
            let xs: Vec<f64> = cell.estimates.iter().map(|e| e[t][j]).collect();
            let (m, v) = mean_var(&xs);
            mse += xs.iter().map(|x| (x - rv).powi(2)).sum::<f64>() / xs.len() as f64;
            var += v;
            b2 += (m - rv).powi(2);
            cells += 1.0;
        }
    }
    (mse / cells, var / cells, b2 / cells)
}

/// Runs every method at every budget with `settings.repeats` replicates and
/// returns one filter record and one normalizing constant record per cell,
/// ordered by method, budget and target.
///
/// Filter MSE is averaged over all time points and test functions. The
/// normalizing constant error is measured at the final time on the ratio
/// `p_hat / p_ref`, which has the same rate as the raw error.
pub fn mse_cost_sweep(
    ssm: &StateSpaceModel,
    obs: &[Vec<f64>],
    test_functions: &[TestFunction],
    reference: &ReferenceValue,
    methods: &[Method],
    budgets: &[Budget],
    settings: &SweepSettings,
) -> Result<Vec<BenchRecord>> {
    if settings.repeats < 2 {
        return Err(Error::Usage("repeats must be at least 2".into()));
    }
    if reference.values.len() != obs.len() || reference.phi_names.len() != test_functions.len() {
        return Err(Error::Contract("reference does not match the observations or test functions".into()));
    }
    settings.policy.validate()?;
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let mut jobs = Vec::new();
    for &m in &methods {
        for (b, budget) in budgets.iter().enumerate() {
            jobs.push((m, b, plan(m, budget, settings)?));
        }
    }
    let cells = jobs
        .par_iter()
        .map(|(m, b, p)| {
            let seed = if settings.common_random_numbers {
                StreamKey::new(settings.master_seed).path(&[TAG_BENCH, *m as u64]).0
            } else {
                StreamKey::new(settings.master_seed).path(&[TAG_BENCH, *m as u64, *b as u64]).0
            };
            run_cell(ssm, obs, test_functions, reference, *m, p, settings, seed)
        })
        .collect::<Vec<_>>();

    let mut records = Vec::with_capacity(2 * jobs.len());
    let mut min_sd = f64::INFINITY;
    for ((m, b, p), cell) in jobs.iter().zip(cells) {
        let cell = cell?;
        let (l_min, l_max) = p.levels();
        let base = BenchRecord {
            method: *m,
            model: ssm.name.clone(),
            target: Target::Filter,
            budget_index: *b,
            mse: 0.0,
            cost: cell.cost as f64,
            repeats: settings.repeats,
            l_min,
            l_max,
            epsilon: Some(budgets[*b].epsilon),
            variance: None,
            bias_sq: None,
            low_precision: settings.repeats < 10,
        };
        let (mse, var, b2) = filter_errors(&cell, reference);
        min_sd = min_sd.min(var.sqrt());
        records.push(BenchRecord {
            mse,
            variance: Some(var),
            bias_sq: Some(b2),
            ..base.clone()
        });
        let errs: Vec<f64> = cell.nc_ratio.iter().map(|v| v - 1.0).collect();
        let (m_err, v_err) = mean_var(&errs);
        records.push(BenchRecord {
            target: Target::Nc,
            mse: errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64,
            variance: Some(v_err),
            bias_sq: Some(m_err * m_err),
            ..base
        });
    }
    if reference.provenance == Provenance::HighResolutionPf && reference.standard_error >= min_sd / 5.0 {
        return Err(Error::ReferencePrecision {
            reference_se: reference.standard_error,
            min_method_sd: min_sd,
        });
    }
    Ok(records)
}

/// OLS slope of `log10 mse` on `log10 cost` and its standard error.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 3 {
        return Err(Error::Usage(format!("rate fit needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|(c, m)| !(*c > 0.0 && *m > 0.0 && c.is_finite() && m.is_finite())) {
        return Err(Error::Usage("rate fit needs positive finite cost and mse".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.log10()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Usage("rate fit needs at least two distinct costs".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    Ok((slope, se))
}

/// Fitted rate for one method and target. `slope` is d log MSE / d log cost;
/// `cost_rate = 1 / slope` is d log cost / d log MSE, the quantity whose
/// canonical multilevel value is -1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub method: Method,
    pub model: String,
    pub target: Target,
    pub points: usize,
    pub slope: f64,
    pub slope_se: f64,
    pub cost_rate: f64,
    pub cost_rate_se: f64,
}

/// One fit per (model, method, target), keyed `model/method/target`.
pub fn fit_rates(records: &[BenchRecord]) -> Result<BTreeMap<String, RateFit>> {
    let mut groups: BTreeMap<(String, Method, Target), Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        groups.entry((r.model.clone(), r.method, r.target)).or_default().push((r.cost, r.mse));
    }
    let mut out = BTreeMap::new();
    for ((model, method, target), pts) in groups {
        let (slope, slope_se) = fit_rate(&pts)?;
        out.insert(
            format!("{model}/{method}/{target}"),
            RateFit {
                method,
                model,
                target,
                points: pts.len(),
                slope,
                slope_se,
                cost_rate: 1.0 / slope,
                cost_rate_se: slope_se / (slope * slope),
            },
        );
    }
    Ok(out)
}
