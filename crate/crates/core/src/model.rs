//! Diffusion and observation models.
//!
//! A diffusion `dX = alpha(X) dt + beta(X) dW` on `R^d` is described by its
//! [`Coefficients`]. Matrices are stored row-major (`beta[i * d + j]`) and
//! the diffusion Jacobian as `jac[(i * d + j) * d + m] = d beta_ij / d x_m`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Drift, diffusion matrix and diffusion Jacobian of a time-homogeneous SDE.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn drift(&self, x: &[f64], out: &mut [f64]);

    fn diffusion(&self, x: &[f64], out: &mut [f64]);

    /// Partial derivatives of the diffusion matrix. The default uses central
    /// differences with step `1e-6 * max(1, |x_m|)`.
    fn diffusion_jacobian(&self, x: &[f64], out: &mut [f64]) {
        finite_difference_jacobian(self, x, out)
    }

    /// `Some((alpha, beta))` when both coefficients are state independent.
    /// Kernels use this to evaluate the unit-time map in closed form.
    fn constant(&self) -> Option<(&[f64], &[f64])> {
        None
    }

    /// Whether [`Coefficients::sample_exact_unit`] returns samples.
    fn has_exact_sampler(&self) -> bool {
        false
    }

    /// Exact sample of `X_1` given `X_0 = x`, when the transition law is known.
    fn sample_exact_unit(&self, _x: &[f64], _rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        None
    }
}

pub fn finite_difference_jacobian<C: Coefficients + ?Sized>(c: &C, x: &[f64], out: &mut [f64]) {
    let d = c.dim();
    let mut xp = x.to_vec();
    let mut plus = vec![0.0; d * d];
    let mut minus = vec![0.0; d * d];
    for m in 0..d {
        let h = 1e-6 * x[m].abs().max(1.0);
        xp[m] = x[m] + h;
        c.diffusion(&xp, &mut plus);
        xp[m] = x[m] - h;
        c.diffusion(&xp, &mut minus);
        xp[m] = x[m];
        for ij in 0..d * d {
            out[ij * d + m] = (plus[ij] - minus[ij]) / (2.0 * h);
        }
    }
}

/// How the `-Delta` compensator enters the Milstein correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compensator {
    /// `z_j z_k - Delta * [j == k]`.
    #[default]
    Diagonal,
    /// `z_j z_k - Delta` for every pair.
    AllPairs,
}

/// Rank-3 array `h[i][j][k]`, stored as `data[(i * d + j) * d + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MilsteinTensor {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl MilsteinTensor {
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dim + j) * self.dim + k]
    }
}

/// A diffusion model together with the compensator convention of its
/// Milstein correction.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    coefficients: Arc<dyn Coefficients>,
    pub compensator: Compensator,
}

impl DiffusionModel {
    pub fn new(coefficients: Arc<dyn Coefficients>) -> Self {
        DiffusionModel {
            coefficients,
            compensator: Compensator::Diagonal,
        }
    }

    pub fn with_compensator(mut self, compensator: Compensator) -> Self {
        self.compensator = compensator;
        self
    }

    pub fn coefficients(&self) -> &dyn Coefficients {
        self.coefficients.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.coefficients.dim()
    }

    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("drift argument", self.dim(), x.len())?;
        let mut out = vec![0.0; self.dim()];
        self.coefficients.drift(x, &mut out);
        Ok(out)
    }

    pub fn diffusion(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("diffusion argument", self.dim(), x.len())?;
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        self.coefficients.diffusion(x, &mut out);
        Ok(out)
    }

    pub fn diffusion_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("jacobian argument", self.dim(), x.len())?;
        let d = self.dim();
        let mut out = vec![0.0; d * d * d];
        self.coefficients.diffusion_jacobian(x, &mut out);
        Ok(out)
    }

    /// `h_ijk(x) = 1/2 sum_m beta_mk(x) d beta_ij(x) / d x_m`.
    pub fn milstein_tensor(&self, x: &[f64]) -> Result<MilsteinTensor> {
        let d = self.dim();
        let beta = self.diffusion(x)?;
        let jac = self.diffusion_jacobian(x)?;
        let mut data = vec![0.0; d * d * d];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let mut s = 0.0;
                    for m in 0..d {
                        s += beta[m * d + k] * jac[(i * d + j) * d + m];
                    }
                    data[(i * d + j) * d + k] = 0.5 * s;
                }
            }
        }
        Ok(MilsteinTensor { dim: d, data })
    }

    /// The correction `H_Delta(x, z)` added to each Milstein step.
    pub fn h_correction(&self, x: &[f64], z: &[f64], delta: f64) -> Result<Vec<f64>> {
        if !(delta > 0.0) {
            return Err(Error::Contract(format!("step size must be positive, got {delta}")));
        }
        check_dim("h_correction state", self.dim(), x.len())?;
        check_dim("h_correction increment", self.dim(), z.len())?;
        let mut ws = crate::scheme::Workspace::new(self.dim());
        let mut out = vec![0.0; self.dim()];
        ws.h_correction(self, x, z, delta, &mut out);
        Ok(out)
    }
}

/// Observation density `g(x, y)`.
#[derive(Clone)]
pub enum ObservationModel {
    /// `y ~ N(log x_1, tau2)`.
    LogGaussian { tau2: f64 },
    /// `y ~ N(x_1, tau2)`.
    Gaussian { tau2: f64 },
    /// `y ~ N(mean(x), tau2)`.
    MeanGaussian { tau2: f64 },
    /// `y ~ Laplace(mean(x), scale)`.
    MeanLaplace { scale: f64 },
    /// `log g(x, y) = log_value` for every `(x, y)`.
    Constant { log_value: f64, obs_dim: usize },
    Custom {
        obs_dim: usize,
        log_density: Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for ObservationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservationModel::LogGaussian { tau2 } => write!(f, "LogGaussian {{ tau2: {tau2} }}"),
            ObservationModel::Gaussian { tau2 } => write!(f, "Gaussian {{ tau2: {tau2} }}"),
            ObservationModel::MeanGaussian { tau2 } => write!(f, "MeanGaussian {{ tau2: {tau2} }}"),
            ObservationModel::MeanLaplace { scale } => write!(f, "MeanLaplace {{ scale: {scale} }}"),
            ObservationModel::Constant { log_value, .. } => {
                write!(f, "Constant {{ log_value: {log_value} }}")
            }
            ObservationModel::Custom { obs_dim, .. } => write!(f, "Custom {{ obs_dim: {obs_dim} }}"),
        }
    }
}

fn gaussian_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (2.0 * PI * var).ln() - 0.5 * r * r / var
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

impl ObservationModel {
    pub fn obs_dim(&self) -> usize {
        match self {
            ObservationModel::Constant { obs_dim, .. } | ObservationModel::Custom { obs_dim, .. } => {
                *obs_dim
            }
            _ => 1,
        }
    }

    /// `log g(x, y)`. For [`ObservationModel::LogGaussian`] a non-positive
    /// `x_1` has no logarithm and yields `-inf`, which kills the particle.
    pub fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            ObservationModel::LogGaussian { tau2 } => {
                if x[0] <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    gaussian_logpdf(y[0], x[0].ln(), *tau2)
                }
            }
            ObservationModel::Gaussian { tau2 } => gaussian_logpdf(y[0], x[0], *tau2),
            ObservationModel::MeanGaussian { tau2 } => gaussian_logpdf(y[0], mean(x), *tau2),
            ObservationModel::MeanLaplace { scale } => {
                -(2.0 * scale).ln() - (y[0] - mean(x)).abs() / scale
            }
            ObservationModel::Constant { log_value, .. } => *log_value,
            ObservationModel::Custom { log_density, .. } => log_density(x, y),
        }
    }

    /// Draw `y ~ g(x, .)`. Not available for custom densities.
    pub fn sample(&self, x: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let n: f64 = StandardNormal.sample(rng);
        let y = match self {
            ObservationModel::LogGaussian { tau2 } => {
                if x[0] <= 0.0 {
                    return Err(Error::Contract(
                        "log-Gaussian observation of a non-positive state".into(),
                    ));
                }
                x[0].ln() + tau2.sqrt() * n
            }
            ObservationModel::Gaussian { tau2 } => x[0] + tau2.sqrt() * n,
            ObservationModel::MeanGaussian { tau2 } => mean(x) + tau2.sqrt() * n,
            ObservationModel::MeanLaplace { scale } => {
                // inverse CDF on u in (-1/2, 1/2)
                let u = rand::Rng::gen::<f64>(rng) - 0.5;
                mean(x) - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            ObservationModel::Constant { .. } | ObservationModel::Custom { .. } => {
                return Err(Error::Usage(
                    "observation model does not support sampling".into(),
                ))
            }
        };
        Ok(vec![y])
    }
}

/// Closed-form Gaussian structure of a builtin model, used for exact
/// reference filters. The latent process `T(X)` (identity or log of the
/// first coordinate) moves as `T(X_{k+1}) = T(X_k) + drift + N(0, var)` and
/// `y_k ~ N(T(X_k), obs_var)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianForm {
    pub log_transform: bool,
    pub initial: f64,
    pub drift: f64,
    pub var: f64,
    pub obs_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinModel {
    Gbm,
    ClarkCameron,
    Nlm,
    LinearGaussian,
}

impl BuiltinModel {
    pub fn name(self) -> &'static str {
        match self {
            BuiltinModel::Gbm => "gbm",
            BuiltinModel::ClarkCameron => "clark_cameron",
            BuiltinModel::Nlm => "nlm",
            BuiltinModel::LinearGaussian => "linear_gaussian",
        }
    }
}

impl FromStr for BuiltinModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gbm" => Ok(BuiltinModel::Gbm),
            "clark_cameron" | "clark-cameron" | "cc" => Ok(BuiltinModel::ClarkCameron),
            "nlm" => Ok(BuiltinModel::Nlm),
            "linear_gaussian" | "linear-gaussian" => Ok(BuiltinModel::LinearGaussian),
            other => Err(Error::Usage(format!(
                "unknown model '{other}' (expected gbm, clark_cameron (cc), nlm or linear_gaussian)"
            ))),
        }
    }
}

impl fmt::Display for BuiltinModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Hidden Markov model: diffusion, observation density and initial state.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    pub name: String,
    pub diffusion: DiffusionModel,
    pub observation: ObservationModel,
    pub x0: Vec<f64>,
    pub gaussian_form: Option<GaussianForm>,
}

impl StateSpaceModel {
    pub fn new(
        name: impl Into<String>,
        diffusion: DiffusionModel,
        observation: ObservationModel,
        x0: Vec<f64>,
    ) -> Result<Self> {
        check_dim("initial state", diffusion.dim(), x0.len())?;
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("initial state must be finite".into()));
        }
        Ok(StateSpaceModel {
            name: name.into(),
            diffusion,
            observation,
            x0,
            gaussian_form: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.diffusion.dim()
    }

    pub fn with_observation(mut self, observation: ObservationModel) -> Self {
        self.observation = observation;
        // the closed form no longer describes the observation density
        self.gaussian_form = None;
        self
    }

    pub fn obs_logdensity(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim("obs_logdensity state", self.dim(), x.len())?;
        check_dim("obs_logdensity observation", self.observation.obs_dim(), y.len())?;
        Ok(self.observation.log_density(x, y))
    }
}

// ---------------------------------------------------------------------------
// Builtin coefficients

#[derive(Debug, Clone, Copy)]
pub struct Gbm {
    pub mu: f64,
    pub sigma: f64,
}

impl Coefficients for Gbm {
    fn dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.mu * x[0];
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * x[0];
    }
    fn diffusion_jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }
    fn has_exact_sampler(&self) -> bool {
        true
    }
    fn sample_exact_unit(&self, x: &[f64], rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let n: f64 = StandardNormal.sample(rng);
        let s = self.sigma;
        Some(vec![x[0] * ((self.mu - 0.5 * s * s) + s * n).exp()])
    }
}

/// `dX_1 = dW_1`, `dX_2 = X_1 dW_2`.
#[derive(Debug, Clone, Copy)]
pub struct ClarkCameron;

impl Coefficients for ClarkCameron {
    fn dim(&self) -> usize {
        2
    }
    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[1.0, 0.0, 0.0, x[0]]);
    }
    fn diffusion_jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        // d beta_22 / d x_1
        out[(2 + 1) * 2] = 1.0;
    }
}

/// Two-dimensional mean-reverting model with diffusion `sigma_i / sqrt(1 + x_1^2)`.
/// Both drift components revert towards `mu_i` through `x_1`.
#[derive(Debug, Clone, Copy)]
pub struct Nlm {
    pub theta: [f64; 2],
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
}

impl Coefficients for Nlm {
    fn dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.theta[0] * (self.mu[0] - x[0]);
        out[1] = self.theta[1] * (self.mu[1] - x[0]);
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        let r = 1.0 / (1.0 + x[0] * x[0]).sqrt();
        out.copy_from_slice(&[self.sigma[0] * r, 0.0, 0.0, self.sigma[1] * r]);
    }
    fn diffusion_jacobian(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let dr = -x[0] / (1.0 + x[0] * x[0]).powf(1.5);
        out[0] = self.sigma[0] * dr; // d beta_11 / d x_1
        out[(2 + 1) * 2] = self.sigma[1] * dr; // d beta_22 / d x_1
    }
}

/// State-independent drift `alpha` and diffusion `beta`.
#[derive(Debug, Clone)]
pub struct ConstantCoefficients {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ConstantCoefficients {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let d = alpha.len();
        if d == 0 {
            return Err(Error::Contract("dimension must be positive".into()));
        }
        check_dim("constant diffusion matrix", d * d, beta.len())?;
        Ok(ConstantCoefficients { alpha, beta })
    }
}

impl Coefficients for ConstantCoefficients {
    fn dim(&self) -> usize {
        self.alpha.len()
    }
    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.alpha);
    }
    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.beta);
    }
    fn diffusion_jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn constant(&self) -> Option<(&[f64], &[f64])> {
        Some((&self.alpha, &self.beta))
    }
    fn has_exact_sampler(&self) -> bool {
        true
    }
    fn sample_exact_unit(&self, x: &[f64], rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        Some(
            (0..d)
                .map(|i| x[i] + self.alpha[i] + (0..d).map(|j| self.beta[i * d + j] * z[j]).sum::<f64>())
                .collect(),
        )
    }
}

/// User-supplied coefficients; without an analytic Jacobian the central
/// difference fallback is used.
#[derive(Clone)]
pub struct FnCoefficients {
    pub dim: usize,
    pub drift: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    pub diffusion: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    pub jacobian: Option<Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>>,
}

impl fmt::Debug for FnCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnCoefficients")
            .field("dim", &self.dim)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl Coefficients for FnCoefficients {
    fn dim(&self) -> usize {
        self.dim
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }
    fn diffusion_jacobian(&self, x: &[f64], out: &mut [f64]) {
        match &self.jacobian {
            Some(j) => j(x, out),
            None => finite_difference_jacobian(self, x, out),
        }
    }
}

// ---------------------------------------------------------------------------
// Builtin parameterization

/// A scalar or a per-coordinate vector parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ParamValue {
    fn scalar(&self, key: &str) -> Result<f64> {
        match self {
            ParamValue::Scalar(v) => Ok(*v),
            ParamValue::Vector(v) if v.len() == 1 => Ok(v[0]),
            ParamValue::Vector(_) => Err(Error::Config(format!("model.params.{key} must be a scalar"))),
        }
    }

    fn pair(&self, key: &str) -> Result<[f64; 2]> {
        match self {
            ParamValue::Scalar(v) => Ok([*v, *v]),
            ParamValue::Vector(v) if v.len() == 2 => Ok([v[0], v[1]]),
            ParamValue::Vector(v) => Err(Error::Config(format!(
                "model.params.{key} must have 2 entries, got {}",
                v.len()
            ))),
        }
    }

    fn vector(&self, d: usize, key: &str) -> Result<Vec<f64>> {
        match self {
            ParamValue::Scalar(v) => Ok(vec![*v; d]),
            ParamValue::Vector(v) if v.len() == d => Ok(v.clone()),
            ParamValue::Vector(v) => Err(Error::Config(format!(
                "model.params.{key} must have {d} entries, got {}",
                v.len()
            ))),
        }
    }
}

/// Optional overrides of builtin model parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<ParamValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<ParamValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<ParamValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<ParamValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compensator: Option<Compensator>,
}

fn positive(v: f64, key: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("model.params.{key} must be positive, got {v}")))
    }
}

/// Builtin model with its default parameters.
pub fn builtin_model(kind: BuiltinModel) -> StateSpaceModel {
    builtin_model_with(kind, &ModelParams::default()).expect("default parameters are valid")
}

/// Builtin model with parameter overrides.
pub fn builtin_model_with(kind: BuiltinModel, p: &ModelParams) -> Result<StateSpaceModel> {
    let get = |v: &Option<ParamValue>, key: &str, default: f64| -> Result<f64> {
        v.as_ref().map_or(Ok(default), |v| v.scalar(key))
    };
    let mut ssm = match kind {
        BuiltinModel::Gbm => {
            let mu = get(&p.mu, "mu", 0.02)?;
            let sigma = get(&p.sigma, "sigma", 0.2)?;
            let tau2 = positive(p.tau2.unwrap_or(0.02), "tau2")?;
            let x0 = get(&p.x0, "x0", 1.0)?;
            let x0 = positive(x0, "x0")?;
            let mut m = StateSpaceModel::new(
                kind.name(),
                DiffusionModel::new(Arc::new(Gbm { mu, sigma })),
                ObservationModel::LogGaussian { tau2 },
                vec![x0],
            )?;
            m.gaussian_form = Some(GaussianForm {
                log_transform: true,
                initial: x0.ln(),
                drift: mu - 0.5 * sigma * sigma,
                var: sigma * sigma,
                obs_var: tau2,
            });
            m
        }
        BuiltinModel::ClarkCameron => {
            let tau2 = positive(p.tau2.unwrap_or(0.1), "tau2")?;
            let x0 = p.x0.as_ref().map_or(Ok(vec![0.0, 0.0]), |v| v.vector(2, "x0"))?;
            StateSpaceModel::new(
                kind.name(),
                DiffusionModel::new(Arc::new(ClarkCameron)),
                ObservationModel::MeanGaussian { tau2 },
                x0,
            )?
        }
        BuiltinModel::Nlm => {
            let pair = |v: &Option<ParamValue>, key: &str, d: [f64; 2]| -> Result<[f64; 2]> {
                v.as_ref().map_or(Ok(d), |v| v.pair(key))
            };
            let coeffs = Nlm {
                theta: pair(&p.theta, "theta", [1.0, 1.0])?,
                mu: pair(&p.mu, "mu", [0.0, 0.0])?,
                sigma: pair(&p.sigma, "sigma", [1.0, 1.0])?,
            };
            let scale = positive(p.s.unwrap_or(0.1f64.sqrt()), "s")?;
            let x0 = p.x0.as_ref().map_or(Ok(vec![0.0, 0.0]), |v| v.vector(2, "x0"))?;
            StateSpaceModel::new(
                kind.name(),
                DiffusionModel::new(Arc::new(coeffs)),
                ObservationModel::MeanLaplace { scale },
                x0,
            )?
        }
        BuiltinModel::LinearGaussian => {
            let theta = get(&p.theta, "theta", 0.0)?;
            let sigma = get(&p.sigma, "sigma", 1.0)?;
            let tau2 = positive(p.tau2.unwrap_or(1.0), "tau2")?;
            let x0 = get(&p.x0, "x0", 0.0)?;
            let mut m = StateSpaceModel::new(
                kind.name(),
                DiffusionModel::new(Arc::new(ConstantCoefficients::new(vec![theta], vec![sigma])?)),
                ObservationModel::Gaussian { tau2 },
                vec![x0],
            )?;
            m.gaussian_form = Some(GaussianForm {
                log_transform: false,
                initial: x0,
                drift: theta,
                var: sigma * sigma,
                obs_var: tau2,
            });
            m
        }
    };
    if let Some(c) = p.compensator {
        ssm.diffusion.compensator = c;
    }
    Ok(ssm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gbm() -> DiffusionModel {
        builtin_model(BuiltinModel::Gbm).diffusion
    }

    #[test]
    fn gbm_tensor_at_two() {
        let h = gbm().milstein_tensor(&[2.0]).unwrap();
        assert!((h.get(0, 0, 0) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn constant_diffusion_has_zero_tensor() {
        let m = DiffusionModel::new(Arc::new(
            ConstantCoefficients::new(vec![0.3, -1.0], vec![1.0, 0.5, 0.0, 2.0]).unwrap(),
        ));
        let h = m.milstein_tensor(&[1.0, 4.0]).unwrap();
        assert!(h.data.iter().all(|&v| v == 0.0));
        let hc = m.h_correction(&[1.0, 4.0], &[0.3, -0.7], 0.25).unwrap();
        assert_eq!(hc, vec![0.0, 0.0]);
    }

    #[test]
    fn clark_cameron_tensor_has_single_entry() {
        let m = builtin_model(BuiltinModel::ClarkCameron).diffusion;
        for x in [[0.0, 0.0], [1.3, -2.0], [-4.0, 7.5]] {
            let h = m.milstein_tensor(&x).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        let expect = if (i, j, k) == (1, 1, 0) { 0.5 } else { 0.0 };
                        assert_eq!(h.get(i, j, k), expect, "h[{i}][{j}][{k}] at {x:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn h_correction_examples() {
        let h = gbm().h_correction(&[1.0], &[0.1], 0.25).unwrap();
        assert!((h[0] - (-0.0048)).abs() < 1e-15);

        let cc = builtin_model(BuiltinModel::ClarkCameron).diffusion;
        for delta in [0.01, 0.5, 3.0] {
            let h = cc.h_correction(&[0.7, 0.2], &[1.0, 1.0], delta).unwrap();
            assert_eq!(h, vec![0.0, 0.5]);
        }
        // literal all-pairs reading subtracts delta from the off-diagonal pair too
        let cc_all = cc.clone().with_compensator(Compensator::AllPairs);
        let h = cc_all.h_correction(&[0.7, 0.2], &[1.0, 1.0], 0.25).unwrap();
        assert!((h[1] - 0.5 * 0.75).abs() < 1e-15);
    }

    #[test]
    fn h_correction_rejects_bad_input() {
        assert!(matches!(
            gbm().h_correction(&[1.0], &[0.1], 0.0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            gbm().h_correction(&[1.0, 2.0], &[0.1], 0.1),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(gbm().milstein_tensor(&[]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn builtin_examples() {
        let g = builtin_model(BuiltinModel::Gbm);
        assert!((g.diffusion.drift(&[1.0]).unwrap()[0] - 0.02).abs() < 1e-15);
        assert!((g.diffusion.diffusion(&[1.0]).unwrap()[0] - 0.2).abs() < 1e-15);
        assert_eq!(g.x0, vec![1.0]);

        let cc = builtin_model(BuiltinModel::ClarkCameron);
        assert_eq!(cc.diffusion.drift(&[3.0, -1.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(cc.x0, vec![0.0, 0.0]);

        let nlm = builtin_model(BuiltinModel::Nlm);
        assert_eq!(nlm.diffusion.diffusion(&[0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);

        assert!("heston".parse::<BuiltinModel>().is_err());
    }

    #[test]
    fn observation_log_density_examples() {
        let g = builtin_model(BuiltinModel::Gbm);
        let v = g.obs_logdensity(&[1.0], &[0.0]).unwrap();
        assert!((v - (-0.5 * (2.0 * PI * 0.02).ln())).abs() < 1e-14);
        assert_eq!(g.obs_logdensity(&[0.0], &[0.0]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(g.obs_logdensity(&[-0.3], &[0.0]).unwrap(), f64::NEG_INFINITY);

        let nlm = builtin_model(BuiltinModel::Nlm);
        let s = 0.1f64.sqrt();
        let v = nlm.obs_logdensity(&[0.0, 0.0], &[0.0]).unwrap();
        assert!((v - (1.0 / (2.0 * s)).ln()).abs() < 1e-14);

        let cc = builtin_model(BuiltinModel::ClarkCameron);
        let v = cc.obs_logdensity(&[0.4, 1.0], &[0.7]).unwrap();
        assert!((v - (-0.5 * (2.0 * PI * 0.1).ln())).abs() < 1e-14);
    }

    #[test]
    fn densities_integrate_to_one() {
        let cases: Vec<(StateSpaceModel, Vec<f64>)> = vec![
            (builtin_model(BuiltinModel::Gbm), vec![1.3]),
            (builtin_model(BuiltinModel::ClarkCameron), vec![0.2, -0.6]),
            (builtin_model(BuiltinModel::Nlm), vec![0.5, 0.1]),
            (builtin_model(BuiltinModel::LinearGaussian), vec![-0.4]),
        ];
        for (m, x) in cases {
            // trapezoid rule on [-12, 12] with step 1e-3
            let h = 1e-3;
            let n = 24_000;
            let mut total = 0.0;
            for i in 0..=n {
                let y = -12.0 + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                total += w * m.obs_logdensity(&x, &[y]).unwrap().exp() * h;
            }
            assert!((total - 1.0).abs() < 1e-3, "{}: {total}", m.name);
        }
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [BuiltinModel::Gbm, BuiltinModel::ClarkCameron, BuiltinModel::Nlm, BuiltinModel::LinearGaussian] {
            let m = builtin_model(kind).diffusion;
            let d = m.dim();
            for _ in 0..100 {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let analytic = m.diffusion_jacobian(&x).unwrap();
                let mut fd = vec![0.0; d * d * d];
                finite_difference_jacobian(m.coefficients(), &x, &mut fd);
                for (a, f) in analytic.iter().zip(&fd) {
                    assert!((a - f).abs() <= 1e-5 * a.abs().max(1.0), "{kind}: {a} vs {f}");
                }
                // tensor from finite-difference Jacobian
                let beta = m.diffusion(&x).unwrap();
                let h = m.milstein_tensor(&x).unwrap();
                for i in 0..d {
                    for j in 0..d {
                        for k in 0..d {
                            let want: f64 = 0.5
                                * (0..d).map(|mm| beta[mm * d + k] * fd[(i * d + j) * d + mm]).sum::<f64>();
                            let got = h.get(i, j, k);
                            assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn fn_coefficients_fall_back_to_finite_differences() {
        let user = FnCoefficients {
            dim: 1,
            drift: Arc::new(|x, o| o[0] = -x[0]),
            diffusion: Arc::new(|x, o| o[0] = x[0].sin() + 2.0),
            jacobian: None,
        };
        let m = DiffusionModel::new(Arc::new(user));
        let j = m.diffusion_jacobian(&[0.3]).unwrap();
        assert!((j[0] - 0.3f64.cos()).abs() < 1e-8);
    }

    #[test]
    fn params_override_and_validate() {
        let p = ModelParams {
            mu: Some(ParamValue::Scalar(0.1)),
            x0: Some(ParamValue::Scalar(2.0)),
            ..Default::default()
        };
        let g = builtin_model_with(BuiltinModel::Gbm, &p).unwrap();
        assert_eq!(g.x0, vec![2.0]);
        assert!((g.diffusion.drift(&[1.0]).unwrap()[0] - 0.1).abs() < 1e-15);

        let bad = ModelParams {
            tau2: Some(-1.0),
            ..Default::default()
        };
        assert!(builtin_model_with(BuiltinModel::Gbm, &bad).is_err());
        let bad = ModelParams {
            x0: Some(ParamValue::Vector(vec![1.0, 2.0, 3.0])),
            ..Default::default()
        };
        assert!(builtin_model_with(BuiltinModel::Nlm, &bad).is_err());
    }

    #[test]
    fn laplace_sampling_matches_moments() {
        let m = builtin_model(BuiltinModel::Nlm);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let ys: Vec<f64> = (0..n)
            .map(|_| m.observation.sample(&[1.0, 0.0], &mut rng).unwrap()[0])
            .collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
        // Laplace(0.5, s): variance 2 s^2 = 0.2
        assert!((mean - 0.5).abs() < 4.0 * (0.2f64 / n as f64).sqrt());
        assert!((var - 0.2).abs() < 0.01);
    }

    proptest::proptest! {
        #[test]
        fn h_correction_is_quadratic(x in 0.1f64..3.0, x2 in -2.0f64..2.0, z1 in -2.0f64..2.0,
                                     z2 in -2.0f64..2.0, c in 0.1f64..4.0, delta in 0.01f64..1.0) {
            for kind in [BuiltinModel::Gbm, BuiltinModel::ClarkCameron, BuiltinModel::Nlm] {
                let m = builtin_model(kind).diffusion;
                let (xs, zs) = if m.dim() == 1 { (vec![x], vec![z1]) } else { (vec![x, x2], vec![z1, z2]) };
                let base = m.h_correction(&xs, &zs, delta).unwrap();
                let zc: Vec<f64> = zs.iter().map(|v| c * v).collect();
                let scaled = m.h_correction(&xs, &zc, c * c * delta).unwrap();
                for (b, s) in base.iter().zip(&scaled) {
                    proptest::prop_assert!((c * c * b - s).abs() <= 1e-10 * (1.0 + s.abs()));
                }
            }
        }
    }
}
