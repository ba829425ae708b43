//! Unit-time discretization kernels.
//!
//! All kernels advance a state over `[0, 1]` on the dyadic grid of a
//! [`Level`]. The Gaussian increments of one call are drawn up front into a
//! [`GaussianDriver`] and replayed, so coupled paths share the exact same
//! Brownian driver.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{Compensator, DiffusionModel};

/// Discretization level `l` with step `2^-l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Level(u32);

impl Level {
    pub const MAX: u32 = 62;

    pub fn new(l: u32) -> Result<Self> {
        if l > Self::MAX {
            return Err(Error::Contract(format!("level {l} exceeds {}", Self::MAX)));
        }
        Ok(Level(l))
    }

    pub fn index(self) -> u32 {
        self.0
    }

    /// `Delta_l = 2^-l`; exact in binary floating point.
    pub fn delta(self) -> f64 {
        f64::powi(2.0, -(self.0 as i32))
    }

    pub fn steps(self) -> usize {
        1usize << self.0
    }

    pub fn coarser(self) -> Option<Level> {
        self.0.checked_sub(1).map(Level)
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which one-step map the kernels apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    Milstein,
    Euler,
}

/// Fine, coarse and antithetic states advanced by one antithetic call.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTriple {
    pub fine: Vec<f64>,
    pub coarse: Vec<f64>,
    pub anti: Vec<f64>,
}

impl CoupledTriple {
    pub fn equal(x0: &[f64]) -> Self {
        CoupledTriple {
            fine: x0.to_vec(),
            coarse: x0.to_vec(),
            anti: x0.to_vec(),
        }
    }
}

/// `2^l` i.i.d. `N_d(0, Delta_l I)` increments, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDriver {
    dim: usize,
    level: Level,
    increments: Vec<f64>,
}

impl GaussianDriver {
    pub fn draw(level: Level, dim: usize, rng: &mut dyn RngCore) -> Self {
        let mut increments = vec![0.0; level.steps() * dim];
        fill_increments(level, &mut increments, rng);
        GaussianDriver {
            dim,
            level,
            increments,
        }
    }

    pub fn from_increments(level: Level, dim: usize, increments: Vec<f64>) -> Result<Self> {
        check_dim("gaussian driver", level.steps() * dim, increments.len())?;
        Ok(GaussianDriver {
            dim,
            level,
            increments,
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn len(&self) -> usize {
        self.level.steps()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Increment `Z_{k+1}` (zero based `k`).
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.increments
    }
}

fn fill_increments(level: Level, buf: &mut [f64], rng: &mut dyn RngCore) {
    let sd = level.delta().sqrt();
    for v in buf.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = sd * n;
    }
}

/// One-based antithetic index `rho_k = k + 2 [k even]`: increments are used
/// in pairwise swapped order `Z_2, Z_1, Z_4, Z_3, ...`.
pub fn antithetic_index(k: usize) -> usize {
    if k % 2 == 0 {
        k + 2
    } else {
        k
    }
}

/// Scratch buffers for the step maps; one per worker.
#[derive(Debug, Clone)]
pub struct Workspace {
    d: usize,
    drift: Vec<f64>,
    beta: Vec<f64>,
    jac: Vec<f64>,
    quad: Vec<f64>,
    mixed: Vec<f64>,
    corr: Vec<f64>,
    zsum: Vec<f64>,
    driver: Vec<f64>,
}

impl Workspace {
    pub fn new(d: usize) -> Self {
        Workspace {
            d,
            drift: vec![0.0; d],
            beta: vec![0.0; d * d],
            jac: vec![0.0; d * d * d],
            quad: vec![0.0; d * d],
            mixed: vec![0.0; d * d],
            corr: vec![0.0; d],
            zsum: vec![0.0; d],
            driver: Vec::new(),
        }
    }

    /// `H_i = sum_{j,k} h_ijk (z_j z_k - c_jk)`. Requires `self.beta` to hold
    /// `beta(x)`; fills `self.jac`.
    fn correction_with_beta(&mut self, model: &DiffusionModel, x: &[f64], z: &[f64], delta: f64, out: &mut [f64]) {
        let d = self.d;
        model.coefficients().diffusion_jacobian(x, &mut self.jac);
        for j in 0..d {
            for k in 0..d {
                let comp = match model.compensator {
                    Compensator::Diagonal if j != k => 0.0,
                    _ => delta,
                };
                self.quad[j * d + k] = z[j] * z[k] - comp;
            }
        }
        // mixed[m][j] = sum_k beta_mk * quad_jk
        for m in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += self.beta[m * d + k] * self.quad[j * d + k];
                }
                self.mixed[m * d + j] = s;
            }
        }
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..d {
                for m in 0..d {
                    s += self.jac[(i * d + j) * d + m] * self.mixed[m * d + j];
                }
            }
            *o = 0.5 * s;
        }
    }

    pub(crate) fn h_correction(&mut self, model: &DiffusionModel, x: &[f64], z: &[f64], delta: f64, out: &mut [f64]) {
        model.coefficients().diffusion(x, &mut self.beta);
        self.correction_with_beta(model, x, z, delta, out);
    }

    /// In-place step `x <- x + alpha(x) delta + beta(x) z [+ H_delta(x, z)]`.
    fn step(&mut self, scheme: Discretization, model: &DiffusionModel, x: &mut [f64], z: &[f64], delta: f64) {
        let d = self.d;
        let c = model.coefficients();
        c.drift(x, &mut self.drift);
        c.diffusion(x, &mut self.beta);
        let mut corr = std::mem::take(&mut self.corr);
        match scheme {
            Discretization::Milstein => self.correction_with_beta(model, x, z, delta, &mut corr),
            Discretization::Euler => corr.fill(0.0),
        }
        for i in 0..d {
            let mut noise = 0.0;
            for j in 0..d {
                noise += self.beta[i * d + j] * z[j];
            }
            x[i] += self.drift[i] * delta + noise + corr[i];
        }
        self.corr = corr;
    }

    fn check(x: &[f64], step: usize) -> Result<()> {
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { step })
        }
    }

    /// Sum of all increments in a fixed order: pair sums first, then a
    /// running total over pairs. Fine, antithetic and coarse paths of a
    /// constant-coefficient model all reduce to `x + alpha + beta * S` with
    /// this same `S`, so the three agree bitwise.
    fn pairwise_sum(&mut self, driver: &[f64]) {
        let d = self.d;
        let steps = driver.len() / d;
        self.zsum.fill(0.0);
        if steps == 1 {
            self.zsum.copy_from_slice(driver);
            return;
        }
        for p in 0..steps / 2 {
            for i in 0..d {
                self.zsum[i] += driver[2 * p * d + i] + driver[(2 * p + 1) * d + i];
            }
        }
    }

    fn constant_map(&mut self, alpha: &[f64], beta: &[f64], x: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            let mut noise = 0.0;
            for j in 0..d {
                noise += beta[i * d + j] * self.zsum[j];
            }
            x[i] += alpha[i] + noise;
        }
    }

    /// Advance `x` over unit time, driving the path with `driver`.
    pub fn unit(&mut self, scheme: Discretization, model: &DiffusionModel, level: Level, x: &mut [f64], driver: &[f64]) -> Result<()> {
        let d = self.d;
        if let Some((alpha, beta)) = model.coefficients().constant() {
            self.pairwise_sum(driver);
            self.constant_map(alpha, beta, x);
            return Self::check(x, level.steps());
        }
        let delta = level.delta();
        for k in 0..level.steps() {
            self.step(scheme, model, x, &driver[k * d..(k + 1) * d], delta);
            Self::check(x, k + 1)?;
        }
        Ok(())
    }

    /// Advance a coupled system over unit time. `anti` is `None` for the
    /// synchronous (Euler pair) coupling.
    pub fn coupled_unit(
        &mut self,
        scheme: Discretization,
        model: &DiffusionModel,
        level: Level,
        fine: &mut [f64],
        coarse: &mut [f64],
        anti: Option<&mut [f64]>,
        driver: &[f64],
    ) -> Result<()> {
        let d = self.d;
        let coarse_level = level
            .coarser()
            .ok_or_else(|| Error::Contract("coupled kernels need level >= 1".into()))?;
        if let Some((alpha, beta)) = model.coefficients().constant() {
            self.pairwise_sum(driver);
            self.constant_map(alpha, beta, fine);
            self.constant_map(alpha, beta, coarse);
            Self::check(fine, level.steps())?;
            Self::check(coarse, coarse_level.steps())?;
            if let Some(anti) = anti {
                self.constant_map(alpha, beta, anti);
                Self::check(anti, level.steps())?;
            }
            return Ok(());
        }
        let delta = level.delta();
        for k in 0..level.steps() {
            self.step(scheme, model, fine, &driver[k * d..(k + 1) * d], delta);
            Self::check(fine, k + 1)?;
        }
        if let Some(anti) = anti {
            for k in 0..level.steps() {
                let r = antithetic_index(k) - 1;
                self.step(scheme, model, anti, &driver[r * d..(r + 1) * d], delta);
                Self::check(anti, k + 1)?;
            }
        }
        let coarse_delta = coarse_level.delta();
        let mut zc = std::mem::take(&mut self.zsum);
        for k in 0..coarse_level.steps() {
            for i in 0..d {
                zc[i] = driver[2 * k * d + i] + driver[(2 * k + 1) * d + i];
            }
            self.step(scheme, model, coarse, &zc, coarse_delta);
            Self::check(coarse, k + 1)?;
        }
        self.zsum = zc;
        Ok(())
    }

    /// Draw a fresh driver for `level` into the internal buffer and advance a
    /// single path.
    pub fn unit_with_rng(
        &mut self,
        scheme: Discretization,
        model: &DiffusionModel,
        level: Level,
        x: &mut [f64],
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        let mut driver = std::mem::take(&mut self.driver);
        driver.resize(level.steps() * self.d, 0.0);
        fill_increments(level, &mut driver, rng);
        let r = self.unit(scheme, model, level, x, &driver);
        self.driver = driver;
        r
    }

    /// Draw a fresh driver and advance a coupled system.
    #[allow(clippy::too_many_arguments)]
    pub fn coupled_unit_with_rng(
        &mut self,
        scheme: Discretization,
        model: &DiffusionModel,
        level: Level,
        fine: &mut [f64],
        coarse: &mut [f64],
        anti: Option<&mut [f64]>,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        let mut driver = std::mem::take(&mut self.driver);
        driver.resize(level.steps() * self.d, 0.0);
        fill_increments(level, &mut driver, rng);
        let r = self.coupled_unit(scheme, model, level, fine, coarse, anti, &driver);
        self.driver = driver;
        r
    }
}

fn checked_start(model: &DiffusionModel, x0: &[f64]) -> Result<Vec<f64>> {
    check_dim("initial state", model.dim(), x0.len())?;
    Ok(x0.to_vec())
}

/// Truncated Milstein path over `[0, 1]` at `level`; returns `X_1`.
pub fn milstein_unit(model: &DiffusionModel, level: Level, x0: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    let driver = GaussianDriver::draw(level, model.dim(), rng);
    milstein_unit_driven(model, x0, &driver)
}

pub fn milstein_unit_driven(model: &DiffusionModel, x0: &[f64], driver: &GaussianDriver) -> Result<Vec<f64>> {
    let mut x = checked_start(model, x0)?;
    check_dim("driver dimension", model.dim(), driver.dim)?;
    Workspace::new(model.dim()).unit(Discretization::Milstein, model, driver.level, &mut x, &driver.increments)?;
    Ok(x)
}

/// Euler-Maruyama path over `[0, 1]`.
pub fn euler_unit(model: &DiffusionModel, level: Level, x0: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    let driver = GaussianDriver::draw(level, model.dim(), rng);
    euler_unit_driven(model, x0, &driver)
}

pub fn euler_unit_driven(model: &DiffusionModel, x0: &[f64], driver: &GaussianDriver) -> Result<Vec<f64>> {
    let mut x = checked_start(model, x0)?;
    check_dim("driver dimension", model.dim(), driver.dim)?;
    Workspace::new(model.dim()).unit(Discretization::Euler, model, driver.level, &mut x, &driver.increments)?;
    Ok(x)
}

/// Antithetic truncated Milstein triple over `[0, 1]`. The fine path uses
/// `Z_1, Z_2, ...`, the antithetic path the pairwise swapped sequence and the
/// coarse path `2^(l-1)` steps driven by `Z_{2k+1} + Z_{2k+2}`.
pub fn antithetic_triple_unit(
    model: &DiffusionModel,
    level: Level,
    start: &CoupledTriple,
    rng: &mut dyn RngCore,
) -> Result<CoupledTriple> {
    if level.index() == 0 {
        return Err(Error::Contract("antithetic triple needs level >= 1".into()));
    }
    let driver = GaussianDriver::draw(level, model.dim(), rng);
    antithetic_triple_driven(model, start, &driver)
}

pub fn antithetic_triple_driven(model: &DiffusionModel, start: &CoupledTriple, driver: &GaussianDriver) -> Result<CoupledTriple> {
    let mut fine = checked_start(model, &start.fine)?;
    let mut coarse = checked_start(model, &start.coarse)?;
    let mut anti = checked_start(model, &start.anti)?;
    check_dim("driver dimension", model.dim(), driver.dim)?;
    Workspace::new(model.dim()).coupled_unit(
        Discretization::Milstein,
        model,
        driver.level,
        &mut fine,
        &mut coarse,
        Some(&mut anti),
        &driver.increments,
    )?;
    Ok(CoupledTriple { fine, coarse, anti })
}

/// Synchronously coupled Euler pair `(fine, coarse)` over `[0, 1]`.
pub fn euler_pair_unit(
    model: &DiffusionModel,
    level: Level,
    start: (&[f64], &[f64]),
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if level.index() == 0 {
        return Err(Error::Contract("coupled pair needs level >= 1".into()));
    }
    let driver = GaussianDriver::draw(level, model.dim(), rng);
    euler_pair_driven(model, start, &driver)
}

pub fn euler_pair_driven(model: &DiffusionModel, start: (&[f64], &[f64]), driver: &GaussianDriver) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut fine = checked_start(model, start.0)?;
    let mut coarse = checked_start(model, start.1)?;
    check_dim("driver dimension", model.dim(), driver.dim)?;
    Workspace::new(model.dim()).coupled_unit(
        Discretization::Euler,
        model,
        driver.level,
        &mut fine,
        &mut coarse,
        None,
        &driver.increments,
    )?;
    Ok((fine, coarse))
}
