//! Command-line front end: configuration, subcommands and artifact output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{
    budget_ladder, fit_rates, ground_truth, mse_cost_sweep, read_records, reference_settings_for, simulate_data, write_records, Dataset,
    Fidelity, Method, ReferenceSizing, SweepSettings,
};
use crate::error::{Error, Result};
use crate::filter::{pf_run_with, ResampleMode, ResamplePolicy, TestFunction};
use crate::model::{builtin_model_with, BuiltinModel, ModelParams, StateSpaceModel};
use crate::multilevel::{allocate_levels, allocate_levels_euler, amlpf_run, mlpf_baseline_run, MLConfig};
use crate::scheme::{Discretization, Level};
use crate::streams::{RunSeed, StreamKey};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const TAG_DATA: u64 = 0x6461_7461;

#[derive(Debug, Parser)]
#[command(name = "amlpf", version, about = "Antithetic multilevel particle filters for partially observed diffusions")]
pub struct Cli {
    /// Worker threads (falls back to AMLPF_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset and write it as CSV.
    Simulate(CommonArgs),
    /// Run a filter on a dataset (given or simulated).
    Filter(CommonArgs),
    /// Run an MSE versus cost sweep and fit rates.
    Bench(CommonArgs),
    /// Fit rates from an existing sweep CSV.
    Rates(RatesArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// gbm, clark_cameron (cc), nlm or linear_gaussian.
    #[arg(long)]
    pub model: Option<String>,
    /// pf, mlpf or amlpf.
    #[arg(long)]
    pub method: Option<String>,
    /// Comma separated methods for `bench`.
    #[arg(long)]
    pub methods: Option<String>,
    /// `L_min,L_max`, or a single level for `pf`.
    #[arg(long)]
    pub levels: Option<String>,
    /// Target accuracy used to allocate particles.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Comma separated particle counts, one per level.
    #[arg(long)]
    pub particles: Option<String>,
    /// Master seed for data and filters.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of observations to simulate.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Dataset CSV to filter instead of simulating one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Independent replicates per budget point.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// `every_step` or `adaptive`.
    #[arg(long)]
    pub resample: Option<String>,
    /// Adaptive resampling fires when ESS < threshold * N.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RatesArgs {
    /// Sweep CSV written by `bench`.
    #[arg(long)]
    pub input: PathBuf,
    /// Also write rates.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ModelBlock {
    Name(String),
    Full {
        name: String,
        #[serde(default)]
        params: ModelParams,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodFields {
    name: Option<String>,
    levels: Option<Vec<u32>>,
    epsilon: Option<f64>,
    particles: Option<Vec<usize>>,
    allocation: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MethodBlock {
    Name(String),
    Full(MethodFields),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyBlock {
    mode: Option<ResampleMode>,
    threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataBlock {
    horizon: Option<usize>,
    path: Option<PathBuf>,
    fidelity: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputBlock {
    dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchBlock {
    methods: Option<Vec<String>>,
    repeats: Option<usize>,
    l_min: Option<u32>,
    l_max_ladder: Option<Vec<u32>>,
    scale: Option<f64>,
    amlpf_constants: Option<(f64, f64)>,
    mlpf_constants: Option<(f64, f64)>,
    pf_constant: Option<f64>,
    common_random_numbers: Option<bool>,
    reference_level_offset: Option<u32>,
    reference_particle_factor: Option<usize>,
    reference_repeats: Option<usize>,
}

/// Configuration file as written by users. Method settings may also be
/// given flat at the top level.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<ModelBlock>,
    method: Option<MethodBlock>,
    levels: Option<Vec<u32>>,
    epsilon: Option<f64>,
    particles: Option<Vec<usize>>,
    allocation: Option<(f64, f64)>,
    seed: Option<u64>,
    policy: Option<PolicyBlock>,
    horizon: Option<usize>,
    data: Option<DataBlock>,
    output: Option<OutputBlock>,
    bench: Option<BenchBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub name: BuiltinModel,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSpec {
    pub name: Method,
    pub l_min: u32,
    pub l_max: u32,
    pub epsilon: f64,
    pub particles: Vec<usize>,
    pub allocation: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSpec {
    pub horizon: usize,
    pub path: Option<PathBuf>,
    pub fidelity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSpec {
    pub methods: Vec<Method>,
    pub repeats: usize,
    pub l_min: u32,
    pub l_max_ladder: Vec<u32>,
    pub scale: f64,
    pub amlpf_constants: (f64, f64),
    pub mlpf_constants: (f64, f64),
    pub pf_constant: f64,
    pub common_random_numbers: bool,
    pub reference_level_offset: u32,
    pub reference_particle_factor: usize,
    pub reference_repeats: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        let s = SweepSettings::default();
        let r = ReferenceSizing::default();
        BenchSpec {
            methods: vec![Method::Pf, Method::Mlpf, Method::Amlpf],
            repeats: s.repeats,
            l_min: s.l_min,
            l_max_ladder: vec![3, 4, 5, 6],
            scale: 1.0,
            amlpf_constants: s.amlpf_constants,
            mlpf_constants: s.mlpf_constants,
            pf_constant: s.pf_constant,
            common_random_numbers: s.common_random_numbers,
            reference_level_offset: r.level_offset,
            reference_particle_factor: r.particle_factor,
            reference_repeats: r.repeats,
        }
    }
}

/// Fully resolved configuration, echoed into every output manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub method: MethodSpec,
    pub policy: ResamplePolicy,
    pub data: DataSpec,
    /// Not part of the manifest, so outputs do not depend on where they go.
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub bench: BenchSpec,
    pub seed: u64,
}

const DEFAULT_EPSILON: f64 = 0.1;

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| Error::Usage(format!("--{what}: cannot parse {v:?}"))))
        .collect()
}

/// Reads the optional config file, applies flag overrides and resolves
/// every default.
pub fn parse_config(args: &CommonArgs) -> Result<RunConfig> {
    let raw: RawConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => RawConfig::default(),
    };
    resolve(raw, args)
}

/// Parses a JSON config string without flags.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    resolve(raw, &CommonArgs::default())
}

fn resolve(raw: RawConfig, args: &CommonArgs) -> Result<RunConfig> {
    let (model_name, params) = match raw.model {
        Some(ModelBlock::Name(n)) => (Some(n), ModelParams::default()),
        Some(ModelBlock::Full { name, params }) => (Some(name), params),
        None => (None, ModelParams::default()),
    };
    let model_name = args
        .model
        .clone()
        .or(model_name)
        .ok_or_else(|| Error::Config("model is required (config key `model` or --model)".into()))?;
    let model = ModelSpec {
        name: model_name.parse()?,
        params,
    };

    let mut m = match raw.method {
        Some(MethodBlock::Name(n)) => MethodFields {
            name: Some(n),
            ..Default::default()
        },
        Some(MethodBlock::Full(f)) => f,
        None => MethodFields::default(),
    };
    // flat keys, then flags
    m.levels = raw.levels.or(m.levels);
    m.epsilon = raw.epsilon.or(m.epsilon);
    m.particles = raw.particles.or(m.particles);
    m.allocation = raw.allocation.or(m.allocation);
    if let Some(n) = &args.method {
        m.name = Some(n.clone());
    }
    if let Some(l) = &args.levels {
        m.levels = Some(parse_list(l, "levels")?);
    }
    if let Some(e) = args.epsilon {
        m.epsilon = Some(e);
    }
    if let Some(p) = &args.particles {
        m.particles = Some(parse_list(p, "particles")?);
    }
    let method_name: Method = m.name.as_deref().unwrap_or("amlpf").parse()?;
    let epsilon = m.epsilon.unwrap_or(DEFAULT_EPSILON);
    let allocation = m.allocation.unwrap_or((1.0, 1.0));
    let levels = m.levels.unwrap_or_else(|| vec![3, 5]);
    let (l_min, l_max) = match (method_name, levels.as_slice()) {
        (Method::Pf, [l]) => (*l, *l),
        (Method::Pf, [_, l]) => (*l, *l),
        (_, [a, b]) => (*a, *b),
        _ => return Err(Error::Config(format!("levels must be [L_min, L_max], got {levels:?}"))),
    };
    if method_name != Method::Pf && l_min >= l_max {
        return Err(Error::Config("levels: L_min < L_max required".into()));
    }
    Level::new(l_max)?;
    let particles = match (m.particles, method_name) {
        (Some(p), Method::Pf) if p.len() == 1 => p,
        (Some(p), Method::Pf) => return Err(Error::Config(format!("particles: pf takes one count, got {}", p.len()))),
        (Some(p), _) => {
            MLConfig::new(l_min, l_max, p.clone()).map_err(|e| Error::Config(format!("particles: {e}")))?;
            p
        }
        (None, Method::Pf) => {
            if !(epsilon > 0.0 && epsilon < 1.0) {
                return Err(Error::Config(format!("epsilon must lie in (0, 1), got {epsilon}")));
            }
            vec![(allocation.0 * epsilon.powi(-2)).ceil() as usize]
        }
        (None, Method::Amlpf) => allocate_levels(epsilon, l_min, l_max, allocation).map_err(|e| Error::Config(e.to_string()))?,
        (None, Method::Mlpf) => allocate_levels_euler(epsilon, l_min, l_max, allocation).map_err(|e| Error::Config(e.to_string()))?,
    };
    if particles.contains(&0) {
        return Err(Error::Config("particles must all be >= 1".into()));
    }
    let method = MethodSpec {
        name: method_name,
        l_min,
        l_max,
        epsilon,
        particles,
        allocation,
    };

    let pb = raw.policy.unwrap_or_default();
    let mut policy = ResamplePolicy::default();
    if let Some(mode) = pb.mode {
        policy.mode = mode;
    }
    if let Some(t) = pb.threshold {
        policy.threshold_fraction = t;
    }
    if let Some(mode) = &args.resample {
        policy.mode = serde_json::from_value(serde_json::Value::String(mode.clone()))
            .map_err(|_| Error::Usage(format!("--resample must be every_step or adaptive, got {mode:?}")))?;
    }
    if let Some(t) = args.threshold {
        policy.threshold_fraction = t;
    }
    if policy.mode == ResampleMode::EveryStep && pb.threshold.is_none() && args.threshold.is_none() {
        policy.threshold_fraction = 1.0;
    }
    policy.validate()?;

    let db = raw.data.unwrap_or_default();
    let bb = raw.bench.unwrap_or_default();
    let mut bench = BenchSpec::default();
    if let Some(ms) = args.methods.as_deref().map(|s| parse_list::<String>(s, "methods")).transpose()?.or(bb.methods) {
        bench.methods = ms.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?;
    }
    bench.repeats = args.repeats.or(bb.repeats).unwrap_or(bench.repeats);
    bench.l_min = bb.l_min.unwrap_or(bench.l_min);
    bench.l_max_ladder = bb.l_max_ladder.unwrap_or(bench.l_max_ladder);
    bench.scale = bb.scale.unwrap_or(bench.scale);
    bench.amlpf_constants = bb.amlpf_constants.unwrap_or(bench.amlpf_constants);
    bench.mlpf_constants = bb.mlpf_constants.unwrap_or(bench.mlpf_constants);
    bench.pf_constant = bb.pf_constant.unwrap_or(bench.pf_constant);
    bench.common_random_numbers = bb.common_random_numbers.unwrap_or(bench.common_random_numbers);
    bench.reference_level_offset = bb.reference_level_offset.unwrap_or(bench.reference_level_offset);
    bench.reference_particle_factor = bb.reference_particle_factor.unwrap_or(bench.reference_particle_factor);
    bench.reference_repeats = bb.reference_repeats.unwrap_or(bench.reference_repeats);
    if bench.repeats < 2 {
        return Err(Error::Config("bench.repeats must be at least 2".into()));
    }
    if bench.l_max_ladder.iter().any(|&l| l <= bench.l_min) {
        return Err(Error::Config("bench: L_min < L_max required for every ladder entry".into()));
    }

    let top_l = l_max.max(bench.l_max_ladder.iter().copied().max().unwrap_or(0));
    let data = DataSpec {
        horizon: args.horizon.or(raw.horizon).or(db.horizon).unwrap_or(10),
        path: args.data.clone().or(db.path),
        fidelity: db.fidelity.unwrap_or((top_l + 3).max(10)),
    };
    if data.horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if let Some(p) = &data.path {
        if !p.exists() {
            return Err(Error::Config(format!("data.path {} does not exist", p.display())));
        }
    }
    Ok(RunConfig {
        model,
        method,
        policy,
        data,
        output_dir: args.out.clone().or(raw.output.and_then(|o| o.dir)).unwrap_or_else(|| PathBuf::from(".")),
        bench,
        seed: args.seed.or(raw.seed).unwrap_or(1),
    })
}

impl RunConfig {
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn state_space_model(&self) -> Result<StateSpaceModel> {
        builtin_model_with(self.model.name, &self.model.params)
    }

    fn manifest(&self, command: &str) -> serde_json::Value {
        serde_json::json!({
            "tool": "amlpf",
            "version": VERSION,
            "command": command,
            "seed": self.seed,
            "config_sha256": self.sha256(),
            "config": self,
        })
    }

    fn csv_header(&self, command: &str) -> String {
        format!("# {}\n", serde_json::to_string(&self.manifest(command)).expect("manifest serializes"))
    }
}

/// Reads the configured dataset or simulates one from the run seed.
pub fn load_or_simulate(cfg: &RunConfig, ssm: &StateSpaceModel) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => {
            let d = Dataset::read_csv(fs::File::open(p)?)?;
            if d.obs[0].len() != ssm.observation.obs_dim() {
                return Err(Error::Config(format!(
                    "dataset has {} observation columns, model expects {}",
                    d.obs[0].len(),
                    ssm.observation.obs_dim()
                )));
            }
            Ok(d)
        }
        None => {
            let mut rng = StreamKey::new(cfg.seed).child(TAG_DATA).rng();
            simulate_data(ssm, cfg.data.horizon, Fidelity::Auto(Level::new(cfg.data.fidelity)?), &mut rng)
        }
    }
}

fn write_file(dir: &Path, name: &str, header: &str, body: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut f = fs::File::create(&path)?;
    f.write_all(header.as_bytes())?;
    f.write_all(body)?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    write_file(dir, name, "", &body)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ssm = cfg.state_space_model()?;
    let data = load_or_simulate(cfg, &ssm)?;
    let mut buf = Vec::new();
    data.write_csv(&mut buf)?;
    Ok(vec![write_file(&cfg.output_dir, "dataset.csv", &cfg.csv_header("simulate"), &buf)?])
}

pub fn cmd_filter(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ssm = cfg.state_space_model()?;
    let data = load_or_simulate(cfg, &ssm)?;
    let tfs: Vec<TestFunction> = (0..ssm.dim()).map(TestFunction::coordinate).collect();
    let m = &cfg.method;
    let seed = RunSeed::new(cfg.seed, 0);
    let (csv, output) = match m.name {
        Method::Pf => {
            let level = Level::new(m.l_max)?;
            let out = pf_run_with(Discretization::Milstein, &ssm, &data.obs, level, m.particles[0], cfg.policy, &tfs, seed.level(m.l_max))?;
            let mut buf = Vec::new();
            out.write_csv(&mut buf)?;
            (buf, serde_json::to_value(&out)?)
        }
        Method::Amlpf | Method::Mlpf => {
            let ml = MLConfig {
                l_min: m.l_min,
                l_max: m.l_max,
                particle_counts: m.particles.clone(),
                allocation_constants: m.allocation,
            };
            let out = if m.name == Method::Amlpf {
                amlpf_run(&ssm, &data.obs, &ml, cfg.policy, &tfs, seed)?
            } else {
                mlpf_baseline_run(&ssm, &data.obs, &ml, cfg.policy, &tfs, seed)?
            };
            let mut buf = Vec::new();
            out.write_csv(&mut buf)?;
            (buf, serde_json::to_value(&out)?)
        }
    };
    let header = cfg.csv_header("filter");
    let json = serde_json::json!({ "manifest": cfg.manifest("filter"), "output": output });
    Ok(vec![
        write_file(&cfg.output_dir, "filter.csv", &header, &csv)?,
        write_json(&cfg.output_dir, "filter.json", &json)?,
    ])
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ssm = cfg.state_space_model()?;
    let data = load_or_simulate(cfg, &ssm)?;
    let tfs = vec![TestFunction::coordinate(0)];
    let b = &cfg.bench;
    let settings = SweepSettings {
        l_min: b.l_min,
        amlpf_constants: b.amlpf_constants,
        mlpf_constants: b.mlpf_constants,
        pf_constant: b.pf_constant,
        repeats: b.repeats,
        master_seed: cfg.seed,
        policy: cfg.policy,
        common_random_numbers: b.common_random_numbers,
    };
    let budgets = budget_ladder(&b.l_max_ladder, b.scale);
    let sizing = ReferenceSizing {
        level_offset: b.reference_level_offset,
        particle_factor: b.reference_particle_factor,
        repeats: b.reference_repeats,
    };
    let reference_settings = reference_settings_for(&b.methods, &budgets, &settings, sizing)?;
    let reference = ground_truth(&ssm, &data.obs, &tfs, &reference_settings, cfg.policy)?;
    let records = mse_cost_sweep(&ssm, &data.obs, &tfs, &reference, &b.methods, &budgets, &settings)?;
    let rates = fit_rates(&records)?;
    let mut buf = Vec::new();
    write_records(&records, &mut buf)?;
    let json = serde_json::json!({
        "manifest": cfg.manifest("bench"),
        "reference": { "provenance": reference.provenance, "standard_error": reference.standard_error },
        "rates": rates,
    });
    Ok(vec![
        write_file(&cfg.output_dir, "bench.csv", &cfg.csv_header("bench"), &buf)?,
        write_json(&cfg.output_dir, "rates.json", &json)?,
    ])
}

pub fn cmd_rates(args: &RatesArgs) -> Result<(serde_json::Value, Option<PathBuf>)> {
    let records = read_records(fs::File::open(&args.input)?)?;
    let rates = fit_rates(&records)?;
    let input_hash = hex::encode(Sha256::digest(fs::read(&args.input)?));
    let json = serde_json::json!({
        "manifest": { "tool": "amlpf", "version": VERSION, "command": "rates", "input_sha256": input_hash },
        "rates": rates,
    });
    let path = match &args.out {
        Some(dir) => Some(write_json(dir, "rates.json", &json)?),
        None => None,
    };
    Ok((json, path))
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("AMLPF_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Usage(format!("AMLPF_THREADS must be a positive integer, got {v:?}"))),
        _ => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        // a second initialization (e.g. in tests) keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let paths = match &cli.command {
        Command::Simulate(a) => cmd_simulate(&parse_config(a)?)?,
        Command::Filter(a) => cmd_filter(&parse_config(a)?)?,
        Command::Bench(a) => cmd_bench(&parse_config(a)?)?,
        Command::Rates(a) => {
            let (json, path) = cmd_rates(a)?;
            println!("{}", serde_json::to_string_pretty(&json)?);
            path.into_iter().collect()
        }
    };
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 for
/// runtime failures, 2 for usage and configuration errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            eprintln!("{}", Cli::command_usage());
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

impl Cli {
    fn command_usage() -> String {
        use clap::CommandFactory;
        Cli::command().render_usage().to_string()
    }
}
