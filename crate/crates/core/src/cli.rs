//! Command-line front end: one subcommand per experiment, each writing a
//! CSV (with a one-line `# {json}` metadata header) and a JSON sidecar.
//!
//! Exit codes: 0 success, 1 experiment failure or I/O error, 2 usage error.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{error::ErrorKind, Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::adam::{kappa_simulation, AdamHyper, KappaSimConfig, Schedule};
use crate::blocks::{BlockKind, InitMode, LnMode};
use crate::error::LabError;
use crate::gradcheck::{run_suite, SuiteConfig};
use crate::theory::{
    collapse_simulation, gradnorm_profile, output_difference_experiment, repdelta_profile, theory_curves,
    CollapseSimConfig, ProfileResult, Regime,
};
use crate::train::{train, CopyTaskConfig};
use crate::wiring::{ln_mode_str, NetworkConfig, Variant};

pub const VERSION: &str = concat!("residual-lab ", env!("CARGO_PKG_VERSION"));
pub const THREADS_ENV: &str = "RESIDUAL_LAB_THREADS";

#[derive(Parser)]
#[command(name = "residual-lab", version, arg_required_else_help = true)]
#[command(about = "Residual-wiring experiments: gradient profiles, collapse surrogates, Adam conditioning, warm-up study")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON file whose keys match the flags; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Seeds, comma separated; one output file per seed.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-block gradient norms at initialization.
    Gradnorm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: ProfileFlags,
    },
    /// Per-block mean |x_ln[k+1] − x_ln[k]| at initialization.
    Repdelta {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: ProfileFlags,
    },
    /// Gaussian surrogate: variance of consecutive normalized differences.
    OmegaSim {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: OmegaFlags,
    },
    /// Gaussian surrogate: E|y_N − y_{N−1}| against depth.
    OutputDiff {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: OutputDiffFlags,
    },
    /// Condition number of the Adam update over steps and gradient scales.
    AdamKappa {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: KappaFlags,
    },
    /// Finite-difference check of every reverse pass.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: GradcheckFlags,
    },
    /// Copy-task training run.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Closed-form gradient-norm curves.
    Curves {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: CurvesFlags,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(String),
}

impl Failure {
    fn run(e: impl Display) -> Self {
        Failure::Run(e.to_string())
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code. Written CSV paths go to stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_to(argv, &mut std::io::stdout())
}

/// [`run`] with the list of written files sent to `listing`.
pub fn run_to<I, T>(argv: I, listing: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return 2;
    }
    let result = match &cli.command {
        Command::Gradnorm { common, flags } => execute("gradnorm", common, flags, run_gradnorm, listing),
        Command::Repdelta { common, flags } => execute("repdelta", common, flags, run_repdelta, listing),
        Command::OmegaSim { common, flags } => execute("omega-sim", common, flags, run_omega, listing),
        Command::OutputDiff { common, flags } => execute("output-diff", common, flags, run_output_diff, listing),
        Command::AdamKappa { common, flags } => execute("adam-kappa", common, flags, run_kappa, listing),
        Command::Gradcheck { common, flags } => execute("gradcheck", common, flags, run_gradcheck, listing),
        Command::Train { common, flags } => execute("train", common, flags, run_train, listing),
        Command::Curves { common, flags } => execute("curves", common, flags, run_curves, listing),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    // the global pool can only be set once per process; later calls keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

trait Seeded {
    fn seed(&self) -> u64;
    fn set_seed(&mut self, seed: u64);
}

macro_rules! seeded {
    ($($t:ty),*) => {$(
        impl Seeded for $t {
            fn seed(&self) -> u64 { self.seed }
            fn set_seed(&mut self, seed: u64) { self.seed = seed; }
        }
    )*};
}

/// CSV body: header plus rows; `ok` is false when the experiment's own
/// check failed (exit code 1, files still written).
struct Table {
    header: &'static str,
    rows: Vec<String>,
    ok: bool,
}

/// Layers flag values over the config file and the defaults.
fn resolve<C: DeserializeOwned>(file: Option<&Path>, flags: &impl Serialize) -> Result<C, Failure> {
    let mut merged = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            match serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))? {
                Value::Object(m) => m,
                _ => return Err(Failure::Usage(format!("{}: expected a JSON object", p.display()))),
            }
        }
        None => Map::new(),
    };
    if let Value::Object(m) = serde_json::to_value(flags).map_err(Failure::run)? {
        merged.extend(m);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::Usage(format!("config: {e}")))
}

pub fn hash8(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(4)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn execute<C, F>(
    command: &str,
    common: &Common,
    flags: &F,
    body: fn(&C) -> Result<Table, Failure>,
    listing: &mut dyn Write,
) -> Result<i32, Failure>
where
    C: Serialize + DeserializeOwned + Seeded,
    F: Serialize,
{
    let mut cfg: C = resolve(common.config.as_deref(), flags)?;
    let seeds = if common.seed.is_empty() { vec![cfg.seed()] } else { common.seed.clone() };
    fs::create_dir_all(&common.out).map_err(|e| Failure::Run(format!("{}: {e}", common.out.display())))?;
    let mut code = 0;
    for seed in seeds {
        cfg.set_seed(seed);
        let config = serde_json::to_value(&cfg).map_err(Failure::run)?;
        let stem = format!("{command}-{seed}-{}", hash8(&config.to_string()));
        let table = body(&cfg)?;
        let meta = json!({
            "command": command,
            "config": config,
            "seed": seed,
            "version": VERSION,
            "reduction": "ordered",
        });
        let mut csv = format!("# {meta}\n{}\n", table.header);
        for row in &table.rows {
            csv.push_str(row);
            csv.push('\n');
        }
        let mut sidecar = meta;
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        sidecar["timestamp_unix"] = json!(stamp);
        sidecar["csv"] = json!(format!("{stem}.csv"));
        sidecar["ok"] = json!(table.ok);
        let csv_path = common.out.join(format!("{stem}.csv"));
        let json_path = common.out.join(format!("{stem}.json"));
        fs::write(&csv_path, csv).map_err(|e| Failure::Run(format!("{}: {e}", csv_path.display())))?;
        let pretty = serde_json::to_string_pretty(&sidecar).map_err(Failure::run)?;
        fs::write(&json_path, pretty + "\n").map_err(|e| Failure::Run(format!("{}: {e}", json_path.display())))?;
        let _ = writeln!(listing, "{}", csv_path.display());
        if !table.ok {
            eprintln!("{command}: check failed for seed {seed}");
            code = 1;
        }
    }
    Ok(code)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

// ---- gradnorm / repdelta -------------------------------------------------

#[derive(Args, Serialize)]
struct ProfileFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<Variant>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seq_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
    /// Block pattern, repeated to the depth (e.g. `attn,ffn_linear`).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    blocks: Vec<BlockKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ln_mode: Option<String>,
    /// Networks averaged per output file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seeds: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub variant: Variant,
    pub depth: usize,
    pub width: usize,
    pub seq_len: usize,
    /// Defaults to `width`.
    pub hidden: Option<usize>,
    pub blocks: Vec<BlockKind>,
    #[serde(with = "ln_mode_str")]
    pub ln_mode: LnMode,
    pub seeds: usize,
    pub seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Residual,
            depth: 24,
            width: 64,
            seq_len: 16,
            hidden: None,
            blocks: vec![BlockKind::FfnLinear],
            ln_mode: LnMode::EXACT,
            seeds: 10,
            seed: 0,
        }
    }
}

impl ProfileConfig {
    pub fn network(&self) -> Result<NetworkConfig, LabError> {
        if self.blocks.is_empty() {
            return Err(LabError::Param("empty block pattern".into()));
        }
        Ok(NetworkConfig {
            variant: self.variant,
            depth: self.depth,
            width: self.width,
            seq_len: self.seq_len,
            hidden: self.hidden.unwrap_or(self.width),
            blocks: (0..self.depth).map(|k| self.blocks[k % self.blocks.len()]).collect(),
            init: InitMode::Analysis,
            ln_mode: self.ln_mode,
            seed: self.seed,
        })
    }
}

seeded!(ProfileConfig, CurvesConfig, OmegaConfig, OutputDiffConfig, KappaConfig, GradcheckConfig, TrainConfig);

fn profile_rows(rows: &[ProfileResult]) -> Vec<String> {
    rows.iter()
        .map(|r| format!("{},{},{},{},{}", r.k, r.statistic, r.mean, r.stderr, opt(r.theory)))
        .collect()
}

fn run_gradnorm(cfg: &ProfileConfig) -> Result<Table, Failure> {
    let net = cfg.network().map_err(|e| Failure::Usage(e.to_string()))?;
    let rows = gradnorm_profile(&net, cfg.seeds).map_err(Failure::run)?;
    Ok(Table {
        header: "k,statistic,mean,stderr,theory",
        rows: profile_rows(&rows),
        ok: true,
    })
}

fn run_repdelta(cfg: &ProfileConfig) -> Result<Table, Failure> {
    let net = cfg.network().map_err(|e| Failure::Usage(e.to_string()))?;
    let rows = repdelta_profile(&net, cfg.seeds).map_err(Failure::run)?;
    Ok(Table {
        header: "k,statistic,mean,stderr,theory",
        rows: profile_rows(&rows),
        ok: true,
    })
}

// ---- curves ----------------------------------------------------------------

#[derive(Args, Serialize)]
struct CurvesFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<Variant>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurvesConfig {
    pub variant: Variant,
    pub depth: usize,
    pub seed: u64,
}

impl Default for CurvesConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Residual,
            depth: 24,
            seed: 0,
        }
    }
}

fn run_curves(cfg: &CurvesConfig) -> Result<Table, Failure> {
    let pts = theory_curves(cfg.variant, cfg.depth).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(Table {
        header: "k,value,boundary",
        rows: pts.iter().map(|p| format!("{},{},{}", p.k, p.value, p.boundary)).collect(),
        ok: true,
    })
}

// ---- omega-sim -----------------------------------------------------------

#[derive(Args, Serialize)]
struct OmegaFlags {
    /// `preln_surrogate` or `postln_surrogate`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    regime: Option<Regime>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    trials: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OmegaConfig {
    pub regime: Regime,
    pub depth: usize,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for OmegaConfig {
    fn default() -> Self {
        Self {
            regime: Regime::PrelnSurrogate,
            depth: 32,
            sigma: 1.0,
            trials: 100_000,
            seed: 0,
        }
    }
}

fn run_omega(cfg: &OmegaConfig) -> Result<Table, Failure> {
    let sim = CollapseSimConfig {
        depth: cfg.depth,
        sigma: cfg.sigma,
        trials: cfg.trials,
        seed: cfg.seed,
        regime: cfg.regime,
    };
    sim.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let rows = collapse_simulation(&sim).map_err(Failure::run)?;
    Ok(Table {
        header: "k,sample_var,stderr,theory",
        rows: rows
            .iter()
            .map(|r| format!("{},{},{},{}", r.k, r.sample_var, r.stderr, r.theory))
            .collect(),
        ok: true,
    })
}

// ---- output-diff ---------------------------------------------------------

#[derive(Args, Serialize)]
struct OutputDiffFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<Variant>,
    /// Depths to evaluate, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    depths: Vec<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    trials: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputDiffConfig {
    pub variant: Variant,
    pub depths: Vec<usize>,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for OutputDiffConfig {
    fn default() -> Self {
        Self {
            variant: Variant::PreLn,
            depths: vec![1, 2, 4, 8, 16, 32, 64],
            sigma: 1.0,
            trials: 100_000,
            seed: 0,
        }
    }
}

fn run_output_diff(cfg: &OutputDiffConfig) -> Result<Table, Failure> {
    let rows = cfg
        .depths
        .iter()
        .map(|&n| {
            output_difference_experiment(cfg.variant, n, cfg.sigma, cfg.trials, cfg.seed)
                .map(|r| format!("{},{},{},{},{}", r.depth, r.sigma, r.mean_abs_diff, r.stderr, opt(r.theory)))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(Table {
        header: "depth,sigma,mean_abs_diff,stderr,theory",
        rows,
        ok: true,
    })
}

// ---- adam-kappa ----------------------------------------------------------

#[derive(Args, Serialize)]
struct KappaFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tmax: Option<u64>,
    /// Gradient scales, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    sigmas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KappaConfig {
    pub d: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tmax: u64,
    pub sigmas: Vec<f64>,
    pub seed: u64,
}

impl Default for KappaConfig {
    fn default() -> Self {
        let sim = KappaSimConfig::default();
        Self {
            d: sim.d,
            alpha: sim.hyper.alpha,
            beta1: sim.hyper.beta1,
            beta2: sim.hyper.beta2,
            eps: sim.hyper.eps,
            tmax: sim.t_max,
            sigmas: sim.sigmas,
            seed: 0,
        }
    }
}

fn run_kappa(cfg: &KappaConfig) -> Result<Table, Failure> {
    let sim = KappaSimConfig {
        d: cfg.d,
        hyper: AdamHyper {
            alpha: cfg.alpha,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        },
        sigmas: cfg.sigmas.clone(),
        t_max: cfg.tmax,
        seed: cfg.seed,
    };
    let probe = kappa_simulation(&sim).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(Table {
        header: "t,sigma_g,kappa,seed",
        rows: probe
            .rows
            .iter()
            .map(|r| format!("{},{},{},{}", r.t, r.sigma_g, r.kappa, r.seed))
            .collect(),
        ok: true,
    })
}

// ---- gradcheck -----------------------------------------------------------

#[derive(Args, Serialize)]
struct GradcheckFlags {
    /// Restrict to one wiring (default: all three).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<Variant>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seq_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    instances: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    step: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tolerance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub variant: Option<Variant>,
    pub depth: usize,
    pub width: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let s = SuiteConfig::default();
        Self {
            variant: None,
            depth: s.depth,
            width: s.width,
            seq_len: s.seq_len,
            hidden: s.hidden,
            instances: s.instances,
            step: s.step,
            tolerance: s.tolerance,
            seed: s.seed,
        }
    }
}

fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Table, Failure> {
    let suite = SuiteConfig {
        variants: cfg.variant.map_or_else(|| Variant::ALL.to_vec(), |v| vec![v]),
        depth: cfg.depth,
        width: cfg.width,
        seq_len: cfg.seq_len,
        hidden: cfg.hidden,
        instances: cfg.instances,
        step: cfg.step,
        tolerance: cfg.tolerance,
        seed: cfg.seed,
    };
    let rows = run_suite(&suite).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(Table {
        header: "instance,variant,blocks,ln_mode,param,max_rel_err,pass",
        ok: rows.iter().all(|r| r.pass),
        rows: rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.instance, r.variant, r.blocks, r.ln_mode, r.param, r.max_rel_err, r.pass
                )
            })
            .collect(),
    })
}

// ---- train ---------------------------------------------------------------

#[derive(Args, Serialize)]
struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<Variant>,
    /// `inv_sqrt_warmup`, `inv_sqrt_no_warmup` or `linear_decay`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    schedule: Option<Schedule>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    vocab: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seq_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_steps: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    base_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    warmup_steps: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub schedule: Schedule,
    pub vocab: usize,
    pub seq_len: usize,
    pub train_steps: u64,
    pub batch: usize,
    pub width: usize,
    pub depth: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let c = CopyTaskConfig::default();
        Self {
            variant: Variant::Residual,
            schedule: Schedule::InvSqrtNoWarmup,
            vocab: c.vocab,
            seq_len: c.seq_len,
            train_steps: c.train_steps,
            batch: c.batch,
            width: c.width,
            depth: c.depth,
            base_lr: c.base_lr,
            warmup_steps: c.warmup_steps,
            seed: c.seed,
        }
    }
}

fn run_train(cfg: &TrainConfig) -> Result<Table, Failure> {
    let task = CopyTaskConfig {
        vocab: cfg.vocab,
        seq_len: cfg.seq_len,
        train_steps: cfg.train_steps,
        batch: cfg.batch,
        width: cfg.width,
        depth: cfg.depth,
        seed: cfg.seed,
        base_lr: cfg.base_lr,
        warmup_steps: cfg.warmup_steps,
    };
    task.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let records = train(&task, cfg.variant, cfg.schedule).map_err(Failure::run)?;
    Ok(Table {
        header: "step,loss,lr,grad_norm,diverged",
        rows: records
            .iter()
            .map(|r| format!("{},{},{},{},{}", r.step, r.loss, r.lr, r.grad_norm, r.diverged))
            .collect(),
        ok: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"depth": 5, "variant": "post_ln"}"#).unwrap();
        let flags = CurvesFlags {
            variant: Some(Variant::PreLn),
            depth: None,
        };
        let cfg: CurvesConfig = resolve(Some(&path), &flags).unwrap();
        assert_eq!(cfg.depth, 5);
        assert_eq!(cfg.variant, Variant::PreLn);
    }

    #[test]
    fn unknown_config_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"depht": 5}"#).unwrap();
        let flags = CurvesFlags { variant: None, depth: None };
        assert!(matches!(resolve::<CurvesConfig>(Some(&path), &flags), Err(Failure::Usage(_))));
    }

    #[test]
    fn hash_is_eight_hex_digits() {
        let h = hash8("{}");
        assert_eq!(h.len(), 8);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(h, hash8("{}"));
        assert_ne!(h, hash8("{ }"));
    }

    #[test]
    fn pattern_repeats_to_depth() {
        let cfg = ProfileConfig {
            depth: 5,
            blocks: vec![BlockKind::Attn, BlockKind::FfnLinear],
            ..ProfileConfig::default()
        };
        let net = cfg.network().unwrap();
        assert_eq!(net.blocks[4], BlockKind::Attn);
        assert_eq!(net.blocks[3], BlockKind::FfnLinear);
        assert_eq!(net.hidden, 64);
    }
}
