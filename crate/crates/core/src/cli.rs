//! Command-line driver. One TOML file describes an experiment; each
//! subcommand writes its artifacts atomically into the output directory.
//!
//! Exit codes: 0 success, 2 configuration or schema error, 3 runtime or
//! training failure (including a certificate without an ID improvement).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::{self, ExperimentPlan, SelectionOptions, Thresholds};
use crate::oracle::FeatureMask;
use crate::plot;
use crate::sem::{make_shift_family, EnvId, Environment, TaskSpec};
use crate::theorem::{self, Tolerances, Verdict};
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_shift_steps() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentsConfig {
    pub alpha_id: Vec<f64>,
    pub alpha_ood: Vec<f64>,
    /// Far end of the shift family; defaults to `alpha_ood`.
    #[serde(default)]
    pub alpha_far: Option<Vec<f64>>,
    #[serde(default = "default_shift_steps")]
    pub shift_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    /// `"inv"`, `"all"` or a comma list of 0-based columns; default `"inv"`.
    pub mask: Option<String>,
    /// Spurious column to add; default: the first spurious column not in the mask.
    pub add_feature: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Order in which spurious columns are added; default: all, ascending.
    pub order: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub eps_x: f64,
    pub eps_y: f64,
    pub delta: f64,
    pub chance: f64,
    pub r_cut: f64,
    pub fixed_epoch: Option<usize>,
    /// Method kept in the fixed-epoch subsample; `"all"` keeps every method.
    pub filter_method: String,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        let t = Thresholds::default();
        LandscapeConfig {
            eps_x: t.eps_x,
            eps_y: t.eps_y,
            delta: t.delta,
            chance: t.chance,
            r_cut: t.r_cut,
            fixed_epoch: None,
            filter_method: "erm".into(),
        }
    }
}

impl LandscapeConfig {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            eps_x: self.eps_x,
            eps_y: self.eps_y,
            delta: self.delta,
            chance: self.chance,
            r_cut: self.r_cut,
        }
    }
}

/// Everything one experiment needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; replaces `trainer.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    pub environments: EnvironmentsConfig,
    #[serde(default)]
    pub trainer: TrainConfig,
    #[serde(default)]
    pub experiment: ExperimentPlan,
    #[serde(default)]
    pub landscape: LandscapeConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.trainer.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Cross-module checks: dimensions, ranges, mask and index validity.
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.env_id().check(&self.task)?;
        self.env_ood().check(&self.task)?;
        self.alpha_far().check(&self.task)?;
        self.trainer.validate()?;
        self.experiment.validate()?;
        self.landscape.thresholds().validate()?;
        let mask = self.mask(None)?;
        if self.certify.add_feature.is_some() {
            self.add_feature(&mask, None)?;
        }
        self.sweep_order()?;
        Ok(())
    }

    pub fn env_id(&self) -> Environment {
        Environment::new(EnvId::Id, self.environments.alpha_id.clone())
    }

    pub fn env_ood(&self) -> Environment {
        Environment::new(EnvId::Ood, self.environments.alpha_ood.clone())
    }

    fn alpha_far(&self) -> Environment {
        let alpha = self
            .environments
            .alpha_far
            .clone()
            .unwrap_or_else(|| self.environments.alpha_ood.clone());
        Environment::new(EnvId::Ood, alpha)
    }

    /// Mask from the command line if given, else from the config.
    pub fn mask(&self, flag: Option<&str>) -> Result<FeatureMask> {
        match flag.or(self.certify.mask.as_deref()) {
            None => Ok(FeatureMask::invariant_only(&self.task)),
            Some(spec) => parse_mask(&self.task, spec),
        }
    }

    pub fn add_feature(&self, mask: &FeatureMask, flag: Option<usize>) -> Result<usize> {
        let col = match flag.or(self.certify.add_feature) {
            Some(c) => c,
            None => (self.task.d_inv..self.task.width())
                .find(|c| !mask.contains(*c))
                .ok_or_else(|| Error::config("mask already contains every spurious column"))?,
        };
        if col < self.task.d_inv || col >= self.task.width() {
            return Err(Error::config(format!(
                "add_feature {col} is not a spurious column (spurious columns are {}..{})",
                self.task.d_inv,
                self.task.width()
            )));
        }
        Ok(col)
    }

    pub fn sweep_order(&self) -> Result<Vec<usize>> {
        let order = self
            .sweep
            .order
            .clone()
            .unwrap_or_else(|| (self.task.d_inv..self.task.width()).collect());
        if let Some(bad) = order
            .iter()
            .find(|&&c| c < self.task.d_inv || c >= self.task.width())
        {
            return Err(Error::config(format!(
                "sweep.order entry {bad} is not a spurious column"
            )));
        }
        Ok(order)
    }

    pub fn selection_options(&self, fixed_epoch: Option<usize>) -> SelectionOptions {
        selection_options(&self.landscape, fixed_epoch, self.trainer.epochs)
    }
}

fn selection_options(
    cfg: &LandscapeConfig,
    flag: Option<usize>,
    default_epoch: usize,
) -> SelectionOptions {
    SelectionOptions {
        fixed_epoch: flag.or(cfg.fixed_epoch).unwrap_or(default_epoch),
        filter_method: match cfg.filter_method.as_str() {
            "all" => None,
            m => Some(m.to_string()),
        },
    }
}

/// `"inv"`, `"all"`, or a comma list of 0-based global column indices.
pub fn parse_mask(task: &TaskSpec, spec: &str) -> Result<FeatureMask> {
    match spec.trim() {
        "inv" => Ok(FeatureMask::invariant_only(task)),
        "all" => Ok(FeatureMask::full(task)),
        list => {
            let idx = list
                .split(',')
                .map(|s| {
                    s.trim().parse::<usize>().map_err(|_| {
                        Error::config(format!("mask entry `{}` is not a column index", s.trim()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            FeatureMask::from_indices(task.d_inv, task.d_spu, &idx)
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "misspec",
    version,
    about = "Inverse ID/OOD correlation experiments on a linear SEM"
)]
pub struct Cli {
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Certify that adding one spurious feature lowers ID risk and raises OOD risk.
    Certify {
        #[arg(long)]
        config: PathBuf,
        /// "inv", "all" or a comma list of 0-based columns.
        #[arg(long)]
        mask: Option<String>,
        /// 0-based spurious column to add.
        #[arg(long = "add-feature")]
        add_feature: Option<usize>,
    },
    /// Population ID/OOD risks while spurious features are added one by one.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train ERM seeds and one diverse set; write per-epoch metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Classify the ID/OOD cloud of a trainer CSV and report selection bias.
    Landscape {
        /// Trainer CSV.
        points: PathBuf,
        /// Optional config supplying thresholds.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "fixed-epoch")]
        fixed_epoch: Option<usize>,
    },
    /// Pattern of ERM clouds along a family of increasingly shifted environments.
    ShiftSweep {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn context(path: &Path, cli: &Cli) -> Result<Context> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.trainer.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok(Context { cfg, out })
}

/// Runs a parsed command, writing human-readable output to `stdout`.
/// Returns the process exit code.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Certify {
            config,
            mask,
            add_feature,
        } => {
            let ctx = context(config, cli)?;
            let cfg = &ctx.cfg;
            let mask = cfg.mask(mask.as_deref())?;
            let col = cfg.add_feature(&mask, *add_feature)?;
            let cert = theorem::certify(
                &cfg.task,
                &cfg.env_id(),
                &cfg.env_ood(),
                &mask,
                col,
                &Tolerances::default(),
            )?;
            let json = serde_json::to_string_pretty(&cert)? + "\n";
            write_atomic(&ctx.out.join("certificate.json"), json.as_bytes())?;
            writeln!(stdout, "{}", cert.summary())?;
            stdout.write_all(json.as_bytes())?;
            Ok(match cert.verdict {
                Verdict::InverseCertified | Verdict::IdOnlyImproved => EXIT_OK,
                Verdict::AssumptionViolated | Verdict::DecompositionInvalid => EXIT_RUNTIME,
            })
        }
        Command::Sweep { config } => {
            let ctx = context(config, cli)?;
            let cfg = &ctx.cfg;
            let steps = theorem::spurious_sweep(
                &cfg.task,
                &cfg.env_id(),
                &cfg.env_ood(),
                &cfg.sweep_order()?,
            )?;
            let csv = to_bytes(|b| theorem::write_sweep_csv(&steps, b))?;
            write_atomic(&ctx.out.join("sweep.csv"), &csv)?;
            write_atomic(
                &ctx.out.join("sweep.svg"),
                plot::risk_curves_svg(&steps).as_bytes(),
            )?;
            for s in &steps {
                writeln!(
                    stdout,
                    "d_hat={} L_ID={:.6} L_OOD={:.6}",
                    s.d_hat, s.l_id, s.l_ood
                )?;
            }
            Ok(EXIT_OK)
        }
        Command::Train { config } => {
            let ctx = context(config, cli)?;
            let cfg = &ctx.cfg;
            let (id, ood) = (cfg.env_id(), cfg.env_ood());
            let mut runs =
                landscape::erm_runs(&cfg.task, &id, &ood, &cfg.trainer, &cfg.experiment)?;
            if cfg.trainer.n_models >= 2 {
                runs.push(landscape::diverse_run(
                    &cfg.task,
                    &id,
                    &ood,
                    &cfg.trainer,
                    &cfg.experiment,
                )?);
            } else {
                log::warn!("n_models < 2: skipping the diverse set");
            }
            let csv = to_bytes(|b| trainer::write_records_csv(&runs, b))?;
            let path = ctx.out.join("train.csv");
            write_atomic(&path, &csv)?;
            let rows: usize = runs.iter().map(|r| r.records.len()).sum();
            writeln!(
                stdout,
                "wrote {rows} records from {} runs to {}",
                runs.len(),
                path.display()
            )?;
            Ok(EXIT_OK)
        }
        Command::Landscape {
            points,
            config,
            fixed_epoch,
        } => {
            let (lcfg, out) = match config {
                Some(path) => {
                    let ctx = context(path, cli)?;
                    (ctx.cfg.landscape, ctx.out)
                }
                None => (
                    LandscapeConfig::default(),
                    cli.out.clone().unwrap_or_else(default_output_dir),
                ),
            };
            let file = fs::File::open(points)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", points.display())))?;
            let rows = trainer::read_records_csv(file)?;
            let pts = landscape::points_from_rows(&rows);
            let last_epoch = pts.iter().map(|p| p.epoch).max().unwrap_or(1);
            let options = selection_options(&lcfg, *fixed_epoch, last_epoch);
            let report = landscape::selection_bias_report(&pts, &options, &lcfg.thresholds())?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            write_atomic(&out.join("landscape.json"), json.as_bytes())?;
            let scatter = to_bytes(|b| {
                landscape::write_scatter_csv(&landscape::scatter_rows(&pts, &report), b)
            })?;
            write_atomic(&out.join("scatter.csv"), &scatter)?;
            let title = format!(
                "full: {} / epoch {}: {}",
                report.pattern_full.pattern, report.fixed_epoch, report.pattern_filtered.pattern
            );
            let svg = plot::scatter_svg(
                &pts,
                &report.selected_by_id,
                &report.selected_by_ood,
                &title,
            );
            write_atomic(&out.join("scatter.svg"), svg.as_bytes())?;
            writeln!(
                stdout,
                "pattern_full={} (r={:.3}) pattern_filtered={} (r={:.3}) ood_regret={:.4}",
                report.pattern_full.pattern,
                report.pattern_full.pearson_r,
                report.pattern_filtered.pattern,
                report.pattern_filtered.pearson_r,
                report.ood_regret
            )?;
            Ok(EXIT_OK)
        }
        Command::ShiftSweep { config } => {
            let ctx = context(config, cli)?;
            let cfg = &ctx.cfg;
            let far = cfg
                .environments
                .alpha_far
                .as_ref()
                .unwrap_or(&cfg.environments.alpha_ood);
            let family = make_shift_family(
                &cfg.task,
                &cfg.environments.alpha_id,
                far,
                cfg.environments.shift_steps,
            )?;
            let steps = landscape::shift_sweep_report(
                &cfg.task,
                &cfg.env_id(),
                &family,
                &cfg.trainer,
                &cfg.experiment,
                &cfg.landscape.thresholds(),
            )?;
            let csv = to_bytes(|b| landscape::write_shift_csv(&steps, b))?;
            write_atomic(&ctx.out.join("shift_sweep.csv"), &csv)?;
            write_atomic(
                &ctx.out.join("shift_sweep.svg"),
                plot::shift_strip_svg(&steps).as_bytes(),
            )?;
            for s in &steps {
                writeln!(
                    stdout,
                    "t={} pattern={} r={:.3} mean_ood={:.4}",
                    s.t, s.label.pattern, s.label.pearson_r, s.label.mean_ood
                )?;
            }
            Ok(EXIT_OK)
        }
    }
}

/// Exit code for an error: 2 for configuration and schema problems, 3 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Schema { .. } | Error::Csv(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args`, runs the command and returns the exit code. Errors are
/// reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Initialises logging from `MISSPEC_LOG` (default `warn`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("MISSPEC_LOG", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}
