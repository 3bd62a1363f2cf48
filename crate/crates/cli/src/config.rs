//! Run configuration: an optional TOML file overlaid by command-line flags.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;
use toolgate_core::defaults;
use toolgate_core::estimators::LayerChoice;
use toolgate_core::{BucketThresholds, EstimatorKind, MlpSpec, PolicyKind, PromptVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// Hidden layouts () (128) (256) (128,64) (1024,64) at two learning rates.
    Full,
    /// Logistic regression at two learning rates.
    Linear,
}

impl Grid {
    pub fn specs(self) -> Vec<MlpSpec> {
        match self {
            Grid::Full => MlpSpec::default_grid(),
            Grid::Linear => MlpSpec::linear_grid(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 500 instances with known policy-table aggregates.
    Table1,
    /// 552 instances with fixed bucket-transition counts.
    Figure3,
    /// Separable need/utility embeddings, signal in layer 2 of 4.
    Separable,
    /// Self-decisions flipped at 40%, separable utility embeddings.
    NoisySelf,
}

/// Policy names accepted by `--policy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PolicyName {
    NoTool,
    AlwaysTool,
    SelfDecision,
    Oracle,
    EstimatorThreshold,
    EstimatorBudget,
}

/// Flags shared by every subcommand. Anything left unset falls back to the
/// config file and then to the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML file with RunConfig fields; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Trace file (JSON lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    /// Directory of EMB1 files; defaults to the trace's directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub embeddings: Option<PathBuf>,
    /// Output directory; tables go to stdout when omitted.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Upper edge of the Low score bucket.
    #[arg(long, global = true)]
    pub low_hi: Option<f64>,
    /// Lower edge of the High score bucket.
    #[arg(long, global = true)]
    pub high_lo: Option<f64>,
    /// No-tool score at or below which a tool is needed.
    #[arg(long, global = true)]
    pub need_threshold: Option<f64>,
    /// Gain magnitude treated as zero utility.
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    /// Estimator probability threshold for granting a call.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Total budget shared by all calls.
    #[arg(long, global = true)]
    pub budget: Option<f64>,
    /// Per-call cost; repeat for a cost sweep.
    #[arg(long = "cost", global = true)]
    pub costs: Vec<f64>,
    /// Cross-validation folds.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Prompt variant whose perceived-need answers to use.
    #[arg(long, global = true)]
    pub variant: Option<PromptVariant>,
    /// Estimator: need (lne) or positive utility from the plain (lue-x) or tool-described (lue-xd) prompt.
    #[arg(long, global = true, value_name = "lne|lue-x|lue-xd")]
    pub estimator: Option<EstimatorKind>,
    /// Hidden-state layer, or auto to search.
    #[arg(long, global = true, value_name = "auto|N")]
    pub layer: Option<LayerChoice>,
    /// Seed for folds, initialization and generated traces.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub grid: Option<Grid>,
    /// Estimator bundle file.
    #[arg(long, global = true, value_name = "FILE")]
    pub bundle: Option<PathBuf>,
    /// Use the bundle's stored out-of-fold predictions instead of scoring
    /// embeddings (the trace must be the one the bundle was trained on).
    #[arg(long, global = true)]
    pub oof: bool,
    /// Policy to simulate; repeatable.
    #[arg(long = "policy", global = true, value_enum)]
    pub policies: Vec<PolicyName>,
    /// Address for the decision service
    #[arg(long, global = true)]
    pub bind: Option<SocketAddr>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Instance count for generated traces.
    #[arg(long, global = true)]
    pub n: Option<usize>,
}

/// Contents of a `--config` file. Field names match the resolved config.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    trace: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    out: Option<PathBuf>,
    low_hi: Option<f64>,
    high_lo: Option<f64>,
    need_threshold: Option<f64>,
    eps: Option<f64>,
    tau: Option<f64>,
    budget: Option<f64>,
    costs: Option<Vec<f64>>,
    folds: Option<usize>,
    variant: Option<PromptVariant>,
    estimator: Option<String>,
    layer: Option<String>,
    seed: Option<u64>,
    grid: Option<Grid>,
    bundle: Option<PathBuf>,
    oof: Option<bool>,
    policies: Option<Vec<PolicyName>>,
    bind: Option<SocketAddr>,
    preset: Option<Preset>,
    n: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub trace: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub thresholds: BucketThresholds,
    pub need_threshold: f64,
    pub eps: f64,
    pub tau: f64,
    pub budget: f64,
    pub costs: Vec<f64>,
    pub folds: usize,
    pub variant: Option<PromptVariant>,
    pub estimator: EstimatorKind,
    pub layer: LayerChoice,
    pub seed: u64,
    pub grid: Grid,
    pub bundle: Option<PathBuf>,
    pub oof: bool,
    pub policies: Vec<PolicyName>,
    pub bind: SocketAddr,
    pub preset: Option<Preset>,
    pub n: Option<usize>,
}

fn relative_to(base: &Path, p: Option<PathBuf>) -> Option<PathBuf> {
    p.map(|p| if p.is_relative() { base.join(p) } else { p })
}

impl RunConfig {
    pub fn resolve(flags: Flags) -> Result<Self> {
        let file = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?;
                let mut fc: FileConfig = toml::from_str(&text)
                    .with_context(|| format!("invalid config {}", path.display()))?;
                // Paths in a config file are relative to the file itself.
                let base = path.parent().unwrap_or(Path::new(""));
                fc.trace = relative_to(base, fc.trace);
                fc.embeddings = relative_to(base, fc.embeddings);
                fc.out = relative_to(base, fc.out);
                fc.bundle = relative_to(base, fc.bundle);
                fc
            }
            None => FileConfig::default(),
        };

        let estimator = match (flags.estimator, file.estimator) {
            (Some(e), _) => e,
            (None, Some(s)) => s.parse().map_err(anyhow::Error::msg)?,
            (None, None) => EstimatorKind::Lne,
        };
        let layer = match (flags.layer, file.layer) {
            (Some(l), _) => l,
            (None, Some(s)) => s.parse().map_err(anyhow::Error::msg)?,
            (None, None) => LayerChoice::Auto,
        };
        let low_hi = flags.low_hi.or(file.low_hi).unwrap_or(defaults::LOW_HI);
        let high_lo = flags.high_lo.or(file.high_lo).unwrap_or(defaults::HIGH_LO);
        let cfg = RunConfig {
            trace: flags.trace.or(file.trace),
            embeddings: flags.embeddings.or(file.embeddings),
            out: flags.out.or(file.out),
            thresholds: BucketThresholds::new(low_hi, high_lo)?,
            need_threshold: flags
                .need_threshold
                .or(file.need_threshold)
                .unwrap_or(defaults::NEED_THRESHOLD),
            eps: flags.eps.or(file.eps).unwrap_or(defaults::EPS),
            tau: flags.tau.or(file.tau).unwrap_or(defaults::TAU),
            budget: flags.budget.or(file.budget).unwrap_or(defaults::BUDGET),
            costs: if flags.costs.is_empty() {
                file.costs.unwrap_or_default()
            } else {
                flags.costs
            },
            folds: flags.k.or(file.folds).unwrap_or(defaults::FOLDS),
            variant: flags.variant.or(file.variant),
            estimator,
            layer,
            seed: flags.seed.or(file.seed).unwrap_or(defaults::SEED),
            grid: flags.grid.or(file.grid).unwrap_or(Grid::Full),
            bundle: flags.bundle.or(file.bundle),
            oof: flags.oof || file.oof.unwrap_or(false),
            policies: if flags.policies.is_empty() {
                file.policies.unwrap_or_default()
            } else {
                flags.policies
            },
            bind: flags
                .bind
                .or(file.bind)
                .unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 8080))),
            preset: flags.preset.or(file.preset),
            n: flags.n.or(file.n),
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.need_threshold),
            "need threshold must be in [0, 1], got {}",
            self.need_threshold
        );
        ensure!(
            self.eps >= 0.0 && self.eps.is_finite(),
            "eps must be a non-negative number, got {}",
            self.eps
        );
        ensure!(
            self.tau > 0.0 && self.tau < 1.0,
            "tau must be in (0, 1), got {}",
            self.tau
        );
        ensure!(
            self.budget >= 0.0 && self.budget.is_finite(),
            "budget must be non-negative, got {}",
            self.budget
        );
        if let Some(c) = self.costs.iter().find(|c| !(**c >= 0.0 && c.is_finite())) {
            bail!("cost must be non-negative, got {c}");
        }
        ensure!(
            self.folds >= 2,
            "--k needs at least 2 folds, got {}",
            self.folds
        );
        Ok(())
    }

    pub fn trace_path(&self) -> Result<&Path> {
        self.trace
            .as_deref()
            .context("no trace given (use --trace)")
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .context("no output directory given (use --out)")
    }

    /// Policies to simulate when none were named.
    pub fn default_policies(&self, with_estimator: bool) -> Vec<PolicyName> {
        if !self.policies.is_empty() {
            return self.policies.clone();
        }
        let mut v = vec![
            PolicyName::NoTool,
            PolicyName::AlwaysTool,
            PolicyName::SelfDecision,
            PolicyName::Oracle,
        ];
        if with_estimator {
            v.push(PolicyName::EstimatorThreshold);
            if !self.costs.is_empty() {
                v.push(PolicyName::EstimatorBudget);
            }
        }
        v
    }
}

impl PolicyName {
    /// Fixed-parameter policies; the budget policy is expanded per cost.
    pub fn kind(self, tau: f64) -> Option<PolicyKind> {
        Some(match self {
            PolicyName::NoTool => PolicyKind::NoTool,
            PolicyName::AlwaysTool => PolicyKind::AlwaysTool,
            PolicyName::SelfDecision => PolicyKind::SelfDecision,
            PolicyName::Oracle => PolicyKind::Oracle,
            PolicyName::EstimatorThreshold => PolicyKind::EstimatorThreshold { tau },
            PolicyName::EstimatorBudget => return None,
        })
    }
}
