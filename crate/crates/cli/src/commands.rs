use std::fmt;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use toolgate_core::affordability::{
    call_limit_for_cost, gain_curve, gain_curve_by_coverage, observed_calls, Selector,
};
use toolgate_core::alignment::{
    consistency_matrix, need_confusion, utility_confusion, venn_counts, AlignError,
};
use toolgate_core::estimators::{gather_features, train_estimator, TrainConfig};
use toolgate_core::fixtures;
use toolgate_core::labeling::{bucket_transition_matrix, label_trace};
use toolgate_core::policy::{evaluate_policy, PolicyContext};
use toolgate_core::report::{self, Format, ReportBundle, Table};
use toolgate_core::service::{ServiceConfig, ServiceState};
use toolgate_core::trace::synth::synth_trace;
use toolgate_core::trace::{read_trace_file, validate, write_trace_set, EmbeddingDir, TraceError};
use toolgate_core::{ConfusionMatrix2, EstimatorBundle, PolicyKind, PromptVariant, TraceSet};

use crate::config::{PolicyName, Preset, RunConfig};

const FORMATS: [Format; 2] = [Format::Csv, Format::Markdown];
const COVERAGE_PCTS: [f64; 10] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0];

/// Problems with the input trace itself. Maps to exit status 1.
#[derive(Debug)]
pub struct Findings(pub Vec<String>);

impl fmt::Display for Findings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} validation finding(s)", self.0.len())
    }
}

impl std::error::Error for Findings {}

fn findings_from(e: TraceError) -> anyhow::Error {
    match e {
        TraceError::Validation(v) => Findings(v.iter().map(ToString::to_string).collect()).into(),
        TraceError::Io { .. } => e.into(),
        other => Findings(vec![other.to_string()]).into(),
    }
}

fn load_trace(cfg: &RunConfig) -> Result<TraceSet> {
    let ts = read_trace_file(cfg.trace_path()?).map_err(findings_from)?;
    let violations = validate(&ts);
    if !violations.is_empty() {
        return Err(findings_from(TraceError::Validation(violations)));
    }
    Ok(ts)
}

fn embedding_dir(cfg: &RunConfig, ts: &TraceSet) -> Result<EmbeddingDir> {
    let dir = match (&cfg.embeddings, &ts.base_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(base)) => base.clone(),
        (None, None) => bail!("no embedding directory given (use --embeddings)"),
    };
    EmbeddingDir::open(&dir)
        .with_context(|| format!("cannot open embedding directory {}", dir.display()))
}

/// Writes the bundle to `--out`, or prints it as Markdown when no output
/// directory was given.
fn publish(cfg: &RunConfig, bundle: &ReportBundle) -> Result<()> {
    match &cfg.out {
        Some(dir) => {
            let manifest = report::emit(bundle, dir, &FORMATS)?;
            for f in manifest {
                println!("{}", dir.join(f).display());
            }
        }
        None => {
            for t in &bundle.tables {
                println!("{}", t.to_markdown());
            }
        }
    }
    Ok(())
}

pub fn validate_cmd(cfg: &RunConfig) -> Result<()> {
    let ts = read_trace_file(cfg.trace_path()?).map_err(findings_from)?;
    let violations = validate(&ts);
    if let Some(dir) = &cfg.out {
        let mut bundle = ReportBundle::default();
        bundle.push(report::findings_table(&violations));
        report::emit(&bundle, dir, &FORMATS)?;
    }
    if violations.is_empty() {
        println!("ok: {} records", ts.len());
        Ok(())
    } else {
        Err(findings_from(TraceError::Validation(violations)))
    }
}

fn label_tables(cfg: &RunConfig, ts: &TraceSet) -> Result<Vec<Table>> {
    let labels = label_trace(ts, &cfg.thresholds, cfg.need_threshold, cfg.eps)?;
    let m = bucket_transition_matrix(ts, &cfg.thresholds)?;
    Ok(vec![
        report::labels_table(&labels),
        report::bucket_table(&m),
        report::bucket_summary_table(&m),
    ])
}

pub fn label_cmd(cfg: &RunConfig) -> Result<()> {
    let ts = load_trace(cfg)?;
    publish(
        cfg,
        &ReportBundle {
            tables: label_tables(cfg, &ts)?,
        },
    )
}

/// Variants to analyse: the requested one, or every variant with answers.
fn variants(cfg: &RunConfig, ts: &TraceSet) -> Vec<PromptVariant> {
    match cfg.variant {
        Some(v) => vec![v],
        None => PromptVariant::ALL
            .into_iter()
            .filter(|&v| ts.iter().any(|r| r.perceived(v).is_some()))
            .collect(),
    }
}

fn align_tables(cfg: &RunConfig, ts: &TraceSet) -> Result<Vec<Table>> {
    let vs = variants(cfg, ts);
    let mut need: Vec<(String, ConfusionMatrix2)> = Vec::new();
    let mut consistency = Vec::new();
    let mut venns = Vec::new();
    for &v in &vs {
        need.push((
            v.as_str().to_string(),
            need_confusion(ts, v, cfg.need_threshold)?,
        ));
        consistency.push((v.as_str().to_string(), consistency_matrix(ts, v)?));
        venns.push(report::venn_table(
            &format!("venn_{}", v.as_str()),
            &venn_counts(ts, v, cfg.eps)?,
        ));
    }
    let mut tables = vec![report::confusion_table(
        "utility_confusion",
        "Positive utility (rows) against the self-decided call (columns)",
        &[("self_decision".to_string(), utility_confusion(ts, cfg.eps)?)],
    )];
    if !vs.is_empty() {
        tables.push(report::confusion_table(
            "need_confusion",
            "True need (rows) against perceived need (columns)",
            &need,
        ));
        tables.push(report::confusion_table(
            "consistency",
            "Perceived need (rows) against the self-decided call (columns)",
            &consistency,
        ));
        tables.extend(venns);
    }
    Ok(tables)
}

pub fn align_cmd(cfg: &RunConfig) -> Result<()> {
    let ts = load_trace(cfg)?;
    let tables = align_tables(cfg, &ts).map_err(|e| match e.downcast::<AlignError>() {
        Ok(a) => anyhow::Error::new(a).context("alignment needs perceived-need answers"),
        Err(e) => e,
    })?;
    publish(cfg, &ReportBundle { tables })
}

/// Estimator probabilities aligned with the trace, when a bundle was given.
fn estimator_probas(cfg: &RunConfig, ts: &TraceSet) -> Result<Option<Vec<f64>>> {
    let Some(path) = &cfg.bundle else {
        if cfg.oof {
            bail!("--oof needs --bundle");
        }
        return Ok(None);
    };
    let bundle = EstimatorBundle::load(path)
        .with_context(|| format!("cannot load bundle {}", path.display()))?;
    if cfg.oof {
        if bundle.cv.oof_proba.len() != ts.len() {
            bail!(
                "bundle holds {} out-of-fold predictions but the trace has {} records",
                bundle.cv.oof_proba.len(),
                ts.len()
            );
        }
        return Ok(Some(bundle.cv.oof_proba.clone()));
    }
    let dir = embedding_dir(cfg, ts)?;
    let cond = bundle.kind.condition();
    let m = dir.load(cond, bundle.layer)?;
    let x = gather_features(ts, &m, cond)?;
    Ok(Some(bundle.predict_proba(x.view())?))
}

fn selectors(cfg: &RunConfig, ts: &TraceSet) -> Result<Vec<(String, Selector)>> {
    let mut v = vec![
        ("oracle".to_string(), Selector::Oracle { eps: cfg.eps }),
        (
            "self_first_k".to_string(),
            Selector::Observed(observed_calls(ts)),
        ),
    ];
    if let Some(p) = estimator_probas(cfg, ts)? {
        v.push(("estimator".to_string(), Selector::Ranked(p)));
    }
    Ok(v)
}

fn afford_tables(cfg: &RunConfig, ts: &TraceSet) -> Result<Vec<Table>> {
    let sel = selectors(cfg, ts)?;
    let mut tables = Vec::new();
    let by_cov = sel
        .iter()
        .map(|(name, s)| {
            Ok((
                name.clone(),
                gain_curve_by_coverage(ts, s, cfg.budget, &COVERAGE_PCTS)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    tables.push(report::gain_curve_table("gain_by_coverage", &by_cov));
    if !cfg.costs.is_empty() {
        let by_cost = sel
            .iter()
            .map(|(name, s)| Ok((name.clone(), gain_curve(ts, s, cfg.budget, &cfg.costs)?)))
            .collect::<Result<Vec<_>>>()?;
        tables.push(report::gain_curve_table("gain_by_cost", &by_cost));
    }
    Ok(tables)
}

pub fn afford_cmd(cfg: &RunConfig) -> Result<()> {
    let ts = load_trace(cfg)?;
    publish(
        cfg,
        &ReportBundle {
            tables: afford_tables(cfg, &ts)?,
        },
    )
}

fn policy_tables(cfg: &RunConfig, ts: &TraceSet) -> Result<Vec<Table>> {
    let probas = estimator_probas(cfg, ts)?;
    let mut ctx = PolicyContext::new(cfg.eps);
    if let Some(p) = &probas {
        ctx = ctx.with_probas(ts, p)?;
    }
    let mut outcomes = Vec::new();
    for name in cfg.default_policies(probas.is_some()) {
        if let Some(kind) = name.kind(cfg.tau) {
            if kind.needs_estimator() && probas.is_none() {
                bail!("policy {} needs --bundle", kind.name());
            }
            outcomes.push(evaluate_policy(ts, &kind, &ctx)?);
            continue;
        }
        debug_assert_eq!(name, PolicyName::EstimatorBudget);
        if probas.is_none() {
            bail!("policy estimator_budget needs --bundle");
        }
        if cfg.costs.is_empty() {
            bail!("policy estimator_budget needs at least one --cost");
        }
        for &c in &cfg.costs {
            let k = call_limit_for_cost(cfg.budget, c, ts.len())?;
            let mut o = evaluate_policy(ts, &PolicyKind::EstimatorBudget { k }, &ctx)?;
            o.policy = format!("estimator_budget(k={k})");
            outcomes.push(o);
        }
    }
    Ok(vec![report::policy_table(&outcomes)])
}

pub fn simulate_cmd(cfg: &RunConfig) -> Result<()> {
    let ts = load_trace(cfg)?;
    publish(
        cfg,
        &ReportBundle {
            tables: policy_tables(cfg, &ts)?,
        },
    )
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let ts = load_trace(cfg)?;
    let out = cfg.out_dir()?;
    let dir = embedding_dir(cfg, &ts)?;
    let tc = TrainConfig {
        kind: cfg.estimator,
        layer: cfg.layer,
        grid: cfg.grid.specs(),
        folds: cfg.folds,
        seed: cfg.seed,
        need_threshold: cfg.need_threshold,
        eps: cfg.eps,
    };
    let outcome = train_estimator(&ts, &dir, &tc)?;
    let b = &outcome.bundle;
    let mut bundle = ReportBundle::default();
    if let Some(ls) = &outcome.layer_search {
        bundle.push(report::layer_table(ls));
    }
    bundle.push(report::cv_table(&format!("cv_{}", b.kind.as_str()), &b.cv));
    report::emit(&bundle, out, &FORMATS)?;
    let file = out.join(format!("{}.tgb", b.kind.as_str()));
    b.save(&file)?;
    println!(
        "{}: layer {}, spec {}, oof accuracy {}, balanced accuracy {}",
        b.kind,
        b.layer,
        b.model.spec.label(),
        report::format_float(b.cv.accuracy),
        report::format_float(b.cv.balanced_accuracy),
    );
    println!("{}", file.display());
    Ok(())
}

/// Every trace-only analysis in one output tree.
pub fn report_cmd(cfg: &RunConfig) -> Result<()> {
    let ts = load_trace(cfg)?;
    let mut tables = label_tables(cfg, &ts)?;
    tables.extend(align_tables(cfg, &ts)?);
    tables.extend(policy_tables(cfg, &ts)?);
    tables.extend(afford_tables(cfg, &ts)?);
    publish(cfg, &ReportBundle { tables })
}

pub fn serve_cmd(cfg: &RunConfig) -> Result<()> {
    let cost = match cfg.costs.as_slice() {
        [c] => *c,
        [] => bail!("serve needs the per-call cost (use --cost)"),
        _ => bail!("serve takes a single --cost"),
    };
    let bundle = match &cfg.bundle {
        Some(p) => Some(
            EstimatorBundle::load(p)
                .with_context(|| format!("cannot load bundle {}", p.display()))?,
        ),
        None => None,
    };
    let state = ServiceState::new(
        bundle,
        &ServiceConfig {
            budget: cfg.budget,
            cost,
            tau: cfg.tau,
            embeddings_root: cfg.embeddings.clone(),
        },
    )?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(cfg.bind)
            .await
            .with_context(|| format!("cannot bind {}", cfg.bind))?;
        eprintln!("listening on {}", listener.local_addr()?);
        toolgate_core::service::serve(listener, Arc::new(state), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

pub fn synth_cmd(cfg: &RunConfig) -> Result<()> {
    let preset = cfg.preset.context("synth needs --preset")?;
    let out = cfg.out_dir()?;
    let path = match preset {
        Preset::Table1 => {
            std::fs::create_dir_all(out)?;
            let path = out.join("trace.jsonl");
            write_trace_set(&fixtures::table1_trace(), &path)?;
            path
        }
        Preset::Figure3 => synth_trace(&fixtures::figure3_config(), cfg.seed)?.write_to_dir(out)?,
        Preset::Separable => {
            let c = fixtures::separable_config(cfg.n.unwrap_or(500), 64, 4, 2, 6.0);
            synth_trace(&c, cfg.seed)?.write_to_dir(out)?
        }
        Preset::NoisySelf => {
            let c = fixtures::noisy_self_config(cfg.n.unwrap_or(500), 0.4);
            synth_trace(&c, cfg.seed)?.write_to_dir(out)?
        }
    };
    println!("{}", Path::new(&path).display());
    Ok(())
}
