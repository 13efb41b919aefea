use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gcrb::flow::{self, ConditionalFlow};
use gcrb::oracles::channel::ChannelSpec;
use gcrb::oracles::edge::{edge_nlf_crb_matrix, edge_wgn_crb_matrix, pearson};
use gcrb::oracles::numeric_fim::{numeric_fim, FimMethod};
use gcrb::oracles::theory::{theorem1_report, TheoryOptions};
use gcrb::score::{egcrb, egfim, relative_error, TrustedRegion};
use gcrb::train::{self, synthesize_dataset, sweep_epochs_for_size, TrainConfig};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, NoiseModel};
use crate::error::CliError;
use crate::output::{fmt_f64, write_rows, write_table, Manifest, ResultRow};

/// Flag overrides; anything unset falls back to the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub eval_seed: Option<u64>,
    pub m: Option<usize>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub deterministic: bool,
    pub no_trim: bool,
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub config_text: String,
    pub spec: ChannelSpec,
    pub out: PathBuf,
    pub deterministic: bool,
    pool: rayon::ThreadPool,
}

impl Context {
    pub fn new(config_path: &Path, o: Overrides) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::load(config_path)?;
        if let Some(s) = o.seed {
            cfg.train.seed = s;
        }
        if let Some(s) = o.eval_seed {
            cfg.eval.seed = s;
        }
        if let Some(m) = o.m {
            cfg.eval.m = m;
        }
        if let Some(p) = o.out {
            cfg.out = p;
        }
        if o.model.is_some() {
            cfg.eval.model = o.model;
        }
        if o.no_trim {
            cfg.eval.trim = false;
        }
        cfg.train.validate().map_err(|e| CliError::config(format!("train: {e}")))?;
        let spec = cfg.channel.build()?;
        let threads = if o.deterministic { 1 } else { thread_cap()? };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
        fs::create_dir_all(&cfg.out).map_err(CliError::io)?;
        // the effective config, so the hash covers flag overrides too
        let config_text = cfg.to_toml();
        Ok(Self { out: cfg.out.clone(), cfg, config_text, spec, deterministic: o.deterministic, pool })
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, &self.cfg.id, &self.config_text, self.cfg.train.seed, self.cfg.eval.seed, self.deterministic)
    }

    fn finish(&self, mut manifest: Manifest, outputs: Vec<PathBuf>) -> Result<(), CliError> {
        manifest.outputs = outputs;
        manifest.write(&self.out)?;
        Ok(())
    }

    fn elapsed_ms(&self, t: Instant) -> u64 {
        if self.deterministic {
            0
        } else {
            t.elapsed().as_millis() as u64
        }
    }

    /// Map over independent work items, in parallel unless deterministic.
    fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
        self.pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect())
    }

    /// The configured model, or the channel's exact generator.
    fn flow(&self) -> Result<ConditionalFlow, CliError> {
        match &self.cfg.eval.model {
            Some(p) => flow::load(p).map_err(|e| CliError::config(format!("cannot load model {}: {e}", p.display()))),
            None => Ok(self.spec.optimal_flow()?),
        }
    }

    fn region<'f>(&self, flow: &'f ConditionalFlow) -> Option<&'f TrustedRegion> {
        if self.cfg.eval.trim {
            flow.meta.region.as_ref()
        } else {
            None
        }
    }
}

fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("GCRB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::config(format!("GCRB_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(0),
    }
}

fn status_of(e: &gcrb::Error) -> String {
    let s = format!("{e:?}");
    s.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("error").to_string()
}

fn fail_if_any(rows: &[ResultRow], what: &str) -> Result<(), CliError> {
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        return Err(CliError::eval(format!("{what}: {failed} row(s) failed")));
    }
    Ok(())
}

fn train_model(spec: &ChannelSpec, cfg: &ExperimentConfig, tc: &TrainConfig) -> Result<(ConditionalFlow, Vec<f64>), CliError> {
    let data = synthesize_dataset(spec, tc.dataset_size, tc.seed).map_err(|e| CliError::config(format!("dataset: {e}")))?;
    let arch = cfg.architecture_for(spec);
    let mut model = arch
        .build(spec.dim(), spec.theta_dim(), tc.seed)
        .map_err(|e| CliError::config(format!("architecture: {e}")))?;
    let report = train::train_with(&mut model, &data, tc, |epoch, nll| log::info!("epoch {epoch}: mean nll {nll:.6}"))
        .map_err(CliError::train)?;
    model.meta.region = Some(TrustedRegion::fit(&data.r).map_err(CliError::train)?);
    Ok((model, report.loss_trace))
}

pub fn cmd_train(ctx: &Context) -> Result<(), CliError> {
    let manifest = ctx.manifest("train");
    let (model, trace) = train_model(&ctx.spec, &ctx.cfg, &ctx.cfg.train)?;
    let model_path = ctx.out.join("model.flow");
    flow::save(&model, &model_path).map_err(CliError::io)?;
    let loss_path = ctx.out.join("loss.csv");
    let rows: Vec<Vec<String>> = trace.iter().enumerate().map(|(i, v)| vec![i.to_string(), fmt_f64(*v)]).collect();
    write_table(&loss_path, &["epoch", "mean_nll"], &rows)?;
    ctx.finish(manifest, vec![model_path, loss_path])
}

/// Rows for one grid point of the bound evaluation.
fn bound_rows(
    ctx: &Context,
    experiment: &str,
    flow: &ConditionalFlow,
    theta: &[f64],
    m: usize,
    seed: u64,
) -> Vec<ResultRow> {
    let t = Instant::now();
    let run = || -> Result<Vec<(String, f64)>, gcrb::Error> {
        let fim = egfim(flow, theta, m, seed, ctx.region(flow))?;
        let bound = egcrb(&fim)?;
        let k = theta.len();
        let mut out = Vec::new();
        for i in 0..k {
            for j in i..k {
                out.push((format!("egcrb_{i}{j}"), bound.matrix[(i, j)]));
            }
        }
        out.push(("egcrb_trace".into(), bound.matrix.trace()?));
        out.push(("condition".into(), bound.condition));
        out.push(("retention".into(), fim.retention()));
        if let Ok(crb) = ctx.spec.crb(theta) {
            out.push(("crb_trace".into(), crb.bound.trace()?));
            out.push(("rel_error".into(), relative_error(&bound.matrix, &crb.bound)?));
        }
        Ok(out)
    };
    let result = run();
    let wall_ms = ctx.elapsed_ms(t);
    match result {
        Ok(metrics) => metrics
            .into_iter()
            .map(|(name, v)| ResultRow { wall_ms, ..ResultRow::ok(experiment, theta, &name, v, m, seed) })
            .collect(),
        Err(e) => {
            log::warn!("θ = {theta:?}: {e}");
            vec![ResultRow { wall_ms, ..ResultRow::failed(experiment, theta, m, seed, &status_of(&e)) }]
        }
    }
}

pub fn cmd_eval(ctx: &Context) -> Result<(), CliError> {
    let manifest = ctx.manifest("eval");
    let flow = ctx.flow()?;
    let grid = ctx.cfg.grid(&ctx.spec)?;
    let (m, seed) = (ctx.cfg.eval.m, ctx.cfg.eval.seed);
    let rows: Vec<ResultRow> = ctx
        .map(&grid, |_, theta| bound_rows(ctx, &ctx.cfg.id, &flow, theta, m, seed))
        .into_iter()
        .flatten()
        .collect();
    let path = ctx.out.join("eval.csv");
    write_rows(&path, &rows)?;
    ctx.finish(manifest, vec![path])?;
    fail_if_any(&rows, "eval")
}

pub fn cmd_sweep_m(ctx: &Context) -> Result<(), CliError> {
    let manifest = ctx.manifest("sweep-m");
    let sw = &ctx.cfg.sweep;
    if sw.repeats == 0 {
        return Err(CliError::config("sweep.repeats must be positive"));
    }
    if sw.m_list.is_empty() {
        return Err(CliError::config("sweep.m_list is empty"));
    }
    let theta = sweep_theta(ctx)?;
    let flow = ctx.flow()?;
    let jobs: Vec<(usize, usize)> = sw.m_list.iter().flat_map(|&m| (0..sw.repeats).map(move |r| (m, r))).collect();
    let rows: Vec<ResultRow> = ctx
        .map(&jobs, |_, &(m, rep)| {
            let seed = ctx.cfg.eval.seed + rep as u64;
            let t = Instant::now();
            let r = egfim(&flow, &theta, m, seed, ctx.region(&flow))
                .and_then(|f| egcrb(&f))
                .and_then(|b| relative_error(&b.matrix, &ctx.spec.crb(&theta)?.bound));
            let wall_ms = ctx.elapsed_ms(t);
            match r {
                Ok(v) => ResultRow { wall_ms, ..ResultRow::ok(&ctx.cfg.id, &theta, "rel_error", v, m, seed) },
                Err(e) => ResultRow { wall_ms, ..ResultRow::failed(&ctx.cfg.id, &theta, m, seed, &status_of(&e)) },
            }
        });
    let path = ctx.out.join("sweep_m.csv");
    write_rows(&path, &rows)?;
    ctx.finish(manifest, vec![path])?;
    fail_if_any(&rows, "sweep-m")
}

fn sweep_theta(ctx: &Context) -> Result<Vec<f64>, CliError> {
    let k = ctx.spec.theta_dim();
    match &ctx.cfg.sweep.theta {
        Some(t) if t.len() == k => Ok(t.clone()),
        Some(t) => Err(CliError::config(format!("sweep.theta {t:?} needs {k} entries"))),
        None => {
            let b = ctx.spec.theta_box();
            Ok(b.lo.iter().zip(&b.hi).map(|(a, b)| 0.5 * (a + b)).collect())
        }
    }
}

pub fn cmd_sweep_dataset(ctx: &Context) -> Result<(), CliError> {
    let manifest = ctx.manifest("sweep-dataset");
    let sw = &ctx.cfg.sweep;
    if sw.sizes.is_empty() {
        return Err(CliError::config("sweep.sizes is empty"));
    }
    if let Some(&n) = sw.sizes.iter().find(|&&n| n == 0 || n > sw.max_size) {
        return Err(CliError::config(format!("sweep.sizes: {n} is outside 1..={}", sw.max_size)));
    }
    let grid = ctx.cfg.grid(&ctx.spec)?;
    let truth: Vec<_> = grid.iter().map(|t| ctx.spec.crb(t).map(|c| c.bound)).collect::<Result<_, _>>()?;
    let mut table = Vec::new();
    let mut failed = 0;
    for &n in &sw.sizes {
        let t = Instant::now();
        let tc = TrainConfig { dataset_size: n, epochs: sweep_epochs_for_size(n), ..ctx.cfg.train.clone() };
        log::info!("size {n}: {} epochs", tc.epochs);
        let (model, _) = train_model(&ctx.spec, &ctx.cfg, &tc)?;
        // common latents across the grid, as in mre_over_grid
        let errs = ctx.map(&grid, |i, theta| {
            egfim(&model, theta, sw.m, ctx.cfg.eval.seed, ctx.region(&model))
                .and_then(|f| egcrb(&f))
                .and_then(|b| relative_error(&b.matrix, &truth[i]))
        });
        let wall = ctx.elapsed_ms(t).to_string();
        let mut row = vec![n.to_string(), tc.epochs.to_string()];
        match errs.into_iter().collect::<Result<Vec<f64>, _>>() {
            Ok(e) => {
                let max = e.iter().copied().fold(0.0, f64::max);
                let mean = e.iter().sum::<f64>() / e.len() as f64;
                row.extend([fmt_f64(max), fmt_f64(mean), sw.m.to_string(), wall, "ok".into()]);
            }
            Err(e) => {
                failed += 1;
                row.extend([fmt_f64(f64::NAN), fmt_f64(f64::NAN), sw.m.to_string(), wall, status_of(&e)]);
            }
        }
        table.push(row);
    }
    let path = ctx.out.join("sweep_dataset.csv");
    write_table(&path, &["dataset_size", "epochs", "mre", "mean_re", "m", "wall_ms", "status"], &table)?;
    ctx.finish(manifest, vec![path])?;
    if failed > 0 {
        return Err(CliError::eval(format!("sweep-dataset: {failed} size(s) failed")));
    }
    Ok(())
}

pub fn cmd_edge_curves(ctx: &Context) -> Result<(), CliError> {
    let manifest = ctx.manifest("edge-curves");
    let ec = &ctx.cfg.edge;
    let edge = match &ctx.spec {
        ChannelSpec::EdgeWgn { edge, .. } | ChannelSpec::EdgeNlf { edge, .. } => edge.clone(),
        _ => return Err(CliError::config("edge-curves needs an edge channel")),
    };
    if ec.positions == 0 || ec.theta_w.is_empty() {
        return Err(CliError::config("edge: positions and theta_w must be nonempty"));
    }
    let flow = match ec.noise {
        NoiseModel::Flow => Some(ctx.flow()?),
        NoiseModel::Wgn if !matches!(ctx.spec, ChannelSpec::EdgeWgn { .. }) => {
            return Err(CliError::config("edge.noise = \"wgn\" needs an edge_wgn channel"))
        }
        NoiseModel::Nlf if !matches!(ctx.spec, ChannelSpec::EdgeNlf { .. }) => {
            return Err(CliError::config("edge.noise = \"nlf\" needs an edge_nlf channel"))
        }
        _ => None,
    };
    let last = (edge.h - 1) as f64;
    let mut points = Vec::new();
    for &w in &ec.theta_w {
        for i in 0..ec.positions {
            let p = if ec.positions == 1 { 0.0 } else { last * i as f64 / (ec.positions - 1) as f64 };
            points.push(vec![p, w]);
        }
    }
    let m = ctx.cfg.eval.m;
    let rows: Vec<ResultRow> = ctx
        .map(&points, |_, theta| {
            let seed = ctx.cfg.eval.seed;
            let t = Instant::now();
            let bound = match (&flow, &ctx.spec) {
                (Some(f), _) => egfim(f, theta, m, seed, ctx.region(f)).and_then(|fim| egcrb(&fim)).map(|b| b.matrix),
                (None, ChannelSpec::EdgeWgn { sigma, .. }) => edge_wgn_crb_matrix(&edge, *sigma, theta),
                (None, ChannelSpec::EdgeNlf { alpha, delta, .. }) => edge_nlf_crb_matrix(&edge, *alpha, *delta, theta),
                _ => unreachable!("checked above"),
            };
            let wall_ms = ctx.elapsed_ms(t);
            let m_col = if flow.is_some() { m } else { 0 };
            match bound {
                Ok(b) => [("var_position", b[(0, 0)]), ("var_width", b[(1, 1)]), ("pearson", pearson(&b))]
                    .into_iter()
                    .map(|(name, v)| ResultRow { wall_ms, ..ResultRow::ok(&ctx.cfg.id, theta, name, v, m_col, seed) })
                    .collect(),
                Err(e) => vec![ResultRow { wall_ms, ..ResultRow::failed(&ctx.cfg.id, theta, m_col, seed, &status_of(&e)) }],
            }
        })
        .into_iter()
        .flatten()
        .collect();
    let path = ctx.out.join("edge_curves.csv");
    write_rows(&path, &rows)?;
    ctx.finish(manifest, vec![path])?;
    fail_if_any(&rows, "edge-curves")
}

pub fn cmd_theorem1(ctx: &Context) -> Result<(), CliError> {
    let manifest = ctx.manifest("theorem1");
    if ctx.spec.dim() != 1 {
        return Err(CliError::config(format!(
            "theorem1 needs a one-dimensional measurement, the {} channel has {}",
            ctx.spec.name(),
            ctx.spec.dim()
        )));
    }
    let flow = ctx.flow()?;
    let grid = ctx.cfg.grid(&ctx.spec)?;
    let rows: Vec<ResultRow> = ctx
        .map(&grid, |_, theta| {
            let t = Instant::now();
            let r = numeric_fim(&ctx.spec, theta, FimMethod::QUADRATURE).and_then(|fim| {
                theorem1_report(&ctx.spec, &fim, &flow, theta, ctx.region(&flow), TheoryOptions::default())
            });
            let wall_ms = ctx.elapsed_ms(t);
            match r {
                Ok(rep) => {
                    let mut metrics = vec![
                        ("tv", rep.tv),
                        ("fisher_rel_info", rep.fisher_rel_info),
                        ("c_r", rep.c_r),
                        ("c_s", rep.c_s),
                        ("eta", rep.eta),
                        ("fim_gap", rep.fim_gap),
                        ("lambda_min", rep.lambda_min),
                        ("kappa", rep.kappa),
                    ];
                    if let (Some(a), Some(b)) = (rep.inv_norm_bound, rep.crb_error_bound) {
                        metrics.push(("inv_norm_bound", a));
                        metrics.push(("crb_error_bound", b));
                    }
                    metrics.push(("holds", if rep.holds { 1.0 } else { 0.0 }));
                    metrics
                        .into_iter()
                        .map(|(name, v)| ResultRow { wall_ms, ..ResultRow::ok(&ctx.cfg.id, theta, name, v, 0, 0) })
                        .collect()
                }
                Err(e) => vec![ResultRow { wall_ms, ..ResultRow::failed(&ctx.cfg.id, theta, 0, 0, &status_of(&e)) }],
            }
        })
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let path = ctx.out.join("theorem1.csv");
    write_rows(&path, &rows)?;
    ctx.finish(manifest, vec![path])?;
    fail_if_any(&rows, "theorem1")
}
