use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use riesz_core::dataset::{load_matrix_csv, read_header};
use riesz_core::estimators::{crossfit_estimates, psi_values, Estimate, EstimateRecord, Method, Need, Nuisances};
use riesz_core::experiments::{
    run_replications, write_metrics_csv, BhpSource, Dgp, ExperimentLearner, ExperimentReport, OracleTag,
};
use riesz_core::folds::{make_folds, FoldScheme};
use riesz_core::forest::RieszForestConfig;
use riesz_core::learners::{FittedModel, LearnerSpec};
use riesz_core::{Error, RngSeed};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{BhpSourceConfig, RunConfig};
use crate::{CliError, CommonArgs, ReportArgs};

const VERSION: &str = env!("CARGO_PKG_VERSION");

type CliResult<T> = std::result::Result<T, CliError>;

fn parse_methods(list: &[String]) -> CliResult<Vec<Method>> {
    list.iter()
        .map(|s| s.trim().parse::<Method>().map_err(CliError::from))
        .collect()
}

fn parse_scheme(s: &str) -> CliResult<FoldScheme> {
    Ok(s.parse::<FoldScheme>()?)
}

/// Keeps a configured learner when the flag names the same one.
fn override_learner(current: Option<&LearnerSpec>, name: &str) -> CliResult<LearnerSpec> {
    match current {
        Some(spec) if spec.name() == name => Ok(spec.clone()),
        _ => Ok(LearnerSpec::from_name(name)?),
    }
}

/// Config file plus flag overrides.
fn resolve(args: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.data {
        match cfg.data.as_mut() {
            Some(d) => d.path = Some(p.clone()),
            None => return Err(CliError::Config("--data needs a [data] section naming the treatment kind".into())),
        }
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.threads.is_some() {
        cfg.threads = args.threads;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    if let Some(m) = &args.method {
        cfg.estimate.methods = parse_methods(m)?;
    }
    if let Some(s) = &args.scheme {
        cfg.estimate.scheme = parse_scheme(s)?;
    }
    if let Some(name) = &args.learner {
        if name != "oracle" {
            cfg.learner = Some(override_learner(cfg.learner.as_ref(), name)?);
        }
    }
    init_threads(cfg.threads)?;
    Ok(cfg)
}

fn init_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    Ok(dir)
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(v).expect("output serializes");
    s.push('\n');
    fs::write(path, s).map_err(|e| io_error(path, e))
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(Error::Format(format!("{}: {e}", path.display()))))
}

fn config_value(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// On-disk form of `fit` output.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelOutput {
    version: String,
    seed: u64,
    config: Value,
    model: Value,
}

pub fn fit(args: &CommonArgs) -> CliResult<()> {
    let cfg = resolve(args)?;
    let data = cfg.load_data()?;
    let moment = cfg.moment()?;
    moment.check_dataset(&data)?;
    let spec = cfg.learner()?;
    let seed = RngSeed(cfg.seed);
    log::info!("fitting {} on {} rows, {} covariates", spec.name(), data.n(), data.d());
    let model = spec.fit_model(&data, &moment, Need::Both, seed)?;
    let dir = out_dir(&cfg)?;
    let history = match &model {
        FittedModel::Riesznet(net) => serde_json::to_value(&net.history).expect("history serializes"),
        _ => Value::Array(Vec::new()),
    };
    write_json(
        &dir.join("model.json"),
        &ModelOutput {
            version: VERSION.into(),
            seed: cfg.seed,
            config: config_value(&cfg),
            model: model.to_value(),
        },
    )?;
    write_json(
        &dir.join("training_log.json"),
        &json!({
            "version": VERSION,
            "seed": cfg.seed,
            "learner": spec.name(),
            "n": data.n(),
            "d": data.d(),
            "epochs": history,
        }),
    )?;
    println!("wrote {}", dir.join("model.json").display());
    Ok(())
}

fn load_model(path: &Path) -> CliResult<FittedModel> {
    let out: ModelOutput = serde_json::from_value(read_json(path)?)
        .map_err(|e| CliError::Core(Error::Format(format!("{}: {e}", path.display()))))?;
    Ok(FittedModel::from_value(out.model)?)
}

pub fn estimate(args: &CommonArgs) -> CliResult<()> {
    let mut cfg = resolve(args)?;
    let data = cfg.load_data()?;
    let moment = cfg.moment()?;
    moment.check_dataset(&data)?;
    let methods = cfg.estimate.methods.clone();
    if methods.is_empty() {
        return Err(CliError::Config("no estimation methods requested".into()));
    }
    let level = cfg.estimate.level;
    let estimates: Vec<Estimate> = match cfg.estimate.model.clone() {
        Some(path) => {
            if cfg.estimate.scheme != FoldScheme::None {
                log::info!("a stored model is evaluated on the full sample; using scheme none");
                cfg.estimate.scheme = FoldScheme::None;
            }
            let model = load_model(&path)?;
            let fitted = model.as_fitted();
            let g = fitted.regression();
            let alpha = fitted.riesz();
            methods
                .iter()
                .map(|&m| {
                    let psi = psi_values(m, g.as_deref(), alpha.as_deref(), &moment, &data)?;
                    Ok(Estimate::from_psi(m, psi, level)?)
                })
                .collect::<CliResult<_>>()?
        }
        None => {
            let learner = cfg.learner()?.build();
            let scheme = cfg.estimate.scheme;
            let folds = make_folds(data.n(), scheme, cfg.estimate.k, RngSeed(cfg.seed).derive(1))?;
            let nuisances = if scheme == FoldScheme::Double {
                Nuisances::Separate {
                    regression: &*learner,
                    riesz: &*learner,
                }
            } else {
                Nuisances::Joint(&*learner)
            };
            crossfit_estimates(&data, nuisances, &moment, &folds, &methods, RngSeed(cfg.seed).derive(2))?
                .into_iter()
                .map(|e| Estimate::from_psi(e.method, e.psi, level))
                .collect::<riesz_core::Result<_>>()?
        }
    };
    let scheme = cfg.estimate.scheme;
    let records: Vec<EstimateRecord> = estimates.iter().map(|e| e.record(scheme, RngSeed(cfg.seed))).collect();
    let dir = out_dir(&cfg)?;
    write_json(
        &dir.join("estimates.json"),
        &json!({
            "version": VERSION,
            "seed": cfg.seed,
            "config": config_value(&cfg),
            "estimates": records,
        }),
    )?;
    write_psi(&dir.join("psi.csv"), &estimates)?;
    for r in &records {
        println!(
            "{:<14} theta={:.6} se={:.6} ci=[{:.6}, {:.6}] n={}",
            r.method.to_string(),
            r.theta,
            r.se,
            r.ci[0],
            r.ci[1],
            r.n
        );
    }
    Ok(())
}

fn write_psi(path: &Path, estimates: &[Estimate]) -> CliResult<()> {
    let mut s = String::from("row");
    for e in estimates {
        s.push(',');
        s.push_str(&e.method.to_string());
    }
    s.push('\n');
    let n = estimates.first().map_or(0, |e| e.psi.len());
    for i in 0..n {
        s.push_str(&i.to_string());
        for e in estimates {
            s.push(',');
            s.push_str(&e.psi[i].to_string());
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| io_error(path, e))
}

fn load_bhp_source(sc: &BhpSourceConfig, seed: RngSeed) -> CliResult<BhpSource> {
    let reserved: Vec<&String> = [&sc.t, &sc.mu, &sc.sigma2].into_iter().flatten().collect();
    let x_cols = if sc.x.is_empty() {
        read_header(&sc.path)?.into_iter().filter(|c| !reserved.contains(&c)).collect()
    } else {
        sc.x.clone()
    };
    let (_, x) = load_matrix_csv(&sc.path, &x_cols)?;
    let column = |name: &String| -> CliResult<Vec<f64>> {
        let (_, m) = load_matrix_csv(&sc.path, std::slice::from_ref(name))?;
        Ok(m.column(0).to_vec())
    };
    match (&sc.mu, &sc.sigma2, &sc.t) {
        (Some(mu), Some(s2), _) => Ok(BhpSource::new(x, column(mu)?, column(s2)?)?),
        (None, None, Some(t)) => {
            let forest = RieszForestConfig {
                seed,
                ..RieszForestConfig::default()
            };
            Ok(BhpSource::fit(x, &column(t)?, &forest)?)
        }
        _ => Err(CliError::Config(
            "bhp_source needs both mu and sigma2 columns, or a treatment column t".into(),
        )),
    }
}

/// On-disk form of `experiment` output.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportOutput {
    version: String,
    seed: u64,
    config: Value,
    report: ExperimentReport,
}

pub fn experiment(args: &CommonArgs) -> CliResult<()> {
    let mut cfg = resolve(args)?;
    let exp = cfg
        .experiment
        .as_mut()
        .ok_or_else(|| CliError::Config("an [experiment] section is required".into()))?;
    if let Some(s) = args.seed {
        exp.base_seed = s;
    }
    if let Some(m) = &args.method {
        exp.methods = parse_methods(m)?;
    }
    if let Some(s) = &args.scheme {
        exp.scheme = parse_scheme(s)?;
    }
    if let Some(name) = &args.learner {
        exp.learner = if name == "oracle" {
            ExperimentLearner::Oracle(OracleTag::Oracle)
        } else {
            let current = match &exp.learner {
                ExperimentLearner::Fitted(s) => Some(s),
                ExperimentLearner::Oracle(_) => None,
            };
            ExperimentLearner::Fitted(override_learner(current, name)?)
        };
    }
    exp.validate()?;
    let exp = exp.clone();
    let source = match &cfg.bhp_source {
        Some(sc) => Some(Arc::new(load_bhp_source(sc, RngSeed(cfg.seed).derive(3))?)),
        None => None,
    };
    let dgp = Dgp::with_source(exp.dgp.clone(), source)?;
    let report = run_replications(&exp, &dgp)?;
    let dir = out_dir(&cfg)?;
    report.write_metrics_csv(dir.join("metrics.csv"))?;
    write_json(
        &dir.join("report.json"),
        &ReportOutput {
            version: VERSION.into(),
            seed: exp.base_seed,
            config: config_value(&cfg),
            report: report.clone(),
        },
    )?;
    println!("theta_true = {:.6}", report.theta_true);
    println!("{:<14} {:>10} {:>10} {:>10} {:>10} {:>6}", "method", "bias", "rmse", "mae", "coverage", "reps");
    for r in &report.rows {
        println!(
            "{:<14} {:>10.5} {:>10.5} {:>10.5} {:>10.3} {:>6}",
            r.method.to_string(),
            r.bias,
            r.rmse,
            r.mae,
            r.coverage,
            r.n_reps
        );
    }
    if report.failures > 0 {
        println!("{} of {} replications failed", report.failures, exp.n_reps);
    }
    Ok(())
}

pub fn report(args: &ReportArgs) -> CliResult<()> {
    if args.bins == 0 {
        return Err(CliError::Config("--bins must be at least 1".into()));
    }
    let value = read_json(&args.input)?;
    let dir = args.out.clone().unwrap_or_else(|| {
        args.input
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    if value.get("report").is_some() {
        let out: ReportOutput = serde_json::from_value(value)
            .map_err(|e| CliError::Core(Error::Format(format!("{}: {e}", args.input.display()))))?;
        render_report(&out.report, &dir, args.bins)
    } else if value.get("estimates").is_some() {
        let records: Vec<EstimateRecord> = serde_json::from_value(value["estimates"].clone())
            .map_err(|e| CliError::Core(Error::Format(format!("{}: {e}", args.input.display()))))?;
        let path = dir.join("estimates.csv");
        let mut s = String::from("method,theta,se,ci_lo,ci_hi,n,scheme,seed\n");
        for r in &records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.method, r.theta, r.se, r.ci[0], r.ci[1], r.n, r.scheme, r.seed.0
            ));
        }
        fs::write(&path, s).map_err(|e| io_error(&path, e))?;
        println!("wrote {}", path.display());
        Ok(())
    } else {
        Err(CliError::Core(Error::Format(format!(
            "{}: neither an experiment report nor an estimates file",
            args.input.display()
        ))))
    }
}

fn render_report(report: &ExperimentReport, dir: &Path, bins: usize) -> CliResult<()> {
    write_metrics_csv(&report.rows, dir.join("metrics.csv"))?;
    let path = dir.join("replications.csv");
    let mut s = String::from("rep,seed,method,theta,se,ci_lo,ci_hi,theta_true,error\n");
    for r in &report.replications {
        if let Some(err) = &r.error {
            s.push_str(&format!("{},{},,,,,,{},\"{}\"\n", r.rep, r.seed, r.theta_true, err.replace('"', "'")));
        }
        for e in &r.estimates {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},\n",
                r.rep, r.seed, e.method, e.theta, e.se, e.ci_lo, e.ci_hi, r.theta_true
            ));
        }
    }
    fs::write(&path, s).map_err(|e| io_error(&path, e))?;
    for m in report.rows.iter().map(|r| r.method) {
        let errors: Vec<f64> = report
            .replications
            .iter()
            .flat_map(|r| r.estimates.iter().filter(|e| e.method == m).map(move |e| e.theta - r.theta_true))
            .collect();
        let path = dir.join(format!("histogram_{m}.csv"));
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (lo, hi, c) in histogram(&errors, bins) {
            s.push_str(&format!("{lo},{hi},{c}\n"));
        }
        fs::write(&path, s).map_err(|e| io_error(&path, e))?;
    }
    println!("wrote tables to {}", dir.display());
    Ok(())
}

/// Equal-width bins over the data range; the last bin is closed.
pub(crate) fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}
