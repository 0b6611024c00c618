use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hsdm::data::{ingest_csv, write_csv, CsvSchema, DaySeries, Session};
use hsdm::diagnostics::{self, compare_models, diagnose_run, histogram, qq_points, RunDiagnostics};
use hsdm::pipeline::{self, consecutive_pairs, ModelKind, PairConfig, PairResult, SmoothingStudy};
use hsdm::prediction::{read_runs, write_runs, PredictionRun};
use hsdm::simulator::{bimodal_scenario, simulate, write_truth_csv, ScenarioSpec};
use hsdm::trend::TrendUpdate;
use hsdm::{FittedModel, HsdmOptions};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser, Serialize)]
#[command(name = "hsdm", version, about = "Fit, predict and evaluate duration models on event streams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Simulate days from a scenario file (or the built-in bimodal scenario).
    Simulate(SimulateArgs),
    /// Fit one model on one day and write a model bundle.
    Fit(FitArgs),
    /// Predict a day with a fitted bundle.
    Predict(PredictArgs),
    /// Residual diagnostics of a predictions file.
    Diagnose(DiagnoseArgs),
    /// Fit and predict every consecutive pair of days with several models.
    Compare(CompareArgs),
    /// Sensitivity of test log-likelihoods to the smoothing draws.
    SmoothingStudy(SmoothingArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelArg {
    Hsdm,
    Eacd,
    Sacd,
    Efiacd,
    Sfiacd,
}

impl ModelArg {
    fn kind(self) -> ModelKind {
        use hsdm::BenchmarkKind as B;
        match self {
            Self::Hsdm => ModelKind::Hsdm,
            Self::Eacd => ModelKind::Benchmark(B::EAcd),
            Self::Sacd => ModelKind::Benchmark(B::SAcd),
            Self::Efiacd => ModelKind::Benchmark(B::EFiacd),
            Self::Sfiacd => ModelKind::Benchmark(B::SFiacd),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateArg {
    Lse,
    Pm,
    Frozen,
}

impl From<UpdateArg> for TrendUpdate {
    fn from(u: UpdateArg) -> Self {
        match u {
            UpdateArg::Lse => TrendUpdate::Lse,
            UpdateArg::Pm => TrendUpdate::Pm,
            UpdateArg::Frozen => TrendUpdate::Frozen,
        }
    }
}

/// Model settings shared by every fitting command.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelFlags {
    /// Root seed for smoothing draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Penalty weight of the online trend update.
    #[arg(long, default_value_t = hsdm::model::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = UpdateArg::Lse)]
    pub trend_update: UpdateArg,
    /// Largest AR order searched by BIC.
    #[arg(long, default_value_t = 3)]
    pub pmax: usize,
    /// Largest MA order searched by BIC.
    #[arg(long, default_value_t = 3)]
    pub qmax: usize,
    /// Number of |BPI| lags used as ARFIMA regressors (0, 1 or 2).
    #[arg(long, default_value_t = 0)]
    pub bpi_lags: usize,
    /// Drop the intraday trend stage.
    #[arg(long)]
    pub no_trend: bool,
    /// Drop the ARFIMA stage.
    #[arg(long)]
    pub no_arfima: bool,
    /// Alternate trend and ARFIMA fits on the joint likelihood.
    #[arg(long)]
    pub joint_refit: bool,
}

impl ModelFlags {
    fn options(&self) -> Result<HsdmOptions> {
        let o = HsdmOptions {
            use_trend: !self.no_trend,
            use_arfima: !self.no_arfima,
            p_max: self.pmax,
            q_max: self.qmax,
            bpi_lags: self.bpi_lags,
            joint_refit: self.joint_refit,
            ..HsdmOptions::default()
        };
        o.validate()?;
        if !(self.lambda > 0.0) {
            bail!("--lambda must be positive");
        }
        Ok(o)
    }

    fn pair_config(&self, models: Vec<ModelKind>) -> Result<PairConfig> {
        Ok(PairConfig {
            seed: self.seed,
            options: self.options()?,
            update: self.trend_update.into(),
            lambda: self.lambda,
            models,
        })
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario file (TOML). Without it the built-in bimodal scenario is used.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Days of the built-in scenario.
    #[arg(long, default_value_t = 2)]
    pub days: usize,
    /// Events per day of the built-in scenario.
    #[arg(long, default_value_t = 10_000)]
    pub events: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Event CSV file.
    #[arg(long)]
    pub input: PathBuf,
    /// Day label to train on (default: the first day).
    #[arg(long)]
    pub day: Option<String>,
    #[arg(long, value_enum, default_value_t = ModelArg::Hsdm)]
    pub model: ModelArg,
    #[command(flatten)]
    pub flags: ModelFlags,
    /// Bundle directory to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    /// Model bundle directory.
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Day label to predict (default: the day after the training day, or the
    /// first day if the training day is not in the file).
    #[arg(long)]
    pub day: Option<String>,
    /// Root seed for smoothing draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = hsdm::model::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = UpdateArg::Lse)]
    pub trend_update: UpdateArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    /// Predictions CSV.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Events skipped at the start of each run.
    #[arg(long, default_value_t = 0)]
    pub burn_in: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Models to compare (default: all five).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub model: Vec<ModelArg>,
    #[command(flatten)]
    pub flags: ModelFlags,
    #[arg(long, default_value_t = 0)]
    pub burn_in: usize,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SmoothingArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Smoothing draws per pair, including the standard one.
    #[arg(long, default_value_t = 3)]
    pub replicates: usize,
    #[command(flatten)]
    pub flags: ModelFlags,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Echo of the configuration and fitted choices of a run.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a Command,
    decisions: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn write_manifest(out: &Path, command: &Command, decisions: BTreeMap<String, String>, outputs: &[&str]) -> Result<()> {
    write_manifest_as(out, "manifest.json", command, decisions, outputs)
}

fn write_manifest_as(
    out: &Path,
    name: &str,
    command: &Command,
    decisions: BTreeMap<String, String>,
    outputs: &[&str],
) -> Result<()> {
    let m = Manifest {
        tool: "hsdm",
        version: env!("CARGO_PKG_VERSION"),
        command,
        decisions,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&m)? + "\n";
    std::fs::write(out.join(name), text).with_context(|| format!("writing {name}"))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_days(path: &Path) -> Result<Vec<DaySeries>> {
    let ingested = ingest_csv(path, &CsvSchema::default(), Session::default())
        .with_context(|| format!("reading {}", path.display()))?;
    for issue in &ingested.issues {
        log::warn!("{}:{}: skipped row: {}", path.display(), issue.line, issue.reason);
    }
    if ingested.days.is_empty() {
        bail!("{} holds no days", path.display());
    }
    Ok(ingested.days)
}

fn find_day<'a>(days: &'a [DaySeries], label: &str) -> Result<&'a DaySeries> {
    days.iter()
        .find(|d| d.date_label == label)
        .ok_or_else(|| anyhow!("day '{label}' not found; available: {}", labels(days)))
}

fn labels(days: &[DaySeries]) -> String {
    days.iter().map(|d| d.date_label.as_str()).collect::<Vec<_>>().join(", ")
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cmd = &cli.command;
    match cmd {
        Command::Simulate(a) => simulate_cmd(cmd, a),
        Command::Fit(a) => fit_cmd(cmd, a),
        Command::Predict(a) => predict_cmd(cmd, a),
        Command::Diagnose(a) => diagnose_cmd(cmd, a),
        Command::Compare(a) => compare_cmd(cmd, a),
        Command::SmoothingStudy(a) => smoothing_cmd(cmd, a),
    }
}

fn simulate_cmd(cmd: &Command, a: &SimulateArgs) -> Result<()> {
    let mut spec = match &a.scenario {
        Some(path) => ScenarioSpec::from_toml_str(
            &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => bimodal_scenario(a.seed.unwrap_or(0), a.days, a.events),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let sims = simulate(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    let days: Vec<DaySeries> = sims.iter().map(|s| s.day.clone()).collect();
    write_csv(&days, create(&a.out.join("events.csv"))?, true)?;
    let truths: Vec<_> = sims.into_iter().map(|s| s.truth).collect();
    write_truth_csv(&truths, create(&a.out.join("truth.csv"))?)?;
    std::fs::write(a.out.join("scenario.toml"), spec.to_toml_string()?)?;
    let mut decisions = BTreeMap::new();
    decisions.insert("seed".into(), spec.seed.to_string());
    decisions.insert("days".into(), spec.days.to_string());
    decisions.insert("events_per_day".into(), spec.events_per_day.to_string());
    write_manifest(&a.out, cmd, decisions, &["events.csv", "truth.csv", "scenario.toml"])
}

fn fit_cmd(cmd: &Command, a: &FitArgs) -> Result<()> {
    let days = load_days(&a.input)?;
    let day = match &a.day {
        Some(label) => find_day(&days, label)?,
        None => &days[0],
    };
    let options = a.flags.options()?;
    let train = pipeline::smooth(day, a.flags.seed, 0)?;
    let model = pipeline::fit_model(a.model.kind(), &train, &options)?;
    let manifest = model.save(&a.out, day.day_start_ms, day.day_end_ms)?;
    // The bundle's own manifest.json describes the model; the run echo sits beside it.
    write_manifest_as(&a.out, "run.json", cmd, manifest.decisions.clone(), &manifest.components.iter().map(String::as_str).collect::<Vec<_>>())
}

fn predict_cmd(cmd: &Command, a: &PredictArgs) -> Result<()> {
    let (manifest, model) =
        FittedModel::load(&a.bundle).with_context(|| format!("loading bundle {}", a.bundle.display()))?;
    let days = load_days(&a.input)?;
    let day = match &a.day {
        Some(label) => find_day(&days, label)?,
        None => match days.iter().position(|d| d.date_label == manifest.train_label) {
            Some(k) if k + 1 < days.len() => &days[k + 1],
            Some(_) => bail!("training day '{}' is the last day; pass --day", manifest.train_label),
            None => &days[0],
        },
    };
    if !(a.lambda > 0.0) {
        bail!("--lambda must be positive");
    }
    let test = pipeline::smooth(day, a.seed, 0)?;
    let run = model.predict_day(&test, a.trend_update.into(), a.lambda)?;
    std::fs::create_dir_all(&a.out)?;
    run.write_csv(create(&a.out.join("predictions.csv"))?)?;
    let mut decisions = manifest.decisions.clone();
    decisions.insert("model".into(), manifest.model.clone());
    decisions.insert("train_day".into(), manifest.train_label.clone());
    decisions.insert("test_day".into(), day.date_label.clone());
    decisions.insert("total_log_likelihood".into(), run.total_loglik().to_string());
    write_manifest(&a.out, cmd, decisions, &["predictions.csv"])
}

/// Residual report, plot data and (with several models) the comparison table.
fn write_evaluation(out: &Path, runs: &[PredictionRun], burn_in: usize) -> Result<Vec<&'static str>> {
    let rows: Vec<RunDiagnostics> = runs
        .iter()
        .map(|r| diagnose_run(r, burn_in).with_context(|| format!("diagnosing {} on {}", r.model, r.date_label)))
        .collect::<Result<_>>()?;
    diagnostics::write_report(&rows, create(&out.join("report.csv"))?)?;
    let mut series = Vec::new();
    for r in runs {
        let c: Vec<f64> = r.after(burn_in).iter().map(|x| x.residual).collect();
        series.push((format!("qq:{}:{}", r.model, r.date_label), qq_points(&c)));
    }
    let mut outputs = vec!["report.csv", "plot_data.csv"];
    let models: std::collections::BTreeSet<&str> = runs.iter().map(|r| r.model.as_str()).collect();
    if models.len() > 1 && models.contains("HSDM") {
        let cmp = compare_models(runs, "HSDM")?;
        cmp.write_table(create(&out.join("comparison.csv"))?)?;
        cmp.write_differences(create(&out.join("differences.csv"))?)?;
        for d in &cmp.differences {
            let hist = histogram(&d.differences, 50).into_iter().map(|(x, c)| (x, c as f64)).collect();
            series.push((format!("diff:{}-{}:{}", d.model, d.baseline, d.date_label), hist));
        }
        outputs.extend(["comparison.csv", "differences.csv"]);
    }
    diagnostics::write_plot_data(&series, create(&out.join("plot_data.csv"))?)?;
    Ok(outputs)
}

fn diagnose_cmd(cmd: &Command, a: &DiagnoseArgs) -> Result<()> {
    let file = File::open(&a.predictions).with_context(|| format!("opening {}", a.predictions.display()))?;
    let runs = read_runs(std::io::BufReader::new(file))?;
    if runs.is_empty() {
        bail!("{} holds no predictions", a.predictions.display());
    }
    std::fs::create_dir_all(&a.out)?;
    let outputs = write_evaluation(&a.out, &runs, a.burn_in)?;
    let mut decisions = BTreeMap::new();
    decisions.insert("burn_in".into(), a.burn_in.to_string());
    write_manifest(&a.out, cmd, decisions, &outputs)
}

fn pair_decisions(decisions: &mut BTreeMap<String, String>, res: &PairResult) {
    for m in &res.models {
        let prefix = format!("{}/{}", res.test_label, m.name());
        if let Ok((bm, _)) = m.to_parts(0, 1) {
            for (k, v) in bm.decisions {
                decisions.insert(format!("{prefix}/{k}"), v);
            }
        }
    }
}

fn compare_cmd(cmd: &Command, a: &CompareArgs) -> Result<()> {
    let days = load_days(&a.input)?;
    if days.len() < 2 {
        bail!("compare needs at least two days; {} has {}", a.input.display(), days.len());
    }
    let models = if a.model.is_empty() { ModelKind::ALL.to_vec() } else { a.model.iter().map(|m| m.kind()).collect() };
    let config = a.flags.pair_config(models)?;
    let pairs = consecutive_pairs(days.len());
    let results: Vec<PairResult> = pool(a.threads)?.install(|| {
        pairs
            .par_iter()
            .map(|&(i, j)| {
                pipeline::run_pair(&days[i], &days[j], &config)
                    .with_context(|| format!("pair {} -> {}", days[i].date_label, days[j].date_label))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    std::fs::create_dir_all(&a.out)?;
    let runs: Vec<PredictionRun> = results.iter().flat_map(|r| r.runs.iter().cloned()).collect();
    write_runs(&runs, create(&a.out.join("predictions.csv"))?)?;
    let mut outputs = vec!["predictions.csv"];
    outputs.extend(write_evaluation(&a.out, &runs, a.burn_in)?);
    let mut decisions = BTreeMap::new();
    decisions.insert("lambda".into(), config.lambda.to_string());
    decisions.insert("trend_update".into(), format!("{:?}", config.update).to_lowercase());
    decisions.insert("pairs".into(), pairs.len().to_string());
    for r in &results {
        pair_decisions(&mut decisions, r);
    }
    write_manifest(&a.out, cmd, decisions, &outputs)
}

fn smoothing_cmd(cmd: &Command, a: &SmoothingArgs) -> Result<()> {
    let days = load_days(&a.input)?;
    if days.len() < 2 {
        bail!("smoothing-study needs at least two days");
    }
    let config = a.flags.pair_config(Vec::new())?;
    let pairs = consecutive_pairs(days.len());
    let studies: Vec<SmoothingStudy> = pool(a.threads)?.install(|| {
        pairs
            .par_iter()
            .map(|&(i, j)| pipeline::smoothing_study(&days[i], &days[j], &config, a.replicates).map_err(Into::into))
            .collect::<Result<Vec<_>>>()
    })?;
    std::fs::create_dir_all(&a.out)?;
    let mut w = csv::Writer::from_writer(create(&a.out.join("smoothing.csv"))?);
    let mut header = vec!["train_date".to_string(), "test_date".into(), "model".into()];
    header.extend((0..a.replicates).map(|r| format!("pll_{r}")));
    header.push("ratio".into());
    w.write_record(&header)?;
    for s in &studies {
        for (name, lls, ratio) in [("HSDM", &s.hsdm, s.ratio_hsdm), ("sFIACD", &s.sfiacd, s.ratio_sfiacd)] {
            let mut rec = vec![s.train_label.clone(), s.test_label.clone(), name.to_string()];
            rec.extend(lls.iter().map(|v| v.to_string()));
            rec.push(ratio.map(|v| v.to_string()).unwrap_or_else(|| "undefined".into()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    let mean = |f: fn(&SmoothingStudy) -> Option<f64>| {
        let v: Vec<f64> = studies.iter().filter_map(f).collect();
        if v.is_empty() { "undefined".to_string() } else { (v.iter().sum::<f64>() / v.len() as f64).to_string() }
    };
    let mut decisions = BTreeMap::new();
    decisions.insert("replicates".into(), a.replicates.to_string());
    decisions.insert("mean_ratio_hsdm".into(), mean(|s| s.ratio_hsdm));
    decisions.insert("mean_ratio_sfiacd".into(), mean(|s| s.ratio_sfiacd));
    write_manifest(&a.out, cmd, decisions, &["smoothing.csv"])
}
