use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rptq::bits::BitConfig;
use rptq::bundle::{self, CalibrationMeta, PlanMeta};
use rptq::memmodel::{self, ByteUnit, DynamicCalibration};
use rptq::pipeline::{self, Calibrated, ReorderSite, RunConfig, RunReportBase};
use rptq::qtransformer::{build_toy_model, calibrate, plan_model, quantize_model, ClusterCounts, Site};
use rptq::strategy::grouping_strategies;
use rptq::Error;

#[derive(Parser)]
#[command(name = "rptq", version, about = "Reorder-based post-training quantization on a toy decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the toy model bundle.
    Init(Common),
    /// Run the full-precision model on synthetic data and record statistics.
    Calibrate(Common),
    /// Cluster channels at every reorder site.
    Plan(Common),
    /// Fuse the plans and quantize weights and activation parameters.
    Quantize(Common),
    /// Evaluate the quantized bundle against the full-precision model.
    Run(Common),
    /// init, calibrate, plan, quantize and run in one go.
    Pipeline(Common),
    /// Sweep the cluster count of each reorder site, others held fixed.
    Ablate(AblateArgs),
    /// Inference memory estimates for OPT-shaped models.
    Memest(MemestArgs),
    /// Print one site's calibration statistics as CSV.
    StatsDump(StatsDumpArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON file with RunConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Working directory holding every stage's artifacts.
    #[arg(long, default_value = "rptq-out")]
    out: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    /// Cluster counts r1,r2,r3,r4,r5.
    #[arg(long)]
    clusters: Option<String>,
    /// Weight quantizer: rtn or gptq.
    #[arg(long)]
    weights: Option<String>,
    /// Linear forward path: dequant or integer.
    #[arg(long)]
    forward: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "R1,R2,R3,R4,R5")]
    sites: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,32")]
    sweep: Vec<usize>,
}

#[derive(Args)]
struct MemestArgs {
    /// JSON list of model shapes; the built-in OPT family otherwise.
    #[arg(long)]
    shapes: Option<PathBuf>,
    /// Restrict to these model names.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "W16A16,W4A16,W4A8,W4A4,W4A4KV,W4A3KV,W3A3KV")]
    modes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,64")]
    batches: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2048,4096,8192")]
    seqlens: Vec<usize>,
    /// Append weight/KV/dynamic shares of the total.
    #[arg(long)]
    proportions: bool,
    /// Compare against the built-in published table instead of sweeping.
    #[arg(long, conflicts_with_all = ["models", "proportions"])]
    golden: bool,
    /// Decimal gigabytes instead of the calibrated unit.
    #[arg(long)]
    decimal: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsDumpArgs {
    #[arg(long, default_value = "rptq-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// ln1_out, q, k, v, attn_out, ln2_out or fc1_out.
    #[arg(long)]
    site: String,
}

/// Exit status 1: the request itself is invalid. Status 2: the run failed.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::UnknownStrategy { .. } | Error::MissingArtifact(_) | Error::Json(_) => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    kind: &'a str,
    message: &'a str,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(Failure::Validation(e.render().to_string().trim().to_string())),
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let (kind, message, code) = match &f {
        Failure::Validation(m) => ("validation", m.as_str(), 1),
        Failure::Runtime(m) => ("runtime", m.as_str(), 2),
    };
    eprintln!("{}", serde_json::to_string(&ErrorReport { kind, message }).unwrap());
    ExitCode::from(code)
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Init(c) => init(&c),
        Command::Calibrate(c) => calibrate_stage(&c),
        Command::Plan(c) => plan_stage(&c),
        Command::Quantize(c) => quantize_stage(&c),
        Command::Run(c) => run_stage(&c),
        Command::Pipeline(c) => {
            init(&c)?;
            calibrate_stage(&c)?;
            plan_stage(&c)?;
            quantize_stage(&c)?;
            run_stage(&c)
        }
        Command::Ablate(a) => ablate(&a),
        Command::Memest(m) => memest(&m),
        Command::StatsDump(s) => stats_dump(&s),
    }
}

fn resolve(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| invalid(format!("config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = &c.mode {
        cfg.mode = m.clone();
    }
    if let Some(k) = &c.clusters {
        cfg.clusters = k.parse::<ClusterCounts>()?;
    }
    if let Some(w) = &c.weights {
        cfg.weights = w.clone();
    }
    if let Some(f) = &c.forward {
        cfg.forward = f.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Config with model shape and seed taken from the existing model bundle.
fn resolve_with_model(c: &Common) -> CliResult<(RunConfig, rptq::qtransformer::ToyModel)> {
    let mut cfg = resolve(c)?;
    let (model, mc) = bundle::load_model(&c.out)?;
    cfg.dims = mc.dims;
    cfg.model_seed = mc.model_seed;
    Ok((cfg, model))
}

fn init(c: &Common) -> CliResult<()> {
    let cfg = resolve(c)?;
    fs::create_dir_all(&c.out)?;
    let model = build_toy_model(cfg.model_seed, cfg.dims)?;
    bundle::save_model(&c.out, &model, cfg.model_seed)?;
    println!("model written to {}", c.out.join(bundle::MODEL_DIR).display());
    Ok(())
}

fn calibrate_stage(c: &Common) -> CliResult<()> {
    let (cfg, model) = resolve_with_model(c)?;
    let calib = calibrate(&model, &cfg.calibration_inputs()?)?;
    let meta = CalibrationMeta {
        samples: cfg.calib_samples,
        tokens: cfg.calib_tokens,
        seed: cfg.seed,
        layers: cfg.dims.layers,
    };
    bundle::save_calibration(&c.out, &cfg.dims, &calib, &meta)?;
    println!("calibration statistics for {} samples written to {}", cfg.calib_samples, c.out.join(bundle::CALIB_DIR).display());
    Ok(())
}

fn load_calibrated(c: &Common) -> CliResult<(RunConfig, Calibrated)> {
    let (cfg, model) = resolve_with_model(c)?;
    let (calib, meta) = bundle::load_calibration(&c.out)?;
    if meta.layers != cfg.dims.layers {
        return Err(invalid(format!(
            "calibration covers {} layers but the model has {}; rerun calibrate",
            meta.layers, cfg.dims.layers
        )));
    }
    Ok((cfg, Calibrated { model, calib }))
}

fn plan_stage(c: &Common) -> CliResult<()> {
    let (cfg, cal) = load_calibrated(c)?;
    let grouping = grouping_strategies().get(&cfg.grouping)?;
    let plans = plan_model(&cal.calib, &cfg.dims, &cfg.clusters, grouping.as_ref(), cfg.seed)?;
    let meta = PlanMeta {
        clusters: cfg.clusters,
        grouping: cfg.grouping.clone(),
        seed: cfg.seed,
        layers: plans.len(),
    };
    bundle::save_plans(&c.out, &plans, &meta)?;
    println!("plans with clusters {} written to {}", cfg.clusters, c.out.join(bundle::PLAN_DIR).display());
    Ok(())
}

fn quantize_stage(c: &Common) -> CliResult<()> {
    let (cfg, cal) = load_calibrated(c)?;
    let (plans, _) = bundle::load_plans(&c.out)?;
    if plans.len() != cfg.dims.layers {
        return Err(invalid(format!("{} plans for {} layers; rerun plan", plans.len(), cfg.dims.layers)));
    }
    let opts = cfg.quantize_options()?;
    let q = quantize_model(&cal.model, &cal.calib, &plans, &opts)?;
    bundle::save_quantized(&c.out, &q, &opts)?;
    println!("{} bundle written to {}", opts.bits, c.out.join(bundle::QUANT_DIR).display());
    Ok(())
}

fn run_stage(c: &Common) -> CliResult<()> {
    let (cfg, model) = resolve_with_model(c)?;
    let (q, opts) = bundle::load_quantized(&c.out)?;
    let (_, plan_meta) = bundle::load_plans(&c.out)?;
    if q.dims != cfg.dims {
        return Err(invalid("quantized bundle does not match the model; rerun quantize"));
    }
    let base = RunReportBase {
        mode: opts.bits.tag(),
        clusters: plan_meta.clusters,
        weights: opts.weights.clone(),
        forward: opts.forward.clone(),
    };
    let report = pipeline::evaluate(&model, &q, &cfg.eval_inputs()?, base)?;
    let path = c.out.join("report.json");
    bundle::write_json(&path, &report)?;
    print!("{}", fs::read_to_string(&path)?);
    Ok(())
}

fn ablate(a: &AblateArgs) -> CliResult<()> {
    let (cfg, cal) = load_calibrated(&a.common)?;
    let sites = a
        .sites
        .iter()
        .map(|s| {
            ReorderSite::ALL
                .into_iter()
                .find(|r| r.name().eq_ignore_ascii_case(s.trim()))
                .ok_or_else(|| invalid(format!("unknown reorder site {s:?}; expected R1..R5")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if a.sweep.contains(&0) {
        return Err(invalid("cluster counts in the sweep must be positive"));
    }
    let rows = pipeline::ablate_with(&cfg, &cal, &sites, &a.sweep)?;
    let csv = pipeline::ablation_csv(&rows);
    fs::write(a.common.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn memest(m: &MemestArgs) -> CliResult<()> {
    let mut shapes = match &m.shapes {
        Some(p) => memmodel::load_shapes(&read_path(p)?)?,
        None => memmodel::builtin_shapes(),
    };
    let mut calib = DynamicCalibration::builtin();
    if m.decimal {
        calib.unit = ByteUnit::GB;
    }
    let csv = if m.golden {
        memmodel::golden_csv(&memmodel::compare_golden(&shapes, &memmodel::memory_golden(), &calib)?)
    } else {
        if !m.models.is_empty() {
            shapes = m
                .models
                .iter()
                .map(|n| memmodel::find_shape(&shapes, n).cloned())
                .collect::<rptq::Result<Vec<_>>>()?;
        }
        let cfgs = m.modes.iter().map(|s| s.parse::<BitConfig>()).collect::<rptq::Result<Vec<_>>>()?;
        let rows = memmodel::sweep(&shapes, &cfgs, &m.batches, &m.seqlens, &calib)?;
        memmodel::sweep_csv(&rows, calib.unit, m.proportions)
    };
    match &m.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn read_path(p: &Path) -> CliResult<String> {
    fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))
}

fn stats_dump(s: &StatsDumpArgs) -> CliResult<()> {
    let site = Site::ALL
        .into_iter()
        .find(|x| x.name() == s.site)
        .ok_or_else(|| invalid(format!("unknown site {:?}", s.site)))?;
    let (calib, meta) = bundle::load_calibration(&s.out)?;
    let layer = calib
        .get(s.layer)
        .ok_or_else(|| invalid(format!("layer {} out of range (0..{})", s.layer, meta.layers)))?;
    print!("{}", layer.stats.get(site)?.to_csv());
    Ok(())
}
