mod config;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use smswap::error::Error;
use smswap::generator::{build_generator, write_dense_csv, GeneratorMatrix, GridFunction, Stepper, DENSE_LIMIT};
use smswap::model::{CorrelationCurve, SemiMarkovModel, VolatilityField};
use smswap::moments::{first_order_curve, moment_curve, MomentCurve, QuadratureSpec};
use smswap::pricing::{PricingEngine, PricingMethod, PricingReport, SwapContract, SwapKind};
use smswap::simulator::{simulate_functional, McEstimate, Underlying};

use config::{CorrelationOrder, Format, JobConfig, ModelFile, StateRef, SCHEMA_VERSION};

/// Error carrying the process exit status.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidModel(_) | Error::InvalidParameter(_) | Error::NoDensity { .. } => {
                Failure::validation(e.to_string())
            }
            _ => Failure::numerical(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "smswap", version, about = "Swap pricing under semi-Markov volatility")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file (or the model referenced by a job config).
    Validate(ValidateArgs),
    /// Price a swap from the moment curves.
    Price(JobArgs),
    /// Monte Carlo estimate of the swap price and realized functional.
    Simulate(JobArgs),
    /// Analytic price against Monte Carlo, PASS within 3 standard errors.
    Compare(JobArgs),
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Variance,
    Volatility,
    Covariance,
    Correlation,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Exact,
    FirstOrder,
}

#[derive(Clone, Copy, ValueEnum)]
enum StepperArg {
    Euler,
    Rk4,
}

#[derive(Args)]
struct JobArgs {
    /// Job config (JSON). Flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model file; required without --config.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Initial state, by 0-based index or name.
    #[arg(long)]
    initial_state: Option<StateRef>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long, allow_negative_numbers = true)]
    maturity: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    rate: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    strike: Option<f64>,
    #[arg(long)]
    notional: Option<f64>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    stepper: Option<StepperArg>,
    /// Correlation expansion order.
    #[arg(long, value_enum)]
    order: Option<CorrelationOrder>,
    #[arg(long)]
    gamma_step: Option<f64>,
    #[arg(long, requires = "n_gamma")]
    gamma_max: Option<f64>,
    #[arg(long, requires = "gamma_max")]
    n_gamma: Option<usize>,
    #[arg(long)]
    n_t: Option<usize>,
    #[arg(long)]
    n_paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Console format.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Write the moment curves as CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Write the dense generator as CSV.
    #[arg(long)]
    dump_generator: Option<PathBuf>,
}

impl JobArgs {
    fn resolve(&self) -> Result<JobConfig, Failure> {
        let mut cfg = match (&self.config, &self.model) {
            (Some(path), model) => {
                let mut cfg = JobConfig::load(path)?;
                if let Some(m) = model {
                    cfg.model = m.clone();
                }
                cfg
            }
            (None, Some(model)) => JobConfig::bare(model.clone()),
            (None, None) => return Err(Failure::validation("either --config or --model is required")),
        };
        if let Some(s) = &self.initial_state {
            cfg.initial_state = s.clone();
        }
        let kind = self.kind.map(|k| match k {
            KindArg::Variance => SwapKind::Variance,
            KindArg::Volatility => SwapKind::Volatility,
            KindArg::Covariance => SwapKind::Covariance,
            KindArg::Correlation => SwapKind::Correlation,
        });
        let mut contract = match cfg.contract.take() {
            Some(c) => c,
            None => SwapContract {
                kind: kind.ok_or_else(|| Failure::validation("no contract in config; --kind is required"))?,
                maturity: self
                    .maturity
                    .ok_or_else(|| Failure::validation("no contract in config; --maturity is required"))?,
                rate: 0.0,
                strike: self
                    .strike
                    .ok_or_else(|| Failure::validation("no contract in config; --strike is required"))?,
                notional: 1.0,
            },
        };
        if let Some(k) = kind {
            contract.kind = k;
        }
        if let Some(v) = self.maturity {
            contract.maturity = v;
        }
        if let Some(v) = self.rate {
            contract.rate = v;
        }
        if let Some(v) = self.strike {
            contract.strike = v;
        }
        if let Some(v) = self.notional {
            contract.notional = v;
        }
        cfg.contract = Some(contract);

        let n = &mut cfg.numerics;
        if let Some(m) = self.method {
            n.method = match m {
                MethodArg::Exact => PricingMethod::Exact,
                MethodArg::FirstOrder => PricingMethod::FirstOrder,
            };
        }
        if let Some(s) = self.stepper {
            n.stepper = match s {
                StepperArg::Euler => Stepper::Euler,
                StepperArg::Rk4 => Stepper::Rk4,
            };
        }
        if let Some(o) = self.order {
            n.correlation_order = o;
        }
        if let Some(v) = self.gamma_step {
            n.gamma_step = v;
        }
        if self.gamma_max.is_some() {
            n.gamma_max = self.gamma_max;
            n.n_gamma = self.n_gamma;
        }
        if let Some(v) = self.n_t {
            n.n_t = v;
        }
        if let Some(v) = self.n_paths {
            n.n_paths = v;
        }
        if let Some(v) = self.seed {
            n.seed = v;
        }
        let out = &mut cfg.output;
        if self.output.is_some() {
            out.path = self.output.clone();
        }
        if let Some(f) = self.format {
            out.format = f;
        }
        if self.curves.is_some() {
            out.curves = self.curves.clone();
        }
        if self.dump_generator.is_some() {
            out.generator = self.dump_generator.clone();
        }
        Ok(cfg)
    }
}

/// Everything a pricing or simulation run needs.
struct Job {
    cfg: JobConfig,
    file: ModelFile,
    model: SemiMarkovModel,
    contract: SwapContract,
    x0: usize,
    advisories: Vec<String>,
}

impl Job {
    fn load(args: &JobArgs) -> Result<Self, Failure> {
        let cfg = args.resolve()?;
        let file = ModelFile::load(&cfg.model)?;
        let model = file.checked_kernel()?;
        let x0 = file.state_index(&cfg.initial_state)?;
        cfg.numerics.check()?;
        let contract = cfg.contract.clone().expect("resolved config carries a contract");
        let advisories = contract.check()?;
        Ok(Self {
            cfg,
            file,
            model,
            contract,
            x0,
            advisories,
        })
    }

    fn pair(&self) -> Result<(&VolatilityField, &VolatilityField, &CorrelationCurve), Failure> {
        let kind = self.contract.kind.label();
        let s2 = self
            .file
            .volatility_2
            .as_ref()
            .ok_or_else(|| Failure::validation(format!("{kind} swap needs volatility_2 in the model file")))?;
        let rho = self
            .file
            .correlation
            .as_ref()
            .ok_or_else(|| Failure::validation(format!("{kind} swap needs correlation in the model file")))?;
        Ok((&self.file.volatility, s2, rho))
    }

    fn underlying(&self) -> Result<Underlying<'_>, Failure> {
        Ok(match self.contract.kind {
            SwapKind::Variance | SwapKind::Volatility => Underlying::Single(&self.file.volatility),
            SwapKind::Covariance | SwapKind::Correlation => {
                let (sigma1, sigma2, rho) = self.pair()?;
                Underlying::Pair { sigma1, sigma2, rho }
            }
        })
    }

    fn generator(&self) -> Result<GeneratorMatrix, Failure> {
        let grid = self.cfg.numerics.grid(&self.model)?;
        Ok(build_generator(&self.model, &grid)?)
    }

    fn price(&self, q: GeneratorMatrix) -> Result<PricingReport, Failure> {
        let n = &self.cfg.numerics;
        let engine = PricingEngine::new(q, self.x0)?
            .with_quadrature(QuadratureSpec::new(n.n_t)?)
            .with_stepper(n.stepper);
        let c = &self.contract;
        let mut report = match c.kind {
            SwapKind::Variance => engine.price_variance_swap(&self.file.volatility, c, n.method)?,
            SwapKind::Volatility => engine.price_volatility_swap(&self.file.volatility, c, n.method)?,
            SwapKind::Covariance => {
                let (s1, s2, rho) = self.pair()?;
                engine.price_covariance_swap(s1, s2, rho, c, n.method)?
            }
            SwapKind::Correlation => {
                let (s1, s2, rho) = self.pair()?;
                match n.correlation_order {
                    CorrelationOrder::Zero => engine.price_correlation_swap_zero_order(s1, s2, rho, c, n.method)?,
                    CorrelationOrder::First => engine.price_correlation_swap_first_order(s1, s2, rho, c)?,
                }
            }
        };
        for a in &self.advisories {
            if !report.notes.contains(a) {
                report.notes.push(a.clone());
            }
        }
        Ok(report)
    }

    fn simulate(&self) -> Result<Vec<EstimateRow>, Failure> {
        let n = &self.cfg.numerics;
        let c = &self.contract;
        let samples =
            simulate_functional(&self.model, self.x0, c.kind, self.underlying()?, c.maturity, n.n_paths, n.seed)?;
        let scale = c.notional * c.discount();
        let payoffs: Vec<f64> = samples.iter().map(|v| scale * (v - c.strike)).collect();
        let price = McEstimate::from_samples(&payoffs, n.seed)?;
        let functional = McEstimate::from_samples(&samples, n.seed)?;
        Ok(vec![
            EstimateRow::new(format!("{}_swap_price", c.kind.label()), &price),
            EstimateRow::new(format!("realized_{}", c.kind.label()), &functional),
        ])
    }

    fn write_curves(&self, q: &GeneratorMatrix, path: &Path) -> Result<(), Failure> {
        let n = &self.cfg.numerics;
        let c = &self.contract;
        let s1 = &self.file.volatility;
        let mut fields: Vec<(&str, GridFunction)> = Vec::new();
        let rho = match c.kind {
            SwapKind::Variance | SwapKind::Volatility => {
                fields.push(("sigma1_sq", GridFunction::from_field(q.shape(), s1, |s| s * s)));
                None
            }
            SwapKind::Covariance | SwapKind::Correlation => {
                let (_, s2, rho) = self.pair()?;
                let a = GridFunction::from_field(q.shape(), s1, |s| s);
                let b = GridFunction::from_field(q.shape(), s2, |s| s);
                fields.push(("sigma1_sigma2", a.hadamard(&b)?));
                if c.kind == SwapKind::Correlation {
                    fields.push(("sigma1_sq", a.hadamard(&a)?));
                    fields.push(("sigma2_sq", b.hadamard(&b)?));
                }
                Some(rho)
            }
        };
        let grid = QuadratureSpec::new(n.n_t)?.grid_for(c.maturity, rho)?;
        let mut text = String::from("quantity,t,value,method\n");
        for (name, f) in fields {
            let curve: MomentCurve = match n.method {
                PricingMethod::Exact => moment_curve(q, &f, self.x0, &grid, n.stepper)?,
                PricingMethod::FirstOrder => first_order_curve(q, &f, self.x0, &grid)?,
            };
            for (t, v) in curve.times.iter().zip(&curve.values) {
                writeln!(text, "{name},{t},{v:e},{}", curve.kind.label()).expect("writing to a String");
            }
        }
        write_file(path, &text)
    }

    fn write_generator(&self, q: &GeneratorMatrix, path: &Path) -> Result<(), Failure> {
        if q.dim() > DENSE_LIMIT {
            return Err(Error::DimensionTooLarge {
                n: q.dim(),
                limit: DENSE_LIMIT,
            }
            .into());
        }
        let file = File::create(path).map_err(|e| Failure::io(format!("creating {}: {e}", path.display())))?;
        write_dense_csv(&q.to_dense(), BufWriter::new(file))
            .map_err(|e| Failure::io(format!("writing {}: {e}", path.display())))
    }
}

#[derive(Debug, Serialize)]
struct EstimateRow {
    functional: String,
    mean: f64,
    stderr: f64,
    n_paths: usize,
    seed: u64,
}

impl EstimateRow {
    fn new(functional: String, est: &McEstimate) -> Self {
        Self {
            functional,
            mean: est.mean,
            stderr: est.std_error,
            n_paths: est.n_paths,
            seed: est.seed,
        }
    }
}

#[derive(Debug, Serialize)]
struct Comparison {
    analytic: f64,
    mc_mean: f64,
    mc_stderr: f64,
    z: f64,
    threshold: f64,
    verdict: &'static str,
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    schema_version: u32,
    command: &'static str,
    timestamp: u64,
    job: &'a JobConfig,
    #[serde(flatten)]
    body: T,
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(format!("writing {}: {e}", path.display())))
}

fn emit<T: Serialize>(job: &Job, command: &'static str, body: T, table: String) -> Result<(), Failure> {
    let doc = Document {
        schema_version: SCHEMA_VERSION,
        command,
        timestamp: timestamp(),
        job: &job.cfg,
        body,
    };
    let json = serde_json::to_string_pretty(&doc).map_err(|e| Failure::io(e.to_string()))? + "\n";
    if let Some(path) = &job.cfg.output.path {
        write_file(path, &json)?;
    }
    match job.cfg.output.format {
        Format::Json => print!("{json}"),
        Format::Table => print!("{table}"),
    }
    Ok(())
}

fn row(out: &mut String, key: &str, value: impl std::fmt::Display) {
    writeln!(out, "{key:<24} {value}").expect("writing to a String");
}

fn report_table(r: &PricingReport) -> String {
    let mut out = String::new();
    row(&mut out, "kind", r.kind.label());
    row(&mut out, "method", r.method.label());
    row(&mut out, "price", format!("{:.10e}", r.price));
    row(&mut out, "fair value", format!("{:.10e}", r.fair_value));
    if let Ok(serde_json::Value::Object(m)) = serde_json::to_value(&r.intermediates) {
        for (k, v) in m {
            row(&mut out, &k, v);
        }
    }
    row(&mut out, "time intervals", r.diagnostics.intervals);
    if let Some(e) = r.diagnostics.richardson_error {
        row(&mut out, "richardson error", format!("{e:.3e}"));
    }
    if let Some(e) = r.diagnostics.normalization_residual {
        row(&mut out, "normalization residual", format!("{e:.3e}"));
    }
    if r.expansion_warning {
        row(&mut out, "warning", "Var{V}/E{V}^2 above the expansion threshold");
    }
    for n in &r.notes {
        row(&mut out, "note", n);
    }
    out
}

fn rows_table(rows: &[EstimateRow]) -> String {
    let mut out = format!("{:<24} {:>18} {:>12} {:>9} {:>8}\n", "functional", "mean", "stderr", "n_paths", "seed");
    for r in rows {
        writeln!(
            out,
            "{:<24} {:>18.10e} {:>12.4e} {:>9} {:>8}",
            r.functional, r.mean, r.stderr, r.n_paths, r.seed
        )
        .expect("writing to a String");
    }
    out
}

fn validate(args: &ValidateArgs) -> Result<(), Failure> {
    let (path, job) = match (&args.config, &args.model) {
        (Some(c), _) => {
            let cfg = JobConfig::load(c)?;
            (cfg.model.clone(), Some(cfg))
        }
        (None, Some(m)) => (m.clone(), None),
        (None, None) => unreachable!("clap enforces one of --config/--model"),
    };
    let file = ModelFile::load(&path)?;
    let (report, extra) = file.validate();
    let mut problems = extra;
    if let Some(cfg) = &job {
        if let Err(e) = cfg.numerics.check() {
            problems.push(e.message);
        }
        if let Err(e) = file.state_index(&cfg.initial_state) {
            problems.push(e.message);
        }
        if let Some(c) = &cfg.contract {
            match c.check() {
                Ok(adv) => adv.into_iter().for_each(|a| println!("  advisory: {a}")),
                Err(e) => problems.push(e.to_string()),
            }
        }
    }
    if problems.is_empty() {
        println!("{report}");
    } else {
        println!("invalid");
        for line in report.to_string().lines().skip(1) {
            println!("{line}");
        }
        for p in &problems {
            println!("  violation: {p}");
        }
    }
    if report.is_valid() && problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::validation(format!("{} is invalid", path.display())))
    }
}

fn price(args: &JobArgs) -> Result<(), Failure> {
    let job = Job::load(args)?;
    let q = job.generator()?;
    if let Some(p) = &job.cfg.output.generator {
        job.write_generator(&q, p)?;
    }
    if let Some(p) = &job.cfg.output.curves {
        job.write_curves(&q, p)?;
    }
    let report = job.price(q)?;
    #[derive(Serialize)]
    struct Body<'a> {
        report: &'a PricingReport,
    }
    emit(&job, "price", Body { report: &report }, report_table(&report))
}

fn simulate(args: &JobArgs) -> Result<(), Failure> {
    let job = Job::load(args)?;
    let rows = job.simulate()?;
    #[derive(Serialize)]
    struct Body<'a> {
        estimates: &'a [EstimateRow],
    }
    let table = rows_table(&rows);
    emit(&job, "simulate", Body { estimates: &rows }, table)
}

fn compare(args: &JobArgs) -> Result<(), Failure> {
    let job = Job::load(args)?;
    let report = job.price(job.generator()?)?;
    let rows = job.simulate()?;
    let mc = &rows[0];
    let z = if mc.stderr > 0.0 {
        (report.price - mc.mean) / mc.stderr
    } else if report.price == mc.mean {
        0.0
    } else {
        f64::INFINITY
    };
    let threshold = 3.0;
    let pass = z.abs() < threshold;
    let cmp = Comparison {
        analytic: report.price,
        mc_mean: mc.mean,
        mc_stderr: mc.stderr,
        z,
        threshold,
        verdict: if pass { "PASS" } else { "FAIL" },
    };
    let mut table = String::new();
    row(&mut table, "analytic", format!("{:.10e}", cmp.analytic));
    row(&mut table, "monte carlo", format!("{:.10e} +/- {:.3e}", cmp.mc_mean, cmp.mc_stderr));
    row(&mut table, "z", format!("{z:.3}"));
    row(&mut table, "verdict", cmp.verdict);
    #[derive(Serialize)]
    struct Body<'a> {
        comparison: &'a Comparison,
        report: &'a PricingReport,
        estimates: &'a [EstimateRow],
    }
    emit(
        &job,
        "compare",
        Body {
            comparison: &cmp,
            report: &report,
            estimates: &rows,
        },
        table,
    )?;
    if pass {
        Ok(())
    } else {
        Err(Failure::numerical(format!("|z| = {:.3} is not below {threshold}", z.abs())))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Validate(a) => validate(a),
        Command::Price(a) => price(a),
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
