//! `hjcert` command-line workflows. Every command reads from and writes to a
//! run directory and records its files in `manifest.json`.

mod manifest;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hjcert::cegis::{run_cegis, CegisOptions, CegisStatus};
use hjcert::certify::smtlib::export_cells;
use hjcert::certify::{certify_expr, partition_roi, route_query, Certificate, CertifyOptions, Route, Status};
use hjcert::grid::solve_stationary;
use hjcert::net::train;
use hjcert::reach::{bracket_field, oracle_threshold, validate_bracket, DEFAULT_RIM};
use hjcert::{ExperimentConfig, GridField, NetParams, Problem};

use manifest::{sha256_file, timestamp, CommandRecord, ConfigRef, RunManifest};

const EXIT_OK: u8 = 0;
const EXIT_NEGATIVE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INCOMPLETE: u8 = 3;

const WEIGHTS: &str = "weights.json";
const ORACLE: &str = "wnum";
const CERTIFICATE: &str = "certificate.json";

#[derive(Parser, Debug)]
#[command(name = "hjcert", version, about = "Learn, certify and bracket discounted HJB value functions")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Opts {
    /// Experiment configuration JSON.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration, e.g. double-integrator-paper.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Run directory for inputs and artifacts.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    route: Option<Route>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Cells per axis for certification.
    #[arg(long, global = true)]
    cells: Option<usize>,
    /// Grid oracle shape, e.g. 201x201.
    #[arg(long, global = true, value_parser = parse_shape)]
    grid_shape: Option<Shape>,
    /// Grid fixed-point tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Training iterations per round.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Initial uniform states in the replay buffer.
    #[arg(long, global = true)]
    buffer_fill: Option<usize>,
    #[arg(long, global = true)]
    max_rounds: Option<usize>,
    /// Worker threads for the grid solver and certifier.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Weights to read instead of `<out-dir>/weights.json`.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Emit {
    Smt2,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve the stationary grid oracle.
    SolveGrid,
    /// Train a network from its seeded initialization.
    Train,
    /// Write the value and residual expressions.
    ExportExpr,
    /// Certify the residual bound cell by cell.
    Certify {
        /// Also write one SMT-LIB query per cell.
        #[arg(long)]
        emit: Option<Emit>,
    },
    /// Inner and outer reach enclosures, checked against the grid oracle.
    Bracket,
    /// Alternate training and certification.
    Cegis,
    /// Network minus grid oracle.
    Compare,
    /// Rehash every artifact listed in the manifest.
    VerifyManifest,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::SolveGrid => "solve-grid",
            Cmd::Train => "train",
            Cmd::ExportExpr => "export-expr",
            Cmd::Certify { .. } => "certify",
            Cmd::Bracket => "bracket",
            Cmd::Cegis => "cegis",
            Cmd::Compare => "compare",
            Cmd::VerifyManifest => "verify-manifest",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Shape(Vec<usize>);

fn parse_shape(s: &str) -> Result<Shape, String> {
    let shape: Result<Vec<usize>, _> = s.split(['x', ',']).map(|p| p.trim().parse::<usize>()).collect();
    match shape {
        Ok(v) if !v.is_empty() && v.iter().all(|&n| n >= 2) => Ok(Shape(v)),
        _ => Err(format!("bad grid shape `{s}` (expected e.g. 201x201)")),
    }
}

/// Errors that are the caller's fault.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<hjcert::Error>() {
                Some(hjcert::Error::Indeterminate { .. }) => EXIT_INCOMPLETE,
                _ => EXIT_USAGE,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    if let Some(n) = cli.opts.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if let Cmd::VerifyManifest = cli.cmd {
        return verify_manifest(&cli.opts.out_dir);
    }
    let mut ctx = Ctx::new(&cli.opts, cli.cmd.name())?;
    let started = Instant::now();
    let code = match &cli.cmd {
        Cmd::SolveGrid => solve_grid(&mut ctx)?,
        Cmd::Train => train_cmd(&mut ctx)?,
        Cmd::ExportExpr => export_expr(&mut ctx)?,
        Cmd::Certify { emit } => certify(&mut ctx, emit.is_some())?,
        Cmd::Bracket => bracket(&mut ctx)?,
        Cmd::Cegis => cegis(&mut ctx)?,
        Cmd::Compare => compare(&mut ctx)?,
        Cmd::VerifyManifest => unreachable!(),
    };
    log::info!("{} finished in {:.1} s", ctx.command, started.elapsed().as_secs_f64());
    ctx.finish()?;
    Ok(code)
}

struct Ctx {
    command: &'static str,
    cfg: ExperimentConfig,
    source: String,
    problem: Problem,
    dir: PathBuf,
    weights: Option<PathBuf>,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
}

impl Ctx {
    fn new(opts: &Opts, command: &'static str) -> Result<Self> {
        let (mut cfg, source) = match (&opts.config, &opts.preset) {
            (Some(p), _) => (
                ExperimentConfig::load(p).map_err(|e| usage(format!("config {}: {e}", p.display())))?,
                p.display().to_string(),
            ),
            (None, Some(name)) => (
                ExperimentConfig::preset(name).map_err(|e| usage(e.to_string()))?,
                format!("preset:{name}"),
            ),
            (None, None) => {
                let names: Vec<_> = hjcert::experiment::preset_names().collect();
                return Err(usage(format!("give --config or --preset ({})", names.join(", "))));
            }
        };
        if let Some(s) = opts.seed {
            cfg.seed = s;
        }
        if let Some(r) = opts.route {
            cfg.certify.route = r;
        }
        if let Some(r) = opts.rho {
            cfg.certify.rho = r;
        }
        if let Some(d) = opts.delta {
            cfg.certify.delta = d;
        }
        if let Some(c) = opts.cells {
            cfg.certify.cells_per_axis = c;
        }
        if let Some(s) = &opts.grid_shape {
            cfg.grid.shape = s.0.clone();
        }
        if let Some(t) = opts.tol {
            cfg.grid.tol = t;
        }
        if let Some(n) = opts.iterations {
            cfg.training.iterations = n;
        }
        if let Some(n) = opts.batch_size {
            cfg.training.batch_size = n;
        }
        if let Some(n) = opts.buffer_fill {
            cfg.training.buffer_fill = n;
        }
        if let Some(n) = opts.max_rounds {
            cfg.cegis.max_rounds = n;
        }
        // Round-trip so overrides go through the same validation as files.
        let cfg = ExperimentConfig::from_json(&cfg.to_json()).map_err(|e| usage(e.to_string()))?;
        if cfg.grid.shape.len() != cfg.problem.state_dim() {
            return Err(usage("grid shape and state dimension differ"));
        }
        let problem = Problem::new(cfg.problem.clone()).map_err(|e| usage(e.to_string()))?;
        std::fs::create_dir_all(&opts.out_dir).with_context(|| format!("creating {}", opts.out_dir.display()))?;
        Ok(Ctx {
            command,
            cfg,
            source,
            problem,
            dir: opts.out_dir.clone(),
            weights: opts.weights.clone(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&mut self, name: &str, hint: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(usage(format!("{} not found; {hint}", p.display())));
        }
        self.inputs.insert(name.to_string(), sha256_file(&p)?);
        Ok(p)
    }

    fn load_weights(&mut self) -> Result<NetParams> {
        let path = match &self.weights {
            Some(p) => {
                let p = p.clone();
                if !p.exists() {
                    return Err(usage(format!("{} not found", p.display())));
                }
                self.inputs.insert(p.display().to_string(), sha256_file(&p)?);
                p
            }
            None => self.require(WEIGHTS, "run `hjcert train` first")?,
        };
        let (net, _) = NetParams::load(&path).map_err(|e| usage(e.to_string()))?;
        if net.sizes() != self.cfg.layer_sizes().as_slice() {
            return Err(usage(format!("{} does not match the configured network", path.display())));
        }
        Ok(net)
    }

    fn load_oracle(&mut self) -> Result<GridField> {
        self.require(&format!("{ORACLE}.csv"), "run `hjcert solve-grid` first")?;
        self.require(&format!("{ORACLE}.json"), "run `hjcert solve-grid` first")?;
        let (g, meta) = GridField::load(&self.dir, ORACLE)?;
        if meta.spec_hash.as_deref().is_some_and(|h| h != self.cfg.problem.hash()) {
            return Err(usage("grid oracle was solved for a different problem"));
        }
        if g.shape != self.cfg.grid.shape || g.roi != self.cfg.problem.roi {
            return Err(usage("grid oracle shape or region differs from the configuration"));
        }
        Ok(g)
    }

    fn load_certificate(&mut self) -> Result<Certificate> {
        let p = self.require(CERTIFICATE, "run `hjcert certify` first")?;
        let cert = Certificate::load(&p)?;
        cert.check_spec(&self.cfg.problem).map_err(|e| usage(e.to_string()))?;
        Ok(cert)
    }

    fn wrote(&mut self, name: &str) -> Result<()> {
        self.artifacts.insert(name.to_string(), sha256_file(&self.path(name))?);
        Ok(())
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.wrote(name)
    }

    fn write_csv(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let p = self.path(name);
        let file = std::fs::File::create(&p).with_context(|| format!("writing {}", p.display()))?;
        let mut w = std::io::BufWriter::new(file);
        f(&mut w).with_context(|| format!("writing {}", p.display()))?;
        w.flush()?;
        drop(w);
        self.wrote(name)
    }

    fn finish(mut self) -> Result<()> {
        let cfg_name = format!("{}-config.json", self.command);
        let text = self.cfg.to_json() + "\n";
        self.write(&cfg_name, &text)?;
        let rec = CommandRecord {
            command: self.command.to_string(),
            config: ConfigRef {
                source: self.source.clone(),
                path: cfg_name.clone(),
                sha256: self.artifacts[&cfg_name].clone(),
            },
            seed: self.cfg.seed,
            timestamp: timestamp()?,
            inputs: std::mem::take(&mut self.inputs),
            artifacts: std::mem::take(&mut self.artifacts),
        };
        let mut m = RunManifest::load_or_default(&self.dir)?;
        m.record(rec);
        m.save(&self.dir)?;
        Ok(())
    }
}

fn solve_grid(ctx: &mut Ctx) -> Result<u8> {
    let g = solve_stationary(&ctx.problem, &ctx.cfg.grid.shape, ctx.cfg.grid.tol)?;
    g.save(&ctx.dir, ORACLE, Some(&ctx.cfg.problem.hash()))?;
    ctx.wrote(&format!("{ORACLE}.csv"))?;
    ctx.wrote(&format!("{ORACLE}.json"))?;
    let origin = vec![0.0; ctx.problem.state_dim()];
    println!(
        "solved {:?} grid in {} sweeps (last change {:e}); W_num(origin) = {}",
        g.shape,
        g.iterations,
        g.sup_change,
        hjcert::ValueFunction::value(&g, &origin)
    );
    Ok(EXIT_OK)
}

fn init_params(cfg: &ExperimentConfig) -> Result<NetParams> {
    Ok(NetParams::init(cfg.seed, &cfg.layer_sizes(), cfg.network.w0)?)
}

fn weights_meta(ctx: &Ctx, final_loss: Option<f64>, iterations: usize) -> serde_json::Value {
    serde_json::json!({
        "spec_hash": ctx.cfg.problem.hash(),
        "seed": ctx.cfg.seed,
        "iterations": iterations,
        "final_loss": final_loss,
    })
}

fn train_cmd(ctx: &mut Ctx) -> Result<u8> {
    let init = init_params(&ctx.cfg)?;
    let (net, report) = train(&ctx.problem, init, &ctx.cfg.training, ctx.cfg.seed)?;
    net.save(ctx.path(WEIGHTS), Some(weights_meta(ctx, report.final_loss(), report.iterations)))?;
    ctx.wrote(WEIGHTS)?;
    ctx.write_csv("train_log.csv", |w| report.write_csv(w))?;
    println!(
        "trained {} iterations; final loss {}",
        report.iterations,
        report.final_loss().map_or("n/a".into(), |l| format!("{l:e}"))
    );
    Ok(EXIT_OK)
}

fn export_expr(ctx: &mut Ctx) -> Result<u8> {
    let net = ctx.load_weights()?;
    let value = net.export_expr();
    let (domain, residual) = route_query(&ctx.problem, ctx.cfg.certify.route, &value)?;
    ctx.write("value_expr.json", &value.to_json())?;
    ctx.write("residual_expr.json", &residual.to_json())?;
    ctx.write("residual_domain.json", &serde_json::to_string_pretty(&domain)?)?;
    println!("value: {} nodes; residual: {} nodes", value.len(), residual.len());
    Ok(EXIT_OK)
}

fn write_witnesses(ctx: &mut Ctx, cert: &Certificate) -> Result<()> {
    let n = ctx.problem.state_dim();
    let cells = cert.cells.clone();
    ctx.write_csv("witnesses.csv", |w| {
        let cols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        writeln!(w, "cell,{}", cols.join(","))?;
        for (i, c) in cells.iter().enumerate() {
            if let Some(x) = &c.witness {
                let xs: Vec<String> = x.iter().map(|v| hjcert::real::format(*v)).collect();
                writeln!(w, "{i},{}", xs.join(","))?;
            }
        }
        Ok(())
    })
}

fn certificate_exit(cert: &Certificate) -> u8 {
    if cert.all_unsat() && cert.complete {
        EXIT_OK
    } else if cert.count(Status::DeltaSat) > 0 {
        EXIT_NEGATIVE
    } else {
        EXIT_INCOMPLETE
    }
}

fn print_certificate(cert: &Certificate) {
    println!(
        "route {}: {} UNSAT, {} DELTA_SAT, {} INDETERMINATE over {} boxes",
        match cert.route {
            Route::A => "a",
            Route::B => "b",
        },
        cert.count(Status::Unsat),
        cert.count(Status::DeltaSat),
        cert.count(Status::Indeterminate),
        cert.total_boxes()
    );
    match cert.eps_val {
        Some(e) => println!("certified: eps_val = {e}"),
        None => {
            for (i, c) in cert.cells.iter().enumerate() {
                if let Some(x) = &c.witness {
                    println!("cell {i}: witness {x:?}");
                }
            }
        }
    }
}

fn certify(ctx: &mut Ctx, emit_smt2: bool) -> Result<u8> {
    let net = ctx.load_weights()?;
    let s = ctx.cfg.certify.clone();
    let (domain, expr) = route_query(&ctx.problem, s.route, &net.export_expr())?;
    if emit_smt2 {
        let cells = partition_roi(&domain, s.cells_per_axis, s.rho)?;
        let files = export_cells(&expr, &cells, s.delta, &ctx.path("smt2"))?;
        for f in files {
            let rel = f.strip_prefix(&ctx.dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            ctx.wrote(&rel)?;
        }
    }
    let cert = certify_expr(
        &ctx.problem,
        &expr,
        &domain,
        s.route,
        s.rho,
        s.delta,
        s.cells_per_axis,
        &CertifyOptions::default(),
    )?;
    cert.save(ctx.path(CERTIFICATE))?;
    ctx.wrote(CERTIFICATE)?;
    if cert.witnesses().next().is_some() {
        write_witnesses(ctx, &cert)?;
    }
    print_certificate(&cert);
    Ok(certificate_exit(&cert))
}

fn bracket(ctx: &mut Ctx) -> Result<u8> {
    let net = ctx.load_weights()?;
    let cert = ctx.load_certificate()?;
    let Some(eps) = cert.eps_val else {
        return Err(usage("certificate carries no eps_val; certification did not succeed"));
    };
    let oracle = ctx.load_oracle()?;
    let field = GridField::from_fn(&oracle.shape, &oracle.roi, &net)?;
    let pair = bracket_field(&field, eps)?;
    let report = validate_bracket(&pair, &oracle, DEFAULT_RIM)?;
    let thr = oracle_threshold(&oracle);
    ctx.write_csv("enclosures.csv", |w| pair.write_csv(w, Some((&oracle, thr))))?;
    ctx.write("bracket_report.json", &report.to_json())?;
    println!(
        "eps_val {eps}: inner {} nodes, outer {} nodes, oracle {} nodes; {} violations",
        report.inner_count,
        report.outer_count,
        report.oracle_count,
        report.violations()
    );
    Ok(if report.violations() == 0 { EXIT_OK } else { EXIT_NEGATIVE })
}

fn cegis(ctx: &mut Ctx) -> Result<u8> {
    let s = ctx.cfg.certify.clone();
    let opts = CegisOptions::new(s.route, s.rho, s.delta, s.cells_per_axis, ctx.cfg.cegis.max_rounds);
    let init = init_params(&ctx.cfg)?;
    let (net, cert, report) = run_cegis(&ctx.problem, init, &ctx.cfg.training, ctx.cfg.seed, &opts)?;
    let iterations = report.rounds.len() * ctx.cfg.training.iterations;
    let last_loss = report.rounds.last().and_then(|r| r.final_loss);
    net.save(ctx.path(WEIGHTS), Some(weights_meta(ctx, last_loss, iterations)))?;
    ctx.wrote(WEIGHTS)?;
    cert.save(ctx.path(CERTIFICATE))?;
    ctx.wrote(CERTIFICATE)?;
    ctx.write("cegis_report.json", &report.to_json())?;
    ctx.write_csv("counterexamples.csv", |w| report.write_counterexamples(w))?;
    print_certificate(&cert);
    let status = match report.status {
        CegisStatus::Certified => "CERTIFIED",
        CegisStatus::Exhausted => "EXHAUSTED",
    };
    println!("{status} after {} round(s)", report.rounds.len());
    Ok(match report.status {
        CegisStatus::Certified => EXIT_OK,
        CegisStatus::Exhausted => EXIT_NEGATIVE,
    })
}

fn compare(ctx: &mut Ctx) -> Result<u8> {
    let net = ctx.load_weights()?;
    let oracle = ctx.load_oracle()?;
    let diff = oracle.difference(&net)?;
    let max_abs = diff.max_abs_interior(DEFAULT_RIM);
    ctx.write_csv("delta.csv", |w| {
        let n = oracle.dim();
        let cols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},w_num,w_nn,delta", cols.join(","))?;
        for k in 0..oracle.len() {
            for c in oracle.node(k) {
                write!(w, "{},", hjcert::real::format(c))?;
            }
            let d = diff.values[k];
            writeln!(
                w,
                "{},{},{}",
                hjcert::real::format(oracle.values[k]),
                hjcert::real::format(oracle.values[k] + d),
                hjcert::real::format(d)
            )?;
        }
        Ok(())
    })?;
    let summary = serde_json::json!({
        "shape": oracle.shape,
        "rim": DEFAULT_RIM,
        "max_abs_delta": max_abs,
        "max_abs_delta_with_rim": diff.max_abs_interior(0),
    });
    ctx.write("compare.json", &serde_json::to_string_pretty(&summary)?)?;
    println!("max |W_nn - W_num| = {max_abs} (rim {DEFAULT_RIM} excluded)");
    Ok(EXIT_OK)
}

fn verify_manifest(dir: &Path) -> Result<u8> {
    let m = RunManifest::load(dir).map_err(|e| usage(format!("{e:#}")))?;
    let problems = m.verify(dir)?;
    let n = m.artifacts().len();
    if problems.is_empty() {
        println!("{n} artifacts verified");
        return Ok(EXIT_OK);
    }
    for p in &problems {
        println!("{p}");
    }
    println!("{} of {n} artifacts failed verification", problems.len());
    Ok(EXIT_NEGATIVE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(parse_shape("201x201").unwrap().0, vec![201, 201]);
        assert_eq!(parse_shape("3,4,5").unwrap().0, vec![3, 4, 5]);
        assert!(parse_shape("1x5").is_err());
        assert!(parse_shape("ax5").is_err());
        assert!(parse_shape("").is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
