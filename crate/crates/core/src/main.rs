//! `mrgark` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use mrgark::adapt::{drive, ControllerConfig, ExponentMode, Strategy};
use mrgark::gark::{
    assemble, check_decoupled, check_fsal, check_internal_consistency, check_stiff_accuracy, check_telescopic,
    derive_schedule, is_lower_triangular, permuted, GarkMatrix, Partition,
};
use mrgark::integrate::{convergence_study, fitted_order, Integrator, PartitionedOde, State, StepStats, Tolerances};
use mrgark::order::{classify, residuals_of, Weights};
use mrgark::problems::{reference_error, CoupledPair, Diffusion, GrayScott, LinearTwoRate, Swapped};
use mrgark::stability::{scan_region, DEFAULT_N_RHO, DEFAULT_N_THETA, DEFAULT_RHO_MAX};
use mrgark::tableaux::{
    list_methods, method_names, registry_lookup, registry_lookup_with, ButcherTableau, Flag, MrGarkMethod,
};
use mrgark::Error;

#[derive(Parser)]
#[command(
    name = "mrgark",
    version,
    about = "Multirate GARK methods: inspection, verification, stability and integration"
)]
struct Cli {
    /// Directory receiving CSV and JSON outputs.
    #[arg(long, global = true, env = "MRGARK_OUT_DIR", default_value = "mrgark-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List registered methods with orders and flags.
    ListMethods {
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Print base tableaux, coupling blocks and the assembled tableau at ratio M.
    DumpTableau(DumpArgs),
    /// Print structural properties over a range of ratios.
    Check {
        method: String,
        /// Ratio list, e.g. `1:8` or `2,4`.
        #[arg(long = "M", default_value = "1:8")]
        m: String,
    },
    /// Verify declared orders over an M sweep and write the residuals as CSV.
    Verify(VerifyArgs),
    /// Fixed-step convergence sweep over a dyadic ladder of macro-steps.
    Converge(ConvergeArgs),
    /// Sample |R| over the (theta_f, theta_s, rho) grid.
    Stability(StabilityArgs),
    /// Integrate a test problem with fixed or adaptive macro-steps.
    Integrate(IntegrateArgs),
}

#[derive(Args)]
struct DumpArgs {
    method: String,
    #[arg(long = "M", default_value_t = 1)]
    m: usize,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Free parameter override `name=value` (repeatable).
    #[arg(long = "param")]
    params: Vec<String>,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct VerifyArgs {
    /// Method name; omit with --all.
    method: Option<String>,
    /// Verify every registered method.
    #[arg(long)]
    all: bool,
    #[arg(long = "M-sweep", default_value = "1:8")]
    m_sweep: String,
    /// Weight pair used for the residual CSV.
    #[arg(long, value_enum, default_value = "main")]
    weights: WeightsArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightsArg {
    Main,
    Embedded,
    Mixed,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum ProblemName {
    Linear,
    Coupled,
    GrayScott,
}

#[derive(Args, Clone)]
struct ProblemArgs {
    /// Test problem.
    #[arg(long, value_enum)]
    problem: Option<ProblemName>,
    /// JSON object overriding problem fields, e.g. `{"lambda_fast": -20}`.
    #[arg(long)]
    problem_params: Option<String>,
    /// Gray–Scott grid size per side.
    #[arg(long)]
    n: Option<usize>,
    /// Gray–Scott diffusion model.
    #[arg(long, value_enum)]
    diffusion: Option<DiffusionArg>,
    /// Exchange the fast and slow partitions.
    #[arg(long)]
    swap_partitions: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum DiffusionArg {
    Linear,
    Nonlinear,
}

#[derive(Args)]
struct ConvergeArgs {
    method: String,
    #[command(flatten)]
    problem: ProblemArgs,
    /// Ratio list.
    #[arg(long = "M", default_value = "2,4")]
    m: String,
    /// Exponents k of H = t_end·2^{-k}, e.g. `3:7`.
    #[arg(long, default_value = "3:7")]
    ladder: String,
    #[arg(long, default_value_t = 1.0)]
    t_end: f64,
    /// Reference step count factor over the finest ladder entry (when no exact solution exists).
    #[arg(long, default_value_t = 64)]
    ref_factor: usize,
}

#[derive(Args)]
struct StabilityArgs {
    method: String,
    #[arg(long = "M", default_value_t = 1)]
    m: usize,
    #[arg(long, default_value_t = DEFAULT_RHO_MAX)]
    rho_max: f64,
    #[arg(long, default_value_t = DEFAULT_N_THETA)]
    n_theta: usize,
    #[arg(long, default_value_t = DEFAULT_N_RHO)]
    n_rho: usize,
    /// Output CSV path (default inside the output directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum StrategyArg {
    Balancing,
    Efficiency,
    Classic,
}

#[derive(Args)]
struct IntegrateArgs {
    /// JSON file with any of the options below; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[command(flatten)]
    problem: ProblemArgs,
    /// Macro-step (initial macro-step when adaptive).
    #[arg(long = "H")]
    h: Option<f64>,
    /// Ratio (initial ratio when adaptive).
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    t_end: Option<f64>,
    /// Fixed macro-steps (default).
    #[arg(long, conflicts_with = "adaptive")]
    fixed: bool,
    /// Adaptive control strategy.
    #[arg(long, value_enum)]
    adaptive: Option<StrategyArg>,
    #[arg(long)]
    abstol: Option<f64>,
    #[arg(long)]
    reltol: Option<f64>,
    /// Synthetic slow/fast cost ratio replacing measured timings.
    #[arg(long)]
    ts_tf_ratio: Option<f64>,
    /// Macro-step exponent of the balancing strategy.
    #[arg(long, value_enum)]
    exponent_mode: Option<ExponentArg>,
    #[arg(long)]
    m_min: Option<usize>,
    #[arg(long)]
    m_max: Option<usize>,
    /// Write every k-th accepted state to the trajectory CSV.
    #[arg(long)]
    every: Option<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum ExponentArg {
    Order,
    Classic,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntegrateFile {
    method: Option<String>,
    problem: Option<ProblemName>,
    problem_params: Option<Value>,
    n: Option<usize>,
    diffusion: Option<DiffusionArg>,
    swap_partitions: Option<bool>,
    #[serde(rename = "H")]
    h: Option<f64>,
    #[serde(rename = "M")]
    m: Option<usize>,
    t_end: Option<f64>,
    adaptive: Option<StrategyArg>,
    abstol: Option<f64>,
    reltol: Option<f64>,
    ts_tf_ratio: Option<f64>,
    exponent_mode: Option<ExponentArg>,
    m_min: Option<usize>,
    m_max: Option<usize>,
    every: Option<usize>,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownMethod(_)
            | Error::UnknownParameter { .. }
            | Error::InvalidRatio(_)
            | Error::LambdaOutOfRange { .. }
            | Error::Coefficient(_)
            | Error::InvalidInput(_)
            | Error::NotImplicitPartition(_) => Failure::Usage(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numerical(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Numerical(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(format!("json: {e}"))
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = cli.out_dir;
    let res = match cli.command {
        Command::ListMethods { json } => cmd_list(json),
        Command::DumpTableau(a) => cmd_dump(&out, a),
        Command::Check { method, m } => cmd_check(&method, &m),
        Command::Verify(a) => cmd_verify(&out, a),
        Command::Converge(a) => cmd_converge(&out, a),
        Command::Stability(a) => cmd_stability(&out, a),
        Command::Integrate(a) => cmd_integrate(&out, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// `a:b` inclusive, `a,b,c`, or a single integer.
fn parse_list(s: &str) -> std::result::Result<Vec<usize>, Failure> {
    let bad = || usage(format!("cannot parse list {s:?}"));
    let v: Vec<usize> = if let Some((a, b)) = s.split_once(':') {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad()))
            .collect::<std::result::Result<_, _>>()?
    };
    if v.is_empty() {
        return Err(bad());
    }
    Ok(v)
}

fn slug(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    s.trim_matches('-').to_string()
}

fn ensure_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> CmdResult {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, v)?;
    writeln!(f)?;
    Ok(())
}

fn write_manifest(dir: &Path, command: &str, details: Value) -> CmdResult {
    let v = json!({
        "tool": "mrgark",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "run": details,
        "determinism": "no randomness; identical inputs give identical CSV outputs \
                        (adaptive runs without a synthetic cost ratio depend on measured timings)",
    });
    write_json(&dir.join(format!("manifest_{command}.json")), &v)
}

fn cmd_list(as_json: bool) -> CmdResult {
    let infos = list_methods();
    if as_json {
        println!("{}", serde_json::to_string_pretty(&infos)?);
        return Ok(());
    }
    for i in infos {
        let flags: Vec<String> = i.flags.iter().map(|f| format!("{f:?}")).collect();
        println!(
            "{:<16} p={} p_hat={} {}",
            i.name,
            i.order_p,
            i.embedded_order,
            flags.join(",")
        );
    }
    Ok(())
}

fn matrix_rows(a: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect()
}

fn tableau_json(t: &ButcherTableau) -> Value {
    json!({
        "A": matrix_rows(&t.a),
        "b": t.b.as_slice(),
        "b_hat": t.b_hat.as_slice(),
        "c": t.c.as_slice(),
        "gamma": t.gamma(),
    })
}

fn lookup(name: &str, params: &[String]) -> std::result::Result<MrGarkMethod, Failure> {
    if params.is_empty() {
        return Ok(registry_lookup(name)?);
    }
    let pairs: Vec<(&str, &str)> = params
        .iter()
        .map(|p| {
            p.split_once('=')
                .ok_or_else(|| usage(format!("parameter {p:?} is not name=value")))
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(registry_lookup_with(name, &pairs)?)
}

fn assembled_b_hat(g: &GarkMatrix) -> Vec<f64> {
    g.b_hat_fast.iter().chain(g.b_hat_slow.iter()).copied().collect()
}

fn cmd_dump(out_dir: &Path, a: DumpArgs) -> CmdResult {
    let method = lookup(&a.method, &a.params)?;
    let g = assemble(&method, a.m)?;
    let mut buf: Vec<u8> = Vec::new();
    match a.format {
        Format::Json => {
            let fs: Vec<_> = method.fs_coupling.eval_all(a.m)?.iter().map(matrix_rows).collect();
            let sf: Vec<_> = method.sf_coupling.eval_all(a.m)?.iter().map(matrix_rows).collect();
            let v = json!({
                "method": method.name,
                "M": a.m,
                "order": method.order_p,
                "embedded_order": method.embedded_order,
                "flags": method.flags,
                "fast": tableau_json(&method.fast),
                "slow": tableau_json(&method.slow),
                "A_fs": fs,
                "A_sf": sf,
                "assembled": {
                    "A": matrix_rows(&g.a),
                    "b": g.b.as_slice(),
                    "b_hat": assembled_b_hat(&g),
                    "c": g.c.as_slice(),
                },
            });
            serde_json::to_writer_pretty(&mut buf, &v)?;
            buf.push(b'\n');
        }
        Format::Csv => {
            let n = g.size();
            let mut w = csv::Writer::from_writer(&mut buf);
            let mut header = vec!["row".to_string(), "partition".into(), "lambda".into(), "c".into()];
            header.extend((1..=n).map(|j| format!("a{j}")));
            w.write_record(&header)?;
            for r in 0..n {
                let (part, lam) = match g.partition_of(r) {
                    Partition::Fast => ("fast", (r / g.s_f + 1).to_string()),
                    Partition::Slow => ("slow", String::new()),
                };
                let mut rec = vec![(r + 1).to_string(), part.into(), lam, format!("{:.17e}", g.c[r])];
                rec.extend(g.a.row(r).iter().map(|x| format!("{x:.17e}")));
                w.write_record(&rec)?;
            }
            for (label, wts) in [
                ("b", g.b.iter().copied().collect::<Vec<_>>()),
                ("b_hat", assembled_b_hat(&g)),
            ] {
                let mut rec = vec![label.to_string(), String::new(), String::new(), String::new()];
                rec.extend(wts.iter().map(|x| format!("{x:.17e}")));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
    }
    match a.out {
        Some(p) => {
            let p = if p.is_relative() { out_dir.join(p) } else { p };
            if let Some(parent) = p.parent() {
                ensure_dir(parent)?;
            }
            fs::write(&p, &buf)?;
            write_manifest(
                out_dir,
                "dump-tableau",
                json!({"method": method.name, "M": a.m, "file": p}),
            )?;
        }
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn cmd_check(name: &str, m_list: &str) -> CmdResult {
    let method = registry_lookup(name)?;
    let ms = parse_list(m_list)?;
    let mut ok = true;
    println!(
        "{:>4} {:>11} {:>9} {:>11} {:>10} {:>6} {:>10}  ic",
        "M", "consistent", "decoupled", "telescopic", "stiff-acc", "fsal", "triangular"
    );
    for m in ms {
        let g = assemble(&method, m)?;
        let cons = check_internal_consistency(&g).pass;
        let dec = check_decoupled(&g);
        let tel = check_telescopic(&method);
        let stiff = if method.has(Flag::StifflyAccurateSlow) {
            check_stiff_accuracy(&method, m, Partition::Slow)?
        } else if method.has(Flag::StifflyAccurateFast) {
            check_stiff_accuracy(&method, m, Partition::Fast)?
        } else {
            true
        };
        let fsal = check_fsal(&g);
        let sched = derive_schedule(&g)?;
        let explicit = !g.fast_implicit && !g.slow_implicit;
        let tri = is_lower_triangular(&permuted(&g, &sched), explicit);
        let row_ok =
            cons && dec && tri && stiff && tel == method.has(Flag::Telescopic) && (!method.has(Flag::Fsal) || fsal);
        ok &= row_ok;
        let ic: Vec<String> = sched.ic().iter().map(|k| k.to_string()).collect();
        println!(
            "{:>4} {:>11} {:>9} {:>11} {:>10} {:>6} {:>10}  [{}]",
            m,
            yes(cons),
            yes(dec),
            yes(tel),
            yes(stiff),
            yes(fsal),
            yes(tri),
            ic.join(",")
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "{name}: a declared structural property failed"
        )))
    }
}

fn cmd_verify(out_dir: &Path, a: VerifyArgs) -> CmdResult {
    let names: Vec<String> = match (&a.method, a.all) {
        (Some(_), true) => return Err(usage("give a method name or --all, not both")),
        (Some(n), false) => vec![n.clone()],
        (None, true) => method_names().into_iter().map(String::from).collect(),
        (None, false) => return Err(usage("a method name or --all is required")),
    };
    let sweep = parse_list(&a.m_sweep)?;
    let weights: &[Weights] = match a.weights {
        WeightsArg::Main => &[Weights::Main],
        WeightsArg::Embedded => &[Weights::Embedded],
        WeightsArg::Mixed => &[Weights::MixedSlowHat, Weights::MixedFastHat],
    };
    let methods: Vec<MrGarkMethod> = names
        .iter()
        .map(|n| registry_lookup(n))
        .collect::<std::result::Result<_, _>>()?;
    ensure_dir(out_dir)?;
    let file = if a.all {
        out_dir.join("residuals_all.csv")
    } else {
        out_dir.join(format!("residuals_{}.csv", slug(&names[0])))
    };
    let mut w = csv::Writer::from_path(&file)?;
    w.write_record([
        "method",
        "M",
        "weights",
        "condition",
        "order",
        "group",
        "value",
        "residual",
    ])?;
    println!(
        "{:<16} {:>8} {:>8} {:>9} {:>12}  status",
        "method", "declared", "verified", "nat.adapt", "max|res|"
    );
    let mut failures = Vec::new();
    for method in &methods {
        for &m in &sweep {
            let g = assemble(method, m)?;
            for &wt in weights {
                for e in residuals_of(&g, method.name, wt).entries {
                    w.write_record([
                        method.name.to_string(),
                        m.to_string(),
                        format!("{wt:?}"),
                        e.id,
                        e.order.to_string(),
                        format!("{:?}", e.group),
                        format!("{:.17e}", e.value),
                        format!("{:.17e}", e.residual),
                    ])?;
                }
            }
        }
        let c = classify(method, &sweep)?;
        // natural adaptivity concerns genuinely multirate ratios
        let multirate: Vec<usize> = sweep.iter().copied().filter(|&m| m >= 2).collect();
        let na = if multirate.is_empty() {
            c.naturally_adaptive
        } else {
            classify(method, &multirate)?.naturally_adaptive
        };
        let mut problems = Vec::new();
        if c.order != method.order_p {
            problems.push(format!("order {} != {}", c.order, method.order_p));
        }
        if c.embedded_order != method.embedded_order {
            problems.push(format!(
                "embedded order {} != {}",
                c.embedded_order, method.embedded_order
            ));
        }
        if method.has(Flag::NaturallyAdaptive) && !na {
            problems.push("not naturally adaptive".into());
        }
        println!(
            "{:<16} {:>8} {:>8} {:>9} {:>12.3e}  {}",
            method.name,
            format!("{}({})", method.order_p, method.embedded_order),
            format!("{}({})", c.order, c.embedded_order),
            yes(na),
            c.max_residual,
            if problems.is_empty() {
                "ok".to_string()
            } else {
                problems.join("; ")
            }
        );
        if !problems.is_empty() {
            failures.push(format!("{}: {}", method.name, problems.join("; ")));
        }
    }
    w.flush()?;
    write_manifest(
        out_dir,
        "verify",
        json!({"methods": names, "M_sweep": sweep, "weights": format!("{:?}", weights), "file": file}),
    )?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(failures.join("\n")))
    }
}

fn build_problem(
    p: &ProblemArgs,
    file: Option<&Value>,
) -> std::result::Result<(Box<dyn PartitionedOde>, State), Failure> {
    let overrides: Option<Value> = match (&p.problem_params, file) {
        (Some(s), _) => Some(serde_json::from_str(s)?),
        (None, Some(v)) => Some(v.clone()),
        (None, None) => None,
    };
    fn merged<T: Serialize + for<'de> Deserialize<'de>>(
        base: T,
        over: &Option<Value>,
    ) -> std::result::Result<T, Failure> {
        let Some(over) = over else { return Ok(base) };
        let Value::Object(o) = over else {
            return Err(usage("problem parameters must be a JSON object"));
        };
        let mut v = serde_json::to_value(base)?;
        let target = v.as_object_mut().ok_or_else(|| usage("problem has no parameters"))?;
        for (k, x) in o {
            if !target.contains_key(k) {
                return Err(usage(format!("unknown problem parameter {k:?}")));
            }
            target.insert(k.clone(), x.clone());
        }
        Ok(serde_json::from_value(v)?)
    }
    let (ode, y0): (Box<dyn PartitionedOde>, State) = match p.problem.unwrap_or(ProblemName::Linear) {
        ProblemName::Linear => {
            let lin: LinearTwoRate = merged(LinearTwoRate::default(), &overrides)?;
            (Box::new(lin), State::from_element(1, lin.y0))
        }
        ProblemName::Coupled => {
            let c: CoupledPair = merged(CoupledPair::default(), &overrides)?;
            (Box::new(c), State::from_vec(vec![1.0, 0.5]))
        }
        ProblemName::GrayScott => {
            let mode = match p.diffusion.unwrap_or(DiffusionArg::Nonlinear) {
                DiffusionArg::Linear => Diffusion::Linear,
                DiffusionArg::Nonlinear => Diffusion::Nonlinear,
            };
            let n = p.n.unwrap_or(32);
            if n < 4 {
                return Err(usage("Gray–Scott grid needs n >= 4"));
            }
            let mut gs: GrayScott = merged(GrayScott::new(n, mode), &overrides)?;
            gs.refresh();
            let y0 = gs.initial_condition();
            (Box::new(gs), y0)
        }
    };
    Ok((ode, y0))
}

/// Owns the problem and optionally presents it with the partitions exchanged.
struct Problem {
    inner: Box<dyn PartitionedOde>,
    swap: bool,
}

impl Problem {
    fn ode(&self) -> Box<dyn PartitionedOde + '_> {
        if self.swap {
            Box::new(Swapped(self.inner.as_ref()))
        } else {
            Box::new(Borrowed(self.inner.as_ref()))
        }
    }
}

struct Borrowed<'a>(&'a dyn PartitionedOde);

impl PartitionedOde for Borrowed<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn f_slow(&self, t: f64, y: &State) -> State {
        self.0.f_slow(t, y)
    }
    fn f_fast(&self, t: f64, y: &State) -> State {
        self.0.f_fast(t, y)
    }
    fn jac_slow(&self, t: f64, y: &State) -> Option<nalgebra::DMatrix<f64>> {
        self.0.jac_slow(t, y)
    }
    fn jac_fast(&self, t: f64, y: &State) -> Option<nalgebra::DMatrix<f64>> {
        self.0.jac_fast(t, y)
    }
    fn exact_solution(&self, t: f64) -> Option<State> {
        self.0.exact_solution(t)
    }
}

fn cmd_converge(out_dir: &Path, a: ConvergeArgs) -> CmdResult {
    let method = registry_lookup(&a.method)?;
    let ratios = parse_list(&a.m)?;
    let ladder = parse_list(&a.ladder)?;
    if !(a.t_end > 0.0) {
        return Err(usage("--t-end must be positive"));
    }
    if ladder.iter().any(|&k| k > 40) {
        return Err(usage("ladder exponents above 40 are not supported"));
    }
    let (inner, y0) = build_problem(&a.problem, None)?;
    let prob = Problem {
        inner,
        swap: a.problem.swap_partitions,
    };
    let ode = prob.ode();
    let steps: Vec<usize> = ladder.iter().map(|&k| 1usize << k).collect();
    let rows = convergence_study(&method, ode.as_ref(), &y0, a.t_end, &steps, &ratios, a.ref_factor);
    ensure_dir(out_dir)?;
    let file = out_dir.join(format!("converge_{}.csv", slug(method.name)));
    let mut w = csv::Writer::from_path(&file)?;
    w.write_record(["H", "M", "error", "observed_order", "failure"])?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.12e}"));
    println!("{:>12} {:>4} {:>14} {:>8}", "H", "M", "error", "order");
    for r in &rows {
        w.write_record([
            format!("{:.12e}", r.h),
            r.m.to_string(),
            opt(r.error),
            opt(r.observed_order),
            r.failure.clone().unwrap_or_default(),
        ])?;
        println!(
            "{:>12.5e} {:>4} {:>14} {:>8}",
            r.h,
            r.m,
            r.error
                .map_or_else(|| r.failure.clone().unwrap_or_default(), |e| format!("{e:.5e}")),
            r.observed_order.map_or(String::new(), |o| format!("{o:.3}"))
        );
    }
    w.flush()?;
    for &m in &ratios {
        let sub: Vec<_> = rows.iter().filter(|r| r.m == m).cloned().collect();
        if let Some(p) = fitted_order(&sub) {
            println!("M = {m}: fitted order {p:.3} (declared {})", method.order_p);
        }
    }
    write_manifest(
        out_dir,
        "converge",
        json!({
            "method": method.name,
            "problem": a.problem.problem.unwrap_or(ProblemName::Linear),
            "M": ratios,
            "H": steps.iter().map(|n| a.t_end / *n as f64).collect::<Vec<_>>(),
            "t_end": a.t_end,
            "ref_factor": a.ref_factor,
            "file": file,
        }),
    )?;
    if rows.iter().all(|r| r.error.is_none()) {
        return Err(Failure::Numerical("every cell of the sweep failed".into()));
    }
    Ok(())
}

fn cmd_stability(out_dir: &Path, a: StabilityArgs) -> CmdResult {
    let method = registry_lookup(&a.method)?;
    let g = assemble(&method, a.m)?;
    let grid = scan_region(&g, a.rho_max, a.n_theta, a.n_rho)?;
    ensure_dir(out_dir)?;
    let path = match a.out {
        Some(p) if p.is_relative() => out_dir.join(p),
        Some(p) => p,
        None => out_dir.join(format!("stability_{}_M{}.csv", slug(method.name), a.m)),
    };
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    grid.write_csv(fs::File::create(&path)?)?;
    println!(
        "{}: stable fraction {:.4} -> {}",
        method.name,
        grid.stable_fraction(),
        path.display()
    );
    write_manifest(
        out_dir,
        "stability",
        json!({
            "method": method.name,
            "M": a.m,
            "rho_max": a.rho_max,
            "n_theta": a.n_theta,
            "n_rho": a.n_rho,
            "file": path,
        }),
    )
}

fn stats_json(s: &StepStats) -> Value {
    json!({
        "fast_evals": s.fast_evals,
        "slow_evals": s.slow_evals,
        "fsal_reused": s.fsal_reused,
        "newton_iterations": s.newton_iterations.iter().sum::<usize>(),
        "newton_rhs_evals": s.newton_rhs_evals,
    })
}

fn cmd_integrate(out_dir: &Path, a: IntegrateArgs) -> CmdResult {
    let file: IntegrateFile = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => IntegrateFile::default(),
    };
    let name = a
        .method
        .clone()
        .or(file.method)
        .ok_or_else(|| usage("--method is required"))?;
    let method = registry_lookup(&name)?;
    let mut pargs = a.problem.clone();
    pargs.problem = pargs.problem.or(file.problem);
    pargs.n = pargs.n.or(file.n);
    pargs.diffusion = pargs.diffusion.or(file.diffusion);
    pargs.swap_partitions |= file.swap_partitions.unwrap_or(false);
    let h = a.h.or(file.h).ok_or_else(|| usage("--H is required"))?;
    let m = a.m.or(file.m).unwrap_or(1);
    let t_end = a.t_end.or(file.t_end).ok_or_else(|| usage("--t-end is required"))?;
    let strategy = if a.fixed { None } else { a.adaptive.or(file.adaptive) };
    let abstol = a.abstol.or(file.abstol).unwrap_or(1e-4);
    let reltol = a.reltol.or(file.reltol).unwrap_or(1e-4);
    let every = a.every.or(file.every).unwrap_or(1).max(1);
    if !(h > 0.0 && h.is_finite()) || !(t_end > 0.0 && t_end.is_finite()) {
        return Err(usage("--H and --t-end must be positive"));
    }
    let (inner, y0) = build_problem(&pargs, file.problem_params.as_ref())?;
    let prob = Problem {
        inner,
        swap: pargs.swap_partitions,
    };
    let ode = prob.ode();
    let d = ode.dim();
    let mut integ = Integrator::new(method.clone());
    ensure_dir(out_dir)?;
    let tag = slug(method.name);
    let traj_path = out_dir.join(format!("trajectory_{tag}.csv"));
    let mut traj = csv::Writer::from_path(&traj_path)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| format!("y{i}")));
    traj.write_record(&header)?;
    let record = |w: &mut csv::Writer<fs::File>, t: f64, y: &State| -> CmdResult {
        let mut rec = vec![format!("{t:.17e}")];
        rec.extend(y.iter().map(|x| format!("{x:.17e}")));
        w.write_record(&rec)?;
        Ok(())
    };
    record(&mut traj, 0.0, &y0)?;
    let mut summary = json!({
        "method": method.name,
        "problem": pargs.problem.unwrap_or(ProblemName::Linear),
        "swap_partitions": pargs.swap_partitions,
        "dim": d,
        "t_end": t_end,
    });
    let (y_final, t_final) = match strategy {
        None => {
            let n = ((t_end / h).round() as usize).max(1);
            let hh = t_end / n as f64;
            let plan = integ.plan(m)?;
            let mut y = y0.clone();
            let mut stats = StepStats::default();
            for k in 0..n {
                let t = k as f64 * hh;
                let r = mrgark::integrate::step_with_plan(&method, &plan, ode.as_ref(), t, &y, hh, integ.options)?;
                stats.absorb(&r.stats);
                y = r.y_next;
                if (k + 1) % every == 0 || k + 1 == n {
                    record(&mut traj, t + hh, &y)?;
                }
            }
            summary["mode"] = json!("fixed");
            summary["H"] = json!(hh);
            summary["M"] = json!(m);
            summary["steps"] = json!(n);
            summary["stats"] = stats_json(&stats);
            (y, t_end)
        }
        Some(s) => {
            let strat = match s {
                StrategyArg::Balancing => Strategy::Balancing,
                StrategyArg::Efficiency => Strategy::Efficiency,
                StrategyArg::Classic => Strategy::Classic,
            };
            let mut cfg = ControllerConfig::new(strat, Tolerances::scalar(d, abstol, reltol));
            cfg.cost_ratio = a.ts_tf_ratio.or(file.ts_tf_ratio);
            if let Some(e) = a.exponent_mode.or(file.exponent_mode) {
                cfg.exponent_mode = match e {
                    ExponentArg::Order => ExponentMode::Order,
                    ExponentArg::Classic => ExponentMode::Classic,
                };
            }
            if let Some(v) = a.m_min.or(file.m_min) {
                cfg.m_min = v;
            }
            if let Some(v) = a.m_max.or(file.m_max) {
                cfg.m_max = v;
            }
            let out = drive(&mut integ, ode.as_ref(), &y0, 0.0, t_end, h, m, &cfg)?;
            let trace_path = out_dir.join(format!("trace_{tag}.csv"));
            let mut tw = csv::Writer::from_path(&trace_path)?;
            for row in &out.state.trace {
                tw.serialize(row)?;
            }
            tw.flush()?;
            record(&mut traj, out.t, &out.y)?;
            summary["mode"] = json!(format!("adaptive-{}", slug(&format!("{s:?}"))));
            summary["H0"] = json!(h);
            summary["M0"] = json!(m);
            summary["accepted"] = json!(out.state.accepted);
            summary["rejected"] = json!(out.state.rejected);
            summary["mean_M"] = json!(out.state.mean_ratio());
            summary["abstol"] = json!(abstol);
            summary["reltol"] = json!(reltol);
            summary["ts_tf_ratio"] = json!(cfg.cost_ratio);
            summary["stats"] = stats_json(&out.stats);
            summary["trace"] = json!(trace_path);
            (out.y, out.t)
        }
    };
    traj.flush()?;
    summary["error"] = match reference_error(ode.as_ref(), &y_final, t_final) {
        Ok(e) => json!(e),
        Err(_) => Value::Null,
    };
    summary["trajectory"] = json!(traj_path);
    write_json(&out_dir.join(format!("summary_{tag}.json")), &summary)?;
    write_manifest(
        out_dir,
        "integrate",
        json!({
            "method": method.name,
            "M": m,
            "H": h,
            "t_end": t_end,
            "abstol": abstol,
            "reltol": reltol,
            "strategy": strategy,
        }),
    )?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
