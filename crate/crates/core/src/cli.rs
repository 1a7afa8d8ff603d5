//! Command-line front end. Every subcommand writes CSV (with a header
//! row) or JSON to `--out` or standard output; equal arguments give equal
//! bytes.

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;

use crate::construction::{
    build_separated_set, check_tree, divergence_check, OracleMode, Schedule, SeparatedSetSpec, Tree, TreeConfig, TreeParams,
    DEFAULT_CAP,
};
use crate::dimension::{
    boxcount_dimension, frostman_lower_bound, geometric_ladder, hausdorff_bounds, leaf_coordinates, paper_density_schedule,
    DiameterMode, TreeCollection,
};
use crate::entropy::{c_grid, convex_combination_curve, estimate_sequence, separated_entropy_lb, EntropyExperiment};
use crate::error::{Error, Result};
use crate::height::{height_at, height_series, CuspOrbitState};
use crate::params::{lookup, registry, RankOneParams};
use crate::sl2::{height_direct, LatticePoint, Mat2, Sl2Convention};
use crate::group::UPoint;

/// Exit status for violated invariants.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for bad arguments or inputs.
pub const EXIT_USAGE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "rank1-lab", version, about = "Cusp excursions, divergent-on-average trees and entropy bounds for rank-one quotients")]
pub struct Cli {
    /// Registry instance (rhck2, rhp2, su21).
    #[arg(long, global = true, default_value = "rhck2")]
    pub instance: String,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (falls back to RANK1_LAB_THREADS).
    #[arg(long, global = true, env = "RANK1_LAB_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Structural constants of the registry instances.
    Instance {
        #[command(subcommand)]
        action: InstanceAction,
    },
    /// Orbit of a point of the modular surface under the time-one geodesic
    /// map: heights from lattice reduction against the closed-form cusp
    /// height formulas.
    Orbit(OrbitArgs),
    /// Closed-form cusp heights along an orbit given in normal form
    /// (A-coordinate r and either the sigma cell or a U-part (Z, X)).
    Heights(HeightsArgs),
    /// Build the grid of U-displacements whose orbits stay between s/39 and
    /// s for R steps and are pairwise (R, η)-separated, then verify it.
    Separated(SeparatedArgs),
    /// Build the nested tree of joined separated sets and export one JSON
    /// line {index, Z, X, depth} per node.
    Tree(TreeArgs),
    /// Frostman-type lower bound from stage densities, box-counting slope of
    /// tree leaves, or the Hausdorff dimension bounds of the divergent set.
    Dimension(DimensionArgs),
    /// Separated-set entropy bound and the mass–entropy frontier obtained by
    /// mixing Haar measure with escaping measures.
    Entropy(EntropyArgs),
    /// Time spent below a height threshold by limit points of a tree built
    /// with real lattice joins, against the divergence-on-average bound.
    Mass(MassArgs),
}

#[derive(Debug, Subcommand)]
pub enum InstanceAction {
    /// All registry instances as JSON.
    List,
    /// The instance selected by --instance.
    Show,
}

#[derive(Debug, Args)]
pub struct OrbitArgs {
    /// `sigma:R`, `u:R:T` (T the U-parameter of the lower unipotent) or
    /// `matrix:a,b,c,d`.
    #[arg(long)]
    pub start: String,
    #[arg(long, default_value_t = 50)]
    pub steps: u64,
}

#[derive(Debug, Args)]
pub struct HeightsArgs {
    #[arg(long)]
    pub r: f64,
    /// Use the sigma cell (no U-part).
    #[arg(long, conflicts_with_all = ["z", "x"])]
    pub sigma: bool,
    /// Comma-separated Z coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub z: Vec<f64>,
    /// Comma-separated X coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub steps: u64,
}

#[derive(Debug, Args)]
pub struct SeparatedArgs {
    #[arg(long = "R")]
    pub big_r: u32,
    #[arg(long, default_value_t = 100.0)]
    pub s: f64,
    #[arg(long, default_value_t = 0.4)]
    pub eta: f64,
    /// A-coordinate of the base point; the top of the admissible interval
    /// when absent.
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    pub cap: usize,
    /// Report counts in log space instead of failing above the cap.
    #[arg(long)]
    pub log_mode: bool,
}

#[derive(Debug, Args)]
pub struct TreeArgs {
    #[arg(long, default_value_t = 3)]
    pub depth: u32,
    /// `paper` (R_k = k + 5) or `constant:R`.
    #[arg(long, default_value = "paper")]
    pub schedule: Schedule,
    /// `synthetic` or `sl2`.
    #[arg(long, default_value = "synthetic")]
    pub mode: OracleMode,
    /// Joining time (synthetic mode; selected from the lattice otherwise).
    #[arg(long = "Rprime")]
    pub rprime: Option<u32>,
    /// Run the invariant checks and print the report to standard error.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DimensionMode {
    Frostman,
    Boxcount,
    Bounds,
}

#[derive(Debug, Args)]
pub struct DimensionArgs {
    #[arg(long, value_enum, default_value = "bounds")]
    pub mode: DimensionMode,
    /// Stages (frostman) or tree depth (boxcount).
    #[arg(long)]
    pub depth: Option<u32>,
    #[arg(long = "Rprime", default_value_t = 10)]
    pub rprime: u32,
    /// `exact` or `paper-bound`.
    #[arg(long, default_value = "paper-bound")]
    pub diameters: DiameterMode,
    /// Trailing fraction of stages used for the limsup.
    #[arg(long, default_value_t = 0.5)]
    pub window: f64,
    /// Rungs of the box-size ladder.
    #[arg(long, default_value_t = 12)]
    pub rungs: usize,
}

#[derive(Debug, Args)]
pub struct EntropyArgs {
    #[arg(long = "R", default_value_t = 100)]
    pub big_r: u32,
    #[arg(long = "Rprime", default_value_t = 10)]
    pub rprime: u32,
    #[arg(long, default_value_t = 1)]
    pub m: u32,
    /// Number of entropy targets between h_m/2 and h_m.
    #[arg(long = "c-grid", default_value_t = 11)]
    pub c_grid: usize,
    #[arg(long, default_value_t = 100.0)]
    pub s: f64,
}

#[derive(Debug, Args)]
pub struct MassArgs {
    #[arg(long, default_value_t = 6)]
    pub depth: u32,
    /// Smallest depth reported.
    #[arg(long, default_value_t = 4)]
    pub from: u32,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Height threshold of the compact part.
    #[arg(long, default_value_t = 4.0)]
    pub s: f64,
    /// Strip crossing time.
    #[arg(long, default_value_t = 2)]
    pub ell: u32,
}

/// Parses `args`, runs the command and returns the exit status.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) => EXIT_VALIDATION,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let params = lookup(&cli.instance)?;
    let body = match cli.threads {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            pool.install(|| dispatch(cli, &params))
        }
        Some(_) => return Err(Error::InvalidParameter("--threads must be positive".into())),
        None => dispatch(cli, &params),
    };
    let Output { text, failure } = body?;
    match &cli.out {
        Some(path) => std::fs::write(path, text.as_bytes())?,
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())?;
            so.flush()?;
        }
    }
    match failure {
        Some(msg) => Err(Error::Validation(msg)),
        None => Ok(()),
    }
}

/// Artifact text plus an invariant failure to report after writing it.
struct Output {
    text: String,
    failure: Option<String>,
}

impl Output {
    fn ok(text: String) -> Self {
        Output { text, failure: None }
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn dispatch(cli: &Cli, params: &RankOneParams) -> Result<Output> {
    match &cli.command {
        Command::Instance { action } => match action {
            InstanceAction::List => Ok(Output::ok(json(&registry())?)),
            InstanceAction::Show => Ok(Output::ok(json(params)?)),
        },
        Command::Orbit(a) => orbit(params, a),
        Command::Heights(a) => heights(params, a),
        Command::Separated(a) => separated(params, a),
        Command::Tree(a) => tree(params, a, cli.seed),
        Command::Dimension(a) => dimension(params, a, cli.seed),
        Command::Entropy(a) => entropy(params, a),
        Command::Mass(a) => mass(params, a, cli.seed),
    }
}

fn parse_start(conv: Sl2Convention, start: &str) -> Result<(Mat2, Option<CuspOrbitState>)> {
    let bad = || Error::InvalidParameter(format!("cannot parse start {start:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let (kind, rest) = start.split_once(':').ok_or_else(bad)?;
    match kind {
        "sigma" => {
            let st = CuspOrbitState::sigma(num(rest)?);
            Ok((conv.realize(&st), Some(st)))
        }
        "u" => {
            let (r, t) = rest.split_once(':').ok_or_else(bad)?;
            let st = CuspOrbitState::unipotent(num(r)?, conv.u_point(num(t)?));
            Ok((conv.realize(&st), Some(st)))
        }
        "matrix" => {
            let v: Vec<f64> = rest.split(',').map(num).collect::<Result<_>>()?;
            if v.len() != 4 {
                return Err(bad());
            }
            let m = Mat2::new(v[0], v[1], v[2], v[3]);
            if (m.det() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!("matrix has determinant {}", m.det())));
            }
            Ok((m, None))
        }
        _ => Err(bad()),
    }
}

fn orbit(params: &RankOneParams, a: &OrbitArgs) -> Result<Output> {
    let conv = Sl2Convention::for_params(params)?;
    let (g, state) = parse_start(conv, &a.start)?;
    let mut out = String::from("k,height_direct,height_formula,valid\n");
    let mut valid = state.is_some();
    for k in 0..=a.steps {
        let h = height_direct(&LatticePoint::new(g * conv.flow_element(k as f64)), conv);
        let (f, v) = match &state {
            Some(st) => {
                let f = height_at(st, k);
                valid &= f > params.s1;
                (f.to_string(), valid)
            }
            None => (String::new(), false),
        };
        out += &format!("{k},{h},{f},{v}\n");
    }
    Ok(Output::ok(out))
}

fn heights(params: &RankOneParams, a: &HeightsArgs) -> Result<Output> {
    let state = if a.sigma {
        CuspOrbitState::sigma(a.r)
    } else {
        let z = if a.z.is_empty() { vec![0.0; params.p2] } else { a.z.clone() };
        let x = if a.x.is_empty() { vec![0.0; params.p1] } else { a.x.clone() };
        if z.len() != params.p2 || x.len() != params.p1 {
            return Err(Error::DimensionMismatch { expected: params.dim_u(), got: z.len() + x.len() });
        }
        CuspOrbitState::unipotent(a.r, UPoint::new(z, x))
    };
    if !(a.r > 0.0) {
        return Err(Error::InvalidParameter("r must be positive".into()));
    }
    let mut out = String::from("k,height,valid\n");
    for (k, s) in height_series(&state, a.steps, params.s1).iter().enumerate() {
        out += &format!("{k},{},{}\n", s.height, s.valid);
    }
    Ok(Output::ok(out))
}

fn separated(params: &RankOneParams, a: &SeparatedArgs) -> Result<Output> {
    let r = a.r.unwrap_or(crate::construction::separated::r_interval(a.s).1);
    let spec = SeparatedSetSpec::new(params, a.s, a.big_r, a.eta, r)?;
    let set = build_separated_set(&spec, params, a.cap, a.log_mode)?;
    #[derive(Serialize)]
    struct Rep<'a> {
        spec: &'a SeparatedSetSpec,
        count: f64,
        log_count: f64,
        log_mode: bool,
        report: Option<crate::construction::SeparatedSetReport>,
    }
    let report = (!set.log_mode).then(|| crate::construction::verify_separated_set(&set, params));
    let failure = report.as_ref().filter(|r| !r.passed()).map(|_| "separated set violates its invariants".to_string());
    let text = json(&Rep { spec: &spec, count: set.count, log_count: set.log_count, log_mode: set.log_mode, report })?;
    Ok(Output { text, failure })
}

fn tree_config(a: &TreeArgs, seed: u64) -> TreeConfig {
    let mut cfg = TreeConfig::new(a.depth, a.mode, seed);
    cfg.schedule = a.schedule;
    if a.rprime.is_some() {
        cfg.rprime = a.rprime;
    }
    cfg
}

fn tree(params: &RankOneParams, a: &TreeArgs, seed: u64) -> Result<Output> {
    let t = Tree::build(params, &tree_config(a, seed))?;
    let mut buf = Vec::new();
    t.write_jsonl(&mut buf)?;
    let text = String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))?;
    let mut failure = None;
    if a.check {
        let rep = check_tree(&t, seed);
        eprintln!("{}", serde_json::to_string_pretty(&rep)?);
        failure = rep.first_failure().map(|f| format!("tree check failed: {f}"));
    }
    Ok(Output { text, failure })
}

fn dimension(params: &RankOneParams, a: &DimensionArgs, seed: u64) -> Result<Output> {
    match a.mode {
        DimensionMode::Bounds => Ok(Output::ok(json(&hausdorff_bounds(params))?)),
        DimensionMode::Frostman => {
            let n = a.depth.unwrap_or(400);
            let tp = TreeParams::new(params, 0.4, 1.0, a.rprime, Schedule::Paper)?;
            let ds = paper_density_schedule(params, &tp, n, a.diameters)?;
            let fb = frostman_lower_bound(&ds, params.dim_u() as f64, Some(a.window))?;
            let mut out = String::from("stage,delta,d,ln_delta,ln_d,running_bound\n");
            for j in 0..ds.len() {
                let bound = if j == 0 { String::new() } else { fb.bounds[j - 1].to_string() };
                let (ld, lr) = (ds.ln_deltas[j], ds.ln_diameters[j]);
                out += &format!("{j},{},{},{ld},{lr},{bound}\n", ld.exp(), lr.exp());
            }
            Ok(Output::ok(out))
        }
        DimensionMode::Boxcount => {
            let depth = a.depth.unwrap_or(6);
            let cfg = TreeConfig::new(depth, OracleMode::Synthetic, seed).with_rprime(a.rprime);
            let t = Tree::build(params, &cfg)?;
            let tc = TreeCollection::from_tree(&t);
            let ladder = geometric_ladder(tc.diameter(1), tc.diameter(depth as usize), a.rungs)?;
            let bc = boxcount_dimension(&leaf_coordinates(&t), &ladder)?;
            let mut out = String::from("size,count,slope,residual\n");
            for (e, c) in bc.sizes.iter().zip(&bc.counts) {
                out += &format!("{e},{c},{},{}\n", bc.slope, bc.residual);
            }
            Ok(Output::ok(out))
        }
    }
}

fn entropy(params: &RankOneParams, a: &EntropyArgs) -> Result<Output> {
    let exp = EntropyExperiment::new(params, a.s, a.big_r, a.rprime, a.m, crate::entropy::default_eta_prime(params, 0.4), 0.4)?;
    let est = separated_entropy_lb(&exp);
    // escaping components: stage lengths up to R
    let rs: Vec<u32> = (6..=a.big_r).collect();
    let seq = estimate_sequence(params, a.rprime, &rs);
    let mut out = String::from("c,mass,limsup,slack,entropy_lb,high_mass_lb\n");
    let mut failure = None;
    for c in c_grid(params, a.c_grid)? {
        let pt = convex_combination_curve(c, params, &seq)?;
        if pt.slack < -crate::entropy::MASTER_TOLERANCE {
            failure = Some(format!("master inequality fails at c = {c}"));
        }
        out += &format!("{c},{},{},{},{},{}\n", pt.point.mass, pt.point.limsup_entropy, pt.slack, est.entropy_lb, est.high_mass_lb);
    }
    Ok(Output { text: out, failure })
}

fn mass(params: &RankOneParams, a: &MassArgs, seed: u64) -> Result<Output> {
    if a.from == 0 || a.from > a.depth {
        return Err(Error::InvalidParameter(format!("--from {} outside 1..={}", a.from, a.depth)));
    }
    let t = Tree::build(params, &TreeConfig::new(a.depth, OracleMode::Sl2, seed))?;
    let mut out = String::from("depth,points,horizon,max_fraction,mean_fraction,bound\n");
    let mut failure = None;
    for d in a.from..=a.depth {
        let r = divergence_check(&t, d, a.samples, a.s, a.ell, seed)?;
        if !r.passed() {
            failure = Some(format!("depth {d}: compact fraction {} exceeds {}", r.max_fraction, r.bound));
        }
        out += &format!("{d},{},{},{},{},{}\n", r.points, r.horizon, r.max_fraction, r.mean_fraction, r.bound);
    }
    Ok(Output { text: out, failure })
}
