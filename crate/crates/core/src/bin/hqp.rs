//! Command-line front end: instance generation, decoding, state evolution
//! runs, threshold computations, and the sweep/demo commands.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 on runtime errors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hqp_core::amp::{amp_decode, AmpConfig};
use hqp_core::cli::{
    cmd_matching_demo, cmd_phase_diagram, cmd_threshold_table, default_se_engine, parse_matching,
    threshold_table_csv, trajectory_json, PiMode, SweepConfig,
};
use hqp_core::model::{generate_instance, Composition, HqpInstance};
use hqp_core::numerics::{ExpectationEngine, SupSearchConfig};
use hqp_core::se::{se_iterate, SEConfig, SEMatrix};
use hqp_core::thresholds::{
    default_scalar_engine, kappa_binary, kappa_general_lower_bound, kappa_matching, kappa_sym,
    ThresholdResult,
};
use hqp_core::Error;

#[derive(Parser)]
#[command(
    name = "hqp",
    about = "Decoding categorical signals from pooled histogram queries",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random instance and write it to disk.
    Generate(GenerateArgs),
    /// Decode an instance with approximate message passing.
    Decode(DecodeArgs),
    /// Run the state evolution iteration and dump the trajectory.
    Se(SeArgs),
    /// Phase-transition threshold computations.
    Threshold {
        #[command(subcommand)]
        which: ThresholdCmd,
    },
    /// Sweep (p, kappa) cells, comparing AMP against the SE prediction.
    PhaseDiagram(PhaseArgs),
    /// Matching-initialization demo: surviving edges against prediction.
    MatchingDemo(MatchingArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Comma-separated proportions, e.g. `0.3,0.7`. Defaults to uniform.
    #[arg(long)]
    pi: Option<String>,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `iid` or `exact` (largest-remainder composition).
    #[arg(long, default_value = "iid")]
    composition: String,
    /// Output path; `.bin` selects the binary format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 0.0)]
    damping: f64,
    #[arg(long, default_value_t = false)]
    track_mse: bool,
    /// Report destination (JSON); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the posterior marginals into the report.
    #[arg(long, default_value_t = false)]
    emit_marginals: bool,
}

#[derive(Args)]
struct SeArgs {
    #[arg(long)]
    d: usize,
    /// Comma-separated proportions; defaults to uniform.
    #[arg(long)]
    pi: Option<String>,
    #[arg(long)]
    kappa: f64,
    /// `noninformative`, `matching:r1:s1,r2:s2` (one-based), or a JSON file
    /// `{"x": [row-major d*d]}`.
    #[arg(long, default_value = "noninformative")]
    x0: String,
    #[arg(long, default_value_t = 20000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ThresholdCmd {
    /// Binary-case threshold `kappa*_binary(p)`.
    Binary {
        #[arg(long)]
        p: f64,
    },
    /// Symmetric-case threshold `kappa*_sym(d)`.
    Sym {
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        replicates: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Matching-edge threshold `kappa*_rs`.
    Matching {
        #[arg(long)]
        pi: String,
        /// One-based pair `r,s`.
        #[arg(long)]
        pair: String,
    },
    /// Sampled lower bound for the general-case threshold.
    GeneralLb {
        #[arg(long)]
        pi: String,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 20_000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Symmetric threshold table over a list of dimensions.
    Table {
        /// Comma-separated dimensions, e.g. `2,3,4`.
        #[arg(long)]
        d_list: String,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        replicates: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PhaseArgs {
    /// JSON sweep configuration; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated binary p grid (selects d = 2 cells).
    #[arg(long)]
    p_grid: Option<String>,
    /// Uniform proportions on this many categories (alternative to p-grid).
    #[arg(long)]
    uniform_d: Option<usize>,
    /// Explicit proportions (alternative to p-grid).
    #[arg(long)]
    pi: Option<String>,
    #[arg(long)]
    kappa_grid: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seeds_per_cell: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    se_samples: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatchingArgs {
    #[arg(long)]
    pi: String,
    /// One-based pairs `r1:s1,r2:s2`.
    #[arg(long)]
    matching: String,
    /// Comma-separated kappa values to run.
    #[arg(long)]
    kappa_list: String,
    #[arg(long, default_value_t = 20_000)]
    se_samples: usize,
    #[arg(long, default_value_t = 1)]
    master_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidParam(format!("bad number '{p}'")))
        })
        .collect()
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>, Error> {
    text.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidParam(format!("bad integer '{p}'")))
        })
        .collect()
}

fn pi_or_uniform(pi: &Option<String>, d: usize) -> Result<Vec<f64>, Error> {
    match pi {
        Some(text) => {
            let v = parse_f64_list(text)?;
            if v.len() != d {
                return Err(Error::InvalidParam(format!(
                    "pi has {} entries, expected {d}",
                    v.len()
                )));
            }
            Ok(v)
        }
        None => Ok(vec![1.0 / d as f64; d]),
    }
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text).map_err(Error::from),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct DecodeReport {
    iterations: usize,
    converged: bool,
    mse: f64,
    zero_one: f64,
    per_iteration_mse: Vec<f64>,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    marginals: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct ThresholdJson {
    kappa_star: f64,
    x_star: f64,
    std_err: f64,
    boundary_flag: bool,
}

impl From<&ThresholdResult> for ThresholdJson {
    fn from(r: &ThresholdResult) -> Self {
        ThresholdJson {
            kappa_star: r.kappa_star,
            x_star: r.x_star,
            std_err: r.std_err,
            boundary_flag: r.boundary,
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Generate(args) => {
            let pi = pi_or_uniform(&args.pi, args.d)?;
            let composition = match args.composition.as_str() {
                "iid" => Composition::Iid,
                "exact" => Composition::Exact,
                other => {
                    return Err(Error::InvalidParam(format!(
                        "composition must be iid or exact, got '{other}'"
                    )))
                }
            };
            let inst = generate_instance(
                args.n,
                args.d,
                args.m,
                args.alpha,
                &pi,
                args.seed,
                composition,
            )?;
            inst.save(&args.out)?;
            eprintln!(
                "wrote instance n={} d={} m={} to {}",
                args.n,
                args.d,
                args.m,
                args.out.display()
            );
            Ok(())
        }
        Cmd::Decode(args) => {
            let inst = HqpInstance::load(&args.instance)?;
            let cfg = AmpConfig {
                max_iter: args.max_iter,
                conv_tol: args.tol,
                damping: args.damping,
                track_mse: args.track_mse,
                ..Default::default()
            };
            let res = amp_decode(&inst, &cfg)?;
            let report = DecodeReport {
                iterations: res.iterations,
                converged: res.converged,
                mse: res.report.mse,
                zero_one: res.report.zero_one,
                per_iteration_mse: res.report.per_iteration_mse.clone(),
                seed: inst.seed,
                marginals: args.emit_marginals.then(|| {
                    (0..inst.n)
                        .map(|i| (0..inst.d).map(|r| res.marginals[(i, r)]).collect())
                        .collect()
                }),
            };
            write_or_print(&args.out, &serde_json::to_string_pretty(&report)?)
        }
        Cmd::Se(args) => {
            let pi = pi_or_uniform(&args.pi, args.d)?;
            let x0 = parse_x0(&args.x0, args.d, &pi, args.kappa)?;
            let engine = default_se_engine(args.d, args.samples, args.seed);
            let mut cfg = SEConfig::new(args.kappa, pi, engine)?;
            cfg.max_iter = args.max_iter;
            let traj = se_iterate(&x0, &cfg)?;
            let doc = trajectory_json(&traj, args.kappa);
            write_or_print(&args.out, &serde_json::to_string_pretty(&doc)?)
        }
        Cmd::Threshold { which } => run_threshold(which),
        Cmd::PhaseDiagram(args) => {
            let cfg = build_sweep_config(&args)?;
            let csv = cmd_phase_diagram(&cfg)?;
            write_or_print(&args.out, &csv)
        }
        Cmd::MatchingDemo(args) => {
            let pi = parse_f64_list(&args.pi)?;
            let pairs = parse_matching(&args.matching, pi.len())?;
            let kappas = parse_f64_list(&args.kappa_list)?;
            let report =
                cmd_matching_demo(&pi, &pairs, &kappas, args.se_samples, args.master_seed)?;
            write_or_print(&args.out, &serde_json::to_string_pretty(&report)?)
        }
    }
}

fn parse_x0(spec: &str, d: usize, pi: &[f64], kappa: f64) -> Result<SEMatrix, Error> {
    if spec == "noninformative" {
        return Ok(SEMatrix::noninformative(pi, kappa));
    }
    if let Some(pairs) = spec.strip_prefix("matching:") {
        let pairs = parse_matching(pairs, d)?;
        return SEMatrix::from_matching(d, &pairs, &vec![1.0; pairs.len()]);
    }
    #[derive(serde::Deserialize)]
    struct X0File {
        x: Vec<f64>,
    }
    let text = fs::read_to_string(spec)?;
    let doc: X0File = serde_json::from_str(&text)?;
    SEMatrix::from_row_major(d, &doc.x)
}

fn run_threshold(which: ThresholdCmd) -> Result<(), Error> {
    match which {
        ThresholdCmd::Binary { p } => {
            let res = kappa_binary(p, &default_scalar_engine(), &SupSearchConfig::default())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&ThresholdJson::from(&res))?
            );
            Ok(())
        }
        ThresholdCmd::Sym {
            d,
            samples,
            replicates,
            seed,
        } => {
            let engine = ExpectationEngine::monte_carlo(d, samples, seed);
            let res = kappa_sym(d, &engine, &SupSearchConfig::default(), replicates)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&ThresholdJson::from(&res))?
            );
            Ok(())
        }
        ThresholdCmd::Matching { pi, pair } => {
            let pi = parse_f64_list(&pi)?;
            let idx = parse_usize_list(&pair)?;
            if idx.len() != 2 {
                return Err(Error::InvalidParam("pair must be two indices".into()));
            }
            let (r, s) = (idx[0], idx[1]);
            if r == 0 || s == 0 || r > pi.len() || s > pi.len() {
                return Err(Error::InvalidParam(format!(
                    "pair entries must be in 1..={}",
                    pi.len()
                )));
            }
            let res = kappa_matching(
                &pi,
                r - 1,
                s - 1,
                &default_scalar_engine(),
                &SupSearchConfig::default(),
            )?;
            println!(
                "{}",
                serde_json::to_string_pretty(&ThresholdJson::from(&res))?
            );
            Ok(())
        }
        ThresholdCmd::GeneralLb {
            pi,
            samples,
            mc_samples,
            seed,
        } => {
            let pi = parse_f64_list(&pi)?;
            let d = pi.len();
            let engine = if d <= 2 {
                ExpectationEngine::gauss_hermite(d, 61)?
            } else {
                ExpectationEngine::monte_carlo(d, mc_samples, seed)
            };
            let lb = kappa_general_lower_bound(
                &pi,
                samples,
                &engine,
                seed,
                &SupSearchConfig::default().with_grid(48),
            )?;
            #[derive(Serialize)]
            struct LbJson {
                kappa_lower_bound: f64,
                n_random: usize,
                seed: u64,
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&LbJson {
                    kappa_lower_bound: lb,
                    n_random: samples,
                    seed,
                })?
            );
            Ok(())
        }
        ThresholdCmd::Table {
            d_list,
            samples,
            replicates,
            seed,
            out,
        } => {
            let ds = parse_usize_list(&d_list)?;
            let start = std::time::Instant::now();
            let (rows, warnings) = cmd_threshold_table(&ds, samples, replicates, seed)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            eprintln!("total runtime: {:.1}s", start.elapsed().as_secs_f64());
            write_or_print(&out, &threshold_table_csv(&rows))
        }
    }
}

fn build_sweep_config(args: &PhaseArgs) -> Result<SweepConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str::<SweepConfig>(&fs::read_to_string(path)?)?,
        None => SweepConfig::default(),
    };
    // Flags win over the config file.
    let mode_flags = [
        args.p_grid.is_some(),
        args.uniform_d.is_some(),
        args.pi.is_some(),
    ]
    .iter()
    .filter(|&&b| b)
    .count();
    if mode_flags > 1 {
        return Err(Error::InvalidParam(
            "use at most one of --p-grid, --uniform-d, --pi".into(),
        ));
    }
    if let Some(p_grid) = &args.p_grid {
        cfg.pi_mode = PiMode::BinaryPGrid {
            p_grid: parse_f64_list(p_grid)?,
        };
    } else if let Some(d) = args.uniform_d {
        cfg.pi_mode = PiMode::Uniform { d };
    } else if let Some(pi) = &args.pi {
        cfg.pi_mode = PiMode::Explicit {
            pi: parse_f64_list(pi)?,
        };
    }
    if let Some(kg) = &args.kappa_grid {
        cfg.kappa_grid = parse_f64_list(kg)?;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(s) = args.seeds_per_cell {
        cfg.seeds_per_cell = s;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(s) = args.se_samples {
        cfg.se_samples = s;
    }
    if let Some(s) = args.master_seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Configuration problems exit with 1, runtime failures with 2.
fn classify(e: &Error) -> u8 {
    match e {
        Error::InvalidParam(_) | Error::Json(_) | Error::MalformedBinary(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}
