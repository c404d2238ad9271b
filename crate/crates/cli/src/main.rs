use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use whdg::harness::{
    run_convergence, run_pin_benchmark, ConvergenceConfig, Method, Metric, PinConfig, PinMethod,
    PinOptions,
};
use whdg::hdg::{condense, ProblemSpec, SolverConfig};
use whdg::mesh::build_uniform_cartesian;
use whdg::quadrature::{analytic_moment, weighted_gauss};
use whdg::sg::assemble_sg;

#[derive(Parser)]
#[command(
    name = "whdg",
    version,
    about = "Weighted HDG experiments for drift-diffusion problems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Whdg,
    Hdg,
}

#[derive(Subcommand)]
enum Command {
    /// Manufactured-solution convergence study on the unit square.
    Converge {
        /// Polynomial degrees, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        degree: Vec<usize>,
        /// Run levels 1..=LEVELS (level j has 4^(j+1) cells).
        #[arg(long, default_value_t = 5)]
        levels: usize,
        /// Drift vector as `b1,b2`.
        #[arg(long, value_delimiter = ',', default_values_t = [10.0, 10.0], allow_negative_numbers = true)]
        beta: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, value_enum, default_value = "whdg")]
        method: MethodArg,
        /// CSV output file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// p-i-n diode equilibrium hole density benchmark.
    Pin {
        #[arg(long, default_value_t = 5)]
        levels: usize,
        /// JSON file with device constants in SI units.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stabilization in scaled units.
        #[arg(long, default_value_t = 1e-6)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Difference between the two-point flux matrix and the small-τ trace matrix.
    SgCompare {
        #[arg(long, default_value_t = 8)]
        cells: usize,
        #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
        beta: f64,
        #[arg(long, default_value_t = 1e-10)]
        tau: f64,
    },
    /// Moment exactness of the weighted Gauss rules.
    QuadCheck,
    /// Print the default device constants as JSON.
    DefaultConfig,
}

fn write_or_print(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn converge(
    degrees: &[usize],
    levels: usize,
    beta: &[f64],
    tau: f64,
    method: MethodArg,
    out: Option<&PathBuf>,
) -> Result<()> {
    if levels == 0 {
        bail!("at least one level is required");
    }
    if beta.len() != 2 {
        bail!("--beta takes two components, got {}", beta.len());
    }
    let mut csv = String::new();
    for &k in degrees {
        let mut cfg = ConvergenceConfig::new(k, 1..=levels);
        cfg.beta = [beta[0], beta[1]];
        cfg.tau = tau;
        cfg.method = match method {
            MethodArg::Whdg => Method::Whdg,
            MethodArg::Hdg => Method::Hdg,
        };
        let report = run_convergence(&cfg).with_context(|| format!("degree {k}"))?;
        let text = report.to_csv();
        if csv.is_empty() {
            csv = text;
        } else {
            csv.extend(text.lines().skip(1).map(|l| format!("{l}\n")));
        }
        if out.is_some() {
            for m in Metric::ALL {
                if let Some(r) = report.final_rate(m) {
                    println!("k={k} {:<12} final rate {r:.3}", m.as_str());
                }
            }
        }
    }
    write_or_print(out, &csv)
}

fn pin(levels: usize, config: Option<&PathBuf>, tau: f64, out: Option<&PathBuf>) -> Result<()> {
    let pin = match config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PinConfig::from_json(&text)?
        }
        None => PinConfig::default(),
    };
    let opts = PinOptions {
        levels: (1..=levels).collect(),
        tau,
        ..PinOptions::default()
    };
    let report = run_pin_benchmark(&pin, &opts)?;
    if out.is_some() {
        for m in PinMethod::ALL {
            let min = report
                .levels
                .iter()
                .filter_map(|l| report.result(l.level, m))
                .map(|r| r.min_trace.min(r.min_cell))
                .fold(f64::INFINITY, f64::min);
            println!(
                "{:<5} order {:.3}  linear order {:.3}  min value {min:.4e}",
                m.as_str(),
                report.fitted_order(m, false, 3).unwrap_or(f64::NAN),
                report.fitted_order(m, true, 3).unwrap_or(f64::NAN),
            );
        }
    }
    write_or_print(out, &report.to_csv())
}

fn sg_compare(cells: usize, beta: f64, tau: f64) -> Result<()> {
    let mesh = build_uniform_cartesian(1, cells, &[(0.0, 1.0)])?;
    let spec = ProblemSpec::uniform(&mesh, 1.0, [beta, 0.0]);
    let sys = condense(&mesh, &spec, &SolverConfig::new(0).with_tau(tau))?;
    let sg = assemble_sg(&mesh, 1.0, &vec![beta; cells], None, (0.0, 0.0))?.to_dense();
    // trace rows follow the interior nodes from left to right
    let mut order: Vec<(f64, usize)> = mesh
        .faces()
        .iter()
        .enumerate()
        .filter_map(|(f, face)| sys.face_offset[f].map(|o| (face.position, o)))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let a = sys.matrix.to_dense();
    let scale = sg.amax();
    let mut worst = 0.0f64;
    for (i, oi) in order.iter().enumerate() {
        for (j, oj) in order.iter().enumerate() {
            let (x, y) = (-a[(oi.1, oj.1)], sg[(i, j)]);
            worst = worst.max((x - y).abs() / y.abs().max(1e-14 * scale));
        }
    }
    println!("max relative difference {worst:.3e}");
    Ok(())
}

fn quad_check() -> Result<()> {
    let mut worst = 0.0f64;
    for b in [0.0, 1.0, -1.0, 10.0, -10.0, 50.0, -50.0] {
        for n in 1..=6 {
            let rule = weighted_gauss(b, n)?;
            for m in 0..2 * n {
                let exact = analytic_moment(m, b);
                let got = rule.integrate(|x| x.powi(m as i32));
                worst = worst.max((got - exact).abs() / exact.abs());
            }
        }
    }
    println!("max relative moment error {worst:.3e}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::init();
    match Cli::parse().command {
        Command::Converge {
            degree,
            levels,
            beta,
            tau,
            method,
            out,
        } => converge(&degree, levels, &beta, tau, method, out.as_ref()),
        Command::Pin {
            levels,
            config,
            tau,
            out,
        } => pin(levels, config.as_ref(), tau, out.as_ref()),
        Command::SgCompare { cells, beta, tau } => sg_compare(cells, beta, tau),
        Command::QuadCheck => quad_check(),
        Command::DefaultConfig => {
            println!("{}", PinConfig::default().to_json());
            Ok(())
        }
    }
}
