mod stream;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use chainfg::blockla::{format_g, normal_solve_oracle};
use chainfg::eliminate::{eliminate, solve_net, ElimOptions};
use chainfg::io::{parse_measurements, parse_trajectory, write_measurements, write_trajectory, MeasurementSet};
use chainfg::metrics::rpe;
use chainfg::perfmodel::{sweep, sweep_csv, PipelineConfig};
use chainfg::solver::{inf_norm, retract};
use chainfg::storage::{footprint, StorageTier};
use chainfg::synth::{generate, NoiseLevels, SynthConfig};
use chainfg::{gauss_newton, ChainFactorGraph, ElimMode, Error, KeyframeState, SolveConfig, StateLayout, TauPolicy};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "chainfg", version, about = "Chain factor graph smoother")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Serial,
    Parallel,
}

impl From<Mode> for ElimMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Serial => ElimMode::Serial,
            Mode::Parallel => ElimMode::Parallel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Tau {
    Raw,
    Compact,
}

impl From<Tau> for TauPolicy {
    fn from(t: Tau) -> Self {
        match t {
            Tau::Raw => TauPolicy::Raw,
            Tau::Compact => TauPolicy::Compact,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic measurements and ground truth.
    Gen {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value = "pose")]
        layout: String,
        /// e.g. gps=0.1,lidar=0.02,motion=0.02
        #[arg(long, default_value = "")]
        noise: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        gps_every: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Batch Gauss-Newton.
    Solve {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "serial")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "raw")]
        tau: Tau,
        /// Also solve with dense normal equations and print the deviation.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
    },
    /// Incremental smoothing, one keyframe at a time.
    Smooth {
        input: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cycle-model sweep plus wall-clock timing of both modes.
    Bench {
        input: PathBuf,
        #[arg(long, default_value = "1..8")]
        nu_grid: String,
        #[arg(long, value_enum, default_value = "raw")]
        tau: Tau,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative pose error of an estimate against ground truth.
    Eval { estimate: PathBuf, truth: PathBuf },
    /// Footprint of each storage tier.
    Storage {
        input: PathBuf,
        #[arg(long, default_value = "all")]
        tier: String,
        #[arg(long, default_value_t = 8)]
        scalar_bytes: usize,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Singular { .. } | Error::SingularNormal | Error::UnderConstrained { .. } | Error::Divergence(_) => 4,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn input_error(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

/// Temp file in the target directory, renamed into place.
fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let fail = |e: std::io::Error| input_error(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(contents.as_bytes()).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

fn emit(path: Option<&Path>, contents: &str) -> CliResult<()> {
    match path {
        Some(p) => write_atomic(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn load(path: &Path) -> CliResult<MeasurementSet> {
    let text = read(path)?;
    parse_measurements(&text).map_err(|e| match e {
        Error::Parse { line, reason } => input_error(format!("{}:{line}: {reason}", path.display())),
        e => e.into(),
    })
}

fn load_nonempty(path: &Path) -> CliResult<MeasurementSet> {
    let set = load(path)?;
    if set.records.is_empty() {
        return Err(input_error(format!("{}: no measurements", path.display())));
    }
    Ok(set)
}

/// `A..B` (inclusive), `A,B,C` or a single value.
fn parse_grid(s: &str) -> CliResult<Vec<usize>> {
    let bad = || input_error(format!("bad n_u grid {s:?}"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let grid: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        (a..=b).collect()
    } else {
        s.split(',').map(num).collect::<CliResult<_>>()?
    };
    if grid.is_empty() || grid.contains(&0) {
        return Err(bad());
    }
    Ok(grid)
}

/// Gauss-Newton on dense normal equations with the same step control.
fn oracle_solve(g: &ChainFactorGraph, x0: &[KeyframeState], cfg: &SolveConfig) -> chainfg::Result<Vec<KeyframeState>> {
    let mut x = x0.to_vec();
    let mut cost = g.cost(&x)?;
    for _ in 0..cfg.max_iterations {
        let (a, eps) = g.assemble(&x)?;
        let rhs: Vec<f64> = eps.iter().map(|v| -v).collect();
        let delta = normal_solve_oracle(&a, &rhs)?;
        if inf_norm(&delta) < cfg.delta_tol {
            break;
        }
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..=10 {
            let step: Vec<f64> = delta.iter().map(|v| v * alpha).collect();
            let cand = retract(g.layout, &x, &step)?;
            let c = g.cost(&cand)?;
            if c <= cost {
                x = cand;
                cost = c;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(x)
}

fn cmd_gen(
    n: usize,
    layout: &str,
    noise: &str,
    seed: u64,
    gps_every: usize,
    out: &Path,
    truth: &Path,
) -> CliResult<()> {
    let layout = StateLayout::parse(layout)?;
    let noise = NoiseLevels::parse(noise)?;
    let cfg = SynthConfig {
        gps_every,
        ..SynthConfig::new(n, layout, noise, seed)
    };
    let (g, states) = generate(&cfg)?;
    let header = format!(
        "# synthetic n={n} seed={seed} noise gps={} lidar={} motion={}\n",
        format_g(noise.gps, 17),
        format_g(noise.lidar, 17),
        format_g(noise.motion, 17)
    );
    write_atomic(out, &(header + &write_measurements(&g)))?;
    write_atomic(truth, &write_trajectory(layout, &states))
}

fn cmd_solve(
    input: &Path,
    mode: ElimMode,
    tau: TauPolicy,
    oracle: bool,
    report: Option<&Path>,
    out: Option<&Path>,
    max_iter: usize,
) -> CliResult<()> {
    let set = load_nonempty(input)?;
    let g = set.to_graph();
    let cfg = SolveConfig {
        mode,
        max_iterations: max_iter,
        elim: ElimOptions {
            tau,
            ..Default::default()
        },
        ..Default::default()
    };
    let x0 = g.dead_reckon();
    let (x, rep) = gauss_newton(&g, &x0, &cfg)?;
    emit(out, &write_trajectory(g.layout, &x))?;
    if let Some(p) = report {
        write_atomic(p, &rep.to_text())?;
    }
    if oracle {
        let xo = oracle_solve(&g, &x0, &cfg)?;
        let dev = x
            .iter()
            .zip(&xo)
            .flat_map(|(a, b)| a.to_vec(g.layout).into_iter().zip(b.to_vec(g.layout)))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        eprintln!("oracle max deviation: {}", format_g(dev, 6));
    }
    eprintln!(
        "iterations {} final_cost {} converged {}",
        rep.iterations,
        format_g(rep.final_cost, 10),
        rep.converged
    );
    if !rep.converged {
        return Err(Failure {
            code: 3,
            msg: format!("no convergence after {} iterations", rep.iterations),
        });
    }
    Ok(())
}

fn cmd_smooth(input: &Path, report: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let set = load_nonempty(input)?;
    let res = stream::smooth(&set, &SolveConfig::default()).map_err(|e| match e {
        Error::Parse { line, reason } => input_error(format!("{}:{line}: {reason}", input.display())),
        e => e.into(),
    })?;
    emit(out, &write_trajectory(set.layout, &res.states))?;
    if let Some(p) = report {
        let mut s = String::from("# keyframe cost\n");
        for (k, c) in &res.cost_log {
            s.push_str(&format!("{k} {:.17e}\n", c));
        }
        write_atomic(p, &s)?;
    }
    if !res.converged {
        return Err(Failure {
            code: 3,
            msg: "relinearization did not converge".into(),
        });
    }
    Ok(())
}

fn median_ms(runs: usize, mut f: impl FnMut() -> chainfg::Result<()>) -> CliResult<f64> {
    let mut t = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64() * 1e3);
    }
    t.sort_by(f64::total_cmp);
    Ok(t[t.len() / 2])
}

fn cmd_bench(input: &Path, grid: &str, tau: TauPolicy, runs: usize, out: Option<&Path>) -> CliResult<()> {
    let set = load_nonempty(input)?;
    let g = set.to_graph();
    let grid = parse_grid(grid)?;
    let rows = sweep(&grid, &g, &PipelineConfig::default(), tau)?;
    emit(out, &sweep_csv(&rows))?;
    let x0 = g.dead_reckon();
    let opts = ElimOptions {
        tau,
        ..Default::default()
    };
    for mode in [ElimMode::Serial, ElimMode::Parallel] {
        let ms = median_ms(runs, || {
            let net = eliminate(&g, &x0, mode, opts)?;
            solve_net(&net, opts.exec).map(|_| ())
        })?;
        println!("# wallclock {mode} median_ms={ms:.4} runs={}", runs.max(1));
    }
    Ok(())
}

fn cmd_eval(estimate: &Path, truth: &Path) -> CliResult<()> {
    let parse = |p: &Path| -> CliResult<_> {
        parse_trajectory(&read(p)?).map_err(|e| input_error(format!("{}: {e}", p.display())))
    };
    let (mut est, tru) = (parse(estimate)?, parse(truth)?);
    est.layout = tru.layout;
    let stats = rpe(&est, &tru)?;
    println!("rmse {}", format_g(stats.rmse, 6));
    println!("max_error {}", format_g(stats.max_error, 6));
    Ok(())
}

fn cmd_storage(input: &Path, tier: &str, sb: usize) -> CliResult<()> {
    let set = load(input)?;
    let g = set.to_graph();
    let tiers: Vec<StorageTier> = if tier == "all" {
        StorageTier::ALL.to_vec()
    } else {
        vec![StorageTier::parse(tier).ok_or_else(|| input_error(format!("unknown tier {tier:?}")))?]
    };
    let mut s = String::from("tier\tbytes\treduction\n");
    if g.n > 0 {
        let dense = footprint(&g, StorageTier::Dense, sb)?.bytes;
        for t in tiers {
            let b = footprint(&g, t, sb)?.bytes;
            s.push_str(&format!("{}\t{b}\t{:.2}\n", t.name(), dense as f64 / b as f64));
        }
    }
    print!("{s}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Gen {
            n,
            layout,
            noise,
            seed,
            gps_every,
            out,
            truth,
        } => cmd_gen(n, &layout, &noise, seed, gps_every, &out, &truth),
        Cmd::Solve {
            input,
            mode,
            tau,
            oracle,
            report,
            out,
            max_iter,
        } => cmd_solve(&input, mode.into(), tau.into(), oracle, report.as_deref(), out.as_deref(), max_iter),
        Cmd::Smooth { input, report, out } => cmd_smooth(&input, report.as_deref(), out.as_deref()),
        Cmd::Bench {
            input,
            nu_grid,
            tau,
            runs,
            out,
        } => cmd_bench(&input, &nu_grid, tau.into(), runs, out.as_deref()),
        Cmd::Eval { estimate, truth } => cmd_eval(&estimate, &truth),
        Cmd::Storage {
            input,
            tier,
            scalar_bytes,
        } => cmd_storage(&input, &tier, scalar_bytes),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("1..4").ok().unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_grid("2..=3").ok().unwrap(), vec![2, 3]);
        assert_eq!(parse_grid("1,4").ok().unwrap(), vec![1, 4]);
        assert!(parse_grid("0..2").is_err());
        assert!(parse_grid("x").is_err());
    }

    #[test]
    fn error_codes() {
        assert_eq!(Failure::from(Error::UnderConstrained { index: 1 }).code, 4);
        assert_eq!(
            Failure::from(Error::Parse {
                line: 1,
                reason: String::new()
            })
            .code,
            2
        );
    }
}
