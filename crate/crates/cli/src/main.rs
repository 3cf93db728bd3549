//! `surfcert` command-line front-end.
//!
//! Every subcommand runs the pipeline up to its stage. Upstream stage
//! artifacts found in `--out` are reused when they were produced under the
//! same configuration; anything missing is recomputed and written back.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Serialize};
use surfcert_core::pipeline::{self, Gate, PipelineRun, RunConfig, StageError};

#[derive(Parser)]
#[command(name = "surfcert", version, about = "Certified arbitrage-free option surface calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults are used for anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Size of the worker pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the grid, weights and synthetic surfaces.
    Generate,
    /// Constructive fit, ReLU compilation and error frontier.
    Fit,
    /// Martingale-constrained entropic bridge for every maturity triad.
    Bridge,
    /// Weighted projection onto the arbitrage-free cone.
    Project,
    /// Chain statistics and the tail gate.
    Gate,
    /// Projected descent on the chain objective and the spectral-gap sweep.
    Descend,
    /// Risk budget assembly.
    Risk,
    /// Run the whole pipeline and write the summary.
    All {
        /// Stop after this stage.
        #[arg(long, value_enum)]
        stage: Option<Stage>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum Stage {
    Generate,
    Fit,
    Bridge,
    Project,
    Gate,
    Descend,
    Risk,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Fit => "fit",
            Stage::Bridge => "bridge",
            Stage::Project => "project",
            Stage::Gate => "gate",
            Stage::Descend => "descend",
            Stage::Risk => "risk",
        }
    }
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    cache_valid: bool,
    timings: Vec<(String, f64)>,
}

impl Runner<'_> {
    fn stage<T: Serialize + DeserializeOwned>(
        &mut self,
        stage: Stage,
        f: impl FnOnce() -> surfcert_core::Result<T>,
    ) -> Result<T> {
        let path = self.out.join(format!("{}.json", stage.name()));
        if self.cache_valid {
            if let Ok(text) = fs::read_to_string(&path) {
                if let Ok(v) = serde_json::from_str(&text) {
                    return Ok(v);
                }
            }
        }
        let t = Instant::now();
        let v = f().map_err(|e| StageError::new(stage.name(), e))?;
        self.timings.push((stage.name().into(), t.elapsed().as_secs_f64()));
        fs::write(&path, serde_json::to_string(&v)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(v)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| StageError::new("config", e))?;
    Ok(cfg)
}

fn report(gates: &[Gate]) -> bool {
    for g in gates {
        println!("{:<5} {:<4} {:<28} {:.6e}  {}", if g.pass { "PASS" } else { "FAIL" }, g.stage, g.name, g.value, g.threshold);
    }
    gates.iter().all(|g| g.pass)
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = load_config(cli)?;
    let target = match &cli.command {
        Command::Config => {
            print!("{}", toml::to_string(&cfg)?);
            return Ok(true);
        }
        Command::Generate => Stage::Generate,
        Command::Fit => Stage::Fit,
        Command::Bridge => Stage::Bridge,
        Command::Project => Stage::Project,
        Command::Gate => Stage::Gate,
        Command::Descend => Stage::Descend,
        Command::Risk => Stage::Risk,
        Command::All { stage } => stage.unwrap_or(Stage::Risk),
    };
    let full = matches!(cli.command, Command::All { stage: None });

    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let cfg_path = cli.out.join("config.json");
    let cfg_json = serde_json::to_string(&cfg)?;
    let cache_valid = fs::read_to_string(&cfg_path).is_ok_and(|s| s == cfg_json);
    fs::write(&cfg_path, &cfg_json)?;
    let mut r = Runner { cfg: &cfg, out: &cli.out, cache_valid, timings: Vec::new() };

    let gen = r.stage(Stage::Generate, || pipeline::stage_generate(r.cfg))?;
    let mut gates = pipeline::gates_mesh(&gen);
    let needs = |s: Stage| match target {
        Stage::Project => matches!(s, Stage::Fit | Stage::Project),
        Stage::Gate => s == Stage::Gate,
        Stage::Descend => matches!(s, Stage::Fit | Stage::Descend),
        t => s <= t,
    };
    let c1 = if needs(Stage::Fit) { Some(r.stage(Stage::Fit, || pipeline::stage_fit(&cfg, &gen))?) } else { None };
    if let Some(c1) = &c1 {
        gates.extend(pipeline::gates_c1(&cfg, c1));
    }
    let c2 = match (&c1, needs(Stage::Bridge)) {
        (Some(c1), true) => Some(r.stage(Stage::Bridge, || pipeline::stage_bridge(&cfg, &gen, c1))?),
        _ => None,
    };
    if let Some(c2) = &c2 {
        gates.extend(pipeline::gates_c2(&cfg, c2));
    }
    let c3 = match (&c1, needs(Stage::Project)) {
        (Some(c1), true) => Some(r.stage(Stage::Project, || pipeline::stage_project(&cfg, &gen, c1))?),
        _ => None,
    };
    if let Some(c3) = &c3 {
        gates.extend(pipeline::gates_c3(&cfg, c3));
    }
    let r2 = if needs(Stage::Gate) { Some(r.stage(Stage::Gate, || pipeline::stage_chain(&cfg, &gen))?) } else { None };
    if let Some(r2) = &r2 {
        gates.extend(pipeline::gates_r2(&cfg, r2));
    }
    let c4 = match (&c1, needs(Stage::Descend)) {
        (Some(c1), true) => Some(r.stage(Stage::Descend, || pipeline::stage_descend(&cfg, &gen, c1))?),
        _ => None,
    };
    if let Some(c4) = &c4 {
        gates.extend(pipeline::gates_c4(c4));
    }
    if let (Some(c1), Some(c2), Some(r2), Some(c4), true) = (&c1, &c2, &r2, &c4, needs(Stage::Risk)) {
        let risk = r.stage(Stage::Risk, || pipeline::stage_risk(&cfg, &gen, c1, c2, r2, c4))?;
        gates.extend(pipeline::gates_risk(&risk));
        if full {
            let run = PipelineRun {
                generated: gen,
                c1: c1.clone(),
                c2: c2.clone(),
                c3: c3.clone().expect("projection ran"),
                r2: r2.clone(),
                c4: c4.clone(),
                risk,
            };
            let summary = pipeline::summary(&cfg, &run);
            fs::write(cli.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            for (name, body) in pipeline::csv_exports(&run) {
                fs::write(cli.out.join(name), body)?;
            }
        }
    }
    let timings: serde_json::Map<String, serde_json::Value> =
        r.timings.iter().map(|(k, v)| (k.clone(), (*v).into())).collect();
    fs::write(cli.out.join("timings.json"), serde_json::to_string_pretty(&timings)?)?;
    Ok(report(&gates))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more gates failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
