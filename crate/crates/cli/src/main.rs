//! `dacph`: run scenarios, paired comparisons, seed sweeps and the property suite.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dacph_core::metrics::compare;
use dacph_core::sim_engine::{run_keep_log, run_with_bounds, workspace_inertia_bounds};
use dacph_core::{verify, Error, Mode, Result, RunOutput, ScenarioConfig};

#[derive(Parser)]
#[command(name = "dacph", version, about = "Data-assisted port-Hamiltonian control of a free-floating manipulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write the log, summary and effective config.
    Run {
        #[command(flatten)]
        common: Common,
        /// Controller mode (dac or baseline).
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run DAC and the model-based baseline with the same seed and compare.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Run the invariant and property checks.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run several seeds in parallel.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Seeds to run, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        mode: Option<Mode>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML scenario file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the outputs.
    #[arg(long, short, default_value = "out")]
    output_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn load(path: Option<&Path>) -> Result<ScenarioConfig> {
    let cfg = match path {
        Some(p) => ScenarioConfig::from_file(p)?,
        None => ScenarioConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_run(dir: &Path, stem: &str, out: &RunOutput) -> Result<()> {
    let f = BufWriter::new(fs::File::create(dir.join(format!("{stem}.csv")))?);
    out.log.write_csv(f)?;
    Ok(())
}

fn write_summary(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn events_kv(out: &RunOutput) -> String {
    out.events
        .iter()
        .filter(|(k, _)| !k.starts_with("phase:"))
        .map(|(k, v)| format!("events.{k} = {v}\n"))
        .collect()
}

fn run_cmd(common: &Common, mode: Option<Mode>) -> Result<()> {
    let mut cfg = load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    fs::create_dir_all(&common.output_dir)?;
    fs::write(common.output_dir.join("config.toml"), cfg.to_toml_string())?;
    let lam = workspace_inertia_bounds(&cfg.robot)?;
    let out = match run_keep_log(&cfg, lam) {
        Ok(out) => out,
        Err((e, partial)) => {
            // keep what was recorded up to the failure
            let f = BufWriter::new(fs::File::create(common.output_dir.join("run.partial.csv"))?);
            partial.write_csv(f)?;
            return Err(e);
        }
    };
    write_run(&common.output_dir, "run", &out)?;
    let text = format!("mode = {}\nseed = {}\n{}{}", cfg.mode, cfg.seed, out.summary.to_kv(), events_kv(&out));
    write_summary(&common.output_dir, "summary.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn compare_cmd(common: &Common) -> Result<()> {
    let mut cfg = load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&common.output_dir)?;
    fs::write(common.output_dir.join("config.toml"), cfg.to_toml_string())?;
    let lam = workspace_inertia_bounds(&cfg.robot)?;
    let mut base_cfg = cfg.clone();
    base_cfg.mode = Mode::Baseline;
    cfg.mode = Mode::Dac;
    let (dac, base) = std::thread::scope(|s| {
        let h = s.spawn(|| run_with_bounds(&base_cfg, lam));
        let dac = run_with_bounds(&cfg, lam);
        (dac, h.join().expect("baseline thread panicked"))
    });
    let (dac, base) = (dac?, base?);
    write_run(&common.output_dir, "dac", &dac)?;
    write_run(&common.output_dir, "baseline", &base)?;
    let summary = compare(&dac.log, &base.log)?;
    let text = format!("seed = {}\n{}{}", cfg.seed, summary.to_kv(), events_kv(&dac));
    write_summary(&common.output_dir, "summary.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn verify_cmd(config: Option<&Path>) -> Result<bool> {
    let cfg = load(config)?;
    let checks = verify::run_all(&cfg)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:width$}  {}", c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn sweep_cmd(common: &Common, seeds: &[u64], mode: Option<Mode>) -> Result<()> {
    let mut cfg = load(common.config.as_deref())?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let lam = workspace_inertia_bounds(&cfg.robot)?;
    fs::create_dir_all(&common.output_dir)?;
    let results: Vec<(u64, Result<RunOutput>)> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                (seed, s.spawn(move || run_with_bounds(&c, lam)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(seed, h)| (seed, h.join().expect("sweep thread panicked")))
            .collect()
    });
    let mut first_err = None;
    for (seed, res) in results {
        match res {
            Ok(out) => {
                let dir = common.output_dir.join(format!("seed-{seed}"));
                fs::create_dir_all(&dir)?;
                let mut c = cfg.clone();
                c.seed = seed;
                fs::write(dir.join("config.toml"), c.to_toml_string())?;
                write_run(&dir, "run", &out)?;
                write_summary(&dir, "summary.txt", &out.summary.to_kv())?;
                println!(
                    "seed {seed:>6}  rms_alpha_err {:.4e}  effort {:.4e}  b_est_ratio {:.3}  d_est_ratio {:.3}",
                    out.summary.rms_alpha_err, out.summary.effort, out.summary.b_est_ratio, out.summary.d_est_ratio
                );
            }
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run { common, mode } => run_cmd(common, *mode),
        Command::Compare { common } => compare_cmd(common),
        Command::Sweep { common, seeds, mode } => sweep_cmd(common, seeds, *mode),
        Command::Verify { config } => match verify_cmd(config.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
