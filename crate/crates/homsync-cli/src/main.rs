//! Command-line front end: scenario runs, config validation, interferogram
//! curves, and batches of independent runs.
//!
//! Exit codes are category-coded: 0 success, 2 configuration/usage errors,
//! 3 scenario failures, 4 output I/O errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use homsync::config::{self, RunConfig};
use homsync::photonics::{
    angular_frequency_for_wavelength, hom_coincidence_probability, pump_sigma_from_bandwidth,
    HomDipModel, JointSpectralAmplitude, QuadratureSpec,
};
use homsync::scenario;
use homsync::timebase::Duration;
use homsync::{ConfigError, ScenarioError};

#[derive(Parser)]
#[command(name = "homsync", version, about = "Two-photon interference clock-sync simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario described by a TOML run file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a run file without executing; prints every resolved parameter.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Emit the interference dip as CSV, via both the quadrature and the
    /// envelope path.
    DipCurve {
        /// Dip visibility, in (0, 1].
        #[arg(long)]
        v: f64,
        /// Coherence time in femtoseconds.
        #[arg(long)]
        tc: f64,
        /// Delay range in femtoseconds, "lo:hi".
        #[arg(long, allow_hyphen_values = true)]
        range: String,
        /// Delay step in femtoseconds.
        #[arg(long)]
        step: f64,
        /// Directory for dip_curve_quadrature.csv and dip_curve_envelope.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run every .toml run file in a directory, optionally in parallel.
    Batch {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Root for per-run output directories (default: next to each
        /// config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_SCENARIO: u8 = 3;
const EXIT_IO: u8 = 4;

fn exit_code_for(err: &ScenarioError) -> u8 {
    match err {
        ScenarioError::Config(_) => EXIT_CONFIG,
        ScenarioError::Output { .. } => EXIT_IO,
        _ => EXIT_SCENARIO,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out } => cmd_run(&config, seed, out.as_deref()),
        Command::Validate { config } => cmd_validate(&config),
        Command::DipCurve { v, tc, range, step, out } => cmd_dip_curve(v, tc, &range, step, &out),
        Command::Batch { configs, jobs, out } => cmd_batch(&configs, jobs, out.as_deref()),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, ConfigError> {
    let mut cfg = config::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir_for(cfg: &RunConfig, config_path: &Path, explicit: Option<&Path>) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    if let Some(dir) = &cfg.output_dir {
        return PathBuf::from(dir);
    }
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    config_path.with_file_name(format!("{stem}.out"))
}

fn cmd_run(config_path: &Path, seed: Option<u64>, out: Option<&Path>) -> ExitCode {
    let cfg = match load_config(config_path, seed) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let out_dir = out_dir_for(&cfg, config_path, out);
    match scenario::run(&cfg, &out_dir) {
        Ok(summary) => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            let _ = writeln!(w, "output_dir = {}", out_dir.display());
            let _ = summary.write(&mut w);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn cmd_validate(config_path: &Path) -> ExitCode {
    match config::load(config_path) {
        Ok(cfg) => {
            println!("ok: {} parses and validates", config_path.display());
            println!("# resolved configuration ({} scenario)", cfg.scenario.name());
            print!("{}", cfg.echo_toml());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("invalid: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn cmd_dip_curve(v: f64, tc_fs: f64, range: &str, step_fs: f64, out: &Path) -> ExitCode {
    if !(v > 0.0 && v <= 1.0) || !(tc_fs > 0.0) || !(step_fs > 0.0) {
        eprintln!("error: require 0 < v <= 1, tc > 0, step > 0");
        return ExitCode::from(EXIT_CONFIG);
    }
    let Some((lo, hi)) = range.split_once(':').and_then(|(a, b)| {
        let lo = a.trim().parse::<f64>().ok()?;
        let hi = b.trim().parse::<f64>().ok()?;
        (lo <= hi).then_some((lo, hi))
    }) else {
        eprintln!("error: --range must be \"LO_FS:HI_FS\" with LO <= HI");
        return ExitCode::from(EXIT_CONFIG);
    };

    let tc = Duration::from_fs_f64(tc_fs);
    let model = match HomDipModel::new(v, tc, 1.0) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    // Source defaults: degenerate pairs at 1578 nm from a 789 nm pump with
    // 22 nm bandwidth.
    let jsa = match JointSpectralAmplitude::from_dip_targets(
        v,
        tc,
        angular_frequency_for_wavelength(1578e-9),
        pump_sigma_from_bandwidth(789e-9, 22e-9),
    ) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let spec = QuadratureSpec::default();

    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return ExitCode::from(EXIT_IO);
    }

    let sweep = |f: &dyn Fn(Duration) -> Result<f64, String>| -> Result<String, (u8, String)> {
        let mut body = String::from("delay_fs,relative_coincidence\n");
        let mut delay = lo;
        while delay <= hi {
            let d = Duration::from_fs_f64(delay);
            let value = f(d).map_err(|e| (EXIT_SCENARIO, e))?;
            body.push_str(&format!("{},{}\n", d.as_fs(), value));
            delay += step_fs;
        }
        Ok(body)
    };
    let result = sweep(&|d| hom_coincidence_probability(&jsa, d, &spec).map_err(|e| e.to_string()))
        .and_then(|quad| sweep(&|d| Ok(model.envelope(d))).map(|env| (quad, env)));
    let (quad, env) = match result {
        Ok(bodies) => bodies,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(code);
        }
    };
    for (name, body) in
        [("dip_curve_quadrature.csv", quad), ("dip_curve_envelope.csv", env)]
    {
        let path = out.join(name);
        if let Err(e) = std::fs::write(&path, body) {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(EXIT_IO);
        }
        println!("wrote {}", path.display());
    }
    ExitCode::SUCCESS
}

fn cmd_batch(configs_dir: &Path, jobs: usize, out_root: Option<&Path>) -> ExitCode {
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(configs_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect(),
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", configs_dir.display());
            return ExitCode::from(EXIT_IO);
        }
    };
    paths.sort();
    if paths.is_empty() {
        eprintln!("error: no .toml run files in {}", configs_dir.display());
        return ExitCode::from(EXIT_CONFIG);
    }

    let jobs = jobs.clamp(1, paths.len());
    let next = AtomicUsize::new(0);
    let worst: Mutex<u8> = Mutex::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(path) = paths.get(i) else { break };
                let code = match load_config(path, None) {
                    Ok(cfg) => {
                        let out_dir = match out_root {
                            Some(root) => root
                                .join(path.file_stem().and_then(|s| s.to_str()).unwrap_or("run")),
                            None => out_dir_for(&cfg, path, None),
                        };
                        match scenario::run(&cfg, &out_dir) {
                            Ok(_) => {
                                println!("ok   {} -> {}", path.display(), out_dir.display());
                                0
                            }
                            Err(e) => {
                                eprintln!("fail {}: {e}", path.display());
                                exit_code_for(&e)
                            }
                        }
                    }
                    Err(e) => {
                        eprintln!("fail {}: {e}", path.display());
                        EXIT_CONFIG
                    }
                };
                let mut worst = worst.lock().expect("batch lock");
                *worst = (*worst).max(code);
            });
        }
    });
    let code = *worst.lock().expect("batch lock");
    if code == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(code)
    }
}
