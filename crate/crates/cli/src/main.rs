use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dvae::checkpoint;
use dvae::config::{self, RunConfig};
use dvae::eval::LogZSource;
use dvae::experiment::{self, Experiment};
use dvae::sampling::{longest_run, sample_grid, GridConfig};
use dvae::trainer::StepMetrics;
use dvae::Error;

#[derive(Parser)]
#[command(name = "dvae", version, about = "Variational autoencoders with binary latents under a Boltzmann machine prior")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; extra `--section.key value` pairs override the file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Report ELBO and importance-weighted log-likelihood on held-out data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// `exact`, `bridge`, a number, or a file whose first token is a number.
        #[arg(long)]
        logz: Option<String>,
        /// `test` or `valid`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write a grid of prior samples following one Gibbs chain.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        rows: usize,
        #[arg(long, default_value_t = 100)]
        gibbs: usize,
        #[arg(long, default_value_t = 5)]
        per_state: usize,
        #[arg(long, default_value_t = 1000)]
        burn_in: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also print a text rendering.
        #[arg(long)]
        ascii: bool,
    },
    /// Estimate the log partition function by bridge sampling.
    Logz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        rungs: Option<usize>,
        /// Also print the exact value by summing out one side.
        #[arg(long)]
        exact: bool,
    },
    /// Train one model per grid value and tabulate held-out bounds.
    Sweep {
        #[arg(long)]
        experiment: Experiment,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Table destination; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Print a preset as a config file, or the table of every key.
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Markdown table of keys, types and desk defaults instead.
        #[arg(long)]
        table: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::NonFinite(_) | Error::Convergence(..) | Error::Dimension { .. } => 3,
        Error::Io { .. } | Error::Format(_) | Error::Length(_) => 4,
    }
}

/// `--key value` or `--key=value` pairs.
fn parse_overrides(tokens: &[String]) -> dvae::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(t) = it.next() {
        let key = t
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected `--section.key value`, got `{t}`")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| Error::Config(format!("`--{key}` is missing its value")))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> dvae::Result<RunConfig> {
    let ov = parse_overrides(overrides)?;
    match path {
        Some(p) => RunConfig::load(p, &ov),
        None => RunConfig::parse("", &ov),
    }
}

fn parse_logz(arg: &str) -> dvae::Result<LogZSource> {
    if matches!(arg, "exact" | "bridge") || arg.parse::<f64>().is_ok() {
        return arg.parse();
    }
    let path = Path::new(arg);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let token = text
        .split_whitespace()
        .next()
        .ok_or_else(|| Error::Format(format!("{arg} holds no log Z value")))?;
    token
        .parse::<f64>()
        .map(LogZSource::Value)
        .map_err(|_| Error::Format(format!("{arg} starts with `{token}`, not a number")))
}

fn write_file(path: &Path, bytes: &[u8]) -> dvae::Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn train(config: Option<&Path>, resume: Option<&Path>, overrides: &[String]) -> dvae::Result<()> {
    let (cfg, mut trainer) = match resume {
        Some(ck) => {
            let (mut cfg, trainer) = checkpoint::load(ck)?;
            for (k, v) in parse_overrides(overrides)? {
                cfg.set(&k, &v)?;
            }
            cfg.validate()?;
            (cfg, Some(trainer))
        }
        None => (load_config(config, overrides)?, None),
    };
    let data = experiment::load_data(&cfg)?;
    let mut trainer = match trainer.take() {
        Some(t) => t,
        None => experiment::new_trainer(&cfg, &data.train)?,
    };
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    let metrics_path = dir.join("metrics.txt");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    if trainer.step == 0 {
        writeln!(metrics, "{}", StepMetrics::HEADER).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let every = cfg.output.checkpoint_every.max(1);
    let last = dir.join("checkpoint.dvae");
    experiment::train_until(&mut trainer, &cfg, &data.train, |t, rows| {
        for r in rows {
            writeln!(metrics, "{r}").map_err(|e| Error::io(&metrics_path, e))?;
        }
        let mean = rows.iter().map(|r| r.elbo).sum::<f64>() / rows.len() as f64;
        eprintln!("epoch {} train elbo {mean:.4}", t.epoch);
        if t.epoch % every == 0 {
            checkpoint::save(&dir.join(format!("epoch-{:04}.dvae", t.epoch)), &cfg, t)?;
        }
        Ok(())
    })?;
    checkpoint::save(&last, &cfg, &trainer)?;
    if cfg.data.valid > 0 {
        let ev = experiment::evaluate(&trainer.model, &data.valid, &cfg)?;
        println!("valid {ev}");
    }
    println!("checkpoint {}", last.display());
    Ok(())
}

fn eval(ck: &Path, k: Option<usize>, logz: Option<&str>, split: &str) -> dvae::Result<()> {
    let (mut cfg, trainer) = checkpoint::load(ck)?;
    if let Some(k) = k {
        cfg.set("eval.k", &k.to_string())?;
    }
    if let Some(l) = logz {
        cfg.eval.logz = parse_logz(l)?;
    }
    let data = experiment::load_data(&cfg)?;
    let set = match split {
        "test" => &data.test,
        "valid" => &data.valid,
        _ => return Err(Error::Config(format!("split must be test or valid, got `{split}`"))),
    };
    let ev = experiment::evaluate(&trainer.model, set, &cfg)?;
    println!("{split} {ev}");
    Ok(())
}

fn sample(ck: &Path, grid: GridConfig, out: &Path, ascii: bool) -> dvae::Result<()> {
    let (cfg, trainer) = checkpoint::load(ck)?;
    let g = sample_grid(&trainer.model, &grid)?;
    write_file(out, &g.to_pgm())?;
    if ascii {
        print!("{}", g.to_ascii());
    }
    if let Ok(data) = experiment::load_data(&cfg) {
        if let Some(p) = data.prototypes {
            let modes = g.row_modes(&p);
            println!("row modes {modes:?} longest run {}", longest_run(&modes));
        }
    }
    println!("wrote {} ({}x{})", out.display(), g.pixel_width(), g.pixel_height());
    Ok(())
}

fn logz(ck: &Path, repeats: Option<usize>, samples: Option<usize>, rungs: Option<usize>, exact: bool) -> dvae::Result<()> {
    let (mut cfg, trainer) = checkpoint::load(ck)?;
    cfg.logz.repeats = repeats.unwrap_or(cfg.logz.repeats);
    cfg.logz.samples = samples.unwrap_or(cfg.logz.samples);
    cfg.logz.rungs = rungs.unwrap_or(cfg.logz.rungs);
    let rep = experiment::log_partition(&trainer.model, LogZSource::Bridge, &cfg.logz, cfg.eval.seed)?;
    for (i, (v, se)) in rep.repeats.iter().enumerate() {
        println!("repeat {i} {v:.6} +- {se:.6}");
    }
    println!("log_z {rep}");
    if exact {
        println!("exact {:.6}", trainer.model.rbm().log_partition_exact()?);
    }
    Ok(())
}

fn sweep(
    experiment: Experiment,
    grid: &[usize],
    config: Option<&Path>,
    out: Option<&Path>,
    overrides: &[String],
) -> dvae::Result<()> {
    let cfg = load_config(config, overrides)?;
    let rows = experiment::sweep(&cfg, experiment, grid)?;
    let table = experiment::sweep_table(experiment, &rows);
    print!("{table}");
    if let Some(p) = out {
        write_file(p, table.as_bytes())?;
    }
    Ok(())
}

fn show_config(name: &str, table: bool) -> dvae::Result<()> {
    if table {
        print!("{}", RunConfig::defaults_table());
    } else {
        print!("{}", config::preset(name)?.to_text());
    }
    Ok(())
}

fn run(cli: Cli) -> dvae::Result<()> {
    match cli.cmd {
        Cmd::Train { config, resume, overrides } => train(config.as_deref(), resume.as_deref(), &overrides),
        Cmd::Eval { checkpoint, k, logz, split } => eval(&checkpoint, k, logz.as_deref(), &split),
        Cmd::Sample {
            checkpoint,
            rows,
            gibbs,
            per_state,
            burn_in,
            seed,
            out,
            ascii,
        } => sample(
            &checkpoint,
            GridConfig {
                rows,
                gibbs_per_row: gibbs,
                per_state,
                burn_in,
                seed,
            },
            &out,
            ascii,
        ),
        Cmd::Logz {
            checkpoint,
            repeats,
            samples,
            rungs,
            exact,
        } => logz(&checkpoint, repeats, samples, rungs, exact),
        Cmd::Sweep {
            experiment,
            grid,
            config,
            out,
            overrides,
        } => sweep(experiment, &grid, config.as_deref(), out.as_deref(), &overrides),
        Cmd::Config { preset, table } => show_config(&preset, table),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
