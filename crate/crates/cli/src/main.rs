use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hcma::harness::{
    evaluate_model, gen_synthetic_with, load_records, peek_config, save_checkpoint, EnvOverrides, EvalReport, RunConfig,
    SyntheticSpec, Trainer,
};
use hcma::harness::io::{load_dir, save_volume};
use hcma::network::{HcmaUNet, NetworkConfig};
use hcma::stats::{analytic_params, count_flops};
use hcma::tensor::{DType, Element};
use hcma::verify::suites::{self, SuiteOptions, REPORTED_GFLOPS, REPORTED_MPARAMS};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hcma", version, about = "Train, evaluate and check the HCMA-UNet segmentation model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, or resume from a checkpoint.
    Train(TrainArgs),
    /// Whole-volume metrics of a checkpoint on a data directory or synthetic volumes.
    Eval(EvalArgs),
    /// Parameter and FLOP counts for a model configuration.
    Stats(StatsArgs),
    /// Run the acceptance suites. Exits with 2 if any fails.
    Verify(VerifyArgs),
    /// Write synthetic volumes to a directory.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Override `train.steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Where to write the final checkpoint.
    #[arg(long, default_value = "hcma.ckpt")]
    out: PathBuf,
    /// Print every n-th step.
    #[arg(long, default_value_t = 1)]
    log_every: u64,
    /// Print the resolved run config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Directory of saved volumes; defaults to the run's own data source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Reference,
    Full,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, value_enum, default_value = "reference", conflicts_with = "config")]
    preset: Preset,
    /// Take the model section from this run config instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input extent D H W.
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"], default_values_t = [128, 128, 128])]
    input: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Leave out the overfitting runs.
    #[arg(long)]
    skip_training: bool,
    /// Run only the suite with this criterion number (1 to 10).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=10))]
    only: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    extent: usize,
    #[arg(long, default_value_t = 0.25)]
    difficulty: f64,
    #[arg(long)]
    seed: Option<u64>,
}

/// Marks a run whose checks failed, as opposed to one that could not run.
#[derive(Debug)]
struct VerificationFailed(usize);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} acceptance check(s) failed", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for failed checks, 1 for everything else that stops a command.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.is::<VerificationFailed>() {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> Result<()> {
    let env = EnvOverrides::from_env()?;
    match cli.command {
        Command::Train(a) => train(a, env),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Verify(a) => verify(a, env),
        Command::GenData(a) => gen_data(a, env),
    }
}

fn train(a: TrainArgs, env: EnvOverrides) -> Result<()> {
    if a.print_config {
        let cfg = match &a.resume {
            Some(p) => peek_config(p)?,
            None => config_from(a.config.as_deref(), env)?,
        };
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let dtype = match &a.resume {
        Some(p) => peek_config(p)?.dtype,
        None => config_from(a.config.as_deref(), env)?.dtype,
    };
    match dtype {
        DType::F32 => train_as::<f32>(a, env),
        DType::F64 => train_as::<f64>(a, env),
    }
}

fn config_from(path: Option<&Path>, env: EnvOverrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    env.apply(&mut cfg);
    Ok(cfg)
}

fn train_as<T: Element>(a: TrainArgs, env: EnvOverrides) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => {
            let cfg = peek_config(p)?;
            Trainer::<T>::resume(p, load_records(&cfg)?)?
        }
        None => {
            let cfg = config_from(a.config.as_deref(), env)?;
            let records = load_records(&cfg)?;
            Trainer::<T>::new(cfg, records)?
        }
    };
    if let Some(s) = a.steps {
        trainer.config.train.steps = s;
    }
    eprintln!(
        "training {} records, {} parameters, seed {}, from step {}",
        trainer.records.len(),
        analytic_params(&trainer.config.model),
        trainer.config.seed,
        trainer.state.step
    );
    let every = a.log_every.max(1);
    let last = trainer.config.train.steps;
    trainer.run(|log| {
        if log.step % every == 0 || log.step == last {
            println!("{log}");
        }
    })?;
    save_checkpoint(&a.out, &trainer.model, &trainer.state, &trainer.config)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = peek_config(&a.checkpoint)?;
    let records = match &a.data {
        Some(d) => load_dir(d)?,
        None => load_records(&cfg)?,
    };
    let report = match cfg.dtype {
        DType::F32 => eval_as::<f32>(&a.checkpoint, &records)?,
        DType::F64 => eval_as::<f64>(&a.checkpoint, &records)?,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!("{:<16} {:>8} {:>8} {:>8} {:>8} {:>8}", "case", "dice", "iou", "prec", "rec", "vs");
    let row = |id: &str, m: &hcma::metrics::Metrics| {
        println!("{id:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", m.dice, m.iou, m.precision, m.recall, m.vs)
    };
    for c in &report.cases {
        row(&c.id, &c.metrics);
    }
    row("mean", &report.mean);
    Ok(())
}

fn eval_as<T: Element>(path: &Path, records: &[hcma::harness::VolumeRecord]) -> Result<EvalReport> {
    let (model, _, _) = hcma::harness::load_checkpoint::<T>(path)?;
    Ok(evaluate_model(&model, records)?)
}

fn stats(a: StatsArgs) -> Result<()> {
    let model = match (&a.config, a.preset) {
        (Some(p), _) => RunConfig::load(p)?.model,
        (None, Preset::Reference) => NetworkConfig::reference(),
        (None, Preset::Full) => NetworkConfig::full_scale(),
    };
    model.validate()?;
    let input = [a.batch, model.in_channels, a.input[0], a.input[1], a.input[2]];
    model.check_input(&input)?;
    // cross-check the formula against a built network
    let built = hcma::stats::count_params(&HcmaUNet::<f32>::build(&model, 0)?);
    let params = analytic_params(&model);
    if built != params {
        bail!("built network has {built} parameters but the formula gives {params}");
    }
    let flops = count_flops(&model, input);
    if a.json {
        let parts: serde_json::Map<String, serde_json::Value> =
            flops.entries().iter().map(|(k, v)| (k.to_string(), (*v).into())).collect();
        let out = serde_json::json!({
            "stage_widths": model.stage_widths,
            "input": input,
            "params": params,
            "flops": flops.total(),
            "flops_by_block": parts,
            "reported": { "mparams": REPORTED_MPARAMS, "gflops": REPORTED_GFLOPS },
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    println!("stage widths   {:?}", model.stage_widths);
    println!("input          {input:?}");
    println!("parameters     {params} ({:.3} M)   reported full model: {REPORTED_MPARAMS} M", params as f64 / 1e6);
    println!(
        "FLOPs          {} ({:.2} G)   reported at 128^3: {REPORTED_GFLOPS} G",
        flops.total(),
        flops.total() as f64 / 1e9
    );
    for (name, v) in flops.entries() {
        println!("  {name:<12} {:>10.3} G", v as f64 / 1e9);
    }
    Ok(())
}

fn verify(a: VerifyArgs, env: EnvOverrides) -> Result<()> {
    let seed = a.seed.or(env.seed).unwrap_or(0);
    let print = |o: &suites::Outcome| {
        if !a.json {
            println!("{o}");
        }
    };
    let outcomes = match a.only {
        Some(id) => {
            let o = run_one(id, seed);
            print(&o);
            vec![o]
        }
        None => suites::run_all(
            SuiteOptions {
                seed,
                training: !a.skip_training,
            },
            print,
        ),
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&outcomes)?);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(VerificationFailed(failed).into());
    }
    Ok(())
}

fn run_one(id: u8, seed: u64) -> suites::Outcome {
    match id {
        1 => suites::gradient_correctness(suites::GRAD_CASES_PER_OP, seed),
        2 => suites::scan_oracle(100, seed),
        3 => suites::cross_scan_algebra(50, seed),
        4 => suites::attention_oracle(50, seed),
        5 => suites::region_loss_oracle(100, seed),
        6 => suites::dilation_oracle(100, seed),
        7 => suites::metrics_oracle(1000, seed),
        8 => suites::accounting(seed),
        9 => suites::overfit(seed, 10),
        _ => suites::determinism_and_persistence(50, seed),
    }
}

fn gen_data(a: GenDataArgs, env: EnvOverrides) -> Result<()> {
    if a.count == 0 || a.extent < 2 || !a.extent.is_multiple_of(2) {
        bail!("--count must be positive and --extent an even number of at least 2");
    }
    if !(0.0..=1.0).contains(&a.difficulty) {
        bail!("--difficulty must lie in [0, 1]");
    }
    let records = gen_synthetic_with(&SyntheticSpec {
        count: a.count,
        extent: [a.extent; 3],
        difficulty: a.difficulty,
        seed: a.seed.or(env.seed).unwrap_or(0),
    });
    for r in &records {
        let meta = save_volume(r, &a.out).with_context(|| format!("writing {}", r.id))?;
        println!("{}  foreground {:.3}", meta.display(), r.foreground_fraction());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_checks_exit_with_two() {
        assert_eq!(exit_code(&VerificationFailed(1).into()), 2);
        assert_eq!(exit_code(&anyhow::Error::from(hcma::Error::NoForeground)), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("io")), 1);
    }
}
