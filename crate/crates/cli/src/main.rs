use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aggmogp::evaluation::{run_experiment, synth_generate, LatentChoice, Method, SynthConfig};
use aggmogp::io::export::{grid_csv, read_grid_csv, read_trace_csv, support_csv, trace_csv};
use aggmogp::io::plot::{band_svg, heatmap_svg, trace_svg};
use aggmogp::io::run::{method_view, select_latents};
use aggmogp::io::{fit_configured, write_atomic, Catalogue, ConfigFile, DatasetFile, ModelFile};
use aggmogp::prediction::predict_grid;
use aggmogp::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "aggmogp", version, about = "Refine aggregated attributes with multi-output Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Seed for training and prediction draws.
    #[arg(long)]
    seed: Option<u64>,
    /// agp, slfm, amogp or amogp-trans.
    #[arg(long)]
    method: Option<Method>,
    /// Number of latent processes, or "cv".
    #[arg(long)]
    latents: Option<LatentChoice>,
    /// Monte-Carlo mixture size for prediction.
    #[arg(long)]
    tp: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it with its ELBO trace.
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output model file.
        #[arg(long)]
        model: PathBuf,
        /// Trace CSV; defaults to the model path with a `.trace.csv` suffix.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Predict a target partition from a fitted model.
    Refine {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset id whose supports are predicted.
        #[arg(long)]
        target_partition: Option<String>,
        /// Output CSV of support_id,value,variance.
        #[arg(long)]
        out: PathBuf,
        /// Also write the fine-grid posterior of the target attribute.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tp: Option<usize>,
    },
    /// Choose the number of latent processes by leave-one-out validation.
    Cv {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a synthetic dataset and its noiseless truth.
    Synth {
        /// Generator settings.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        /// Noiseless aggregates; defaults to the output path with a `.truth.json` suffix.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the configured refinement experiment and write its report.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render a trace CSV or a grid CSV as SVG.
    Plot {
        /// Trace CSV or grid CSV (1-D band or 2-D heatmap, chosen by its columns).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn catalogue(path: &Path) -> Result<Catalogue, Error> {
    DatasetFile::load(path)?.resolve()
}

fn config(path: Option<&Path>) -> Result<ConfigFile, Error> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::default()),
    }
}

fn apply(cfg: &mut ConfigFile, o: &Overrides) {
    if let Some(s) = o.seed {
        cfg.training.seed = s;
    }
    if let Some(m) = o.method {
        cfg.model.method = m;
    }
    if let Some(l) = o.latents {
        cfg.model.num_latents = l;
    }
    if let Some(t) = o.tp {
        cfg.prediction.t_p = t;
    }
}

fn fit(dataset: &Path, config_path: Option<&Path>, model: &Path, trace: Option<&Path>, o: &Overrides) -> Result<(), Error> {
    let cat = catalogue(dataset)?;
    let mut cfg = config(config_path)?;
    apply(&mut cfg, o);
    let outcome = fit_configured(&cat, &cfg)?;
    let file = outcome.model_file(&cfg)?;
    file.save(model)?;
    let trace_path = trace.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(model, ".trace.csv"));
    write_atomic(&trace_path, trace_csv(&outcome.fitted.trace)?.as_bytes())?;
    let t = &outcome.fitted.trace;
    println!(
        "fitted {} with L = {}: {} iterations, best at {}, converged {}, final ELBO {}",
        outcome.fitted.method,
        outcome.fitted.state.num_latents(),
        t.len(),
        t.best_iteration.map(|b| b.to_string()).unwrap_or_else(|| "-".into()),
        t.converged,
        t.entries.last().map(|e| format!("{:.4}", e.elbo)).unwrap_or_else(|| "-".into())
    );
    if !t.backoffs.is_empty() {
        println!("learning rate halved at iterations {:?}", t.backoffs);
    }
    if let Some(m) = t.margin() {
        println!("ELBO gain over initialization: {m:.4}");
    }
    println!("model written to {}, trace to {}", model.display(), trace_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn refine(
    dataset: &Path,
    model: &Path,
    config_path: Option<&Path>,
    target: Option<&str>,
    out: &Path,
    grid: Option<&Path>,
    seed: Option<u64>,
    tp: Option<usize>,
) -> Result<(), Error> {
    let cat = catalogue(dataset)?;
    let cfg = config(config_path)?;
    let file = ModelFile::load(model)?;
    let fitted = file.restore(&cat)?;
    let target_id = target
        .map(str::to_string)
        .or_else(|| cfg.prediction.target_partition.clone())
        .ok_or_else(|| Error::InvalidConfig("no target partition given (--target-partition)".into()))?;
    let target = cat.dataset(&target_id)?;
    let rule = target.rules.first().cloned().ok_or_else(|| Error::EmptyPartition { partition: target_id.clone() })?;
    if target.rules.iter().any(|r| *r != rule) {
        return Err(Error::InvalidConfig(format!("dataset {target_id} mixes aggregation rules")));
    }
    let t_p = tp.unwrap_or(cfg.prediction.t_p);
    if t_p == 0 {
        return Err(Error::InvalidConfig("--tp must be at least 1".into()));
    }
    let seed = seed.unwrap_or(file.provenance.seed);
    let pred = fitted.predict(&target.partition, &rule, t_p, seed)?;
    write_atomic(out, support_csv(&pred)?.as_bytes())?;
    println!("{} supports of {} written to {}", pred.values.len(), target_id, out.display());
    if pred.clamped > 0 {
        println!("{} negative variances clamped to zero", pred.clamped);
    }
    let grid_path = grid.map(Path::to_path_buf).or_else(|| cfg.prediction.grid.then(|| with_suffix(out, ".grid.csv")));
    if let Some(g) = grid_path {
        let gp = predict_grid(target.domain_id(), target.attribute_id(), &fitted.state, &fitted.data, t_p, seed)?;
        write_atomic(&g, grid_csv(&gp)?.as_bytes())?;
        println!("{} grid points written to {}", gp.points.len(), g.display());
    }
    Ok(())
}

fn cv(dataset: &Path, config_path: Option<&Path>, out: &Path, o: &Overrides) -> Result<(), Error> {
    let cat = catalogue(dataset)?;
    let mut cfg = config(config_path)?;
    apply(&mut cfg, o);
    cfg.validate(&cat)?;
    let view = method_view(&cat, &cfg)?;
    let result = select_latents(&view, &cfg)?;
    for (l, e) in &result.errors {
        println!("L = {l}: validation MAPE {e:.6}");
    }
    println!("chosen L = {}", result.chosen);
    write_atomic(out, serde_json::to_string_pretty(&result)?.as_bytes())
}

fn synth(config_path: &Path, out: &Path, truth: Option<&Path>, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg: SynthConfig = serde_json::from_str(&read(config_path)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let gen = synth_generate(&cfg)?;
    DatasetFile::from_parts(&gen.attributes, &gen.domains, &gen.datasets)?.save(out)?;
    let truth_path = truth.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(out, ".truth.json"));
    DatasetFile::from_parts(&gen.attributes, &gen.domains, &gen.truth)?.save(&truth_path)?;
    println!("{} datasets written to {}, truth to {}", gen.datasets.len(), out.display(), truth_path.display());
    Ok(())
}

fn eval(dataset: &Path, config_path: &Path, out: &Path, o: &Overrides) -> Result<(), Error> {
    let cat = catalogue(dataset)?;
    let cfg = ConfigFile::load(config_path)?;
    cfg.validate(&cat)?;
    let mut spec = cfg.experiment.clone().ok_or_else(|| Error::InvalidConfig("config has no experiment section".into()))?;
    if let Some(m) = o.method {
        spec.method = m;
    }
    if let Some(l) = o.latents {
        spec.latents = l;
    }
    if let Some(t) = o.tp {
        spec.t_p = t;
    }
    if let Some(s) = o.seed {
        spec.seeds = vec![s];
    }
    let report = run_experiment(&spec, &cat.attributes, &cat.domains, &cat.datasets)?;
    print!("{}", report.table());
    write_atomic(out, serde_json::to_string_pretty(&report)?.as_bytes())
}

fn plot(input: &Path, out: &Path, title: Option<&str>) -> Result<(), Error> {
    let text = read(input)?;
    let first = text.lines().next().unwrap_or("");
    let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let title = title.unwrap_or(&name);
    let svg = if first.starts_with("iteration,") {
        trace_svg(&read_trace_csv(&text)?, title)?
    } else {
        let table = read_grid_csv(&text)?;
        match table.dimension() {
            1 => band_svg(&table, title)?,
            _ => heatmap_svg(&table, title)?,
        }
    };
    write_atomic(out, svg.as_bytes())?;
    println!("plot written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Fit { dataset, config, model, trace, overrides } => {
            fit(&dataset, config.as_deref(), &model, trace.as_deref(), &overrides)
        }
        Command::Refine { dataset, model, config, target_partition, out, grid, seed, tp } => refine(
            &dataset,
            &model,
            config.as_deref(),
            target_partition.as_deref(),
            &out,
            grid.as_deref(),
            seed,
            tp,
        ),
        Command::Cv { dataset, config, out, overrides } => cv(&dataset, config.as_deref(), &out, &overrides),
        Command::Synth { config, out, truth, seed } => synth(&config, &out, truth.as_deref(), seed),
        Command::Eval { dataset, config, out, overrides } => eval(&dataset, &config, &out, &overrides),
        Command::Plot { input, out, title } => plot(&input, &out, title.as_deref()),
    }
}

fn report(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message, "exit_code": code } }));
    ExitCode::from(code)
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("AGGMOGP_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("AGGMOGP_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return report("Usage", e.kind().to_string().as_str(), 1);
        }
    };
    if let Err(e) = configure_threads() {
        return report(e.kind(), &e.to_string(), 1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            report(e.kind(), &e.to_string(), code)
        }
    }
}
