use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prosody_ensemble::criteria::{CriterionKind, CriterionSpec, Polarity};
use prosody_ensemble::pipeline::{
    ensemble_stage, evaluate, gen_corpus_stage, render_stage, report_stage, score_stage, score_standalone,
    simulate_stage, train_stage, PipelineError, Profile, RunConfig, StandaloneInput, Timing, Workspace,
};
use serde_json::{json, Map, Value};

/// Prosody ensemble workbench: train predictor ensembles, select renditions
/// by variance criteria and run simulated listening studies.
#[derive(Parser)]
#[command(name = "prosody-bench", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; fields left out take the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed_corpus: Option<u64>,
    #[arg(long, global = true)]
    seed_train_a: Option<u64>,
    #[arg(long, global = true)]
    seed_train_b: Option<u64>,
    #[arg(long, global = true)]
    seed_panel: Option<u64>,
    #[arg(long, global = true)]
    seed_noise: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    GenCorpus,
    Train,
    Ensemble,
    Render,
    /// Score the run's renditions, or a single pair given by --features/--wav.
    Score(ScoreArgs),
    Simulate,
    Evaluate,
    Report,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    criterion: Option<CriterionKind>,
    #[arg(long)]
    polarity: Option<Polarity>,
    /// Predicted-feature files of renditions A and B.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    features: Option<Vec<PathBuf>>,
    /// WAV files of renditions A and B.
    #[arg(long = "wav", num_args = 2, value_names = ["A", "B"])]
    wavs: Option<Vec<PathBuf>>,
}

fn load_config(common: &Common, criterion: Option<CriterionSpec>) -> Result<RunConfig, PipelineError> {
    let mut overrides = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
            if !v.is_object() {
                return Err(PipelineError::Config(format!("config {} must be a JSON object", path.display())));
            }
            v
        }
        None => json!({}),
    };
    let mut seeds = Map::new();
    for (key, value) in [
        ("corpus", common.seed_corpus),
        ("train_a", common.seed_train_a),
        ("train_b", common.seed_train_b),
        ("panel", common.seed_panel),
        ("noise", common.seed_noise),
    ] {
        if let Some(v) = value {
            seeds.insert(key.into(), json!(v));
        }
    }
    let obj = overrides.as_object_mut().expect("checked object");
    if !seeds.is_empty() {
        obj.insert("seeds".into(), Value::Object(seeds));
    }
    if let Some(w) = common.workers {
        obj.insert("workers".into(), json!(w));
    }
    if let Some(spec) = criterion {
        obj.insert("criteria".into(), json!([spec]));
    }
    RunConfig::from_json(&overrides, common.profile)
}

fn out_dir(common: &Common, config: &RunConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("prosody-run"))
}

fn pair(paths: &Option<Vec<PathBuf>>) -> Option<[PathBuf; 2]> {
    paths.as_ref().map(|p| [p[0].clone(), p[1].clone()])
}

fn run_stage(
    config: &RunConfig,
    ws: &Workspace,
    stage: fn(&RunConfig, &Workspace, &mut Timing) -> Result<(), PipelineError>,
) -> Result<(), PipelineError> {
    let mut timing = Timing::default();
    stage(config, ws, &mut timing)?;
    timing.save(ws)
}

fn run(cli: &Cli, config: &RunConfig, ws: &Workspace) -> Result<(), PipelineError> {
    match &cli.command {
        Command::GenCorpus => run_stage(config, ws, |c, w, t| gen_corpus_stage(c, w, t).map(drop)),
        Command::Train => run_stage(config, ws, train_stage),
        Command::Ensemble => run_stage(config, ws, |c, w, t| ensemble_stage(c, w, t).map(drop)),
        Command::Render => run_stage(config, ws, render_stage),
        Command::Score(args) if args.features.is_some() || args.wavs.is_some() => {
            let input = StandaloneInput {
                features: pair(&args.features),
                wavs: pair(&args.wavs),
            };
            let spec = CriterionSpec::new(
                args.criterion.unwrap_or(CriterionKind::AfpF0),
                args.polarity.unwrap_or_default(),
            );
            let scored = score_standalone(&input, spec, config.render, config.seeds.noise)?;
            println!("{}", serde_json::to_string_pretty(&scored).expect("score serializes"));
            Ok(())
        }
        Command::Score(_) => run_stage(config, ws, score_stage),
        Command::Simulate => run_stage(config, ws, simulate_stage),
        Command::Evaluate => {
            let r = evaluate(config, ws)?;
            summarize(&r);
            Ok(())
        }
        Command::Report => {
            let r = report_stage(config, ws)?;
            summarize(&r);
            Ok(())
        }
    }
}

fn summarize(r: &prosody_ensemble::pipeline::RunResults) {
    let rate = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.3}", v));
    let s = &r.study;
    println!("baseline {} {}", r.members[s.baseline_member], rate(s.baseline().rate));
    for c in &s.criteria {
        println!(
            "{} {} p={:.4} gap={}",
            c.label,
            rate(c.accuracy.rate),
            c.p_vs_chance,
            c.gap_closure.map_or("n/a".into(), |g| format!("{g:.3}"))
        );
    }
    println!("oracle {}", rate(s.oracle.rate));
}

fn write_error(dir: &Path, err: &PipelineError) {
    let body = json!({
        "error": err.kind(),
        "message": err.to_string(),
        "exit_code": err.exit_code(),
    });
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = std::fs::write(
            Workspace::new(dir).error(),
            serde_json::to_string_pretty(&body).expect("error serializes") + "\n",
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let criterion = match &cli.command {
        Command::Score(args) => match (args.criterion, args.polarity) {
            (None, None) => None,
            (kind, polarity) => Some(CriterionSpec::new(
                kind.unwrap_or(CriterionKind::AfpF0),
                polarity.unwrap_or_default(),
            )),
        },
        _ => None,
    };
    let config = match load_config(&cli.common, criterion) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let dir = out_dir(&cli.common, &config);
    match run(&cli, &config, &Workspace::new(&dir)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 2 {
                write_error(&dir, &e);
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
