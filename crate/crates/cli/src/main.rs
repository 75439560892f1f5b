use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperlapse_cli::config::layered;
use hyperlapse_cli::report::report;
use hyperlapse_cli::synth::{synth_scene, SynthSceneSpec};
use hyperlapse_cli::{Pipeline, PipelineConfig, Stage};

/// Plans a normal-field-of-view hyperlapse from a 360° video.
#[derive(Parser)]
#[command(name = "hyperlapse", version)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Input directory holding `frames/` and optional `flow/`, `tracks.csv`,
    /// `regions/` and `probs/`.
    #[arg(long)]
    input: PathBuf,
    /// Run directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set plan.w_r=2`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate and smooth the camera rotation of the panorama.
    Stabilize360(StageArgs),
    /// Locate the focus of expansion per frame and smooth its track.
    Foe(StageArgs),
    /// Region saliency, semantic labels and ROI selection.
    Analyze(StageArgs),
    /// Plan the viewing direction per frame.
    Plan(StageArgs),
    /// Select output frames.
    Select(StageArgs),
    /// Zoom and render the selected frames.
    Render(StageArgs),
    /// Stabilize the rendered frames.
    Stab2d(StageArgs),
    /// Every stage in order.
    Run(StageArgs),
    /// Generate a synthetic input directory with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON scene description.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
    /// Summarize a completed run.
    Report {
        run: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn read_optional(p: Option<&Path>) -> Result<Option<String>, hyperlapse::Error> {
    Ok(p.map(std::fs::read_to_string).transpose()?)
}

fn run_stages(args: &StageArgs, stages: &[Stage]) -> ExitCode {
    let config = match PipelineConfig::load(args.config.as_deref(), &args.overrides) {
        Ok(c) => c,
        Err(e) => return fail(2, format!("config: {e}")),
    };
    let result = Pipeline::new(config, &args.input, &args.out).and_then(|p| stages.iter().try_for_each(|&s| p.run_stage(s)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.exit_code() as u8, &e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match &cli.command {
        Command::Stabilize360(a) => run_stages(a, &[Stage::Stabilize360]),
        Command::Foe(a) => run_stages(a, &[Stage::Foe]),
        Command::Analyze(a) => run_stages(a, &[Stage::Content]),
        Command::Plan(a) => run_stages(a, &[Stage::Viewplan]),
        Command::Select(a) => run_stages(a, &[Stage::Frameselect]),
        Command::Render(a) => run_stages(a, &[Stage::Render]),
        Command::Stab2d(a) => run_stages(a, &[Stage::Stab2d]),
        Command::Run(a) => run_stages(a, &Stage::ALL),
        Command::Synth { out, spec, overrides } => {
            let spec: SynthSceneSpec = match read_optional(spec.as_deref())
                .and_then(|text| layered(&SynthSceneSpec::default(), text.as_deref(), overrides))
                .and_then(|s: SynthSceneSpec| s.validate().map(|_| s))
            {
                Ok(s) => s,
                Err(e) => return fail(2, format!("scene spec: {e}")),
            };
            match synth_scene(&spec, out) {
                Ok(_) => ExitCode::SUCCESS,
                Err(e) => fail(3, e),
            }
        }
        Command::Report { run, json } => match report(run) {
            Ok(r) => {
                if *json {
                    println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
                } else {
                    print!("{}", r.to_text());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(2, e),
        },
    }
}
