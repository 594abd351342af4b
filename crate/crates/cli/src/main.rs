use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lightocc::bench::{cmd_bench, BenchMode};
use lightocc::pipeline::{
    cmd_augment, cmd_dump_slice, cmd_eval, cmd_fit, cmd_pipeline, cmd_synth, PipelineConfig, SliceView,
};
use lightocc::{Error, ErrorKind};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "lightocc", version, about = "Camera-to-occupancy geometric core at desk scale")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON pipeline config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (scene generation, init and cutmix).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Treat any run-to-run difference in outputs as a numerical failure.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (or file, for eval and dump-slice).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel kernels; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene: labels, mask, depth distributions, features.
    Synth,
    /// Run the full forward path on a scene and score it.
    Pipeline {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Fit parameters to one scene with plain gradient descent.
    Fit {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Time one path: lti, conv3d_ref or gss.
    Bench {
        #[arg(long)]
        mode: BenchMode,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Mix scene directories with BEV-CutMix, then apply the optional flip.
    Augment {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
    },
    /// Masked per-class IoU and mIoU of a prediction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Write one horizontal layer, or the top view, as a PPM image.
    DumpSlice {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, conflicts_with = "top")]
        z: Option<usize>,
        #[arg(long)]
        top: bool,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn load_config(global: &Global) -> Result<PipelineConfig, Error> {
    let mut cfg = match &global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
        cfg.cutmix.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(global: &Global, fallback: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json value serializes"));
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.global.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Synth => {
            let cfg = load_config(g)?;
            let out = out_path(g, "scene");
            let scene = cmd_synth(&cfg, &out)?;
            print(json!({
                "out": out,
                "boxes": scene.doc.boxes.len(),
                "dims": scene.labels.dims(),
            }));
        }
        Command::Pipeline { scene } => {
            let cfg = load_config(g)?;
            let out = out_path(g, "pipeline_out");
            let result = cmd_pipeline(&cfg, &scene, &out)?;
            if g.deterministic {
                let again = cmd_pipeline(&cfg, &scene, &out)?;
                if again.prediction != result.prediction {
                    return Err(nondeterministic("pipeline prediction"));
                }
            }
            print(json!({ "out": out, "miou": result.report.miou()? }));
        }
        Command::Fit { scene, steps, lr } => {
            let cfg = load_config(g)?;
            let out = out_path(g, "fit_out");
            let steps = steps.unwrap_or(cfg.fit.steps);
            let lr = lr.unwrap_or(cfg.fit.lr);
            let fit = cmd_fit(&cfg, &scene, steps, lr, &out)?;
            print(json!({
                "out": out,
                "steps": steps,
                "lr": lr,
                "initial_loss": fit.initial(),
                "final_loss": fit.last(),
            }));
        }
        Command::Bench { mode, repeats } => {
            let cfg = load_config(g)?;
            let result = cmd_bench(&cfg, mode, repeats)?;
            let value = serde_json::to_value(&result)?;
            if let Some(out) = &g.out {
                write_json(out, &value)?;
            }
            print(value);
            if g.deterministic && !result.checksum_stable {
                return Err(nondeterministic("bench output checksum"));
            }
        }
        Command::Augment { scenes } => {
            let cfg = load_config(g)?;
            let out = out_path(g, "augment_out");
            let (_, prov) = cmd_augment(&cfg, &scenes, &out)?;
            print(json!({
                "out": out,
                "cut_x": prov.cut_x,
                "cut_y": prov.cut_y,
                "donors": &prov.donors[..],
            }));
        }
        Command::Eval { pred, truth, mask } => {
            let report = cmd_eval(&pred, &truth, &mask, g.out.as_deref())?;
            print(report.to_json()?);
        }
        Command::DumpSlice { grid, z, top } => {
            let view = match (z, top) {
                (Some(z), false) => SliceView::Z(z),
                (None, true) => SliceView::Top,
                _ => return Err(Error::Config("dump-slice needs exactly one of --z or --top".into())),
            };
            let out = out_path(g, "slice.ppm");
            cmd_dump_slice(&grid, view, &out)?;
            print(json!({ "out": out }));
        }
    }
    Ok(())
}

fn nondeterministic(what: &str) -> Error {
    Error::Nondeterministic(what.into())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    lightocc::io::write_bytes(path, text.as_bytes())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
