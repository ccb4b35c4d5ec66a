use clap::{Args, Parser, Subcommand};
use log::info;
use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use mvig::annotation::serve_adapter;
use mvig::cli::{self, CliError, FinetuneOptions, MaskChoice, RunConfig, SegmenterChoice, SweepAxis, SweepOptions, SynthOptions};
use mvig::losses::{PointScope, Reduction};
use mvig::toyparser::Mode;

#[derive(Parser)]
#[command(name = "mvig", version, about = "Multi-view weakly supervised multi-human parsing toolkit")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset.
    Synth {
        #[arg(long, default_value_t = 3)]
        people: usize,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        /// Target overlap degree of the reference view.
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        focal: Option<f64>,
        out: PathBuf,
    },
    /// Generate per-instance masks for every view and frame.
    Annotate {
        dataset: PathBuf,
        /// `baseline` or `external:<command>`.
        #[arg(long, default_value = "baseline")]
        segmenter: String,
    },
    /// Supervised part pretraining on ground-truth labels.
    Pretrain {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Fine-tune with the IG or MVIG objective.
    Finetune {
        dataset: PathBuf,
        #[command(flatten)]
        hp: TrainFlags,
        #[arg(long, default_value = "mvig")]
        mode: String,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV (default: <out>.loss.csv).
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        frames: Option<String>,
    },
    /// Predict instance and part maps.
    Predict {
        dataset: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<String>,
    },
    /// Score predictions per overlap subset.
    Evaluate {
        predictions: PathBuf,
        dataset: PathBuf,
        /// Directory for metrics.json and metrics.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        frames: Option<String>,
    },
    /// Fine-tune and evaluate once per setting of an ablation axis.
    Sweep {
        dataset: PathBuf,
        /// `views` (2, 4, 8) or `beta` (0.20, 0.30, 0.40 m).
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        hp: TrainFlags,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Fine-tuning frames; the remaining frames are evaluated.
        #[arg(long)]
        train_frames: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the external segmenter protocol on stdin/stdout with the
    /// region-growing segmenter (for testing adapters).
    #[command(hide = true)]
    SegmentServer {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `mean` or `sum` over points and pixels.
    #[arg(long)]
    reduction: Option<String>,
    /// Points entering the identity term: `visible` or `valid`.
    #[arg(long)]
    identity_scope: Option<String>,
    /// `gt`, `annotated` or `auto`.
    #[arg(long, default_value = "auto")]
    masks: String,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<MaskChoice, CliError> {
        let ft = &mut cfg.finetune;
        if let Some(v) = self.views {
            ft.n_views = v;
        }
        if let Some(v) = self.beta {
            ft.beta = v;
        }
        if let Some(v) = self.lambda {
            ft.lambda = v;
        }
        if let Some(v) = self.points {
            ft.n_points = v;
        }
        if let Some(v) = self.lr {
            ft.learning_rate = v;
        }
        if let Some(v) = self.batch {
            ft.batch_size = v;
        }
        if let Some(v) = self.epochs {
            ft.max_epochs = v;
        }
        if let Some(r) = &self.reduction {
            ft.reduction = match r.as_str() {
                "mean" => Reduction::Mean,
                "sum" => Reduction::Sum,
                _ => return Err(CliError::Usage(format!("unknown reduction {r:?}"))),
            };
        }
        if let Some(s) = &self.identity_scope {
            ft.identity_scope = match s.as_str() {
                "visible" => PointScope::Visible,
                "valid" => PointScope::Valid,
                _ => return Err(CliError::Usage(format!("unknown identity scope {s:?}"))),
            };
        }
        self.masks.parse().map_err(CliError::Usage)
    }
}

fn frames(arg: &Option<String>) -> Result<Option<std::ops::Range<usize>>, CliError> {
    arg.as_deref().map(cli::parse_frame_range).transpose().map_err(CliError::Usage)
}

fn run(args: Cli) -> Result<(), CliError> {
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.rng_seed = s;
        cfg.finetune.rng_seed = s;
        cfg.pretrain.rng_seed = s;
    }
    match args.command {
        Command::Synth {
            people,
            views,
            frames,
            overlap,
            width,
            height,
            focal,
            out,
        } => {
            if let Some(v) = views {
                cfg.rig.n_views = v;
            }
            if let Some(w) = width {
                cfg.rig.width = w;
            }
            if let Some(h) = height {
                cfg.rig.height = h;
            }
            if let Some(f) = focal {
                cfg.rig.focal = f;
            }
            cfg.validate()?;
            let info = cli::cmd_synth(
                &cfg,
                &SynthOptions {
                    people,
                    frames,
                    overlap,
                    seed: cfg.rng_seed,
                },
                &out,
            )?;
            println!("wrote {} frames x {} views to {}", info.frames, info.views, out.display());
        }
        Command::Annotate { dataset, segmenter } => {
            let seg: SegmenterChoice = segmenter.parse().map_err(CliError::Usage)?;
            cfg.validate()?;
            let summary = cli::cmd_annotate(&cfg, &dataset, &seg)?;
            for (f, e) in &summary.failed {
                eprintln!("frame {f}: {e}");
            }
            println!("annotated {} frames, {} failed", summary.annotated.len(), summary.failed.len());
        }
        Command::Pretrain {
            dataset,
            out,
            frames: fr,
            epochs,
            lr,
        } => {
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(l) = lr {
                cfg.pretrain.learning_rate = l;
            }
            cfg.validate()?;
            let history = cli::cmd_pretrain(&cfg, &dataset, frames(&fr)?.as_ref(), &out)?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                println!("part cross-entropy {first:.4} -> {last:.4}");
            }
        }
        Command::Finetune {
            dataset,
            hp,
            mode,
            init,
            out,
            history,
            frames: fr,
        } => {
            let masks = hp.apply(&mut cfg)?;
            let mode: Mode = mode.parse().map_err(CliError::Usage)?;
            cfg.validate()?;
            let history = history.unwrap_or_else(|| out.with_extension("loss.csv"));
            let opts = FinetuneOptions {
                mode,
                masks,
                frames: frames(&fr)?,
                init_weights: init,
                out_weights: out,
                history: history.clone(),
            };
            let h = cli::cmd_finetune(&cfg, &dataset, &opts)?;
            if let (Some(first), Some(last)) = (h.first(), h.last()) {
                println!("total loss {:.6} -> {:.6}; history in {}", first.total, last.total, history.display());
            }
        }
        Command::Predict {
            dataset,
            weights,
            out,
            frames: fr,
        } => {
            let n = cli::cmd_predict(&cfg, &dataset, &weights, frames(&fr)?.as_ref(), &out)?;
            println!("wrote {n} predictions to {}", out.display());
        }
        Command::Evaluate {
            predictions,
            dataset,
            out,
            frames: fr,
        } => {
            let reports = cli::cmd_evaluate(&predictions, &dataset, &cfg.labels, frames(&fr)?.as_ref(), out.as_deref())?;
            print!("{}", cli::summarize(&reports));
        }
        Command::Sweep {
            dataset,
            axis,
            hp,
            init,
            train_frames,
            out,
        } => {
            let masks = hp.apply(&mut cfg)?;
            let axis: SweepAxis = axis.parse().map_err(CliError::Usage)?;
            cfg.validate()?;
            let opts = SweepOptions {
                axis,
                masks,
                init_weights: init,
                train_frames: cli::parse_frame_range(&train_frames).map_err(CliError::Usage)?,
                out_dir: out,
            };
            let table = cli::cmd_sweep(&cfg, &dataset, &opts)?;
            print!("{}", table.format());
        }
        Command::SegmentServer { out_dir } => {
            info!("segment server writing masks to {}", out_dir.display());
            let stdin = io::stdin();
            serve_adapter(BufReader::new(stdin.lock()), io::stdout().lock(), &out_dir, &cfg.region_grow)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
