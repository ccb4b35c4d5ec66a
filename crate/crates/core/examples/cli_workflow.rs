//! The whole command-line workflow driven from Rust: synthesize a dataset,
//! annotate it, pretrain, fine-tune, predict, evaluate and run an ablation
//! sweep, all inside a temporary directory. `mvig <command> --help` exposes
//! the same steps from the shell.

use mvig::cli::{
    cmd_annotate, cmd_evaluate, cmd_finetune, cmd_predict, cmd_pretrain, cmd_sweep, cmd_synth, summarize,
    FinetuneOptions, MaskChoice, RunConfig, SegmenterChoice, SweepAxis, SweepOptions, SynthOptions,
};
use mvig::toyparser::Mode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let ds = root.join("dataset");

    let mut cfg = RunConfig::default();
    cfg.rig.n_views = 8;
    cfg.rig.width = 64;
    cfg.rig.height = 64;
    cfg.rig.focal = 60.0;
    cfg.finetune.max_epochs = 5;
    cfg.save(&root.join("config.json"))?;

    let info = cmd_synth(
        &cfg,
        &SynthOptions {
            people: 3,
            frames: 8,
            overlap: 0.6,
            seed: 1,
        },
        &ds,
    )?;
    println!("synth: {} frames x {} views", info.frames, info.views);

    let summary = cmd_annotate(&cfg, &ds, &SegmenterChoice::Baseline)?;
    println!("annotate: {} frames ok, {} failed", summary.annotated.len(), summary.failed.len());

    let ce = cmd_pretrain(&cfg, &ds, Some(&(0..4)), &root.join("pre.weights"))?;
    println!("pretrain: cross-entropy {:.4} -> {:.4}", ce[0], ce[ce.len() - 1]);

    let history = cmd_finetune(
        &cfg,
        &ds,
        &FinetuneOptions {
            mode: Mode::Mvig,
            masks: MaskChoice::Annotated,
            frames: Some(0..4),
            init_weights: Some(root.join("pre.weights")),
            out_weights: root.join("mvig.weights"),
            history: root.join("mvig.loss.csv"),
        },
    )?;
    println!("finetune: total {:.4} -> {:.4}", history[0].total, history[history.len() - 1].total);

    let n = cmd_predict(&cfg, &ds, &root.join("mvig.weights"), Some(&(4..8)), &root.join("pred"))?;
    println!("predict: {n} views");
    let reports = cmd_evaluate(&root.join("pred"), &ds, &cfg.labels, Some(&(4..8)), Some(root))?;
    print!("{}", summarize(&reports));

    let table = cmd_sweep(
        &cfg,
        &ds,
        &SweepOptions {
            axis: SweepAxis::Views,
            masks: MaskChoice::Annotated,
            init_weights: Some(root.join("pre.weights")),
            train_frames: 0..4,
            out_dir: root.join("sweep"),
        },
    )?;
    print!("{}", table.format());
    Ok(())
}
