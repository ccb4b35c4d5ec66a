//! Pretrain the toy parser on unoccluded single-person scenes, then fine-tune
//! it on occluded scenes with annotated masks, once with the single-view IG
//! objective and once with MVIG, and compare held-out scores per overlap
//! subset.
//!
//!     cargo run --release --example finetune_ig_vs_mvig

use mvig::annotation::{BaselineSegmenter, RegionGrowParams, SeedParams};
use mvig::losses::Reduction;
use mvig::metrics::{evaluate_subsets, LabelSpace};
use mvig::pipeline::{annotate_frame, frames_from_scenes, synth_scenes};
use mvig::scene::RigConfig;
use mvig::toyparser::{evaluation_images, finetune, pretrain, FinetuneConfig, Frame, Mode, PretrainConfig, ToyParser};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rig = RigConfig {
        n_views: 10,
        width: 64,
        height: 64,
        focal: 60.0,
        ..RigConfig::default()
    };
    let labels = LabelSpace::default();

    let solo = frames_from_scenes(&synth_scenes(8, 1, &rig, 0.0, 100)?, 20, 2.0)?;
    let (base, ce) = pretrain(&ToyParser::zeros(labels.clone()), &solo, &PretrainConfig::default())?;
    println!("pretrain cross-entropy {:.4} -> {:.4}", ce[0], ce[ce.len() - 1]);

    let crowded = frames_from_scenes(&synth_scenes(8, 3, &rig, 0.6, 200)?, 20, 2.0)?;
    let train: Vec<Frame> = crowded
        .iter()
        .map(|f| {
            let mut seg = BaselineSegmenter {
                params: RegionGrowParams::default(),
            };
            annotate_frame(f, &mut seg, "baseline", &SeedParams::default()).map(|(a, _)| a)
        })
        .collect::<Result<_, _>>()?;

    let mut held_out = frames_from_scenes(&synth_scenes(3, 3, &rig, 0.6, 300)?, 20, 2.0)?;
    held_out.extend(frames_from_scenes(&synth_scenes(3, 3, &rig, 0.8, 400)?, 20, 2.0)?);

    let report = |name: &str, parser: &ToyParser| -> Result<(), Box<dyn std::error::Error>> {
        let reports = evaluate_subsets(&evaluation_images(parser, &held_out)?, &labels)?;
        let cells: Vec<String> = reports
            .subsets
            .iter()
            .filter(|(_, r)| r.images > 0)
            .map(|(s, r)| format!("{s} {:.2}/{:.2}", 100.0 * r.miou_p, 100.0 * r.miou_h))
            .collect();
        println!("{name:<12} mIoU_p/mIoU_h  {}", cells.join("  "));
        Ok(())
    };
    report("pretrained", &base)?;

    // summed rather than averaged losses give the small linear model a
    // useful step size at the default learning rate
    let cfg = FinetuneConfig {
        reduction: Reduction::Sum,
        ..FinetuneConfig::default()
    };
    for mode in [Mode::Ig, Mode::Mvig] {
        let (tuned, history) = finetune(&base, &train, &cfg, mode)?;
        println!(
            "{mode:?}: total loss {:.4} -> {:.4} over {} epochs",
            history[0].total,
            history[history.len() - 1].total,
            history.len()
        );
        report(&format!("{mode:?}"), &tuned)?;
    }
    Ok(())
}
