//! Produce occlusion-aware instance masks from skeletons and depth with the
//! built-in region-growing segmenter, then compare them to ground truth.

use mvig::annotation::{pairwise_disjoint, BaselineSegmenter, RegionGrowParams, SeedParams};
use mvig::metrics::mask_iou;
use mvig::pipeline::annotate_frame;
use mvig::scene::{generate_scene, RigConfig};
use mvig::toyparser::Frame;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rig = RigConfig {
        n_views: 6,
        ..RigConfig::default()
    };
    let scene = generate_scene(3, &rig, 0.6, 11)?;
    let frame = Frame::from_scene(&scene, 20, 2.0)?;
    let mut segmenter = BaselineSegmenter {
        params: RegionGrowParams::default(),
    };
    let (annotated, provenance) = annotate_frame(&frame, &mut segmenter, "baseline", &SeedParams::default())?;

    for ((fv, view), prov) in annotated.views.iter().zip(&scene.views).zip(&provenance) {
        let masks: Vec<_> = fv.masks.values().collect();
        let ious: Vec<String> = fv
            .masks
            .iter()
            .map(|(id, m)| Ok(format!("{id}: {:.3}", mask_iou(m, &view.instance_mask(*id))?)))
            .collect::<Result<_, mvig::metrics::MetricsError>>()?;
        println!(
            "view {}: far-to-near {:?}, disjoint {}, IoU {}",
            prov.view_id,
            prov.order,
            pairwise_disjoint(&masks),
            ious.join(", ")
        );
    }
    Ok(())
}
