//! Score predictions with the full metric suite, split into subsets by how
//! much people overlap. Here the "predictions" are ground truth with one
//! person's parts shifted, so the drop in each metric is easy to read.

use mvig::grid::Grid;
use mvig::metrics::{evaluate_subsets, format_table, EvalImage, LabelSpace};
use mvig::pipeline::synth_scenes;
use mvig::scene::RigConfig;
use std::collections::BTreeMap;

fn shifted(labels: &Grid<u8>, keep: impl Fn(u8) -> bool, dx: usize) -> Grid<u8> {
    Grid::from_fn(labels.width(), labels.height(), |x, y| {
        let v = *labels.get(x, y);
        if keep(v) {
            v
        } else if x >= dx {
            *labels.get(x - dx, y)
        } else {
            0
        }
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rig = RigConfig {
        n_views: 4,
        ..RigConfig::default()
    };
    let mut images = Vec::new();
    for overlap in [0.1, 0.5, 0.8] {
        for scene in synth_scenes(2, 3, &rig, overlap, 50)? {
            for v in &scene.views {
                let instances = shifted(&v.instances, |l| l != 1, 3);
                // parts follow the shifted instance map
                let parts = Grid::from_fn(v.parts.width(), v.parts.height(), |x, y| {
                    match (*instances.get(x, y), *v.instances.get(x, y)) {
                        (0, _) => 0,
                        (a, b) if a == b => *v.parts.get(x, y),
                        _ => *v.parts.get(x.saturating_sub(3), y),
                    }
                });
                let scores = (1..=3u8).map(|l| (l, 1.0 - 0.1 * l as f64)).collect::<BTreeMap<_, _>>();
                images.push(EvalImage {
                    gt_instances: v.instances.clone(),
                    gt_parts: v.parts.clone(),
                    pred_instances: instances,
                    pred_parts: parts,
                    pred_scores: scores,
                });
            }
        }
    }
    let reports = evaluate_subsets(&images, &LabelSpace::default())?;
    print!("{}", format_table(&reports));
    Ok(())
}
