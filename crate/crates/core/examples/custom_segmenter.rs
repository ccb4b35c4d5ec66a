//! Plug a different promptable segmenter into the annotation pipeline. This
//! one grows a region over depth only, ignoring colour. An external program
//! (e.g. a SAM wrapper) can be used the same way through
//! `ExternalSegmenter::spawn("command")` or `mvig annotate --segmenter external:command`.

use std::collections::VecDeque;

use mvig::annotation::{annotate_view, AnnotationError, PromptableSegmenter, SeedParams, SegmentRequest};
use mvig::grid::{count_true, Mask};
use mvig::metrics::mask_iou;
use mvig::scene::{generate_scene, RigConfig};
use mvig::toyparser::Frame;

struct DepthFlood {
    max_step: f64,
    calls: usize,
}

impl PromptableSegmenter for DepthFlood {
    fn segment(&mut self, req: &SegmentRequest<'_>) -> Result<Mask, AnnotationError> {
        self.calls += 1;
        let d = req.depth;
        let mut mask = Mask::filled(d.width(), d.height(), false);
        let mut queue: VecDeque<(usize, usize)> = req.seeds.iter().copied().filter(|&(x, y)| *d.get(x, y) > 0.0).collect();
        for &(x, y) in &queue {
            mask.set(x, y, true);
        }
        while let Some((x, y)) = queue.pop_front() {
            for (nx, ny) in d.neighbors4(x, y) {
                let nd = *d.get(nx, ny);
                if !*mask.get(nx, ny) && nd > 0.0 && (nd - d.get(x, y)).abs() <= self.max_step {
                    mask.set(nx, ny, true);
                    queue.push_back((nx, ny));
                }
            }
        }
        Ok(mask)
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rig = RigConfig {
        n_views: 3,
        ..RigConfig::default()
    };
    let scene = generate_scene(2, &rig, 0.4, 5)?;
    let frame = Frame::from_scene(&scene, 20, 2.0)?;
    let mut seg = DepthFlood {
        max_step: 0.05,
        calls: 0,
    };
    for (fv, view) in frame.views.iter().zip(&scene.views) {
        let ann = annotate_view(
            &frame.cloud,
            &frame.skeletons,
            &fv.rgb,
            &fv.depth,
            &fv.calib,
            &mut seg,
            "depth-flood",
            &SeedParams::default(),
        )?;
        for (id, m) in &ann.masks {
            println!(
                "view {} person {id}: {} px, IoU {:.3}",
                ann.view_id,
                count_true(m),
                mask_iou(m, &view.instance_mask(*id))?
            );
        }
    }
    println!("segmenter called {} times", seg.calls);
    Ok(())
}
