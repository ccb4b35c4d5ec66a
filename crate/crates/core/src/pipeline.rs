//! Glue between scene generation, annotation and training.

use rayon::prelude::*;

use crate::annotation::{annotate_view, AnnotationError, PromptableSegmenter, Provenance, SeedParams};
use crate::scene::{generate_scene, RigConfig, SceneError, SyntheticScene};
use crate::toyparser::{Frame, ParserError};

/// `count` scenes with seeds `seed, seed + 1, …`, generated in parallel.
pub fn synth_scenes(
    count: usize,
    people: usize,
    rig: &RigConfig,
    overlap_target: f64,
    seed: u64,
) -> Result<Vec<SyntheticScene>, SceneError> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(people, rig, overlap_target, seed.wrapping_add(i)))
        .collect()
}

pub fn frames_from_scenes(scenes: &[SyntheticScene], outlier_k: usize, std_ratio: f64) -> Result<Vec<Frame>, ParserError> {
    scenes
        .par_iter()
        .map(|s| Frame::from_scene(s, outlier_k, std_ratio))
        .collect()
}

/// Replaces every view's masks with annotated ones.
pub fn annotate_frame(
    frame: &Frame,
    segmenter: &mut dyn PromptableSegmenter,
    segmenter_name: &str,
    params: &SeedParams,
) -> Result<(Frame, Vec<Provenance>), AnnotationError> {
    let mut out = frame.clone();
    let mut provenance = Vec::with_capacity(frame.views.len());
    for v in &mut out.views {
        let ann = annotate_view(
            &frame.cloud,
            &frame.skeletons,
            &v.rgb,
            &v.depth,
            &v.calib,
            segmenter,
            segmenter_name,
            params,
        )?;
        v.masks = ann.masks.into_iter().collect();
        provenance.push(ann.provenance);
    }
    Ok((out, provenance))
}
