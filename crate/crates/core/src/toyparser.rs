//! A deliberately small multi-human parser: a linear softmax over hand-built
//! per-pixel features inside each person's (given) region, trained with
//! plain SGD. Detection is frozen: regions come from instance masks.

use log::{debug, info};
use nalgebra::Point3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use thiserror::Error;

use crate::annotation::{self, AnnotationError};
use crate::geometry::{self, project, CameraCalibration, DepthMap, FusionView, LabeledPointCloud, RgbImage};
use crate::grid::{mask_bbox, Grid, Mask, PixelRect};
use crate::losses::{
    self, multi_view_ig, mvig_loss, softmax, InstanceTarget, LossError, MultiViewSample, MvigBreakdown,
    PartProbMaps, PointScope, Reduction, SampledPoint, ViewMaps, PROB_EPS,
};
use crate::metrics::{self, EvalImage, LabelSpace};
use crate::scene::{instance_label, Joint, Skeleton, SyntheticScene, LIMBS};

pub const FEATURE_RECIPE: &str = "v1";
/// rgb 3, region uv 2, depth valid/relative/|relative| 3, joint distances 15,
/// nearest-limb distance 1, nearest-limb part one-hot 6.
pub const FEATURE_DIM: usize = 30;
/// Pixels added around an instance's mask bounding box.
pub const REGION_MARGIN: usize = 2;

const JOINT_DIST_SCALE: f64 = 1.0;
const LIMB_DIST_SCALE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum ParserError {
    #[error("empty region for instance {0}")]
    EmptyRegion(usize),
    #[error("region of instance {0} exceeds the image")]
    RegionOutOfBounds(usize),
    #[error("no skeleton for instance {0}")]
    MissingSkeleton(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("weights file: {0}")]
    Weights(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Linear softmax parser; `weights` is `FEATURE_DIM × channels`, feature-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyParser {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub recipe: String,
    pub labels: LabelSpace,
}

impl ToyParser {
    pub fn zeros(labels: LabelSpace) -> Self {
        let c = labels.num_categories();
        Self {
            weights: vec![0.0; FEATURE_DIM * c],
            bias: vec![0.0; c],
            recipe: FEATURE_RECIPE.to_string(),
            labels,
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Weights followed by biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let n = self.weights.len();
        self.weights.copy_from_slice(&p[..n]);
        self.bias.copy_from_slice(&p[n..]);
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        let mut out = self.clone();
        out.set_params(p);
        out
    }

    pub fn validate(&self) -> Result<(), ParserError> {
        if self.recipe != FEATURE_RECIPE {
            return Err(ParserError::Weights(format!("unknown feature recipe {:?}", self.recipe)));
        }
        if self.weights.len() != FEATURE_DIM * self.channels() {
            return Err(ParserError::Weights("weight shape does not match the feature recipe".into()));
        }
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(ParserError::Weights("non-finite weights".into()));
        }
        Ok(())
    }

    /// Logits for a block of feature rows.
    pub fn logits(&self, feats: &[f64]) -> Vec<f64> {
        let c = self.channels();
        let mut out = Vec::with_capacity(feats.len() / FEATURE_DIM * c);
        for row in feats.chunks(FEATURE_DIM) {
            let start = out.len();
            out.extend_from_slice(&self.bias);
            let acc = &mut out[start..];
            for (f, &x) in row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let w = &self.weights[f * c..(f + 1) * c];
                for k in 0..c {
                    acc[k] += x * w[k];
                }
            }
        }
        out
    }

    /// Accumulates `d(loss)/d(params)` given `d(loss)/d(logits)`.
    pub fn backward(&self, feats: &[f64], d_logits: &[f64], grad: &mut [f64]) {
        let c = self.channels();
        let nw = self.weights.len();
        for (row, g) in feats.chunks(FEATURE_DIM).zip(d_logits.chunks(c)) {
            for (f, &x) in row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let gw = &mut grad[f * c..(f + 1) * c];
                for k in 0..c {
                    gw[k] += x * g[k];
                }
            }
            for k in 0..c {
                grad[nw + k] += g[k];
            }
        }
    }

    /// Part probability maps for each region, plus the features used.
    pub fn forward_with_features(
        &self,
        view: &ViewInput<'_>,
        regions: &[InstanceRegion],
    ) -> Result<(Vec<PartProbMaps>, Vec<Vec<f64>>), ParserError> {
        let mut maps = Vec::with_capacity(regions.len());
        let mut feats = Vec::with_capacity(regions.len());
        for r in regions {
            let f = instance_features(view, r)?;
            let logits = self.logits(&f);
            maps.push(PartProbMaps::new(r.instance_id, r.rect, self.channels(), logits)?);
            feats.push(f);
        }
        Ok((maps, feats))
    }

    pub fn forward(&self, view: &ViewInput<'_>, regions: &[InstanceRegion]) -> Result<Vec<PartProbMaps>, ParserError> {
        Ok(self.forward_with_features(view, regions)?.0)
    }
}

/// Image data of one view.
#[derive(Debug, Clone, Copy)]
pub struct ViewInput<'a> {
    pub rgb: &'a RgbImage,
    pub depth: &'a DepthMap,
    pub calib: &'a CameraCalibration,
}

/// A person's region in one view together with their skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRegion {
    pub instance_id: usize,
    pub rect: PixelRect,
    pub skeleton: Skeleton,
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Feature rows (recipe "v1") for every pixel of `region`, row-major.
///
/// Distances are measured in the image and converted to meters at the
/// person's mean joint depth, so they do not depend on how far away the
/// person stands.
pub fn instance_features(view: &ViewInput<'_>, region: &InstanceRegion) -> Result<Vec<f64>, ParserError> {
    let r = region.rect;
    if r.is_empty() {
        return Err(ParserError::EmptyRegion(region.instance_id));
    }
    if r.x1 > view.rgb.width() || r.y1 > view.rgb.height() {
        return Err(ParserError::RegionOutOfBounds(region.instance_id));
    }
    let calib = view.calib;
    let mut joints_px = [[f64::NAN; 2]; Joint::COUNT];
    let mut z_sum = 0.0;
    let mut z_n = 0usize;
    for (i, j) in Joint::ALL.iter().enumerate() {
        let p = region.skeleton.joint(*j);
        if let Ok(pr) = project(&p, calib) {
            if pr.z > 0.0 {
                joints_px[i] = [pr.u, pr.v];
                z_sum += pr.z;
                z_n += 1;
            }
        }
    }
    let z_ref = if z_n > 0 { z_sum / z_n as f64 } else { 1.0 };
    let meters_per_px = z_ref / calib.fx;
    let (w, h) = (r.width() as f64, r.height() as f64);
    let mut out = Vec::with_capacity(r.area() * FEATURE_DIM);
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            let start = out.len();
            out.resize(start + FEATURE_DIM, 0.0);
            let f = &mut out[start..];
            let c = view.rgb.get(x, y);
            f[0] = c[0] as f64 / 255.0;
            f[1] = c[1] as f64 / 255.0;
            f[2] = c[2] as f64 / 255.0;
            f[3] = (x - r.x0) as f64 / w + 0.5 / w;
            f[4] = (y - r.y0) as f64 / h + 0.5 / h;
            let d = *view.depth.get(x, y);
            if d > 0.0 {
                let rel = (d - z_ref).clamp(-1.0, 1.0);
                f[5] = 1.0;
                f[6] = rel;
                f[7] = rel.abs();
            }
            let p = [x as f64, y as f64];
            for (i, jp) in joints_px.iter().enumerate() {
                f[8 + i] = if jp[0].is_finite() {
                    let dpx = ((p[0] - jp[0]).powi(2) + (p[1] - jp[1]).powi(2)).sqrt();
                    (dpx * meters_per_px / JOINT_DIST_SCALE).min(2.0)
                } else {
                    2.0
                };
            }
            let mut best = (f64::INFINITY, 0usize);
            for limb in LIMBS.iter() {
                let a = joints_px[limb.from.index()];
                let b = joints_px[limb.to.index()];
                if !(a[0].is_finite() && b[0].is_finite()) {
                    continue;
                }
                let dl = segment_distance(p, a, b);
                if dl < best.0 {
                    best = (dl, limb.part as usize);
                }
            }
            if best.0.is_finite() {
                f[23] = (best.0 * meters_per_px / LIMB_DIST_SCALE).min(4.0);
                f[23 + best.1] = 1.0;
            } else {
                f[23] = 4.0;
            }
        }
    }
    Ok(out)
}

/// Foreground mask (`p_h ≥ 0.5`) of a map on the full image.
pub fn binarize_map(map: &PartProbMaps, width: usize, height: usize) -> Mask {
    let union = losses::part_union(map);
    let mut mask = Grid::filled(width, height, false);
    let r = map.region;
    for (i, &p) in union.values.iter().enumerate() {
        if p >= 0.5 {
            mask.set(r.x0 + i % r.width(), r.y0 + i / r.width(), true);
        }
    }
    mask
}

/// One-to-one assignment of predicted maps to ground-truth instances.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMatching {
    /// `(predicted index, ground-truth instance id, IoU)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl InstanceMatching {
    /// Ground-truth instance id → predicted index.
    pub fn by_gt(&self) -> BTreeMap<usize, usize> {
        self.pairs.iter().map(|&(p, g, _)| (g, p)).collect()
    }
}

/// Greedy descending-IoU matching of binarized predictions to ground-truth
/// masks `(instance_id, mask)`.
pub fn match_instances(
    maps: &[PartProbMaps],
    gt: &[(usize, Mask)],
    width: usize,
    height: usize,
) -> Result<InstanceMatching, ParserError> {
    let pred: Vec<Mask> = maps.iter().map(|m| binarize_map(m, width, height)).collect();
    let gt_masks: Vec<Mask> = gt.iter().map(|(_, m)| m.clone()).collect();
    let matched = metrics::greedy_match(&pred, &gt_masks)?;
    let pairs: Vec<(usize, usize, f64)> = matched.iter().map(|&(i, j, iou)| (i, gt[j].0, iou)).collect();
    let used_p: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let used_g: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    Ok(InstanceMatching {
        unmatched_pred: (0..maps.len()).filter(|i| !used_p.contains(i)).collect(),
        unmatched_gt: gt.iter().map(|g| g.0).filter(|g| !used_g.contains(g)).collect(),
        pairs,
    })
}

/// One view of a training/evaluation frame.
#[derive(Debug, Clone)]
pub struct FrameView {
    pub calib: CameraCalibration,
    pub rgb: RgbImage,
    pub depth: DepthMap,
    /// Instance masks used for regions and weak supervision.
    pub masks: BTreeMap<usize, Mask>,
    /// Ground-truth label maps, when known.
    pub gt_instances: Option<Grid<u8>>,
    pub gt_parts: Option<Grid<u8>>,
}

impl FrameView {
    pub fn input(&self) -> ViewInput<'_> {
        ViewInput {
            rgb: &self.rgb,
            depth: &self.depth,
            calib: &self.calib,
        }
    }

    /// Mask bounding boxes grown by [`REGION_MARGIN`]; instances without
    /// pixels or skeleton are skipped.
    pub fn regions(&self, skeletons: &[Skeleton]) -> Vec<InstanceRegion> {
        self.masks
            .iter()
            .filter_map(|(&id, m)| {
                let rect = mask_bbox(m)?.expanded(REGION_MARGIN, m.width(), m.height());
                let skeleton = skeletons.iter().find(|s| s.instance_id == id)?.clone();
                Some(InstanceRegion {
                    instance_id: id,
                    rect,
                    skeleton,
                })
            })
            .collect()
    }
}

/// A multi-view frame with its skeletons and labelled fused point cloud.
#[derive(Debug, Clone)]
pub struct Frame {
    pub views: Vec<FrameView>,
    pub skeletons: Vec<Skeleton>,
    pub cloud: LabeledPointCloud,
}

/// How a [`Frame`] gets its instance masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    GroundTruth,
    Annotated,
}

impl Frame {
    /// Fuses the views' depth into a cloud labelled by nearest joint.
    pub fn new(views: Vec<FrameView>, skeletons: Vec<Skeleton>, outlier_k: usize, std_ratio: f64) -> Result<Self, ParserError> {
        let fusion: Vec<FusionView<'_>> = views
            .iter()
            .map(|v| FusionView {
                depth: &v.depth,
                calib: &v.calib,
                rgb: Some(&v.rgb),
            })
            .collect();
        let cloud = geometry::fuse_and_clean(&fusion, outlier_k, std_ratio)?;
        let cloud = annotation::label_points_by_nearest_joint(&cloud, &skeletons)?;
        Ok(Self {
            views,
            skeletons,
            cloud,
        })
    }

    /// Frame from a rendered synthetic scene with ground-truth masks and
    /// labels attached.
    pub fn from_scene(scene: &SyntheticScene, outlier_k: usize, std_ratio: f64) -> Result<Self, ParserError> {
        let views = scene
            .cameras
            .iter()
            .zip(&scene.views)
            .map(|(calib, v)| FrameView {
                calib: calib.clone(),
                rgb: v.rgb.clone(),
                depth: v.depth.clone(),
                masks: scene
                    .people
                    .iter()
                    .map(|p| (p.skeleton.instance_id, v.instance_mask(p.skeleton.instance_id)))
                    .collect(),
                gt_instances: Some(v.instances.clone()),
                gt_parts: Some(v.parts.clone()),
            })
            .collect();
        Self::new(views, scene.skeletons(), outlier_k, std_ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ig,
    Mvig,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ig" => Ok(Mode::Ig),
            "mvig" => Ok(Mode::Mvig),
            _ => Err(format!("unknown mode {s:?} (expected ig or mvig)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub beta: f64,
    pub n_points: usize,
    pub n_views: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub rng_seed: u64,
    pub reduction: Reduction,
    pub identity_scope: PointScope,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta: 0.30,
            n_points: 50,
            n_views: 4,
            learning_rate: 3e-4,
            batch_size: 8,
            max_epochs: 20,
            rng_seed: 0,
            reduction: Reduction::Mean,
            identity_scope: PointScope::Visible,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), ParserError> {
        let bad = |m: &str| Err(ParserError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if self.n_points == 0 || self.n_views == 0 || self.batch_size == 0 {
            return bad("n_points, n_views and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        Ok(())
    }
}

/// Per-epoch means of every loss component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub fg: f64,
    pub miou: f64,
    pub identity: f64,
    pub part: f64,
    pub total: f64,
}

/// A training item: one frame seen from a contiguous arc of cameras.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub frame: usize,
    pub views: Vec<usize>,
}

/// Every `(frame, arc)` combination of `n_views` adjacent cameras on a ring.
pub fn arc_items(frames: &[Frame], n_views: usize) -> Result<Vec<Item>, ParserError> {
    let mut items = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        let n = frame.views.len();
        if n_views > n {
            return Err(ParserError::InvalidConfig(format!("{n_views} views requested, frame {f} has {n}")));
        }
        let starts = if n_views == n { 1 } else { n };
        for a in 0..starts {
            items.push(Item {
                frame: f,
                views: (0..n_views).map(|k| (a + k) % n).collect(),
            });
        }
    }
    Ok(items)
}

/// Point-sampling stream of an item; independent of the epoch so that a
/// frozen parser sees identical losses every epoch.
fn item_rng(seed: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item as u64);
    rng
}

/// Parser outputs for every view of an item, with what is needed to chain
/// gradients back to the parameters.
pub struct ItemForward {
    pub views: Vec<ViewMaps>,
    pub features: Vec<Vec<Vec<f64>>>,
    pub targets: Vec<Vec<InstanceTarget>>,
}

pub fn forward_item(parser: &ToyParser, frame: &Frame, view_ids: &[usize]) -> Result<ItemForward, ParserError> {
    let mut views = Vec::with_capacity(view_ids.len());
    let mut features = Vec::with_capacity(view_ids.len());
    let mut targets = Vec::with_capacity(view_ids.len());
    for &v in view_ids {
        let fv = &frame.views[v];
        let regions = fv.regions(&frame.skeletons);
        let (maps, feats) = parser.forward_with_features(&fv.input(), &regions)?;
        targets.push(
            regions
                .iter()
                .map(|r| InstanceTarget::crop(&fv.masks[&r.instance_id], &r.rect))
                .collect(),
        );
        views.push(ViewMaps { view_id: v, maps });
        features.push(feats);
    }
    Ok(ItemForward {
        views,
        features,
        targets,
    })
}

/// Chains a flat multi-view logit gradient into a parameter gradient.
pub fn backward_item(parser: &ToyParser, fwd: &ItemForward, d_logits: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; parser.num_params()];
    let mut at = 0;
    for (vm, feats) in fwd.views.iter().zip(&fwd.features) {
        for (m, f) in vm.maps.iter().zip(feats) {
            let n = m.logits.len();
            parser.backward(f, &d_logits[at..at + n], &mut grad);
            at += n;
        }
    }
    grad
}

/// Uniformly samples up to `n` labelled cloud points.
pub fn sample_points(cloud: &LabeledPointCloud, n: usize, rng: &mut ChaCha8Rng) -> Vec<SampledPoint> {
    let labelled: Vec<(Point3<f64>, usize)> = cloud
        .points
        .iter()
        .filter_map(|p| p.instance_id.map(|id| (p.position, id)))
        .collect();
    let k = n.min(labelled.len());
    rand::seq::index::sample(rng, labelled.len(), k)
        .into_iter()
        .map(|i| SampledPoint {
            position: labelled[i].0,
            instance_id: labelled[i].1,
        })
        .collect()
}

/// Builds the multi-view sample of an item and fills each view's matching:
/// greedy IoU first, then each still-unmatched instance falls back to the
/// map predicted for its own region when that map is unmatched too.
pub fn build_sample(
    frame: &Frame,
    fwd: &ItemForward,
    points: Vec<SampledPoint>,
    beta: f64,
) -> Result<(MultiViewSample, u64), ParserError> {
    let view_refs: Vec<(&CameraCalibration, &DepthMap)> = fwd
        .views
        .iter()
        .map(|vm| (&frame.views[vm.view_id].calib, &frame.views[vm.view_id].depth))
        .collect();
    let mut sample = MultiViewSample::build(points, &view_refs, beta);
    let mut matching_sig = Vec::new();
    for (sv, vm) in sample.views.iter_mut().zip(&fwd.views) {
        let fv = &frame.views[vm.view_id];
        let gt: Vec<(usize, Mask)> = vm
            .maps
            .iter()
            .map(|m| (m.instance_id, fv.masks[&m.instance_id].clone()))
            .collect();
        let mut by_gt = BTreeMap::new();
        if !vm.maps.is_empty() {
            let m = match_instances(&vm.maps, &gt, fv.rgb.width(), fv.rgb.height())?;
            by_gt = m.by_gt();
            let used: BTreeSet<usize> = by_gt.values().copied().collect();
            for g in m.unmatched_gt {
                if let Some(k) = vm.maps.iter().position(|map| map.instance_id == g) {
                    if !used.contains(&k) {
                        by_gt.insert(g, k);
                    }
                }
            }
        }
        matching_sig.push(by_gt.clone());
        sv.matching = by_gt;
    }
    let sig = {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        matching_sig.hash(&mut h);
        h.finish()
    };
    Ok((sample, sig))
}

/// Objective value, component breakdown, parameter gradient and branch
/// fingerprint of one item.
pub struct ItemLoss {
    pub breakdown: MvigBreakdown,
    pub gradient: Vec<f64>,
    pub branch: u64,
}

pub fn item_loss(
    parser: &ToyParser,
    frame: &Frame,
    view_ids: &[usize],
    points: &[SampledPoint],
    cfg: &FinetuneConfig,
    mode: Mode,
) -> Result<ItemLoss, ParserError> {
    let fwd = forward_item(parser, frame, view_ids)?;
    let (out, breakdown, branch) = match mode {
        Mode::Ig => {
            let (out, fg, miou) = multi_view_ig(&fwd.views, &fwd.targets, cfg.lambda, cfg.reduction)?;
            let b = MvigBreakdown {
                fg,
                miou,
                ig: out.value,
                total: out.value,
                ..Default::default()
            };
            let branch = out.branch;
            (out, b, branch)
        }
        Mode::Mvig => {
            let (sample, msig) = build_sample(frame, &fwd, points.to_vec(), cfg.beta)?;
            let (out, b) = mvig_loss(&fwd.views, &fwd.targets, &sample, cfg.lambda, cfg.identity_scope, cfg.reduction)?;
            let branch = out.branch ^ msig.rotate_left(17);
            (out, b, branch)
        }
    };
    let gradient = backward_item(parser, &fwd, &out.gradient);
    Ok(ItemLoss {
        breakdown,
        gradient,
        branch,
    })
}

fn check_finite(b: &MvigBreakdown, epoch: usize, batch: usize) -> Result<(), ParserError> {
    let parts = [
        ("l_fg", b.fg),
        ("l_miou", b.miou),
        ("l_identity", b.identity),
        ("l_part", b.part),
        ("total", b.total),
    ];
    if let Some((name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(ParserError::Diverged {
            epoch,
            batch,
            detail: format!("{name} = {v}"),
        });
    }
    Ok(())
}

fn sgd_step(params: &mut [f64], grads: &[Vec<f64>], lr: f64) {
    if grads.is_empty() {
        return;
    }
    let scale = lr / grads.len() as f64;
    // fixed summation order keeps updates independent of thread count
    let mut sum = vec![0.0; params.len()];
    for g in grads {
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    for (p, s) in params.iter_mut().zip(&sum) {
        *p -= scale * s;
    }
}

/// Plain-SGD fine-tuning with the IG or MVIG objective. Returns the trained
/// parser and one history row per epoch (means over that epoch's items).
pub fn finetune(
    parser: &ToyParser,
    frames: &[Frame],
    cfg: &FinetuneConfig,
    mode: Mode,
) -> Result<(ToyParser, Vec<EpochLoss>), ParserError> {
    cfg.validate()?;
    parser.validate()?;
    if frames.is_empty() {
        return Err(ParserError::EmptyDataset);
    }
    let items = arc_items(frames, cfg.n_views)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut params = parser.params();
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    shuffle_rng.set_stream(u64::MAX);
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut per_item = vec![MvigBreakdown::default(); items.len()];
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let current = parser.with_params(&params);
            let results: Vec<Result<ItemLoss, ParserError>> = batch
                .par_iter()
                .map(|&i| {
                    let item = &items[i];
                    let frame = &frames[item.frame];
                    let points = sample_points(&frame.cloud, cfg.n_points, &mut item_rng(cfg.rng_seed, i));
                    item_loss(&current, frame, &item.views, &points, cfg, mode)
                })
                .collect();
            let mut grads = Vec::with_capacity(batch.len());
            for (r, &i) in results.into_iter().zip(batch) {
                let r = r?;
                check_finite(&r.breakdown, epoch, b)?;
                per_item[i] = r.breakdown;
                grads.push(r.gradient);
            }
            sgd_step(&mut params, &grads, cfg.learning_rate);
            if params.iter().any(|v| !v.is_finite()) {
                return Err(ParserError::Diverged {
                    epoch,
                    batch: b,
                    detail: "non-finite weights after update".into(),
                });
            }
        }
        let n = items.len() as f64;
        let mut sums = MvigBreakdown::default();
        for r in &per_item {
            sums.fg += r.fg;
            sums.miou += r.miou;
            sums.identity += r.identity;
            sums.part += r.part;
            sums.total += r.total;
        }
        let row = EpochLoss {
            epoch,
            fg: sums.fg / n,
            miou: sums.miou / n,
            identity: sums.identity / n,
            part: sums.part / n,
            total: sums.total / n,
        };
        info!("epoch {epoch}: total {:.6}", row.total);
        history.push(row);
    }
    Ok((parser.with_params(&params), history))
}

/// Supervised part pretraining settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            batch_size: 8,
            epochs: 30,
            rng_seed: 0,
        }
    }
}

/// Mean per-pixel cross-entropy of a view's regions against the ground-truth
/// part labels of each instance (pixels of other instances are background).
pub fn part_ce_loss(parser: &ToyParser, frame: &Frame, view: usize) -> Result<(f64, Vec<f64>), ParserError> {
    let fv = &frame.views[view];
    let (Some(inst), Some(parts)) = (&fv.gt_instances, &fv.gt_parts) else {
        return Err(ParserError::InvalidConfig("pretraining needs ground-truth part labels".into()));
    };
    let regions = fv.regions(&frame.skeletons);
    let (maps, feats) = parser.forward_with_features(&fv.input(), &regions)?;
    let mut grad = vec![0.0; parser.num_params()];
    let mut value = 0.0;
    let mut count = 0usize;
    let c = parser.channels();
    let mut p = vec![0.0; c];
    for (map, f) in maps.iter().zip(&feats) {
        let label = instance_label(map.instance_id);
        let r = map.region;
        let mut d_logits = vec![0.0; map.logits.len()];
        for i in 0..r.area() {
            let (x, y) = (r.x0 + i % r.width(), r.y0 + i / r.width());
            let target = if *inst.get(x, y) == label { *parts.get(x, y) as usize } else { 0 };
            softmax(map.pixel_logits(i), &mut p);
            value += -p[target].max(PROB_EPS).ln();
            for k in 0..c {
                d_logits[i * c + k] = p[k] - if k == target { 1.0 } else { 0.0 };
            }
            count += 1;
        }
        parser.backward(f, &d_logits, &mut grad);
    }
    if count > 0 {
        value /= count as f64;
        grad.iter_mut().for_each(|g| *g /= count as f64);
    }
    Ok((value, grad))
}

/// Supervised pretraining on ground-truth part labels. Returns the parser and
/// the mean cross-entropy per epoch.
pub fn pretrain(parser: &ToyParser, frames: &[Frame], cfg: &PretrainConfig) -> Result<(ToyParser, Vec<f64>), ParserError> {
    if frames.is_empty() {
        return Err(ParserError::EmptyDataset);
    }
    let mut items: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| (0..fr.views.len()).map(move |v| (f, v)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut params = parser.params();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        items.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in items.chunks(cfg.batch_size.max(1)).enumerate() {
            let current = parser.with_params(&params);
            let results: Vec<Result<(f64, Vec<f64>), ParserError>> = batch
                .par_iter()
                .map(|&(f, v)| part_ce_loss(&current, &frames[f], v))
                .collect();
            let mut grads = Vec::with_capacity(batch.len());
            for r in results {
                let (v, g) = r?;
                if !v.is_finite() {
                    return Err(ParserError::Diverged {
                        epoch,
                        batch: b,
                        detail: format!("part cross-entropy = {v}"),
                    });
                }
                total += v;
                grads.push(g);
            }
            sgd_step(&mut params, &grads, cfg.learning_rate);
        }
        let mean = total / items.len() as f64;
        debug!("pretrain epoch {epoch}: {mean:.6}");
        history.push(mean);
    }
    Ok((parser.with_params(&params), history))
}

/// Instance and part label maps predicted for one view, with per-instance
/// confidence (mean `p_h` over the instance's predicted pixels). A pixel
/// belongs to the instance with the highest `p_h ≥ 0.5`.
pub fn predict_view(
    parser: &ToyParser,
    view: &ViewInput<'_>,
    regions: &[InstanceRegion],
) -> Result<(Grid<u8>, Grid<u8>, BTreeMap<u8, f64>), ParserError> {
    let (w, h) = (view.rgb.width(), view.rgb.height());
    let maps = parser.forward(view, regions)?;
    let mut best: Grid<(f64, u8, u8)> = Grid::filled(w, h, (0.0, 0, 0));
    for map in &maps {
        let union = losses::part_union(map);
        let label = instance_label(map.instance_id);
        let r = map.region;
        for (i, &p) in union.values.iter().enumerate() {
            let (x, y) = (r.x0 + i % r.width(), r.y0 + i / r.width());
            let cur = best.get_mut(x, y);
            if p >= 0.5 && p > cur.0 {
                *cur = (p, label, union.argmax[i] as u8);
            }
        }
    }
    let instances = best.map(|b| b.1);
    let parts = best.map(|b| b.2);
    let mut scores = BTreeMap::new();
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for b in best.data().iter().filter(|b| b.1 != 0) {
        *scores.entry(b.1).or_insert(0.0) += b.0;
        *counts.entry(b.1).or_insert(0) += 1;
    }
    for (l, s) in scores.iter_mut() {
        *s /= counts[l] as f64;
    }
    Ok((instances, parts, scores))
}

/// Predictions on every view of `frames` paired with ground truth, using
/// regions derived from each view's masks.
pub fn evaluation_images(parser: &ToyParser, frames: &[Frame]) -> Result<Vec<EvalImage>, ParserError> {
    let jobs: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| (0..fr.views.len()).map(move |v| (f, v)))
        .collect();
    jobs.par_iter()
        .map(|&(f, v)| {
            let frame = &frames[f];
            let fv = &frame.views[v];
            let (Some(gi), Some(gp)) = (&fv.gt_instances, &fv.gt_parts) else {
                return Err(ParserError::InvalidConfig("evaluation needs ground-truth labels".into()));
            };
            let regions = fv.regions(&frame.skeletons);
            let (pred_instances, pred_parts, pred_scores) = predict_view(parser, &fv.input(), &regions)?;
            Ok(EvalImage {
                gt_instances: gi.clone(),
                gt_parts: gp.clone(),
                pred_instances,
                pred_parts,
                pred_scores,
            })
        })
        .collect()
}

const WEIGHTS_MAGIC: &[u8; 8] = b"MVIGTOY\0";
const WEIGHTS_VERSION: u32 = 1;

/// Serializes the parser: magic, version, recipe, dims, then every weight and
/// bias as little-endian f64.
pub fn encode_weights(parser: &ToyParser) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let recipe = parser.recipe.as_bytes();
    out.extend_from_slice(&(recipe.len() as u32).to_le_bytes());
    out.extend_from_slice(recipe);
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    out.extend_from_slice(&(parser.channels() as u32).to_le_bytes());
    for v in parser.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_weights(bytes: &[u8], labels: LabelSpace) -> Result<ToyParser, ParserError> {
    let bad = |m: &str| ParserError::Weights(m.to_string());
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ParserError> {
        let s = bytes.get(at..at + n).ok_or_else(|| bad("truncated"))?;
        at += n;
        Ok(s)
    };
    if take(8)? != WEIGHTS_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != WEIGHTS_VERSION {
        return Err(ParserError::Weights(format!("unsupported version {version}")));
    }
    let rlen = u32_at(take(4)?) as usize;
    let recipe = String::from_utf8(take(rlen)?.to_vec()).map_err(|_| bad("recipe is not utf-8"))?;
    let dim = u32_at(take(4)?) as usize;
    let channels = u32_at(take(4)?) as usize;
    if dim != FEATURE_DIM {
        return Err(ParserError::Weights(format!("feature dim {dim}, expected {FEATURE_DIM}")));
    }
    if channels != labels.num_categories() {
        return Err(ParserError::Weights(format!(
            "{channels} categories, label space has {}",
            labels.num_categories()
        )));
    }
    let n = dim * channels + channels;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let mut parser = ToyParser::zeros(labels);
    parser.recipe = recipe;
    parser.set_params(&params);
    parser.validate()?;
    Ok(parser)
}

/// Writes `path` and a `path.manifest` text sidecar.
pub fn save_weights(parser: &ToyParser, path: &Path) -> Result<(), ParserError> {
    let bytes = encode_weights(parser);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, &bytes)?;
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let manifest = format!(
        "format = mvig-toyparser\nversion = {WEIGHTS_VERSION}\nrecipe = {}\nfeature_dim = {FEATURE_DIM}\ncategories = {}\nlabels = {}\nbyte_order = little-endian f64\nsha256 = {hex}\n",
        parser.recipe,
        parser.channels(),
        parser.labels.names.join(",")
    );
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    s.into()
}

pub fn load_weights(path: &Path, labels: LabelSpace) -> Result<ToyParser, ParserError> {
    decode_weights(&fs::read(path)?, labels)
}
