//! Training objectives on per-instance part logits, each returning its value
//! together with the analytic gradient with respect to every input logit.
//!
//! Single-map objectives (`foreground_bce`, `lovasz_miou`, `ig_loss`) act on
//! one instance's [`PartProbMaps`]. Multi-view objectives (`identity_loss`,
//! `part_loss`, `mvig_loss`) act on a slice of [`ViewMaps`] and return one
//! flat gradient laid out view by view, map by map, in input order.
//!
//! Every [`LossOutput`] carries a `branch` fingerprint of the discrete choices
//! made while evaluating it (argmax routing in the part union, error sort
//! order, aggregated part labels, active probability clamps). Two inputs with
//! the same fingerprint lie on the same smooth piece of the loss, which is
//! what [`finite_difference_check`] uses to skip non-smooth points.

use log::{debug, warn};
use nalgebra::Point3;
use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use thiserror::Error;

use crate::geometry::{is_visible, project, CameraCalibration, DepthMap, Projection};
use crate::grid::{Mask, PixelRect};

/// Clamp applied to probabilities entering a logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("no views")]
    NoViews,
    #[error("point invisible everywhere")]
    PointInvisible,
    #[error("invalid part maps: {0}")]
    InvalidMaps(String),
}

/// How per-pixel and per-point terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn apply(self, sum: f64, count: usize) -> (f64, f64) {
        match self {
            Reduction::Mean if count > 0 => (sum / count as f64, 1.0 / count as f64),
            Reduction::Mean => (0.0, 0.0),
            Reduction::Sum => (sum, 1.0),
        }
    }
}

/// Per-instance part logits over a rectangular image region. Channel 0 is
/// background, channels `1..=C` are body parts. Pixels outside the region
/// are background with probability one and carry no logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PartProbMaps {
    pub instance_id: usize,
    pub region: PixelRect,
    pub channels: usize,
    /// Row-major over the region, `channels` values per pixel.
    pub logits: Vec<f64>,
}

impl PartProbMaps {
    pub fn new(instance_id: usize, region: PixelRect, channels: usize, logits: Vec<f64>) -> Result<Self, LossError> {
        if channels < 2 {
            return Err(LossError::InvalidMaps("need background plus at least one part".into()));
        }
        if region.is_empty() {
            return Err(LossError::InvalidMaps("empty region".into()));
        }
        if logits.len() != region.area() * channels {
            return Err(LossError::InvalidMaps(format!(
                "expected {} logits, got {}",
                region.area() * channels,
                logits.len()
            )));
        }
        Ok(Self {
            instance_id,
            region,
            channels,
            logits,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.region.area()
    }

    /// Index of image pixel `(x, y)` within the region.
    pub fn local_index(&self, x: usize, y: usize) -> Option<usize> {
        self.region
            .contains(x, y)
            .then(|| (y - self.region.y0) * self.region.width() + (x - self.region.x0))
    }

    pub fn pixel_logits(&self, i: usize) -> &[f64] {
        &self.logits[i * self.channels..(i + 1) * self.channels]
    }

    /// Softmax probabilities for every region pixel, same layout as `logits`.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.logits.len()];
        for (src, dst) in self.logits.chunks(self.channels).zip(out.chunks_mut(self.channels)) {
            softmax(src, dst);
        }
        out
    }

    /// Category distribution at image pixel `(x, y)`.
    pub fn probs_at(&self, x: usize, y: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.channels];
        match self.local_index(x, y) {
            Some(i) => softmax(self.pixel_logits(i), &mut p),
            None => p[0] = 1.0,
        }
        p
    }
}

pub fn softmax(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Binary ground truth for one instance over its map's region.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    pub mask: Mask,
}

impl InstanceTarget {
    /// Crops a full-image mask to `region`.
    pub fn crop(full: &Mask, region: &PixelRect) -> Self {
        let mask = Mask::from_fn(region.width(), region.height(), |x, y| {
            *full.get(region.x0 + x, region.y0 + y)
        });
        Self { mask }
    }

    fn check(&self, maps: &PartProbMaps) -> Result<(), LossError> {
        if self.mask.width() != maps.region.width() || self.mask.height() != maps.region.height() {
            return Err(LossError::ShapeMismatch(format!(
                "target {}x{} vs region {}x{}",
                self.mask.width(),
                self.mask.height(),
                maps.region.width(),
                maps.region.height()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub branch: u64,
}

impl LossOutput {
    fn zeros(n: usize) -> Self {
        Self {
            value: 0.0,
            gradient: vec![0.0; n],
            branch: 0,
        }
    }
}

fn hash_of<T: Hash>(v: &T) -> u64 {
    let mut h = DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

fn combine(a: u64, b: u64) -> u64 {
    hash_of(&(a, b))
}

/// Foreground probability per region pixel and the part channel it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PartUnion {
    pub values: Vec<f64>,
    pub argmax: Vec<usize>,
    /// Softmax probabilities, kept for gradient routing.
    pub probs: Vec<f64>,
    pub channels: usize,
}

/// Per-pixel maximum over the part channels (background excluded); ties go to
/// the lowest channel.
pub fn part_union(maps: &PartProbMaps) -> PartUnion {
    let probs = maps.probabilities();
    let c = maps.channels;
    let mut values = Vec::with_capacity(maps.pixel_count());
    let mut argmax = Vec::with_capacity(maps.pixel_count());
    for px in probs.chunks(c) {
        let mut best = 1;
        for k in 2..c {
            if px[k] > px[best] {
                best = k;
            }
        }
        values.push(px[best]);
        argmax.push(best);
    }
    PartUnion {
        values,
        argmax,
        probs,
        channels: c,
    }
}

impl PartUnion {
    /// Chains `dL/dp_h` per pixel into `dL/dlogits`, accumulating into `out`.
    pub fn backprop(&self, d_ph: &[f64], out: &mut [f64]) {
        let c = self.channels;
        for (i, &g) in d_ph.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.backprop_pixel(i, g, &mut out[i * c..(i + 1) * c]);
        }
    }

    fn backprop_pixel(&self, i: usize, g: f64, out: &mut [f64]) {
        let c = self.channels;
        let p = &self.probs[i * c..(i + 1) * c];
        let a = self.argmax[i];
        let pa = p[a];
        for k in 0..c {
            let delta = if k == a { 1.0 } else { 0.0 };
            out[k] += g * pa * (delta - p[k]);
        }
    }

    fn branch(&self) -> u64 {
        hash_of(&self.argmax)
    }
}

/// `(value, dvalue/dp, clamp active)` of `-[t ln p + (1-t) ln(1-p)]` with
/// `p` clamped to `[ε, 1-ε]`.
#[inline]
fn bce_term(p: f64, target: bool) -> (f64, f64, bool) {
    let clamped = p < PROB_EPS || p > 1.0 - PROB_EPS;
    let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if target {
        (-q.ln(), if clamped { 0.0 } else { -1.0 / q }, clamped)
    } else {
        (-(1.0 - q).ln(), if clamped { 0.0 } else { 1.0 / (1.0 - q) }, clamped)
    }
}

/// Binary cross-entropy on foreground probabilities. Returns value,
/// `dvalue/dp` per pixel and the clamp pattern fingerprint.
pub fn bce_on_probs(p: &[f64], y: &[bool], reduction: Reduction) -> (f64, Vec<f64>, u64) {
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    let mut clamps = Vec::new();
    for (i, (&pi, &yi)) in p.iter().zip(y).enumerate() {
        let (v, d, c) = bce_term(pi, yi);
        sum += v;
        grad.push(d);
        if c {
            clamps.push(i);
        }
    }
    let (value, scale) = reduction.apply(sum, p.len());
    grad.iter_mut().for_each(|g| *g *= scale);
    (value, grad, hash_of(&clamps))
}

/// Gradient of the Lovász extension of the Jaccard loss for a ground-truth
/// vector already sorted by descending error.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut jaccard = Vec::with_capacity(gt_sorted.len());
    let (mut cum_pos, mut cum_neg) = (0.0, 0.0);
    for &g in gt_sorted {
        if g {
            cum_pos += 1.0;
        } else {
            cum_neg += 1.0;
        }
        let intersection = gts - cum_pos;
        let union = gts + cum_neg;
        jaccard.push(1.0 - intersection / union);
    }
    let mut grad = jaccard.clone();
    for i in (1..grad.len()).rev() {
        grad[i] -= jaccard[i - 1];
    }
    grad
}

/// Lovász surrogate of the binary IoU loss, symmetric over the background
/// and foreground classes: `½(ΔJ₀ + ΔJ₁)`.
///
/// Errors are `1 - p` on ground-truth foreground and `p` elsewhere (the same
/// vector for both classes, since `q₀ = 1 - q₁`); ties in the descending sort
/// resolve by pixel index. A class with empty ground truth contributes the
/// Lovász extension of its Jaccard loss, which is 0 when its prediction is
/// empty too. Returns value, `dvalue/dp` and the sort-order fingerprint.
pub fn lovasz_on_probs(p: &[f64], y: &[bool]) -> (f64, Vec<f64>, u64) {
    let n = p.len();
    if n == 0 {
        return (0.0, Vec::new(), 0);
    }
    let errors: Vec<f64> = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| if yi { 1.0 - pi } else { pi })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let gt_fg: Vec<bool> = order.iter().map(|&i| y[i]).collect();
    let gt_bg: Vec<bool> = gt_fg.iter().map(|&g| !g).collect();
    let g_fg = lovasz_grad(&gt_fg);
    let g_bg = lovasz_grad(&gt_bg);
    let mut loss_fg = 0.0;
    let mut loss_bg = 0.0;
    let mut grad = vec![0.0; n];
    for (k, &i) in order.iter().enumerate() {
        loss_fg += errors[i] * g_fg[k];
        loss_bg += errors[i] * g_bg[k];
        // d(error)/dp is -1 on foreground, +1 elsewhere
        let sign = if y[i] { -1.0 } else { 1.0 };
        grad[i] = 0.5 * sign * (g_fg[k] + g_bg[k]);
    }
    (0.5 * (loss_fg + loss_bg), grad, hash_of(&order))
}

fn target_bits(target: &InstanceTarget) -> &[bool] {
    target.mask.data()
}

/// Foreground cross-entropy between the part union and the instance mask.
pub fn foreground_bce(maps: &PartProbMaps, target: &InstanceTarget, reduction: Reduction) -> Result<LossOutput, LossError> {
    target.check(maps)?;
    let union = part_union(maps);
    Ok(foreground_bce_from_union(&union, target, reduction))
}

fn foreground_bce_from_union(union: &PartUnion, target: &InstanceTarget, reduction: Reduction) -> LossOutput {
    let (value, d_ph, clamp) = bce_on_probs(&union.values, target_bits(target), reduction);
    let mut gradient = vec![0.0; union.probs.len()];
    union.backprop(&d_ph, &mut gradient);
    LossOutput {
        value,
        gradient,
        branch: combine(union.branch(), clamp),
    }
}

/// Lovász IoU surrogate between the part union and the instance mask.
pub fn lovasz_miou(maps: &PartProbMaps, target: &InstanceTarget) -> Result<LossOutput, LossError> {
    target.check(maps)?;
    let union = part_union(maps);
    Ok(lovasz_miou_from_union(&union, target))
}

fn lovasz_miou_from_union(union: &PartUnion, target: &InstanceTarget) -> LossOutput {
    let (value, d_ph, order) = lovasz_on_probs(&union.values, target_bits(target));
    let mut gradient = vec![0.0; union.probs.len()];
    union.backprop(&d_ph, &mut gradient);
    LossOutput {
        value,
        gradient,
        branch: combine(union.branch(), order),
    }
}

/// The two instance-guided components and their λ-combination.
#[derive(Debug, Clone, PartialEq)]
pub struct IgTerms {
    pub fg: LossOutput,
    pub miou: LossOutput,
    pub total: LossOutput,
}

pub fn ig_terms(maps: &PartProbMaps, target: &InstanceTarget, lambda: f64, reduction: Reduction) -> Result<IgTerms, LossError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::InvalidLambda(lambda));
    }
    target.check(maps)?;
    let union = part_union(maps);
    let fg = foreground_bce_from_union(&union, target, reduction);
    let miou = lovasz_miou_from_union(&union, target);
    let gradient = fg
        .gradient
        .iter()
        .zip(&miou.gradient)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let total = LossOutput {
        value: lambda * fg.value + (1.0 - lambda) * miou.value,
        gradient,
        branch: combine(fg.branch, miou.branch),
    };
    Ok(IgTerms { fg, miou, total })
}

/// `λ·L_fg + (1-λ)·L_mIoU`.
pub fn ig_loss(maps: &PartProbMaps, target: &InstanceTarget, lambda: f64, reduction: Reduction) -> Result<LossOutput, LossError> {
    Ok(ig_terms(maps, target, lambda, reduction)?.total)
}

/// Predicted instance maps of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMaps {
    pub view_id: usize,
    pub maps: Vec<PartProbMaps>,
}

/// Offsets of every map's logits inside the flat multi-view gradient.
pub fn gradient_layout(views: &[ViewMaps]) -> (Vec<Vec<usize>>, usize) {
    let mut offset = 0;
    let mut out = Vec::with_capacity(views.len());
    for v in views {
        let mut row = Vec::with_capacity(v.maps.len());
        for m in &v.maps {
            row.push(offset);
            offset += m.logits.len();
        }
        out.push(row);
    }
    (out, offset)
}

/// All logits of `views`, flattened in gradient layout order.
pub fn flatten_logits(views: &[ViewMaps]) -> Vec<f64> {
    views
        .iter()
        .flat_map(|v| v.maps.iter().flat_map(|m| m.logits.iter().copied()))
        .collect()
}

/// Copy of `views` with logits replaced from a flat vector.
pub fn with_logits(views: &[ViewMaps], flat: &[f64]) -> Vec<ViewMaps> {
    let mut at = 0;
    views
        .iter()
        .map(|v| ViewMaps {
            view_id: v.view_id,
            maps: v
                .maps
                .iter()
                .map(|m| {
                    let n = m.logits.len();
                    let mut m2 = m.clone();
                    m2.logits.copy_from_slice(&flat[at..at + n]);
                    at += n;
                    m2
                })
                .collect(),
        })
        .collect()
}

/// A 3D point with its ground-truth person.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledPoint {
    pub position: Point3<f64>,
    pub instance_id: usize,
}

/// Per-view geometry of a [`MultiViewSample`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleView {
    pub view_id: usize,
    pub projections: Vec<Projection>,
    /// Membership of each point in the view's β-visible set.
    pub visible: Vec<bool>,
    /// Ground-truth instance id → index of its matched predicted map.
    pub matching: BTreeMap<usize, usize>,
}

/// Sampled 3D points with their projections and β-visibility in every view.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSample {
    pub points: Vec<SampledPoint>,
    pub beta: f64,
    pub views: Vec<SampleView>,
}

impl MultiViewSample {
    /// Projects `points` into each `(calibration, depth)` view and computes
    /// the β-visibility flags. Matchings start empty.
    pub fn build(points: Vec<SampledPoint>, views: &[(&CameraCalibration, &DepthMap)], beta: f64) -> Self {
        let sample_views = views
            .iter()
            .map(|(calib, depth)| {
                let projections = points
                    .iter()
                    .map(|p| {
                        project(&p.position, calib).unwrap_or(Projection {
                            view_id: calib.view_id,
                            u: f64::NAN,
                            v: f64::NAN,
                            z: f64::NAN,
                            valid: false,
                        })
                    })
                    .collect();
                let visible = points.iter().map(|p| is_visible(&p.position, depth, calib, beta)).collect();
                SampleView {
                    view_id: calib.view_id,
                    projections,
                    visible,
                    matching: BTreeMap::new(),
                }
            })
            .collect();
        Self {
            points,
            beta,
            views: sample_views,
        }
    }

    /// Matching that pairs every ground-truth instance with the predicted map
    /// carrying the same `instance_id`.
    pub fn match_by_instance_id(&mut self, views: &[ViewMaps]) {
        for (sv, vm) in self.views.iter_mut().zip(views) {
            sv.matching = vm.maps.iter().enumerate().map(|(k, m)| (m.instance_id, k)).collect();
        }
    }
}

fn check_alignment(views: &[ViewMaps], sample: &MultiViewSample) -> Result<(), LossError> {
    if views.is_empty() || sample.views.is_empty() {
        return Err(LossError::NoViews);
    }
    if views.len() != sample.views.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} prediction views vs {} sample views",
            views.len(),
            sample.views.len()
        )));
    }
    Ok(())
}

/// Which projections a multi-view term looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointScope {
    /// Every projection that lands inside the image.
    Valid,
    /// Only projections within β of the view's visible surface.
    #[default]
    Visible,
}

/// Identity consistency: at every projection in `scope`, the matched owner's
/// foreground probability is pushed to 1 and every other instance's to 0.
/// Invalid projections contribute nothing.
pub fn identity_loss(
    views: &[ViewMaps],
    sample: &MultiViewSample,
    scope: PointScope,
    reduction: Reduction,
) -> Result<LossOutput, LossError> {
    check_alignment(views, sample)?;
    let (layout, total) = gradient_layout(views);
    let mut gradient = vec![0.0; total];
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut branch = 0u64;
    // d(loss)/d(p_h) per (view, map, local pixel), reduced afterwards
    let mut pending: Vec<(usize, usize, usize, f64)> = Vec::new();
    let unions: Vec<Vec<PartUnion>> = views.iter().map(|v| v.maps.iter().map(part_union).collect()).collect();
    for (vi, (vm, sv)) in views.iter().zip(&sample.views).enumerate() {
        for (j, point) in sample.points.iter().enumerate() {
            let Some((x, y)) = sv.projections[j].pixel() else { continue };
            if scope == PointScope::Visible && !sv.visible[j] {
                continue;
            }
            let owner = sv.matching.get(&point.instance_id).copied();
            count += 1;
            for (k, map) in vm.maps.iter().enumerate() {
                let target = owner == Some(k);
                let (p, local) = match map.local_index(x, y) {
                    Some(i) => (unions[vi][k].values[i], Some(i)),
                    None => (0.0, None),
                };
                let (v, d, clamped) = bce_term(p, target);
                sum += v;
                if clamped {
                    branch = combine(branch, hash_of(&(vi, k, j)));
                }
                if let Some(i) = local {
                    pending.push((vi, k, i, d));
                }
            }
        }
    }
    let (value, scale) = reduction.apply(sum, count);
    for (vi, k, i, d) in pending {
        let u = &unions[vi][k];
        let c = u.channels;
        let off = layout[vi][k] + i * c;
        u.backprop_pixel(i, d * scale, &mut gradient[off..off + c]);
    }
    for row in &unions {
        for u in row {
            branch = combine(branch, u.branch());
        }
    }
    Ok(LossOutput { value, gradient, branch })
}

/// Cross-view part label of point `j`: the part maximizing the summed owner
/// confidences over every view where the point projects validly; ties go to
/// the lowest part index.
pub fn aggregate_part_label(views: &[ViewMaps], sample: &MultiViewSample, j: usize) -> Result<usize, LossError> {
    check_alignment(views, sample)?;
    let channels = views
        .iter()
        .flat_map(|v| v.maps.first())
        .map(|m| m.channels)
        .next()
        .ok_or_else(|| LossError::InvalidMaps("no predicted instances".into()))?;
    let mut sums = vec![0.0; channels];
    let mut seen = false;
    let point = &sample.points[j];
    for (vm, sv) in views.iter().zip(&sample.views) {
        let Some((x, y)) = sv.projections[j].pixel() else { continue };
        seen = true;
        if let Some(&k) = sv.matching.get(&point.instance_id) {
            let p = vm.maps[k].probs_at(x, y);
            for c in 1..channels {
                sums[c] += p[c];
            }
        }
    }
    if !seen {
        return Err(LossError::PointInvisible);
    }
    let mut best = 1;
    for c in 2..channels {
        if sums[c] > sums[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Part consistency: cross-entropy between the aggregated label of each point
/// and the owner's category distribution in every view where the point is
/// β-visible. The aggregated label is treated as a constant.
pub fn part_loss(views: &[ViewMaps], sample: &MultiViewSample, reduction: Reduction) -> Result<LossOutput, LossError> {
    check_alignment(views, sample)?;
    let (layout, total) = gradient_layout(views);
    let mut gradient = vec![0.0; total];
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut labels = Vec::with_capacity(sample.points.len());
    let mut entries: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut clamps = Vec::new();
    for (j, point) in sample.points.iter().enumerate() {
        let any_visible = sample.views.iter().any(|sv| sv.visible[j]);
        if !any_visible {
            labels.push(0);
            continue;
        }
        let c_star = match aggregate_part_label(views, sample, j) {
            Ok(c) => c,
            Err(LossError::PointInvisible) => {
                labels.push(0);
                continue;
            }
            Err(e) => return Err(e),
        };
        labels.push(c_star);
        for (vi, (vm, sv)) in views.iter().zip(&sample.views).enumerate() {
            if !sv.visible[j] {
                continue;
            }
            let Some((x, y)) = sv.projections[j].pixel() else { continue };
            let Some(&k) = sv.matching.get(&point.instance_id) else { continue };
            let map = &vm.maps[k];
            let p = map.probs_at(x, y);
            let clamped = p[c_star] < PROB_EPS;
            sum += -p[c_star].max(PROB_EPS).ln();
            count += 1;
            if clamped {
                clamps.push((vi, j));
            } else if let Some(i) = map.local_index(x, y) {
                entries.push((vi, k, i, c_star));
            }
        }
    }
    if count == 0 {
        warn!("part consistency: no beta-visible points in any view");
        return Ok(LossOutput {
            branch: hash_of(&labels),
            ..LossOutput::zeros(total)
        });
    }
    let (value, scale) = reduction.apply(sum, count);
    for (vi, k, i, c_star) in entries {
        let map = &views[vi].maps[k];
        let c = map.channels;
        let mut p = vec![0.0; c];
        softmax(map.pixel_logits(i), &mut p);
        let off = layout[vi][k] + i * c;
        for ch in 0..c {
            let delta = if ch == c_star { 1.0 } else { 0.0 };
            gradient[off + ch] += scale * (p[ch] - delta);
        }
    }
    Ok(LossOutput {
        value,
        gradient,
        branch: combine(hash_of(&labels), hash_of(&clamps)),
    })
}

/// Values of every component of the multi-view objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MvigBreakdown {
    pub fg: f64,
    pub miou: f64,
    pub ig: f64,
    pub identity: f64,
    pub part: f64,
    pub total: f64,
}

/// Averaged instance-guided objective over every map of every view, with
/// `targets[v][k]` the instance mask for `views[v].maps[k]`.
pub fn multi_view_ig(
    views: &[ViewMaps],
    targets: &[Vec<InstanceTarget>],
    lambda: f64,
    reduction: Reduction,
) -> Result<(LossOutput, f64, f64), LossError> {
    if views.is_empty() {
        return Err(LossError::NoViews);
    }
    if targets.len() != views.len() || targets.iter().zip(views).any(|(t, v)| t.len() != v.maps.len()) {
        return Err(LossError::ShapeMismatch("targets do not align with predicted maps".into()));
    }
    let (layout, total) = gradient_layout(views);
    let n_maps: usize = views.iter().map(|v| v.maps.len()).sum();
    let mut out = LossOutput::zeros(total);
    let (mut fg, mut miou) = (0.0, 0.0);
    if n_maps == 0 {
        return Ok((out, 0.0, 0.0));
    }
    let w = 1.0 / n_maps as f64;
    for (vi, (vm, ts)) in views.iter().zip(targets).enumerate() {
        for (k, (map, t)) in vm.maps.iter().zip(ts).enumerate() {
            let terms = ig_terms(map, t, lambda, reduction)?;
            fg += w * terms.fg.value;
            miou += w * terms.miou.value;
            out.value += w * terms.total.value;
            let off = layout[vi][k];
            for (g, d) in out.gradient[off..off + map.logits.len()].iter_mut().zip(&terms.total.gradient) {
                *g += w * d;
            }
            out.branch = combine(out.branch, terms.total.branch);
        }
    }
    Ok((out, fg, miou))
}

/// `L_identity + L_part + L_IG`, with the instance-guided term averaged over
/// views and instances.
pub fn mvig_loss(
    views: &[ViewMaps],
    targets: &[Vec<InstanceTarget>],
    sample: &MultiViewSample,
    lambda: f64,
    identity_scope: PointScope,
    reduction: Reduction,
) -> Result<(LossOutput, MvigBreakdown), LossError> {
    let (ig, fg, miou) = multi_view_ig(views, targets, lambda, reduction)?;
    let identity = identity_loss(views, sample, identity_scope, reduction)?;
    let part = part_loss(views, sample, reduction)?;
    let gradient = ig
        .gradient
        .iter()
        .zip(&identity.gradient)
        .zip(&part.gradient)
        .map(|((a, b), c)| a + b + c)
        .collect();
    let value = identity.value + part.value + ig.value;
    let breakdown = MvigBreakdown {
        fg,
        miou,
        ig: ig.value,
        identity: identity.value,
        part: part.value,
        total: value,
    };
    Ok((
        LossOutput {
            value,
            gradient,
            branch: combine(combine(ig.branch, identity.branch), part.branch),
        },
        breakdown,
    ))
}

/// Result of [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates where a ±h step crosses a non-smooth point.
    pub excluded: Vec<usize>,
}

/// Compares the analytic gradient of `f` at `x` with central differences of
/// step `h`. Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
/// Coordinates whose ±h evaluations change the loss's branch fingerprint are
/// reported in `excluded` and left out of the maximum.
pub fn finite_difference_check<F>(f: F, x: &[f64], h: f64) -> FdReport
where
    F: Fn(&[f64]) -> LossOutput,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let base = f(x);
    let mut xp = x.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        excluded: Vec::new(),
    };
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let plus = f(&xp);
        xp[i] = x[i] - h;
        let minus = f(&xp);
        xp[i] = x[i];
        if plus.branch != base.branch || minus.branch != base.branch {
            debug!("finite-difference check: coordinate {i} sits on a non-smooth point");
            report.excluded.push(i);
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * h);
        let analytic = base.gradient[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let err = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report
}
