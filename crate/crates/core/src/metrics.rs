//! Evaluation protocol: overlap-degree stratification, part and human mIoU
//! variants, pixel accuracies and part-based average precision.
//!
//! Conventions for the less standard metrics:
//! - IoU-type quantities accumulate intersections and unions over the whole
//!   dataset before dividing; empty ∩ empty counts as IoU 0.
//! - `mIoU_h` is the mean of background and human-foreground IoU.
//! - `AP^p_vol` matches predictions to ground truth greedily by descending
//!   confidence, scores a pair by the mean IoU over the part categories that
//!   appear in either instance, integrates the precision/recall curve with
//!   all-point interpolation, and averages over thresholds 0.1..=0.9.

use log::warn;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

use crate::grid::{Grid, Mask};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),
}

/// Ordered category names (0 is background) plus the ignore set and the
/// category mapping used by the `ignore` and `mapped` mIoU variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpace {
    pub names: Vec<String>,
    #[serde(default)]
    pub ignore: BTreeSet<u8>,
    #[serde(default)]
    pub mapping: BTreeMap<u8, u8>,
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self {
            names: crate::scene::parts::NAMES.iter().map(|s| s.to_string()).collect(),
            ignore: BTreeSet::new(),
            mapping: BTreeMap::new(),
        }
    }
}

impl LabelSpace {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let n = self.names.len();
        if n < 2 {
            return Err(MetricsError::InvalidLabelSpace("need background plus at least one part".into()));
        }
        if n > 256 {
            return Err(MetricsError::InvalidLabelSpace("at most 256 categories".into()));
        }
        if self.ignore.contains(&0) {
            return Err(MetricsError::InvalidLabelSpace("background cannot be ignored".into()));
        }
        if let Some(c) = self.ignore.iter().find(|&&c| c as usize >= n) {
            return Err(MetricsError::InvalidLabelSpace(format!("ignored category {c} does not exist")));
        }
        for (&src, &dst) in &self.mapping {
            if src as usize >= n || dst as usize >= n {
                return Err(MetricsError::InvalidLabelSpace(format!("mapping {src}->{dst} out of range")));
            }
            if src == 0 && dst != 0 {
                return Err(MetricsError::InvalidLabelSpace("background cannot be mapped away".into()));
            }
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.names.len()
    }

    fn map(&self, c: u8) -> u8 {
        self.mapping.get(&c).copied().unwrap_or(c)
    }
}

/// IoU of two binary masks; empty ∩ empty is 0.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, MetricsError> {
    if !a.same_shape(b) {
        return Err(MetricsError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(ratio(inter, union))
}

/// IoU of two `[x0, y0, x1, y1]` boxes; degenerate pairs give 0.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Maximum pairwise IoU among ground-truth person boxes; 0 with fewer than two.
pub fn overlap_degree(boxes: &[[f64; 4]]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..boxes.len() {
        for j in (i + 1)..boxes.len() {
            best = best.max(box_iou(&boxes[i], &boxes[j]));
        }
    }
    best
}

pub const OVERLAP_THRESHOLDS: [f64; 4] = [0.20, 0.40, 0.60, 0.80];

/// Per-image overlap degrees and the nested O20/O40/O60/O80 subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPartition {
    pub degrees: Vec<f64>,
}

impl OverlapPartition {
    /// Indices of images with overlap degree ≥ `threshold`.
    pub fn subset(&self, threshold: f64) -> Vec<usize> {
        self.degrees
            .iter()
            .enumerate()
            .filter(|(_, &d)| d >= threshold)
            .map(|(i, _)| i)
            .collect()
    }

    /// `("all", every image)` followed by `("O20", …)` … `("O80", …)`.
    pub fn named_subsets(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("all".to_string(), (0..self.degrees.len()).collect())];
        for t in OVERLAP_THRESHOLDS {
            out.push((format!("O{}", (t * 100.0).round() as u32), self.subset(t)));
        }
        out
    }
}

/// Partitions a dataset given each image's ground-truth person boxes.
pub fn partition_by_overlap(boxes_per_image: &[Vec<[f64; 4]>]) -> OverlapPartition {
    OverlapPartition {
        degrees: boxes_per_image.iter().map(|b| overlap_degree(b)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiouVariant {
    Full,
    Ignore,
    Mapped,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_pairs(pairs: &[(&Grid<u8>, &Grid<u8>)]) -> Result<(), MetricsError> {
    for (i, (p, g)) in pairs.iter().enumerate() {
        if !p.same_shape(g) {
            return Err(MetricsError::ShapeMismatch(format!("image {i}")));
        }
    }
    Ok(())
}

/// Dataset-level part mIoU over `(prediction, ground truth)` label maps.
///
/// Averages per-category IoU over categories present in the ground truth.
/// `Ignore` skips pixels whose ground truth is in the ignore set and drops
/// those categories from the average; `Mapped` remaps both maps first.
pub fn semantic_miou(
    pairs: &[(&Grid<u8>, &Grid<u8>)],
    labels: &LabelSpace,
    variant: MiouVariant,
) -> Result<f64, MetricsError> {
    check_pairs(pairs)?;
    let n = labels.num_categories();
    let mut inter = vec![0usize; n];
    let mut pred_count = vec![0usize; n];
    let mut gt_count = vec![0usize; n];
    for (pred, gt) in pairs {
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let (p, g) = match variant {
                MiouVariant::Mapped => (labels.map(p), labels.map(g)),
                _ => (p, g),
            };
            if variant == MiouVariant::Ignore && labels.ignore.contains(&g) {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p < n {
                pred_count[p] += 1;
            }
            if g < n {
                gt_count[g] += 1;
            }
            if p == g && p < n {
                inter[p] += 1;
            }
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..n {
        if gt_count[c] == 0 {
            continue;
        }
        if variant == MiouVariant::Ignore && labels.ignore.contains(&(c as u8)) {
            continue;
        }
        sum += ratio(inter[c], pred_count[c] + gt_count[c] - inter[c]);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Pixel accuracy and mean per-category recall over ground-truth categories.
pub fn accuracies(pairs: &[(&Grid<u8>, &Grid<u8>)], num_categories: usize) -> Result<(f64, f64), MetricsError> {
    check_pairs(pairs)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut hit = vec![0usize; num_categories.max(256)];
    let mut gt_count = vec![0usize; num_categories.max(256)];
    for (pred, gt) in pairs {
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            total += 1;
            gt_count[g as usize] += 1;
            if p == g {
                correct += 1;
                hit[g as usize] += 1;
            }
        }
    }
    let present: Vec<usize> = (0..gt_count.len()).filter(|&c| gt_count[c] > 0).collect();
    let acc_mean = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|&c| ratio(hit[c], gt_count[c])).sum::<f64>() / present.len() as f64
    };
    Ok((ratio(correct, total), acc_mean))
}

/// Binarizes a probability grid with the 0.5 threshold.
pub fn binarize(prob: &Grid<f64>) -> Mask {
    prob.map(|&p| p >= 0.5)
}

/// Global human mIoU: mean of background IoU and human-foreground IoU, with
/// counts accumulated over all images. Also returns the foreground-only IoU.
pub fn human_miou_global(pairs: &[(&Mask, &Mask)]) -> Result<(f64, f64), MetricsError> {
    let (mut fg_i, mut fg_u, mut bg_i, mut bg_u) = (0usize, 0usize, 0usize, 0usize);
    for (i, (p, g)) in pairs.iter().enumerate() {
        if !p.same_shape(g) {
            return Err(MetricsError::ShapeMismatch(format!("image {i}")));
        }
        for (&p, &g) in p.data().iter().zip(g.data()) {
            fg_i += (p && g) as usize;
            fg_u += (p || g) as usize;
            bg_i += (!p && !g) as usize;
            bg_u += (!p || !g) as usize;
        }
    }
    let fg = ratio(fg_i, fg_u);
    let bg = ratio(bg_i, bg_u);
    Ok(((fg + bg) / 2.0, fg))
}

/// Greedy one-to-one matching by descending IoU. Only pairs with IoU > 0 are
/// matched; ties resolve to the lower `(pred, gt)` index pair.
/// Returns `(pred index, gt index, iou)` triples.
pub fn greedy_match(pred: &[Mask], gt: &[Mask]) -> Result<Vec<(usize, usize, f64)>, MetricsError> {
    let mut cands = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let iou = mask_iou(p, g)?;
            if iou > 0.0 {
                cands.push((i, j, iou));
            }
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    for (i, j, iou) in cands {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j, iou));
        }
    }
    Ok(out)
}

/// Instance-level human mIoU: matched IoU averaged over every ground-truth
/// instance of every image; unmatched ground truth contributes 0.
pub fn human_miou_instance(images: &[(Vec<Mask>, Vec<Mask>)]) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut n_gt = 0usize;
    for (pred, gt) in images {
        n_gt += gt.len();
        for (_, _, iou) in greedy_match(pred, gt)? {
            sum += iou;
        }
    }
    Ok(if n_gt == 0 { 0.0 } else { sum / n_gt as f64 })
}

/// Mean IoU over the part categories (background excluded) present in either
/// instance part map.
pub fn mean_part_iou(pred: &Grid<u8>, gt: &Grid<u8>) -> Result<f64, MetricsError> {
    if !pred.same_shape(gt) {
        return Err(MetricsError::ShapeMismatch("instance part maps".into()));
    }
    let mut inter = [0usize; 256];
    let mut pc = [0usize; 256];
    let mut gc = [0usize; 256];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        pc[p as usize] += 1;
        gc[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 1..256 {
        let union = pc[c] + gc[c] - inter[c];
        if union > 0 {
            sum += ratio(inter[c], union);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedInstance {
    pub confidence: f64,
    pub parts: Grid<u8>,
}

/// Predictions and ground-truth instance part maps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ApImage {
    pub predictions: Vec<PredictedInstance>,
    pub ground_truth: Vec<Grid<u8>>,
}

pub fn ap_thresholds() -> [f64; 9] {
    std::array::from_fn(|i| (i + 1) as f64 / 10.0)
}

/// Area under the precision/recall curve with all-point interpolation.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut cum_tp = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        cum_tp += t as usize;
        recall.push(cum_tp as f64 / n_gt as f64);
        precision.push(cum_tp as f64 / (k + 1) as f64);
    }
    let mut mrec = vec![0.0];
    mrec.extend(&recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend(&precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..mrec.len() {
        if mrec[i] != mrec[i - 1] {
            ap += (mrec[i] - mrec[i - 1]) * mpre[i];
        }
    }
    ap
}

/// Part-based average precision averaged over thresholds 0.1..=0.9.
pub fn ap_p_vol(images: &[ApImage]) -> Result<f64, MetricsError> {
    let n_gt: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    if n_gt == 0 {
        if !images.is_empty() {
            warn!("AP^p_vol requested without ground-truth instances; reporting 0");
        }
        return Ok(0.0);
    }
    // mean part IoU table per image: [pred][gt]
    let mut tables = Vec::with_capacity(images.len());
    for im in images {
        let mut t = Vec::with_capacity(im.predictions.len());
        for p in &im.predictions {
            let row = im
                .ground_truth
                .iter()
                .map(|g| mean_part_iou(&p.parts, g))
                .collect::<Result<Vec<_>, _>>()?;
            t.push(row);
        }
        tables.push(t);
    }
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.predictions.len()).map(move |k| (i, k)))
        .collect();
    order.sort_by(|a, b| {
        let ca = images[a.0].predictions[a.1].confidence;
        let cb = images[b.0].predictions[b.1].confidence;
        cb.total_cmp(&ca).then(a.cmp(b))
    });
    let thresholds = ap_thresholds();
    let mut total = 0.0;
    for &t in &thresholds {
        let mut used: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.ground_truth.len()]).collect();
        let mut tp = Vec::with_capacity(order.len());
        for &(i, k) in &order {
            let mut best: Option<(usize, f64)> = None;
            for (j, &iou) in tables[i][k].iter().enumerate() {
                if !used[i][j] && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, iou)) if iou > t => {
                    used[i][j] = true;
                    tp.push(true);
                }
                _ => tp.push(false),
            }
        }
        total += average_precision(&tp, n_gt);
    }
    Ok(total / thresholds.len() as f64)
}

/// One evaluated image: label maps for prediction and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    /// 0 = background, otherwise instance label.
    pub gt_instances: Grid<u8>,
    pub gt_parts: Grid<u8>,
    pub pred_instances: Grid<u8>,
    pub pred_parts: Grid<u8>,
    /// Confidence per predicted instance label; missing labels default to 1.
    pub pred_scores: BTreeMap<u8, f64>,
}

fn instance_labels(map: &Grid<u8>) -> Vec<u8> {
    let set: BTreeSet<u8> = map.data().iter().copied().filter(|&v| v != 0).collect();
    set.into_iter().collect()
}

impl EvalImage {
    pub fn gt_boxes(&self) -> Vec<[f64; 4]> {
        instance_labels(&self.gt_instances)
            .into_iter()
            .filter_map(|l| crate::grid::mask_bbox(&self.gt_instances.map(|&v| v == l)).map(|r| r.to_box()))
            .collect()
    }
}

fn instance_part_map(instances: &Grid<u8>, parts: &Grid<u8>, label: u8) -> Grid<u8> {
    Grid::from_vec(
        instances.width(),
        instances.height(),
        instances
            .data()
            .iter()
            .zip(parts.data())
            .map(|(&i, &p)| if i == label { p } else { 0 })
            .collect(),
    )
    .expect("same shape")
}

/// All reported metrics for one subset, each a fraction in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub miou_p: f64,
    pub miou_p_m: f64,
    pub miou_p_ig: f64,
    pub miou_h_i: f64,
    pub miou_h: f64,
    /// Foreground-only human IoU, reported alongside `miou_h`.
    pub iou_h_fg: f64,
    pub acc_pixel: f64,
    pub acc_mean: f64,
    pub ap_p_vol: f64,
}

/// Evaluates every metric over `images`.
pub fn evaluate(images: &[&EvalImage], labels: &LabelSpace) -> Result<MetricsReport, MetricsError> {
    let part_pairs: Vec<(&Grid<u8>, &Grid<u8>)> = images.iter().map(|im| (&im.pred_parts, &im.gt_parts)).collect();
    let miou_p = semantic_miou(&part_pairs, labels, MiouVariant::Full)?;
    let miou_p_m = semantic_miou(&part_pairs, labels, MiouVariant::Mapped)?;
    let miou_p_ig = semantic_miou(&part_pairs, labels, MiouVariant::Ignore)?;
    let (acc_pixel, acc_mean) = accuracies(&part_pairs, labels.num_categories())?;

    let fg: Vec<(Mask, Mask)> = images
        .iter()
        .map(|im| (im.pred_instances.map(|&v| v != 0), im.gt_instances.map(|&v| v != 0)))
        .collect();
    let fg_refs: Vec<(&Mask, &Mask)> = fg.iter().map(|(p, g)| (p, g)).collect();
    let (miou_h, iou_h_fg) = human_miou_global(&fg_refs)?;

    let mut inst = Vec::with_capacity(images.len());
    let mut ap_images = Vec::with_capacity(images.len());
    for im in images {
        let pl = instance_labels(&im.pred_instances);
        let gl = instance_labels(&im.gt_instances);
        inst.push((
            pl.iter().map(|&l| im.pred_instances.map(|&v| v == l)).collect(),
            gl.iter().map(|&l| im.gt_instances.map(|&v| v == l)).collect(),
        ));
        ap_images.push(ApImage {
            predictions: pl
                .iter()
                .map(|&l| PredictedInstance {
                    confidence: im.pred_scores.get(&l).copied().unwrap_or(1.0),
                    parts: instance_part_map(&im.pred_instances, &im.pred_parts, l),
                })
                .collect(),
            ground_truth: gl
                .iter()
                .map(|&l| instance_part_map(&im.gt_instances, &im.gt_parts, l))
                .collect(),
        });
    }
    let miou_h_i = human_miou_instance(&inst)?;
    let ap = ap_p_vol(&ap_images)?;
    Ok(MetricsReport {
        images: images.len(),
        miou_p,
        miou_p_m,
        miou_p_ig,
        miou_h_i,
        miou_h,
        iou_h_fg,
        acc_pixel,
        acc_mean,
        ap_p_vol: ap,
    })
}

/// A report per overlap subset, in `all, O20, O40, O60, O80` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReports {
    pub conventions: String,
    pub subsets: Vec<(String, MetricsReport)>,
}

pub const CONVENTIONS_NOTE: &str = "dataset-level IoU accumulation; mIoU_h = mean(bg IoU, human IoU); \
AP^p_vol = greedy confidence-ordered matching on mean part IoU, all-point PR interpolation, thresholds 0.1:0.1:0.9; \
empty-vs-empty IoU = 0";

pub fn evaluate_subsets(images: &[EvalImage], labels: &LabelSpace) -> Result<SubsetReports, MetricsError> {
    let boxes: Vec<Vec<[f64; 4]>> = images.iter().map(|im| im.gt_boxes()).collect();
    let partition = partition_by_overlap(&boxes);
    let mut subsets = Vec::new();
    for (name, idx) in partition.named_subsets() {
        let sel: Vec<&EvalImage> = idx.iter().map(|&i| &images[i]).collect();
        subsets.push((name, evaluate(&sel, labels)?));
    }
    Ok(SubsetReports {
        conventions: CONVENTIONS_NOTE.to_string(),
        subsets,
    })
}

/// Aligned plain-text table, one row per subset, values in percent.
pub fn format_table(reports: &SubsetReports) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}", reports.conventions);
    let _ = writeln!(
        s,
        "{:<8} {:>6} {:>8} {:>9} {:>10} {:>10} {:>8} {:>10} {:>9} {:>9}",
        "subset", "images", "mIoU_p", "mIoU_p,m", "mIoU_p,ig", "mIoU_h,i", "mIoU_h", "acc_pixel", "acc_mean", "AP^p_vol"
    );
    for (name, r) in &reports.subsets {
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>8.2} {:>9.2} {:>10.2} {:>10.2} {:>8.2} {:>10.2} {:>9.2} {:>9.2}",
            name,
            r.images,
            100.0 * r.miou_p,
            100.0 * r.miou_p_m,
            100.0 * r.miou_p_ig,
            100.0 * r.miou_h_i,
            100.0 * r.miou_h,
            100.0 * r.acc_pixel,
            100.0 * r.acc_mean,
            100.0 * r.ap_p_vol
        );
    }
    s
}
