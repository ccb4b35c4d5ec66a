//! Semi-automatic instance mask annotation: fused points are labelled by
//! their nearest skeleton joint, each person's visible points are projected
//! and clustered into point prompts, and a promptable segmenter is driven
//! from the farthest person to the nearest so that occluders win overlaps.

use log::warn;
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::time::Duration;
use thiserror::Error;

use crate::dataset::{self, DatasetError};
use crate::geometry::{is_visible, project, CameraCalibration, DepthMap, LabeledPointCloud, RgbImage};
use crate::grid::{dilate, Grid, Mask};
use crate::scene::{Joint, Skeleton};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("no skeletons")]
    NoSkeletons,
    #[error("point {0} is unlabelled")]
    Unlabelled(usize),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("segmenter returned a {got_w}x{got_h} mask for a {want_w}x{want_h} image")]
    MaskShape {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("segmenter: {0}")]
    Segmenter(String),
    #[error("segmenter timed out after {0:?}")]
    Timeout(Duration),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Assigns every point to the instance owning its nearest joint; ties go to
/// the lowest instance id.
pub fn label_points_by_nearest_joint(
    cloud: &LabeledPointCloud,
    skeletons: &[Skeleton],
) -> Result<LabeledPointCloud, AnnotationError> {
    let mut order: Vec<&Skeleton> = skeletons.iter().filter(|s| !s.joints.is_empty()).collect();
    if order.is_empty() {
        return Err(AnnotationError::NoSkeletons);
    }
    order.sort_by_key(|s| s.instance_id);
    let mut out = cloud.clone();
    for p in &mut out.points {
        let mut best = (f64::INFINITY, order[0].instance_id);
        for s in &order {
            for j in &s.joints {
                let d = (p.position - j).norm_squared();
                if d < best.0 {
                    best = (d, s.instance_id);
                }
            }
        }
        p.instance_id = Some(best.1);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedSource {
    ClusterCenter,
    Knee,
    Ankle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub x: usize,
    pub y: usize,
    pub source: SeedSource,
}

/// Positive point prompts for one instance in one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    pub instance_id: usize,
    pub seeds: Vec<Seed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl SeedSet {
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.seeds.iter().map(|s| (s.x, s.y)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedParams {
    /// Projected points per cluster seed.
    pub density: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub kmeans_iterations: usize,
    pub kmeans_seed: u64,
    /// Depth tolerance (meters) when deciding which points and joints a view sees.
    pub beta: f64,
}

impl Default for SeedParams {
    fn default() -> Self {
        Self {
            density: 50.0,
            k_min: 3,
            k_max: 10,
            kmeans_iterations: 50,
            kmeans_seed: 0,
            beta: 0.30,
        }
    }
}

impl SeedParams {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        let bad = |m: &str| Err(AnnotationError::InvalidParameters(m.into()));
        if !(self.density >= 1.0) {
            return bad("density must be >= 1");
        }
        if self.k_min < 1 || self.k_max < self.k_min {
            return bad("need 1 <= k_min <= k_max");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        Ok(())
    }

    /// `clamp(round(n / ρ), k_min, k_max)`.
    pub fn cluster_count(&self, n: usize) -> usize {
        ((n as f64 / self.density).round() as usize).clamp(self.k_min, self.k_max)
    }
}

/// Lloyd's k-means with k-means++ seeding over 2D points. Returns the centers
/// and the cluster of each point.
pub fn kmeans(points: &[[f64; 2]], k: usize, iterations: usize, seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
    let n = points.len();
    if n == 0 || k == 0 {
        return (Vec::new(), vec![0; n]);
    }
    let k = k.min(n);
    let d2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..n)]];
    let mut nearest: Vec<f64> = points.iter().map(|p| d2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // every point coincides with a center already
            break;
        };
        centers.push(points[next]);
        for (m, p) in nearest.iter_mut().zip(points) {
            *m = m.min(d2(p, &points[next]));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iterations.max(1) {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let mut best = 0;
            for (c, center) in centers.iter().enumerate().skip(1) {
                if d2(p, center) < d2(p, &centers[best]) {
                    best = c;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0f64; 3]; centers.len()];
        for (p, &a) in points.iter().zip(&assign) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            sums[a][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
        if !changed {
            break;
        }
    }
    (centers, assign)
}

/// Seeds for one instance: k-means cluster centers of its visible projected
/// pixels (snapped to the nearest member pixel), plus the knee and ankle
/// joints when they project inside the image and are visible.
pub fn extract_seeds(
    instance_id: usize,
    pixels: &[(usize, usize)],
    skeleton: Option<&Skeleton>,
    calib: &CameraCalibration,
    depth: &DepthMap,
    params: &SeedParams,
) -> SeedSet {
    let mut set = SeedSet {
        instance_id,
        seeds: Vec::new(),
        warning: None,
    };
    if pixels.is_empty() {
        warn!("instance {instance_id}: no projected points in view {}", calib.view_id);
        set.warning = Some("no projected points".into());
        return set;
    }
    let pts: Vec<[f64; 2]> = pixels.iter().map(|&(x, y)| [x as f64, y as f64]).collect();
    let k = params.cluster_count(pts.len());
    let (centers, assign) = kmeans(&pts, k, params.kmeans_iterations, params.kmeans_seed ^ instance_id as u64);
    for (c, center) in centers.iter().enumerate() {
        let d2 = |p: &[f64; 2]| (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
        let member = (0..pts.len())
            .filter(|&i| assign[i] == c)
            .min_by(|&a, &b| d2(&pts[a]).total_cmp(&d2(&pts[b])));
        if let Some(i) = member {
            push_unique(&mut set.seeds, pixels[i], SeedSource::ClusterCenter);
        }
    }
    if let Some(sk) = skeleton {
        for (joint, source) in [
            (Joint::LKnee, SeedSource::Knee),
            (Joint::RKnee, SeedSource::Knee),
            (Joint::LAnkle, SeedSource::Ankle),
            (Joint::RAnkle, SeedSource::Ankle),
        ] {
            let p = sk.joint(joint);
            if !is_visible(&p, depth, calib, params.beta) {
                continue;
            }
            if let Some(px) = project(&p, calib).ok().and_then(|pr| pr.pixel()) {
                set.seeds.push(Seed {
                    x: px.0,
                    y: px.1,
                    source,
                });
            }
        }
    }
    set
}

fn push_unique(seeds: &mut Vec<Seed>, (x, y): (usize, usize), source: SeedSource) {
    if !seeds.iter().any(|s| s.x == x && s.y == y) {
        seeds.push(Seed { x, y, source });
    }
}

/// Inputs of one segmentation call.
#[derive(Debug, Clone, Copy)]
pub struct SegmentRequest<'a> {
    pub rgb: &'a RgbImage,
    pub depth: &'a DepthMap,
    pub seeds: &'a [(usize, usize)],
    pub prior: Option<&'a Mask>,
}

/// Turns point prompts into a binary mask of the image's size.
pub trait PromptableSegmenter {
    fn segment(&mut self, request: &SegmentRequest<'_>) -> Result<Mask, AnnotationError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionGrowParams {
    /// Max RGB L2 distance between 4-neighbours.
    pub tau_color: f64,
    /// Max depth step (meters) between 4-neighbours.
    pub tau_depth: f64,
    /// Dilation (pixels) of the prior mask bounding growth.
    pub tau_prior: usize,
}

impl Default for RegionGrowParams {
    fn default() -> Self {
        Self {
            tau_color: 30.0,
            tau_depth: 0.10,
            tau_prior: 5,
        }
    }
}

/// Seeded region growing over colour and depth continuity; seeds on invalid
/// depth are skipped.
pub fn baseline_segment(
    rgb: &RgbImage,
    depth: &DepthMap,
    seeds: &[(usize, usize)],
    prior: Option<&Mask>,
    params: &RegionGrowParams,
) -> Result<Mask, AnnotationError> {
    let (w, h) = (rgb.width(), rgb.height());
    if !rgb.same_shape(depth) {
        return Err(AnnotationError::InvalidParameters("rgb and depth sizes differ".into()));
    }
    let allowed = match prior {
        Some(p) if !p.same_shape(rgb) => {
            return Err(AnnotationError::InvalidParameters("prior mask size differs".into()));
        }
        Some(p) => Some(dilate(p, params.tau_prior)),
        None => None,
    };
    let ok = |x: usize, y: usize| *depth.get(x, y) > 0.0 && allowed.as_ref().map_or(true, |a| *a.get(x, y));
    let mut mask = Grid::filled(w, h, false);
    let mut queue = VecDeque::new();
    let mut used = 0;
    for &(x, y) in seeds {
        if x >= w || y >= h || !ok(x, y) {
            continue;
        }
        used += 1;
        if !*mask.get(x, y) {
            mask.set(x, y, true);
            queue.push_back((x, y));
        }
    }
    if used == 0 {
        warn!("region growing: every seed skipped");
        return Ok(mask);
    }
    let tc2 = params.tau_color * params.tau_color;
    while let Some((x, y)) = queue.pop_front() {
        let c = rgb.get(x, y);
        let d = *depth.get(x, y);
        for (nx, ny) in mask.neighbors4(x, y).collect::<Vec<_>>() {
            if *mask.get(nx, ny) || !ok(nx, ny) {
                continue;
            }
            let nc = rgb.get(nx, ny);
            let dc: f64 = (0..3).map(|i| (c[i] as f64 - nc[i] as f64).powi(2)).sum();
            if dc <= tc2 && (depth.get(nx, ny) - d).abs() <= params.tau_depth {
                mask.set(nx, ny, true);
                queue.push_back((nx, ny));
            }
        }
    }
    Ok(mask)
}

/// The built-in deterministic segmenter.
#[derive(Debug, Clone, Default)]
pub struct BaselineSegmenter {
    pub params: RegionGrowParams,
}

impl PromptableSegmenter for BaselineSegmenter {
    fn segment(&mut self, r: &SegmentRequest<'_>) -> Result<Mask, AnnotationError> {
        baseline_segment(r.rgb, r.depth, r.seeds, r.prior, &self.params)
    }
}

/// One line sent to an external segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRequest {
    pub image_path: PathBuf,
    pub seeds: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_mask_path: Option<PathBuf>,
    /// 16-bit millimeter depth; segmenters may ignore it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<PathBuf>,
}

/// One line received from an external segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterResponse {
    #[serde(default)]
    pub mask_path: Option<PathBuf>,
    #[serde(default)]
    pub error: Option<String>,
}

pub const ADAPTER_TIMEOUT: Duration = Duration::from_secs(60);

/// Segmenter running as a child process that speaks line-delimited JSON on
/// its standard streams. The command is run through `sh -c`.
pub struct ExternalSegmenter {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    scratch: tempfile::TempDir,
    calls: usize,
    pub timeout: Duration,
}

impl ExternalSegmenter {
    pub fn spawn(command: &str) -> Result<Self, AnnotationError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| AnnotationError::Segmenter(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let scratch = tempfile::tempdir().map_err(|e| AnnotationError::Segmenter(e.to_string()))?;
        Ok(Self {
            child,
            stdin,
            lines,
            scratch,
            calls: 0,
            timeout: ADAPTER_TIMEOUT,
        })
    }

    fn scratch_path(&self, name: &str) -> PathBuf {
        self.scratch.path().join(format!("{:06}_{name}.png", self.calls))
    }
}

impl PromptableSegmenter for ExternalSegmenter {
    fn segment(&mut self, r: &SegmentRequest<'_>) -> Result<Mask, AnnotationError> {
        self.calls += 1;
        let image_path = self.scratch_path("rgb");
        dataset::write_rgb(&image_path, r.rgb)?;
        let depth_path = self.scratch_path("depth");
        dataset::write_depth(&depth_path, r.depth)?;
        let prior_mask_path = match r.prior {
            Some(p) => {
                let path = self.scratch_path("prior");
                dataset::write_mask(&path, p)?;
                Some(path)
            }
            None => None,
        };
        let req = AdapterRequest {
            image_path,
            seeds: r.seeds.iter().map(|&(x, y)| [x, y]).collect(),
            prior_mask_path,
            depth_path: Some(depth_path),
        };
        let line = serde_json::to_string(&req).expect("request serializes");
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| AnnotationError::Segmenter(format!("write failed: {e}")))?;
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(AnnotationError::Segmenter(format!("read failed: {e}"))),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                return Err(AnnotationError::Timeout(self.timeout));
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return Err(AnnotationError::Segmenter("process exited".into()));
            }
        };
        let resp: AdapterResponse = serde_json::from_str(&reply)
            .map_err(|e| AnnotationError::Segmenter(format!("bad response {reply:?}: {e}")))?;
        if let Some(e) = resp.error {
            return Err(AnnotationError::Segmenter(e));
        }
        let path = resp
            .mask_path
            .ok_or_else(|| AnnotationError::Segmenter("response has no mask_path".into()))?;
        let mask = dataset::read_mask(&path)?;
        if !mask.same_shape(r.rgb) {
            return Err(AnnotationError::MaskShape {
                got_w: mask.width(),
                got_h: mask.height(),
                want_w: r.rgb.width(),
                want_h: r.rgb.height(),
            });
        }
        Ok(mask)
    }
}

impl Drop for ExternalSegmenter {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Serves the adapter protocol with the baseline segmenter: reads requests
/// from `input`, writes masks next to `out_dir`, answers on `output`.
pub fn serve_adapter(
    input: impl BufRead,
    mut output: impl Write,
    out_dir: &Path,
    params: &RegionGrowParams,
) -> Result<(), AnnotationError> {
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| AnnotationError::Segmenter(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match handle_request(&line, i, out_dir, params) {
            Ok(path) => AdapterResponse {
                mask_path: Some(path),
                error: None,
            },
            Err(e) => AdapterResponse {
                mask_path: None,
                error: Some(e.to_string()),
            },
        };
        writeln!(output, "{}", serde_json::to_string(&resp).expect("response serializes"))
            .and_then(|_| output.flush())
            .map_err(|e| AnnotationError::Segmenter(e.to_string()))?;
    }
    Ok(())
}

fn handle_request(line: &str, i: usize, out_dir: &Path, params: &RegionGrowParams) -> Result<PathBuf, AnnotationError> {
    let req: AdapterRequest =
        serde_json::from_str(line).map_err(|e| AnnotationError::Segmenter(format!("bad request: {e}")))?;
    let rgb = dataset::read_rgb(&req.image_path)?;
    let depth = match &req.depth_path {
        Some(p) => dataset::read_depth(p)?,
        // colour only: treat every pixel as valid and flat
        None => Grid::filled(rgb.width(), rgb.height(), 1.0),
    };
    let prior = req.prior_mask_path.as_deref().map(dataset::read_mask).transpose()?;
    let seeds: Vec<(usize, usize)> = req.seeds.iter().map(|s| (s[0], s[1])).collect();
    let mask = baseline_segment(&rgb, &depth, &seeds, prior.as_ref(), params)?;
    let path = out_dir.join(format!("mask_{i:06}.png"));
    dataset::write_mask(&path, &mask)?;
    Ok(path)
}

/// One view's annotation result.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewAnnotation {
    pub view_id: usize,
    /// `(instance_id, mask)`, pairwise disjoint, in processing order.
    pub masks: Vec<(usize, Mask)>,
    pub provenance: Provenance,
}

impl ViewAnnotation {
    pub fn mask(&self, instance_id: usize) -> Option<&Mask> {
        self.masks.iter().find(|(id, _)| *id == instance_id).map(|(_, m)| m)
    }
}

/// Record of how a view's masks were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub view_id: usize,
    /// Instance ids from farthest to nearest.
    pub order: Vec<usize>,
    pub mean_depths: Vec<f64>,
    pub seeds: Vec<SeedSet>,
    pub seed_params: SeedParams,
    pub segmenter: String,
    pub refinement_passes: usize,
    pub omitted: Vec<usize>,
}

/// Segments every labelled instance in one view, far to near, with nearer
/// instances overwriting earlier claims, then refines each mask once by
/// re-prompting with the mask itself as prior.
pub fn annotate_view(
    cloud: &LabeledPointCloud,
    skeletons: &[Skeleton],
    rgb: &RgbImage,
    depth: &DepthMap,
    calib: &CameraCalibration,
    segmenter: &mut dyn PromptableSegmenter,
    segmenter_name: &str,
    params: &SeedParams,
) -> Result<ViewAnnotation, AnnotationError> {
    params.validate()?;
    if skeletons.is_empty() {
        return Err(AnnotationError::NoSkeletons);
    }
    let (w, h) = (rgb.width(), rgb.height());
    let mut ids: Vec<usize> = skeletons.iter().map(|s| s.instance_id).collect();
    ids.sort_unstable();
    ids.dedup();

    let mut visible: Vec<(usize, Vec<(usize, usize)>, f64)> = Vec::new();
    let mut omitted = Vec::new();
    for &id in &ids {
        let mut pixels = Vec::new();
        let mut depth_sum = 0.0;
        for (i, p) in cloud.points.iter().enumerate() {
            match p.instance_id {
                None => return Err(AnnotationError::Unlabelled(i)),
                Some(pid) if pid != id => continue,
                Some(_) => {}
            }
            if !is_visible(&p.position, depth, calib, params.beta) {
                continue;
            }
            let pr = project(&p.position, calib).expect("visible points project");
            if let Some(px) = pr.pixel() {
                pixels.push(px);
                depth_sum += pr.z;
            }
        }
        if pixels.is_empty() {
            warn!("view {}: instance {id} has no visible points, omitted", calib.view_id);
            omitted.push(id);
            continue;
        }
        let mean = depth_sum / pixels.len() as f64;
        visible.push((id, pixels, mean));
    }
    // farthest first; equal depths fall back to instance id
    visible.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));

    let mut seeds = Vec::with_capacity(visible.len());
    let mut claims: Grid<Option<usize>> = Grid::filled(w, h, None);
    for (id, pixels, _) in &visible {
        let sk = skeletons.iter().find(|s| s.instance_id == *id);
        let set = extract_seeds(*id, pixels, sk, calib, depth, params);
        let mask = segment_checked(segmenter, rgb, depth, &set.pixels(), None)?;
        claim(&mut claims, &mask, *id);
        seeds.push(set);
    }
    for ((id, _, _), set) in visible.iter().zip(&seeds) {
        let prior = claims.map(|c| *c == Some(*id));
        let refined = segment_checked(segmenter, rgb, depth, &set.pixels(), Some(&prior))?;
        // keep the first-pass claim when refinement loses every pixel
        let mask = if refined.data().iter().any(|&b| b) { refined } else { prior };
        claim(&mut claims, &mask, *id);
    }

    let masks = visible
        .iter()
        .map(|(id, _, _)| (*id, claims.map(|c| *c == Some(*id))))
        .collect();
    Ok(ViewAnnotation {
        view_id: calib.view_id,
        masks,
        provenance: Provenance {
            view_id: calib.view_id,
            order: visible.iter().map(|v| v.0).collect(),
            mean_depths: visible.iter().map(|v| v.2).collect(),
            seeds,
            seed_params: *params,
            segmenter: segmenter_name.to_string(),
            refinement_passes: 1,
            omitted,
        },
    })
}

fn segment_checked(
    segmenter: &mut dyn PromptableSegmenter,
    rgb: &RgbImage,
    depth: &DepthMap,
    seeds: &[(usize, usize)],
    prior: Option<&Mask>,
) -> Result<Mask, AnnotationError> {
    let mask = segmenter.segment(&SegmentRequest {
        rgb,
        depth,
        seeds,
        prior,
    })?;
    if !mask.same_shape(rgb) {
        return Err(AnnotationError::MaskShape {
            got_w: mask.width(),
            got_h: mask.height(),
            want_w: rgb.width(),
            want_h: rgb.height(),
        });
    }
    Ok(mask)
}

fn claim(claims: &mut Grid<Option<usize>>, mask: &Mask, id: usize) {
    for (c, &m) in claims.data_mut().iter_mut().zip(mask.data()) {
        if m {
            *c = Some(id);
        } else if *c == Some(id) {
            *c = None;
        }
    }
}

/// Whether any two masks share a pixel.
pub fn pairwise_disjoint(masks: &[&Mask]) -> bool {
    let Some(first) = masks.first() else { return true };
    let mut seen = Grid::filled(first.width(), first.height(), false);
    for m in masks {
        for (s, &b) in seen.data_mut().iter_mut().zip(m.data()) {
            if b && *s {
                return false;
            }
            *s |= b;
        }
    }
    true
}

/// Camera-space depth of `p` seen from `calib`.
pub fn camera_depth(p: &Point3<f64>, calib: &CameraCalibration) -> f64 {
    calib.world_to_camera(p).z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CloudPoint;

    fn skeleton_at(id: usize, offset: [f64; 3]) -> Skeleton {
        Skeleton {
            instance_id: id,
            joints: (0..Joint::COUNT)
                .map(|i| Point3::new(offset[0], offset[1], offset[2] + 0.1 * i as f64))
                .collect(),
        }
    }

    #[test]
    fn nearest_joint_and_ties() {
        let a = Skeleton {
            instance_id: 3,
            joints: vec![Point3::new(0.0, 0.0, 0.9)],
        };
        let b = Skeleton {
            instance_id: 1,
            joints: vec![Point3::new(0.0, 0.0, 2.0)],
        };
        let cloud = LabeledPointCloud {
            points: vec![CloudPoint::at(Point3::new(0.0, 0.0, 1.0))],
        };
        let out = label_points_by_nearest_joint(&cloud, &[a, b.clone()]).unwrap();
        assert_eq!(out.points[0].instance_id, Some(3));
        let a = Skeleton {
            instance_id: 3,
            joints: vec![Point3::new(0.0, 0.0, 1.0)],
        };
        let mid = LabeledPointCloud {
            points: vec![CloudPoint::at(Point3::new(0.0, 0.0, 1.5))],
        };
        let out = label_points_by_nearest_joint(&mid, &[a, b]).unwrap();
        assert_eq!(out.points[0].instance_id, Some(1), "tie goes to the lower id");
        assert!(matches!(
            label_points_by_nearest_joint(&cloud, &[]),
            Err(AnnotationError::NoSkeletons)
        ));
    }

    #[test]
    fn cluster_count_rule() {
        let p = SeedParams::default();
        assert_eq!(p.cluster_count(200), 4);
        assert_eq!(p.cluster_count(5000), 10);
        assert_eq!(p.cluster_count(10), 3);
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut pts = Vec::new();
        for i in 0..20 {
            pts.push([i as f64 * 0.1, 0.0]);
            pts.push([100.0 + i as f64 * 0.1, 50.0]);
        }
        let (centers, assign) = kmeans(&pts, 2, 50, 7);
        assert_eq!(centers.len(), 2);
        assert_ne!(assign[0], assign[1]);
        assert!(assign.iter().step_by(2).all(|&a| a == assign[0]));
        assert_eq!(kmeans(&pts, 2, 50, 7), (centers, assign));
    }

    #[test]
    fn kmeans_with_fewer_distinct_points_than_k() {
        let pts = vec![[1.0, 1.0]; 5];
        let (centers, assign) = kmeans(&pts, 3, 10, 0);
        assert_eq!(centers.len(), 1);
        assert!(assign.iter().all(|&a| a == 0));
    }

    fn rect_scene() -> (RgbImage, DepthMap) {
        let rgb = Grid::from_fn(20, 12, |x, y| {
            if (3..9).contains(&x) && (2..10).contains(&y) {
                [200, 40, 40]
            } else if (11..17).contains(&x) && (2..10).contains(&y) {
                [200, 40, 40]
            } else {
                [30, 30, 30]
            }
        });
        let depth = Grid::from_fn(20, 12, |x, _| if x >= 10 { 3.0 } else { 2.0 });
        (rgb, depth)
    }

    #[test]
    fn region_growing_rectangle_and_depth_barrier() {
        let (rgb, depth) = rect_scene();
        let params = RegionGrowParams::default();
        let m = baseline_segment(&rgb, &depth, &[(5, 5)], None, &params).unwrap();
        let expected = Grid::from_fn(20, 12, |x, y| (3..9).contains(&x) && (2..10).contains(&y));
        assert_eq!(m, expected);

        // same colour everywhere, depth step of 1 m between halves
        let flat = Grid::filled(20, 12, [90u8, 90, 90]);
        let m = baseline_segment(&flat, &depth, &[(2, 2)], None, &params).unwrap();
        assert!(m.data().iter().enumerate().all(|(i, &b)| b == (i % 20 < 10)));
    }

    #[test]
    fn invalid_seeds_are_skipped() {
        let (rgb, mut depth) = rect_scene();
        depth.set(5, 5, 0.0);
        let m = baseline_segment(&rgb, &depth, &[(5, 5), (40, 40)], None, &RegionGrowParams::default()).unwrap();
        assert!(m.data().iter().all(|&b| !b));
    }

    #[test]
    fn prior_bounds_growth() {
        let flat = Grid::filled(30, 5, [90u8, 90, 90]);
        let depth = Grid::filled(30, 5, 2.0);
        let prior = Grid::from_fn(30, 5, |x, _| x < 3);
        let m = baseline_segment(&flat, &depth, &[(0, 0)], Some(&prior), &RegionGrowParams::default()).unwrap();
        assert!(m.data().iter().enumerate().all(|(i, &b)| b == (i % 30 < 8)));
    }

    #[test]
    fn zero_projections_give_empty_seed_set() {
        let calib =
            CameraCalibration::look_at(0, Point3::new(0.0, 0.0, -3.0), Point3::origin(), nalgebra::Vector3::y(), 50.0, 32, 32)
                .unwrap();
        let depth = Grid::filled(32, 32, 0.0);
        let set = extract_seeds(2, &[], Some(&skeleton_at(2, [0.0; 3])), &calib, &depth, &SeedParams::default());
        assert!(set.seeds.is_empty());
        assert!(set.warning.is_some());
    }

    #[test]
    fn disjointness_check() {
        let a = Grid::from_fn(4, 1, |x, _| x < 2);
        let b = Grid::from_fn(4, 1, |x, _| x >= 2);
        let c = Grid::from_fn(4, 1, |x, _| x == 1);
        assert!(pairwise_disjoint(&[&a, &b]));
        assert!(!pairwise_disjoint(&[&a, &b, &c]));
    }
}
