//! Command implementations behind the `mvig` binary, usable as a library.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::annotation::{
    annotate_view, AnnotationError, BaselineSegmenter, ExternalSegmenter, PromptableSegmenter, Provenance,
    RegionGrowParams, SeedParams,
};
use crate::dataset::{self, DatasetError, DatasetInfo, Layout};
use crate::geometry::{CameraCalibration, DEFAULT_OUTLIER_NEIGHBOURS, DEFAULT_OUTLIER_STD_RATIO};
use crate::grid::Mask;
use crate::metrics::{self, evaluate_subsets, format_table, EvalImage, LabelSpace, MetricsError, SubsetReports};
use crate::scene::{generate_scene, instance_label, RigConfig, SceneError};
use crate::toyparser::{
    self, finetune, predict_view, pretrain, EpochLoss, FinetuneConfig, Frame, FrameView, Mode, ParserError,
    PretrainConfig, ToyParser,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Parser(#[from] ParserError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for usage and validation errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Everything a run can be configured with; loaded from JSON, unknown keys
/// rejected, missing keys defaulted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub finetune: FinetuneConfig,
    pub pretrain: PretrainConfig,
    pub seeds: SeedParams,
    pub region_grow: RegionGrowParams,
    pub outlier_k: usize,
    pub outlier_std_ratio: f64,
    pub labels: LabelSpace,
    pub rig: RigConfig,
    pub paths: PathsConfig,
    pub rng_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            finetune: FinetuneConfig::default(),
            pretrain: PretrainConfig::default(),
            seeds: SeedParams::default(),
            region_grow: RegionGrowParams::default(),
            outlier_k: DEFAULT_OUTLIER_NEIGHBOURS,
            outlier_std_ratio: DEFAULT_OUTLIER_STD_RATIO,
            labels: LabelSpace::default(),
            rig: RigConfig::default(),
            paths: PathsConfig::default(),
            rng_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        Ok(dataset::write_json(path, self)?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.finetune.validate().map_err(|e| usage(e.to_string()))?;
        self.seeds.validate().map_err(|e| usage(e.to_string()))?;
        self.labels.validate().map_err(|e| usage(e.to_string()))?;
        if self.outlier_k == 0 || !(self.outlier_std_ratio > 0.0) {
            return Err(usage("outlier_k and outlier_std_ratio must be positive"));
        }
        if self.rig.n_views == 0 || self.rig.width == 0 || self.rig.height == 0 || !(self.rig.focal > 0.0) {
            return Err(usage("rig needs at least one view, a non-empty image and positive focal"));
        }
        let r = &self.region_grow;
        if !(r.tau_color >= 0.0 && r.tau_depth >= 0.0) {
            return Err(usage("region growing thresholds must be non-negative"));
        }
        if self.pretrain.batch_size == 0 {
            return Err(usage("pretrain batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub people: usize,
    pub frames: usize,
    /// Reference-view overlap target of every frame.
    pub overlap: f64,
    pub seed: u64,
}

/// Renders `frames` synthetic scenes into the dataset layout under `out`.
pub fn cmd_synth(cfg: &RunConfig, opts: &SynthOptions, out: &Path) -> Result<DatasetInfo, CliError> {
    if cfg.rig.n_views == 0 {
        return Err(usage("--views must be at least 1"));
    }
    if opts.people == 0 || opts.frames == 0 {
        return Err(usage("--people and --frames must be at least 1"));
    }
    if !(0.0..=1.0).contains(&opts.overlap) {
        return Err(usage("--overlap must lie in [0, 1]"));
    }
    let layout = Layout::new(out);
    let scenes: Vec<_> = (0..opts.frames)
        .into_par_iter()
        .map(|f| generate_scene(opts.people, &cfg.rig, opts.overlap, opts.seed.wrapping_add(f as u64)))
        .collect::<Result<_, _>>()?;
    layout.write_calibration(&scenes[0].cameras)?;
    scenes
        .par_iter()
        .enumerate()
        .try_for_each(|(f, scene)| -> Result<(), DatasetError> {
            layout.write_skeletons(f, &scene.skeletons())?;
            for (v, view) in scene.views.iter().enumerate() {
                dataset::write_rgb(&layout.rgb(v, f), &view.rgb)?;
                dataset::write_depth(&layout.depth(v, f), &view.depth)?;
                dataset::write_labels(&layout.instances(v, f), &view.instances)?;
                dataset::write_labels(&layout.parts(v, f), &view.parts)?;
            }
            Ok(())
        })?;
    let info = DatasetInfo {
        frames: opts.frames,
        views: cfg.rig.n_views,
        people: opts.people,
        seed: opts.seed,
        overlap_targets: vec![opts.overlap; opts.frames],
    };
    dataset::write_json(&layout.info(), &info)?;
    Ok(info)
}

/// Which segmenter drives annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmenterChoice {
    Baseline,
    External(String),
}

impl std::str::FromStr for SegmenterChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "baseline" {
            Ok(Self::Baseline)
        } else if let Some(cmd) = s.strip_prefix("external:") {
            if cmd.trim().is_empty() {
                Err("external segmenter needs a command".into())
            } else {
                Ok(Self::External(cmd.to_string()))
            }
        } else {
            Err(format!("unknown segmenter {s:?} (expected baseline or external:<command>)"))
        }
    }
}

/// Inputs of one dataset frame as stored on disk.
pub struct DiskFrame {
    pub views: Vec<FrameView>,
    pub skeletons: Vec<crate::scene::Skeleton>,
}

/// Where a loaded frame takes its instance masks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskChoice {
    /// Ground-truth instance maps.
    Gt,
    /// Masks written by `annotate`.
    Annotated,
    /// Annotated when present for every view, otherwise ground truth.
    Auto,
}

impl std::str::FromStr for MaskChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gt" => Ok(Self::Gt),
            "annotated" => Ok(Self::Annotated),
            "auto" => Ok(Self::Auto),
            _ => Err(format!("unknown mask source {s:?} (expected gt, annotated or auto)")),
        }
    }
}

fn masks_from_labels(labels: &crate::grid::Grid<u8>, ids: &[usize]) -> BTreeMap<usize, Mask> {
    ids.iter()
        .map(|&id| {
            let l = instance_label(id);
            (id, labels.map(|&v| v == l))
        })
        .collect()
}

pub fn load_disk_frame(
    layout: &Layout,
    cams: &[CameraCalibration],
    frame: usize,
    masks: MaskChoice,
) -> Result<DiskFrame, CliError> {
    let skeletons = layout.read_skeletons(frame)?;
    let ids: Vec<usize> = skeletons.iter().map(|s| s.instance_id).collect();
    let use_annotated = match masks {
        MaskChoice::Gt => false,
        MaskChoice::Annotated => true,
        MaskChoice::Auto => layout.has_masks(cams.len(), frame),
    };
    let mut views = Vec::with_capacity(cams.len());
    for (v, calib) in cams.iter().enumerate() {
        let rgb = dataset::read_rgb(&layout.rgb(v, frame))?;
        let depth = dataset::read_depth(&layout.depth(v, frame))?;
        let gt_instances = layout
            .instances(v, frame)
            .exists()
            .then(|| dataset::read_labels(&layout.instances(v, frame)))
            .transpose()?;
        let gt_parts = layout
            .parts(v, frame)
            .exists()
            .then(|| dataset::read_labels(&layout.parts(v, frame)))
            .transpose()?;
        let view_masks = if use_annotated {
            layout.read_masks(v, frame)?
        } else {
            let inst = gt_instances
                .as_ref()
                .ok_or_else(|| CliError::Failed(format!("frame {frame} view {v}: no ground-truth instance map")))?;
            masks_from_labels(inst, &ids)
        };
        views.push(FrameView {
            calib: calib.clone(),
            rgb,
            depth,
            masks: view_masks,
            gt_instances,
            gt_parts,
        });
    }
    Ok(DiskFrame { views, skeletons })
}

pub fn load_frames(cfg: &RunConfig, dataset_dir: &Path, frames: &[usize], masks: MaskChoice) -> Result<Vec<Frame>, CliError> {
    let layout = Layout::new(dataset_dir);
    let cams = layout.read_calibration()?;
    frames
        .par_iter()
        .map(|&f| {
            let d = load_disk_frame(&layout, &cams, f, masks)?;
            Ok(Frame::new(d.views, d.skeletons, cfg.outlier_k, cfg.outlier_std_ratio)?)
        })
        .collect()
}

fn frame_count(layout: &Layout) -> Result<usize, CliError> {
    Ok(layout.read_info()?.frames)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotateSummary {
    pub annotated: Vec<usize>,
    pub failed: Vec<(usize, String)>,
}

/// Annotated masks as stored in `provenance.json`, plus the parameters used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceFile {
    pub frame: usize,
    pub provenance: Provenance,
    pub region_grow: Option<RegionGrowParams>,
    pub outlier_k: usize,
    pub outlier_std_ratio: f64,
}

fn annotate_frame_on_disk(
    cfg: &RunConfig,
    layout: &Layout,
    cams: &[CameraCalibration],
    frame: usize,
    segmenter: &mut dyn PromptableSegmenter,
    name: &str,
) -> Result<(), CliError> {
    let d = load_disk_frame(layout, cams, frame, MaskChoice::Gt).or_else(|_| {
        // real datasets have no ground-truth maps; masks are not needed here
        let skeletons = layout.read_skeletons(frame)?;
        let views = cams
            .iter()
            .enumerate()
            .map(|(v, calib)| {
                Ok(FrameView {
                    calib: calib.clone(),
                    rgb: dataset::read_rgb(&layout.rgb(v, frame))?,
                    depth: dataset::read_depth(&layout.depth(v, frame))?,
                    masks: BTreeMap::new(),
                    gt_instances: None,
                    gt_parts: None,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok::<_, CliError>(DiskFrame { views, skeletons })
    })?;
    let frame_data = Frame::new(d.views, d.skeletons, cfg.outlier_k, cfg.outlier_std_ratio)?;
    for (v, fv) in frame_data.views.iter().enumerate() {
        let ann = annotate_view(
            &frame_data.cloud,
            &frame_data.skeletons,
            &fv.rgb,
            &fv.depth,
            &fv.calib,
            segmenter,
            name,
            &cfg.seeds,
        )?;
        let dir = layout.mask_dir(v, frame);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
        }
        for (id, mask) in &ann.masks {
            dataset::write_mask(&layout.mask(v, frame, *id), mask)?;
        }
        let file = ProvenanceFile {
            frame,
            provenance: ann.provenance,
            region_grow: (name == "baseline").then_some(cfg.region_grow),
            outlier_k: cfg.outlier_k,
            outlier_std_ratio: cfg.outlier_std_ratio,
        };
        dataset::write_json(&layout.provenance(v, frame), &file)?;
    }
    Ok(())
}

/// Annotates every frame of a dataset. Frames run in parallel with the
/// baseline segmenter and sequentially through one external process
/// otherwise. Fails only when no frame succeeds.
pub fn cmd_annotate(cfg: &RunConfig, dataset_dir: &Path, segmenter: &SegmenterChoice) -> Result<AnnotateSummary, CliError> {
    let layout = Layout::new(dataset_dir);
    let cams = layout.read_calibration()?;
    let frames = frame_count(&layout)?;
    let results: Vec<(usize, Result<(), CliError>)> = match segmenter {
        SegmenterChoice::Baseline => (0..frames)
            .into_par_iter()
            .map(|f| {
                let mut seg = BaselineSegmenter {
                    params: cfg.region_grow,
                };
                (f, annotate_frame_on_disk(cfg, &layout, &cams, f, &mut seg, "baseline"))
            })
            .collect(),
        SegmenterChoice::External(cmd) => {
            let mut seg = ExternalSegmenter::spawn(cmd)?;
            let name = format!("external:{cmd}");
            (0..frames)
                .map(|f| (f, annotate_frame_on_disk(cfg, &layout, &cams, f, &mut seg, &name)))
                .collect()
        }
    };
    let mut summary = AnnotateSummary {
        annotated: Vec::new(),
        failed: Vec::new(),
    };
    for (f, r) in results {
        match r {
            Ok(()) => summary.annotated.push(f),
            Err(e) => {
                warn!("frame {f}: {e}");
                summary.failed.push((f, e.to_string()));
            }
        }
    }
    if summary.annotated.is_empty() {
        return Err(CliError::Failed(format!(
            "annotation failed for every frame; first error: {}",
            summary.failed.first().map(|f| f.1.as_str()).unwrap_or("no frames")
        )));
    }
    Ok(summary)
}

/// Parses `a..b` (half-open) or a single index.
pub fn parse_frame_range(s: &str) -> Result<std::ops::Range<usize>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.parse().map_err(|_| format!("bad frame range {s:?}"))?;
        let b: usize = b.parse().map_err(|_| format!("bad frame range {s:?}"))?;
        if a >= b {
            return Err(format!("empty frame range {s:?}"));
        }
        Ok(a..b)
    } else {
        let a: usize = s.parse().map_err(|_| format!("bad frame range {s:?}"))?;
        Ok(a..a + 1)
    }
}

fn resolve_frames(layout: &Layout, range: Option<&std::ops::Range<usize>>) -> Result<Vec<usize>, CliError> {
    let n = frame_count(layout)?;
    match range {
        None => Ok((0..n).collect()),
        Some(r) if r.end > n => Err(usage(format!("frame range {r:?} exceeds the {n} frames of the dataset"))),
        Some(r) => Ok(r.clone().collect()),
    }
}

fn load_parser(cfg: &RunConfig, weights: Option<&Path>) -> Result<ToyParser, CliError> {
    match weights {
        Some(p) => Ok(toyparser::load_weights(p, cfg.labels.clone())?),
        None => {
            warn!("no initial weights given, starting from zeros");
            Ok(ToyParser::zeros(cfg.labels.clone()))
        }
    }
}

/// Supervised part pretraining on ground-truth labels; writes the weights.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    dataset_dir: &Path,
    frames: Option<&std::ops::Range<usize>>,
    out_weights: &Path,
) -> Result<Vec<f64>, CliError> {
    let layout = Layout::new(dataset_dir);
    let idx = resolve_frames(&layout, frames)?;
    let data = load_frames(cfg, dataset_dir, &idx, MaskChoice::Gt)?;
    let (parser, history) = pretrain(&ToyParser::zeros(cfg.labels.clone()), &data, &cfg.pretrain)?;
    toyparser::save_weights(&parser, out_weights)?;
    Ok(history)
}

/// Loss history as CSV; the multi-view columns only appear in MVIG mode.
pub fn history_csv(history: &[EpochLoss], mode: Mode) -> String {
    let mut s = String::new();
    match mode {
        Mode::Mvig => {
            s.push_str("epoch,l_fg,l_miou,l_identity,l_part,total\n");
            for r in history {
                let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.fg, r.miou, r.identity, r.part, r.total);
            }
        }
        Mode::Ig => {
            s.push_str("epoch,l_fg,l_miou,total\n");
            for r in history {
                let _ = writeln!(s, "{},{},{},{}", r.epoch, r.fg, r.miou, r.total);
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub mode: Mode,
    pub masks: MaskChoice,
    pub frames: Option<std::ops::Range<usize>>,
    pub init_weights: Option<PathBuf>,
    pub out_weights: PathBuf,
    pub history: PathBuf,
}

/// Fine-tunes from `init_weights` and writes weights plus loss history.
pub fn cmd_finetune(cfg: &RunConfig, dataset_dir: &Path, opts: &FinetuneOptions) -> Result<Vec<EpochLoss>, CliError> {
    cfg.validate()?;
    let layout = Layout::new(dataset_dir);
    let idx = resolve_frames(&layout, opts.frames.as_ref())?;
    let data = load_frames(cfg, dataset_dir, &idx, opts.masks)?;
    let parser = load_parser(cfg, opts.init_weights.as_deref())?;
    let (trained, history) = finetune(&parser, &data, &cfg.finetune, opts.mode)?;
    toyparser::save_weights(&trained, &opts.out_weights)?;
    dataset::ensure_parent(&opts.history)?;
    fs::write(&opts.history, history_csv(&history, opts.mode))
        .map_err(|e| CliError::Failed(format!("{}: {e}", opts.history.display())))?;
    Ok(history)
}

/// Writes predicted instance/part maps and scores for the selected frames.
/// Regions come from ground-truth instance maps when present, otherwise from
/// annotated masks.
pub fn cmd_predict(
    cfg: &RunConfig,
    dataset_dir: &Path,
    weights: &Path,
    frames: Option<&std::ops::Range<usize>>,
    out_dir: &Path,
) -> Result<usize, CliError> {
    let layout = Layout::new(dataset_dir);
    let idx = resolve_frames(&layout, frames)?;
    let parser = toyparser::load_weights(weights, cfg.labels.clone())?;
    let cams = layout.read_calibration()?;
    let out = Layout::new(out_dir);
    let written: Vec<usize> = idx
        .par_iter()
        .map(|&f| -> Result<usize, CliError> {
            let gt_available = (0..cams.len()).all(|v| layout.instances(v, f).exists());
            let choice = if gt_available { MaskChoice::Gt } else { MaskChoice::Annotated };
            let d = load_disk_frame(&layout, &cams, f, choice)?;
            for (v, fv) in d.views.iter().enumerate() {
                let regions = fv.regions(&d.skeletons);
                let (inst, parts, scores) = predict_view(&parser, &fv.input(), &regions)?;
                dataset::write_labels(&out.instances(v, f), &inst)?;
                dataset::write_labels(&out.parts(v, f), &parts)?;
                let scores: BTreeMap<String, f64> = scores.into_iter().map(|(k, s)| (k.to_string(), s)).collect();
                dataset::write_json(&out.scores(v, f), &scores)?;
            }
            Ok(d.views.len())
        })
        .collect::<Result<_, _>>()?;
    Ok(written.iter().sum())
}

/// Evaluation images for every (view, frame) with a prediction; the missing
/// ones are returned separately.
pub fn collect_eval_images(
    pred_dir: &Path,
    dataset_dir: &Path,
    frames: Option<&std::ops::Range<usize>>,
) -> Result<(Vec<EvalImage>, Vec<(usize, usize)>), CliError> {
    let layout = Layout::new(dataset_dir);
    let pred = Layout::new(pred_dir);
    let info = layout.read_info()?;
    let idx = resolve_frames(&layout, frames)?;
    let mut keys = Vec::new();
    for &f in &idx {
        for v in 0..info.views {
            keys.push((v, f));
        }
    }
    let loaded: Vec<Result<Option<EvalImage>, CliError>> = keys
        .par_iter()
        .map(|&(v, f)| {
            if !pred.instances(v, f).exists() || !pred.parts(v, f).exists() {
                return Ok(None);
            }
            let scores: BTreeMap<String, f64> = if pred.scores(v, f).exists() {
                dataset::read_json(&pred.scores(v, f))?
            } else {
                BTreeMap::new()
            };
            let pred_scores = scores
                .into_iter()
                .map(|(k, s)| {
                    k.parse::<u8>()
                        .map(|l| (l, s))
                        .map_err(|_| CliError::Failed(format!("bad score label {k:?}")))
                })
                .collect::<Result<_, _>>()?;
            Ok(Some(EvalImage {
                gt_instances: dataset::read_labels(&layout.instances(v, f))?,
                gt_parts: dataset::read_labels(&layout.parts(v, f))?,
                pred_instances: dataset::read_labels(&pred.instances(v, f))?,
                pred_parts: dataset::read_labels(&pred.parts(v, f))?,
                pred_scores,
            }))
        })
        .collect();
    let mut images = Vec::new();
    let mut missing = Vec::new();
    for (key, r) in keys.into_iter().zip(loaded) {
        match r? {
            Some(im) => images.push(im),
            None => missing.push(key),
        }
    }
    Ok((images, missing))
}

/// Evaluates predictions against ground truth per overlap subset. Fails when
/// more than 10% of the expected (view, frame) predictions are missing.
pub fn cmd_evaluate(
    pred_dir: &Path,
    dataset_dir: &Path,
    labels: &LabelSpace,
    frames: Option<&std::ops::Range<usize>>,
    out_dir: Option<&Path>,
) -> Result<SubsetReports, CliError> {
    labels.validate()?;
    let (images, missing) = collect_eval_images(pred_dir, dataset_dir, frames)?;
    let expected = images.len() + missing.len();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|(v, f)| format!("view {v} frame {f}")).collect();
        warn!("missing predictions: {}", list.join(", "));
        if missing.len() * 10 > expected {
            return Err(CliError::Failed(format!(
                "{} of {expected} predictions missing: {}",
                missing.len(),
                list.join(", ")
            )));
        }
    }
    let reports = evaluate_subsets(&images, labels)?;
    if let Some(dir) = out_dir {
        dataset::write_json(&dir.join("metrics.json"), &reports)?;
        let path = dir.join("metrics.txt");
        fs::write(&path, format_table(&reports)).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Views,
    Beta,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "views" => Ok(Self::Views),
            "beta" => Ok(Self::Beta),
            _ => Err(format!("unknown sweep axis {s:?} (expected views or beta)")),
        }
    }
}

impl SweepAxis {
    pub fn settings(self) -> Vec<f64> {
        match self {
            SweepAxis::Views => vec![2.0, 4.0, 8.0],
            SweepAxis::Beta => vec![0.20, 0.30, 0.40],
        }
    }

    fn label(self, v: f64) -> String {
        match self {
            SweepAxis::Views => format!("{} views", v as usize),
            SweepAxis::Beta => format!("{} cm", (v * 100.0).round() as usize),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub value: f64,
    pub reports: SubsetReports,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// mIoU_p / mIoU_h per overlap subset, one row per setting.
    pub fn format(&self) -> String {
        let subsets = ["O20", "O40", "O60", "O80"];
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "");
        for name in subsets {
            let _ = write!(s, " | {:^17}", name);
        }
        s.push('\n');
        let _ = write!(s, "{:<10}", "");
        for _ in subsets {
            let _ = write!(s, " | {:>8} {:>8}", "mIoU_p", "mIoU_h");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:<10}", row.setting);
            for name in subsets {
                match row.reports.subsets.iter().find(|(n, _)| n == name) {
                    Some((_, r)) if r.images > 0 => {
                        let _ = write!(s, " | {:>8.2} {:>8.2}", 100.0 * r.miou_p, 100.0 * r.miou_h);
                    }
                    _ => {
                        let _ = write!(s, " | {:>8} {:>8}", "-", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub axis: SweepAxis,
    pub masks: MaskChoice,
    pub init_weights: Option<PathBuf>,
    /// Frames used for fine-tuning; the rest are evaluated.
    pub train_frames: std::ops::Range<usize>,
    pub out_dir: PathBuf,
}

/// MVIG fine-tuning plus evaluation for every setting of one ablation axis.
pub fn cmd_sweep(cfg: &RunConfig, dataset_dir: &Path, opts: &SweepOptions) -> Result<SweepTable, CliError> {
    let layout = Layout::new(dataset_dir);
    let n = frame_count(&layout)?;
    if opts.train_frames.end > n || opts.train_frames.is_empty() {
        return Err(usage(format!("training frames {:?} do not fit {n} frames", opts.train_frames)));
    }
    let eval_frames: Vec<usize> = (0..n).filter(|f| !opts.train_frames.contains(f)).collect();
    if eval_frames.is_empty() {
        return Err(usage("no frames left for evaluation"));
    }
    let train_idx: Vec<usize> = opts.train_frames.clone().collect();
    let train = load_frames(cfg, dataset_dir, &train_idx, opts.masks)?;
    let eval = load_frames(cfg, dataset_dir, &eval_frames, MaskChoice::Gt)?;
    let parser = load_parser(cfg, opts.init_weights.as_deref())?;
    let mut rows = Vec::new();
    for value in opts.axis.settings() {
        let mut ft = cfg.finetune;
        match opts.axis {
            SweepAxis::Views => ft.n_views = value as usize,
            SweepAxis::Beta => ft.beta = value,
        }
        let setting = opts.axis.label(value);
        info!("sweep: {setting}");
        let (trained, history) = finetune(&parser, &train, &ft, Mode::Mvig)?;
        let images = toyparser::evaluation_images(&trained, &eval)?;
        let reports = evaluate_subsets(&images, &cfg.labels)?;
        let slug = setting.replace(' ', "_");
        toyparser::save_weights(&trained, &opts.out_dir.join(format!("{slug}.weights")))?;
        let hist_path = opts.out_dir.join(format!("{slug}.loss.csv"));
        dataset::ensure_parent(&hist_path)?;
        fs::write(&hist_path, history_csv(&history, Mode::Mvig))
            .map_err(|e| CliError::Failed(format!("{}: {e}", hist_path.display())))?;
        rows.push(SweepRow { setting, value, reports });
    }
    let table = SweepTable { axis: opts.axis, rows };
    dataset::write_json(&opts.out_dir.join("sweep.json"), &table)?;
    let txt = opts.out_dir.join("sweep.txt");
    fs::write(&txt, table.format()).map_err(|e| CliError::Failed(format!("{}: {e}", txt.display())))?;
    Ok(table)
}

/// Summary line per subset for terminal output.
pub fn summarize(reports: &SubsetReports) -> String {
    format_table(reports)
}

/// Mean of one metric over the images of every subset (for quick checks).
pub fn subset_metric(reports: &SubsetReports, subset: &str, f: impl Fn(&metrics::MetricsReport) -> f64) -> Option<f64> {
    reports.subsets.iter().find(|(n, _)| n == subset).map(|(_, r)| f(r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_strictness() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"finetune": {"lambda": 2.0}}"#).is_err());
        let partial = RunConfig::from_json(r#"{"rng_seed": 9, "finetune": {"n_views": 2}}"#).unwrap();
        assert_eq!(partial.rng_seed, 9);
        assert_eq!(partial.finetune.n_views, 2);
        assert_eq!(partial.finetune.lambda, 0.5);
    }

    #[test]
    fn frame_ranges() {
        assert_eq!(parse_frame_range("2..5").unwrap(), 2..5);
        assert_eq!(parse_frame_range("3").unwrap(), 3..4);
        assert!(parse_frame_range("5..5").is_err());
        assert!(parse_frame_range("x").is_err());
    }

    #[test]
    fn segmenter_choice_parsing() {
        assert_eq!("baseline".parse::<SegmenterChoice>().unwrap(), SegmenterChoice::Baseline);
        assert_eq!(
            "external:sam --fast".parse::<SegmenterChoice>().unwrap(),
            SegmenterChoice::External("sam --fast".into())
        );
        assert!("external:".parse::<SegmenterChoice>().is_err());
        assert!("sam".parse::<SegmenterChoice>().is_err());
    }

    #[test]
    fn ig_history_drops_multiview_columns() {
        let h = vec![EpochLoss {
            epoch: 0,
            fg: 0.5,
            miou: 0.25,
            identity: 0.0,
            part: 0.0,
            total: 0.375,
        }];
        assert_eq!(history_csv(&h, Mode::Ig), "epoch,l_fg,l_miou,total\n0,0.5,0.25,0.375\n");
        assert!(history_csv(&h, Mode::Mvig).starts_with("epoch,l_fg,l_miou,l_identity,l_part,total\n"));
    }
}
