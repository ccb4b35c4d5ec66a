//! On-disk dataset layout.
//!
//! ```text
//! root/dataset.json                       frame count, view count, generator parameters
//! root/calibration.json                   array of per-view pinhole records
//! root/views/<view>/rgb_<frame>.png       8-bit RGB
//! root/views/<view>/depth_<frame>.png     16-bit gray, millimeters, 0 = invalid
//! root/views/<view>/instance_<frame>.png  8-bit, 0 = background, else instance_id + 1
//! root/views/<view>/part_<frame>.png      8-bit part ids
//! root/skeletons/<frame>.json             per-instance named joints, meters
//! root/masks/<view>/<frame>/instance_<k>.png   annotated masks, 0/255
//! root/masks/<view>/<frame>/provenance.json
//! ```
//!
//! Frames are written zero-padded to six digits. Prediction directories reuse
//! the `views/<view>/{instance,part}_<frame>.png` naming, optionally with
//! `scores_<frame>.json` mapping instance label to confidence.

use image::{ImageBuffer, Luma, Rgb};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::geometry::{CalibrationRecord, CameraCalibration, DepthMap, GeometryError, RgbImage};
use crate::grid::{Grid, Mask};
use crate::scene::{SceneError, Skeleton, SkeletonRecord};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> DatasetError + '_ {
    move |source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DatasetError {
    DatasetError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn ensure_parent(path: &Path) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<(), DatasetError> {
    ensure_parent(path)?;
    let raw: Vec<u8> = img.data().iter().flatten().copied().collect();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(img_err(path))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, DatasetError> {
    let img = image::open(path).map_err(img_err(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0).collect();
    Ok(Grid::from_vec(w, h, data).expect("decoded size matches"))
}

/// Meters to 16-bit millimeters; non-positive and non-finite values become 0.
pub fn depth_to_mm(d: f64) -> u16 {
    if d.is_finite() && d > 0.0 {
        (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
    } else {
        0
    }
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), DatasetError> {
    ensure_parent(path)?;
    let raw: Vec<u16> = depth.data().iter().map(|&d| depth_to_mm(d)).collect();
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(img_err(path))
}

pub fn read_depth(path: &Path) -> Result<DepthMap, DatasetError> {
    let img = image::open(path).map_err(img_err(path))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        _ => return Err(format_err(path, "depth must be 16-bit grayscale")),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f64 / 1000.0).collect();
    Ok(Grid::from_vec(w, h, data).expect("decoded size matches"))
}

pub fn write_labels(path: &Path, labels: &Grid<u8>) -> Result<(), DatasetError> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(labels.width() as u32, labels.height() as u32, labels.data().to_vec())
            .expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(img_err(path))
}

pub fn read_labels(path: &Path) -> Result<Grid<u8>, DatasetError> {
    let img = image::open(path).map_err(img_err(path))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(b) => b,
        _ => return Err(format_err(path, "label map must be 8-bit grayscale")),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_vec(w, h, img.into_raw()).expect("decoded size matches"))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<(), DatasetError> {
    write_labels(path, &mask.map(|&b| if b { 255 } else { 0 }))
}

/// Any nonzero pixel is a member.
pub fn read_mask(path: &Path) -> Result<Mask, DatasetError> {
    let img = image::open(path).map_err(img_err(path))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] != 0).collect();
    Ok(Grid::from_vec(w, h, data).expect("decoded size matches"))
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub frames: usize,
    pub views: usize,
    pub people: usize,
    pub seed: u64,
    /// Target overlap per frame, when generated synthetically.
    #[serde(default)]
    pub overlap_targets: Vec<f64>,
}

/// Paths inside a dataset root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn info(&self) -> PathBuf {
        self.root.join("dataset.json")
    }
    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.json")
    }
    pub fn view_dir(&self, view: usize) -> PathBuf {
        self.root.join("views").join(view.to_string())
    }
    pub fn rgb(&self, view: usize, frame: usize) -> PathBuf {
        self.view_dir(view).join(format!("rgb_{frame:06}.png"))
    }
    pub fn depth(&self, view: usize, frame: usize) -> PathBuf {
        self.view_dir(view).join(format!("depth_{frame:06}.png"))
    }
    pub fn instances(&self, view: usize, frame: usize) -> PathBuf {
        self.view_dir(view).join(format!("instance_{frame:06}.png"))
    }
    pub fn parts(&self, view: usize, frame: usize) -> PathBuf {
        self.view_dir(view).join(format!("part_{frame:06}.png"))
    }
    pub fn scores(&self, view: usize, frame: usize) -> PathBuf {
        self.view_dir(view).join(format!("scores_{frame:06}.json"))
    }
    pub fn skeletons(&self, frame: usize) -> PathBuf {
        self.root.join("skeletons").join(format!("{frame:06}.json"))
    }
    pub fn mask_dir(&self, view: usize, frame: usize) -> PathBuf {
        self.root.join("masks").join(view.to_string()).join(format!("{frame:06}"))
    }
    pub fn mask(&self, view: usize, frame: usize, instance: usize) -> PathBuf {
        self.mask_dir(view, frame).join(format!("instance_{instance}.png"))
    }
    pub fn provenance(&self, view: usize, frame: usize) -> PathBuf {
        self.mask_dir(view, frame).join("provenance.json")
    }

    pub fn read_info(&self) -> Result<DatasetInfo, DatasetError> {
        read_json(&self.info())
    }

    pub fn write_calibration(&self, cams: &[CameraCalibration]) -> Result<(), DatasetError> {
        let recs: Vec<CalibrationRecord> = cams.iter().map(|c| c.to_record()).collect();
        write_json(&self.calibration(), &recs)
    }

    pub fn read_calibration(&self) -> Result<Vec<CameraCalibration>, DatasetError> {
        let recs: Vec<CalibrationRecord> = read_json(&self.calibration())?;
        Ok(recs.iter().map(CameraCalibration::from_record).collect::<Result<_, _>>()?)
    }

    pub fn write_skeletons(&self, frame: usize, skeletons: &[Skeleton]) -> Result<(), DatasetError> {
        let recs: Vec<SkeletonRecord> = skeletons.iter().map(|s| s.to_record()).collect();
        write_json(&self.skeletons(frame), &recs)
    }

    pub fn read_skeletons(&self, frame: usize) -> Result<Vec<Skeleton>, DatasetError> {
        let recs: Vec<SkeletonRecord> = read_json(&self.skeletons(frame))?;
        Ok(recs.iter().map(Skeleton::from_record).collect::<Result<_, _>>()?)
    }

    /// Annotated instance masks of one view and frame, keyed by instance id.
    pub fn read_masks(&self, view: usize, frame: usize) -> Result<BTreeMap<usize, Mask>, DatasetError> {
        let dir = self.mask_dir(view, frame);
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(id) = name
                .strip_prefix("instance_")
                .and_then(|s| s.strip_suffix(".png"))
                .and_then(|s| s.parse::<usize>().ok())
            else {
                continue;
            };
            out.insert(id, read_mask(&entry.path())?);
        }
        Ok(out)
    }

    /// Whether annotated masks exist for `frame` in every view.
    pub fn has_masks(&self, views: usize, frame: usize) -> bool {
        (0..views).all(|v| self.provenance(v, frame).exists())
    }
}

/// Instance map from per-instance masks (later ids win on overlap).
pub fn masks_to_instance_map(width: usize, height: usize, masks: &BTreeMap<usize, Mask>) -> Grid<u8> {
    let mut out = Grid::filled(width, height, 0u8);
    for (&id, m) in masks {
        for (o, &b) in out.data_mut().iter_mut().zip(m.data()) {
            if b {
                *o = crate::scene::instance_label(id);
            }
        }
    }
    out
}
