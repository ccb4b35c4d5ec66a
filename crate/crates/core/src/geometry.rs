//! Pinhole cameras, projection and back-projection, multi-view depth fusion
//! with statistical outlier removal, and depth-based visibility filtering.

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid point")]
    InvalidPoint,
    #[error("invalid depth")]
    InvalidDepth,
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("no views to fuse")]
    NoViews,
    #[error("neighbour count must be at least 1")]
    InvalidNeighbourCount,
    #[error("rgb image of view {0} does not match its depth map")]
    ShapeMismatch(usize),
}

/// Pinhole intrinsics plus a world→camera rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalibration {
    pub view_id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World→camera rotation.
    pub rotation: Matrix3<f64>,
    /// World→camera translation (meters).
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

/// Plain serializable form of [`CameraCalibration`], one record per view in
/// `calibration.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub view_id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

const ROTATION_TOL: f64 = 1e-9;

impl CameraCalibration {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        view_id: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let calib = Self {
            view_id,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        calib.validate()?;
        Ok(calib)
    }

    /// Camera at `eye` looking at `target`, with `up` the world up direction.
    /// Camera axes: x right, y down, z forward.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        view_id: usize,
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(GeometryError::InvalidCalibration(
                "view direction parallel to up vector".into(),
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        Self::new(
            view_id,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidCalibration(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return bad("focal lengths must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        let should_be_identity = self.rotation * self.rotation.transpose();
        if (should_be_identity - Matrix3::identity()).abs().max() > ROTATION_TOL {
            return bad("rotation is not orthonormal");
        }
        if (self.rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return bad("rotation determinant is not +1");
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return bad("translation not finite");
        }
        Ok(())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    pub fn camera_to_world(&self, pc: &Vector3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (pc - self.translation))
    }

    /// World-space direction of the ray through pixel `(u, v)`, scaled so its
    /// camera-space z component is exactly 1.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let dir_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation.transpose() * dir_cam
    }

    pub fn to_record(&self) -> CalibrationRecord {
        let r = &self.rotation;
        CalibrationRecord {
            view_id: self.view_id,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
            width: self.width,
            height: self.height,
        }
    }

    pub fn from_record(rec: &CalibrationRecord) -> Result<Self, GeometryError> {
        let r = &rec.rotation;
        Self::new(
            rec.view_id,
            rec.fx,
            rec.fy,
            rec.cx,
            rec.cy,
            Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vector3::from(rec.translation),
            rec.width,
            rec.height,
        )
    }
}

/// Depth image in meters; 0 marks an invalid sample.
pub type DepthMap = Grid<f64>;

/// 8-bit RGB image.
pub type RgbImage = Grid<[u8; 3]>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub view_id: usize,
    pub u: f64,
    pub v: f64,
    /// Camera-space depth.
    pub z: f64,
    pub valid: bool,
}

impl Projection {
    /// Nearest pixel (round-half-up), only for valid projections. Within half
    /// a pixel of the right or bottom border this is one past the last
    /// column/row; callers indexing an image must bounds-check.
    pub fn pixel(&self) -> Option<(usize, usize)> {
        if !self.valid {
            return None;
        }
        Some(((self.u + 0.5).floor() as usize, (self.v + 0.5).floor() as usize))
    }
}

/// Nearest-pixel lookup with round-half-up; `None` outside the grid.
pub fn nearest_pixel(u: f64, v: f64, width: usize, height: usize) -> Option<(usize, usize)> {
    let x = (u + 0.5).floor();
    let y = (v + 0.5).floor();
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
        return None;
    }
    Some((x as usize, y as usize))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudPoint {
    pub position: Point3<f64>,
    pub color: Option<[u8; 3]>,
    pub instance_id: Option<usize>,
    pub part_id: Option<usize>,
}

impl CloudPoint {
    pub fn at(position: Point3<f64>) -> Self {
        Self {
            position,
            color: None,
            instance_id: None,
            part_id: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Vec<CloudPoint>,
}

impl LabeledPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Projects a world point into `calib`.
///
/// Points behind the camera or outside the image come back with
/// `valid == false`; only non-finite input is an error.
pub fn project(point: &Point3<f64>, calib: &CameraCalibration) -> Result<Projection, GeometryError> {
    if point.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::InvalidPoint);
    }
    let pc = calib.world_to_camera(point);
    if pc.z <= 0.0 {
        return Ok(Projection {
            view_id: calib.view_id,
            u: f64::NAN,
            v: f64::NAN,
            z: pc.z,
            valid: false,
        });
    }
    let u = calib.fx * pc.x / pc.z + calib.cx;
    let v = calib.fy * pc.y / pc.z + calib.cy;
    let inside = u >= 0.0 && u < calib.width as f64 && v >= 0.0 && v < calib.height as f64;
    Ok(Projection {
        view_id: calib.view_id,
        u,
        v,
        z: pc.z,
        valid: inside,
    })
}

/// Inverse of [`project`] for a pixel and its camera-space depth.
pub fn back_project(
    u: f64,
    v: f64,
    depth: f64,
    calib: &CameraCalibration,
) -> Result<Point3<f64>, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::InvalidDepth);
    }
    if !(u.is_finite() && v.is_finite()) {
        return Err(GeometryError::InvalidPoint);
    }
    let pc = Vector3::new((u - calib.cx) * depth / calib.fx, (v - calib.cy) * depth / calib.fy, depth);
    Ok(calib.camera_to_world(&pc))
}

/// One input view for [`fuse_and_clean`].
#[derive(Debug, Clone, Copy)]
pub struct FusionView<'a> {
    pub depth: &'a DepthMap,
    pub calib: &'a CameraCalibration,
    pub rgb: Option<&'a RgbImage>,
}

pub const DEFAULT_OUTLIER_NEIGHBOURS: usize = 20;
pub const DEFAULT_OUTLIER_STD_RATIO: f64 = 2.0;

/// Back-projects every valid depth pixel of every view into one world-space
/// cloud, then applies statistical outlier removal on the merged cloud.
pub fn fuse_and_clean(
    views: &[FusionView<'_>],
    k: usize,
    std_ratio: f64,
) -> Result<LabeledPointCloud, GeometryError> {
    let cloud = fuse_views(views)?;
    if k == 0 {
        return Err(GeometryError::InvalidNeighbourCount);
    }
    Ok(remove_statistical_outliers(cloud, k, std_ratio))
}

/// Merged back-projection of all valid depth pixels, without cleaning.
pub fn fuse_views(views: &[FusionView<'_>]) -> Result<LabeledPointCloud, GeometryError> {
    if views.is_empty() {
        return Err(GeometryError::NoViews);
    }
    let mut points = Vec::new();
    for view in views {
        if let Some(rgb) = view.rgb {
            if !rgb.same_shape(view.depth) {
                return Err(GeometryError::ShapeMismatch(view.calib.view_id));
            }
        }
        for y in 0..view.depth.height() {
            for x in 0..view.depth.width() {
                let d = *view.depth.get(x, y);
                if d > 0.0 && d.is_finite() {
                    let position = back_project(x as f64, y as f64, d, view.calib)?;
                    points.push(CloudPoint {
                        position,
                        color: view.rgb.map(|img| *img.get(x, y)),
                        instance_id: None,
                        part_id: None,
                    });
                }
            }
        }
    }
    Ok(LabeledPointCloud { points })
}

/// Mean distance from each point to its `k` nearest neighbours (itself excluded).
pub fn mean_knn_distances(positions: &[[f64; 3]], k: usize) -> Vec<f64> {
    let tree: ImmutableKdTree<f64, u64, 3, 32> = ImmutableKdTree::new_from_slice(positions);
    positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let found = tree.nearest_n::<SquaredEuclidean>(p, k + 1);
            // drop exactly one entry for the query point itself
            let mut skipped_self = false;
            let mut dists: Vec<f64> = Vec::with_capacity(k);
            for nn in &found {
                if !skipped_self && nn.item as usize == i {
                    skipped_self = true;
                    continue;
                }
                dists.push(nn.distance.sqrt());
            }
            if !skipped_self {
                dists.pop();
            }
            dists.sort_by(f64::total_cmp);
            dists.iter().take(k).sum::<f64>() / k as f64
        })
        .collect()
}

/// Removes points whose mean kNN distance exceeds `mean + std_ratio · std` of
/// all per-point means. Clouds with at most `k` points are returned unchanged.
pub fn remove_statistical_outliers(
    cloud: LabeledPointCloud,
    k: usize,
    std_ratio: f64,
) -> LabeledPointCloud {
    if cloud.len() <= k {
        return cloud;
    }
    let positions: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p.position.x, p.position.y, p.position.z])
        .collect();
    let means = mean_knn_distances(&positions, k);
    // summing in sorted order keeps the statistics independent of input order
    let mut sorted = means.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mu = sorted.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = sorted.iter().map(|m| (m - mu) * (m - mu)).collect();
    sq.sort_by(f64::total_cmp);
    let sigma = (sq.iter().sum::<f64>() / n).sqrt();
    let threshold = mu + std_ratio * sigma;
    let points = cloud
        .points
        .into_iter()
        .zip(means)
        .filter(|(_, m)| *m <= threshold)
        .map(|(p, _)| p)
        .collect();
    LabeledPointCloud { points }
}

/// Indices of the points whose projection is valid, lands on a valid depth
/// sample, and lies within `beta` meters of that sample.
pub fn visibility_filter(
    points: &[Point3<f64>],
    depth_map: &DepthMap,
    calib: &CameraCalibration,
    beta: f64,
) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| is_visible(p, depth_map, calib, beta))
        .map(|(i, _)| i)
        .collect()
}

/// Single-point form of [`visibility_filter`].
pub fn is_visible(point: &Point3<f64>, depth_map: &DepthMap, calib: &CameraCalibration, beta: f64) -> bool {
    let Ok(proj) = project(point, calib) else {
        return false;
    };
    let Some((x, y)) = proj.pixel() else {
        return false;
    };
    if x >= depth_map.width() || y >= depth_map.height() {
        return false;
    }
    let d = *depth_map.get(x, y);
    d > 0.0 && (proj.z - d).abs() <= beta
}
