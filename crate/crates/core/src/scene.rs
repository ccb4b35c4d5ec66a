//! Deterministic synthetic multi-view scenes: capsule stick-figure people seen
//! by a ring of pinhole cameras, rendered analytically into RGB, depth,
//! instance and part maps.

use nalgebra::{Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::geometry::{CameraCalibration, DepthMap, GeometryError, RgbImage};
use crate::grid::{mask_bbox, Grid, Mask};
use crate::metrics::overlap_degree;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("placement failed after {0} retries")]
    PlacementFailed(usize),
    #[error("invalid scene parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Part ids of the default label space.
pub mod parts {
    pub const BACKGROUND: u8 = 0;
    pub const HEAD: u8 = 1;
    pub const TORSO: u8 = 2;
    pub const UPPER_ARM: u8 = 3;
    pub const LOWER_ARM: u8 = 4;
    pub const UPPER_LEG: u8 = 5;
    pub const LOWER_LEG: u8 = 6;
    pub const NAMES: [&str; 7] = [
        "background",
        "head",
        "torso",
        "upper-arm",
        "lower-arm",
        "upper-leg",
        "lower-leg",
    ];
    /// Number of body-part categories, background excluded.
    pub const COUNT: usize = 6;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Joint {
    Head,
    Neck,
    LShoulder,
    RShoulder,
    LElbow,
    RElbow,
    LWrist,
    RWrist,
    Pelvis,
    LHip,
    RHip,
    LKnee,
    RKnee,
    LAnkle,
    RAnkle,
}

impl Joint {
    pub const ALL: [Joint; 15] = [
        Joint::Head,
        Joint::Neck,
        Joint::LShoulder,
        Joint::RShoulder,
        Joint::LElbow,
        Joint::RElbow,
        Joint::LWrist,
        Joint::RWrist,
        Joint::Pelvis,
        Joint::LHip,
        Joint::RHip,
        Joint::LKnee,
        Joint::RKnee,
        Joint::LAnkle,
        Joint::RAnkle,
    ];
    pub const COUNT: usize = 15;

    pub fn name(self) -> &'static str {
        match self {
            Joint::Head => "Head",
            Joint::Neck => "Neck",
            Joint::LShoulder => "LShoulder",
            Joint::RShoulder => "RShoulder",
            Joint::LElbow => "LElbow",
            Joint::RElbow => "RElbow",
            Joint::LWrist => "LWrist",
            Joint::RWrist => "RWrist",
            Joint::Pelvis => "Pelvis",
            Joint::LHip => "LHip",
            Joint::RHip => "RHip",
            Joint::LKnee => "LKnee",
            Joint::RKnee => "RKnee",
            Joint::LAnkle => "LAnkle",
            Joint::RAnkle => "RAnkle",
        }
    }

    pub fn from_name(name: &str) -> Option<Joint> {
        Joint::ALL.iter().copied().find(|j| j.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The ten capsules of a stick figure: a head sphere plus nine limbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limb {
    pub from: Joint,
    pub to: Joint,
    pub part: u8,
}

pub const LIMBS: [Limb; 10] = [
    Limb { from: Joint::Head, to: Joint::Head, part: parts::HEAD },
    Limb { from: Joint::Neck, to: Joint::Pelvis, part: parts::TORSO },
    Limb { from: Joint::LShoulder, to: Joint::LElbow, part: parts::UPPER_ARM },
    Limb { from: Joint::RShoulder, to: Joint::RElbow, part: parts::UPPER_ARM },
    Limb { from: Joint::LElbow, to: Joint::LWrist, part: parts::LOWER_ARM },
    Limb { from: Joint::RElbow, to: Joint::RWrist, part: parts::LOWER_ARM },
    Limb { from: Joint::LHip, to: Joint::LKnee, part: parts::UPPER_LEG },
    Limb { from: Joint::RHip, to: Joint::RKnee, part: parts::UPPER_LEG },
    Limb { from: Joint::LKnee, to: Joint::LAnkle, part: parts::LOWER_LEG },
    Limb { from: Joint::RKnee, to: Joint::RAnkle, part: parts::LOWER_LEG },
];

/// Base capsule radii (meters) for [`LIMBS`], before per-person scaling.
const BASE_RADII: [f64; 10] = [0.11, 0.15, 0.055, 0.055, 0.047, 0.047, 0.075, 0.075, 0.06, 0.06];

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub instance_id: usize,
    /// Indexed by [`Joint::index`].
    pub joints: Vec<Point3<f64>>,
}

impl Skeleton {
    pub fn joint(&self, j: Joint) -> Point3<f64> {
        self.joints[j.index()]
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.joints.len() != Joint::COUNT {
            return Err(SceneError::InvalidParameters(format!(
                "skeleton {} has {} joints",
                self.instance_id,
                self.joints.len()
            )));
        }
        if self.joints.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(SceneError::InvalidParameters("non-finite joint".into()));
        }
        for limb in LIMBS.iter().skip(1) {
            if (self.joint(limb.from) - self.joint(limb.to)).norm() <= 0.0 {
                return Err(SceneError::InvalidParameters("zero-length bone".into()));
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> SkeletonRecord {
        SkeletonRecord {
            instance_id: self.instance_id,
            joints: Joint::ALL
                .iter()
                .map(|j| {
                    let p = self.joint(*j);
                    (j.name().to_string(), [p.x, p.y, p.z])
                })
                .collect(),
        }
    }

    pub fn from_record(rec: &SkeletonRecord) -> Result<Self, SceneError> {
        let mut joints = Vec::with_capacity(Joint::COUNT);
        for j in Joint::ALL {
            let p = rec.joints.get(j.name()).ok_or_else(|| {
                SceneError::InvalidParameters(format!("skeleton {} lacks joint {}", rec.instance_id, j.name()))
            })?;
            joints.push(Point3::new(p[0], p[1], p[2]));
        }
        if let Some(unknown) = rec.joints.keys().find(|k| Joint::from_name(k).is_none()) {
            return Err(SceneError::InvalidParameters(format!("unknown joint {unknown}")));
        }
        let s = Skeleton {
            instance_id: rec.instance_id,
            joints,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Serialized skeleton: named joints in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonRecord {
    pub instance_id: usize,
    pub joints: BTreeMap<String, [f64; 3]>,
}

/// One person: skeleton, capsule radii per limb, flat albedo.
#[derive(Debug, Clone, PartialEq)]
pub struct Person {
    pub skeleton: Skeleton,
    pub radii: [f64; 10],
    pub albedo: [u8; 3],
}

/// Label value used in instance maps for `instance_id` (0 is background).
#[inline]
pub fn instance_label(instance_id: usize) -> u8 {
    (instance_id + 1) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    /// 0 = background, otherwise `instance_id + 1`.
    pub instances: Grid<u8>,
    /// Part id per pixel, 0 = background.
    pub parts: Grid<u8>,
}

impl RenderedView {
    pub fn instance_mask(&self, instance_id: usize) -> Mask {
        let label = instance_label(instance_id);
        self.instances.map(|&v| v == label)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub people: Vec<Person>,
    pub cameras: Vec<CameraCalibration>,
    pub views: Vec<RenderedView>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn skeletons(&self) -> Vec<Skeleton> {
        self.people.iter().map(|p| p.skeleton.clone()).collect()
    }
}

/// Camera ring and image parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub ring_radius: f64,
    pub camera_height: f64,
    pub look_at_height: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            n_views: 10,
            width: 128,
            height: 128,
            focal: 120.0,
            ring_radius: 4.0,
            camera_height: 1.1,
            look_at_height: 0.9,
        }
    }
}

/// Cameras evenly spaced on a horizontal ring, all facing the ring axis.
pub fn camera_ring(rig: &RigConfig) -> Result<Vec<CameraCalibration>, SceneError> {
    if rig.n_views == 0 {
        return Err(SceneError::InvalidParameters("n_views must be >= 1".into()));
    }
    (0..rig.n_views)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / rig.n_views as f64;
            let eye = Point3::new(rig.ring_radius * a.cos(), rig.ring_radius * a.sin(), rig.camera_height);
            let target = Point3::new(0.0, 0.0, rig.look_at_height);
            CameraCalibration::look_at(i, eye, target, Vector3::z(), rig.focal, rig.width, rig.height)
                .map_err(SceneError::from)
        })
        .collect()
}

pub const MAX_PLACEMENT_RETRIES: usize = 1000;
const OVERLAP_TOLERANCE: f64 = 0.1;
const GROUP_RADIUS: f64 = 1.0;
const MIN_SEPARATION: f64 = 0.6;
/// Approximate on-image width of a person (meters), used to aim lateral offsets.
const PERSON_WIDTH: f64 = 0.55;

const PALETTE: [[u8; 3]; 8] = [
    [220, 60, 60],
    [60, 190, 70],
    [60, 90, 230],
    [225, 200, 50],
    [200, 70, 210],
    [50, 200, 215],
    [240, 140, 40],
    [150, 150, 150],
];
pub const BACKGROUND_RGB: [u8; 3] = [30, 30, 30];

/// Generates a scene whose reference view (camera 0) has a maximum pairwise
/// ground-truth box IoU within ±0.1 of `overlap_target`.
pub fn generate_scene(
    n_people: usize,
    rig: &RigConfig,
    overlap_target: f64,
    seed: u64,
) -> Result<SyntheticScene, SceneError> {
    if n_people == 0 {
        return Err(SceneError::InvalidParameters("n_people must be >= 1".into()));
    }
    if n_people > PALETTE.len() {
        return Err(SceneError::InvalidParameters(format!(
            "at most {} people supported",
            PALETTE.len()
        )));
    }
    if !(0.0..=1.0).contains(&overlap_target) {
        return Err(SceneError::InvalidParameters("overlap_target must lie in [0, 1]".into()));
    }
    if n_people == 1 && overlap_target > 0.0 {
        return Err(SceneError::InvalidParameters("a single person cannot overlap; use overlap_target 0".into()));
    }
    let cameras = camera_ring(rig)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = &cameras[0];

    for _ in 0..MAX_PLACEMENT_RETRIES {
        let Some(positions) = sample_positions(&mut rng, n_people, reference, overlap_target) else {
            continue;
        };
        let people: Vec<Person> = positions
            .iter()
            .enumerate()
            .map(|(i, pos)| sample_person(&mut rng, i, *pos))
            .collect();
        if n_people == 1 && overlap_target > OVERLAP_TOLERANCE {
            break;
        }
        let ref_view = render_people(&people, reference);
        let degree = view_overlap_degree(&ref_view, n_people);
        if (degree - overlap_target).abs() <= OVERLAP_TOLERANCE {
            let views = cameras.par_iter().map(|c| render_people(&people, c)).collect();
            return Ok(SyntheticScene {
                people,
                cameras,
                views,
                seed,
            });
        }
    }
    Err(SceneError::PlacementFailed(MAX_PLACEMENT_RETRIES))
}

/// Overlap degree of a rendered view from its ground-truth instance boxes.
pub fn view_overlap_degree(view: &RenderedView, n_instances: usize) -> f64 {
    let boxes: Vec<[f64; 4]> = (0..n_instances)
        .filter_map(|k| mask_bbox(&view.instance_mask(k)).map(|r| r.to_box()))
        .collect();
    overlap_degree(&boxes)
}

/// Ground-plane positions relative to the reference camera's view direction.
fn sample_positions(
    rng: &mut ChaCha8Rng,
    n: usize,
    reference: &CameraCalibration,
    target: f64,
) -> Option<Vec<[f64; 2]>> {
    // reference camera's forward and right directions projected onto the ground
    let fwd3 = reference.rotation.row(2).transpose();
    let right3 = reference.rotation.row(0).transpose();
    let fwd = Vector3::new(fwd3.x, fwd3.y, 0.0).normalize();
    let right = Vector3::new(right3.x, right3.y, 0.0).normalize();

    let mut local: Vec<[f64; 2]> = Vec::with_capacity(n); // (lateral, depth)
    if target <= OVERLAP_TOLERANCE {
        let spacing = rng.gen_range(0.85..1.1);
        for i in 0..n {
            let lateral = (i as f64 - (n as f64 - 1.0) / 2.0) * spacing + rng.gen_range(-0.05..0.05);
            let depth = rng.gen_range(-0.5..0.5);
            local.push([lateral, depth]);
        }
    } else {
        local.push([rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)]);
        for i in 1..n {
            let partner = local[rng.gen_range(0..i)];
            let t = if i == 1 { target } else { rng.gen_range(0.0..target) };
            let lateral = PERSON_WIDTH * (1.0 - t) / (1.0 + t) * rng.gen_range(0.6..1.4);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let behind = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let gap = rng.gen_range(0.7..1.2);
            local.push([partner[0] + side * lateral, partner[1] + behind * gap]);
        }
    }
    // centre the group
    let mean_l = local.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let mean_d = local.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    let world: Vec<[f64; 2]> = local
        .iter()
        .map(|p| {
            let l = p[0] - mean_l;
            let d = p[1] - mean_d;
            let w = right * l + fwd * d;
            [w.x, w.y]
        })
        .collect();
    if world.iter().any(|p| p[0].hypot(p[1]) > GROUP_RADIUS) {
        return None;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (world[i][0] - world[j][0]).hypot(world[i][1] - world[j][1]) < MIN_SEPARATION {
                return None;
            }
        }
    }
    Some(world)
}

fn sample_person(rng: &mut ChaCha8Rng, instance_id: usize, pos: [f64; 2]) -> Person {
    let scale = rng.gen_range(0.92..1.08);
    let facing = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut local = vec![Vector3::zeros(); Joint::COUNT];
    let set = |local: &mut Vec<Vector3<f64>>, j: Joint, v: Vector3<f64>| local[j.index()] = v;

    set(&mut local, Joint::Pelvis, Vector3::new(0.0, 0.0, 0.95));
    set(&mut local, Joint::Neck, Vector3::new(0.0, 0.0, 1.45));
    set(&mut local, Joint::Head, Vector3::new(0.0, 0.02, 1.62));
    for (side, shoulder, elbow, wrist) in [
        (-1.0, Joint::LShoulder, Joint::LElbow, Joint::LWrist),
        (1.0, Joint::RShoulder, Joint::RElbow, Joint::RWrist),
    ] {
        let s = Vector3::new(side * 0.18, 0.0, 1.42);
        let abduction: f64 = rng.gen_range(0.15..0.9);
        let swing: f64 = rng.gen_range(-0.5..0.5);
        let upper = Vector3::new(side * abduction.sin(), swing.sin(), -abduction.cos()).normalize();
        let bend: f64 = rng.gen_range(0.0..1.0);
        let lower = (upper * bend.cos() + Vector3::new(0.0, 1.0, 0.3) * bend.sin()).normalize();
        let e = s + upper * 0.29;
        set(&mut local, shoulder, s);
        set(&mut local, elbow, e);
        set(&mut local, wrist, e + lower * 0.26);
    }
    for (side, hip, knee, ankle) in [
        (-1.0, Joint::LHip, Joint::LKnee, Joint::LAnkle),
        (1.0, Joint::RHip, Joint::RKnee, Joint::RAnkle),
    ] {
        let h = Vector3::new(side * 0.1, 0.0, 0.92);
        let spread: f64 = rng.gen_range(0.0..0.2);
        let stride: f64 = rng.gen_range(-0.35..0.35);
        let upper = Vector3::new(side * spread.sin(), stride.sin(), -1.0).normalize();
        let knee_bend: f64 = rng.gen_range(0.0..0.35);
        let lower = (upper + Vector3::new(0.0, -knee_bend.sin(), 0.0)).normalize();
        let k = h + upper * 0.43;
        set(&mut local, hip, h);
        set(&mut local, knee, k);
        set(&mut local, ankle, k + lower * 0.42);
    }
    // feet on the ground
    let lowest = local[Joint::LAnkle.index()].z.min(local[Joint::RAnkle.index()].z);
    let lift = 0.07 - lowest;
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), facing);
    let joints = local
        .iter()
        .map(|v| {
            let lifted = Vector3::new(v.x, v.y, v.z + lift) * scale;
            let w = rot * lifted;
            Point3::new(w.x + pos[0], w.y + pos[1], w.z)
        })
        .collect();
    let mut radii = BASE_RADII;
    radii.iter_mut().for_each(|r| *r *= scale);
    Person {
        skeleton: Skeleton {
            instance_id,
            joints,
        },
        radii,
        albedo: PALETTE[instance_id % PALETTE.len()],
    }
}

/// Smallest positive ray parameter `t` at which `origin + t·dir` hits the
/// capsule `a–b` of radius `r`. `dir` need not be normalized.
pub fn ray_capsule(origin: &Point3<f64>, dir: &Vector3<f64>, a: &Point3<f64>, b: &Point3<f64>, r: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 0.0 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    let ba = b - a;
    let baba = ba.dot(&ba);
    if baba > 0.0 {
        // finite cylinder
        let oa = origin - a;
        let bard = ba.dot(dir);
        let baoa = ba.dot(&oa);
        let qa = baba * dir.dot(dir) - bard * bard;
        let qb = baba * dir.dot(&oa) - baoa * bard;
        let qc = baba * oa.dot(&oa) - baoa * baoa - r * r * baba;
        if qa > 0.0 {
            let h = qb * qb - qa * qc;
            if h >= 0.0 {
                let sq = h.sqrt();
                for t in [(-qb - sq) / qa, (-qb + sq) / qa] {
                    let y = baoa + t * bard;
                    if y > 0.0 && y < baba {
                        consider(t);
                    }
                }
            }
        }
    }
    for c in [a, b] {
        if let Some(t) = ray_sphere(origin, dir, c, r) {
            consider(t);
        }
        if baba == 0.0 {
            break;
        }
    }
    best
}

fn ray_sphere(origin: &Point3<f64>, dir: &Vector3<f64>, c: &Point3<f64>, r: f64) -> Option<f64> {
    let oc = origin - c;
    let a = dir.dot(dir);
    let b = dir.dot(&oc);
    let cc = oc.dot(&oc) - r * r;
    let h = b * b - a * cc;
    if h < 0.0 {
        return None;
    }
    let sq = h.sqrt();
    let t0 = (-b - sq) / a;
    if t0 > 0.0 {
        return Some(t0);
    }
    let t1 = (-b + sq) / a;
    (t1 > 0.0).then_some(t1)
}

/// Nearest capsule hit along the ray through pixel `(x, y)`:
/// `(depth, person index, limb index)`.
pub fn trace_pixel(people: &[Person], calib: &CameraCalibration, x: usize, y: usize) -> Option<(f64, usize, usize)> {
    let origin = calib.center();
    let dir = calib.pixel_ray(x as f64, y as f64);
    let mut best: Option<(f64, usize, usize)> = None;
    for (pi, person) in people.iter().enumerate() {
        for (li, limb) in LIMBS.iter().enumerate() {
            let a = person.skeleton.joint(limb.from);
            let b = person.skeleton.joint(limb.to);
            if let Some(t) = ray_capsule(&origin, &dir, &a, &b, person.radii[li]) {
                // camera-space z of the ray direction is 1, so t is the depth
                if best.map_or(true, |(bt, _, _)| t < bt) {
                    best = Some((t, pi, li));
                }
            }
        }
    }
    best
}

fn shade(person: &Person, limb: usize, hit: &Point3<f64>, origin: &Point3<f64>) -> [u8; 3] {
    let spec = LIMBS[limb];
    let a = person.skeleton.joint(spec.from);
    let b = person.skeleton.joint(spec.to);
    let ba = b - a;
    let closest = if ba.norm_squared() > 0.0 {
        let t = ((hit - a).dot(&ba) / ba.norm_squared()).clamp(0.0, 1.0);
        a + ba * t
    } else {
        a
    };
    let normal = (hit - closest).normalize();
    let view = (origin - hit).normalize();
    let lambert = normal.dot(&view).clamp(0.0, 1.0);
    let k = 0.9 + 0.1 * lambert;
    person.albedo.map(|c| (c as f64 * k).round().clamp(0.0, 255.0) as u8)
}

/// Renders the given people from `calib`.
pub fn render_people(people: &[Person], calib: &CameraCalibration) -> RenderedView {
    let (w, h) = (calib.width, calib.height);
    let origin = calib.center();
    let mut rgb = Grid::filled(w, h, BACKGROUND_RGB);
    let mut depth = Grid::filled(w, h, 0.0);
    let mut instances = Grid::filled(w, h, 0u8);
    let mut part_map = Grid::filled(w, h, parts::BACKGROUND);
    for y in 0..h {
        for x in 0..w {
            if let Some((t, pi, li)) = trace_pixel(people, calib, x, y) {
                let person = &people[pi];
                let hit = origin + calib.pixel_ray(x as f64, y as f64) * t;
                depth.set(x, y, t);
                instances.set(x, y, instance_label(person.skeleton.instance_id));
                part_map.set(x, y, LIMBS[li].part);
                rgb.set(x, y, shade(person, li, &hit, &origin));
            }
        }
    }
    RenderedView {
        rgb,
        depth,
        instances,
        parts: part_map,
    }
}

/// Renders one view of `scene` with `calib`.
pub fn render_view(scene: &SyntheticScene, calib: &CameraCalibration) -> RenderedView {
    render_people(&scene.people, calib)
}

/// Per-person nearest-hit depth ignoring all other people (0 where missed).
/// Used to find where one person hides another.
pub fn amodal_depths(people: &[Person], calib: &CameraCalibration) -> Vec<DepthMap> {
    people
        .iter()
        .map(|p| {
            let single = std::slice::from_ref(p);
            Grid::from_fn(calib.width, calib.height, |x, y| {
                trace_pixel(single, calib, x, y).map_or(0.0, |(t, _, _)| t)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_rig(n_views: usize) -> RigConfig {
        RigConfig {
            n_views,
            width: 64,
            height: 64,
            focal: 60.0,
            ..RigConfig::default()
        }
    }

    #[test]
    fn ray_capsule_closed_form() {
        let o = Point3::new(0.0, 0.0, 0.0);
        let d = Vector3::new(0.0, 0.0, 1.0);
        // capsule axis perpendicular to the ray, centre 3 m away
        let a = Point3::new(-0.5, 0.0, 3.0);
        let b = Point3::new(0.5, 0.0, 3.0);
        assert_relative_eq!(ray_capsule(&o, &d, &a, &b, 0.2).unwrap(), 2.8, epsilon = 1e-12);
        // unnormalized direction scales t
        let t = ray_capsule(&o, &(d * 2.0), &a, &b, 0.2).unwrap();
        assert_relative_eq!(t, 1.4, epsilon = 1e-12);
        // miss
        assert!(ray_capsule(&o, &Vector3::new(1.0, 1.0, 0.0), &a, &b, 0.2).is_none());
        // along the axis: hits the end cap sphere
        let a2 = Point3::new(0.0, 0.0, 2.0);
        let b2 = Point3::new(0.0, 0.0, 4.0);
        assert_relative_eq!(ray_capsule(&o, &d, &a2, &b2, 0.3).unwrap(), 1.7, epsilon = 1e-12);
        // sphere
        assert_relative_eq!(ray_capsule(&o, &d, &a2, &a2, 0.5).unwrap(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn empty_scene_renders_background() {
        let cams = camera_ring(&small_rig(1)).unwrap();
        let v = render_people(&[], &cams[0]);
        assert!(v.depth.data().iter().all(|&d| d == 0.0));
        assert!(v.instances.data().iter().all(|&i| i == 0));
        assert!(v.parts.data().iter().all(|&i| i == 0));
    }

    fn ball_person(id: usize, centre: Point3<f64>, r: f64) -> Person {
        let joints = vec![centre; Joint::COUNT];
        let mut radii = [0.0; 10];
        radii[0] = r;
        Person {
            skeleton: Skeleton { instance_id: id, joints },
            radii,
            albedo: PALETTE[id],
        }
    }

    #[test]
    fn centre_pixel_sees_capsule_at_distance_minus_radius() {
        let cam = CameraCalibration::look_at(0, Point3::new(4.0, 0.0, 1.0), Point3::new(0.0, 0.0, 1.0), Vector3::z(), 60.0, 64, 64).unwrap();
        let p = ball_person(2, Point3::new(0.0, 0.0, 1.0), 0.25);
        let v = render_people(&[p], &cam);
        assert_eq!(*v.instances.get(32, 32), instance_label(2));
        assert_relative_eq!(*v.depth.get(32, 32), 4.0 - 0.25, epsilon = 1e-12);
        assert_eq!(*v.parts.get(32, 32), parts::HEAD);
    }

    #[test]
    fn nearer_person_hides_farther_one() {
        let cam = CameraCalibration::look_at(0, Point3::new(4.0, 0.0, 1.0), Point3::new(0.0, 0.0, 1.0), Vector3::z(), 60.0, 64, 64).unwrap();
        let front = ball_person(0, Point3::new(1.0, 0.0, 1.0), 0.3);
        let back = ball_person(1, Point3::new(-1.0, 0.0, 1.0), 0.3);
        let v = render_people(&[back.clone(), front.clone()], &cam);
        let amodal = amodal_depths(&[back, front], &cam);
        let mut overlap = 0;
        for y in 0..64 {
            for x in 0..64 {
                if *amodal[0].get(x, y) > 0.0 && *amodal[1].get(x, y) > 0.0 {
                    overlap += 1;
                    assert_eq!(*v.instances.get(x, y), instance_label(0));
                }
            }
        }
        assert!(overlap > 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let rig = small_rig(3);
        let a = generate_scene(2, &rig, 0.5, 11).unwrap();
        let b = generate_scene(2, &rig, 0.5, 11).unwrap();
        assert_eq!(a.views, b.views);
        assert_eq!(a.people, b.people);
    }

    #[test]
    fn single_person_has_no_overlap() {
        let s = generate_scene(1, &small_rig(4), 0.0, 3).unwrap();
        for v in &s.views {
            assert_eq!(view_overlap_degree(v, 1), 0.0);
        }
    }

    #[test]
    fn two_people_hit_overlap_target() {
        let rig = RigConfig::default();
        let s = generate_scene(2, &rig, 0.6, 7).unwrap();
        let d = view_overlap_degree(&s.views[0], 2);
        assert!((0.5..=0.7).contains(&d), "degree {d}");
    }

    #[test]
    fn invalid_parameters() {
        assert!(generate_scene(0, &small_rig(2), 0.2, 1).is_err());
        assert!(generate_scene(1, &small_rig(0), 0.2, 1).is_err());
        assert!(generate_scene(2, &small_rig(2), 1.5, 1).is_err());
    }

    #[test]
    fn skeleton_record_round_trip() {
        let s = generate_scene(1, &small_rig(1), 0.0, 5).unwrap();
        let sk = &s.people[0].skeleton;
        let back = Skeleton::from_record(&sk.to_record()).unwrap();
        assert_eq!(&back, sk);
    }
}
