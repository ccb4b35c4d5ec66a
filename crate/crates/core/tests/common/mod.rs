//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Point3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvig::geometry::{CameraCalibration, DepthMap, Projection};
use mvig::grid::{Grid, Mask, PixelRect};
use mvig::losses::{InstanceTarget, MultiViewSample, PartProbMaps, SampledPoint, SampleView, ViewMaps};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Mask {
    Mask::from_fn(w, h, |_, _| rng.gen_bool(p))
}

pub fn random_rect(rng: &mut ChaCha8Rng, w: usize, h: usize, min: usize) -> PixelRect {
    let x0 = rng.gen_range(0..=w - min);
    let y0 = rng.gen_range(0..=h - min);
    PixelRect {
        x0,
        y0,
        x1: rng.gen_range(x0 + min..=w),
        y1: rng.gen_range(y0 + min..=h),
    }
}

pub fn random_maps(rng: &mut ChaCha8Rng, id: usize, region: PixelRect, channels: usize) -> PartProbMaps {
    let logits = (0..region.area() * channels).map(|_| rng.gen_range(-3.0..3.0)).collect();
    PartProbMaps::new(id, region, channels, logits).unwrap()
}

/// Full-image random maps plus a random target of the same region.
pub fn random_single(rng: &mut ChaCha8Rng, w: usize, h: usize, channels: usize) -> (PartProbMaps, InstanceTarget) {
    let region = PixelRect { x0: 0, y0: 0, x1: w, y1: h };
    let maps = random_maps(rng, 0, region, channels);
    let p = rng.gen_range(0.2..0.8);
    (maps, InstanceTarget { mask: random_mask(rng, w, h, p) })
}

/// Multi-view loss inputs on `w × h` images with hand-placed projections.
pub struct MvCase {
    pub views: Vec<ViewMaps>,
    pub targets: Vec<Vec<InstanceTarget>>,
    pub sample: MultiViewSample,
}

pub fn random_mv_case(rng: &mut ChaCha8Rng, n_views: usize, w: usize, h: usize, n_inst: usize, n_points: usize) -> MvCase {
    let channels = 5;
    let mut views = Vec::new();
    let mut targets = Vec::new();
    for v in 0..n_views {
        let mut maps = Vec::new();
        let mut ts = Vec::new();
        for id in 0..n_inst {
            let r = random_rect(rng, w, h, 3);
            maps.push(random_maps(rng, id, r, channels));
            ts.push(InstanceTarget {
                mask: random_mask(rng, r.width(), r.height(), 0.5),
            });
        }
        // the predicted maps arrive in an arbitrary order
        let mut order: Vec<usize> = (0..n_inst).collect();
        order.shuffle(rng);
        let maps: Vec<_> = order.iter().map(|&k| maps[k].clone()).collect();
        let ts: Vec<_> = order.iter().map(|&k| ts[k].clone()).collect();
        views.push(ViewMaps { view_id: v, maps });
        targets.push(ts);
    }
    let points: Vec<SampledPoint> = (0..n_points)
        .map(|_| SampledPoint {
            position: Point3::new(rng.gen(), rng.gen(), rng.gen()),
            instance_id: rng.gen_range(0..n_inst),
        })
        .collect();
    let sample_views = views
        .iter()
        .map(|vm| {
            let projections: Vec<Projection> = points
                .iter()
                .map(|_| {
                    // a margin outside the image produces some invalid projections
                    let u: f64 = rng.gen_range(-1.5..w as f64 + 0.5);
                    let v: f64 = rng.gen_range(-1.5..h as f64 + 0.5);
                    let inside = u >= 0.0 && v >= 0.0 && (u + 0.5).floor() < w as f64 && (v + 0.5).floor() < h as f64;
                    Projection {
                        view_id: vm.view_id,
                        u,
                        v,
                        z: rng.gen_range(1.0..3.0),
                        valid: inside,
                    }
                })
                .collect();
            let visible = projections.iter().map(|p| p.valid && rng.gen_bool(0.7)).collect();
            // most instances matched to their own map, occasionally one left out
            let mut matching = BTreeMap::new();
            for (k, m) in vm.maps.iter().enumerate() {
                if rng.gen_bool(0.9) {
                    matching.insert(m.instance_id, k);
                }
            }
            SampleView {
                view_id: vm.view_id,
                projections,
                visible,
                matching,
            }
        })
        .collect();
    MvCase {
        views,
        targets,
        sample: MultiViewSample {
            points,
            beta: 0.3,
            views: sample_views,
        },
    }
}

/// Jaccard loss `1 - |P∩G| / |P∪G|` by counting, 0 for an empty union.
pub fn jaccard_loss(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let union = pred.iter().zip(gt).filter(|(p, g)| **p || **g).count();
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Symmetric two-class Jaccard loss of a hard foreground prediction.
pub fn symmetric_jaccard(pred_fg: &[bool], gt_fg: &[bool]) -> f64 {
    let pred_bg: Vec<bool> = pred_fg.iter().map(|b| !b).collect();
    let gt_bg: Vec<bool> = gt_fg.iter().map(|b| !b).collect();
    0.5 * (jaccard_loss(pred_fg, gt_fg) + jaccard_loss(&pred_bg, &gt_bg))
}

// ---- analytic two-capsule scene ---------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Capsule {
    pub a: Point3<f64>,
    pub b: Point3<f64>,
    pub r: f64,
}

impl Capsule {
    /// Distance from `p` to the axis segment.
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        let ab = self.b - self.a;
        let t = ((p - self.a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        (p - (self.a + ab * t)).norm()
    }

    /// Smallest `t > 0` with `o + t·d` on the surface, found by sphere
    /// tracing the distance function rather than any closed form.
    pub fn march(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let unit = d.normalize();
        let scale = d.norm();
        let mut s = 0.0;
        for _ in 0..5000 {
            let p = o + unit * s;
            let sd = self.distance(&p) - self.r;
            if sd < 1e-12 {
                return Some(s / scale);
            }
            s += sd;
            if s > 100.0 {
                return None;
            }
        }
        // grazing rays that never converge are treated as misses
        None
    }
}

/// Point on the cylindrical part of the surface at axis parameter `t`.
pub fn capsule_surface_point(c: &Capsule, t: f64, theta: f64) -> Point3<f64> {
    let axis = (c.b - c.a).normalize();
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = axis.cross(&helper).normalize();
    let e2 = axis.cross(&e1);
    c.a + (c.b - c.a) * t + (e1 * theta.cos() + e2 * theta.sin()) * c.r
}

/// Camera at `eye` looking along +world-y with world-z up.
pub fn forward_camera(eye: Point3<f64>, focal: f64, w: usize, h: usize) -> CameraCalibration {
    // camera x = world x, camera y = -world z, camera z = world y
    let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
    let t = -(r * eye.coords);
    CameraCalibration::new(0, focal, focal, w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5, r, t, w, h).unwrap()
}

/// Depth map by marching every pixel-centre ray against the capsules.
pub fn march_depth(caps: &[Capsule], calib: &CameraCalibration) -> DepthMap {
    let rt = calib.rotation.transpose();
    let o = Point3::from(-(rt * calib.translation));
    Grid::from_fn(calib.width, calib.height, |x, y| {
        let dc = Vector3::new((x as f64 - calib.cx) / calib.fx, (y as f64 - calib.cy) / calib.fy, 1.0);
        let dw = rt * dc;
        caps.iter()
            .filter_map(|c| c.march(&o, &dw))
            .fold(0.0, |best: f64, t| if best == 0.0 || t < best { t } else { best })
    })
}

// ---- naive metric oracles --------------------------------------------

pub fn naive_miou(pairs: &[(&Grid<u8>, &Grid<u8>)], n: usize, ignore: &BTreeSet<u8>, map: &BTreeMap<u8, u8>) -> f64 {
    let m = |c: u8| *map.get(&c).unwrap_or(&c);
    let mut per_class = Vec::new();
    for c in 0..n as u8 {
        if ignore.contains(&c) {
            continue;
        }
        let (mut i, mut u, mut g) = (0usize, 0usize, 0usize);
        for (p, gt) in pairs {
            for k in 0..p.len() {
                let (pv, gv) = (m(p.data()[k]), m(gt.data()[k]));
                if ignore.contains(&gv) {
                    continue;
                }
                let (a, b) = (pv == c, gv == c);
                i += (a && b) as usize;
                u += (a || b) as usize;
                g += b as usize;
            }
        }
        if g > 0 {
            per_class.push(i as f64 / u as f64);
        }
    }
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

pub fn naive_accuracies(pairs: &[(&Grid<u8>, &Grid<u8>)]) -> (f64, f64) {
    let mut correct = 0;
    let mut total = 0;
    let mut per: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for (p, g) in pairs {
        for k in 0..p.len() {
            total += 1;
            let e = per.entry(g.data()[k]).or_default();
            e.1 += 1;
            if p.data()[k] == g.data()[k] {
                correct += 1;
                e.0 += 1;
            }
        }
    }
    let mean = per.values().map(|(h, n)| *h as f64 / *n as f64).sum::<f64>() / per.len() as f64;
    (correct as f64 / total as f64, mean)
}

fn set_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let u = a.union(b).count();
    if u == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / u as f64
    }
}

fn pixels_where(g: &Grid<u8>, f: impl Fn(u8) -> bool) -> BTreeSet<usize> {
    (0..g.len()).filter(|&k| f(g.data()[k])).collect()
}

pub fn naive_human_global(pairs: &[(&Grid<u8>, &Grid<u8>)]) -> f64 {
    // pixel sets over the whole dataset, offset per image
    let (mut pf, mut gf, mut pb, mut gb) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    let mut off = 0;
    for (p, g) in pairs {
        for k in 0..p.len() {
            let (a, b) = (p.data()[k] != 0, g.data()[k] != 0);
            if a {
                pf.insert(off + k);
            } else {
                pb.insert(off + k);
            }
            if b {
                gf.insert(off + k);
            } else {
                gb.insert(off + k);
            }
        }
        off += p.len();
    }
    0.5 * (set_iou(&pf, &gf) + set_iou(&pb, &gb))
}

fn labels_of(g: &Grid<u8>) -> Vec<u8> {
    let s: BTreeSet<u8> = g.data().iter().copied().filter(|&v| v != 0).collect();
    s.into_iter().collect()
}

/// Greedy descending-IoU matching over every (pred, gt) instance pair.
fn naive_greedy(pred: &[BTreeSet<usize>], gt: &[BTreeSet<usize>]) -> Vec<f64> {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let iou = set_iou(p, g);
            if iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut up, mut ug) = (BTreeSet::new(), BTreeSet::new());
    let mut out = Vec::new();
    for (iou, i, j) in pairs {
        if !up.contains(&i) && !ug.contains(&j) {
            up.insert(i);
            ug.insert(j);
            out.push(iou);
        }
    }
    out
}

pub fn naive_human_instance(pairs: &[(&Grid<u8>, &Grid<u8>)]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (p, g) in pairs {
        let ps: Vec<_> = labels_of(p).into_iter().map(|l| pixels_where(p, |v| v == l)).collect();
        let gs: Vec<_> = labels_of(g).into_iter().map(|l| pixels_where(g, |v| v == l)).collect();
        n += gs.len();
        sum += naive_greedy(&ps, &gs).iter().sum::<f64>();
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean IoU over part categories present in either instance.
fn naive_part_iou(pi: &Grid<u8>, pp: &Grid<u8>, pl: u8, gi: &Grid<u8>, gp: &Grid<u8>, gl: u8) -> f64 {
    let mut ious = Vec::new();
    for c in 1..=255u8 {
        let a: BTreeSet<usize> = (0..pi.len()).filter(|&k| pi.data()[k] == pl && pp.data()[k] == c).collect();
        let b: BTreeSet<usize> = (0..gi.len()).filter(|&k| gi.data()[k] == gl && gp.data()[k] == c).collect();
        if !a.is_empty() || !b.is_empty() {
            ious.push(set_iou(&a, &b));
        }
    }
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// `(instances, parts)` per image for prediction and ground truth, plus
/// prediction confidences.
pub struct NaiveApImage<'a> {
    pub pi: &'a Grid<u8>,
    pub pp: &'a Grid<u8>,
    pub gi: &'a Grid<u8>,
    pub gp: &'a Grid<u8>,
    pub scores: &'a BTreeMap<u8, f64>,
}

/// Step-wise PR integration: precision at each recall level is replaced by
/// the best precision at any higher recall.
fn naive_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut hits = 0;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        points.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            let best = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * best;
            prev_recall = r;
        }
    }
    ap
}

pub fn naive_ap_vol(images: &[NaiveApImage<'_>]) -> f64 {
    let n_gt: usize = images.iter().map(|im| labels_of(im.gi).len()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut preds = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for l in labels_of(im.pi) {
            preds.push((im.scores.get(&l).copied().unwrap_or(1.0), i, l));
        }
    }
    preds.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut total = 0.0;
    for t in 1..=9 {
        let t = t as f64 / 10.0;
        let mut used: BTreeSet<(usize, u8)> = BTreeSet::new();
        let mut tp = Vec::new();
        for &(_, i, l) in &preds {
            let im = &images[i];
            let mut best: Option<(u8, f64)> = None;
            for gl in labels_of(im.gi) {
                if used.contains(&(i, gl)) {
                    continue;
                }
                let iou = naive_part_iou(im.pi, im.pp, l, im.gi, im.gp, gl);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gl, iou));
                }
            }
            match best {
                Some((gl, iou)) if iou > t => {
                    used.insert((i, gl));
                    tp.push(true);
                }
                _ => tp.push(false),
            }
        }
        total += naive_ap(&tp, n_gt);
    }
    total / 9.0
}

/// Max pairwise box IoU by pixel-count enumeration of the boxes.
pub fn naive_overlap_degree(inst: &Grid<u8>) -> f64 {
    let boxes: Vec<BTreeSet<usize>> = labels_of(inst)
        .into_iter()
        .map(|l| {
            let px: Vec<(usize, usize)> = (0..inst.len())
                .filter(|&k| inst.data()[k] == l)
                .map(|k| (k % inst.width(), k / inst.width()))
                .collect();
            let (x0, x1) = (px.iter().map(|p| p.0).min().unwrap(), px.iter().map(|p| p.0).max().unwrap());
            let (y0, y1) = (px.iter().map(|p| p.1).min().unwrap(), px.iter().map(|p| p.1).max().unwrap());
            let mut s = BTreeSet::new();
            for y in y0..=y1 {
                for x in x0..=x1 {
                    s.insert(y * inst.width() + x);
                }
            }
            s
        })
        .collect();
    let mut best = 0.0f64;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            best = best.max(set_iou(&boxes[i], &boxes[j]));
        }
    }
    best
}

/// Random label maps with `n_inst` blob-ish instances and random parts.
pub fn random_instance_map(rng: &mut ChaCha8Rng, w: usize, h: usize, n_inst: usize, n_parts: u8) -> (Grid<u8>, Grid<u8>) {
    let mut inst = Grid::filled(w, h, 0u8);
    for l in 1..=n_inst as u8 {
        let r = random_rect(rng, w, h, 2);
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                if rng.gen_bool(0.85) {
                    inst.set(x, y, l);
                }
            }
        }
    }
    let parts = Grid::from_fn(w, h, |x, y| if *inst.get(x, y) == 0 { 0 } else { rng.gen_range(1..=n_parts) });
    (inst, parts)
}
