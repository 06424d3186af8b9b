//! Deterministic synthetic RGB-D scenes with known graspable structure.
//!
//! Graspable objects are thin raised bars with a colored stripe. Distractors
//! are grooves (depth valleys) and blocks too wide for the gripper. Ground
//! truth positives straddle each bar with the plates parallel to its axis;
//! negatives sit on distractors, cross bars at steep angles, straddle a bar
//! edge or a bar tip, or land on empty table.
//!
//! Channels outside `relevant_modes` are replaced by noise with the same
//! mean and spread as the rendered plane, so any label signal lives only in
//! the declared modes. The three normal channels must be all relevant or all
//! irrelevant.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnnotatedScene, Channel, RgbdImage, DEFAULT_NORMAL_WINDOW};
use crate::rect::{normalize_angle, GraspRect, Point};
use crate::{Error, Result};

pub const TABLE_DEPTH: f64 = 50.0;
pub const RELIEF: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub n_bars: usize,
    pub n_distractors: usize,
    /// Standard deviation of additive noise on depth (in units of the relief
    /// height) and on color.
    pub noise_sigma: f64,
    pub relevant_modes: BTreeSet<Channel>,
    /// Fraction of pixels whose depth is dropped, to exercise masking.
    pub missing_depth: f64,
    /// Plate length and separation of annotated grasps.
    pub grasp_len: f64,
    pub grasp_wid: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 176,
            height: 132,
            n_bars: 1,
            n_distractors: 1,
            noise_sigma: 0.02,
            relevant_modes: Channel::ALL.into_iter().collect(),
            missing_depth: 0.0,
            grasp_len: 20.0,
            grasp_wid: 30.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Bar,
    Groove,
    Block,
}

/// One rendered object: a rounded slab along `angle` through `center`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: Point,
    pub angle: f64,
    pub length: f64,
    pub thickness: f64,
    pub color: [f64; 3],
}

impl Shape {
    /// Distance of `p` from the shape's axis line.
    pub fn axis_distance(&self, p: Point) -> f64 {
        let (dx, dy) = (p.x - self.center.x, p.y - self.center.y);
        (-self.angle.sin() * dx + self.angle.cos() * dy).abs()
    }

    fn coverage(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center.x, y - self.center.y);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let along = (c * dx + s * dy).abs() - 0.5 * self.length;
        let across = (-s * dx + c * dy).abs() - 0.5 * self.thickness;
        ramp(along) * ramp(across)
    }

    fn bounding_radius(&self) -> f64 {
        0.5 * self.length.hypot(self.thickness)
    }
}

/// 1 inside, 0 outside, cosine edge two pixels wide centered on the boundary.
fn ramp(signed_dist: f64) -> f64 {
    if signed_dist <= -1.0 {
        1.0
    } else if signed_dist >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 - (0.5 * PI * signed_dist).sin())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub shapes: Vec<Shape>,
}

impl Layout {
    pub fn bars(&self) -> impl Iterator<Item = &Shape> {
        self.shapes.iter().filter(|s| s.kind == ShapeKind::Bar)
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.15, 0.1],
    [0.1, 0.35, 0.85],
    [0.15, 0.7, 0.2],
    [0.9, 0.8, 0.1],
    [0.85, 0.45, 0.1],
    [0.6, 0.2, 0.75],
];
const TABLE_COLOR: [f64; 3] = [0.55, 0.53, 0.48];

pub fn synth_scene(seed: u64, spec: &SynthSpec) -> Result<AnnotatedScene> {
    synth_scene_with_layout(seed, spec).map(|(s, _)| s)
}

/// Generate a scene and also return the geometry it was rendered from.
pub fn synth_scene_with_layout(seed: u64, spec: &SynthSpec) -> Result<(AnnotatedScene, Layout)> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = place_shapes(&mut rng, spec)?;
    let (w, h) = (spec.width, spec.height);

    let mut depth = vec![TABLE_DEPTH; w * h];
    let mut rgb = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut color = TABLE_COLOR;
            for shape in &layout.shapes {
                let cov = shape.coverage(x as f64, y as f64);
                if cov <= 0.0 {
                    continue;
                }
                let relief = match shape.kind {
                    ShapeKind::Bar | ShapeKind::Block => -RELIEF,
                    ShapeKind::Groove => RELIEF,
                };
                depth[i] += cov * relief;
                for c in 0..3 {
                    color[c] = (1.0 - cov) * color[c] + cov * shape.color[c];
                }
            }
            for c in 0..3 {
                rgb[c][i] = color[c];
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let depth_noise = Normal::new(0.0, spec.noise_sigma * RELIEF).expect("finite sigma");
        let color_noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        for d in depth.iter_mut() {
            *d += depth_noise.sample(&mut rng);
        }
        for plane in rgb.iter_mut() {
            for v in plane.iter_mut() {
                *v = (*v + color_noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    let valid: Vec<bool> = (0..w * h)
        .map(|_| spec.missing_depth <= 0.0 || rng.random::<f64>() >= spec.missing_depth)
        .collect();

    let mut image = RgbdImage::from_depth_rgb(
        w,
        h,
        depth,
        valid,
        [&rgb[0], &rgb[1], &rgb[2]],
        DEFAULT_NORMAL_WINDOW,
    )?;
    replace_irrelevant(&mut image, &spec.relevant_modes, &mut rng);

    let (positives, negatives) = annotate(&mut rng, spec, &layout);
    let id = seed as u32;
    Ok((
        AnnotatedScene {
            image,
            positives,
            negatives,
            object_id: id,
            image_id: id,
        },
        layout,
    ))
}

/// `count` scenes from consecutive seeds. Image ids run from 0; every two
/// consecutive images share an object id.
pub fn synth_suite(first_seed: u64, count: usize, spec: &SynthSpec) -> Result<Vec<AnnotatedScene>> {
    (0..count)
        .map(|k| {
            let mut scene = synth_scene(first_seed + k as u64, spec)?;
            scene.image_id = k as u32;
            scene.object_id = (k / 2) as u32;
            Ok(scene)
        })
        .collect()
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.n_bars == 0 && spec.n_distractors == 0 {
        return Err(Error::invalid("synthetic scene needs at least one bar or distractor"));
    }
    let normals = spec
        .relevant_modes
        .iter()
        .filter(|c| c.is_normal())
        .count();
    if normals != 0 && normals != 3 {
        return Err(Error::invalid(
            "normal channels must be all relevant or all irrelevant",
        ));
    }
    if !(spec.noise_sigma >= 0.0) || !(0.0..1.0).contains(&spec.missing_depth) {
        return Err(Error::invalid("noise_sigma must be >= 0 and missing_depth in [0, 1)"));
    }
    let margin = 0.5 * spec.grasp_len.hypot(spec.grasp_wid);
    if (spec.width as f64) < 3.0 * margin || (spec.height as f64) < 3.0 * margin {
        return Err(Error::invalid("image too small for the requested grasp size"));
    }
    Ok(())
}

fn place_shapes(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Result<Layout> {
    let mut shapes: Vec<Shape> = Vec::new();
    let kinds = std::iter::repeat_n(ShapeKind::Bar, spec.n_bars)
        .chain((0..spec.n_distractors).map(|k| {
            if k % 2 == 0 {
                ShapeKind::Groove
            } else {
                ShapeKind::Block
            }
        }));
    for kind in kinds {
        let mut placed = false;
        for _ in 0..500 {
            let (length, thickness) = match kind {
                ShapeKind::Bar => (rng.random_range(40.0..56.0), rng.random_range(6.0..9.0)),
                ShapeKind::Groove => (rng.random_range(40.0..56.0), rng.random_range(6.0..9.0)),
                ShapeKind::Block => (
                    rng.random_range(34.0..44.0),
                    rng.random_range(1.4 * spec.grasp_wid..1.6 * spec.grasp_wid),
                ),
            };
            let angle = rng.random_range(0.0..PI);
            let candidate = Shape {
                kind,
                center: Point::new(0.0, 0.0),
                angle,
                length,
                thickness,
                color: PALETTE[rng.random_range(0..PALETTE.len())],
            };
            let r = 0.5 * length.max(thickness) + 6.0;
            let (w, h) = (spec.width as f64, spec.height as f64);
            if 2.0 * r >= w.min(h) {
                continue;
            }
            let center = Point::new(rng.random_range(r..w - r), rng.random_range(r..h - r));
            let candidate = Shape { center, ..candidate };
            let clear = shapes.iter().all(|s| {
                s.center.dist(center) > s.bounding_radius() + candidate.bounding_radius() + 4.0
            });
            if clear {
                shapes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(
                "could not place all synthetic objects; enlarge the image or reduce counts",
            ));
        }
    }
    Ok(Layout { shapes })
}

fn replace_irrelevant(image: &mut RgbdImage, relevant: &BTreeSet<Channel>, rng: &mut ChaCha8Rng) {
    let n = image.width() * image.height();
    let stats = |plane: &[f64]| {
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var.sqrt().max(1e-3))
    };
    for c in [Channel::Depth, Channel::Y, Channel::U, Channel::V] {
        if relevant.contains(&c) {
            continue;
        }
        let (mean, sd) = stats(image.plane(c));
        let dist = Normal::new(mean, sd).expect("finite moments");
        let (lo, hi) = match c {
            Channel::Depth => (f64::NEG_INFINITY, f64::INFINITY),
            Channel::Y => (0.0, 1.0),
            _ => (-0.5, 0.5),
        };
        for v in image.plane_mut(c).iter_mut() {
            *v = dist.sample(rng).clamp(lo, hi);
        }
    }
    if !relevant.contains(&Channel::NormalX) {
        let sx = stats(image.plane(Channel::NormalX)).1.min(0.5);
        let sy = stats(image.plane(Channel::NormalY)).1.min(0.5);
        let (dx, dy) = (Normal::new(0.0, sx).unwrap(), Normal::new(0.0, sy).unwrap());
        for i in 0..n {
            let (mut nx, mut ny): (f64, f64) = (dx.sample(rng), dy.sample(rng));
            let r = nx.hypot(ny);
            if r > 0.95 {
                nx *= 0.95 / r;
                ny *= 0.95 / r;
            }
            let nz = (1.0 - nx * nx - ny * ny).sqrt();
            if image.valid()[i] {
                image.plane_mut(Channel::NormalX)[i] = nx;
                image.plane_mut(Channel::NormalY)[i] = ny;
                image.plane_mut(Channel::NormalZ)[i] = nz;
            }
        }
    }
}

fn rect_at(shape: &Shape, along: f64, across: f64, angle_offset: f64, len: f64, wid: f64) -> GraspRect {
    let (c, s) = (shape.angle.cos(), shape.angle.sin());
    GraspRect {
        cx: shape.center.x + along * c - across * s,
        cy: shape.center.y + along * s + across * c,
        angle: normalize_angle(shape.angle + angle_offset),
        len,
        wid,
    }
}

fn annotate(rng: &mut ChaCha8Rng, spec: &SynthSpec, layout: &Layout) -> (Vec<GraspRect>, Vec<GraspRect>) {
    let (gl, gw) = (spec.grasp_len, spec.grasp_wid);
    let jitter = 5f64.to_radians();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for shape in &layout.shapes {
        let half = 0.5 * (shape.length - gl).max(0.0);
        match shape.kind {
            ShapeKind::Bar => {
                let steps = (2.0 * half / 6.0).floor() as usize;
                for k in 0..=steps {
                    let along = -half + 2.0 * half * k as f64 / steps.max(1) as f64;
                    let da = rng.random_range(-jitter..jitter);
                    pos.push(rect_at(shape, along, 0.0, da, gl, gw));
                }
                if shape.length >= 2.0 * gl + 4.0 {
                    pos.push(rect_at(shape, 0.0, 0.0, 0.0, 2.0 * gl, gw));
                }
                // Plates across the bar, diagonal, and straddling one edge.
                for along in [-half * 0.5, half * 0.5] {
                    neg.push(rect_at(shape, along, 0.0, PI / 2.0, gl, gw));
                }
                neg.push(rect_at(shape, 0.0, 0.0, PI / 4.0, gl, gw));
                neg.push(rect_at(shape, 0.0, 0.0, -PI / 4.0, gl, gw));
                for side in [-1.0, 1.0] {
                    neg.push(rect_at(shape, rng.random_range(-half..=half), side * 0.5 * gw, 0.0, gl, gw));
                }
                // Centred just past either tip: half the plates grip air.
                for side in [-1.0, 1.0] {
                    neg.push(rect_at(shape, side * (0.5 * shape.length + 2.0), 0.0, 0.0, gl, gw));
                }
            }
            ShapeKind::Groove | ShapeKind::Block => {
                for along in [-half, 0.0, half] {
                    neg.push(rect_at(shape, along, 0.0, 0.0, gl, gw));
                }
                neg.push(rect_at(shape, 0.0, 0.0, PI / 2.0, gl, gw));
            }
        }
    }
    // Empty table.
    let margin = 0.5 * gl.hypot(gw);
    let mut added = 0;
    for _ in 0..200 {
        if added == 3 {
            break;
        }
        let c = Point::new(
            rng.random_range(margin..spec.width as f64 - margin),
            rng.random_range(margin..spec.height as f64 - margin),
        );
        if layout
            .shapes
            .iter()
            .all(|s| s.center.dist(c) > s.bounding_radius() + margin)
        {
            neg.push(GraspRect {
                cx: c.x,
                cy: c.y,
                angle: rng.random_range(0.0..PI),
                len: gl,
                wid: gw,
            });
            added += 1;
        }
    }
    (pos, neg)
}
