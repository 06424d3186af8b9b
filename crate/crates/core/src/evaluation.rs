//! Recognition and detection metrics, fold splitting and cross-validation.

use std::borrow::Borrow;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{detect_two_stage, DetectOutcome, Scorer, SearchSpace};
use crate::rect::{angle_distance, convex_intersection_area, GraspRect};
use crate::rgbd::AnnotatedScene;
use crate::{Error, Result};

pub const ANGLE_GATE_DEG: f64 = 30.0;
pub const JACCARD_THRESHOLD: f64 = 0.25;

/// Intersection over union of two oriented rectangles.
pub fn jaccard(a: &GraspRect, b: &GraspRect) -> Result<f64> {
    let (aa, ab) = (a.area(), b.area());
    if !(aa > 0.0) || !(ab > 0.0) {
        return Err(Error::DegenerateRect);
    }
    let inter = convex_intersection_area(&a.corners(), &b.corners());
    let union = aa + ab - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// True when some ground truth is within 30 degrees (mod pi) of `pred` and
/// overlaps it with Jaccard index at least 0.25.
pub fn rect_metric(pred: &GraspRect, gts: &[GraspRect]) -> bool {
    gts.iter().any(|gt| {
        angle_distance(pred.angle, gt.angle) <= ANGLE_GATE_DEG.to_radians() + 1e-12
            && jaccard(pred, gt).is_ok_and(|j| j >= JACCARD_THRESHOLD)
    })
}

/// Distance threshold for the point metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum PointThreshold {
    /// Fixed number of pixels.
    Absolute(f64),
    /// Fraction of each ground-truth rectangle's diagonal.
    DiagonalFraction(f64),
}

impl Default for PointThreshold {
    fn default() -> Self {
        PointThreshold::DiagonalFraction(0.25)
    }
}

impl PointThreshold {
    pub fn for_gt(&self, gt: &GraspRect) -> f64 {
        match *self {
            PointThreshold::Absolute(d) => d,
            PointThreshold::DiagonalFraction(f) => f * gt.len.hypot(gt.wid),
        }
    }
}

/// True when `pred`'s centre lies within `dist_thresh` pixels (inclusive)
/// of some ground-truth centre.
pub fn point_metric(pred: &GraspRect, gts: &[GraspRect], dist_thresh: f64) -> bool {
    gts.iter()
        .any(|gt| pred.center().dist(gt.center()) <= dist_thresh)
}

/// Point metric with a per-ground-truth threshold.
pub fn point_metric_with(pred: &GraspRect, gts: &[GraspRect], thresh: PointThreshold) -> bool {
    gts.iter()
        .any(|gt| pred.center().dist(gt.center()) <= thresh.for_gt(gt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    ImageWise,
    ObjectWise,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::ImageWise => "image_wise",
            SplitMode::ObjectWise => "object_wise",
        })
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_wise" | "image" => Ok(SplitMode::ImageWise),
            "object_wise" | "object" => Ok(SplitMode::ObjectWise),
            _ => Err(Error::invalid(format!(
                "unknown split mode '{s}' (expected image_wise or object_wise)"
            ))),
        }
    }
}

/// Contiguous near-equal partition of `items` into `k` groups.
fn partition<T: Copy>(items: &[T], k: usize) -> Vec<Vec<T>> {
    let (q, r) = (items.len() / k, items.len() % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = q + usize::from(f < r);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Partition scene indices into `k` folds. Image-wise splitting shuffles
/// scenes; object-wise splitting shuffles object ids so that every object
/// lands in exactly one fold.
pub fn split_folds<S: Borrow<AnnotatedScene>>(
    scenes: &[S],
    mode: SplitMode,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid("need at least two folds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SplitMode::ImageWise => {
            if scenes.len() < k {
                return Err(Error::invalid(format!(
                    "{} images cannot fill {k} folds",
                    scenes.len()
                )));
            }
            let mut idx: Vec<usize> = (0..scenes.len()).collect();
            idx.shuffle(&mut rng);
            let mut folds = partition(&idx, k);
            folds.iter_mut().for_each(|f| f.sort_unstable());
            Ok(folds)
        }
        SplitMode::ObjectWise => {
            let ids: BTreeSet<u32> = scenes.iter().map(|s| s.borrow().object_id).collect();
            if ids.len() < k {
                return Err(Error::invalid(format!(
                    "{} objects cannot fill {k} object-wise folds",
                    ids.len()
                )));
            }
            let mut ids: Vec<u32> = ids.into_iter().collect();
            ids.shuffle(&mut rng);
            Ok(partition(&ids, k)
                .into_iter()
                .map(|group| {
                    let group: BTreeSet<u32> = group.into_iter().collect();
                    (0..scenes.len())
                        .filter(|&i| group.contains(&scenes[i].borrow().object_id))
                        .collect()
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub t: usize,
    pub point: PointThreshold,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            t: crate::detection::DEFAULT_T,
            point: PointThreshold::default(),
        }
    }
}

/// Raw counts for one evaluated set of scenes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub scenes: usize,
    pub rects: usize,
    pub recognition_correct: usize,
    /// Scenes with at least one positive annotation.
    pub detection_scenes: usize,
    pub point_hits: usize,
    pub rect_hits: usize,
}

impl EvalCounts {
    pub fn add(&mut self, o: &EvalCounts) {
        self.scenes += o.scenes;
        self.rects += o.rects;
        self.recognition_correct += o.recognition_correct;
        self.detection_scenes += o.detection_scenes;
        self.point_hits += o.point_hits;
        self.rect_hits += o.rect_hits;
    }

    fn ratio(a: usize, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn recognition_accuracy(&self) -> f64 {
        Self::ratio(self.recognition_correct, self.rects)
    }

    pub fn point_rate(&self) -> f64 {
        Self::ratio(self.point_hits, self.detection_scenes)
    }

    pub fn rect_rate(&self) -> f64 {
        Self::ratio(self.rect_hits, self.detection_scenes)
    }
}

/// Per-scene detection outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDetection {
    pub image_id: u32,
    pub best: Option<GraspRect>,
    pub score: Option<f64>,
    pub point_ok: bool,
    pub rect_ok: bool,
}

/// Recognition of every annotated rectangle with `large` (positive iff
/// `p > 0.5`) and two-stage detection scored against each scene's positives.
pub fn evaluate<S: Borrow<AnnotatedScene>>(
    small: &dyn Scorer,
    large: &dyn Scorer,
    scenes: &[S],
    space: &SearchSpace,
    metrics: &MetricsConfig,
) -> Result<(EvalCounts, Vec<SceneDetection>)> {
    let mut counts = EvalCounts::default();
    let mut details = Vec::new();
    for scene in scenes.iter().map(Borrow::borrow) {
        counts.scenes += 1;
        let (w, h) = (scene.image.width(), scene.image.height());
        let (rects, labels): (Vec<GraspRect>, Vec<bool>) = scene
            .labeled_rects()
            .filter(|(r, _)| r.intersects_image(w, h))
            .unzip();
        if !rects.is_empty() {
            let probs = large.probabilities(&scene.image, &rects)?;
            counts.rects += rects.len();
            counts.recognition_correct += probs
                .iter()
                .zip(&labels)
                .filter(|(&p, &l)| (p > 0.5) == l)
                .count();
        }
        if scene.positives.is_empty() {
            continue;
        }
        counts.detection_scenes += 1;
        let outcome = detect_two_stage(small, large, &scene.image, space, metrics.t)?;
        let det = match outcome {
            DetectOutcome::Found(r) => {
                let pred = r.best.rect;
                SceneDetection {
                    image_id: scene.image_id,
                    best: Some(pred),
                    score: Some(r.best.score),
                    point_ok: point_metric_with(&pred, &scene.positives, metrics.point),
                    rect_ok: rect_metric(&pred, &scene.positives),
                }
            }
            DetectOutcome::NoCandidates => SceneDetection {
                image_id: scene.image_id,
                best: None,
                score: None,
                point_ok: false,
                rect_ok: false,
            },
        };
        counts.point_hits += usize::from(det.point_ok);
        counts.rect_hits += usize::from(det.rect_ok);
        details.push(det);
    }
    Ok((counts, details))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_scenes: Vec<u32>,
    pub counts: EvalCounts,
    pub recognition_accuracy: f64,
    pub point_rate: f64,
    pub rect_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub split_mode: SplitMode,
    pub recognition_accuracy: f64,
    pub point_rate: f64,
    pub rect_rate: f64,
    pub folds: Vec<FoldReport>,
    /// Resolved settings the report was produced with.
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    /// Pool fold counts into overall rates.
    pub fn from_folds(
        label: impl Into<String>,
        split_mode: SplitMode,
        folds: Vec<FoldReport>,
        config: Vec<(String, String)>,
    ) -> Self {
        let mut total = EvalCounts::default();
        folds.iter().for_each(|f| total.add(&f.counts));
        EvalReport {
            label: label.into(),
            split_mode,
            recognition_accuracy: total.recognition_accuracy(),
            point_rate: total.point_rate(),
            rect_rate: total.rect_rate(),
            folds,
            config,
        }
    }

    pub fn table_header() -> String {
        format!(
            "{:<24} {:<12} {:>12} {:>8} {:>8}",
            "algorithm", "split", "recognition", "point", "rect"
        )
    }

    pub fn table_row(&self) -> String {
        format!(
            "{:<24} {:<12} {:>11.1}% {:>7.1}% {:>7.1}%",
            self.label,
            self.split_mode.to_string(),
            100.0 * self.recognition_accuracy,
            100.0 * self.point_rate,
            100.0 * self.rect_rate
        )
    }
}

/// Trains a `(small, large)` scorer pair on the given scenes.
pub type TrainFn<'a> = dyn FnMut(&[&AnnotatedScene]) -> Result<(Box<dyn Scorer>, Box<dyn Scorer>)> + 'a;

/// k-fold cross-validation: for each fold train on the others and evaluate
/// on it.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    label: &str,
    scenes: &[AnnotatedScene],
    mode: SplitMode,
    k: usize,
    seed: u64,
    train: &mut TrainFn<'_>,
    space: &SearchSpace,
    metrics: &MetricsConfig,
    config: Vec<(String, String)>,
) -> Result<EvalReport> {
    let folds = split_folds(scenes, mode, k, seed)?;
    let mut reports = Vec::with_capacity(k);
    for (f, test_idx) in folds.iter().enumerate() {
        let test: BTreeSet<usize> = test_idx.iter().copied().collect();
        let train_set: Vec<&AnnotatedScene> = (0..scenes.len())
            .filter(|i| !test.contains(i))
            .map(|i| &scenes[i])
            .collect();
        let test_set: Vec<&AnnotatedScene> = test_idx.iter().map(|&i| &scenes[i]).collect();
        let (small, large) = train(&train_set)?;
        let (counts, _) = evaluate(small.as_ref(), large.as_ref(), &test_set, space, metrics)?;
        log::info!(
            "{label} {mode} fold {f}: recognition {:.3}, point {:.3}, rect {:.3}",
            counts.recognition_accuracy(),
            counts.point_rate(),
            counts.rect_rate()
        );
        reports.push(FoldReport {
            fold: f,
            test_scenes: test_set.iter().map(|s| s.image_id).collect(),
            counts,
            recognition_accuracy: counts.recognition_accuracy(),
            point_rate: counts.point_rate(),
            rect_rate: counts.rect_rate(),
        });
    }
    Ok(EvalReport::from_folds(label, mode, reports, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn r(cx: f64, cy: f64, a: f64, l: f64, w: f64) -> GraspRect {
        GraspRect::new(cx, cy, a, l, w).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        let a = r(0.0, 0.0, 0.0, 1.0, 1.0);
        assert_abs_diff_eq!(jaccard(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(jaccard(&a, &r(5.0, 0.0, 0.0, 1.0, 1.0)).unwrap(), 0.0);
        let b = r(0.5, 0.0, 0.0, 1.0, 1.0);
        assert_abs_diff_eq!(jaccard(&a, &b).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        let mut d = a;
        d.wid = 0.0;
        assert!(matches!(jaccard(&a, &d), Err(Error::DegenerateRect)));
    }

    #[test]
    fn rect_metric_gates() {
        let gt = r(10.0, 10.0, 0.3, 20.0, 10.0);
        assert!(rect_metric(&gt, &[gt]));
        let rot = r(10.0, 10.0, 0.3 + 40f64.to_radians(), 20.0, 10.0);
        assert!(!rect_metric(&rot, &[gt]));
        assert!(!rect_metric(&gt, &[]));
        let unit = r(0.0, 0.0, 0.0, 1.0, 1.0);
        assert!(rect_metric(&r(0.5, 0.0, 0.0, 1.0, 1.0), &[unit]));
    }

    #[test]
    fn point_metric_boundary() {
        let gt = r(0.0, 0.0, 0.0, 4.0, 3.0);
        assert!(point_metric(&gt, &[gt], 1.0));
        assert!(point_metric(&r(3.0, 4.0, 0.0, 4.0, 3.0), &[gt], 5.0));
        assert!(!point_metric(&r(10.0, 0.0, 0.0, 4.0, 3.0), &[gt], 5.0));
        // Diagonal 5, quarter 1.25.
        assert!(point_metric_with(&r(1.25, 0.0, 0.0, 1.0, 1.0), &[gt], PointThreshold::default()));
        assert!(!point_metric_with(&r(1.3, 0.0, 0.0, 1.0, 1.0), &[gt], PointThreshold::default()));
    }

    #[test]
    fn partition_sizes() {
        let p = partition(&(0..7).collect::<Vec<_>>(), 3);
        assert_eq!(p, vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]]);
    }

    #[test]
    fn split_mode_names() {
        assert_eq!("object_wise".parse::<SplitMode>().unwrap(), SplitMode::ObjectWise);
        assert!("x".parse::<SplitMode>().is_err());
    }
}
