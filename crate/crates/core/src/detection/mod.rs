//! Search over grasp rectangles.
//!
//! Candidates are the product of a position grid, a set of angles in
//! `[0, pi)` and the `(len, wid)` pairs allowed by the gripper. Positions use
//! a stride grid centred in the image, `n = floor((W - 1) / s) + 1` points
//! starting at `((W - 1) - (n - 1) s) / 2`, so the grid is symmetric under a
//! half-turn about the image centre. Enumeration order is row (`y`), column
//! (`x`), angle, then size pair; ties in any ranking go to the earlier
//! candidate.

mod heatmap;

pub use heatmap::{score_heatmap, Heatmap};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::net::{forward_batch_logits, sigmoid, NetworkParams};
use crate::patch::InputSpec;
use crate::rect::GraspRect;
use crate::rgbd::RgbdImage;
use crate::{CascadeParams, Error, Result};

pub const DEFAULT_T: usize = 100;

/// Physical limits of the gripper, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub min_wid: f64,
    pub max_wid: f64,
    pub min_len: f64,
    pub max_len: f64,
}

impl Default for Gripper {
    fn default() -> Self {
        Gripper {
            min_wid: 10.0,
            max_wid: 30.0,
            min_len: 15.0,
            max_len: 45.0,
        }
    }
}

impl Gripper {
    pub fn allows(&self, len: f64, wid: f64) -> bool {
        (self.min_len..=self.max_len).contains(&len) && (self.min_wid..=self.max_wid).contains(&wid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Radians.
    pub angle_step: f64,
    /// Pixels.
    pub position_stride: f64,
    pub len_set: Vec<f64>,
    pub wid_set: Vec<f64>,
    pub gripper: Gripper,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            angle_step: 15f64.to_radians(),
            position_stride: 10.0,
            len_set: vec![20.0, 40.0],
            wid_set: vec![15.0, 30.0],
            gripper: Gripper::default(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if !(self.angle_step > 0.0) || !(self.position_stride > 0.0) {
            return Err(Error::invalid("angle step and position stride must be positive"));
        }
        if self.len_set.is_empty() || self.wid_set.is_empty() {
            return Err(Error::invalid("size sets must be non-empty"));
        }
        if self.len_set.iter().chain(&self.wid_set).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("rectangle sizes must be positive"));
        }
        Ok(())
    }

    pub fn angles(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let a = k as f64 * self.angle_step;
            if a >= std::f64::consts::PI - 1e-12 {
                break;
            }
            out.push(a);
            k += 1;
        }
        out
    }

    pub fn size_pairs(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for &len in &self.len_set {
            for &wid in &self.wid_set {
                if self.gripper.allows(len, wid) {
                    out.push((len, wid));
                }
            }
        }
        out
    }

    /// Grid coordinates along an axis of `extent` pixels.
    pub fn axis_positions(&self, extent: usize) -> Vec<f64> {
        if extent == 0 {
            return Vec::new();
        }
        let span = (extent - 1) as f64;
        let n = (span / self.position_stride).floor() as usize + 1;
        let offset = (span - (n - 1) as f64 * self.position_stride) / 2.0;
        (0..n).map(|i| offset + i as f64 * self.position_stride).collect()
    }

    pub fn candidate_count(&self, width: usize, height: usize) -> usize {
        self.axis_positions(width).len()
            * self.axis_positions(height).len()
            * self.angles().len()
            * self.size_pairs().len()
    }
}

/// All candidate rectangles in enumeration order.
pub fn enumerate_rects(width: usize, height: usize, space: &SearchSpace) -> Result<Vec<GraspRect>> {
    space.validate()?;
    let xs = space.axis_positions(width);
    let ys = space.axis_positions(height);
    let angles = space.angles();
    let sizes = space.size_pairs();
    let mut out = Vec::with_capacity(xs.len() * ys.len() * angles.len() * sizes.len());
    for &y in &ys {
        for &x in &xs {
            for &a in &angles {
                for &(len, wid) in &sizes {
                    out.push(GraspRect::new(x, y, a, len, wid)?);
                }
            }
        }
    }
    Ok(out)
}

/// Anything that assigns a graspability score to rectangles of an image.
///
/// Scores are logits: the probability is `sigmoid(logit)`. Rankings use the
/// logit so that saturated probabilities still order correctly.
pub trait Scorer: Sync {
    fn logits(&self, image: &RgbdImage, rects: &[GraspRect]) -> Result<Vec<f64>>;

    fn probabilities(&self, image: &RgbdImage, rects: &[GraspRect]) -> Result<Vec<f64>> {
        Ok(self.logits(image, rects)?.into_iter().map(sigmoid).collect())
    }
}

const SCORE_CHUNK: usize = 64;

/// Grasp probability of each rectangle under `net`.
pub fn score_all(net: &NetworkParams, image: &RgbdImage, rects: &[GraspRect]) -> Result<Vec<f64>> {
    net.probabilities(image, rects)
}

/// Featurise and score rectangles with a network, in parallel. Each logit is
/// independent of how the rectangles are batched.
pub fn score_all_logits(
    net: &NetworkParams,
    image: &RgbdImage,
    rects: &[GraspRect],
) -> Result<Vec<f64>> {
    let spec: &InputSpec = &net.input;
    let n = spec.input_len();
    let chunks: Vec<Vec<f64>> = rects
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| {
            let mut xs = vec![0.0; chunk.len() * n];
            let mut mu = vec![false; n];
            for (rect, x) in chunk.iter().zip(xs.chunks_exact_mut(n)) {
                spec.featurize_into(image, rect, x, &mut mu)?;
            }
            forward_batch_logits(net, &xs, chunk.len())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

impl Scorer for NetworkParams {
    fn logits(&self, image: &RgbdImage, rects: &[GraspRect]) -> Result<Vec<f64>> {
        score_all_logits(self, image, rects)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRect {
    pub rect: GraspRect,
    /// Position in the candidate enumeration.
    pub index: usize,
    /// First-pass logit, when the candidate went through a first pass.
    pub stage1_logit: Option<f64>,
    /// Final logit.
    pub logit: f64,
    /// Final probability, `sigmoid(logit)`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub best: ScoredRect,
    /// Stage-1 survivors, sorted by descending stage-1 logit.
    pub top_t: Vec<ScoredRect>,
    pub candidates: usize,
    pub stage1_evals: usize,
    pub stage2_evals: usize,
    pub stage1_time_s: f64,
    pub stage2_time_s: f64,
}

impl DetectionResult {
    /// Equality ignoring wall-clock timings.
    pub fn same_outcome(&self, other: &DetectionResult) -> bool {
        self.best == other.best
            && self.top_t == other.top_t
            && self.candidates == other.candidates
            && self.stage1_evals == other.stage1_evals
            && self.stage2_evals == other.stage2_evals
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DetectOutcome {
    Found(DetectionResult),
    /// The search space admits no rectangle for this image.
    NoCandidates,
}

impl DetectOutcome {
    pub fn found(self) -> Option<DetectionResult> {
        match self {
            DetectOutcome::Found(r) => Some(r),
            DetectOutcome::NoCandidates => None,
        }
    }
}

/// Index of the highest score; the earliest one on ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Indices of the `t` highest scores, descending, earlier index first on
/// ties.
pub fn top_indices(scores: &[f64], t: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(t);
    idx
}

/// Score every candidate with the large network and keep the best.
pub fn detect_exhaustive(
    net: &dyn Scorer,
    image: &RgbdImage,
    space: &SearchSpace,
) -> Result<DetectOutcome> {
    let rects = enumerate_rects(image.width(), image.height(), space)?;
    if rects.is_empty() {
        return Ok(DetectOutcome::NoCandidates);
    }
    let start = Instant::now();
    let logits = net.logits(image, &rects)?;
    let i = argmax_first(&logits).expect("non-empty");
    Ok(DetectOutcome::Found(DetectionResult {
        best: ScoredRect {
            rect: rects[i],
            index: i,
            stage1_logit: None,
            logit: logits[i],
            score: sigmoid(logits[i]),
        },
        top_t: Vec::new(),
        candidates: rects.len(),
        stage1_evals: rects.len(),
        stage2_evals: 0,
        stage1_time_s: start.elapsed().as_secs_f64(),
        stage2_time_s: 0.0,
    }))
}

/// Rank every candidate with `small`, re-score the top `t` with `large`.
pub fn detect_two_stage(
    small: &dyn Scorer,
    large: &dyn Scorer,
    image: &RgbdImage,
    space: &SearchSpace,
    t: usize,
) -> Result<DetectOutcome> {
    if t == 0 {
        return Err(Error::invalid("T must be at least 1"));
    }
    let rects = enumerate_rects(image.width(), image.height(), space)?;
    if rects.is_empty() {
        return Ok(DetectOutcome::NoCandidates);
    }
    let start = Instant::now();
    let s1 = small.logits(image, &rects)?;
    let top = top_indices(&s1, t);
    let stage1_time_s = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let survivors: Vec<GraspRect> = top.iter().map(|&i| rects[i]).collect();
    let s2 = large.logits(image, &survivors)?;
    let stage2_time_s = start.elapsed().as_secs_f64();
    let top_t: Vec<ScoredRect> = top
        .iter()
        .zip(&s2)
        .map(|(&i, &logit)| ScoredRect {
            rect: rects[i],
            index: i,
            stage1_logit: Some(s1[i]),
            logit,
            score: sigmoid(logit),
        })
        .collect();
    let best = *top_t
        .iter()
        .reduce(|a, b| {
            if b.logit > a.logit || (b.logit == a.logit && b.index < a.index) {
                b
            } else {
                a
            }
        })
        .expect("non-empty");
    Ok(DetectOutcome::Found(DetectionResult {
        best,
        top_t,
        candidates: rects.len(),
        stage1_evals: rects.len(),
        stage2_evals: survivors.len(),
        stage1_time_s,
        stage2_time_s,
    }))
}

/// [`detect_two_stage`] with the networks of a cascade.
pub fn detect_cascade(
    cascade: &CascadeParams,
    image: &RgbdImage,
    space: &SearchSpace,
    t: usize,
) -> Result<DetectOutcome> {
    detect_two_stage(&cascade.small, &cascade.large, image, space, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn product_count() {
        let space = SearchSpace {
            angle_step: FRAC_PI_2,
            position_stride: 10.0,
            len_set: vec![40.0],
            wid_set: vec![20.0],
            gripper: Gripper {
                min_wid: 0.0,
                max_wid: 100.0,
                min_len: 0.0,
                max_len: 100.0,
            },
        };
        assert_eq!(enumerate_rects(100, 100, &space).unwrap().len(), 200);
        assert_eq!(space.candidate_count(100, 100), 200);
    }

    #[test]
    fn gripper_filter_empties_space() {
        let mut space = SearchSpace::default();
        space.gripper.max_wid = 5.0;
        assert!(enumerate_rects(50, 50, &space).unwrap().is_empty());
    }

    #[test]
    fn centred_grid() {
        let space = SearchSpace::default();
        let xs = space.axis_positions(176);
        assert_eq!(xs.len(), 18);
        assert_eq!(xs[0] + xs[17], 175.0);
        assert_eq!(space.axis_positions(1), vec![0.0]);
        assert_eq!(space.angles().len(), 12);
    }

    #[test]
    fn ranking_ties() {
        let s = [0.2, 0.9, 0.5, 0.9, 0.1];
        assert_eq!(argmax_first(&s), Some(1));
        assert_eq!(top_indices(&s, 3), vec![1, 3, 2]);
        assert_eq!(top_indices(&s, 10).len(), 5);
        assert_eq!(argmax_first(&[]), None);
    }
}
