//! Mapping from a grasp rectangle to a network input vector.
//!
//! [`extract_patch`] resamples the rectangle's interior into a
//! `side x side` receptive field. Rows of the field run across the plates
//! (along `wid`), columns along them (along `len`). The longer rectangle side
//! spans the whole field; the shorter one is centered and the remaining cells
//! are zero and masked out, which preserves aspect ratio.
//!
//! The flattened layout is mode-major: all depth cells, then Y, U, V, nX, nY,
//! nZ, each block row-major. Index `i = channel * side^2 + row * side + col`.
//! This order is part of the model file contract.
//!
//! [`mask_scale`] then multiplies each modality group by
//! `min(|group| / |group masked in|, c)` so that patches with a lot of padding
//! are not systematically weaker inputs.

use serde::{Deserialize, Serialize};

use crate::rect::GraspRect;
use crate::rgbd::{Channel, RgbdImage, NUM_CHANNELS};
use crate::{Error, Result};

pub const DEFAULT_SIDE: usize = 24;
pub const DEFAULT_SCALE_CAP: f64 = 2.0;

/// The binary matrix `S` assigning every input coordinate to exactly one
/// modality group, stored as one group index per coordinate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    modes: Vec<u16>,
    num_modes: usize,
    counts: Vec<usize>,
}

impl ModalityMask {
    /// Build from a per-coordinate group index. Every group in
    /// `0..num_modes` must own at least one coordinate.
    pub fn from_modes(modes: Vec<usize>, num_modes: usize) -> Result<Self> {
        if num_modes == 0 || num_modes > u16::MAX as usize {
            return Err(Error::invalid("mode count must be in 1..=65535"));
        }
        let mut counts = vec![0usize; num_modes];
        for &m in &modes {
            if m >= num_modes {
                return Err(Error::invalid(format!(
                    "coordinate assigned to mode {m} but only {num_modes} modes exist"
                )));
            }
            counts[m] += 1;
        }
        if let Some(r) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("mode {r} has no coordinates")));
        }
        Ok(ModalityMask {
            modes: modes.into_iter().map(|m| m as u16).collect(),
            num_modes,
            counts,
        })
    }

    /// Build from an explicit `R x N` binary matrix; every column must sum to
    /// exactly one.
    pub fn from_matrix(rows: &[Vec<bool>]) -> Result<Self> {
        let r = rows.len();
        let n = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != n) {
            return Err(Error::invalid("modality matrix rows differ in length"));
        }
        let mut modes = Vec::with_capacity(n);
        for i in 0..n {
            let members: Vec<usize> = (0..r).filter(|&k| rows[k][i]).collect();
            if members.len() != 1 {
                return Err(Error::invalid(format!(
                    "column {i} of the modality matrix sums to {}",
                    members.len()
                )));
            }
            modes.push(members[0]);
        }
        ModalityMask::from_modes(modes, r)
    }

    /// One group per image channel for a `side x side` patch.
    pub fn per_channel(side: usize) -> Self {
        let cells = side * side;
        let modes = (0..NUM_CHANNELS * cells).map(|i| i / cells).collect();
        ModalityMask::from_modes(modes, NUM_CHANNELS).expect("valid by construction")
    }

    /// Groups made of whole channels, e.g. `[[Depth], [Y, U, V], [nX, nY, nZ]]`.
    /// Every channel must appear in exactly one group.
    pub fn channel_groups(side: usize, groups: &[Vec<Channel>]) -> Result<Self> {
        let mut group_of = [usize::MAX; NUM_CHANNELS];
        for (g, chans) in groups.iter().enumerate() {
            for c in chans {
                if group_of[c.index()] != usize::MAX {
                    return Err(Error::invalid(format!("channel {} in two groups", c.name())));
                }
                group_of[c.index()] = g;
            }
        }
        if let Some(c) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(Error::invalid(format!(
                "channel {} is in no group",
                Channel::ALL[c].name()
            )));
        }
        let cells = side * side;
        let modes = (0..NUM_CHANNELS * cells)
            .map(|i| group_of[i / cells])
            .collect();
        ModalityMask::from_modes(modes, groups.len())
    }

    /// Every coordinate in its own group. Used for layers whose inputs have no
    /// modality structure, where the grouped penalties reduce to per-weight
    /// penalties.
    pub fn singletons(n: usize) -> Self {
        ModalityMask::from_modes((0..n).collect(), n.max(1)).expect("valid by construction")
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    #[inline]
    pub fn mode_of(&self, i: usize) -> usize {
        self.modes[i] as usize
    }

    /// Entry `S[r][i]`.
    pub fn s(&self, r: usize, i: usize) -> bool {
        self.mode_of(i) == r
    }

    /// Row sums of `S`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn to_matrix(&self) -> Vec<Vec<bool>> {
        (0..self.num_modes)
            .map(|r| (0..self.len()).map(|i| self.s(r, i)).collect())
            .collect()
    }
}

/// A network input: values `x`, per-coordinate mask `mu` (true = masked in)
/// and, once [`mask_scale`] has run, the per-mode factors `psi`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchInput {
    pub x: Vec<f64>,
    pub mu: Vec<bool>,
    /// Empty until the patch has been scaled.
    pub psi: Vec<f64>,
    pub source: GraspRect,
}

impl PatchInput {
    /// Values before mode scaling (`x / psi` per mode); a copy of `x` when the
    /// patch has not been scaled.
    pub fn unscaled(&self, modality: &ModalityMask) -> Vec<f64> {
        if self.psi.is_empty() {
            return self.x.clone();
        }
        self.x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let psi = self.psi[modality.mode_of(i)];
                if self.mu[i] && psi > 0.0 {
                    v / psi
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Per-coordinate scale factor `psi[mode(i)]`, zero where masked out.
    pub fn coordinate_scale(&self, modality: &ModalityMask) -> Vec<f64> {
        (0..self.x.len())
            .map(|i| {
                if !self.mu[i] {
                    0.0
                } else if self.psi.is_empty() {
                    1.0
                } else {
                    self.psi[modality.mode_of(i)]
                }
            })
            .collect()
    }
}

/// Sample the rectangle into a `side x side x 7` patch. See the module docs
/// for geometry and layout.
pub fn extract_patch(image: &RgbdImage, rect: &GraspRect, side: usize) -> Result<PatchInput> {
    let n = NUM_CHANNELS * side * side;
    let mut x = vec![0.0; n];
    let mut mu = vec![false; n];
    extract_into(image, rect, side, &mut x, &mut mu)?;
    Ok(PatchInput {
        x,
        mu,
        psi: Vec::new(),
        source: *rect,
    })
}

/// Allocation-free form of [`extract_patch`]. `x` and `mu` must have length
/// `7 * side^2`; they are fully overwritten.
pub fn extract_into(
    image: &RgbdImage,
    rect: &GraspRect,
    side: usize,
    x: &mut [f64],
    mu: &mut [bool],
) -> Result<()> {
    if side == 0 {
        return Err(Error::invalid("patch side must be positive"));
    }
    let cells = side * side;
    if x.len() != NUM_CHANNELS * cells || mu.len() != NUM_CHANNELS * cells {
        return Err(Error::DimensionMismatch {
            context: "patch buffer",
            expected: NUM_CHANNELS * cells,
            actual: x.len(),
        });
    }
    let (w, h) = (image.width(), image.height());
    if !rect.intersects_image(w, h) {
        return Err(Error::RectOutsideImage {
            width: w,
            height: h,
        });
    }
    x.fill(0.0);
    mu.fill(false);

    let pitch = rect.len.max(rect.wid) / side as f64;
    let tol = 1e-9 * pitch;
    let (u, v) = (rect.axis_u(), rect.axis_v());
    let half = 0.5 * side as f64;
    let planes = image.channels();
    let valid = image.valid();
    for row in 0..side {
        let off_v = (row as f64 + 0.5 - half) * pitch;
        if off_v.abs() > 0.5 * rect.wid + tol {
            continue;
        }
        for col in 0..side {
            let off_u = (col as f64 + 0.5 - half) * pitch;
            if off_u.abs() > 0.5 * rect.len + tol {
                continue;
            }
            let px = rect.cx + off_u * u.x + off_v * v.x;
            let py = rect.cy + off_u * u.y + off_v * v.y;
            let Some(taps) = bilinear_taps(px, py, w, h, valid) else {
                continue;
            };
            let cell = row * side + col;
            for (c, plane) in planes.iter().enumerate() {
                let mut acc = 0.0;
                for &(idx, wt) in taps.iter().flatten() {
                    acc += wt * plane[idx];
                }
                x[c * cells + cell] = acc;
                mu[c * cells + cell] = true;
            }
        }
    }
    Ok(())
}

/// Bilinear taps with nonzero weight at `(px, py)`; `None` when any of them
/// falls outside the image or on an invalid pixel.
#[inline]
fn bilinear_taps(
    px: f64,
    py: f64,
    w: usize,
    h: usize,
    valid: &[bool],
) -> Option<[Option<(usize, f64)>; 4]> {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let mut taps = [None; 4];
    let corners = [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
        (1.0, 0.0, fx * (1.0 - fy)),
        (0.0, 1.0, (1.0 - fx) * fy),
        (1.0, 1.0, fx * fy),
    ];
    for (k, &(dx, dy, wt)) in corners.iter().enumerate() {
        if wt == 0.0 {
            continue;
        }
        let xi = x0 + dx;
        let yi = y0 + dy;
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            return None;
        }
        let idx = yi as usize * w + xi as usize;
        if !valid[idx] {
            return None;
        }
        taps[k] = Some((idx, wt));
    }
    Some(taps)
}

/// Per-mode scale factors `min(|S_r| / |S_r masked in|, c)`. A mode that is
/// entirely masked out gets factor 0.
pub fn scale_factors(mu: &[bool], modality: &ModalityMask, cap: f64) -> Result<Vec<f64>> {
    if mu.len() != modality.len() {
        return Err(Error::DimensionMismatch {
            context: "mask vs modality matrix",
            expected: modality.len(),
            actual: mu.len(),
        });
    }
    if !(cap >= 1.0) {
        return Err(Error::invalid(format!("scale cap must be >= 1, got {cap}")));
    }
    let mut inside = vec![0usize; modality.num_modes()];
    for (i, &m) in mu.iter().enumerate() {
        if m {
            inside[modality.mode_of(i)] += 1;
        }
    }
    Ok(modality
        .counts()
        .iter()
        .zip(&inside)
        .map(|(&total, &kept)| {
            if kept == 0 {
                0.0
            } else {
                (total as f64 / kept as f64).min(cap)
            }
        })
        .collect())
}

/// Apply per-mode scaling. Pass `f64::INFINITY` as `cap` for the uncapped
/// factor.
pub fn mask_scale(patch: &PatchInput, modality: &ModalityMask, cap: f64) -> Result<PatchInput> {
    let mut out = patch.clone();
    scale_in_place(&mut out.x, &out.mu, modality, cap).map(|psi| {
        out.psi = psi;
        out
    })
}

pub(crate) fn scale_in_place(
    x: &mut [f64],
    mu: &[bool],
    modality: &ModalityMask,
    cap: f64,
) -> Result<Vec<f64>> {
    let psi = scale_factors(mu, modality, cap)?;
    for (i, xi) in x.iter_mut().enumerate() {
        *xi = if mu[i] { *xi * psi[modality.mode_of(i)] } else { 0.0 };
    }
    Ok(psi)
}

/// Per-channel whitening statistics, fitted on the training patches and
/// stored with each model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and standard deviation per channel over masked-in cells. A
    /// channel with (near) zero spread keeps unit scale.
    pub fn fit(patches: &[PatchInput], side: usize) -> Self {
        let cells = side * side;
        let mut sum = [0.0; NUM_CHANNELS];
        let mut sq = [0.0; NUM_CHANNELS];
        let mut count = [0usize; NUM_CHANNELS];
        for p in patches {
            for (i, (&v, &m)) in p.x.iter().zip(&p.mu).enumerate() {
                if m {
                    let c = i / cells;
                    sum[c] += v;
                    sq[c] += v * v;
                    count[c] += 1;
                }
            }
        }
        let mut stats = NormStats::identity(NUM_CHANNELS);
        for c in 0..NUM_CHANNELS {
            if count[c] == 0 {
                continue;
            }
            let m = sum[c] / count[c] as f64;
            let var = (sq[c] / count[c] as f64 - m * m).max(0.0);
            stats.mean[c] = m;
            stats.std[c] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        }
        stats
    }

    pub fn apply(&self, x: &mut [f64], mu: &[bool], side: usize) {
        let cells = side * side;
        for (i, xi) in x.iter_mut().enumerate() {
            let c = i / cells;
            *xi = if mu[i] {
                (*xi - self.mean[c]) / self.std[c]
            } else {
                0.0
            };
        }
    }
}

/// Everything needed to turn a rectangle into a network input: patch side,
/// modality grouping, normalisation and the scale cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub side: usize,
    pub modality: ModalityMask,
    pub norm: NormStats,
    pub cap: f64,
}

impl InputSpec {
    pub fn new(side: usize) -> Self {
        InputSpec {
            side,
            modality: ModalityMask::per_channel(side),
            norm: NormStats::identity(NUM_CHANNELS),
            cap: DEFAULT_SCALE_CAP,
        }
    }

    pub fn input_len(&self) -> usize {
        NUM_CHANNELS * self.side * self.side
    }

    /// Extract, normalise and mode-scale.
    pub fn featurize(&self, image: &RgbdImage, rect: &GraspRect) -> Result<PatchInput> {
        let mut p = extract_patch(image, rect, self.side)?;
        p.psi = self.finish(&mut p.x, &p.mu)?;
        Ok(p)
    }

    /// In-place tail of [`featurize`](Self::featurize) for an extracted
    /// patch; returns the scale factors.
    pub fn finish(&self, x: &mut [f64], mu: &[bool]) -> Result<Vec<f64>> {
        self.norm.apply(x, mu, self.side);
        scale_in_place(x, mu, &self.modality, self.cap)
    }

    pub fn featurize_into(
        &self,
        image: &RgbdImage,
        rect: &GraspRect,
        x: &mut [f64],
        mu: &mut [bool],
    ) -> Result<()> {
        extract_into(image, rect, self.side, x, mu)?;
        self.finish(x, mu).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn constant_image(w: usize, h: usize, values: [f64; NUM_CHANNELS]) -> RgbdImage {
        let planes = values.map(|v| vec![v; w * h]);
        RgbdImage::from_planes(w, h, planes, vec![true; w * h]).unwrap()
    }

    #[test]
    fn square_rect_fills_field() {
        let img = constant_image(64, 64, [1.0, 0.5, 0.1, -0.1, 0.0, 0.0, 1.0]);
        let r = GraspRect::new(32.0, 32.0, 0.0, 20.0, 20.0).unwrap();
        let p = extract_patch(&img, &r, 24).unwrap();
        assert!(p.mu.iter().all(|&m| m));
    }

    #[test]
    fn long_rect_masks_half_the_rows() {
        let img = constant_image(64, 64, [1.0; NUM_CHANNELS]);
        let r = GraspRect::new(32.0, 32.0, 0.3, 40.0, 20.0).unwrap();
        let p = extract_patch(&img, &r, 24).unwrap();
        let cells = 24 * 24;
        for c in 0..NUM_CHANNELS {
            let rows_in = (0..24)
                .filter(|row| p.mu[c * cells + row * 24])
                .count();
            assert!((11..=13).contains(&rows_in), "{rows_in}");
            let kept = p.mu[c * cells..(c + 1) * cells].iter().filter(|&&m| m).count();
            assert_eq!(kept, rows_in * 24);
        }
        // Masked-out cells hold zero.
        assert!(p.x.iter().zip(&p.mu).all(|(&v, &m)| m || v == 0.0));
    }

    #[test]
    fn constant_channel_any_rotation() {
        let img = constant_image(80, 80, [0.7, 0.3, -0.2, 0.4, 0.1, 0.2, 0.9]);
        for k in 0..12 {
            let r = GraspRect::new(40.3, 39.6, k as f64 * 0.27, 30.0, 17.0).unwrap();
            let p = extract_patch(&img, &r, 24).unwrap();
            for (i, (&v, &m)) in p.x.iter().zip(&p.mu).enumerate() {
                if m {
                    let expect = [0.7, 0.3, -0.2, 0.4, 0.1, 0.2, 0.9][i / 576];
                    assert_abs_diff_eq!(v, expect, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn invalid_pixels_are_masked() {
        let mut img = constant_image(40, 40, [1.0; NUM_CHANNELS]);
        for y in 0..40 {
            img.valid_mut()[y * 40 + 20] = false;
        }
        let r = GraspRect::new(20.0, 20.0, 0.0, 24.0, 24.0).unwrap();
        let p = extract_patch(&img, &r, 24).unwrap();
        let masked = p.mu.iter().filter(|&&m| !m).count();
        assert!(masked > 0);
        // Whole columns go, identically in every channel.
        assert_eq!(masked % (NUM_CHANNELS * 24), 0);
    }

    #[test]
    fn errors() {
        let img = constant_image(10, 10, [0.0; NUM_CHANNELS]);
        let outside = GraspRect::new(100.0, 100.0, 0.0, 4.0, 4.0).unwrap();
        assert!(matches!(
            extract_patch(&img, &outside, 24),
            Err(Error::RectOutsideImage { .. })
        ));
        let inside = GraspRect::new(5.0, 5.0, 0.0, 4.0, 4.0).unwrap();
        assert!(extract_patch(&img, &inside, 0).is_err());
    }

    fn half_masked(cells: usize) -> (PatchInput, ModalityMask) {
        let s = ModalityMask::from_modes(vec![0; cells], 1).unwrap();
        let mu: Vec<bool> = (0..cells).map(|i| i < cells / 2).collect();
        let x = mu.iter().map(|&m| if m { 3.0 } else { 0.0 }).collect();
        let rect = GraspRect::new(0.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        (
            PatchInput {
                x,
                mu,
                psi: vec![],
                source: rect,
            },
            s,
        )
    }

    #[test]
    fn scale_factor_examples() {
        let (p, s) = half_masked(576);
        let full = PatchInput {
            mu: vec![true; 576],
            x: vec![3.0; 576],
            ..p.clone()
        };
        let id = mask_scale(&full, &s, 4.0).unwrap();
        assert_eq!(id.psi, vec![1.0]);
        assert_eq!(id.x, full.x);
        assert_eq!(mask_scale(&p, &s, 4.0).unwrap().psi, vec![2.0]);
        let capped = mask_scale(&p, &s, 1.5).unwrap();
        assert_eq!(capped.psi, vec![1.5]);
        assert_abs_diff_eq!(capped.x[0], 4.5);
    }

    #[test]
    fn fully_masked_mode_gets_zero() {
        let s = ModalityMask::from_modes(vec![0, 0, 1, 1], 2).unwrap();
        let rect = GraspRect::new(0.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        let p = PatchInput {
            x: vec![1.0, 1.0, 0.0, 0.0],
            mu: vec![true, true, false, false],
            psi: vec![],
            source: rect,
        };
        let out = mask_scale(&p, &s, 2.0).unwrap();
        assert_eq!(out.psi, vec![1.0, 0.0]);
        assert_eq!(out.x, vec![1.0, 1.0, 0.0, 0.0]);
        assert!(mask_scale(&p, &s, 0.5).is_err());
    }

    #[test]
    fn modality_matrix_checks() {
        assert!(ModalityMask::from_matrix(&[vec![true, false], vec![true, true]]).is_err());
        let m = ModalityMask::from_matrix(&[vec![true, false, true], vec![false, true, false]])
            .unwrap();
        assert_eq!(m.counts(), &[2, 1]);
        assert_eq!(m.to_matrix()[1], vec![false, true, false]);
        let pc = ModalityMask::per_channel(24);
        assert_eq!(pc.len(), 4032);
        assert!(pc.counts().iter().all(|&c| c == 576));
        let g = ModalityMask::channel_groups(
            2,
            &[
                vec![Channel::Depth],
                vec![Channel::Y, Channel::U, Channel::V],
                vec![Channel::NormalX, Channel::NormalY, Channel::NormalZ],
            ],
        )
        .unwrap();
        assert_eq!(g.counts(), &[4, 12, 12]);
        assert!(ModalityMask::channel_groups(2, &[vec![Channel::Depth]]).is_err());
    }

    #[test]
    fn norm_stats_whiten_masked_in_cells() {
        let img = constant_image(40, 40, [2.0, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let r = GraspRect::new(20.0, 20.0, 0.0, 20.0, 10.0).unwrap();
        let p = extract_patch(&img, &r, 8).unwrap();
        let stats = NormStats::fit(std::slice::from_ref(&p), 8);
        assert_abs_diff_eq!(stats.mean[0], 2.0, epsilon = 1e-12);
        assert_eq!(stats.std[0], 1.0);
        let mut x = p.x.clone();
        stats.apply(&mut x, &p.mu, 8);
        assert!(x.iter().all(|v| v.abs() < 1e-12));
    }
}
