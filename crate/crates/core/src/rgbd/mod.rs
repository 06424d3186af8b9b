//! Seven-channel RGB-D rasters and annotated scenes.
//!
//! Channel order is fixed: depth, Y, U, V, then the x, y and z components of
//! the surface normal. YUV uses the BT.601 full-range matrix, so Y lies in
//! `[0, 1]` and U, V in `[-0.5, 0.5]`. Missing depth is never inpainted; it is
//! carried by the per-pixel `valid` mask and turns into masked-out patch
//! coordinates downstream.

pub mod cornell;
mod normals;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use normals::{estimate_normals, NormalPlanes, DEFAULT_NORMAL_WINDOW};

use crate::rect::GraspRect;
use crate::{Error, Result};

pub const NUM_CHANNELS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Depth = 0,
    Y = 1,
    U = 2,
    V = 3,
    NormalX = 4,
    NormalY = 5,
    NormalZ = 6,
}

impl Channel {
    pub const ALL: [Channel; NUM_CHANNELS] = [
        Channel::Depth,
        Channel::Y,
        Channel::U,
        Channel::V,
        Channel::NormalX,
        Channel::NormalY,
        Channel::NormalZ,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Depth => "depth",
            Channel::Y => "y",
            Channel::U => "u",
            Channel::V => "v",
            Channel::NormalX => "nx",
            Channel::NormalY => "ny",
            Channel::NormalZ => "nz",
        }
    }

    pub fn from_name(s: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn is_normal(self) -> bool {
        matches!(self, Channel::NormalX | Channel::NormalY | Channel::NormalZ)
    }
}

/// BT.601 full-range RGB to YUV for one pixel with components in `[0, 1]`.
pub fn rgb_to_yuv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let u = -0.168736 * r - 0.331264 * g + 0.5 * b;
    let v = 0.5 * r - 0.418688 * g - 0.081312 * b;
    (y, u, v)
}

/// Inverse of [`rgb_to_yuv`], clamped to `[0, 1]`.
pub fn yuv_to_rgb(y: f64, u: f64, v: f64) -> (f64, f64, f64) {
    let r = y + 1.402 * v;
    let g = y - 0.344136 * u - 0.714136 * v;
    let b = y + 1.772 * u;
    (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0))
}

/// Plane-wise conversion. All three planes must share a length.
pub fn rgb_planes_to_yuv(r: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = r.len().min(g.len()).min(b.len());
    let mut y = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let (yy, uu, vv) = rgb_to_yuv(r[i], g[i], b[i]);
        y.push(yy);
        u.push(uu);
        v.push(vv);
    }
    (y, u, v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbdImage {
    width: usize,
    height: usize,
    channels: [Vec<f64>; NUM_CHANNELS],
    valid: Vec<bool>,
}

impl RgbdImage {
    /// Assemble an image from its planes, checking that every plane has
    /// `width * height` entries.
    pub fn from_planes(
        width: usize,
        height: usize,
        channels: [Vec<f64>; NUM_CHANNELS],
        valid: Vec<bool>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        let n = width * height;
        for plane in channels.iter() {
            if plane.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "image plane",
                    expected: n,
                    actual: plane.len(),
                });
            }
        }
        if valid.len() != n {
            return Err(Error::DimensionMismatch {
                context: "validity mask",
                expected: n,
                actual: valid.len(),
            });
        }
        Ok(RgbdImage {
            width,
            height,
            channels,
            valid,
        })
    }

    /// Build from depth and RGB planes: converts color to YUV and estimates
    /// normals with the given window. Pixels where the normal fit fails are
    /// marked invalid.
    pub fn from_depth_rgb(
        width: usize,
        height: usize,
        depth: Vec<f64>,
        valid: Vec<bool>,
        rgb: [&[f64]; 3],
        normal_window: usize,
    ) -> Result<Self> {
        let n = width * height;
        for (ctx, len) in [
            ("depth plane", depth.len()),
            ("validity mask", valid.len()),
            ("red plane", rgb[0].len()),
            ("green plane", rgb[1].len()),
            ("blue plane", rgb[2].len()),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    context: ctx,
                    expected: n,
                    actual: len,
                });
            }
        }
        let (y, u, v) = rgb_planes_to_yuv(rgb[0], rgb[1], rgb[2]);
        let normals = estimate_normals(width, height, &depth, &valid, normal_window)?;
        RgbdImage::from_planes(
            width,
            height,
            [depth, y, u, v, normals.nx, normals.ny, normals.nz],
            normals.valid,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, c: Channel) -> &[f64] {
        &self.channels[c.index()]
    }

    pub fn plane_mut(&mut self, c: Channel) -> &mut [f64] {
        &mut self.channels[c.index()]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_mut(&mut self) -> &mut [bool] {
        &mut self.valid
    }

    #[inline]
    pub fn get(&self, c: Channel, x: usize, y: usize) -> f64 {
        self.channels[c.index()][y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub(crate) fn channels(&self) -> &[Vec<f64>; NUM_CHANNELS] {
        &self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedScene {
    pub image: RgbdImage,
    pub positives: Vec<GraspRect>,
    pub negatives: Vec<GraspRect>,
    pub object_id: u32,
    pub image_id: u32,
}

impl AnnotatedScene {
    /// Iterate over all annotated rectangles with their labels, positives
    /// first.
    pub fn labeled_rects(&self) -> impl Iterator<Item = (GraspRect, bool)> + '_ {
        self.positives
            .iter()
            .map(|r| (*r, true))
            .chain(self.negatives.iter().map(|r| (*r, false)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn yuv_reference_points() {
        assert_eq!(rgb_to_yuv(0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
        let (y, u, v) = rgb_to_yuv(1.0, 1.0, 1.0);
        assert_abs_diff_eq!(y, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        let (y, u, v) = rgb_to_yuv(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(y, 0.299, epsilon = 1e-12);
        assert_abs_diff_eq!(u, -0.168736, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn yuv_ranges_and_inverse() {
        let steps = [0.0, 0.25, 0.5, 0.75, 1.0];
        for &r in &steps {
            for &g in &steps {
                for &b in &steps {
                    let (y, u, v) = rgb_to_yuv(r, g, b);
                    assert!((0.0..=1.0 + 1e-12).contains(&y));
                    assert!(u.abs() <= 0.5 + 1e-12 && v.abs() <= 0.5 + 1e-12);
                    let (r2, g2, b2) = yuv_to_rgb(y, u, v);
                    assert_abs_diff_eq!(r, r2, epsilon = 1e-5);
                    assert_abs_diff_eq!(g, g2, epsilon = 1e-5);
                    assert_abs_diff_eq!(b, b2, epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn plane_size_checked() {
        let ok = || vec![0.0; 6];
        let planes = [ok(), ok(), ok(), ok(), ok(), ok(), vec![0.0; 5]];
        assert!(matches!(
            RgbdImage::from_planes(3, 2, planes, vec![true; 6]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
