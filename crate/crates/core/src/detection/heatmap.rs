use super::{enumerate_rects, Gripper, Scorer, SearchSpace};
use crate::rgbd::RgbdImage;
use crate::Result;

/// Per-pixel maximum score over candidates whose left (right) plate centre
/// rounds to that pixel. `None` marks pixels no candidate reaches.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub left: Vec<Option<f64>>,
    pub right: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn max_score(&self) -> Option<f64> {
        self.left
            .iter()
            .chain(&self.right)
            .flatten()
            .copied()
            .reduce(f64::max)
    }

    /// 8-bit shades: absent pixels 0, scores map to `1 + round(254 p)`.
    pub fn shades(plane: &[Option<f64>]) -> Vec<u8> {
        plane
            .iter()
            .map(|v| match v {
                None => 0,
                Some(p) => 1 + (p.clamp(0.0, 1.0) * 254.0).round() as u8,
            })
            .collect()
    }
}

fn pixel(x: f64, y: f64, width: usize, height: usize) -> Option<usize> {
    let (px, py) = (x.round(), y.round());
    if px < 0.0 || py < 0.0 || px >= width as f64 || py >= height as f64 {
        return None;
    }
    Some(py as usize * width + px as usize)
}

/// Score every candidate of `space` restricted to `gripper` and keep, per
/// pixel, the best score of any grasp with a plate centred there.
pub fn score_heatmap(
    net: &dyn Scorer,
    image: &RgbdImage,
    space: &SearchSpace,
    gripper: &Gripper,
) -> Result<Heatmap> {
    let space = SearchSpace {
        gripper: *gripper,
        ..space.clone()
    };
    let (w, h) = (image.width(), image.height());
    let rects = enumerate_rects(w, h, &space)?;
    let scores = net.probabilities(image, &rects)?;
    let mut map = Heatmap {
        width: w,
        height: h,
        left: vec![None; w * h],
        right: vec![None; w * h],
    };
    for (rect, &s) in rects.iter().zip(&scores) {
        let (l, r) = rect.plate_centers();
        for (p, plane) in [(l, &mut map.left), (r, &mut map.right)] {
            if let Some(i) = pixel(p.x, p.y, w, h) {
                let cell = &mut plane[i];
                if cell.is_none_or(|old| s > old) {
                    *cell = Some(s);
                }
            }
        }
    }
    Ok(map)
}
