use crate::{Error, Result};

pub const DEFAULT_NORMAL_WINDOW: usize = 7;

/// Output of [`estimate_normals`]: three component planes and the updated
/// validity mask.
#[derive(Clone, Debug)]
pub struct NormalPlanes {
    pub nx: Vec<f64>,
    pub ny: Vec<f64>,
    pub nz: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Per-pixel surface normals from a least-squares plane fit
/// `depth = a*x + b*y + c` over the valid pixels of a `window x window`
/// neighbourhood. The normal is `(-a, -b, 1)` normalised, so a flat plane
/// facing the camera yields `(0, 0, 1)` and `nz > 0` always.
///
/// A pixel becomes invalid when its own depth is invalid, when fewer than
/// three neighbours are valid, or when the valid neighbours are collinear.
/// Invalid pixels get a zero normal.
pub fn estimate_normals(
    width: usize,
    height: usize,
    depth: &[f64],
    valid: &[bool],
    window: usize,
) -> Result<NormalPlanes> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "normal window must be odd and >= 3, got {window}"
        )));
    }
    let n = width * height;
    if depth.len() != n || valid.len() != n {
        return Err(Error::DimensionMismatch {
            context: "normal estimation input",
            expected: n,
            actual: depth.len().min(valid.len()),
        });
    }
    let half = (window / 2) as isize;
    let mut out = NormalPlanes {
        nx: vec![0.0; n],
        ny: vec![0.0; n],
        nz: vec![0.0; n],
        valid: vec![false; n],
    };
    for y in 0..height as isize {
        for x in 0..width as isize {
            let idx = y as usize * width + x as usize;
            if !valid[idx] || !depth[idx].is_finite() {
                continue;
            }
            let mut pts = Vec::with_capacity(window * window);
            for dy in -half..=half {
                let yy = y + dy;
                if yy < 0 || yy >= height as isize {
                    continue;
                }
                for dx in -half..=half {
                    let xx = x + dx;
                    if xx < 0 || xx >= width as isize {
                        continue;
                    }
                    let j = yy as usize * width + xx as usize;
                    if valid[j] && depth[j].is_finite() {
                        pts.push((dx as f64, dy as f64, depth[j]));
                    }
                }
            }
            if let Some((a, b)) = fit_plane_slopes(&pts) {
                let norm = (a * a + b * b + 1.0).sqrt();
                out.nx[idx] = -a / norm;
                out.ny[idx] = -b / norm;
                out.nz[idx] = 1.0 / norm;
                out.valid[idx] = true;
            }
        }
    }
    Ok(out)
}

/// Least-squares slopes `(a, b)` of `d = a*x + b*y + c`; `None` for fewer
/// than three points or a collinear configuration.
fn fit_plane_slopes(pts: &[(f64, f64, f64)]) -> Option<(f64, f64)> {
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let (mut mx, mut my, mut md) = (0.0, 0.0, 0.0);
    for &(x, y, d) in pts {
        mx += x;
        my += y;
        md += d;
    }
    mx /= m;
    my /= m;
    md /= m;
    let (mut sxx, mut sxy, mut syy, mut sxd, mut syd) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y, d) in pts {
        let (x, y, d) = (x - mx, y - my, d - md);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        sxd += x * d;
        syd += y * d;
    }
    let det = sxx * syy - sxy * sxy;
    let scale = sxx + syy;
    if !(det > 1e-9 * scale * scale) {
        return None;
    }
    let a = (sxd * syy - syd * sxy) / det;
    let b = (syd * sxx - sxd * sxy) / det;
    Some((a, b))
}
