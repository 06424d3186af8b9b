//! Raster output: RGB overlays of detected grasps and grey heatmaps.

use deepgrasp::rgbd::{yuv_to_rgb, Channel};
use deepgrasp::{GraspRect, RgbdImage};
use image::{GrayImage, Rgb, RgbImage};
use imageproc::drawing::draw_line_segment_mut;

/// Gripper plate edges.
pub const PLATE: Rgb<u8> = Rgb([0, 230, 0]);
/// The two edges joining the plates.
pub const JAW: Rgb<u8> = Rgb([230, 0, 0]);

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn rgb_of(image: &RgbdImage) -> RgbImage {
    let (w, h) = (image.width(), image.height());
    let (y, u, v) = (image.plane(Channel::Y), image.plane(Channel::U), image.plane(Channel::V));
    RgbImage::from_fn(w as u32, h as u32, |px, py| {
        let i = py as usize * w + px as usize;
        let (r, g, b) = yuv_to_rgb(y[i], u[i], v[i]);
        Rgb([to_u8(r), to_u8(g), to_u8(b)])
    })
}

fn thick_line(img: &mut RgbImage, a: (f32, f32), b: (f32, f32), color: Rgb<u8>) {
    for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
        draw_line_segment_mut(img, (a.0 + dx, a.1 + dy), (b.0 + dx, b.1 + dy), color);
    }
}

/// Draw `rect` over `base`. Edges 0-1 and 2-3 are the plates.
pub fn draw_grasp(base: &mut RgbImage, rect: &GraspRect) {
    let c = rect.corners().map(|p| (p.x as f32, p.y as f32));
    thick_line(base, c[1], c[2], JAW);
    thick_line(base, c[3], c[0], JAW);
    thick_line(base, c[0], c[1], PLATE);
    thick_line(base, c[2], c[3], PLATE);
}

pub fn overlay(image: &RgbdImage, rect: &GraspRect) -> RgbImage {
    let mut img = rgb_of(image);
    draw_grasp(&mut img, rect);
    img
}

pub fn gray(width: usize, height: usize, shades: Vec<u8>) -> GrayImage {
    GrayImage::from_raw(width as u32, height as u32, shades).expect("one shade per pixel")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(w: usize, h: usize) -> RgbdImage {
        let mut planes: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; w * h]);
        planes[Channel::Y.index()] = vec![0.5; w * h];
        RgbdImage::from_planes(w, h, planes, vec![true; w * h]).unwrap()
    }

    #[test]
    fn plates_and_jaws_get_their_own_colors() {
        let image = flat(60, 40);
        let rect = GraspRect::new(30.0, 20.0, 0.0, 20.0, 16.0).unwrap();
        let img = overlay(&image, &rect);
        assert_eq!(img.dimensions(), (60, 40));
        // Axis-aligned: plates run along x at y = 20 -+ 8, jaws along y at x = 20, 40.
        assert_eq!(*img.get_pixel(30, 12), PLATE);
        assert_eq!(*img.get_pixel(30, 28), PLATE);
        assert_eq!(*img.get_pixel(20, 20), JAW);
        assert_eq!(*img.get_pixel(40, 20), JAW);
        let grey = *img.get_pixel(5, 5);
        assert_eq!(grey[0], grey[1]);
        assert_eq!(grey[1], grey[2]);
    }
}
