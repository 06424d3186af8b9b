//! Reader and writer for the Cornell grasping dataset layout.
//!
//! A dataset directory (searched recursively) holds, per image id `NNNN`:
//!
//! - `pcdNNNNr.png`: the color image,
//! - `pcdNNNN.txt`: an ASCII PCD point cloud whose `index` field is the
//!   row-major pixel index and whose `z` field is used as depth,
//! - `pcdNNNNcpos.txt` / `pcdNNNNcneg.txt`: grasp rectangles, four `x y`
//!   vertex lines per rectangle.
//!
//! The dataset root additionally holds `object_ids.txt` with one
//! `<image_id> <object_id>` pair per line, used for object-wise splits.
//!
//! Synthetic scenes are written in the same layout by [`save_scenes`]. Color
//! is quantised to 8 bits on the way out and normals are recomputed from
//! depth on the way in.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;

use super::{yuv_to_rgb, AnnotatedScene, Channel, RgbdImage, DEFAULT_NORMAL_WINDOW};
use crate::rect::{GraspRect, Point};
use crate::{Error, Result};

pub const OBJECT_ID_FILE: &str = "object_ids.txt";

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parse rectangle text: groups of four `x y` lines. Rectangles with a NaN
/// vertex are skipped with a warning; a malformed line is an error carrying
/// its 1-based line number.
pub fn parse_rects(path: &Path, text: &str) -> Result<Vec<GraspRect>> {
    let mut rects = Vec::new();
    let mut verts: Vec<Point> = Vec::with_capacity(4);
    let mut last_line = 0;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        last_line = lineno;
        let mut fields = line.split_whitespace();
        let mut next = || -> Result<f64> {
            let tok = fields
                .next()
                .ok_or_else(|| parse_err(path, lineno, "expected two coordinates"))?;
            tok.parse::<f64>()
                .map_err(|_| parse_err(path, lineno, format!("invalid number {tok:?}")))
        };
        let x = next()?;
        let y = next()?;
        if fields.next().is_some() {
            return Err(parse_err(path, lineno, "expected exactly two coordinates"));
        }
        verts.push(Point::new(x, y));
        if verts.len() == 4 {
            let quad = [verts[0], verts[1], verts[2], verts[3]];
            verts.clear();
            if quad.iter().any(|p| p.x.is_nan() || p.y.is_nan()) {
                warn!(
                    "{}: rectangle ending at line {lineno} has a NaN vertex, skipped",
                    path.display()
                );
                continue;
            }
            match GraspRect::from_vertices(&quad) {
                Ok(r) => rects.push(r),
                Err(e) => {
                    return Err(parse_err(path, lineno, format!("bad rectangle: {e}")));
                }
            }
        }
    }
    if !verts.is_empty() {
        return Err(parse_err(
            path,
            last_line,
            "rectangle has fewer than four vertices",
        ));
    }
    Ok(rects)
}

pub fn read_rects(path: &Path) -> Result<Vec<GraspRect>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rects(path, &text)
}

/// Serialise rectangles as vertex lines. Floats are written in shortest
/// round-trip form so a read gives back the same corners.
pub fn format_rects(rects: &[GraspRect]) -> String {
    let mut s = String::new();
    for r in rects {
        for p in r.corners() {
            s.push_str(&format!("{} {}\n", p.x, p.y));
        }
    }
    s
}

/// Parse an ASCII PCD file into a depth plane and validity mask for a
/// `width x height` image.
pub fn parse_pcd(path: &Path, text: &str, width: usize, height: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut depth = vec![0.0; width * height];
    let mut valid = vec![false; width * height];
    let mut z_col = None;
    let mut index_col = None;
    let mut in_data = false;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("FIELDS") => {
                    let names: Vec<&str> = parts.collect();
                    z_col = names.iter().position(|n| *n == "z");
                    index_col = names.iter().position(|n| *n == "index");
                }
                Some("DATA") => {
                    if parts.next() != Some("ascii") {
                        return Err(parse_err(path, lineno, "only ASCII point clouds are supported"));
                    }
                    if z_col.is_none() || index_col.is_none() {
                        return Err(parse_err(path, lineno, "FIELDS must include z and index"));
                    }
                    in_data = true;
                }
                _ => {}
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (zc, ic) = (z_col.unwrap_or(0), index_col.unwrap_or(0));
        if fields.len() <= zc.max(ic) {
            return Err(parse_err(path, lineno, "too few fields"));
        }
        let z: f64 = fields[zc]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("invalid depth {:?}", fields[zc])))?;
        let index: f64 = fields[ic]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("invalid index {:?}", fields[ic])))?;
        if index < 0.0 || index.fract() != 0.0 || index as usize >= width * height {
            return Err(parse_err(path, lineno, format!("pixel index {index} out of range")));
        }
        if z.is_finite() {
            depth[index as usize] = z;
            valid[index as usize] = true;
        }
    }
    if !in_data {
        return Err(parse_err(path, text.lines().count(), "missing DATA line"));
    }
    Ok((depth, valid))
}

/// ASCII PCD text for the valid pixels of a depth plane.
pub fn format_pcd(depth: &[f64], valid: &[bool], width: usize) -> String {
    let points: Vec<usize> = (0..depth.len()).filter(|&i| valid[i]).collect();
    let mut s = String::new();
    s.push_str("# .PCD v.7 - Point Cloud Data file format\n");
    s.push_str("VERSION .7\nFIELDS x y z rgb index\nSIZE 4 4 4 4 4\nTYPE F F F F U\nCOUNT 1 1 1 1 1\n");
    s.push_str(&format!("WIDTH {}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {}\nDATA ascii\n", points.len(), points.len()));
    for i in points {
        s.push_str(&format!("{} {} {} 0 {}\n", i % width, i / width, depth[i], i));
    }
    s
}

fn parse_object_ids(path: &Path) -> Result<BTreeMap<u32, u32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| parse_err(path, lineno + 1, format!("invalid id {s:?}")))
        };
        if nums.len() < 2 {
            return Err(parse_err(path, lineno + 1, "expected `<image_id> <object_id>`"));
        }
        map.insert(parse(nums[0])?, parse(nums[1])?);
    }
    Ok(map)
}

/// Image id encoded in a `pcdNNNNr.png` file name.
fn image_id_of(path: &Path) -> Option<u32> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix("pcd")?
        .strip_suffix("r.png")?
        .parse()
        .ok()
}

fn load_scene(png: &Path, image_id: u32, object_id: u32) -> Result<Option<AnnotatedScene>> {
    let dir = png.parent().unwrap_or(Path::new("."));
    let stem = format!("pcd{image_id:04}");
    let cloud = dir.join(format!("{stem}.txt"));
    let cpos = dir.join(format!("{stem}cpos.txt"));
    let cneg = dir.join(format!("{stem}cneg.txt"));
    for p in [&cloud, &cpos, &cneg] {
        if !p.exists() {
            warn!("image {image_id}: missing {}, scene skipped", p.display());
            return Ok(None);
        }
    }
    let rgb = image::open(png)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut planes = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            planes[c][i] = px[c] as f64 / 255.0;
        }
    }
    let cloud_text = fs::read_to_string(&cloud).map_err(|e| Error::io(&cloud, e))?;
    let (depth, valid) = parse_pcd(&cloud, &cloud_text, w, h)?;
    let image = RgbdImage::from_depth_rgb(
        w,
        h,
        depth,
        valid,
        [&planes[0], &planes[1], &planes[2]],
        DEFAULT_NORMAL_WINDOW,
    )?;
    Ok(Some(AnnotatedScene {
        image,
        positives: read_rects(&cpos)?,
        negatives: read_rects(&cneg)?,
        object_id,
        image_id,
    }))
}

/// Load every scene under `dir`, sorted by image id.
pub fn load_cornell(dir: &Path) -> Result<Vec<AnnotatedScene>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let objects = parse_object_ids(&dir.join(OBJECT_ID_FILE))?;
    let mut pngs: Vec<(u32, PathBuf)> = walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter_map(|e| image_id_of(e.path()).map(|id| (id, e.path().to_path_buf())))
        .collect();
    pngs.sort();
    let mut scenes = Vec::with_capacity(pngs.len());
    for (id, png) in pngs {
        let Some(&object_id) = objects.get(&id) else {
            warn!("image {id}: no entry in {OBJECT_ID_FILE}, scene skipped");
            continue;
        };
        if let Some(scene) = load_scene(&png, id, object_id)? {
            scenes.push(scene);
        }
    }
    Ok(scenes)
}

/// Write scenes into `dir` using the Cornell layout, including the object id
/// mapping.
pub fn save_scenes(dir: &Path, scenes: &[AnnotatedScene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |path: PathBuf, text: &str| fs::write(&path, text).map_err(|e| Error::io(path, e));
    let mut ids = fs::File::create(dir.join(OBJECT_ID_FILE)).map_err(|e| Error::io(dir, e))?;
    for scene in scenes {
        let img = &scene.image;
        let stem = format!("pcd{:04}", scene.image_id);
        let (w, h) = (img.width(), img.height());
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for (i, px) in rgb.pixels_mut().enumerate() {
            let (r, g, b) = yuv_to_rgb(
                img.plane(Channel::Y)[i],
                img.plane(Channel::U)[i],
                img.plane(Channel::V)[i],
            );
            *px = image::Rgb([to_u8(r), to_u8(g), to_u8(b)]);
        }
        rgb.save(dir.join(format!("{stem}r.png")))?;
        // Depth validity is what the point cloud stores; normal-fit failures
        // are recomputed on load.
        let depth_valid: Vec<bool> = img
            .plane(Channel::Depth)
            .iter()
            .map(|d| d.is_finite())
            .zip(img.valid())
            .map(|(f, v)| f && *v)
            .collect();
        write(
            dir.join(format!("{stem}.txt")),
            &format_pcd(img.plane(Channel::Depth), &depth_valid, w),
        )?;
        write(dir.join(format!("{stem}cpos.txt")), &format_rects(&scene.positives))?;
        write(dir.join(format!("{stem}cneg.txt")), &format_rects(&scene.negatives))?;
        writeln!(ids, "{} {}", scene.image_id, scene.object_id).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn handcrafted_cpos() {
        let r = parse_rects(Path::new("x"), "0 0\n4 0\n4 2\n0 2\n").unwrap();
        assert_eq!(r.len(), 1);
        assert_abs_diff_eq!(r[0].cx, 2.0);
        assert_abs_diff_eq!(r[0].cy, 1.0);
        assert_abs_diff_eq!(r[0].angle, 0.0);
        assert_abs_diff_eq!(r[0].len, 4.0);
        assert_abs_diff_eq!(r[0].wid, 2.0);
    }

    #[test]
    fn nan_vertex_skips_rect() {
        let text = "0 0\n4 0\nNaN NaN\n0 2\n10 10\n14 10\n14 12\n10 12\n";
        let r = parse_rects(Path::new("x"), text).unwrap();
        assert_eq!(r.len(), 1);
        assert_abs_diff_eq!(r[0].cx, 12.0);
    }

    #[test]
    fn malformed_line_names_line() {
        let err = parse_rects(Path::new("f.txt"), "0 0\n4 zero\n4 2\n0 2\n").unwrap_err();
        match err {
            Error::Parse { line, path, .. } => {
                assert_eq!(line, 2);
                assert_eq!(path, Path::new("f.txt"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_rects(Path::new("f"), "0 0\n1 0\n").is_err());
    }

    #[test]
    fn pcd_round_trip() {
        let depth = vec![1.5, 0.0, 2.25, 3.0];
        let valid = vec![true, false, true, true];
        let text = format_pcd(&depth, &valid, 2);
        let (d, v) = parse_pcd(Path::new("p"), &text, 2, 2).unwrap();
        assert_eq!(v, valid);
        assert_eq!(d, vec![1.5, 0.0, 2.25, 3.0]);
    }

    #[test]
    fn pcd_rejects_out_of_range_index() {
        let text = "FIELDS x y z rgb index\nDATA ascii\n0 0 1.0 0 9\n";
        assert!(matches!(
            parse_pcd(Path::new("p"), text, 2, 2),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
