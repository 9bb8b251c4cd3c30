//! On-disk formats: ASCII PLY point clouds, binary PPM images, camera and
//! scene JSON, and the per-view dataset layout.
//!
//! A dataset directory holds
//!
//! ```text
//! points.ply  cameras.json  scene.json
//! view_{k}_rgb.ppm  view_{k}_depth.bin  view_{k}_sem.bin
//! ```
//!
//! Depth maps are `[H, W]` and semantic maps `[H, W, S]` raw tensors.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use slpt_core::codec::PointCloud;
use slpt_core::diffcore::checkpoint::{load_tensor, save_tensor};
use slpt_core::diffcore::{Real, Tensor};
use slpt_core::geometry::Camera;
use slpt_core::losses::ViewTarget;
use slpt_core::{Error, Result};

use crate::config::SceneConfig;
use crate::scene::{SceneObject, SyntheticScene};

fn format_err(what: &str, detail: impl std::fmt::Display) -> Error {
    Error::Format(format!("{what}: {detail}"))
}

// ---------------------------------------------------------------------------
// PLY

/// Writes `x y z red green blue` per vertex; colours become `u8`.
pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property float {p}")?;
    }
    for p in ["red", "green", "blue"] {
        writeln!(w, "property uchar {p}")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        let c = cloud.color(i).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        writeln!(w, "{} {} {} {} {} {}", p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an ASCII PLY whose first element is `vertex` with float `x, y, z`
/// and optional `u8` `red, green, blue` (missing colours read as zero).
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| format_err("ply", "unexpected end of file"))?
            .map_err(Error::from)
    };
    if next()?.trim() != "ply" {
        return Err(format_err("ply", "missing magic"));
    }
    let mut count = None;
    let mut props: Vec<(String, String)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = next()?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => {}
            ["format", f, ..] => return Err(format_err("ply", format!("unsupported format {f}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(format_err("ply", "repeated vertex element"));
                }
                count = Some(n.parse::<usize>().map_err(|e| format_err("ply vertex count", e))?);
                in_vertex = true;
            }
            ["element", name, _] => {
                if count.is_none() {
                    return Err(format_err("ply", format!("element `{name}` before vertices")));
                }
                in_vertex = false;
            }
            ["property", ty, name] if in_vertex => props.push((ty.to_string(), name.to_string())),
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(format_err("ply header", line)),
        }
    }
    let count = count.ok_or_else(|| format_err("ply", "no vertex element"))?;
    let find = |n: &str| props.iter().position(|(_, p)| p == n);
    let xyz = ["x", "y", "z"].map(find);
    let rgb = ["red", "green", "blue"].map(find);
    if xyz.iter().any(Option::is_none) {
        return Err(format_err("ply", "vertices lack x, y or z"));
    }
    for c in rgb.iter().flatten() {
        if !matches!(props[*c].0.as_str(), "uchar" | "uint8") {
            return Err(format_err("ply", format!("colour `{}` is not uchar", props[*c].1)));
        }
    }
    let mut coords = Vec::with_capacity(count * 3);
    let mut colors = Vec::with_capacity(count * 3);
    for i in 0..count {
        let line = next()?;
        // single-precision properties parse as f32 so that values written
        // from f32 come back bit-exact
        let vals: Vec<f64> = line
            .split_whitespace()
            .zip(&props)
            .map(|(t, (ty, _))| match ty.as_str() {
                "float" | "float32" => t.parse::<f32>().map(f64::from),
                _ => t.parse::<f64>(),
            })
            .map(|v| v.map_err(|e| format_err(&format!("ply vertex {i}"), e)))
            .collect::<Result<_>>()?;
        if line.split_whitespace().count() != props.len() {
            return Err(format_err("ply", format!("vertex {i} has {} values", line.split_whitespace().count())));
        }
        if vals.len() != props.len() {
            return Err(format_err("ply", format!("vertex {i} has {} values", vals.len())));
        }
        coords.extend(xyz.map(|k| vals[k.unwrap()]));
        colors.extend(rgb.map(|k| k.map_or(0.0, |k| vals[k] / 255.0)));
    }
    PointCloud::new(coords, colors)
}

// ---------------------------------------------------------------------------
// PPM

/// Writes `[H·W, 3]` colours in `[0, 1]` as binary P6.
pub fn write_ppm<T: Real>(path: impl AsRef<Path>, width: usize, height: usize, rgb: &Tensor<T>) -> Result<()> {
    if rgb.shape() != [width * height, 3] {
        return Err(format_err("ppm", format!("image shape {:?} is not {}x{}x3", rgb.shape(), height, width)));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = rgb
        .data()
        .iter()
        .map(|v| (Real::to_f64(*v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a binary P6 with maxval 255 into `(width, height, [H·W, 3])`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Tensor<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("ppm", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(format_err("ppm", "not a binary P6 file"));
    }
    let mut num = || -> Result<usize> { token()?.parse().map_err(|e| format_err("ppm header", e)) };
    let (width, height, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(format_err("ppm", format!("maxval {maxval} unsupported")));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = bytes.get(pos + 1..).unwrap_or_default();
    let n = width * height * 3;
    if body.len() != n {
        return Err(format_err("ppm", format!("raster has {} bytes, expected {n}", body.len())));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((width, height, Tensor::new(vec![width * height, 3], data)?))
}

// ---------------------------------------------------------------------------
// Dataset

/// Scene description stored next to the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub config: SceneConfig,
    pub objects: Vec<SceneObject>,
    pub centroid: [f64; 3],
}

/// Ground-truth maps of one view as stored, `[H·W, ·]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewData {
    pub rgb: Tensor<f64>,
    pub depth: Tensor<f64>,
    pub sem: Tensor<f64>,
}

impl ViewData {
    pub fn target<T: Real>(&self) -> ViewTarget<T> {
        ViewTarget {
            rgb: self.rgb.cast(),
            depth: self.depth.cast(),
            sem: self.sem.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: SceneMeta,
    pub cloud: PointCloud,
    pub cameras: Vec<Camera>,
    pub views: Vec<ViewData>,
}

impl Dataset {
    /// Renders every camera of `scene` into an in-memory dataset.
    pub fn from_scene(scene: &SyntheticScene, config: &SceneConfig) -> Result<Self> {
        let views = scene
            .cameras
            .iter()
            .map(|cam| {
                let maps = scene.render(cam)?;
                // maps are stored as f32, keep memory and disk identical
                Ok(ViewData {
                    rgb: maps.rgb,
                    depth: maps.depth.cast::<f32>().cast(),
                    sem: maps.sem.cast::<f32>().cast(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            meta: SceneMeta {
                config: config.clone(),
                objects: scene.objects.clone(),
                centroid: scene.centroid,
            },
            cloud: scene.cloud.clone(),
            cameras: scene.cameras.clone(),
            views,
        })
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.meta.config.train_views()
    }

    pub fn heldout_indices(&self) -> Vec<usize> {
        self.meta.config.heldout.clone()
    }

    pub fn sem_dim(&self) -> usize {
        self.views.first().map_or(0, |v| v.sem.cols())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_ply(dir.join("points.ply"), &self.cloud)?;
        write_json(dir.join("cameras.json"), &self.cameras)?;
        write_json(dir.join("scene.json"), &self.meta)?;
        for (k, (view, cam)) in self.views.iter().zip(&self.cameras).enumerate() {
            let (h, w) = (cam.height, cam.width);
            write_ppm(dir.join(format!("view_{k}_rgb.ppm")), w, h, &view.rgb)?;
            save_tensor(dir.join(format!("view_{k}_depth.bin")), &view.depth.cast::<f32>().reshape(&[h, w])?)?;
            let s = view.sem.cols();
            save_tensor(dir.join(format!("view_{k}_sem.bin")), &view.sem.cast::<f32>().reshape(&[h, w, s])?)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cloud = read_ply(dir.join("points.ply"))?;
        let cameras: Vec<Camera> = read_json(dir.join("cameras.json"))?;
        let meta: SceneMeta = read_json(dir.join("scene.json"))?;
        let mut views = Vec::with_capacity(cameras.len());
        for (k, cam) in cameras.iter().enumerate() {
            cam.validate()?;
            let (w, h, rgb) = read_ppm(dir.join(format!("view_{k}_rgb.ppm")))?;
            if (w, h) != (cam.width, cam.height) {
                return Err(format_err("dataset", format!("view {k} image is {w}x{h}, camera says otherwise")));
            }
            let depth: Tensor<f32> = load_tensor(dir.join(format!("view_{k}_depth.bin")))?;
            let sem: Tensor<f32> = load_tensor(dir.join(format!("view_{k}_sem.bin")))?;
            if depth.shape() != [h, w] || sem.rank() != 3 || sem.shape()[..2] != [h, w] {
                return Err(format_err("dataset", format!("view {k} maps do not match the camera")));
            }
            let s = sem.shape()[2];
            views.push(ViewData {
                rgb,
                depth: depth.cast::<f64>().reshape(&[h * w, 1])?,
                sem: sem.cast::<f64>().reshape(&[h * w, s])?,
            });
        }
        if meta.config.views != cameras.len() {
            return Err(format_err("dataset", "camera count differs from the scene description"));
        }
        Ok(Self {
            meta,
            cloud,
            cameras,
            views,
        })
    }
}

pub fn write_json<S: Serialize + ?Sized>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err("json", e))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<D> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(&path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_roundtrip_is_exact_for_f32_coords() {
        let coords: Vec<f64> = [0.1f32, -0.25, 0.3, 0.123_456_79, 0.0, -0.5].iter().map(|&v| v as f64).collect();
        let colors = vec![0.0, 1.0, 128.0 / 255.0, 3.0 / 255.0, 0.5 + 0.5 / 255.0, 1.0];
        let cloud = PointCloud::new(coords, colors).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        write_ply(&path, &cloud).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.coords(), cloud.coords());
        assert_eq!(back.colors(), cloud.colors());
    }

    #[test]
    fn ply_without_colors_and_with_faces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float y\nproperty float x\n\
                    property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n\
                    1 2 3\n4 5 6\n3 0 1 1\n";
        fs::write(&path, text).unwrap();
        let cloud = read_ply(&path).unwrap();
        assert_eq!(cloud.coords(), &[2.0, 1.0, 3.0, 5.0, 4.0, 6.0]);
        assert_eq!(cloud.colors(), &[0.0; 6]);
    }

    #[test]
    fn malformed_ply_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        fs::write(&path, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(matches!(read_ply(&path), Err(Error::Format(_))));
        fs::write(&path, "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n").unwrap();
        assert!(read_ply(&path).is_err());
    }

    #[test]
    fn ppm_roundtrip() {
        let rgb = Tensor::from_fn(&[6, 3], |i| (i * 13 % 256) as f64 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        write_ppm(&path, 3, 2, &rgb).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, rgb);
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
    }

    #[test]
    fn ppm_with_comment_and_bad_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        fs::write(&path, b"P6\n# hi\n1 1\n255\n\x01\x02\x03").unwrap();
        let (_, _, t) = read_ppm(&path).unwrap();
        assert_eq!(t.data()[2], 3.0 / 255.0);
        fs::write(&path, b"P6\n2 1\n255\n\x01\x02\x03").unwrap();
        assert!(read_ppm(&path).is_err());
        let rgb = Tensor::<f64>::zeros(&[4, 3]);
        assert!(write_ppm(&path, 3, 2, &rgb).is_err());
    }
}
