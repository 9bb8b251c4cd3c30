//! Seeded synthetic scenes: primitives resting on a ground plane, sampled
//! into a coloured point cloud, dressed with ground-truth splats and viewed
//! from a ring of cameras.
//!
//! The world is z-up. After sampling, the whole scene is shifted and scaled
//! so every point lies in `[-0.5, 0.5]³`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use slpt_core::codec::PointCloud;
use slpt_core::diffcore::Tensor;
use slpt_core::geometry::{Camera, Gaussian3D};
use slpt_core::rasterizer::{project_splats, rasterize_oracle, RasterSettings};
use slpt_core::{Error, Result};

use crate::config::{Primitive, SceneConfig};

/// One primitive after normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: Primitive,
    pub center: [f64; 3],
    /// Half extents; a sphere stores its radius in every slot, a plane has
    /// zero height.
    pub size: [f64; 3],
    /// Rotation about the vertical axis, radians.
    pub yaw: f64,
    pub base_color: [f64; 3],
    /// Unit-norm semantic embedding.
    pub embedding: Vec<f64>,
}

/// Everything the dataset is rendered from.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
    pub cloud: PointCloud,
    /// Owning object of every point.
    pub labels: Vec<usize>,
    pub splats: Vec<Gaussian3D>,
    pub cameras: Vec<Camera>,
    pub centroid: [f64; 3],
}

/// Ground-truth maps of one view, row-major `[H·W, ·]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMaps {
    pub rgb: Tensor<f64>,
    pub depth: Tensor<f64>,
    pub sem: Tensor<f64>,
    pub alpha: Tensor<f64>,
}

/// Colours are stored as 8-bit values on disk, so they are quantised here.
fn quantize_color(c: f64) -> f64 {
    (c.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn area(kind: Primitive, s: [f64; 3]) -> f64 {
    match kind {
        Primitive::Plane => 4.0 * s[0] * s[1],
        Primitive::Sphere => 4.0 * std::f64::consts::PI * s[0] * s[0],
        Primitive::Box => 8.0 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2]),
    }
}

/// Splits `n` into parts proportional to `weights`, at least one each, by
/// largest remainder.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let k = weights.len();
    let total: f64 = weights.iter().sum();
    let spare = n - k;
    let exact: Vec<f64> = weights.iter().map(|w| spare as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let left = spare - counts.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    counts.iter().map(|c| c + 1).collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Places each primitive; spheres and boxes rest on `z = 0` and avoid each
/// other's footprint when possible.
fn layout(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let mut placed: Vec<([f64; 2], f64)> = Vec::new();
    let mut objects = Vec::with_capacity(cfg.objects.len());
    for &kind in &cfg.objects {
        let base_color = [
            rng.random_range(0.15..0.85),
            rng.random_range(0.15..0.85),
            rng.random_range(0.15..0.85),
        ];
        let (center, size, yaw) = match kind {
            Primitive::Plane => ([0.0, 0.0, 0.0], [0.5, 0.5, 0.0], 0.0),
            Primitive::Sphere | Primitive::Box => {
                let size: [f64; 3] = if kind == Primitive::Sphere {
                    let r = rng.random_range(0.12..0.2);
                    [r, r, r]
                } else {
                    [
                        rng.random_range(0.08..0.15),
                        rng.random_range(0.08..0.15),
                        rng.random_range(0.08..0.15),
                    ]
                };
                let yaw = if kind == Primitive::Box {
                    rng.random_range(0.0..std::f64::consts::FRAC_PI_2)
                } else {
                    0.0
                };
                let footprint = (size[0] * size[0] + size[1] * size[1]).sqrt();
                let mut xy = [0.0; 2];
                for _ in 0..100 {
                    xy = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
                    let clear = placed.iter().all(|(c, r)| {
                        let d = ((xy[0] - c[0]).powi(2) + (xy[1] - c[1]).powi(2)).sqrt();
                        d > r + footprint
                    });
                    if clear {
                        break;
                    }
                }
                placed.push((xy, footprint));
                ([xy[0], xy[1], size[2]], size, yaw)
            }
        };
        objects.push(SceneObject {
            kind,
            center,
            size,
            yaw,
            base_color,
            embedding: unit_vector(rng, cfg.s_sem),
        });
    }
    objects
}

fn sample_surface(obj: &SceneObject, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let s = obj.size;
    let local = match obj.kind {
        Primitive::Plane => [rng.random_range(-s[0]..s[0]), rng.random_range(-s[1]..s[1]), 0.0],
        Primitive::Sphere => {
            let d = unit_vector(rng, 3);
            [d[0] * s[0], d[1] * s[0], d[2] * s[0]]
        }
        Primitive::Box => {
            // pick a face pair by area, then a side and a point on it
            let faces = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
            let mut u = rng.random_range(0.0..faces.iter().sum::<f64>());
            let mut axis = 2;
            for (i, &a) in faces.iter().enumerate() {
                if u < a {
                    axis = i;
                    break;
                }
                u -= a;
            }
            let mut p = [
                rng.random_range(-s[0]..s[0]),
                rng.random_range(-s[1]..s[1]),
                rng.random_range(-s[2]..s[2]),
            ];
            p[axis] = if rng.random_bool(0.5) { s[axis] } else { -s[axis] };
            p
        }
    };
    let (sin, cos) = obj.yaw.sin_cos();
    [
        obj.center[0] + cos * local[0] - sin * local[1],
        obj.center[1] + sin * local[0] + cos * local[1],
        obj.center[2] + local[2],
    ]
}

/// Smooth per-object colour field: base colour plus a low-frequency wave.
struct ColorField {
    base: [f64; 3],
    freq: [[f64; 3]; 3],
    phase: [f64; 3],
    amplitude: f64,
}

impl ColorField {
    fn new(base: [f64; 3], amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut freq = [[0.0; 3]; 3];
        let mut phase = [0.0; 3];
        for c in 0..3 {
            let dir = unit_vector(rng, 3);
            let cycles = rng.random_range(1.0..2.0) * std::f64::consts::TAU;
            freq[c] = [dir[0] * cycles, dir[1] * cycles, dir[2] * cycles];
            phase[c] = rng.random_range(0.0..std::f64::consts::TAU);
        }
        Self {
            base,
            freq,
            phase,
            amplitude,
        }
    }

    fn at(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|c| {
            let f = self.freq[c];
            let wave = (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + self.phase[c]).sin();
            quantize_color(self.base[c] + self.amplitude * wave)
        })
    }
}

/// Camera `k` of a ring of `cfg.views` at fixed elevation, looking at
/// `target` with world z projecting to screen-up.
pub fn ring_camera(cfg: &SceneConfig, k: usize, target: [f64; 3]) -> Result<Camera> {
    let azimuth = std::f64::consts::TAU * k as f64 / cfg.views as f64;
    let elevation = cfg.elevation_deg.to_radians();
    let r = cfg.camera_radius;
    let eye = [
        target[0] + r * elevation.cos() * azimuth.cos(),
        target[1] + r * elevation.cos() * azimuth.sin(),
        target[2] + r * elevation.sin(),
    ];
    let f = cfg.focal();
    let c = (cfg.image_size as f64 - 1.0) / 2.0;
    Camera::look_at(eye, target, [0.0, 0.0, 1.0], f, f, c, c, cfg.image_size, cfg.image_size)
}

/// Builds the scene for `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut objects = layout(cfg, &mut rng);
    let areas: Vec<f64> = objects.iter().map(|o| area(o.kind, o.size)).collect();
    let counts = apportion(cfg.n_points, &areas);

    let mut raw = Vec::with_capacity(cfg.n_points);
    let mut colors = Vec::with_capacity(cfg.n_points * 3);
    let mut labels = Vec::with_capacity(cfg.n_points);
    for (i, (obj, &count)) in objects.iter().zip(&counts).enumerate() {
        let field = ColorField::new(obj.base_color, cfg.color_variation, &mut rng);
        for _ in 0..count {
            let p = sample_surface(obj, &mut rng);
            raw.push(p);
            colors.extend(field.at(p));
            labels.push(i);
        }
    }

    let (lo, hi) = raw.iter().fold(([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]), |(lo, hi), p| {
        (std::array::from_fn(|a| lo[a].min(p[a])), std::array::from_fn(|a| hi[a].max(p[a])))
    });
    let mid: [f64; 3] = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if !(extent > 0.0) {
        return Err(Error::Input("scene has zero extent".into()));
    }
    let scale = 1.0 / extent;
    // coordinates go through f32 so the PLY round trip is exact
    let coords: Vec<f64> = raw
        .iter()
        .flat_map(|p| (0..3).map(move |a| (((p[a] - mid[a]) * scale).clamp(-0.5, 0.5) as f32) as f64))
        .collect();
    for obj in &mut objects {
        obj.center = std::array::from_fn(|a| (obj.center[a] - mid[a]) * scale);
        obj.size = obj.size.map(|s| s * scale);
    }

    let total_area: f64 = objects.iter().map(|o| area(o.kind, o.size)).sum();
    let radius = cfg.splat_scale * (total_area / cfg.n_points as f64).sqrt();
    let splats: Vec<Gaussian3D> = coords
        .chunks_exact(3)
        .zip(colors.chunks_exact(3))
        .zip(&labels)
        .map(|((p, c), &l)| Gaussian3D {
            mean: [p[0], p[1], p[2]],
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [radius; 3],
            opacity: cfg.splat_opacity,
            color: [c[0], c[1], c[2]],
            feature: objects[l].embedding.clone(),
        })
        .collect();

    let n = cfg.n_points as f64;
    let centroid: [f64; 3] = std::array::from_fn(|a| coords.chunks_exact(3).map(|p| p[a]).sum::<f64>() / n);
    let cameras = (0..cfg.views)
        .map(|k| ring_camera(cfg, k, centroid))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        objects,
        cloud: PointCloud::new(coords, colors)?,
        labels,
        splats,
        cameras,
        centroid,
    })
}

impl SyntheticScene {
    /// Renders the ground-truth splats with the reference rasterizer; the
    /// payload is colour followed by the object embedding.
    pub fn render(&self, camera: &Camera) -> Result<ViewMaps> {
        let (proj, opacity) = project_splats(&self.splats, camera)?;
        let n = self.splats.len();
        let width = 3 + self.splats.first().map_or(0, |g| g.feature.len());
        let mut payload = Vec::with_capacity(n * width);
        for g in &self.splats {
            payload.extend_from_slice(&g.color);
            payload.extend_from_slice(&g.feature);
        }
        let payload = Tensor::new(vec![n, width], payload)?;
        let maps = rasterize_oracle(&proj, &opacity, &payload, &RasterSettings::for_camera(camera))?;
        let hw = maps.features.rows();
        let mut rgb = Vec::with_capacity(hw * 3);
        let mut sem = Vec::with_capacity(hw * (width - 3));
        for p in 0..hw {
            let row = maps.features.row(p);
            rgb.extend(row[..3].iter().map(|&c| quantize_color(c)));
            sem.extend_from_slice(&row[3..]);
        }
        Ok(ViewMaps {
            rgb: Tensor::new(vec![hw, 3], rgb)?,
            depth: maps.depth,
            sem: Tensor::new(vec![hw, width - 3], sem)?,
            alpha: maps.alpha,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            n_points: 600,
            image_size: 24,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn apportion_sums_and_floors() {
        let c = apportion(10, &[1.0, 1.0, 1.0]);
        assert_eq!(c.iter().sum::<usize>(), 10);
        assert_eq!(c, vec![4, 3, 3]);
        let c = apportion(3, &[100.0, 1e-9, 1e-9]);
        assert_eq!(c, vec![1, 1, 1]);
    }

    #[test]
    fn points_fill_unit_cube() {
        let scene = generate_scene(&small()).unwrap();
        let (lo, hi) = scene.cloud.bounds();
        for a in 0..3 {
            assert!(lo[a] >= -0.5 && hi[a] <= 0.5);
        }
        let widest = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        assert!((widest - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embeddings_are_unit() {
        let scene = generate_scene(&small()).unwrap();
        for o in &scene.objects {
            let n: f64 = o.embedding.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn every_object_gets_points() {
        let scene = generate_scene(&small()).unwrap();
        for i in 0..scene.objects.len() {
            assert!(scene.labels.contains(&i));
        }
        assert_eq!(scene.cloud.len(), 600);
    }

    #[test]
    fn sphere_points_lie_on_sphere() {
        let cfg = SceneConfig {
            objects: vec![Primitive::Sphere],
            ..small()
        };
        let scene = generate_scene(&cfg).unwrap();
        let o = &scene.objects[0];
        for i in 0..scene.cloud.len() {
            let p = scene.cloud.point(i);
            let r = (0..3).map(|a| (p[a] - o.center[a]).powi(2)).sum::<f64>().sqrt();
            assert!((r - o.size[0]).abs() < 1e-5, "radius {r} vs {}", o.size[0]);
        }
    }

    #[test]
    fn rendered_colors_are_quantized() {
        let scene = generate_scene(&small()).unwrap();
        let maps = scene.render(&scene.cameras[0]).unwrap();
        for &c in maps.rgb.data() {
            assert_eq!(c, quantize_color(c));
        }
        assert!(maps.alpha.data().iter().any(|&a| a > 0.5));
    }
}
