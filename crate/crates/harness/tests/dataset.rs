mod common;

use common::{dataset, dir_contents, single_object, small_config};
use slpt_harness::config::Primitive;
use slpt_harness::scene::generate_scene;
use slpt_harness::Dataset;

#[test]
fn same_seed_gives_byte_identical_dataset() {
    let cfg = small_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    dataset(&cfg).save(a.path()).unwrap();
    dataset(&cfg).save(b.path()).unwrap();
    let (ca, cb) = (dir_contents(a.path()), dir_contents(b.path()));
    assert_eq!(ca.len(), 3 + 3 * cfg.scene.views);
    assert_eq!(ca, cb);

    let mut other = cfg.clone();
    other.scene.seed += 1;
    let c = tempfile::tempdir().unwrap();
    dataset(&other).save(c.path()).unwrap();
    assert_ne!(dir_contents(c.path()), ca);
}

#[test]
fn saved_dataset_loads_back_unchanged() {
    let cfg = small_config();
    let data = dataset(&cfg);
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.cloud.coords(), data.cloud.coords());
    assert_eq!(back.cloud.colors(), data.cloud.colors());
    assert_eq!(back.cameras, data.cameras);
    assert_eq!(back.meta, data.meta);
    assert_eq!(back.views, data.views);
}

#[test]
fn single_sphere_semantics_are_alpha_scaled_embedding() {
    let cfg = single_object(Primitive::Sphere);
    let scene = generate_scene(&cfg.scene).unwrap();
    let e = &scene.objects[0].embedding;
    let mut checked = 0;
    for cam in &scene.cameras {
        let maps = scene.render(cam).unwrap();
        for p in 0..maps.depth.rows() {
            if maps.depth.data()[p] <= 0.0 {
                continue;
            }
            let a = maps.alpha.data()[p];
            for (s, ei) in maps.sem.row(p).iter().zip(e) {
                assert!((s - a * ei).abs() < 1e-12, "pixel {p}: {s} vs {}", a * ei);
            }
            checked += 1;
        }
    }
    assert!(checked > 100);
}

/// Independent pinhole projection straight from the stored matrix.
fn project(w2c: &[f64; 16], fx: f64, fy: f64, cx: f64, cy: f64, p: [f64; 3]) -> (f64, f64, f64) {
    let c: Vec<f64> = (0..3)
        .map(|r| w2c[r * 4] * p[0] + w2c[r * 4 + 1] * p[1] + w2c[r * 4 + 2] * p[2] + w2c[r * 4 + 3])
        .collect();
    (fx * c[0] / c[2] + cx, fy * c[1] / c[2] + cy, c[2])
}

#[test]
fn ring_cameras_are_distinct_and_see_the_centroid() {
    let mut cfg = small_config();
    cfg.scene.views = 8;
    cfg.scene.heldout = vec![];
    let scene = generate_scene(&cfg.scene).unwrap();
    assert_eq!(scene.cameras.len(), 8);
    let n = scene.cloud.len() as f64;
    let centroid: Vec<f64> = (0..3)
        .map(|a| (0..scene.cloud.len()).map(|i| scene.cloud.point(i)[a]).sum::<f64>() / n)
        .collect();
    for cam in &scene.cameras {
        let (u, v, z) = project(&cam.w2c, cam.fx, cam.fy, cam.cx, cam.cy, [centroid[0], centroid[1], centroid[2]]);
        assert!(z > 0.0);
        assert!(u >= 0.0 && u <= (cam.width - 1) as f64, "u = {u}");
        assert!(v >= 0.0 && v <= (cam.height - 1) as f64, "v = {v}");
    }
    let centers: Vec<[f64; 3]> = scene.cameras.iter().map(|c| c.center()).collect();
    for i in 0..centers.len() {
        for j in 0..i {
            let d: f64 = (0..3).map(|a| (centers[i][a] - centers[j][a]).powi(2)).sum::<f64>().sqrt();
            assert!(d > 0.1, "cameras {i} and {j} coincide");
        }
    }
}

#[test]
fn points_stay_in_unit_cube_for_many_seeds() {
    let mut cfg = small_config();
    for seed in 0..8 {
        cfg.scene.seed = seed;
        let scene = generate_scene(&cfg.scene).unwrap();
        for &c in scene.cloud.coords() {
            assert!((-0.5..=0.5).contains(&c));
        }
    }
}

#[test]
fn every_object_is_visible_somewhere() {
    let data = dataset(&small_config());
    for view in &data.views {
        assert_eq!(view.rgb.rows(), 24 * 24);
    }
    let covered = data
        .views
        .iter()
        .map(|v| v.depth.data().iter().filter(|&&d| d > 0.0).count())
        .min()
        .unwrap();
    assert!(covered > 24 * 24 / 4, "a view sees only {covered} pixels of geometry");
}
