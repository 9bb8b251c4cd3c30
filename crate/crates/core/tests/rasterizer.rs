use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slpt_core::diffcore::{Tape, Tensor};
use slpt_core::rasterizer::{rasterize, rasterize_oracle, RasterSettings, RenderedMaps};

fn settings(w: usize, h: usize) -> RasterSettings {
    RasterSettings {
        width: w,
        height: h,
        z_near: 0.05,
        background: Vec::new(),
    }
}

struct Scene {
    proj: Tensor<f64>,
    opacity: Tensor<f64>,
    payload: Tensor<f64>,
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, size: f64, channels: usize) -> Scene {
    let mut rows = Vec::new();
    for _ in 0..n {
        let a: f64 = rng.random_range(0.3..12.0);
        let c: f64 = rng.random_range(0.3..12.0);
        let b = rng.random_range(-0.9..0.9) * (a * c).sqrt();
        // a few splats sit behind the near plane
        let depth = if rng.random_bool(0.1) { 0.01 } else { rng.random_range(0.5..5.0) };
        rows.push(vec![
            rng.random_range(-4.0..size + 4.0),
            rng.random_range(-4.0..size + 4.0),
            a,
            b,
            c,
            depth,
        ]);
    }
    Scene {
        proj: Tensor::from_rows(&rows).unwrap(),
        opacity: Tensor::from_fn(&[n, 1], |_| rng.random_range(0.0..1.0)),
        payload: Tensor::from_fn(&[n, channels], |_| rng.random_range(-1.0..1.0)),
    }
}

fn max_diff<T: slpt_core::diffcore::Real>(a: &RenderedMaps<T>, b: &RenderedMaps<T>) -> f64 {
    [
        a.features.max_abs_diff(&b.features),
        a.depth.max_abs_diff(&b.depth),
        a.alpha.max_abs_diff(&b.alpha),
    ]
    .into_iter()
    .map(|d| d.to_f64())
    .fold(0.0, f64::max)
}

#[test]
fn tiled_matches_oracle_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let s = settings(32, 32);
    for _ in 0..60 {
        let n = rng.random_range(0..=64);
        let sc = random_scene(&mut rng, n, 32.0, 4);
        let tiled = rasterize(&sc.proj, &sc.opacity, &sc.payload, &s).unwrap();
        let oracle = rasterize_oracle(&sc.proj, &sc.opacity, &sc.payload, &s).unwrap();
        assert!(max_diff(&tiled, &oracle) < 1e-6);

        let (p32, o32, f32_) = (sc.proj.cast::<f32>(), sc.opacity.cast::<f32>(), sc.payload.cast::<f32>());
        let tiled = rasterize(&p32, &o32, &f32_, &s).unwrap();
        let oracle = rasterize_oracle(&p32, &o32, &f32_, &s).unwrap();
        assert!(max_diff(&tiled, &oracle) < 1e-4);
    }
}

#[test]
fn weights_and_residual_transmittance_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = settings(32, 24);
    for _ in 0..10 {
        let mut sc = random_scene(&mut rng, 40, 32.0, 1);
        sc.payload = Tensor::full(&[40, 1], 1.0);
        let maps = rasterize(&sc.proj, &sc.opacity, &sc.payload, &s).unwrap();
        for p in 0..32 * 24 {
            let weight_sum = maps.features.row(p)[0];
            let alpha = maps.alpha.row(p)[0];
            assert!(weight_sum >= 0.0);
            assert!((0.0..=1.0).contains(&alpha));
            assert!((weight_sum + (1.0 - alpha) - 1.0).abs() < 1e-12);
            assert!(maps.depth.row(p)[0] >= 0.0);
        }
    }
}

#[test]
fn splat_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = settings(32, 32);
    let sc = random_scene(&mut rng, 48, 32.0, 3);
    let base = rasterize(&sc.proj, &sc.opacity, &sc.payload, &s).unwrap();
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..48).collect();
        perm.shuffle(&mut rng);
        let pick = |t: &Tensor<f64>| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let out = rasterize(&pick(&sc.proj), &pick(&sc.opacity), &pick(&sc.payload), &s).unwrap();
        assert!(max_diff(&base, &out) < 1e-12);
    }
}

fn forward_backward(sc: &Scene, s: &RasterSettings) -> Vec<Vec<f64>> {
    let mut tape = Tape::<f64>::new();
    let p = tape.input(sc.proj.clone());
    let o = tape.input(sc.opacity.clone());
    let f = tape.input(sc.payload.clone());
    let out = tape.rasterize(p, o, f, s).unwrap();
    let mut values = vec![
        tape.value(out.features).data().to_vec(),
        tape.value(out.depth).data().to_vec(),
        tape.value(out.alpha).data().to_vec(),
    ];
    let a = tape.sum_all(out.features).unwrap();
    let b = tape.sum_all(out.depth).unwrap();
    let loss = tape.add(a, b).unwrap();
    let grads = tape.backward(loss).unwrap();
    for v in [p, o, f] {
        values.push(grads.get(v).unwrap().data().to_vec());
    }
    values
}

#[test]
fn forward_and_backward_are_identical_across_worker_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = settings(64, 48);
    let sc = random_scene(&mut rng, 64, 64.0, 5);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| forward_backward(&sc, &s))
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(3));
    assert_eq!(one, forward_backward(&sc, &s));
}

/// Σ_pixels α_i T_i · pixel area for a single isolated splat.
fn splat_mass(scale: f64, sigma_px: f64) -> f64 {
    let size = (32.0 * scale) as usize;
    let var = (sigma_px * scale).powi(2) + 0.3;
    let c = size as f64 / 2.0;
    let proj = Tensor::from_rows(&[vec![c, c, var, 0.0, var, 1.0]]).unwrap();
    let maps = rasterize(&proj, &Tensor::full(&[1, 1], 0.6), &Tensor::full(&[1, 1], 1.0), &settings(size, size)).unwrap();
    maps.features.sum() / (scale * scale)
}

#[test]
fn doubling_resolution_preserves_splat_mass() {
    for sigma in [2.5, 3.0, 4.0, 6.0] {
        let base = splat_mass(1.0, sigma);
        let double = splat_mass(2.0, sigma);
        assert!((double / base - 1.0).abs() < 0.05, "σ={sigma}: {base} vs {double}");
    }
}
