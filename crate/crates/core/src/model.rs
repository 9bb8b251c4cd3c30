//! End-to-end pipeline: `P_raw → P_sparse → (PL-VAE) → P_dense → splats →
//! rendered feature maps → colour/semantics`, plus the loss assembly.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecConfig, Hierarchy, PointCloud};
use crate::diffcore::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::heads::{self, HeadsConfig, SplatMode, SplatVars};
use crate::losses::{self, LossBreakdown, LossWeights, ViewPrediction, ViewTarget};
use crate::plvae::{self, LatentSample, PlvaeConfig, Posterior, SampleMode};
use crate::rasterizer::RasterSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub plvae: PlvaeConfig,
    pub heads: HeadsConfig,
    pub plvae_enabled: bool,
    pub splat_mode: SplatMode,
    pub weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            plvae: PlvaeConfig::default(),
            heads: HeadsConfig::default(),
            plvae_enabled: true,
            splat_mode: SplatMode::Learned,
            weights: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.plvae.d_sparse != self.codec.d_sparse {
            return fail(format!(
                "PL-VAE input width {} differs from sparse feature width {}",
                self.plvae.d_sparse, self.codec.d_sparse
            ));
        }
        if self.heads.d_dense != self.codec.d_dense {
            return fail(format!(
                "head input width {} differs from dense feature width {}",
                self.heads.d_dense, self.codec.d_dense
            ));
        }
        let dims = [
            self.codec.m_sparse,
            self.codec.k_group,
            self.codec.d_sparse,
            self.codec.d_dense,
            self.codec.d_mid,
            self.codec.hidden,
            self.plvae.hidden,
            self.plvae.z_f,
            self.heads.hidden,
            self.heads.k_feat,
            self.heads.s_sem,
            self.heads.proj_hidden,
            self.heads.recon_hidden,
        ];
        if dims.contains(&0) {
            return fail("every width and count must be positive".into());
        }
        self.weights.validate()
    }

    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.codec.init(&mut store, &mut rng)?;
        if self.plvae_enabled {
            self.plvae.init(&mut store, &mut rng)?;
        }
        self.heads.init(&mut store, &mut rng, self.splat_mode)?;
        Ok(store)
    }
}

/// A point cloud prepared for the network: cached sampling/grouping tables
/// and the coordinate/colour tensors in the working precision.
#[derive(Clone, Debug)]
pub struct SceneInput<T> {
    pub hierarchy: Arc<Hierarchy>,
    pub coords: Tensor<T>,
    pub colors: Tensor<T>,
    pub sparse_coords: Tensor<T>,
}

impl<T: Real> SceneInput<T> {
    pub fn new(cloud: &PointCloud, cfg: &CodecConfig) -> Result<Self> {
        let hierarchy = Hierarchy::build(cloud.coords(), cfg)?;
        let n = cloud.len();
        let cast = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<_>>();
        let sparse = hierarchy.sparse_coords();
        Ok(Self {
            coords: Tensor::new(vec![n, 3], cast(cloud.coords()))?,
            colors: Tensor::new(vec![n, 3], cast(cloud.colors()))?,
            sparse_coords: Tensor::new(vec![sparse.len() / 3, 3], cast(sparse))?,
            hierarchy: Arc::new(hierarchy),
        })
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Camera with its ground-truth maps.
#[derive(Clone, Debug)]
pub struct View<T> {
    pub camera: Camera,
    pub target: ViewTarget<T>,
}

/// Vars of the latent stage.
#[derive(Clone, Debug)]
pub struct Latent<T> {
    pub sparse_coords: Var,
    pub sparse_features: Var,
    pub posterior: Option<Posterior>,
    pub sample: Option<LatentSample<T>>,
    /// Sparse features handed to the decoder.
    pub decoded_features: Var,
    pub l_vae: Var,
    pub l_kl: Var,
}

/// Vars of everything up to the splat set.
#[derive(Clone, Debug)]
pub struct Scene<T> {
    pub latent: Latent<T>,
    pub encoded: codec::Encoded,
    pub dense: Var,
    pub coords: Var,
    pub splats: SplatVars,
    pub covariance: Var,
}

/// Runs codec, PL-VAE, decoder and the splat head.
pub fn build_scene<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    input: &SceneInput<T>,
    sample: SampleMode,
) -> Result<Scene<T>> {
    let colors = tape.constant(input.colors.clone());
    let coords = tape.constant(input.coords.clone());
    let encoded = codec::encode(tape, store, &cfg.codec, &input.hierarchy, colors)?;
    let latent = latent_stage(tape, store, cfg, input, encoded.sparse_features, sample)?;
    let dense = codec::decode(tape, store, &cfg.codec, &input.hierarchy, latent.decoded_features, &encoded)?;
    let splats = heads::predict_gaussians(tape, store, &cfg.heads, dense, coords, cfg.splat_mode)?;
    let covariance = tape.build_covariance(splats.rotation, splats.scale)?;
    Ok(Scene {
        latent,
        encoded,
        dense,
        coords,
        splats,
        covariance,
    })
}

fn latent_stage<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    input: &SceneInput<T>,
    sparse_features: Var,
    sample: SampleMode,
) -> Result<Latent<T>> {
    let sparse_coords = tape.constant(input.sparse_coords.clone());
    if !cfg.plvae_enabled {
        let zero = tape.constant(Tensor::scalar(T::zero()));
        return Ok(Latent {
            sparse_coords,
            sparse_features,
            posterior: None,
            sample: None,
            decoded_features: sparse_features,
            l_vae: zero,
            l_kl: zero,
        });
    }
    let post = plvae::encode(tape, store, &cfg.plvae, sparse_coords, sparse_features)?;
    let z = plvae::reparameterize(tape, &post, sample)?;
    let rec = plvae::decode(tape, store, &cfg.plvae, z.z_f, z.z_p)?;
    let l_vae = losses::vae_loss(
        tape,
        rec.coords,
        rec.features,
        sparse_coords,
        sparse_features,
        cfg.weights.omega,
    )?;
    let l_kl = losses::kl_loss(tape, &post)?;
    Ok(Latent {
        sparse_coords,
        sparse_features,
        posterior: Some(post),
        sample: Some(z),
        decoded_features: rec.features,
        l_vae,
        l_kl,
    })
}

/// Renders the splat set from one camera and decodes colour and semantics.
pub fn render_view<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    scene: &Scene<T>,
    camera: &Camera,
) -> Result<ViewPrediction> {
    let proj = tape.project_gaussians(scene.splats.means, scene.covariance, camera)?;
    let maps = tape.rasterize(proj, scene.splats.opacity, scene.splats.features, &RasterSettings::for_camera(camera))?;
    let (rgb, sem) = heads::project_feature_map(tape, store, &cfg.heads, maps.features)?;
    Ok(ViewPrediction {
        rgb,
        depth: maps.depth,
        sem,
        alpha: maps.alpha,
    })
}

/// Scalar loss var and its breakdown.
pub struct StepLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Full forward pass and loss for one batch of views.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    input: &SceneInput<T>,
    views: &[&View<T>],
    step: usize,
    total_steps: usize,
    sample: SampleMode,
) -> Result<StepLoss> {
    let scene = build_scene(tape, store, cfg, input, sample)?;
    let mut preds = Vec::with_capacity(views.len());
    for v in views {
        preds.push((render_view(tape, store, cfg, &scene, &v.camera)?, &v.target));
    }
    let render = losses::render_loss(tape, &preds, &cfg.weights)?;
    let (points, colors) = heads::reconstruct_points(tape, store, &cfg.heads, scene.dense, scene.coords)?;
    let recon = losses::recon_loss(tape, points, colors, &input.coords, &input.colors)?;
    let w_t = losses::anneal(step, total_steps, cfg.weights.anneal_floor);
    let total = losses::total_loss(
        tape,
        render.total,
        recon,
        scene.latent.l_vae,
        scene.latent.l_kl,
        w_t,
        cfg.weights.kl_weight,
    )?;
    let get = |v: Var| tape.value(v).item().to_f64();
    let breakdown = LossBreakdown {
        l_render: get(render.total),
        l_render_rgb: get(render.rgb),
        l_render_depth: get(render.depth),
        l_render_sem: get(render.sem),
        l_recon: get(recon),
        l_vae: get(scene.latent.l_vae),
        l_kl: get(scene.latent.l_kl),
        w_t,
        l_total: get(total),
        depth_empty: render.depth_empty,
    };
    for (name, value) in LossBreakdown::FIELDS.iter().zip(breakdown.values()) {
        if !value.is_finite() {
            return Err(Error::Numerical {
                op: (*name).to_string(),
                detail: format!("loss term is {value}"),
            });
        }
    }
    Ok(StepLoss { total, breakdown })
}

/// Plain-tensor maps of one rendered view.
#[derive(Clone, Debug)]
pub struct RenderedView<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub sem: Tensor<T>,
    pub alpha: Tensor<T>,
    pub features: Tensor<T>,
}

/// Renders every camera with the latent mean (no sampling noise).
pub fn render_cameras<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    input: &SceneInput<T>,
    cameras: &[Camera],
) -> Result<Vec<RenderedView<T>>> {
    let mut tape = Tape::new();
    let scene = build_scene(&mut tape, store, cfg, input, SampleMode::Deterministic)?;
    let mut out = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let proj = tape.project_gaussians(scene.splats.means, scene.covariance, cam)?;
        let maps = tape.rasterize(proj, scene.splats.opacity, scene.splats.features, &RasterSettings::for_camera(cam))?;
        let (rgb, sem) = heads::project_feature_map(&mut tape, store, &cfg.heads, maps.features)?;
        out.push(RenderedView {
            rgb: tape.value(rgb).clone(),
            depth: tape.value(maps.depth).clone(),
            sem: tape.value(sem).clone(),
            alpha: tape.value(maps.alpha).clone(),
            features: tape.value(maps.features).clone(),
        });
    }
    Ok(out)
}

/// The exported latent `z_vae` together with the posterior means.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation<T> {
    pub z_f: Tensor<T>,
    pub z_p: Tensor<T>,
    pub mu_f: Tensor<T>,
    pub mu_p: Tensor<T>,
}

/// `P_raw → z_vae` through the encoder and the PL-VAE posterior.
pub fn extract_representation<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    input: &SceneInput<T>,
    mode: SampleMode,
) -> Result<Representation<T>> {
    if !cfg.plvae_enabled {
        return Err(Error::Config("the latent VAE is disabled in this model".into()));
    }
    let mut tape = Tape::new();
    let colors = tape.constant(input.colors.clone());
    let enc = codec::encode(&mut tape, store, &cfg.codec, &input.hierarchy, colors)?;
    let coords = tape.constant(input.sparse_coords.clone());
    let post = plvae::encode(&mut tape, store, &cfg.plvae, coords, enc.sparse_features)?;
    let z = plvae::reparameterize(&mut tape, &post, mode)?;
    Ok(Representation {
        z_f: tape.value(z.z_f).clone(),
        z_p: tape.value(z.z_p).clone(),
        mu_f: tape.value(post.mu_f).clone(),
        mu_p: tape.value(post.mu_p).clone(),
    })
}
