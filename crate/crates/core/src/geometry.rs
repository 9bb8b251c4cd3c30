//! Pinhole cameras, covariance construction and the local-affine (EWA)
//! projection of 3-D Gaussians to screen space.
//!
//! Pixel centres sit at integer coordinates: pixel `(x, y)` is the point
//! `(x, y)` on the image plane.

use serde::{Deserialize, Serialize};

use crate::codec::PointCloud;
use crate::diffcore::{BackwardCtx, Op, Real, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Screen-space low-pass added to every projected covariance (px²).
pub const LOW_PASS: f64 = 0.3;
pub const DEFAULT_Z_NEAR: f64 = 0.05;

/// Intrinsics plus a rigid world-to-camera transform (OpenCV axes: x right,
/// y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 4×4 world-to-camera matrix.
    pub w2c: [f64; 16],
    pub z_near: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` projecting to screen-up.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = normalize3(sub3(target, eye))?;
        let right = normalize3(cross3(forward, up))?;
        let down = cross3(forward, right);
        let rot = [right, down, forward];
        let t = [-dot3(rot[0], eye), -dot3(rot[1], eye), -dot3(rot[2], eye)];
        let mut w2c = [0.0; 16];
        for r in 0..3 {
            w2c[r * 4..r * 4 + 3].copy_from_slice(&rot[r]);
            w2c[r * 4 + 3] = t[r];
        }
        w2c[15] = 1.0;
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            w2c,
            z_near: DEFAULT_Z_NEAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.w2c;
        [
            [m[0], m[1], m[2]],
            [m[4], m[5], m[6]],
            [m[8], m[9], m[10]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.w2c[3], self.w2c[7], self.w2c[11]]
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        let mut c = [0.0; 3];
        for (j, cj) in c.iter_mut().enumerate() {
            *cj = -(0..3).map(|i| r[i][j] * t[i]).sum::<f64>();
        }
        c
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        [
            dot3(r[0], p) + t[0],
            dot3(r[1], p) + t[1],
            dot3(r[2], p) + t[2],
        ]
    }

    /// Pixel coordinates and camera-space depth of a world point.
    pub fn project_point(&self, p: [f64; 3]) -> ([f64; 2], f64) {
        let c = self.to_camera(p);
        (
            [self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy],
            c[2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Input("focal lengths must be positive".into()));
        }
        if !(self.z_near > 0.0) {
            return Err(Error::Input("z_near must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Input("image dimensions must be positive".into()));
        }
        let r = self.rotation();
        let mut dev = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let id = if i == j { 1.0 } else { 0.0 };
                dev += (rtr - id).powi(2);
            }
        }
        if dev.sqrt() >= 1e-6 {
            return Err(Error::Input(format!(
                "world-to-camera rotation is not orthonormal (|RᵀR − I| = {:.3e})",
                dev.sqrt()
            )));
        }
        let bottom = &self.w2c[12..16];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Input("w2c bottom row must be (0, 0, 0, 1)".into()));
        }
        Ok(())
    }
}

/// A world-space Gaussian splat.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mean: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

/// Screen-space footprint of a splat.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian2D {
    pub mean: [f64; 2],
    /// `(Σ′xx, Σ′xy, Σ′yy)`, low-pass included.
    pub cov: [f64; 3],
    pub depth: f64,
    /// Inverse of `cov` in the same packing.
    pub conic: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Visible(Gaussian2D),
    Culled,
}

// ---------------------------------------------------------------------------
// Small fixed-size helpers

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize3(a: [f64; 3]) -> Result<[f64; 3]> {
    let n = dot3(a, a).sqrt();
    if n < 1e-12 {
        return Err(Error::Input("degenerate direction".into()));
    }
    Ok([a[0] / n, a[1] / n, a[2] / n])
}

type Mat3<T> = [[T; 3]; 3];

fn unpack_sym3<T: Real>(c: &[T]) -> Mat3<T> {
    [[c[0], c[1], c[2]], [c[1], c[3], c[4]], [c[2], c[4], c[5]]]
}

/// Packs a symmetric-matrix *gradient* into the 6 free parameters: each
/// off-diagonal parameter feeds two matrix entries.
fn pack_sym3_grad<T: Real>(g: &Mat3<T>) -> [T; 6] {
    [
        g[0][0],
        g[0][1] + g[1][0],
        g[0][2] + g[2][0],
        g[1][1],
        g[1][2] + g[2][1],
        g[2][2],
    ]
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`
/// using the polynomial form valid for unit input.
pub fn quat_to_rotmat<T: Real>(q: [T; 4]) -> Mat3<T> {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::of(2.0);
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// Gradient of `quat_to_rotmat` w.r.t. `q`, given `dL/dR`.
fn quat_to_rotmat_vjp<T: Real>(q: [T; 4], gr: &Mat3<T>) -> [T; 4] {
    let [w, x, y, z] = q;
    let two = T::of(2.0);
    let gw = two * (-z * gr[0][1] + y * gr[0][2] + z * gr[1][0] - x * gr[1][2] - y * gr[2][0] + x * gr[2][1]);
    let gx = two
        * (y * gr[0][1] + z * gr[0][2] + y * gr[1][0] - two * x * gr[1][1] - w * gr[1][2] + z * gr[2][0]
            + w * gr[2][1]
            - two * x * gr[2][2]);
    let gy = two
        * (-two * y * gr[0][0] + x * gr[0][1] + w * gr[0][2] + x * gr[1][0] + z * gr[1][2] - w * gr[2][0]
            + z * gr[2][1]
            - two * y * gr[2][2]);
    let gz = two
        * (-two * z * gr[0][0] - w * gr[0][1] + x * gr[0][2] + w * gr[1][0] - two * z * gr[1][1]
            + y * gr[1][2]
            + x * gr[2][0]
            + y * gr[2][1]);
    [gw, gx, gy, gz]
}

/// `Σ = R S Sᵀ Rᵀ`, packed as `(xx, xy, xz, yy, yz, zz)`.
fn covariance_packed<T: Real>(q: [T; 4], s: [T; 3]) -> [T; 6] {
    let r = quat_to_rotmat(q);
    let mut m = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * s[j];
        }
    }
    let e = |i: usize, j: usize| m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2];
    [e(0, 0), e(0, 1), e(0, 2), e(1, 1), e(1, 2), e(2, 2)]
}

fn covariance_vjp<T: Real>(q: [T; 4], s: [T; 3], g: &[T]) -> ([T; 4], [T; 3]) {
    let r = quat_to_rotmat(q);
    let mut m = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * s[j];
        }
    }
    // matrix gradient of the symmetric output: off-diagonal parameters split evenly
    let half = T::of(0.5);
    let gs = [
        [g[0], g[1] * half, g[2] * half],
        [g[1] * half, g[3], g[4] * half],
        [g[2] * half, g[4] * half, g[5]],
    ];
    // Σ = M Mᵀ  ⇒  dL/dM = 2 G M
    let mut gm = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gm[i][j] = T::of(2.0) * (gs[i][0] * m[0][j] + gs[i][1] * m[1][j] + gs[i][2] * m[2][j]);
        }
    }
    // M = R S
    let mut gr = [[T::zero(); 3]; 3];
    let mut gscale = [T::zero(); 3];
    for i in 0..3 {
        for j in 0..3 {
            gr[i][j] = gm[i][j] * s[j];
            gscale[j] = gscale[j] + gm[i][j] * r[i][j];
        }
    }
    (quat_to_rotmat_vjp(q, &gr), gscale)
}

/// Builds the 3×3 covariance `R(q) S Sᵀ R(q)ᵀ`; exactly symmetric.
pub fn build_covariance(q: [f64; 4], s: [f64; 3]) -> Result<[[f64; 3]; 3]> {
    if q.iter().all(|&v| v == 0.0) {
        return Err(contract("zero quaternion; normalize upstream"));
    }
    if s.iter().any(|&v| !(v > 0.0)) {
        return Err(contract("scales must be positive"));
    }
    Ok(unpack_sym3(&covariance_packed(q, s)))
}

// ---------------------------------------------------------------------------
// Projection core, shared by the plain API and the tape op

struct Projected<T> {
    mean: [T; 2],
    cov: [T; 3],
    depth: T,
}

fn camera_parts<T: Real>(cam: &Camera) -> (Mat3<T>, [T; 3]) {
    let r = cam.rotation();
    let t = cam.translation();
    (
        [
            [T::of(r[0][0]), T::of(r[0][1]), T::of(r[0][2])],
            [T::of(r[1][0]), T::of(r[1][1]), T::of(r[1][2])],
            [T::of(r[2][0]), T::of(r[2][1]), T::of(r[2][2])],
        ],
        [T::of(t[0]), T::of(t[1]), T::of(t[2])],
    )
}

fn cam_point<T: Real>(r: &Mat3<T>, t: &[T; 3], u: &[T]) -> [T; 3] {
    let mut p = [T::zero(); 3];
    for i in 0..3 {
        p[i] = r[i][0] * u[0] + r[i][1] * u[1] + r[i][2] * u[2] + t[i];
    }
    p
}

/// `M = J R`, the 2×3 linearised projection of world offsets.
fn affine_map<T: Real>(cam: &Camera, r: &Mat3<T>, p: [T; 3]) -> [[T; 3]; 2] {
    let (fx, fy) = (T::of(cam.fx), T::of(cam.fy));
    let iz = T::one() / p[2];
    let j = [
        [fx * iz, T::zero(), -fx * p[0] * iz * iz],
        [T::zero(), fy * iz, -fy * p[1] * iz * iz],
    ];
    let mut m = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for b in 0..3 {
            m[a][b] = j[a][0] * r[0][b] + j[a][1] * r[1][b] + j[a][2] * r[2][b];
        }
    }
    m
}

fn project_core<T: Real>(cam: &Camera, lowpass: T, u: &[T], cov: &[T]) -> Projected<T> {
    let (r, t) = camera_parts::<T>(cam);
    let p = cam_point(&r, &t, u);
    let iz = T::one() / p[2];
    let mean = [
        T::of(cam.fx) * p[0] * iz + T::of(cam.cx),
        T::of(cam.fy) * p[1] * iz + T::of(cam.cy),
    ];
    let m = affine_map(cam, &r, p);
    let s = unpack_sym3(cov);
    // M Σ Mᵀ
    let mut ms = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for b in 0..3 {
            ms[a][b] = m[a][0] * s[0][b] + m[a][1] * s[1][b] + m[a][2] * s[2][b];
        }
    }
    let e = |a: usize, b: usize| ms[a][0] * m[b][0] + ms[a][1] * m[b][1] + ms[a][2] * m[b][2];
    Projected {
        mean,
        cov: [e(0, 0) + lowpass, e(0, 1), e(1, 1) + lowpass],
        depth: p[2],
    }
}

/// Gradient of `project_core` w.r.t. the world mean and packed covariance,
/// given gradients of `(mean2d, cov2d, depth)`.
fn project_core_vjp<T: Real>(
    cam: &Camera,
    u: &[T],
    cov: &[T],
    g_mean: [T; 2],
    g_cov: [T; 3],
    g_depth: T,
) -> ([T; 3], [T; 6]) {
    let (r, t) = camera_parts::<T>(cam);
    let p = cam_point(&r, &t, u);
    let (fx, fy) = (T::of(cam.fx), T::of(cam.fy));
    let two = T::of(2.0);
    let iz = T::one() / p[2];
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let m = affine_map(cam, &r, p);
    let s = unpack_sym3(cov);

    let half = T::of(0.5);
    let g = [[g_cov[0], g_cov[1] * half], [g_cov[1] * half, g_cov[2]]];

    // dL/dΣ = Mᵀ G M
    let mut gsig = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for a in 0..2 {
                for b in 0..2 {
                    acc = acc + m[a][i] * g[a][b] * m[b][j];
                }
            }
            gsig[i][j] = acc;
        }
    }

    // dL/dM = 2 G M Σ
    let mut gm = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for j in 0..3 {
            let mut acc = T::zero();
            for b in 0..2 {
                for k in 0..3 {
                    acc = acc + g[a][b] * m[b][k] * s[k][j];
                }
            }
            gm[a][j] = two * acc;
        }
    }
    // M = J R  ⇒  dL/dJ = dL/dM Rᵀ
    let mut gj = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for i in 0..3 {
            gj[a][i] = gm[a][0] * r[i][0] + gm[a][1] * r[i][1] + gm[a][2] * r[i][2];
        }
    }

    let mut gp = [T::zero(); 3];
    // Jacobian entries as functions of the camera-space point
    gp[0] = gp[0] + gj[0][2] * (-fx * iz2);
    gp[1] = gp[1] + gj[1][2] * (-fy * iz2);
    gp[2] = gp[2]
        + gj[0][0] * (-fx * iz2)
        + gj[0][2] * (two * fx * p[0] * iz3)
        + gj[1][1] * (-fy * iz2)
        + gj[1][2] * (two * fy * p[1] * iz3);
    // pinhole mean
    gp[0] = gp[0] + g_mean[0] * fx * iz;
    gp[1] = gp[1] + g_mean[1] * fy * iz;
    gp[2] = gp[2] - g_mean[0] * fx * p[0] * iz2 - g_mean[1] * fy * p[1] * iz2;
    gp[2] = gp[2] + g_depth;

    let mut gu = [T::zero(); 3];
    for (j, guj) in gu.iter_mut().enumerate() {
        *guj = r[0][j] * gp[0] + r[1][j] * gp[1] + r[2][j] * gp[2];
    }
    (gu, pack_sym3_grad(&gsig))
}

/// Inverse of a packed symmetric 2×2 matrix, `None` unless positive-definite.
pub fn conic<T: Real>(cov: [T; 3]) -> Option<[T; 3]> {
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > T::zero()) || !(cov[0] > T::zero()) {
        return None;
    }
    let inv = T::one() / det;
    Some([cov[2] * inv, -cov[1] * inv, cov[0] * inv])
}

/// Largest eigenvalue of a packed symmetric 2×2 matrix.
pub fn max_eigenvalue<T: Real>(cov: [T; 3]) -> T {
    let mid = T::of(0.5) * (cov[0] + cov[2]);
    let d = (mid * mid - (cov[0] * cov[2] - cov[1] * cov[1])).max(T::zero());
    mid + d.sqrt()
}

/// Projects one splat; `Culled` behind the near plane or when its 3σ
/// screen extent misses the image entirely.
pub fn project_gaussian(g: &Gaussian3D, cam: &Camera) -> Result<Projection> {
    let depth = cam.to_camera(g.mean)[2];
    if depth < cam.z_near {
        return Ok(Projection::Culled);
    }
    let cov3 = covariance_packed(g.rotation, g.scale);
    let p = project_core::<f64>(cam, LOW_PASS, &g.mean, &cov3);
    let radius = 3.0 * max_eigenvalue(p.cov).sqrt();
    let (w, h) = (cam.width as f64, cam.height as f64);
    if p.mean[0] + radius < -0.5
        || p.mean[0] - radius > w - 0.5
        || p.mean[1] + radius < -0.5
        || p.mean[1] - radius > h - 0.5
    {
        return Ok(Projection::Culled);
    }
    let conic = conic(p.cov).ok_or_else(|| Error::Numerical {
        op: "project_gaussian".into(),
        detail: "projected covariance is not positive-definite".into(),
    })?;
    Ok(Projection::Visible(Gaussian2D {
        mean: p.mean,
        cov: p.cov,
        depth: p.depth,
        conic,
    }))
}

/// Back-projects every pixel with positive depth into a world-space point
/// coloured by the image. `depth` is `H·W` row-major, `rgb` is `H·W·3`.
pub fn unproject(depth: &[f64], rgb: &[f64], cam: &Camera) -> Result<PointCloud> {
    let (w, h) = (cam.width, cam.height);
    if depth.len() != w * h || rgb.len() != w * h * 3 {
        return Err(Error::Input("depth/rgb sizes do not match the camera".into()));
    }
    let r = cam.rotation();
    let t = cam.translation();
    let mut coords = Vec::new();
    let mut colors = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let d = depth[y * w + x];
            if !(d > 0.0) || !d.is_finite() {
                continue;
            }
            let pc = [
                (x as f64 - cam.cx) / cam.fx * d,
                (y as f64 - cam.cy) / cam.fy * d,
                d,
            ];
            // world = Rᵀ (pc − t)
            let q = sub3(pc, t);
            for j in 0..3 {
                coords.push(r[0][j] * q[0] + r[1][j] * q[1] + r[2][j] * q[2]);
            }
            colors.extend_from_slice(&rgb[(y * w + x) * 3..(y * w + x) * 3 + 3]);
        }
    }
    PointCloud::new(coords, colors)
}

// ---------------------------------------------------------------------------
// Tape ops

/// `(q[N,4], s[N,3]) -> Σ[N,6]`.
pub struct CovarianceOp;

impl<T: Real> Op<T> for CovarianceOp {
    fn name(&self) -> &'static str {
        "build_covariance"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (q, s) = (inputs[0], inputs[1]);
        if q.cols() != 4 || s.cols() != 3 || q.rows() != s.rows() {
            return Err(contract("build_covariance: expects q[N,4] and s[N,3]"));
        }
        let n = q.rows();
        let mut out = Vec::with_capacity(n * 6);
        for i in 0..n {
            let qi = q.row(i);
            let si = s.row(i);
            out.extend_from_slice(&covariance_packed([qi[0], qi[1], qi[2], qi[3]], [si[0], si[1], si[2]]));
        }
        Ok(vec![Tensor::new(vec![n, 6], out)?])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, s) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad_or_zeros(0);
        let mut gq = Tensor::zeros(q.shape());
        let mut gs = Tensor::zeros(s.shape());
        for i in 0..q.rows() {
            let qi = q.row(i);
            let si = s.row(i);
            let (a, b) = covariance_vjp([qi[0], qi[1], qi[2], qi[3]], [si[0], si[1], si[2]], g.row(i));
            gq.row_mut(i).copy_from_slice(&a);
            gs.row_mut(i).copy_from_slice(&b);
        }
        Ok(vec![Some(gq), Some(gs)])
    }
}

/// Columns of the projected-splat tensor produced by [`ProjectOp`].
pub mod proj_col {
    pub const MEAN_X: usize = 0;
    pub const MEAN_Y: usize = 1;
    pub const COV_XX: usize = 2;
    pub const COV_XY: usize = 3;
    pub const COV_YY: usize = 4;
    pub const DEPTH: usize = 5;
    pub const WIDTH: usize = 6;
}

/// `(means[N,3], Σ[N,6]) -> [N,6]` rows of `(μx, μy, Σ′xx, Σ′xy, Σ′yy, depth)`.
///
/// Splats behind the near plane keep their depth and get zero footprint;
/// the rasterizer skips them and they receive no gradient.
pub struct ProjectOp {
    pub camera: Camera,
    pub lowpass: f64,
}

impl ProjectOp {
    pub fn new(camera: Camera) -> Self {
        Self {
            camera,
            lowpass: LOW_PASS,
        }
    }
}

impl<T: Real> Op<T> for ProjectOp {
    fn name(&self) -> &'static str {
        "project_gaussians"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (u, cov) = (inputs[0], inputs[1]);
        if u.cols() != 3 || cov.cols() != 6 || u.rows() != cov.rows() {
            return Err(contract("project_gaussians: expects means[N,3] and cov[N,6]"));
        }
        let (r, t) = camera_parts::<T>(&self.camera);
        let near = T::of(self.camera.z_near);
        let n = u.rows();
        let mut out = vec![T::zero(); n * proj_col::WIDTH];
        for i in 0..n {
            let row = &mut out[i * proj_col::WIDTH..(i + 1) * proj_col::WIDTH];
            let z = cam_point(&r, &t, u.row(i))[2];
            if z < near {
                row[proj_col::DEPTH] = z;
                continue;
            }
            let p = project_core(&self.camera, T::of(self.lowpass), u.row(i), cov.row(i));
            row[..2].copy_from_slice(&p.mean);
            row[2..5].copy_from_slice(&p.cov);
            row[proj_col::DEPTH] = p.depth;
        }
        Ok(vec![Tensor::new(vec![n, proj_col::WIDTH], out)?])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (u, cov) = (ctx.inputs[0], ctx.inputs[1]);
        let out = ctx.outputs[0];
        let g = ctx.grad_or_zeros(0);
        let near = T::of(self.camera.z_near);
        let mut gu = Tensor::zeros(u.shape());
        let mut gc = Tensor::zeros(cov.shape());
        for i in 0..u.rows() {
            if out.row(i)[proj_col::DEPTH] < near {
                continue;
            }
            let gi = g.row(i);
            let (a, b) = project_core_vjp(
                &self.camera,
                u.row(i),
                cov.row(i),
                [gi[0], gi[1]],
                [gi[2], gi[3], gi[4]],
                gi[5],
            );
            gu.row_mut(i).copy_from_slice(&a);
            gc.row_mut(i).copy_from_slice(&b);
        }
        Ok(vec![Some(gu), Some(gc)])
    }
}

impl<T: Real> Tape<T> {
    pub fn build_covariance(&mut self, q: Var, s: Var) -> Result<Var> {
        self.apply1(CovarianceOp, &[q, s])
    }

    pub fn project_gaussians(&mut self, means: Var, cov: Var, camera: &Camera) -> Result<Var> {
        self.apply1(ProjectOp::new(camera.clone()), &[means, cov])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(fx: f64, c: f64, size: usize) -> Camera {
        let mut w2c = [0.0; 16];
        w2c[0] = 1.0;
        w2c[5] = 1.0;
        w2c[10] = 1.0;
        w2c[15] = 1.0;
        Camera {
            fx,
            fy: fx,
            cx: c,
            cy: c,
            width: size,
            height: size,
            w2c,
            z_near: 0.05,
        }
    }

    fn quat_about_z(angle: f64) -> [f64; 4] {
        [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()]
    }

    fn matmul3(a: &Mat3<f64>, b: &Mat3<f64>) -> Mat3<f64> {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    }

    fn transpose3(a: &Mat3<f64>) -> Mat3<f64> {
        let mut t = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                t[i][j] = a[j][i];
            }
        }
        t
    }

    fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.map(|v| v / n)
    }

    fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
        [
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ]
    }

    #[test]
    fn covariance_identity_and_axis_scales() {
        let c = build_covariance([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(c, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let c = build_covariance([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(c, [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn covariance_quarter_turn_about_z() {
        // oracle: explicit R S Sᵀ Rᵀ
        let q = quat_about_z(std::f64::consts::FRAC_PI_2);
        let r = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let ss = [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let expected = matmul3(&matmul3(&r, &ss), &transpose3(&r));
        let got = build_covariance(q, [2.0, 1.0, 1.0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((got[i][j] - expected[i][j]).abs() < 1e-12);
            }
        }
        assert!((got[0][0] - 1.0).abs() < 1e-12 && (got[1][1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(build_covariance([0.0; 4], [1.0; 3]).is_err());
    }

    #[test]
    fn covariance_symmetric_with_scale_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random_quat(&mut rng);
            let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.01..0.5));
            let c = build_covariance(q, s).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(c[i][j], c[j][i]);
                }
            }
            // Σ R e_k = s_k² R e_k for each column of R
            let r = quat_to_rotmat(q);
            for k in 0..3 {
                let v = [r[0][k], r[1][k], r[2][k]];
                for i in 0..3 {
                    let cv: f64 = (0..3).map(|j| c[i][j] * v[j]).sum();
                    assert!((cv - s[k] * s[k] * v[i]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = axis_camera(100.0, 32.0, 64);
        let g = Gaussian3D {
            mean: [0.0, 0.0, 2.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [0.1; 3],
            opacity: 0.5,
            color: [0.0; 3],
            feature: vec![],
        };
        let Projection::Visible(p) = project_gaussian(&g, &cam).unwrap() else {
            panic!("culled")
        };
        assert_eq!(p.mean, [32.0, 32.0]);
        assert_eq!(p.depth, 2.0);
    }

    #[test]
    fn isotropic_covariance_matches_numerical_jacobian() {
        let cam = axis_camera(100.0, 32.0, 64);
        let sigma = 0.1;
        let u = [0.0, 0.0, 2.0];
        // oracle: finite-difference Jacobian of the pinhole map
        let h = 1e-6;
        let mut jac = [[0.0; 3]; 2];
        for k in 0..3 {
            let mut up = u;
            let mut dn = u;
            up[k] += h;
            dn[k] -= h;
            let (pu, _) = cam.project_point(up);
            let (pd, _) = cam.project_point(dn);
            for a in 0..2 {
                jac[a][k] = (pu[a] - pd[a]) / (2.0 * h);
            }
        }
        let mut expect = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                expect[a][b] = (0..3).map(|k| jac[a][k] * sigma * sigma * jac[b][k]).sum();
            }
        }
        let g = Gaussian3D {
            mean: u,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [sigma; 3],
            opacity: 0.5,
            color: [0.0; 3],
            feature: vec![],
        };
        let Projection::Visible(p) = project_gaussian(&g, &cam).unwrap() else {
            panic!("culled")
        };
        assert!((p.cov[0] - (expect[0][0] + LOW_PASS)).abs() < 1e-5);
        assert!((p.cov[1] - expect[0][1]).abs() < 1e-5);
        assert!((p.cov[2] - (expect[1][1] + LOW_PASS)).abs() < 1e-5);
        assert!((p.cov[0] - 25.3).abs() < 1e-6);
    }

    #[test]
    fn near_plane_culls() {
        let cam = axis_camera(100.0, 32.0, 64);
        let g = Gaussian3D {
            mean: [0.0, 0.0, 0.01],
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [0.01; 3],
            opacity: 0.5,
            color: [0.0; 3],
            feature: vec![],
        };
        assert_eq!(project_gaussian(&g, &cam).unwrap(), Projection::Culled);
    }

    #[test]
    fn off_screen_culls() {
        let cam = axis_camera(100.0, 32.0, 64);
        let g = Gaussian3D {
            mean: [5.0, 0.0, 2.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [0.01; 3],
            opacity: 0.5,
            color: [0.0; 3],
            feature: vec![],
        };
        assert_eq!(project_gaussian(&g, &cam).unwrap(), Projection::Culled);
    }

    fn look_at_cam(eye: [f64; 3]) -> Camera {
        Camera::look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 60.0, 60.0, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn rotating_splat_and_camera_together_preserves_footprint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let cam = look_at_cam([1.5, -1.2, 1.0]);
            let q = random_quat(&mut rng);
            let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.02..0.2));
            let mean: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
            let g = Gaussian3D {
                mean,
                rotation: q,
                scale: s,
                opacity: 0.5,
                color: [0.0; 3],
                feature: vec![],
            };
            let extra = random_quat(&mut rng);
            let re = quat_to_rotmat(extra);
            // q' = extra ⊗ q, u' = Re u, W' = W Reᵀ
            let rotated_mean: [f64; 3] =
                std::array::from_fn(|i| (0..3).map(|j| re[i][j] * mean[j]).sum());
            let g2 = Gaussian3D {
                mean: rotated_mean,
                rotation: quat_mul(extra, q),
                ..g.clone()
            };
            let w = cam.rotation();
            let w2 = matmul3(&w, &transpose3(&re));
            let mut cam2 = cam.clone();
            for i in 0..3 {
                for j in 0..3 {
                    cam2.w2c[i * 4 + j] = w2[i][j];
                }
            }
            let (Projection::Visible(a), Projection::Visible(b)) =
                (project_gaussian(&g, &cam).unwrap(), project_gaussian(&g2, &cam2).unwrap())
            else {
                panic!("culled")
            };
            for k in 0..3 {
                assert!((a.cov[k] - b.cov[k]).abs() < 1e-6, "{:?} vs {:?}", a.cov, b.cov);
            }
        }
    }

    #[test]
    fn projection_gradients_pass_gradcheck() {
        let cam = look_at_cam([1.4, 1.1, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 3;
            let u = Tensor::from_fn(&[n, 3], |_| rng.random_range(-0.3..0.3));
            let q = Tensor::from_fn(&[n, 4], |_| rng.random_range(-1.0..1.0));
            let s = Tensor::from_fn(&[n, 3], |_| rng.random_range(0.02..0.3));
            let w = Tensor::from_fn(&[n, 6], |_| rng.random_range(-1.0..1.0));
            let errs = gradcheck(
                |t, v| {
                    let qn = t.normalize_rows(v[1])?;
                    let c = t.build_covariance(qn, v[2])?;
                    let p = t.project_gaussians(v[0], c, &cam)?;
                    let wv = t.constant(w.clone());
                    let m = t.mul(p, wv)?;
                    t.sum_all(m)
                },
                &[u, q, s],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
        }
    }

    #[test]
    fn unproject_principal_pixel_lies_on_axis() {
        let cam = look_at_cam([1.0, 0.5, 0.8]);
        let (w, h) = (cam.width, cam.height);
        let mut depth = vec![0.0; w * h];
        let px = (cam.cx as usize, cam.cy as usize);
        depth[px.1 * w + px.0] = 1.25;
        let rgb = vec![0.5; w * h * 3];
        let cloud = unproject(&depth, &rgb, &cam).unwrap();
        assert_eq!(cloud.len(), 1);
        let c = cam.center();
        let r = cam.rotation();
        let axis = r[2];
        for k in 0..3 {
            assert!((cloud.coords()[k] - (c[k] + 1.25 * axis[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn unproject_then_project_roundtrips() {
        let cam = look_at_cam([1.3, -0.7, 1.1]);
        let (w, h) = (cam.width, cam.height);
        let depth: Vec<f64> = (0..w * h).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
        let rgb = vec![0.2; w * h * 3];
        let cloud = unproject(&depth, &rgb, &cam).unwrap();
        for (i, p) in cloud.coords().chunks(3).enumerate() {
            let (uv, d) = cam.project_point([p[0], p[1], p[2]]);
            assert!((uv[0] - (i % w) as f64).abs() < 1e-4);
            assert!((uv[1] - (i / w) as f64).abs() < 1e-4);
            assert!((d - depth[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn unproject_four_pixels_matches_ray_formula() {
        let cam = axis_camera(50.0, 1.0, 2);
        let depth = [1.0, 2.0, 0.0, 4.0, 0.5, 0.0, 0.0, 0.0];
        let depth = &depth[..4];
        let rgb: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let cloud = unproject(depth, &rgb, &cam).unwrap();
        // pixel (2,?) has zero depth and is skipped
        let mut expected = Vec::new();
        for (i, &d) in depth.iter().enumerate() {
            if d > 0.0 {
                let (x, y) = ((i % 2) as f64, (i / 2) as f64);
                expected.extend_from_slice(&[(x - 1.0) / 50.0 * d, (y - 1.0) / 50.0 * d, d]);
            }
        }
        assert_eq!(cloud.len(), 3);
        for (a, b) in cloud.coords().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let all_invalid = unproject(&[0.0; 4], &rgb, &cam).unwrap();
        assert!(all_invalid.is_empty());
    }
}
