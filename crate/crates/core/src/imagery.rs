//! Synthetic small-body imagery with exact geometric ground truth.
//!
//! The renderer ray-traces a triaxial ellipsoid carrying signed radial
//! perturbations (craters dug in, boulders raised, plus a low-amplitude
//! directional wave field that gives the surface a fine texture) under
//! Lambertian shading, then quantizes to 8 bits. It is deliberately simple:
//! the point is illumination-dependent CoB != CoF and resolution-dependent
//! surface detail, not photorealism.
//!
//! Frames: W is inertial and body-centered, Z along the spin axis, X toward
//! the projection of the Sun direction on the equatorial plane. AS is the
//! body-fixed frame, rotated from W about Z by the rotation phase. The
//! camera frame has +Z along the boresight, +X right and +Y down in the
//! image; viewpoints always point the boresight at the body center of mass.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::labels::{Frame, LabelSet, LabelStrategy};
use crate::navmetrics::spherical_to_cartesian;
use crate::preprocess::{blob_analysis, otsu_threshold};

/// Pinhole camera with a square sensor and square field of view. The pixel
/// at integer index `(u, v)` samples the continuous image plane at exactly
/// `(u, v)`; the principal point sits at `(sensor_px/2, sensor_px/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fov_deg: f64,
    pub sensor_px: usize,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            fov_deg: 10.0,
            sensor_px: 1024,
        }
    }
}

impl CameraModel {
    pub fn new(fov_deg: f64, sensor_px: usize) -> Self {
        CameraModel { fov_deg, sensor_px }
    }

    /// Focal length in pixels: `(sensor/2) / tan(fov/2)`.
    pub fn focal_px(&self) -> f64 {
        (self.sensor_px as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    pub fn principal_point(&self) -> [f64; 2] {
        let c = self.sensor_px as f64 / 2.0;
        [c, c]
    }

    /// Calibration matrix K.
    pub fn k_matrix(&self) -> Matrix3<f64> {
        let f = self.focal_px();
        let [cx, cy] = self.principal_point();
        Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
    }

    /// Applies K^-1 to a homogeneous pixel, yielding image-plane
    /// coordinates with unit boresight component.
    pub fn unproject(&self, uv: [f64; 2]) -> Vector3<f64> {
        let f = self.focal_px();
        let [cx, cy] = self.principal_point();
        Vector3::new((uv[0] - cx) / f, (uv[1] - cy) / f, 1.0)
    }

    /// Projects a CAM-frame point (+Z boresight) to pixels.
    pub fn project(&self, p_cam: &Vector3<f64>) -> [f64; 2] {
        let f = self.focal_px();
        let [cx, cy] = self.principal_point();
        [cx + f * p_cam.x / p_cam.z, cy + f * p_cam.y / p_cam.z]
    }
}

/// A radially symmetric surface feature: a smooth bump (boulder) or
/// depression (crater) centered on a surface direction, with compact
/// angular support. `magnitude_frac` is relative to the local base-ellipsoid
/// radius, so uniform body scaling leaves the shape unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFeature {
    /// Unit direction in the AS (body-fixed) frame.
    pub dir: [f64; 3],
    /// Angular radius of the footprint, radians.
    pub angular_radius: f64,
    /// Height (boulder) or depth (crater) as a fraction of local radius.
    pub magnitude_frac: f64,
}

/// One directional wave of the fine texture field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureWave {
    pub dir: [f64; 3],
    pub freq: f64,
    pub phase: f64,
}

/// Procedural small body: triaxial ellipsoid plus signed radial features.
/// The spin axis is the +Z axis of W by construction of the W frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyModel {
    /// Semi-axes in km, AS frame.
    pub semi_axes_km: [f64; 3],
    pub craters: Vec<SurfaceFeature>,
    pub boulders: Vec<SurfaceFeature>,
    /// Fine-texture amplitude as a fraction of local radius.
    pub texture_amp_frac: f64,
    pub texture_waves: Vec<TextureWave>,
    pub albedo: f64,
    /// AS-to-W rotation angle about Z at the imaging epoch, radians.
    pub rotation_phase_rad: f64,
}

impl BodyModel {
    /// Deterministic procedural body. Crater depths and boulder heights are
    /// bounded fractions, so the surface never inverts.
    pub fn procedural(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = 1.0;
        let b = rng.random_range(0.6..0.9);
        let c = rng.random_range(0.5..0.85);
        let random_dir = |rng: &mut ChaCha12Rng| -> [f64; 3] {
            loop {
                let v: Vector3<f64> = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let n = v.norm();
                if n > 1e-3 && n < 1.0 {
                    let u = v / n;
                    return [u.x, u.y, u.z];
                }
            }
        };
        let craters = (0..8)
            .map(|_| SurfaceFeature {
                dir: random_dir(&mut rng),
                angular_radius: rng.random_range(0.12..0.3),
                magnitude_frac: rng.random_range(0.04..0.12),
            })
            .collect();
        let boulders = (0..10)
            .map(|_| SurfaceFeature {
                dir: random_dir(&mut rng),
                angular_radius: rng.random_range(0.04..0.12),
                magnitude_frac: rng.random_range(0.05..0.15),
            })
            .collect();
        let texture_waves = (0..12)
            .map(|_| TextureWave {
                dir: random_dir(&mut rng),
                freq: rng.random_range(10.0..45.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            })
            .collect();
        let body = BodyModel {
            semi_axes_km: [a, b, c],
            craters,
            boulders,
            texture_amp_frac: 0.006,
            texture_waves,
            albedo: rng.random_range(0.75..0.95),
            rotation_phase_rad: rng.random_range(0.0..std::f64::consts::TAU),
        };
        body.scaled_to_fov(&CameraModel::default(), 0.9)
    }

    /// Base ellipsoid radius along a unit AS direction.
    fn base_radius(&self, d: &Vector3<f64>) -> f64 {
        let [a, b, c] = self.semi_axes_km;
        let q = (d.x / a).powi(2) + (d.y / b).powi(2) + (d.z / c).powi(2);
        1.0 / q.sqrt()
    }

    /// Dimensionless signed perturbation along a unit AS direction.
    fn shape_frac(&self, d: &Vector3<f64>) -> f64 {
        fn bump(cosang: f64, angular_radius: f64) -> f64 {
            // Smooth compact bump in angular distance.
            let ang = cosang.clamp(-1.0, 1.0).acos();
            if ang >= angular_radius {
                0.0
            } else {
                let t = ang / angular_radius;
                let s = 1.0 - t * t;
                s * s
            }
        }
        let mut frac = 0.0;
        for b in &self.boulders {
            let cd = d.x * b.dir[0] + d.y * b.dir[1] + d.z * b.dir[2];
            frac += b.magnitude_frac * bump(cd, b.angular_radius);
        }
        for c in &self.craters {
            let cd = d.x * c.dir[0] + d.y * c.dir[1] + d.z * c.dir[2];
            frac -= c.magnitude_frac * bump(cd, c.angular_radius);
        }
        if self.texture_amp_frac > 0.0 && !self.texture_waves.is_empty() {
            let mut tex = 0.0;
            for w in &self.texture_waves {
                let proj = d.x * w.dir[0] + d.y * w.dir[1] + d.z * w.dir[2];
                tex += (w.freq * proj + w.phase).sin();
            }
            frac += self.texture_amp_frac * tex / (self.texture_waves.len() as f64).sqrt();
        }
        frac
    }

    /// Surface radius along a unit AS direction.
    pub fn radius(&self, d: &Vector3<f64>) -> f64 {
        self.base_radius(d) * (1.0 + self.shape_frac(d))
    }

    /// Conservative outer/inner radial bounds.
    fn radial_bounds(&self) -> (f64, f64) {
        let [a, b, c] = self.semi_axes_km;
        let pos: f64 = self.boulders.iter().map(|f| f.magnitude_frac).sum::<f64>()
            + self.texture_amp_frac * (self.texture_waves.len() as f64).sqrt();
        let neg: f64 = self.craters.iter().map(|f| f.magnitude_frac).sum::<f64>()
            + self.texture_amp_frac * (self.texture_waves.len() as f64).sqrt();
        let rmax = a.max(b).max(c) * (1.0 + pos);
        let rmin = a.min(b).min(c) * (1.0 - neg).max(0.05);
        (rmax, rmin)
    }

    /// Largest possible radius, used for scaling and bounding.
    pub fn max_radius(&self) -> f64 {
        self.radial_bounds().0
    }

    /// Returns a uniformly scaled copy whose apparent angular diameter at
    /// 5 km range equals `fill * fov`.
    pub fn scaled_to_fov(&self, camera: &CameraModel, fill: f64) -> Self {
        let half_apparent = fill * camera.fov_deg.to_radians() / 2.0;
        let target_rmax = 5.0 * half_apparent.sin();
        let s = target_rmax / self.max_radius();
        let mut out = self.clone();
        for ax in &mut out.semi_axes_km {
            *ax *= s;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.semi_axes_km.iter().any(|&a| a <= 0.0) {
            return Err(Error::invalid("semi-axes must be positive"));
        }
        let neg: f64 = self.craters.iter().map(|f| f.magnitude_frac).sum();
        if neg >= 0.9 {
            return Err(Error::invalid(
                "total crater depth would invert the surface",
            ));
        }
        if !(0.0..=1.0).contains(&self.albedo) {
            return Err(Error::invalid("albedo must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Viewpoint in spherical coordinates. The angles are W-frame azimuth and
/// elevation of the spacecraft position (the `frame` tag records that).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewpointSample {
    pub rho_km: f64,
    pub phi1_deg: f64,
    pub phi2_deg: f64,
    pub frame: Frame,
}

pub const RHO_RANGE: [f64; 2] = [5.0, 30.0];
pub const PHI1_RANGE: [f64; 2] = [-90.0, 90.0];
pub const PHI2_RANGE: [f64; 2] = [-45.0, 45.0];

/// Everything the evaluation side needs to know about one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Spacecraft position in the body-centered W frame, km.
    pub position_w: [f64; 3],
    /// Spacecraft position in the body-fixed AS frame, km.
    pub position_as: [f64; 3],
    /// (phi1 deg, phi2 deg, rho km) in W.
    pub sph_w: [f64; 3],
    /// (phi1 deg, phi2 deg, rho km) in AS.
    pub sph_as: [f64; 3],
    /// Center of brightness in S0 pixels (Otsu + blob analysis on the
    /// rendered image, the same path preprocessing uses).
    pub cob: [f64; 2],
    /// Center of figure: pinhole projection of the body CoM, S0 pixels.
    pub cof: [f64; 2],
    /// CoF - CoB, S0 pixels.
    pub delta: [f64; 2],
    pub rho_km: f64,
    /// Attitude quaternion rotating CAM-frame vectors into W, (w, x, y, z).
    pub q_cam_to_w: [f64; 4],
    /// Sun direction in W (unit, toward the Sun).
    pub sun_w: [f64; 3],
}

impl GroundTruth {
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.q_cam_to_w;
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
    }

    /// Exact labels for a strategy, in S0 units.
    pub fn labels_for(&self, strategy: LabelStrategy) -> LabelSet {
        match strategy {
            LabelStrategy::DeltaRho => LabelSet::DeltaRho {
                delta: self.delta,
                rho: self.rho_km,
            },
            LabelStrategy::Spherical(frame) => {
                let s = match frame {
                    Frame::W => self.sph_w,
                    Frame::AS => self.sph_as,
                };
                LabelSet::Spherical {
                    frame,
                    phi1_deg: s[0],
                    phi2_deg: s[1],
                    rho: s[2],
                }
            }
            LabelStrategy::Cartesian(frame) => LabelSet::Cartesian {
                frame,
                pos: match frame {
                    Frame::W => self.position_w,
                    Frame::AS => self.position_as,
                },
            },
        }
    }
}

/// CAM-frame basis expressed in W for a boresight pointed at the origin.
/// +Z toward the body, +X right, +Y down in the image. Valid whenever the
/// boresight is not parallel to the spin axis, which the phi2 bounds
/// guarantee.
pub fn camera_attitude(p_sc_w: &Vector3<f64>) -> UnitQuaternion<f64> {
    let z = Unit::new_normalize(-p_sc_w);
    let x = Unit::new_normalize(z.cross(&Vector3::z()));
    let y = z.cross(&x);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[
        x.into_inner(),
        y,
        z.into_inner(),
    ]));
    UnitQuaternion::from_rotation_matrix(&rot)
}

fn rot_z(angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), angle)
}

/// Spherical angles (deg) of a position vector under the Omega convention.
fn cart_to_sph(p: &Vector3<f64>) -> [f64; 3] {
    let rho = p.norm();
    let phi2 = (p.z / rho).asin().to_degrees();
    let phi1 = p.y.atan2(p.x).to_degrees();
    [phi1, phi2, rho]
}

/// Renders one view. Returns the 8-bit-quantized image and exact ground
/// truth (including the blob-analysis CoB measured on that image).
pub fn render(
    body: &BodyModel,
    camera: &CameraModel,
    view: &ViewpointSample,
    sun_w: &Vector3<f64>,
) -> Result<(GrayImage, GroundTruth)> {
    body.validate()?;
    let rho = view.rho_km;
    let p_sc_w = spherical_to_cartesian(view.phi1_deg, view.phi2_deg, rho);
    let p_sc_w = Vector3::new(p_sc_w[0], p_sc_w[1], p_sc_w[2]);

    let (r_out, r_in) = body.radial_bounds();
    let apparent_deg = 2.0 * (r_out / rho).min(1.0).asin().to_degrees();
    if apparent_deg > camera.fov_deg {
        return Err(Error::BodyOutsideFov {
            apparent_deg,
            half_fov_deg: camera.fov_deg / 2.0,
        });
    }

    let q = camera_attitude(&p_sc_w);
    let r_w_from_cam = q.to_rotation_matrix();
    // Everything below works in the AS frame, where the surface function
    // lives: rotate camera origin and rays once.
    let w_to_as = rot_z(-body.rotation_phase_rad);
    let origin_as = w_to_as * p_sc_w;
    let sun_as = w_to_as * sun_w.normalize();

    let n_px = camera.sensor_px;
    let mut img = GrayImage::new(n_px, n_px);
    let march_step = 0.02 * r_out;
    let eps = 1e-4 * r_out;

    for v in 0..n_px {
        for u in 0..n_px {
            let dir_cam = camera.unproject([u as f64, v as f64]).normalize();
            let dir_as = w_to_as * (r_w_from_cam * dir_cam);
            if let Some(t_hit) = trace_surface(body, &origin_as, &dir_as, r_out, r_in, march_step)
            {
                let hit = origin_as + dir_as * t_hit;
                let n = surface_normal(body, &hit, eps);
                let shade = body.albedo * n.dot(&sun_as).max(0.0);
                img.set(u, v, shade as f32);
            }
        }
    }
    img.quantize_8bit();

    let threshold = otsu_threshold(&img);
    let blob = blob_analysis(&img, threshold)?;
    let [cx, cy] = camera.principal_point();
    let cof = [cx, cy];
    let delta = [cof[0] - blob.cob[0], cof[1] - blob.cob[1]];
    let pos_as = w_to_as * p_sc_w;
    let qv = q.as_vector(); // (x, y, z, w) storage
    let truth = GroundTruth {
        position_w: [p_sc_w.x, p_sc_w.y, p_sc_w.z],
        position_as: [pos_as.x, pos_as.y, pos_as.z],
        sph_w: cart_to_sph(&p_sc_w),
        sph_as: cart_to_sph(&pos_as),
        cob: blob.cob,
        cof,
        delta,
        rho_km: rho,
        q_cam_to_w: [qv[3], qv[0], qv[1], qv[2]],
        sun_w: {
            let s = sun_w.normalize();
            [s.x, s.y, s.z]
        },
    };
    Ok((img, truth))
}

/// First intersection of a ray with the perturbed surface: enter through
/// the outer bounding ellipsoid, march the thin shell down to the inner
/// bound, bisect on sign change of |x| - r(x/|x|).
fn trace_surface(
    body: &BodyModel,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    r_out: f64,
    _r_in: f64,
    step: f64,
) -> Option<f64> {
    // Outer bounding sphere, inflated by one step so the entry point is
    // strictly outside the surface even when the body is an exact sphere
    // (otherwise the sign of g at entry is floating-point noise and limb
    // pixels drop out).
    let r_bound = r_out + step;
    let b = origin.dot(dir);
    let c = origin.dot(origin) - r_bound * r_bound;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq).max(0.0);
    let t1 = -b + sq;
    let g = |t: f64| -> f64 {
        let p = origin + dir * t;
        let n = p.norm();
        n - body.radius(&(p / n))
    };
    let mut t_prev = t0;
    let mut g_prev = g(t_prev);
    let mut t = t0 + step;
    while t <= t1 {
        let g_t = g(t);
        if g_prev > 0.0 && g_t <= 0.0 {
            // Bisect the bracket.
            let (mut lo, mut hi) = (t_prev, t);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if g(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        t_prev = t;
        g_prev = g_t;
        t += step;
    }
    None
}

/// Outward surface normal by central differences of the implicit function.
fn surface_normal(body: &BodyModel, p: &Vector3<f64>, eps: f64) -> Vector3<f64> {
    let f = |q: &Vector3<f64>| -> f64 {
        let n = q.norm();
        n - body.radius(&(q / n))
    };
    let g = Vector3::new(
        f(&(p + Vector3::new(eps, 0.0, 0.0))) - f(&(p - Vector3::new(eps, 0.0, 0.0))),
        f(&(p + Vector3::new(0.0, eps, 0.0))) - f(&(p - Vector3::new(0.0, eps, 0.0))),
        f(&(p + Vector3::new(0.0, 0.0, eps))) - f(&(p - Vector3::new(0.0, 0.0, eps))),
    );
    g.normalize()
}

/// Seeded uniform sampling of viewpoints within the paper's bounds.
pub fn sample_cloud(n: usize, seed: u64) -> Vec<ViewpointSample> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ViewpointSample {
            rho_km: rng.random_range(RHO_RANGE[0]..=RHO_RANGE[1]),
            phi1_deg: rng.random_range(PHI1_RANGE[0]..=PHI1_RANGE[1]),
            phi2_deg: rng.random_range(PHI2_RANGE[0]..=PHI2_RANGE[1]),
            frame: Frame::W,
        })
        .collect()
}

/// Default Sun direction in W: in the X-Z plane (the W X-axis is the Sun's
/// equatorial projection by definition), elevated 20 degrees.
pub fn default_sun_w() -> Vector3<f64> {
    let e = 20f64.to_radians();
    Vector3::new(e.cos(), 0.0, e.sin())
}

/// One manifest line: image file, strategy labels in S0 units, full truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub idx: usize,
    pub file: String,
    pub labels: LabelSet,
    pub truth: GroundTruth,
}

/// Dataset-level metadata, written as `meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub strategy: String,
    pub body_seed: Option<u64>,
    pub camera: CameraModel,
    pub body: BodyModel,
    pub sun_w: [f64; 3],
    pub count: usize,
    pub split: Option<[usize; 3]>,
    pub cloud_seed: u64,
}

/// A rendered dataset on disk: `meta.json`, `manifest.jsonl`, and an
/// `images/` directory of 8-bit PNGs.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.jsonl")
    }

    pub fn meta_path(dir: &Path) -> PathBuf {
        dir.join("meta.json")
    }

    /// Loads a previously built dataset.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_raw = std::fs::read_to_string(Self::meta_path(dir))
            .map_err(|e| Error::io(Self::meta_path(dir), e))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_raw)?;
        let manifest_raw = std::fs::read_to_string(Self::manifest_path(dir))
            .map_err(|e| Error::io(Self::manifest_path(dir), e))?;
        let mut records = Vec::new();
        for line in manifest_raw.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        Ok(DatasetManifest {
            dir: dir.to_path_buf(),
            meta,
            records,
        })
    }

    pub fn image_path(&self, rec: &ManifestRecord) -> PathBuf {
        self.dir.join(&rec.file)
    }
}

/// Renders every viewpoint and writes images plus the manifest. On failure
/// the partially written output directory is removed so no half-built
/// dataset survives.
pub fn build_dataset(
    body: &BodyModel,
    camera: &CameraModel,
    cloud: &[ViewpointSample],
    strategy: LabelStrategy,
    sun_w: &Vector3<f64>,
    cloud_seed: u64,
    split: Option<[usize; 3]>,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let created = !out_dir.exists();
    let result = build_dataset_inner(
        body, camera, cloud, strategy, sun_w, cloud_seed, split, out_dir,
    );
    if result.is_err() && created {
        let _ = std::fs::remove_dir_all(out_dir);
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn build_dataset_inner(
    body: &BodyModel,
    camera: &CameraModel,
    cloud: &[ViewpointSample],
    strategy: LabelStrategy,
    sun_w: &Vector3<f64>,
    cloud_seed: u64,
    split: Option<[usize; 3]>,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let manifest_path = DatasetManifest::manifest_path(out_dir);
    let file = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut manifest = std::io::BufWriter::new(file);
    // Views are independent, so render on all cores; the result order (and
    // therefore the dataset) does not depend on the thread count. Writing
    // stays sequential.
    let rendered = cloud
        .par_iter()
        .map(|view| render(body, camera, view, sun_w))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(cloud.len());
    for (idx, (img, truth)) in rendered.into_iter().enumerate() {
        let file = format!("images/img_{idx:05}.png");
        img.save_png(&out_dir.join(&file))?;
        let rec = ManifestRecord {
            idx,
            file,
            labels: truth.labels_for(strategy),
            truth,
        };
        let line = serde_json::to_string(&rec)?;
        manifest
            .write_all(line.as_bytes())
            .and_then(|_| manifest.write_all(b"\n"))
            .map_err(|e| Error::io(&manifest_path, e))?;
        records.push(rec);
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    let meta = DatasetMeta {
        strategy: strategy.tag().to_string(),
        body_seed: None,
        camera: camera.clone(),
        body: body.clone(),
        sun_w: {
            let s = sun_w.normalize();
            [s.x, s.y, s.z]
        },
        count: cloud.len(),
        split,
        cloud_seed,
    };
    let meta_path = DatasetManifest::meta_path(out_dir);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(DatasetManifest {
        dir: out_dir.to_path_buf(),
        meta,
        records,
    })
}
