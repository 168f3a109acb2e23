//! Analytic test scenes with exact depth maps and closed-form
//! correspondence oracles.
//!
//! Scenes are built from ray-traceable primitives (an infinite textured
//! plane, a sphere, an optional occluder rectangle hovering between plane
//! and cameras), so every depth value, pixel transfer and visibility bit
//! has a closed form that tests can trust to near machine precision.

use std::fmt;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::batch::{BatchError, MultiViewBatch};
use crate::cameras::{read_cameras, write_cameras, CameraFileError};
use crate::correspondence::{latent_grid_dims, token_center};
use crate::geometry::{project, CameraParams, GeometryError};
use crate::grid::{FeatureGrid, GridError, Raster};
use crate::mvdt::{read_feature_grid, read_raster, write_feature_grid, write_raster, MvdtError};

const CAMERA_RADIUS: f64 = 4.0;
const CAMERA_ELEVATION_DEG: f64 = 55.0;
const SPHERE_RADIUS: f64 = 1.0;
const OCCLUDER_Z: f64 = 1.0;
const SEGMENT_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    BadSpec(String),
    #[error("missing scene file: {0}")]
    MissingFile(String),
    #[error("bad scene manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Mvdt(#[from] MvdtError),
    #[error(transparent)]
    CameraFile(#[from] CameraFileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Plane,
    Sphere,
    PlaneWithOccluder,
    MirroredTexture,
}

impl SceneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SceneKind::Plane => "plane",
            SceneKind::Sphere => "sphere",
            SceneKind::PlaneWithOccluder => "plane_occluder",
            SceneKind::MirroredTexture => "mirrored",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plane" => Some(SceneKind::Plane),
            "sphere" => Some(SceneKind::Sphere),
            "plane_occluder" => Some(SceneKind::PlaneWithOccluder),
            "mirrored" => Some(SceneKind::MirroredTexture),
            _ => None,
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub n_views: usize,
    pub image_size: usize,
    pub seed: u64,
    pub patch: usize,
    pub feat_dim: usize,
    pub span_deg: f64,
    /// Spatial frequency multiplier for the texture field. 1.0 gives
    /// token-distinctive features for matching tests; small values give
    /// fields smooth at token scale, whose corresponding tokens carry
    /// near-equal features the way real multi-view renders do.
    pub texture_scale: f64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, n_views: usize, image_size: usize, seed: u64) -> Self {
        Self {
            kind,
            n_views,
            image_size,
            seed,
            patch: 8,
            feat_dim: 16,
            span_deg: 60.0,
            texture_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.n_views == 0 {
            return Err(SceneError::BadSpec("need at least one view".into()));
        }
        if self.image_size == 0 || self.patch == 0 {
            return Err(SceneError::BadSpec("zero image or patch size".into()));
        }
        if self.image_size % self.patch != 0 {
            return Err(SceneError::BadSpec(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.feat_dim == 0 {
            return Err(SceneError::BadSpec("zero feature dimension".into()));
        }
        if !(0.0..=360.0).contains(&self.span_deg) {
            return Err(SceneError::BadSpec(format!(
                "camera span {} outside [0, 360]",
                self.span_deg
            )));
        }
        if !(self.texture_scale > 0.0 && self.texture_scale.is_finite()) {
            return Err(SceneError::BadSpec(format!(
                "texture scale {} must be positive",
                self.texture_scale
            )));
        }
        Ok(())
    }
}

/// Axis-aligned occluder rectangle at a fixed height above the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccluderRect {
    pub z: f64,
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl OccluderRect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceId {
    Plane,
    Sphere,
    Occluder,
}

#[derive(Debug, Clone, Copy)]
pub struct SceneHit {
    pub point: Point3<f64>,
    pub depth: f64,
    pub surface: SurfaceId,
}

/// Result of transferring a source pixel into a target view.
#[derive(Debug, Clone, Copy)]
pub struct OracleTransfer {
    pub x: f64,
    pub y: f64,
    /// The hit point projects in front of the target camera.
    pub projected: bool,
    /// Projected, inside the target image and not blocked by any surface.
    pub visible: bool,
}

/// Closed-form scene model shared by the generator and by tests.
#[derive(Debug, Clone)]
pub struct SceneOracle {
    kind: SceneKind,
    cameras: Vec<CameraParams>,
    occluder: Option<OccluderRect>,
}

impl SceneOracle {
    pub fn cameras(&self) -> &[CameraParams] {
        &self.cameras
    }

    pub fn kind(&self) -> SceneKind {
        self.kind
    }

    pub fn occluder(&self) -> Option<&OccluderRect> {
        self.occluder.as_ref()
    }

    fn has_plane(&self) -> bool {
        self.kind != SceneKind::Sphere
    }

    /// First surface hit by the ray through the given pixel, if any.
    pub fn hit(&self, view: usize, px: (f64, f64)) -> Option<SceneHit> {
        let cam = &self.cameras[view];
        let origin = cam.center();
        let dir = cam.pixel_ray(px.0, px.1);
        let mut best: Option<SceneHit> = None;
        let mut consider = |t: f64, surface: SurfaceId| {
            if t > SEGMENT_EPS && best.map_or(true, |b| t < b.depth) {
                best = Some(SceneHit {
                    point: origin + dir * t,
                    depth: t,
                    surface,
                });
            }
        };

        if self.has_plane() {
            // dir is scaled so its camera-space z is 1, hence depth == t.
            if dir.z.abs() > SEGMENT_EPS {
                consider(-origin.z / dir.z, SurfaceId::Plane);
            }
            if let Some(rect) = &self.occluder {
                if dir.z.abs() > SEGMENT_EPS {
                    let t = (rect.z - origin.z) / dir.z;
                    let p = origin + dir * t;
                    if rect.contains(p.x, p.y) {
                        consider(t, SurfaceId::Occluder);
                    }
                }
            }
        } else {
            // |o + t d|^2 = r^2, smallest positive root.
            let oc = origin.coords;
            let a = dir.dot(&dir);
            let b = 2.0 * oc.dot(&dir);
            let c = oc.dot(&oc) - SPHERE_RADIUS * SPHERE_RADIUS;
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                let t = if t0 > SEGMENT_EPS { t0 } else { t1 };
                consider(t, SurfaceId::Sphere);
            }
        }
        best
    }

    /// Whether `point` (on `surface`) has an unblocked straight line to the
    /// camera center of `view`.
    pub fn unblocked(&self, view: usize, point: &Point3<f64>, surface: SurfaceId) -> bool {
        let cam_center = self.cameras[view].center();
        let seg = cam_center - point;
        if self.kind == SceneKind::Sphere {
            // A convex surface blocks exactly its own back side.
            return point.coords.dot(&seg) > 0.0;
        }
        if surface == SurfaceId::Occluder {
            // Nothing sits between the occluder and the cameras.
            return true;
        }
        if let Some(rect) = &self.occluder {
            let dz = seg.z;
            if dz.abs() > SEGMENT_EPS {
                let s = (rect.z - point.z) / dz;
                if s > SEGMENT_EPS && s < 1.0 - SEGMENT_EPS {
                    let cross = point + seg * s;
                    if rect.contains(cross.x, cross.y) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Exact correspondence of a source pixel in a target view, with the
    /// mutual-visibility verdict. `None` when the source pixel sees nothing.
    pub fn transfer(&self, source: usize, px: (f64, f64), target: usize) -> Option<OracleTransfer> {
        let hit = self.hit(source, px)?;
        let cam = &self.cameras[target];
        match project(&hit.point, cam) {
            Ok((x, y, _z)) => {
                let visible =
                    cam.contains(x, y) && self.unblocked(target, &hit.point, hit.surface);
                Some(OracleTransfer {
                    x,
                    y,
                    projected: true,
                    visible,
                })
            }
            Err(_) => Some(OracleTransfer {
                x: -1.0,
                y: -1.0,
                projected: false,
                visible: false,
            }),
        }
    }

    /// True when the source pixel's surface point is blocked by the
    /// occluder (or sphere back side) in the target view.
    pub fn occluded_in(&self, source: usize, px: (f64, f64), target: usize) -> Option<bool> {
        let hit = self.hit(source, px)?;
        Some(!self.unblocked(target, &hit.point, hit.surface))
    }
}

/// Smooth seeded random field: a handful of sinusoids per channel over
/// world coordinates. Smooth enough that nearby surface points stay highly
/// correlated, rich enough that distinct tokens are distinguishable.
#[derive(Debug, Clone)]
pub struct TextureField {
    mirrored_x: bool,
    // per channel: (amplitude, kx, ky, kz, phase)
    waves: Vec<Vec<(f64, f64, f64, f64, f64)>>,
}

impl TextureField {
    fn new(channels: usize, seed: u64, mirrored_x: bool, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..channels)
            .map(|_| {
                (0..4)
                    .map(|j| {
                        let freq = scale * if j == 3 { 6.0 } else { 2.5 };
                        (
                            rng.random_range(0.3..1.0_f64) * if j == 3 { 0.4 } else { 1.0 },
                            rng.random_range(-freq..freq),
                            rng.random_range(-freq..freq),
                            rng.random_range(-freq..freq),
                            rng.random_range(0.0..std::f64::consts::TAU),
                        )
                    })
                    .collect()
            })
            .collect();
        Self { mirrored_x, waves }
    }

    pub fn channels(&self) -> usize {
        self.waves.len()
    }

    pub fn sample(&self, p: &Point3<f64>, out: &mut [f32]) {
        let x = if self.mirrored_x { p.x.abs() } else { p.x };
        for (c, waves) in self.waves.iter().enumerate() {
            let mut v = 0.0;
            for &(a, kx, ky, kz, phase) in waves {
                v += a * (kx * x + ky * p.y + kz * p.z + phase).sin();
            }
            out[c] = v as f32;
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub spec: SceneSpec,
    pub batch: MultiViewBatch,
    pub features: Vec<FeatureGrid>,
    pub oracle: SceneOracle,
}

fn arc_cameras(spec: &SceneSpec) -> Result<Vec<CameraParams>, SceneError> {
    let size = spec.image_size as f64;
    let f = size * 1.1;
    let c = size / 2.0 - 0.5;
    let elev = CAMERA_ELEVATION_DEG.to_radians();
    let span = spec.span_deg.to_radians();
    (0..spec.n_views)
        .map(|i| {
            let theta = if spec.n_views == 1 {
                0.0
            } else {
                -span / 2.0 + span * i as f64 / (spec.n_views - 1) as f64
            };
            let eye = Point3::new(
                CAMERA_RADIUS * elev.cos() * theta.sin(),
                CAMERA_RADIUS * elev.cos() * theta.cos(),
                CAMERA_RADIUS * elev.sin(),
            );
            CameraParams::from_look_at(
                eye,
                Point3::origin(),
                Vector3::z(),
                f,
                f,
                c,
                c,
                spec.image_size as u32,
                spec.image_size as u32,
            )
            .map_err(SceneError::from)
        })
        .collect()
}

/// Occluder rectangle casting a prescribed shadow onto the plane from the
/// last camera. Mapping shadow corners through the camera center keeps the
/// rectangle axis-aligned, so the shadow boundary is exact.
fn occluder_casting_shadow(cam: &CameraParams, shadow: (f64, f64, f64, f64)) -> OccluderRect {
    let c = cam.center();
    let lift = |px: f64, py: f64| {
        let s = OCCLUDER_Z / c.z;
        (px + (c.x - px) * s, py + (c.y - py) * s)
    };
    let (sx0, sx1, sy0, sy1) = shadow;
    let (ax0, ay0) = lift(sx0, sy0);
    let (ax1, ay1) = lift(sx1, sy1);
    OccluderRect {
        z: OCCLUDER_Z,
        x0: ax0.min(ax1),
        x1: ax0.max(ax1),
        y0: ay0.min(ay1),
        y1: ay0.max(ay1),
    }
}

fn scene_oracle(spec: &SceneSpec, cameras: Vec<CameraParams>) -> SceneOracle {
    let occluder = match spec.kind {
        SceneKind::PlaneWithOccluder => Some(occluder_casting_shadow(
            cameras.last().expect("validated nonempty"),
            (-1.1, 1.1, -1.1, 1.1),
        )),
        SceneKind::MirroredTexture => Some(occluder_casting_shadow(
            cameras.last().expect("validated nonempty"),
            (0.25, 2.6, -2.6, 2.6),
        )),
        _ => None,
    };
    SceneOracle {
        kind: spec.kind,
        cameras,
        occluder,
    }
}

/// Rebuilds the closed-form oracle for a spec without generating rasters.
pub fn oracle_for(spec: &SceneSpec) -> Result<SceneOracle, SceneError> {
    spec.validate()?;
    Ok(scene_oracle(spec, arc_cameras(spec)?))
}

/// Generates the full scene: exact depth per pixel, images and per-view
/// feature grids sampled from one world-anchored texture field, plus the
/// oracle. Deterministic per spec.
pub fn generate(spec: &SceneSpec) -> Result<GeneratedScene, SceneError> {
    spec.validate()?;
    let cameras = arc_cameras(spec)?;
    let oracle = scene_oracle(spec, cameras);
    let mirrored = spec.kind == SceneKind::MirroredTexture;
    let field = TextureField::new(
        spec.feat_dim.max(3),
        spec.seed,
        mirrored,
        spec.texture_scale,
    );
    let size = spec.image_size;
    let (grid_w, grid_h) = latent_grid_dims(size, size, spec.patch);

    let mut images = Vec::with_capacity(spec.n_views);
    let mut depths = Vec::with_capacity(spec.n_views);
    let mut features = Vec::with_capacity(spec.n_views);
    let mut texel = vec![0.0f32; field.channels()];
    for v in 0..spec.n_views {
        let mut img = vec![0.0f32; size * size * 3];
        let mut dep = vec![0.0f32; size * size];
        for y in 0..size {
            for x in 0..size {
                if let Some(hit) = oracle.hit(v, (x as f64, y as f64)) {
                    dep[y * size + x] = hit.depth as f32;
                    field.sample(&hit.point, &mut texel);
                    img[(y * size + x) * 3..(y * size + x) * 3 + 3]
                        .copy_from_slice(&texel[..3]);
                }
            }
        }
        images.push(Raster::new(size, size, 3, img)?);
        depths.push(Raster::new(size, size, 1, dep)?);

        let mut feat = vec![0.0f32; grid_w * grid_h * spec.feat_dim];
        for ty in 0..grid_h {
            for tx in 0..grid_w {
                let px = (token_center(tx, spec.patch), token_center(ty, spec.patch));
                if let Some(hit) = oracle.hit(v, px) {
                    field.sample(&hit.point, &mut texel);
                    let at = (ty * grid_w + tx) * spec.feat_dim;
                    feat[at..at + spec.feat_dim].copy_from_slice(&texel[..spec.feat_dim]);
                }
            }
        }
        features.push(FeatureGrid::new(grid_w, grid_h, spec.feat_dim, feat)?);
    }

    let batch = MultiViewBatch::new(images, depths, oracle.cameras.clone())?;
    Ok(GeneratedScene {
        spec: spec.clone(),
        batch,
        features,
        oracle,
    })
}

// ---------------------------------------------------------------------------
// Scene directory layout
// ---------------------------------------------------------------------------

fn view_file(prefix: &str, i: usize) -> String {
    format!("{prefix}_{i:03}.mvdt")
}

/// Writes scene.txt, cameras.txt and the per-view view/depth/feat/oracle
/// files. The oracle file for source view `i` is an H x W x 3N tensor of
/// (x, y, visible) triples, one per target view.
pub fn write_scene(scene: &GeneratedScene, dir: &Path) -> Result<(), SceneError> {
    std::fs::create_dir_all(dir)?;
    let spec = &scene.spec;
    let manifest = format!(
        "kind {}\nn_views {}\nimage_size {}\nseed {}\npatch {}\nfeat_dim {}\nspan_deg {}\ntexture_scale {}\n",
        spec.kind,
        spec.n_views,
        spec.image_size,
        spec.seed,
        spec.patch,
        spec.feat_dim,
        spec.span_deg,
        spec.texture_scale
    );
    std::fs::write(dir.join("scene.txt"), manifest)?;
    write_cameras(scene.batch.cameras(), &dir.join("cameras.txt"))?;

    let n = spec.n_views;
    let size = spec.image_size;
    for i in 0..n {
        write_raster(&scene.batch.images()[i], &dir.join(view_file("view", i)))?;
        write_raster(&scene.batch.depths()[i], &dir.join(view_file("depth", i)))?;
        write_feature_grid(&scene.features[i], &dir.join(view_file("feat", i)))?;

        let mut data = vec![0.0f32; size * size * 3 * n];
        for y in 0..size {
            for x in 0..size {
                for j in 0..n {
                    let at = ((y * size + x) * n + j) * 3;
                    match scene.oracle.transfer(i, (x as f64, y as f64), j) {
                        Some(t) if t.projected => {
                            data[at] = t.x as f32;
                            data[at + 1] = t.y as f32;
                            data[at + 2] = f32::from(t.visible);
                        }
                        _ => {
                            data[at] = -1.0;
                            data[at + 1] = -1.0;
                        }
                    }
                }
            }
        }
        let r = Raster::new(size, size, 3 * n, data)?;
        write_raster(&r, &dir.join(view_file("oracle", i)))?;
    }
    Ok(())
}

/// Reloads a scene directory. Rasters come from disk; the oracle is rebuilt
/// from the manifest spec (generation is deterministic, so they agree).
pub struct LoadedScene {
    pub spec: SceneSpec,
    pub batch: MultiViewBatch,
    pub features: Vec<FeatureGrid>,
    pub oracle: SceneOracle,
}

pub fn read_scene_spec(dir: &Path) -> Result<SceneSpec, SceneError> {
    let manifest_path = dir.join("scene.txt");
    if !manifest_path.exists() {
        return Err(SceneError::MissingFile("scene.txt".into()));
    }
    let text = std::fs::read_to_string(manifest_path)?;
    let mut kind = None;
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| SceneError::BadManifest(format!("bad line: {line}")))?;
        if key == "kind" {
            kind = Some(SceneKind::parse(value).ok_or_else(|| {
                SceneError::BadManifest(format!("unknown scene kind {value}"))
            })?);
        } else {
            fields.insert(key.to_string(), value.to_string());
        }
    }
    let get = |key: &str| {
        fields
            .get(key)
            .ok_or_else(|| SceneError::BadManifest(format!("missing field {key}")))
    };
    let parse_usize = |key: &str| -> Result<usize, SceneError> {
        get(key)?
            .parse()
            .map_err(|_| SceneError::BadManifest(format!("bad value for {key}")))
    };
    let spec = SceneSpec {
        kind: kind.ok_or_else(|| SceneError::BadManifest("missing kind".into()))?,
        n_views: parse_usize("n_views")?,
        image_size: parse_usize("image_size")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| SceneError::BadManifest("bad seed".into()))?,
        patch: parse_usize("patch")?,
        feat_dim: parse_usize("feat_dim")?,
        span_deg: get("span_deg")?
            .parse()
            .map_err(|_| SceneError::BadManifest("bad span_deg".into()))?,
        texture_scale: get("texture_scale")?
            .parse()
            .map_err(|_| SceneError::BadManifest("bad texture_scale".into()))?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn load_scene(dir: &Path) -> Result<LoadedScene, SceneError> {
    let spec = read_scene_spec(dir)?;
    let cameras = read_cameras(&dir.join("cameras.txt"))?;
    if cameras.len() != spec.n_views {
        return Err(SceneError::BadManifest(format!(
            "manifest declares {} views, cameras.txt holds {}",
            spec.n_views,
            cameras.len()
        )));
    }
    let mut images = Vec::with_capacity(spec.n_views);
    let mut depths = Vec::with_capacity(spec.n_views);
    let mut features = Vec::with_capacity(spec.n_views);
    for i in 0..spec.n_views {
        images.push(read_raster(&dir.join(view_file("view", i)))?);
        depths.push(read_raster(&dir.join(view_file("depth", i)))?);
        features.push(read_feature_grid(&dir.join(view_file("feat", i)))?);
    }
    let oracle = scene_oracle(&spec, cameras.clone());
    let batch = MultiViewBatch::new(images, depths, cameras)?;
    Ok(LoadedScene {
        spec,
        batch,
        features,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_depth_matches_analytic_distance() {
        let spec = SceneSpec::new(SceneKind::Plane, 1, 64, 3);
        let scene = generate(&spec).unwrap();
        let cam = &scene.batch.cameras()[0];
        let origin = cam.center();
        for y in (0..64).step_by(7) {
            for x in (0..64).step_by(7) {
                let d = scene.batch.depths()[0].pixel(x, y)[0] as f64;
                let dir = cam.pixel_ray(x as f64, y as f64);
                let expected = -origin.z / dir.z;
                assert!((d - expected).abs() < 1e-6, "{d} vs {expected}");
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn sphere_background_has_zero_depth() {
        let spec = SceneSpec::new(SceneKind::Sphere, 2, 64, 5);
        let scene = generate(&spec).unwrap();
        let dep = &scene.batch.depths()[0];
        // Corner pixels miss the unit sphere seen from radius 4.
        assert_eq!(dep.pixel(0, 0)[0], 0.0);
        // The central pixel hits it.
        assert!(dep.pixel(32, 32)[0] > 0.0);
    }

    #[test]
    fn oracle_symmetry_on_plane() {
        let spec = SceneSpec::new(SceneKind::Plane, 3, 64, 11);
        let scene = generate(&spec).unwrap();
        let mut checked = 0;
        for y in (2..62).step_by(5) {
            for x in (2..62).step_by(5) {
                let p = (x as f64, y as f64);
                let Some(fwd) = scene.oracle.transfer(0, p, 2) else {
                    continue;
                };
                if !fwd.visible {
                    continue;
                }
                let back = scene.oracle.transfer(2, (fwd.x, fwd.y), 0).unwrap();
                assert!(back.projected);
                assert!(
                    (back.x - p.0).abs() < 1e-6 && (back.y - p.1).abs() < 1e-6,
                    "round trip drifted: {:?} -> {:?}",
                    p,
                    (back.x, back.y)
                );
                checked += 1;
            }
        }
        assert!(checked > 20, "too few mutually visible samples: {checked}");
    }

    #[test]
    fn occluder_blocks_exactly_its_shadow() {
        let spec = SceneSpec::new(SceneKind::PlaneWithOccluder, 4, 64, 7);
        let oracle = oracle_for(&spec).unwrap();
        let last = spec.n_views - 1;
        let rect = *oracle.occluder().unwrap();
        let cam_z = oracle.cameras()[last].center().z;
        assert!(rect.z < cam_z);
        // A plane point inside the prescribed shadow is blocked, one outside
        // is not.
        let blocked = Point3::new(0.0, 0.0, 0.0);
        let open = Point3::new(2.5, 2.5, 0.0);
        assert!(!oracle.unblocked(last, &blocked, SurfaceId::Plane));
        assert!(oracle.unblocked(last, &open, SurfaceId::Plane));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = SceneSpec::new(SceneKind::MirroredTexture, 2, 32, 9);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for i in 0..2 {
            assert_eq!(a.batch.images()[i].data(), b.batch.images()[i].data());
            assert_eq!(a.features[i].data(), b.features[i].data());
        }
    }

    #[test]
    fn zero_views_is_a_spec_error() {
        let spec = SceneSpec::new(SceneKind::Plane, 0, 64, 0);
        assert!(matches!(generate(&spec), Err(SceneError::BadSpec(_))));
    }

    #[test]
    fn scene_directory_round_trips() {
        let spec = SceneSpec {
            feat_dim: 4,
            ..SceneSpec::new(SceneKind::Plane, 2, 32, 21)
        };
        let scene = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene(&scene, dir.path()).unwrap();
        let loaded = load_scene(dir.path()).unwrap();
        assert_eq!(loaded.spec, spec);
        for i in 0..2 {
            assert_eq!(loaded.batch.images()[i], scene.batch.images()[i]);
            assert_eq!(loaded.batch.depths()[i], scene.batch.depths()[i]);
            assert_eq!(loaded.features[i], scene.features[i]);
            assert_eq!(loaded.batch.cameras()[i], scene.batch.cameras()[i]);
        }
    }

    #[test]
    fn mirrored_texture_is_symmetric_in_x() {
        let field = TextureField::new(4, 42, true, 1.0);
        let mut a = vec![0.0f32; 4];
        let mut b = vec![0.0f32; 4];
        field.sample(&Point3::new(0.7, -0.3, 0.0), &mut a);
        field.sample(&Point3::new(-0.7, -0.3, 0.0), &mut b);
        assert_eq!(a, b);
    }
}
