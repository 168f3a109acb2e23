//! Pinhole projection math and depth-based geometric correspondence.
//!
//! Pixel coordinates are continuous with integer values at pixel centers;
//! camera frames are x-right, y-down, z-forward. Depths are camera-space z
//! in meters, with 0 marking pixels that see no geometry.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use thiserror::Error;

use crate::batch::MultiViewBatch;
use crate::grid::Raster;

const ROTATION_TOL: f64 = 1e-5;
const MIN_PROJECT_Z: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("depth must be positive, got {0}")]
    InvalidDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("view index {index} out of range for {n_views} views")]
    ViewOutOfRange { index: usize, n_views: usize },
}

/// Intrinsics plus a rigid world-to-camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    w2c: Matrix4<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraParams {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        w2c: Matrix4<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive: fx={fx}, fy={fy}"
            )));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("zero image size".into()));
        }
        let r = w2c.fixed_view::<3, 3>(0, 0).into_owned();
        let should_be_identity = r.transpose() * r;
        let orthonormal = (should_be_identity - Matrix3::identity()).norm() <= ROTATION_TOL * 10.0;
        if !orthonormal || (r.determinant() - 1.0).abs() > ROTATION_TOL * 10.0 {
            return Err(GeometryError::InvalidCamera(
                "upper-left 3x3 of w2c is not a proper rotation".into(),
            ));
        }
        let last = w2c.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(GeometryError::InvalidCamera(
                "last row of w2c must be [0, 0, 0, 1]".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            w2c,
            width,
            height,
        })
    }

    /// Builds a pose looking from `eye` toward `target` with `up` resolving
    /// the roll; camera y points opposite `up` (image rows grow downward).
    pub fn from_look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidCamera("eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidCamera("view direction parallel to up".into()))?;
        let down = forward.cross(&right);
        // Rows of the rotation are the camera axes expressed in world frame.
        let rot = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let t = -rot * eye.coords;
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(fx, fy, cx, cy, w2c, width, height)
    }

    pub fn w2c(&self) -> &Matrix4<f64> {
        &self.w2c
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.w2c.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.w2c.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        let r = self.rotation();
        Point3::from(-(r.transpose() * self.translation()))
    }

    pub fn world_to_cam(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * p.coords + self.translation())
    }

    pub fn cam_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        let r = self.rotation();
        Point3::from(r.transpose() * (p.coords - self.translation()))
    }

    /// World-space direction of the ray through continuous pixel (x, y),
    /// scaled so its camera-space z component is 1.
    pub fn pixel_ray(&self, x: f64, y: f64) -> Vector3<f64> {
        let dir_cam = Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        self.rotation().transpose() * dir_cam
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && x < self.width as f64 && y >= 0.0 && y < self.height as f64
    }
}

/// Lifts a pixel with known depth to a world-space point.
pub fn back_project(
    pixel: (f64, f64),
    depth: f64,
    cam: &CameraParams,
) -> Result<Point3<f64>, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::InvalidDepth(depth));
    }
    let (x, y) = pixel;
    let p_cam = Point3::new(
        (x - cam.cx) * depth / cam.fx,
        (y - cam.cy) * depth / cam.fy,
        depth,
    );
    Ok(cam.cam_to_world(&p_cam))
}

/// Projects a world point, returning (x, y, z_cam). The camera-space depth
/// is returned alongside the pixel for consistency tests.
pub fn project(point: &Point3<f64>, cam: &CameraParams) -> Result<(f64, f64, f64), GeometryError> {
    let p_cam = cam.world_to_cam(point);
    if p_cam.z <= MIN_PROJECT_Z {
        return Err(GeometryError::BehindCamera(p_cam.z));
    }
    let x = cam.fx * p_cam.x / p_cam.z + cam.cx;
    let y = cam.fy * p_cam.y / p_cam.z + cam.cy;
    Ok((x, y, p_cam.z))
}

/// One source pixel transferred into a target view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoMatch {
    pub target_view: usize,
    pub x: f64,
    pub y: f64,
    pub z_cam: f64,
    pub valid: bool,
}

impl GeoMatch {
    fn invalid(target_view: usize) -> Self {
        Self {
            target_view,
            x: 0.0,
            y: 0.0,
            z_cam: 0.0,
            valid: false,
        }
    }
}

/// Nearest-pixel depth sample; `None` outside the image or where depth is
/// 0 (no geometry). Depth is never interpolated across pixels: bilinear
/// blending across an occlusion boundary would invent phantom surfaces.
pub fn depth_at(depth: &Raster, x: f64, y: f64) -> Option<f64> {
    let xi = x.round();
    let yi = y.round();
    if xi < 0.0 || yi < 0.0 || xi >= depth.width() as f64 || yi >= depth.height() as f64 {
        return None;
    }
    let d = depth.pixel(xi as usize, yi as usize)[0] as f64;
    (d > 0.0).then_some(d)
}

/// Transfers `pixel` from view `s` to view `a` through the depth maps and
/// applies the two-part reliability mask: relative depth consistency at the
/// target sample, and a round-trip back into the source view.
///
/// `tol_px` is in image pixels, `tol_depth` is relative. A missing or
/// occluded correspondence is reported as `valid = false`, not an error.
pub fn geometric_match(
    pixel: (f64, f64),
    source_view: usize,
    target_view: usize,
    batch: &MultiViewBatch,
    tol_px: f64,
    tol_depth: f64,
) -> Result<GeoMatch, GeometryError> {
    let n = batch.len();
    for index in [source_view, target_view] {
        if index >= n {
            return Err(GeometryError::ViewOutOfRange { index, n_views: n });
        }
    }
    let cam_s = &batch.cameras()[source_view];
    let cam_a = &batch.cameras()[target_view];

    let Some(d_s) = depth_at(&batch.depths()[source_view], pixel.0, pixel.1) else {
        return Ok(GeoMatch::invalid(target_view));
    };
    let world = back_project(pixel, d_s, cam_s)?;
    let (x_a, y_a, z_a) = match project(&world, cam_a) {
        Ok(p) => p,
        Err(GeometryError::BehindCamera(_)) => return Ok(GeoMatch::invalid(target_view)),
        Err(e) => return Err(e),
    };
    let candidate = GeoMatch {
        target_view,
        x: x_a,
        y: y_a,
        z_cam: z_a,
        valid: false,
    };

    if !cam_a.contains(x_a, y_a) {
        return Ok(candidate);
    }
    let Some(d_a) = depth_at(&batch.depths()[target_view], x_a, y_a) else {
        return Ok(candidate);
    };
    if (d_a - z_a).abs() / z_a > tol_depth {
        return Ok(candidate);
    }

    // Round trip: warp the target sample back and require it to land on the
    // source pixel. Catches depth-map noise the depth test lets through.
    let world_back = back_project((x_a, y_a), d_a, cam_a)?;
    let (x_s, y_s, _) = match project(&world_back, cam_s) {
        Ok(p) => p,
        Err(GeometryError::BehindCamera(_)) => return Ok(candidate),
        Err(e) => return Err(e),
    };
    let err = ((x_s - pixel.0).powi(2) + (y_s - pixel.1).powi(2)).sqrt();
    if err > tol_px {
        return Ok(candidate);
    }

    Ok(GeoMatch {
        valid: true,
        ..candidate
    })
}
