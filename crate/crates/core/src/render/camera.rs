use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Isotropic floor added to the diagonal of every projected covariance, px^2.
pub const COV2D_FLOOR: f64 = 0.3;
/// Gaussians closer than this to the image plane are skipped.
pub const NEAR_PLANE: f64 = 0.01;

/// Pinhole camera. Camera space has +x right, +y down, +z forward; pixel
/// `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub position: Vector3<f64>,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(position: Vector3<f64>, rotation: Matrix3<f64>, fx: f64, fy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::Config(format!("camera intrinsics must be positive (fx {fx}, fy {fy}, {width}x{height})")));
        }
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("camera rotation is not a proper orthonormal matrix".into()));
        }
        Ok(Self { position, rotation, fx, fy, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height })
    }

    /// Camera at `position` looking at `target`, with `up` projected to
    /// image-up.
    pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - position).try_normalize(1e-12).ok_or_else(|| Error::Config("camera target equals position".into()))?;
        let right = forward.cross(&up).try_normalize(1e-12).ok_or_else(|| Error::Config("camera up is parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::new(position, rotation, focal, focal, width, height)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.position)
    }

    /// Perspective Jacobian of `t -> (fx tx / tz, fy ty / tz)` at camera-space `t`.
    pub fn jacobian(&self, t: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / t.z;
        Matrix2x3::new(self.fx * iz, 0.0, -self.fx * t.x * iz * iz, 0.0, self.fy * iz, -self.fy * t.y * iz * iz)
    }

    pub fn project_point(&self, t: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy)
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the unit quaternion components.
pub fn quat_matrix_vjp(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)] + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)] + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)] + y * g[(1, 2)] + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// Normalizes a raw quaternion; returns it together with its norm.
pub fn normalize_quat(q: [f64; 4]) -> ([f64; 4], f64) {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return ([1.0, 0.0, 0.0, 0.0], 0.0);
    }
    (q.map(|v| v / n), n)
}

/// `dL/dq_raw` from `dL/dq_unit`.
pub fn normalize_quat_vjp(unit: [f64; 4], norm: f64, g: [f64; 4]) -> [f64; 4] {
    if norm == 0.0 {
        return [0.0; 4];
    }
    let dot: f64 = (0..4).map(|i| unit[i] * g[i]).sum();
    std::array::from_fn(|i| (g[i] - unit[i] * dot) / norm)
}

/// `R S S^T R^T` for a raw quaternion and log-scales.
pub fn covariance_3d(rot: [f64; 4], log_scale: [f64; 3]) -> Matrix3<f64> {
    let r = quat_to_matrix(normalize_quat(rot).0);
    let s = Matrix3::from_diagonal(&Vector3::from(log_scale.map(f64::exp)));
    let a = r * s;
    a * a.transpose()
}

/// Screen-space footprint of a Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean: Vector2<f64>,
    /// Includes the isotropic floor.
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

/// Projects a Gaussian's mean and covariance through the camera. Returns
/// `None` when the mean is behind the near plane.
pub fn project_gaussian(mu: [f64; 3], cov3: &Matrix3<f64>, cam: &Camera) -> Option<Projection> {
    let t = cam.world_to_camera(&Vector3::from(mu));
    if t.z <= NEAR_PLANE {
        return None;
    }
    let m = cam.jacobian(&t) * cam.rotation;
    let cov = m * cov3 * m.transpose() + Matrix2::identity() * COV2D_FLOOR;
    Some(Projection { mean: cam.project_point(&t), cov, depth: t.z })
}
