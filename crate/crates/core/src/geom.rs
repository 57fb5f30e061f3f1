//! Rigid transforms, pinhole projection, oriented cuboids and 2D box arithmetic.
//!
//! Frame conventions: LiDAR/ego/world frames are right-handed with z up.
//! Camera frames follow the usual optical convention (x right, y down,
//! z forward). Yaw is a rotation about +z, measured from +x towards +y.
//!
//! No lens distortion is modelled; distortion coefficients present in
//! calibration files are ignored and images are assumed rectified.

use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("rotation is not orthonormal (max deviation {deviation:e}, det {det})")]
    NotOrthonormal { deviation: f64, det: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("cuboid dimensions must be positive and finite, got ({0}, {1}, {2})")]
    InvalidDims(f64, f64, f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): requires x1 <= x2 and y1 <= y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("zero-norm quaternion")]
    ZeroQuaternion,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }
}

impl<T: Real> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zeros() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn xy(self) -> Vec2<T> {
        Vec2::new(self.x, self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.z.as_f64()),
        )
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn from_rows(m: [[T; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self::from_rows([[o, z, z], [z, o, z], [z, z, o]])
    }

    /// Rotation about +z by `yaw`.
    pub fn rot_z(yaw: T) -> Self {
        let (s, c) = yaw.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self::from_rows([[c, -s, z], [s, c, z], [z, z, o]])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.m;
        Self::from_rows([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Self::from_rows(out)
    }

    pub fn det(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn cast<U: Real>(&self) -> Mat3<U> {
        Mat3::from_rows(self.m.map(|row| row.map(|v| U::lit(v.as_f64()))))
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle<T: Real>(a: T) -> T {
    let two_pi = T::TAU();
    let mut r = a - two_pi * ((a + T::PI()) / two_pi).floor();
    // floor-based wrapping lands in [-pi, pi); fold the lower endpoint up
    if r <= -T::PI() {
        r = r + two_pi;
    }
    if r > T::PI() {
        r = r - two_pi;
    }
    r
}

/// Smallest absolute angular difference, in `[0, pi]`.
pub fn yaw_diff<T: Real>(a: T, b: T) -> T {
    normalize_angle(a - b).abs()
}

/// Proper rigid motion `p -> R p + t`.
///
/// A transform named `a_from_b` maps coordinates expressed in frame `b`
/// into frame `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    rotation: Mat3<T>,
    translation: Vec3<T>,
}

impl<T: Real> RigidTransform<T> {
    /// Builds a transform, rejecting rotations that are not orthonormal
    /// within 1e-6 or that are reflections.
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self, GeomError> {
        if !translation.is_finite() || rotation.m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite("rigid transform"));
        }
        let rtr = rotation.transpose().mul_mat(&rotation);
        let id = Mat3::<T>::identity();
        let mut deviation = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                deviation = deviation.max((rtr.m[i][j] - id.m[i][j]).as_f64().abs());
            }
        }
        let det = rotation.det().as_f64();
        if deviation > 1e-6 || det <= 0.0 {
            return Err(GeomError::NotOrthonormal { deviation, det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Rotation about +z followed by a translation.
    pub fn from_yaw(yaw: T, translation: Vec3<T>) -> Self {
        Self {
            rotation: Mat3::rot_z(yaw),
            translation,
        }
    }

    /// Builds a transform from a Hamilton quaternion `(w, x, y, z)`; the
    /// quaternion is normalized first.
    pub fn from_quaternion(q: [T; 4], translation: Vec3<T>) -> Result<Self, GeomError> {
        let n = q.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if !n.is_finite() {
            return Err(GeomError::NonFinite("quaternion"));
        }
        if n <= T::epsilon() {
            return Err(GeomError::ZeroQuaternion);
        }
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let one = T::one();
        let two = T::two();
        let rotation = Mat3::from_rows([
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
        ]);
        Self::new(rotation, translation)
    }

    /// Returns the unit quaternion `(w, x, y, z)` of the rotation, with `w >= 0`.
    pub fn quaternion(&self) -> [T; 4] {
        let m = &self.rotation.m;
        let one = T::one();
        let quarter = T::lit(0.25);
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > T::zero() {
            let s = (trace + one).sqrt() * T::two();
            [
                quarter * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            ]
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::two();
            [
                (m[2][1] - m[1][2]) / s,
                quarter * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            ]
        } else if m[1][1] > m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::two();
            [
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                quarter * s,
                (m[1][2] + m[2][1]) / s,
            ]
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::two();
            [
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                quarter * s,
            ]
        };
        if q[0] < T::zero() {
            q.map(|v| -v)
        } else {
            q
        }
    }

    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3<T> {
        self.translation
    }

    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn apply_vector(&self, v: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(v)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.mul_mat(&other.rotation),
            translation: self.rotation.mul_vec(other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }

    /// Heading of the rotated +x axis projected onto the ground plane.
    pub fn yaw(&self) -> T {
        self.rotation.m[1][0].atan2(self.rotation.m[0][0])
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        RigidTransform {
            rotation: self.rotation.cast(),
            translation: self.translation.cast(),
        }
    }
}

/// Pinhole intrinsics of a rectified camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Result<Self, GeomError> {
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(GeomError::NonFinite("camera intrinsics"));
        }
        if fx <= T::zero() || fy <= T::zero() {
            return Err(GeomError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(GeomError::InvalidIntrinsics(
                "image size must be nonzero".into(),
            ));
        }
        let (w, h) = (T::lit(width as f64), T::lit(height as f64));
        if cx < T::zero() || cx >= w || cy < T::zero() || cy >= h {
            return Err(GeomError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Box extent along the local x (length), y (width) and z (height) axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dims<T> {
    pub l: T,
    pub w: T,
    pub h: T,
}

impl<T: Real> Dims<T> {
    pub fn new(l: T, w: T, h: T) -> Result<Self, GeomError> {
        let ok = |v: T| v.is_finite() && v > T::zero();
        if ok(l) && ok(w) && ok(h) {
            Ok(Self { l, w, h })
        } else {
            Err(GeomError::InvalidDims(l.as_f64(), w.as_f64(), h.as_f64()))
        }
    }

    pub fn to_array(self) -> [T; 3] {
        [self.l, self.w, self.h]
    }

    pub fn volume(self) -> T {
        self.l * self.w * self.h
    }

    pub fn cast<U: Real>(self) -> Dims<U> {
        Dims {
            l: U::lit(self.l.as_f64()),
            w: U::lit(self.w.as_f64()),
            h: U::lit(self.h.as_f64()),
        }
    }
}

/// Oriented box: yaw rotation about +z through `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cuboid3D<T> {
    pub center: Vec3<T>,
    pub dims: Dims<T>,
    /// Radians in `(-pi, pi]`.
    pub yaw: T,
}

impl<T: Real> Cuboid3D<T> {
    /// Validates the center and normalizes `yaw` into `(-pi, pi]`.
    pub fn new(center: Vec3<T>, dims: Dims<T>, yaw: T) -> Result<Self, GeomError> {
        if !center.is_finite() || !yaw.is_finite() {
            return Err(GeomError::NonFinite("cuboid"));
        }
        let dims = Dims::new(dims.l, dims.w, dims.h)?;
        Ok(Self {
            center,
            dims,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn frame(&self) -> CuboidFrame<T> {
        CuboidFrame::new(self)
    }

    /// Expresses the cuboid in another frame; only the yaw component of
    /// the transform's rotation is carried into the box orientation.
    pub fn transformed(&self, t: &RigidTransform<T>) -> Self {
        Self {
            center: t.apply(self.center),
            dims: self.dims,
            yaw: normalize_angle(self.yaw + t.yaw()),
        }
    }

    pub fn cast<U: Real>(&self) -> Cuboid3D<U> {
        Cuboid3D {
            center: self.center.cast(),
            dims: self.dims.cast(),
            yaw: U::lit(self.yaw.as_f64()),
        }
    }
}

/// Precomputed local frame of a cuboid for repeated membership tests.
///
/// Every membership decision in the crate goes through [`CuboidFrame::contains`]
/// so that batched and one-off evaluations agree bit for bit.
#[derive(Debug, Clone, Copy)]
pub struct CuboidFrame<T> {
    center: Vec3<T>,
    sin: T,
    cos: T,
    half: Vec3<T>,
}

impl<T: Real> CuboidFrame<T> {
    pub fn new(c: &Cuboid3D<T>) -> Self {
        let (sin, cos) = c.yaw.sin_cos();
        Self {
            center: c.center,
            sin,
            cos,
            half: Vec3::new(c.dims.l, c.dims.w, c.dims.h) * T::half(),
        }
    }

    /// `R(-yaw) (p - center)`.
    #[inline]
    pub fn to_local(&self, p: Vec3<T>) -> Vec3<T> {
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        Vec3::new(
            self.cos * dx + self.sin * dy,
            -self.sin * dx + self.cos * dy,
            p.z - self.center.z,
        )
    }

    /// Boundary-inclusive membership.
    #[inline]
    pub fn contains(&self, p: Vec3<T>) -> bool {
        let dz = p.z - self.center.z;
        if dz.abs() > self.half.z {
            return false;
        }
        let q = self.to_local(p);
        q.x.abs() <= self.half.x && q.y.abs() <= self.half.y
    }
}

/// Axis-aligned image box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Real> Box2D<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self, GeomError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeomError::NonFinite("2D box"));
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeomError::InvalidBox {
                x1: x1.as_f64(),
                y1: y1.as_f64(),
                x2: x2.as_f64(),
                y2: y2.as_f64(),
            });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> T {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Inclusive on all four edges.
    pub fn contains(&self, p: Vec2<T>) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn cast<U: Real>(&self) -> Box2D<U> {
        Box2D {
            x1: U::lit(self.x1.as_f64()),
            y1: U::lit(self.y1.as_f64()),
            x2: U::lit(self.x2.as_f64()),
            y2: U::lit(self.y2.as_f64()),
        }
    }
}

/// Pinhole projection; `None` when the point is not strictly in front of
/// the camera.
#[inline]
pub fn project_point<T: Real>(p: Vec3<T>, intr: &CameraIntrinsics<T>) -> Option<Vec2<T>> {
    if p.z <= T::zero() {
        return None;
    }
    Some(Vec2::new(
        intr.fx * p.x / p.z + intr.cx,
        intr.fy * p.y / p.z + intr.cy,
    ))
}

/// Local-frame sign pattern of the eight corners.
///
/// Corners 0..4 form the bottom face, 4..8 the top face, each walked as
/// front-left, front-right, rear-right, rear-left where "front" is +x
/// (half length) and "left" is +y (half width).
pub const CORNER_SIGNS: [[i8; 3]; 8] = [
    [1, 1, -1],
    [1, -1, -1],
    [-1, -1, -1],
    [-1, 1, -1],
    [1, 1, 1],
    [1, -1, 1],
    [-1, -1, 1],
    [-1, 1, 1],
];

/// The eight corners in [`CORNER_SIGNS`] order.
pub fn cuboid_corners<T: Real>(c: &Cuboid3D<T>) -> [Vec3<T>; 8] {
    let (s, co) = c.yaw.sin_cos();
    let half = Vec3::new(c.dims.l, c.dims.w, c.dims.h) * T::half();
    CORNER_SIGNS.map(|sg| {
        let lx = half.x * T::lit(sg[0] as f64);
        let ly = half.y * T::lit(sg[1] as f64);
        let lz = half.z * T::lit(sg[2] as f64);
        Vec3::new(
            c.center.x + co * lx - s * ly,
            c.center.y + s * lx + co * ly,
            c.center.z + lz,
        )
    })
}

/// Boundary-inclusive point-in-oriented-box test.
#[inline]
pub fn point_in_cuboid<T: Real>(p: Vec3<T>, c: &Cuboid3D<T>) -> bool {
    CuboidFrame::new(c).contains(p)
}

/// Image-plane AABB of the projected corners, clipped to the image.
///
/// Corners behind the camera are dropped; `None` when no corner is in
/// front of it.
pub fn project_cuboid_to_box<T: Real>(
    c: &Cuboid3D<T>,
    camera_from_sensor: &RigidTransform<T>,
    intr: &CameraIntrinsics<T>,
) -> Option<Box2D<T>> {
    let mut bounds: Option<(T, T, T, T)> = None;
    for corner in cuboid_corners(c) {
        let Some(px) = project_point(camera_from_sensor.apply(corner), intr) else {
            continue;
        };
        bounds = Some(match bounds {
            None => (px.x, px.y, px.x, px.y),
            Some((a, b, cc, d)) => (a.min(px.x), b.min(px.y), cc.max(px.x), d.max(px.y)),
        });
    }
    let (x1, y1, x2, y2) = bounds?;
    let w = T::lit(intr.width as f64);
    let h = T::lit(intr.height as f64);
    let clamp = |v: T, hi: T| v.max(T::zero()).min(hi);
    Some(Box2D {
        x1: clamp(x1, w),
        y1: clamp(y1, h),
        x2: clamp(x2, w),
        y2: clamp(y2, h),
    })
}

/// Intersection over union; 0 when the union is empty.
pub fn iou_2d<T: Real>(a: &Box2D<T>, b: &Box2D<T>) -> T {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

/// Ground-plane footprint: the bottom face of [`cuboid_corners`] with z dropped.
pub fn bev_rect<T: Real>(c: &Cuboid3D<T>) -> [Vec2<T>; 4] {
    let corners = cuboid_corners(c);
    [
        corners[0].xy(),
        corners[1].xy(),
        corners[2].xy(),
        corners[3].xy(),
    ]
}
