//! Synthetic scenes: primitives, a spinning multi-beam sensor and a
//! ground-truth trajectory.
//!
//! Scene files hold one directive per line (`#` comments):
//!
//! ```text
//! sensor beams=16 vfov=-15,15 hres=1 max_range=60 [sweep=true]
//! noise sigma=0.01 seed=7
//! trajectory line start=0,0,1 step=1,0,0 frames=50 [yaw_rate=0.5]
//! pose x y z roll pitch yaw          # alternative to `trajectory`, degrees
//! primitive plane center=0,0,0 normal=0,0,1 extent=200,8 class=9
//! primitive box center=10,3,1 size=4,2,2 [yaw=30] class=1 [motion=0.5,0,0] [visible=0-4]
//! primitive cylinder base=5,-3,0 radius=0.3 height=4 class=18
//! ```
//!
//! Any primitive accepts `repeat=N spacing=dx,dy,dz` to place `N` copies
//! offset by multiples of the spacing. Angles in scene files are in degrees.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::io::{write_labels, write_point_cloud_bin, write_trajectory_kitti, IoError, LabelMap};
use crate::scan::{ClassId, Scan};
use crate::se3::{exp_map, log_map, Mat3, Pose, Vec3};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Rectangle of `extent = (w, h)` spanned by [`plane_axes`].
    Plane { center: Vec3, normal: Vec3, extent: (f64, f64) },
    /// Box rotated by `yaw` (radians) about the vertical axis.
    Box { center: Vec3, size: Vec3, yaw: f64 },
    /// Closed vertical cylinder standing on `base`.
    Cylinder { base: Vec3, radius: f64, height: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class: ClassId,
    /// Translation per frame.
    pub motion: Vec3,
    /// Inclusive frame range in which the primitive exists.
    pub visible: Option<(usize, usize)>,
}

impl Primitive {
    pub fn new(shape: Shape, class: ClassId) -> Self {
        Self {
            shape,
            class,
            motion: Vec3::zeros(),
            visible: None,
        }
    }

    pub fn visible_in(&self, frame: usize) -> bool {
        self.visible.is_none_or(|(a, b)| (a..=b).contains(&frame))
    }

    /// Shape translated to its position at `frame`.
    pub fn shape_at(&self, frame: f64) -> Shape {
        self.shape.translated(&(self.motion * frame))
    }
}

impl Shape {
    pub fn translated(&self, d: &Vec3) -> Shape {
        match self.clone() {
            Shape::Plane { center, normal, extent } => Shape::Plane {
                center: center + d,
                normal,
                extent,
            },
            Shape::Box { center, size, yaw } => Shape::Box {
                center: center + d,
                size,
                yaw,
            },
            Shape::Cylinder { base, radius, height } => Shape::Cylinder {
                base: base + d,
                radius,
                height,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    pub beams: usize,
    /// Lowest and highest beam elevation, degrees.
    pub vfov: (f64, f64),
    /// Azimuth step, degrees.
    pub hres: f64,
    pub max_range: f64,
    /// Move the sensor during the sweep; point `s` of the sweep is taken
    /// from the pose interpolated between the previous and current frame.
    pub sweep: bool,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            beams: 16,
            vfov: (-15.0, 15.0),
            hres: 1.0,
            max_range: 60.0,
            sweep: false,
        }
    }
}

impl SensorModel {
    pub fn azimuth_count(&self) -> usize {
        (360.0 / self.hres).round().max(1.0) as usize
    }

    /// Unit ray directions in the sensor frame with their sweep times, in
    /// firing order (azimuth-major).
    pub fn rays(&self) -> Vec<(Vec3, f64)> {
        let n_az = self.azimuth_count();
        let mut out = Vec::with_capacity(n_az * self.beams);
        for k in 0..n_az {
            let az = (-180.0 + k as f64 * 360.0 / n_az as f64).to_radians();
            let s = if n_az > 1 { k as f64 / (n_az - 1) as f64 } else { 1.0 };
            for b in 0..self.beams {
                let el = if self.beams > 1 {
                    self.vfov.0 + (self.vfov.1 - self.vfov.0) * b as f64 / (self.beams - 1) as f64
                } else {
                    self.vfov.0
                }
                .to_radians();
                out.push((Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()), s));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub sensor: SensorModel,
    pub primitives: Vec<Primitive>,
    pub trajectory: Vec<Pose>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(sensor: SensorModel, primitives: Vec<Primitive>, trajectory: Vec<Pose>) -> Self {
        Self {
            sensor,
            primitives,
            trajectory,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Invalid(m));
        if self.trajectory.is_empty() {
            return bad("trajectory is empty".into());
        }
        let s = &self.sensor;
        if s.beams == 0 || !(s.hres > 0.0) || !(s.max_range > 0.0) || s.vfov.0 > s.vfov.1 {
            return bad("sensor needs beams > 0, hres > 0, max_range > 0 and vfov low <= high".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be >= 0".into());
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let ok = match &p.shape {
                Shape::Plane { normal, extent, .. } => normal.norm() > 0.0 && extent.0 > 0.0 && extent.1 > 0.0,
                Shape::Box { size, .. } => size.iter().all(|v| *v > 0.0),
                Shape::Cylinder { radius, height, .. } => *radius > 0.0 && *height > 0.0,
            };
            if !ok {
                return bad(format!("primitive {i} has a degenerate extent"));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.trajectory.len()
    }

    /// Sensor pose at sweep time `s` of `frame`; `s = 1` is the frame pose.
    pub fn sensor_pose(&self, frame: usize, s: f64) -> Pose {
        let cur = self.trajectory[frame];
        if !self.sensor.sweep || s >= 1.0 {
            return cur;
        }
        let step = if frame > 0 {
            self.trajectory[frame - 1].inverse().compose(&cur)
        } else if self.trajectory.len() > 1 {
            cur.inverse().compose(&self.trajectory[1])
        } else {
            return cur;
        };
        match log_map(&step) {
            Ok(xi) => cur.compose(&exp_map(&xi.scaled(s - 1.0))),
            Err(_) => cur,
        }
    }

    pub fn parse(text: &str) -> Result<Self, SceneError> {
        let mut spec = SceneSpec::new(SensorModel::default(), Vec::new(), Vec::new());
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| SceneError::Parse { line: i + 1, msg };
            let mut words = line.split_whitespace();
            let head = words.next().unwrap_or_default();
            let rest: Vec<&str> = words.collect();
            match head {
                "sensor" => {
                    let kv = KeyValues::parse(&rest).map_err(err)?;
                    let s = &mut spec.sensor;
                    if let Some(v) = kv.get("beams") {
                        s.beams = num(v).map_err(err)?;
                    }
                    if let Some(v) = kv.get("vfov") {
                        let [a, b] = floats::<2>(v).map_err(err)?;
                        s.vfov = (a, b);
                    }
                    if let Some(v) = kv.get("hres") {
                        s.hres = num(v).map_err(err)?;
                    }
                    if let Some(v) = kv.get("max_range") {
                        s.max_range = num(v).map_err(err)?;
                    }
                    if let Some(v) = kv.get("sweep") {
                        s.sweep = num(v).map_err(err)?;
                    }
                    kv.finish().map_err(err)?;
                }
                "noise" => {
                    let kv = KeyValues::parse(&rest).map_err(err)?;
                    if let Some(v) = kv.get("sigma") {
                        spec.noise_sigma = num(v).map_err(err)?;
                    }
                    if let Some(v) = kv.get("seed") {
                        spec.seed = num(v).map_err(err)?;
                    }
                    kv.finish().map_err(err)?;
                }
                "trajectory" => {
                    if rest.first() != Some(&"line") {
                        return Err(err("only 'trajectory line' is supported".into()));
                    }
                    let kv = KeyValues::parse(&rest[1..]).map_err(err)?;
                    let start = vec3(kv.req("start").map_err(err)?).map_err(err)?;
                    let step = vec3(kv.req("step").map_err(err)?).map_err(err)?;
                    let frames: usize = num(kv.req("frames").map_err(err)?).map_err(err)?;
                    let yaw_rate: f64 = kv.get("yaw_rate").map(num).transpose().map_err(err)?.unwrap_or(0.0);
                    kv.finish().map_err(err)?;
                    spec.trajectory
                        .extend(line_trajectory(start, step, frames, yaw_rate.to_radians()));
                }
                "pose" => {
                    let v: Vec<f64> = rest.iter().map(|t| num(t)).collect::<Result<_, _>>().map_err(err)?;
                    if v.len() != 6 {
                        return Err(err(format!("pose needs 6 values, got {}", v.len())));
                    }
                    spec.trajectory.push(Pose::from_rpy(
                        v[3].to_radians(),
                        v[4].to_radians(),
                        v[5].to_radians(),
                        Vec3::new(v[0], v[1], v[2]),
                    ));
                }
                "primitive" => {
                    let kind = *rest.first().ok_or_else(|| err("missing primitive type".into()))?;
                    let kv = KeyValues::parse(&rest[1..]).map_err(err)?;
                    let shape = match kind {
                        "plane" => {
                            let [w, h] = floats::<2>(kv.req("extent").map_err(err)?).map_err(err)?;
                            Shape::Plane {
                                center: vec3(kv.req("center").map_err(err)?).map_err(err)?,
                                normal: vec3(kv.req("normal").map_err(err)?).map_err(err)?,
                                extent: (w, h),
                            }
                        }
                        "box" => Shape::Box {
                            center: vec3(kv.req("center").map_err(err)?).map_err(err)?,
                            size: vec3(kv.req("size").map_err(err)?).map_err(err)?,
                            yaw: kv
                                .get("yaw")
                                .map(num::<f64>)
                                .transpose()
                                .map_err(err)?
                                .unwrap_or(0.0)
                                .to_radians(),
                        },
                        "cylinder" => Shape::Cylinder {
                            base: vec3(kv.req("base").map_err(err)?).map_err(err)?,
                            radius: num(kv.req("radius").map_err(err)?).map_err(err)?,
                            height: num(kv.req("height").map_err(err)?).map_err(err)?,
                        },
                        other => return Err(err(format!("unknown primitive '{other}'"))),
                    };
                    let mut p = Primitive::new(shape, num(kv.req("class").map_err(err)?).map_err(err)?);
                    if let Some(m) = kv.get("motion") {
                        p.motion = vec3(m).map_err(err)?;
                    }
                    if let Some(v) = kv.get("visible") {
                        let (a, b) = v
                            .split_once('-')
                            .ok_or_else(|| err(format!("visible expects a-b, got '{v}'")))?;
                        p.visible = Some((num(a).map_err(err)?, num(b).map_err(err)?));
                    }
                    let repeat: usize = kv.get("repeat").map(num).transpose().map_err(err)?.unwrap_or(1);
                    let spacing = kv.get("spacing").map(vec3).transpose().map_err(err)?.unwrap_or_default();
                    kv.finish().map_err(err)?;
                    for k in 0..repeat {
                        let mut copy = p.clone();
                        copy.shape = p.shape.translated(&(spacing * k as f64));
                        spec.primitives.push(copy);
                    }
                }
                other => return Err(err(format!("unknown directive '{other}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Straight line with a constant yaw rate (radians per frame).
pub fn line_trajectory(start: Vec3, step: Vec3, frames: usize, yaw_rate: f64) -> Vec<Pose> {
    (0..frames)
        .map(|k| Pose::from_yaw(k as f64 * yaw_rate, start + step * k as f64))
        .collect()
}

struct KeyValues<'a> {
    pairs: Vec<(&'a str, &'a str)>,
    used: std::cell::RefCell<Vec<bool>>,
}

impl<'a> KeyValues<'a> {
    fn parse(words: &[&'a str]) -> Result<Self, String> {
        let pairs = words
            .iter()
            .map(|w| w.split_once('=').ok_or_else(|| format!("expected key=value, got '{w}'")))
            .collect::<Result<Vec<_>, _>>()?;
        let used = std::cell::RefCell::new(vec![false; pairs.len()]);
        Ok(Self { pairs, used })
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        let i = self.pairs.iter().position(|(k, _)| *k == key)?;
        self.used.borrow_mut()[i] = true;
        Some(self.pairs[i].1)
    }

    fn req(&self, key: &str) -> Result<&'a str, String> {
        self.get(key).ok_or_else(|| format!("missing '{key}='"))
    }

    fn finish(self) -> Result<(), String> {
        let used = self.used.borrow();
        match self.pairs.iter().zip(used.iter()).find(|(_, u)| !**u) {
            Some(((k, _), _)) => Err(format!("unexpected key '{k}'")),
            None => Ok(()),
        }
    }
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("'{s}': {e}"))
}

fn floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s.split(',').map(num).collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated values, got {}", v.len()))
}

fn vec3(s: &str) -> Result<Vec3, String> {
    let [x, y, z] = floats::<3>(s)?;
    Ok(Vec3::new(x, y, z))
}

/// Orthonormal in-plane axes `(u, v)` for a plane normal.
pub fn plane_axes(normal: &Vec3) -> (Vec3, Vec3) {
    let n = normal.normalize();
    let c = n.cross(&Vec3::z());
    let u = if c.norm() < 1e-9 { Vec3::x() } else { c.normalize() };
    (u, n.cross(&u))
}

const EPS: f64 = 1e-12;

/// Smallest positive ray parameter at which `o + t·d` meets the shape.
pub fn intersect(shape: &Shape, o: &Vec3, d: &Vec3) -> Option<f64> {
    match shape {
        Shape::Plane { center, normal, extent } => {
            let n = normal.normalize();
            let den = n.dot(d);
            if den.abs() < EPS {
                return None;
            }
            let t = n.dot(&(center - o)) / den;
            if t <= EPS {
                return None;
            }
            let (u, v) = plane_axes(&n);
            let rel = o + d * t - center;
            (rel.dot(&u).abs() <= extent.0 / 2.0 && rel.dot(&v).abs() <= extent.1 / 2.0).then_some(t)
        }
        Shape::Box { center, size, yaw } => {
            let r = Mat3::new(yaw.cos(), -yaw.sin(), 0.0, yaw.sin(), yaw.cos(), 0.0, 0.0, 0.0, 1.0);
            let lo = r.transpose() * (o - center);
            let ld = r.transpose() * d;
            let half = size / 2.0;
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for a in 0..3 {
                if ld[a].abs() < EPS {
                    if lo[a].abs() > half[a] {
                        return None;
                    }
                    continue;
                }
                let ta = (-half[a] - lo[a]) / ld[a];
                let tb = (half[a] - lo[a]) / ld[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
            if t0 > t1 {
                return None;
            }
            if t0 > EPS {
                Some(t0)
            } else if t1 > EPS {
                Some(t1)
            } else {
                None
            }
        }
        Shape::Cylinder { base, radius, height } => {
            let mut best: Option<f64> = None;
            let mut take = |t: f64| {
                if t > EPS && best.is_none_or(|b| t < b) {
                    best = Some(t);
                }
            };
            let p = o - base;
            let a = d.x * d.x + d.y * d.y;
            if a > EPS {
                let b = 2.0 * (p.x * d.x + p.y * d.y);
                let c = p.x * p.x + p.y * p.y - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                        let z = p.z + t * d.z;
                        if (0.0..=*height).contains(&z) {
                            take(t);
                        }
                    }
                }
            }
            if d.z.abs() > EPS {
                for zc in [0.0, *height] {
                    let t = (zc - p.z) / d.z;
                    let q = p + d * t;
                    if q.x * q.x + q.y * q.y <= radius * radius {
                        take(t);
                    }
                }
            }
            best
        }
    }
}

/// Center and radius of a sphere enclosing the shape.
pub fn bounding_sphere(shape: &Shape) -> (Vec3, f64) {
    match shape {
        Shape::Plane { center, extent, .. } => (*center, 0.5 * (extent.0 * extent.0 + extent.1 * extent.1).sqrt()),
        Shape::Box { center, size, .. } => (*center, 0.5 * size.norm()),
        Shape::Cylinder { base, radius, height } => (
            base + Vec3::new(0.0, 0.0, height / 2.0),
            (radius * radius + height * height / 4.0).sqrt(),
        ),
    }
}

/// Distance from `x` to the shape's surface.
pub fn surface_distance(shape: &Shape, x: &Vec3) -> f64 {
    match shape {
        Shape::Plane { center, normal, extent } => {
            let n = normal.normalize();
            let (u, v) = plane_axes(&n);
            let rel = x - center;
            let du = (rel.dot(&u).abs() - extent.0 / 2.0).max(0.0);
            let dv = (rel.dot(&v).abs() - extent.1 / 2.0).max(0.0);
            (rel.dot(&n).powi(2) + du * du + dv * dv).sqrt()
        }
        Shape::Box { center, size, yaw } => {
            let r = Mat3::new(yaw.cos(), -yaw.sin(), 0.0, yaw.sin(), yaw.cos(), 0.0, 0.0, 0.0, 1.0);
            let l = r.transpose() * (x - center);
            let q = l.abs() - size / 2.0;
            let outside = q.map(|v| v.max(0.0)).norm();
            let inside = q.max().min(0.0);
            (outside + inside).abs()
        }
        Shape::Cylinder { base, radius, height } => {
            let p = x - base;
            let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
            let dz = (p.z - height / 2.0).abs() - height / 2.0;
            let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
            let inside = dr.max(dz).min(0.0);
            (outside + inside).abs()
        }
    }
}

/// One rendered frame in the sensor frame, with per-point classes and sweep
/// times, plus the ground-truth sensor pose.
pub fn render_scene(spec: &SceneSpec, frame: usize) -> (Scan, Pose) {
    assert!(frame < spec.trajectory.len(), "frame {frame} out of range");
    let shapes: Vec<(Shape, ClassId, Vec3, f64)> = spec
        .primitives
        .iter()
        .filter(|p| p.visible_in(frame))
        .map(|p| {
            let shape = p.shape_at(frame as f64);
            let (c, r) = bounding_sphere(&shape);
            // slack so the pre-test never rejects a grazing hit
            (shape, p.class, c, r * (1.0 + 1e-9) + 1e-9)
        })
        .collect();
    let rays = spec.sensor.rays();
    let max_range = spec.sensor.max_range;
    let hits: Vec<Option<(f64, Vec3, ClassId, f64)>> = rays
        .par_iter()
        .map(|(dir, s)| {
            let pose = spec.sensor_pose(frame, *s);
            let o = pose.translation;
            let d = pose.rotation * dir;
            let mut best: Option<(f64, ClassId)> = None;
            for (shape, class, c, r) in &shapes {
                let oc = c - o;
                let along = oc.dot(&d);
                if oc.norm_squared() - along * along > r * r
                    || along + r < 0.0
                    || along - r > best.map_or(max_range, |(b, _)| b)
                {
                    continue;
                }
                if let Some(t) = intersect(shape, &o, &d) {
                    if t <= max_range && best.is_none_or(|(b, _)| t < b) {
                        best = Some((t, *class));
                    }
                }
            }
            best.map(|(t, c)| (t, *dir, c, *s))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(frame as u64);
    let normal = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma >= 0"));
    let mut points = Vec::new();
    let mut classes = Vec::new();
    let mut times = Vec::new();
    for (t, dir, c, s) in hits.into_iter().flatten() {
        let noise = match &normal {
            Some(n) => {
                let lim = 3.0 * spec.noise_sigma;
                n.sample(&mut rng).clamp(-lim, lim)
            }
            None => 0.0,
        };
        points.push(dir * (t + noise));
        classes.push(c);
        times.push(s);
    }
    let scan = Scan::new(points, classes, Some(times)).expect("columns built together");
    (scan, spec.trajectory[frame])
}

/// Points of a rendered scan in the world frame, using the sensor pose at
/// each point's sweep time.
pub fn scan_to_world(spec: &SceneSpec, frame: usize, scan: &Scan) -> Vec<Vec3> {
    let times = scan.times().map(<[f64]>::to_vec).unwrap_or_else(|| vec![1.0; scan.len()]);
    scan.points()
        .iter()
        .zip(times)
        .map(|(p, s)| spec.sensor_pose(frame, s).transform_point(p))
        .collect()
}

/// Writes `velodyne/NNNNNN.bin`, `labels/NNNNNN.label` and `poses.txt`.
/// Poses are relative to the first frame, which is the identity.
pub fn write_dataset(spec: &SceneSpec, out: &Path, labels: &LabelMap) -> Result<usize, SceneError> {
    spec.validate()?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e: std::io::Error| {
            SceneError::Io(IoError::Io {
                path: p.display().to_string(),
                source: e,
            })
        }
    };
    let velo = out.join("velodyne");
    let lab = out.join("labels");
    fs::create_dir_all(&velo).map_err(io(&velo))?;
    fs::create_dir_all(&lab).map_err(io(&lab))?;
    let mut gt = Vec::with_capacity(spec.frames());
    let inv0 = spec.trajectory[0].inverse();
    for f in 0..spec.frames() {
        let (scan, pose) = render_scene(spec, f);
        write_point_cloud_bin(&velo.join(format!("{f:06}.bin")), &scan)?;
        write_labels(&lab.join(format!("{f:06}.label")), scan.classes(), labels)?;
        gt.push(inv0.compose(&pose));
    }
    write_trajectory_kitti(&out.join("poses.txt"), &gt)?;
    Ok(spec.frames())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sensor() -> SensorModel {
        SensorModel {
            beams: 8,
            vfov: (-10.0, 10.0),
            hres: 4.0,
            max_range: 30.0,
            sweep: false,
        }
    }

    #[test]
    fn facing_plane_ranges_are_analytic() {
        let wall = Primitive::new(
            Shape::Plane {
                center: Vec3::new(5.0, 0.0, 0.0),
                normal: Vec3::new(-1.0, 0.0, 0.0),
                extent: (100.0, 100.0),
            },
            13,
        );
        let spec = SceneSpec::new(sensor(), vec![wall], vec![Pose::identity()]);
        let (scan, _) = render_scene(&spec, 0);
        assert!(!scan.is_empty());
        for p in scan.points() {
            let d = p.normalize();
            assert!((p.norm() - 5.0 / d.x).abs() < 1e-9);
            assert!((p.x - 5.0).abs() < 1e-9);
        }
        assert!(scan.classes().iter().all(|c| *c == 13));
    }

    #[test]
    fn box_beyond_range_is_invisible() {
        let b = Primitive::new(
            Shape::Box {
                center: Vec3::new(50.0, 0.0, 0.0),
                size: Vec3::new(2.0, 2.0, 2.0),
                yaw: 0.0,
            },
            1,
        );
        let spec = SceneSpec::new(sensor(), vec![b], vec![Pose::identity()]);
        assert!(render_scene(&spec, 0).0.is_empty());
    }

    fn random_scene(rng: &mut ChaCha8Rng, sigma: f64) -> SceneSpec {
        let mut prims = vec![Primitive::new(
            Shape::Plane {
                center: Vec3::new(0.0, 0.0, -1.5),
                normal: Vec3::z(),
                extent: (60.0, 60.0),
            },
            9,
        )];
        for _ in 0..6 {
            let c = Vec3::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0), 0.0);
            if c.norm() < 3.0 {
                continue;
            }
            prims.push(match rng.random_range(0..3) {
                0 => Primitive::new(
                    Shape::Box {
                        center: c,
                        size: Vec3::new(rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)),
                        yaw: rng.random_range(-3.0..3.0),
                    },
                    1,
                ),
                1 => Primitive::new(
                    Shape::Cylinder {
                        base: c - Vec3::new(0.0, 0.0, 1.5),
                        radius: rng.random_range(0.2..1.0),
                        height: rng.random_range(1.0..4.0),
                    },
                    18,
                ),
                _ => Primitive::new(
                    Shape::Plane {
                        center: c,
                        normal: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.1),
                        extent: (rng.random_range(1.0..6.0), rng.random_range(1.0..4.0)),
                    },
                    13,
                ),
            });
        }
        let mut spec = SceneSpec::new(sensor(), prims, line_trajectory(Vec3::zeros(), Vec3::new(0.5, 0.1, 0.0), 3, 0.05));
        spec.noise_sigma = sigma;
        spec.seed = 3;
        spec
    }

    #[test]
    fn points_lie_on_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..10 {
            let sigma = if trial % 2 == 0 { 0.0 } else { 0.02 };
            let spec = random_scene(&mut rng, sigma);
            for f in 0..spec.frames() {
                let (scan, _) = render_scene(&spec, f);
                for w in scan_to_world(&spec, f, &scan) {
                    let d = spec
                        .primitives
                        .iter()
                        .map(|p| surface_distance(&p.shape_at(f as f64), &w))
                        .fold(f64::INFINITY, f64::min);
                    assert!(d <= 1e-9 + 3.0 * sigma, "distance {d}");
                }
            }
        }
    }

    #[test]
    fn rendering_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = random_scene(&mut rng, 0.05);
        assert_eq!(render_scene(&spec, 1), render_scene(&spec, 1));
        let mut other = spec.clone();
        other.seed = 4;
        assert_ne!(render_scene(&spec, 1).0, render_scene(&other, 1).0);
    }

    #[test]
    fn sweep_times_span_unit_interval() {
        let spec = SceneSpec::new(sensor(), vec![], vec![Pose::identity()]);
        let rays = spec.sensor.rays();
        assert_eq!(rays.len(), 90 * 8);
        assert_eq!(rays.first().unwrap().1, 0.0);
        assert_eq!(rays.last().unwrap().1, 1.0);
    }

    #[test]
    fn moving_and_hidden_primitives() {
        let mut b = Primitive::new(
            Shape::Box {
                center: Vec3::new(5.0, 0.0, 0.0),
                size: Vec3::new(1.0, 1.0, 1.0),
                yaw: 0.0,
            },
            1,
        );
        b.motion = Vec3::new(1.0, 0.0, 0.0);
        b.visible = Some((0, 1));
        let spec = SceneSpec::new(sensor(), vec![b], vec![Pose::identity(); 3]);
        let near = render_scene(&spec, 0).0;
        let far = render_scene(&spec, 1).0;
        assert!(!near.is_empty() && !far.is_empty());
        assert!(far.points().iter().all(|p| p.x > 5.4));
        assert!(render_scene(&spec, 2).0.is_empty());
    }

    #[test]
    fn scene_file_parses() {
        let text = "\
# corridor
sensor beams=4 vfov=-5,5 hres=2 max_range=40 sweep=true
noise sigma=0.01 seed=9
trajectory line start=0,0,1 step=1,0,0 frames=5 yaw_rate=1
primitive plane center=0,2,1 normal=0,-1,0 extent=100,4 class=13
primitive box center=10,0,1 size=1,1,2 yaw=45 class=1 motion=0.5,0,0 visible=0-2
primitive cylinder base=5,-1,0 radius=0.2 height=3 class=18
primitive box center=0,3,1 size=1,1,1 class=13 repeat=3 spacing=4,0,0
";
        let s = SceneSpec::parse(text).unwrap();
        assert_eq!(s.frames(), 5);
        assert_eq!(s.primitives.len(), 6);
        assert!(matches!(s.primitives[5].shape, Shape::Box { center, .. } if center == Vec3::new(8.0, 3.0, 1.0)));
        assert!(s.sensor.sweep);
        assert_eq!(s.primitives[1].visible, Some((0, 2)));
        assert!((s.trajectory[2].rotation_angle() - 2f64.to_radians()).abs() < 1e-12);
        assert!(matches!(SceneSpec::parse("primitive blob class=1"), Err(SceneError::Parse { line: 1, .. })));
        assert!(matches!(SceneSpec::parse("sensor beams=2 colour=red\npose 0 0 0 0 0 0"), Err(SceneError::Parse { .. })));
        assert!(matches!(SceneSpec::parse("sensor beams=2"), Err(SceneError::Invalid(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let spec = random_scene(&mut rng, 0.0);
        let map = LabelMap::semantic_kitti();
        assert_eq!(write_dataset(&spec, dir.path(), &map).unwrap(), 3);
        let (scan, _) = render_scene(&spec, 2);
        let bin = crate::io::read_point_cloud_bin(&dir.path().join("velodyne/000002.bin")).unwrap();
        let labels = crate::io::read_labels(&dir.path().join("labels/000002.label"), bin.len(), &map).unwrap();
        assert_eq!(bin.len(), scan.len());
        assert_eq!(labels, scan.classes());
        let gt = crate::io::read_trajectory_kitti(&dir.path().join("poses.txt")).unwrap();
        assert_eq!(gt.len(), 3);
        assert!(gt[0].translation.norm() < 1e-9 && gt[0].rotation_angle() < 1e-9);
    }
}
