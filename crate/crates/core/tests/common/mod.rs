#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socc_core::pipeline::FrameReport;
use socc_core::synth::{line_trajectory, render_scene, Primitive, SceneSpec, SensorModel, Shape};
use socc_core::se3::exp_map;
use socc_core::{ClassId, MappingConfig, OccupancyGrid, Odometry, PipelineConfig, Pose, Scan, Twist, Vec3};

pub fn plane(center: Vec3, normal: Vec3, w: f64, h: f64, class: ClassId) -> Primitive {
    Primitive::new(
        Shape::Plane {
            center,
            normal,
            extent: (w, h),
        },
        class,
    )
}

pub fn cuboid(center: Vec3, size: Vec3, yaw: f64, class: ClassId) -> Primitive {
    Primitive::new(Shape::Box { center, size, yaw }, class)
}

pub fn pillar(base: Vec3, radius: f64, height: f64, class: ClassId) -> Primitive {
    Primitive::new(Shape::Cylinder { base, radius, height }, class)
}

pub fn sensor(beams: usize, hres: f64, max_range: f64) -> SensorModel {
    SensorModel {
        beams,
        vfov: (-25.0, 15.0),
        hres,
        max_range,
        sweep: false,
    }
}

/// Street-like scene: ground, two facades and scattered boxes and poles
/// along a straight drive in +x.
pub fn street_scene(frames: usize, step: f64, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let length = frames as f64 * step + 80.0;
    let mid = Vec3::new(length / 2.0 - 40.0, 0.0, 0.0);
    let mut prims = vec![
        plane(mid, Vec3::z(), length, 40.0, 9),
        plane(mid + Vec3::new(0.0, 9.0, 4.0), Vec3::y(), length, 8.0, 13),
        plane(mid + Vec3::new(0.0, -9.0, 4.0), Vec3::y(), length, 8.0, 13),
    ];
    let mut x = -30.0;
    while x < length - 40.0 {
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let y = side * rng.random_range(3.5..7.5);
        if rng.random_bool(0.5) {
            let size = Vec3::new(rng.random_range(1.0..4.0), rng.random_range(1.0..2.5), rng.random_range(1.0..3.0));
            prims.push(cuboid(Vec3::new(x, y, size.z / 2.0), size, rng.random_range(-0.6..0.6), 13));
        } else {
            prims.push(pillar(Vec3::new(x, y, 0.0), rng.random_range(0.15..0.5), rng.random_range(2.0..6.0), 18));
        }
        x += rng.random_range(3.0..7.0);
    }
    SceneSpec::new(
        sensor(16, 1.0, 40.0),
        prims,
        line_trajectory(Vec3::new(0.0, 0.0, 1.8), Vec3::new(step, 0.0, 0.0), frames, 0.0),
    )
}

/// The shipped corridor scene cut to its first `frames` frames, optionally
/// without the pillars.
pub fn corridor_scene(frames: usize, pillars: bool) -> SceneSpec {
    let text = include_str!("../../../../scenes/corridor.scene");
    let mut spec = SceneSpec::parse(text).expect("shipped scene parses");
    assert!(frames <= spec.frames());
    spec.trajectory.truncate(frames);
    if !pillars {
        spec.primitives.retain(|p| !matches!(p.shape, Shape::Box { .. }));
    }
    spec
}

/// Ground truth re-expressed relative to the first frame.
pub fn relative_gt(spec: &SceneSpec) -> Vec<Pose> {
    let inv0 = spec.trajectory[0].inverse();
    spec.trajectory.iter().map(|p| inv0.compose(p)).collect()
}

pub fn run(spec: &SceneSpec, cfg: PipelineConfig) -> (Vec<Pose>, Vec<FrameReport>) {
    let mut odo = Odometry::new(cfg).expect("valid config");
    let mut reports = Vec::new();
    for f in 0..spec.frames() {
        let (scan, _) = render_scene(spec, f);
        reports.push(odo.process_scan(&scan).expect("frame processed"));
    }
    (odo.trajectory().to_vec(), reports)
}

/// Endpoint error as a fraction of the traveled distance.
pub fn endpoint_drift(est: &[Pose], gt: &[Pose]) -> f64 {
    socc_core::eval::endpoint_drift(est, gt).expect("matching trajectories")
}

/// Long room along +x with a ceiling, relief panels on both walls and a
/// few free-standing boxes and columns.
pub fn textured_room(frames: usize, step: f64, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let length = frames as f64 * step + 60.0;
    let x0 = -30.0;
    let cx = x0 + length / 2.0;
    let (half_width, height) = (6.0, 4.0);
    let mut prims = vec![
        plane(Vec3::new(cx, 0.0, 0.0), Vec3::z(), length, 2.0 * half_width, 9),
        plane(Vec3::new(cx, 0.0, height), Vec3::z(), length, 2.0 * half_width, 13),
        plane(Vec3::new(cx, half_width, height / 2.0), Vec3::y(), length, height, 13),
        plane(Vec3::new(cx, -half_width, height / 2.0), Vec3::y(), length, height, 13),
    ];
    for side in [1.0, -1.0] {
        let mut x = x0 + rng.random_range(0.0..2.0);
        while x < x0 + length {
            let w = rng.random_range(0.4..1.5);
            let h = rng.random_range(0.8..3.5);
            let d = rng.random_range(0.15..0.6);
            let z = rng.random_range(0.0..height - h);
            prims.push(cuboid(
                Vec3::new(x, side * (half_width - d / 2.0), z + h / 2.0),
                Vec3::new(w, d, h),
                0.0,
                14,
            ));
            x += w + rng.random_range(0.5..2.0);
        }
    }
    let mut x = x0;
    while x < x0 + length {
        let y = rng.random_range(2.0..4.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        if rng.random_bool(0.5) {
            let size = Vec3::new(rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
            prims.push(cuboid(Vec3::new(x, y, size.z / 2.0), size, rng.random_range(-0.8..0.8), 13));
        } else {
            prims.push(pillar(Vec3::new(x, y, 0.0), rng.random_range(0.1..0.3), height, 18));
        }
        x += rng.random_range(3.0..6.0);
    }
    SceneSpec::new(
        SensorModel {
            beams: 64,
            vfov: (-25.0, 15.0),
            hres: 0.2,
            max_range: 40.0,
            sweep: false,
        },
        prims,
        line_trajectory(Vec3::new(0.0, 0.0, 1.5), Vec3::new(step, 0.0, 0.0), frames, 0.0),
    )
}

/// Map built from dense, noise-free samples of the textured room, seen
/// from the first frame of the trajectory.
pub fn structured_map(seed: u64, mapping: MappingConfig) -> OccupancyGrid {
    let spec = textured_room(1, 1.0, seed);
    let (scan, pose) = render_scene(&spec, 0);
    let mut grid = OccupancyGrid::new(mapping).expect("valid mapping");
    for (p, &c) in scan.points().iter().zip(scan.classes()) {
        grid.insert_hit(&pose.transform_point(p), c);
    }
    grid
}

/// Scan whose points are the map's first-inserted anchors, expressed in the
/// sensor frame at `pose`. Each point carries its voxel's label.
pub fn anchor_scan(grid: &OccupancyGrid, pose: &Pose) -> Scan {
    let inv = pose.inverse();
    let (points, classes): (Vec<Vec3>, Vec<ClassId>) = grid
        .sorted_cells()
        .into_iter()
        .filter(|(_, v)| v.is_occupied())
        .map(|(_, v)| (inv.transform_point(&v.anchor()), v.label()))
        .unzip();
    Scan::new(points, classes, None).expect("consistent scan")
}

/// Random rigid transform with translation norm at most `max_t` and
/// rotation angle at most `max_deg`.
pub fn random_perturbation(rng: &mut ChaCha8Rng, max_t: f64, max_deg: f64) -> Pose {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
    let angle = rng.random_range(0.0..max_deg).to_radians();
    let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
    let t = dir * rng.random_range(0.0..max_t);
    Pose::new(exp_map(&Twist::new(axis * angle, Vec3::zeros())).rotation, t)
}
