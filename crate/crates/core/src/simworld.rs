//! Deterministic synthetic dynamic scenes with exact ground truth.
//!
//! Scenes are built from analytic primitives (planes, boxes, spheres) and
//! ray-cast per pixel. World axes follow the camera convention at the
//! identity pose: x right, y down, z forward. Flow is measured in pixels from
//! frame `i` to frame `j`, so a camera translating by `+t` along x over a
//! fronto-parallel plane at depth `z` sees flow `(-fx t / z, 0)`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, FlowField, InverseDepthMap, SE3Pose, Twist, EPSILON_Z};
use crate::grid::Grid;
use crate::panoptic::PanopticMap;
use crate::{Error, Result};

fn twist_of(v: &[f64; 6]) -> Twist {
    Twist::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
}

fn default_interval() -> f64 {
    0.1
}

fn default_radius() -> usize {
    2
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    /// Initial camera-to-world pose as a twist `[wx, wy, wz, vx, vy, vz]`.
    #[serde(default)]
    pub start: [f64; 6],
    /// Per-frame body-frame increments; the last one repeats.
    pub motion: Vec<[f64; 6]>,
}

/// Plane `normal · x = offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub class: u16,
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub class: u16,
    #[serde(default)]
    pub instance: u32,
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    /// Rotation about the y (down) axis, radians.
    #[serde(default)]
    pub yaw: f64,
    /// Body-frame twist per frame.
    #[serde(default)]
    pub twist: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereSpec {
    pub class: u16,
    #[serde(default)]
    pub instance: u32,
    pub center: [f64; 3],
    pub radius: f64,
    #[serde(default)]
    pub twist: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Gaussian flow noise per component, pixels.
    #[serde(default)]
    pub flow_sigma: f64,
    /// Fraction of pixels whose flow is replaced by uniform noise in [-20, 20] px.
    #[serde(default)]
    pub flow_outlier_fraction: f64,
    /// Segmentation boundary jitter radius, pixels.
    #[serde(default)]
    pub seg_jitter: usize,
    /// Replace instance ids of observed segmentations by per-frame random ids.
    #[serde(default = "default_true")]
    pub shuffle_instance_ids: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub num_frames: usize,
    #[serde(default = "default_interval")]
    pub frame_interval: f64,
    /// Flow is rendered to every frame within this index distance.
    #[serde(default = "default_radius")]
    pub flow_radius: usize,
    pub thing_classes: Vec<u16>,
    pub seed: u64,
    pub camera: CameraSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default, rename = "plane", skip_serializing_if = "Vec::is_empty")]
    pub planes: Vec<PlaneSpec>,
    #[serde(default, rename = "box", skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<BoxSpec>,
    #[serde(default, rename = "sphere", skip_serializing_if = "Vec::is_empty")]
    pub spheres: Vec<SphereSpec>,
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SceneConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene config serializes")
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }

    pub fn thing_set(&self) -> BTreeSet<u16> {
        self.thing_classes.iter().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics()?;
        if self.num_frames < 2 {
            return Err(Error::Config("num_frames must be >= 2".into()));
        }
        if self.camera.motion.is_empty() {
            return Err(Error::Config("camera.motion needs at least one twist".into()));
        }
        if self.planes.is_empty() && !self.boxes.iter().any(|b| b.instance == 0) {
            return Err(Error::Config("scene needs at least one static surface".into()));
        }
        let things = self.thing_set();
        let objects = self
            .boxes
            .iter()
            .map(|b| (b.class, b.instance))
            .chain(self.spheres.iter().map(|s| (s.class, s.instance)));
        let mut seen = BTreeSet::new();
        for (class, instance) in objects {
            if (instance > 0) != things.contains(&class) {
                return Err(Error::Config(format!(
                    "object class {class} / instance {instance} disagree with thing_classes"
                )));
            }
            if instance > 0 && !seen.insert(instance) {
                return Err(Error::Config(format!("duplicate instance id {instance}")));
            }
        }
        for p in &self.planes {
            if things.contains(&p.class) {
                return Err(Error::Config(format!("plane class {} is a thing class", p.class)));
            }
            if Vector3::from(p.normal).norm() == 0.0 {
                return Err(Error::Config("plane normal is zero".into()));
            }
        }
        let n = &self.noise;
        if !(n.flow_sigma >= 0.0) || !(0.0..=1.0).contains(&n.flow_outlier_fraction) {
            return Err(Error::Config("invalid noise settings".into()));
        }
        Ok(())
    }

    /// World-to-camera ground-truth poses.
    pub fn camera_poses(&self) -> Vec<SE3Pose> {
        let mut c2w = SE3Pose::exp(&twist_of(&self.camera.start));
        let mut out = Vec::with_capacity(self.num_frames);
        for t in 0..self.num_frames {
            out.push(c2w.inverse());
            let step = &self.camera.motion[t.min(self.camera.motion.len() - 1)];
            c2w = c2w.compose(&SE3Pose::exp(&twist_of(step)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Plane { normal: Vector3<f64>, offset: f64 },
    Aabb { half: Vector3<f64> },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone)]
struct Primitive {
    shape: Shape,
    class: u16,
    instance: u32,
    /// Object-to-world pose at frame 0.
    origin: SE3Pose,
    twist: Twist,
}

impl Primitive {
    fn moving(&self) -> bool {
        self.twist.max_abs() > 0.0
    }

    fn pose_at(&self, frame: usize) -> SE3Pose {
        if self.moving() {
            self.origin.compose(&SE3Pose::exp(&self.twist.scaled(frame as f64)))
        } else {
            self.origin
        }
    }

    /// Ray parameter of the nearest hit beyond `EPSILON_Z` in local coordinates.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let valid = |t: f64| (t > EPSILON_Z && t.is_finite()).then_some(t);
        match self.shape {
            Shape::Plane { normal, offset } => {
                let denom = normal.dot(d);
                if denom == 0.0 {
                    return None;
                }
                valid((offset - normal.dot(o)) / denom)
            }
            Shape::Aabb { half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[a];
                    let (mut lo, mut hi) = ((-half[a] - o[a]) * inv, (half[a] - o[a]) * inv);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    t0 = t0.max(lo);
                    t1 = t1.min(hi);
                }
                if t0 > t1 {
                    return None;
                }
                valid(t0).or_else(|| valid(t1))
            }
            Shape::Sphere { radius } => {
                let a = d.norm_squared();
                let b = o.dot(d);
                let c = o.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                valid((-b - s) / a).or_else(|| valid((-b + s) / a))
            }
        }
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        match self.shape {
            Shape::Plane { .. } => false,
            Shape::Aabb { half } => (0..3).all(|a| p[a].abs() < half[a]),
            Shape::Sphere { radius } => p.norm() < radius,
        }
    }
}

fn build_primitives(cfg: &SceneConfig) -> Vec<Primitive> {
    let mut prims = Vec::new();
    for p in &cfg.planes {
        let n = Vector3::from(p.normal);
        let norm = n.norm();
        prims.push(Primitive {
            shape: Shape::Plane {
                normal: n / norm,
                offset: p.offset / norm,
            },
            class: p.class,
            instance: 0,
            origin: SE3Pose::identity(),
            twist: Twist::zero(),
        });
    }
    for b in &cfg.boxes {
        prims.push(Primitive {
            shape: Shape::Aabb {
                half: Vector3::from(b.half_extents),
            },
            class: b.class,
            instance: b.instance,
            origin: SE3Pose::new(
                UnitQuaternion::from_euler_angles(0.0, b.yaw, 0.0),
                Vector3::from(b.center),
            ),
            twist: twist_of(&b.twist),
        });
    }
    for s in &cfg.spheres {
        prims.push(Primitive {
            shape: Shape::Sphere { radius: s.radius },
            class: s.class,
            instance: s.instance,
            origin: SE3Pose::new(UnitQuaternion::identity(), Vector3::from(s.center)),
            twist: twist_of(&s.twist),
        });
    }
    prims
}

/// Primitive poses for one frame, cached as (world-to-local, local-to-world).
struct FrameObjects {
    to_local: Vec<SE3Pose>,
    to_world: Vec<SE3Pose>,
}

impl FrameObjects {
    fn new(prims: &[Primitive], frame: usize) -> Self {
        let to_world: Vec<SE3Pose> = prims.iter().map(|p| p.pose_at(frame)).collect();
        Self {
            to_local: to_world.iter().map(|g| g.inverse()).collect(),
            to_world,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    /// Camera-frame depth.
    z: f64,
    prim: usize,
    local: Vector3<f64>,
}

/// Casts the ray through continuous pixel `pixel` of a camera with
/// world-to-camera pose `pose`.
fn cast(
    k: &CameraIntrinsics,
    pose: &SE3Pose,
    prims: &[Primitive],
    objs: &FrameObjects,
    pixel: &Vector2<f64>,
) -> Option<Hit> {
    let c2w = pose.inverse();
    let origin = *c2w.translation();
    let dir_cam = Vector3::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0);
    let dir = c2w.rotation() * dir_cam;
    let mut best: Option<Hit> = None;
    for (idx, prim) in prims.iter().enumerate() {
        let g = &objs.to_local[idx];
        let o = g.transform_point(&origin);
        let d = g.rotation() * dir;
        if let Some(t) = prim.intersect(&o, &d) {
            if best.is_none_or(|b| t < b.z) {
                best = Some(Hit {
                    z: t,
                    prim: idx,
                    local: o + d * t,
                });
            }
        }
    }
    best
}

/// Ground truth and noisy observations of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub index: usize,
    pub timestamp: f64,
    /// World-to-camera.
    pub gt_pose: SE3Pose,
    pub gt_depth: InverseDepthMap,
    pub gt_panoptic: PanopticMap,
    /// Segmentation as a per-frame detector would report it: boundary jitter
    /// and per-frame instance ids.
    pub obs_panoptic: PanopticMap,
    /// Pixels on objects with nonzero twist.
    pub moving: Grid<bool>,
    pub gt_flow_to: BTreeMap<usize, FlowField>,
    /// Flow lands in front of the target camera and inside its image.
    pub flow_valid_to: BTreeMap<usize, Grid<bool>>,
    /// The pixel's surface point is unoccluded in the target frame.
    pub visible_in: BTreeMap<usize, Grid<bool>>,
    pub noisy_flow_to: BTreeMap<usize, FlowField>,
}

const STREAM_FLOW: u64 = 1;
const STREAM_SEG: u64 = 2;
const STREAM_IDS: u64 = 3;

fn rng_for(seed: u64, kind: u64, frame: usize, other: usize, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 56) | ((frame as u64) << 36) | ((other as u64) << 20) | row as u64);
    rng
}

pub fn render_sequence(config: &SceneConfig) -> Result<Vec<RenderedFrame>> {
    config.validate()?;
    let k = config.intrinsics()?;
    let prims = build_primitives(config);
    let poses = config.camera_poses();
    let objects: Vec<FrameObjects> = (0..config.num_frames)
        .map(|f| FrameObjects::new(&prims, f))
        .collect();

    for (f, pose) in poses.iter().enumerate() {
        let center = pose.center();
        for (idx, prim) in prims.iter().enumerate() {
            if prim.contains(&objects[f].to_local[idx].transform_point(&center)) {
                return Err(Error::DegenerateGeometry(format!(
                    "camera {f} is inside primitive {idx}"
                )));
            }
        }
    }

    let (w, h) = (config.width, config.height);
    let things = config.thing_set();
    let mut frames = Vec::with_capacity(config.num_frames);
    for f in 0..config.num_frames {
        let hits: Vec<Hit> = (0..w * h)
            .into_par_iter()
            .map(|idx| {
                let px = Vector2::new((idx % w) as f64, (idx / w) as f64);
                cast(&k, &poses[f], &prims, &objects[f], &px).ok_or(idx)
            })
            .collect::<std::result::Result<_, usize>>()
            .map_err(|idx| {
                Error::DegenerateGeometry(format!("pixel {idx} of frame {f} hits nothing"))
            })?;

        let depth = InverseDepthMap::new(Grid::from_vec(w, h, hits.iter().map(|h| 1.0 / h.z).collect()))?;
        let class = Grid::from_vec(w, h, hits.iter().map(|h| prims[h.prim].class).collect());
        let inst = Grid::from_vec(w, h, hits.iter().map(|h| prims[h.prim].instance).collect());
        let gt_panoptic = PanopticMap::new(class, inst, things.clone())?;
        let moving = Grid::from_vec(w, h, hits.iter().map(|h| prims[h.prim].moving()).collect());
        let obs_panoptic = observe_segmentation(config, f, &gt_panoptic)?;

        let mut gt_flow_to = BTreeMap::new();
        let mut flow_valid_to = BTreeMap::new();
        let mut visible_in = BTreeMap::new();
        let mut noisy_flow_to = BTreeMap::new();
        let lo = f.saturating_sub(config.flow_radius);
        let hi = (f + config.flow_radius).min(config.num_frames - 1);
        for j in (lo..=hi).filter(|&j| j != f) {
            let cells: Vec<(Vector2<f64>, bool, bool)> = hits
                .par_iter()
                .enumerate()
                .map(|(idx, hit)| {
                    let px = Vector2::new((idx % w) as f64, (idx / w) as f64);
                    let world = objects[j].to_world[hit.prim].transform_point(&hit.local);
                    let x_j = poses[j].transform_point(&world);
                    if x_j.z <= EPSILON_Z {
                        return (Vector2::zeros(), false, false);
                    }
                    let p = Vector2::new(k.fx * x_j.x / x_j.z + k.cx, k.fy * x_j.y / x_j.z + k.cy);
                    let flow = p - px;
                    if !k.in_bounds(&p) {
                        return (flow, false, false);
                    }
                    let visible = cast(&k, &poses[j], &prims, &objects[j], &p)
                        .is_some_and(|other| other.z >= x_j.z * (1.0 - 1e-6));
                    (flow, true, visible)
                })
                .collect();
            let flow = Grid::from_vec(w, h, cells.iter().map(|c| c.0).collect());
            let valid = Grid::from_vec(w, h, cells.iter().map(|c| c.1).collect());
            let visible = Grid::from_vec(w, h, cells.iter().map(|c| c.2).collect());
            let noisy = add_flow_noise(config, f, j, &flow, &valid);
            gt_flow_to.insert(j, flow);
            flow_valid_to.insert(j, valid);
            visible_in.insert(j, visible);
            noisy_flow_to.insert(j, noisy);
        }

        frames.push(RenderedFrame {
            index: f,
            timestamp: f as f64 * config.frame_interval,
            gt_pose: poses[f],
            gt_depth: depth,
            gt_panoptic,
            obs_panoptic,
            moving,
            gt_flow_to,
            flow_valid_to,
            visible_in,
            noisy_flow_to,
        });
    }
    Ok(frames)
}

fn add_flow_noise(
    cfg: &SceneConfig,
    frame: usize,
    target: usize,
    flow: &FlowField,
    valid: &Grid<bool>,
) -> FlowField {
    let n = &cfg.noise;
    if n.flow_sigma == 0.0 && n.flow_outlier_fraction == 0.0 {
        return flow.clone();
    }
    let (w, h) = flow.dims();
    let normal = Normal::new(0.0, n.flow_sigma).expect("sigma validated");
    let rows: Vec<Vec<Vector2<f64>>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut rng = rng_for(cfg.seed, STREAM_FLOW, frame, target, v);
            (0..w)
                .map(|u| {
                    // Draw unconditionally so every pixel consumes the same stream.
                    let outlier = rng.random::<f64>() < n.flow_outlier_fraction;
                    let noise = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                    let uniform = Vector2::new(rng.random_range(-20.0..=20.0), rng.random_range(-20.0..=20.0));
                    if !*valid.get(u, v) {
                        *flow.get(u, v)
                    } else if outlier {
                        uniform
                    } else {
                        flow.get(u, v) + noise
                    }
                })
                .collect()
        })
        .collect();
    Grid::from_vec(w, h, rows.into_iter().flatten().collect())
}

fn observe_segmentation(cfg: &SceneConfig, frame: usize, gt: &PanopticMap) -> Result<PanopticMap> {
    let (w, h) = gt.dims();
    let jitter = cfg.noise.seg_jitter as i64;
    let (class, inst) = if jitter == 0 {
        (gt.class_id().clone(), gt.instance_id().clone())
    } else {
        let picks: Vec<usize> = (0..h)
            .into_par_iter()
            .flat_map_iter(|v| {
                let mut rng = rng_for(cfg.seed, STREAM_SEG, frame, 0, v);
                (0..w)
                    .map(|u| {
                        let du = rng.random_range(-jitter..=jitter);
                        let dv = rng.random_range(-jitter..=jitter);
                        let uu = (u as i64 + du).clamp(0, w as i64 - 1) as usize;
                        let vv = (v as i64 + dv).clamp(0, h as i64 - 1) as usize;
                        vv * w + uu
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        (
            Grid::from_vec(w, h, picks.iter().map(|&i| gt.class_id().as_slice()[i]).collect()),
            Grid::from_vec(w, h, picks.iter().map(|&i| gt.instance_id().as_slice()[i]).collect()),
        )
    };
    let map = PanopticMap::new(class, inst, gt.thing_classes().clone())?;
    if !cfg.noise.shuffle_instance_ids {
        return Ok(map);
    }
    let mut rng = rng_for(cfg.seed, STREAM_IDS, frame, 0, 0);
    let ids: Vec<u32> = map.instances().keys().copied().collect();
    let mut pool: Vec<u32> = (1..=1000).collect();
    let mut mapping = BTreeMap::new();
    for id in ids {
        let pick = rng.random_range(0..pool.len());
        mapping.insert(id, pool.swap_remove(pick));
    }
    Ok(map.relabeled(&mapping))
}

/// 1 on pixels of objects with nonzero twist, 0 elsewhere.
pub fn motion_prob_oracle(frame: &RenderedFrame) -> Grid<f64> {
    frame.moving.map(|m| if *m { 1.0 } else { 0.0 })
}

/// Stuff and thing classes used by the bundled scenes.
pub mod classes {
    pub const ROAD: u16 = 0;
    pub const BUILDING: u16 = 1;
    pub const SKY: u16 = 2;
    pub const VEGETATION: u16 = 3;
    pub const CAR: u16 = 10;
    pub const TRUCK: u16 = 11;
}

fn room(cfg_planes: &mut Vec<PlaneSpec>) {
    use classes::*;
    cfg_planes.extend([
        PlaneSpec { class: ROAD, normal: [0.0, 1.0, 0.0], offset: 1.6 },
        PlaneSpec { class: SKY, normal: [0.0, 1.0, 0.0], offset: -6.0 },
        PlaneSpec { class: BUILDING, normal: [0.0, 0.0, 1.0], offset: 30.0 },
        PlaneSpec { class: VEGETATION, normal: [1.0, 0.0, 0.0], offset: -7.0 },
        PlaneSpec { class: BUILDING, normal: [1.0, 0.0, 0.0], offset: 7.0 },
    ]);
}

fn base_config(num_frames: usize, seed: u64) -> SceneConfig {
    let mut planes = Vec::new();
    room(&mut planes);
    SceneConfig {
        width: 512,
        height: 384,
        fx: 400.0,
        fy: 400.0,
        cx: 256.0,
        cy: 192.0,
        num_frames,
        frame_interval: 0.1,
        flow_radius: 2,
        thing_classes: vec![classes::CAR, classes::TRUCK],
        seed,
        camera: CameraSpec {
            start: [0.0; 6],
            motion: vec![[0.0, 0.03, 0.0, 0.2, 0.0, 0.4]],
        },
        noise: NoiseSpec {
            shuffle_instance_ids: true,
            ..NoiseSpec::default()
        },
        planes,
        boxes: vec![BoxSpec {
            class: classes::BUILDING,
            instance: 0,
            center: [-4.0, 0.1, 16.0],
            half_extents: [1.5, 1.5, 1.5],
            yaw: 0.3,
            twist: [0.0; 6],
        }],
        spheres: Vec::new(),
    }
}

/// Static room, no things, exact observations.
pub fn static_demo(seed: u64) -> SceneConfig {
    base_config(5, seed)
}

/// Room with a parked car and one large moving truck; the truck covers
/// roughly a fifth of the image. `seed` also perturbs the truck's motion.
pub fn dynamic_demo(seed: u64, num_frames: usize, flow_sigma: f64) -> SceneConfig {
    let mut cfg = base_config(num_frames, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let lateral = -rng.random_range(0.18..0.26);
    let lift = rng.random_range(-0.03..0.03);
    cfg.noise.flow_sigma = flow_sigma;
    cfg.boxes.push(BoxSpec {
        class: classes::CAR,
        instance: 1,
        center: [3.5, 0.85, 9.0],
        half_extents: [0.9, 0.75, 2.0],
        yaw: 0.0,
        twist: [0.0; 6],
    });
    cfg.boxes.push(BoxSpec {
        class: classes::TRUCK,
        instance: 2,
        center: [-lateral * num_frames as f64 * 0.5 + 0.2, 0.1, 8.0],
        half_extents: [2.0, 1.5, 1.5],
        yaw: 0.0,
        twist: [0.0, 0.0, 0.0, lateral, lift, 0.4],
    });
    cfg
}

/// Two objects that never overlap in the image, exact observations.
pub fn occlusion_free_demo(num_frames: usize) -> SceneConfig {
    let mut cfg = base_config(num_frames, 7);
    cfg.camera.motion = vec![[0.0, 0.01, 0.0, 0.05, 0.0, 0.2]];
    cfg.boxes.push(BoxSpec {
        class: classes::CAR,
        instance: 1,
        center: [3.5, 0.85, 12.0],
        half_extents: [0.9, 0.75, 2.0],
        yaw: 0.0,
        twist: [0.0; 6],
    });
    cfg.boxes.push(BoxSpec {
        class: classes::TRUCK,
        instance: 2,
        center: [-1.5, 0.1, 11.0],
        half_extents: [1.2, 1.5, 1.2],
        yaw: 0.0,
        twist: [0.0, 0.0, 0.0, 0.05, 0.0, 0.2],
    });
    cfg
}

/// A box sliding in front of another one. Both float above the road so that
/// every occluding edge has a clear depth gap.
pub fn occlusion_demo(num_frames: usize) -> SceneConfig {
    let mut cfg = base_config(num_frames, 11);
    cfg.camera.motion = vec![[0.0, 0.0, 0.0, 0.0, 0.0, 0.1]];
    cfg.boxes.push(BoxSpec {
        class: classes::CAR,
        instance: 1,
        center: [0.0, 0.5, 12.0],
        half_extents: [1.0, 0.75, 2.0],
        yaw: 0.0,
        twist: [0.0; 6],
    });
    cfg.boxes.push(BoxSpec {
        class: classes::TRUCK,
        instance: 2,
        center: [-4.0, -0.3, 7.0],
        half_extents: [1.2, 1.5, 1.2],
        yaw: 0.0,
        twist: [0.0, 0.0, 0.0, 0.8, 0.0, 0.1],
    });
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{correspondence_field, induced_flow};

    fn small(mut cfg: SceneConfig, scale: usize) -> SceneConfig {
        cfg.width /= scale;
        cfg.height /= scale;
        cfg.fx /= scale as f64;
        cfg.fy /= scale as f64;
        cfg.cx /= scale as f64;
        cfg.cy /= scale as f64;
        cfg
    }

    #[test]
    fn static_camera_sees_zero_flow() {
        let mut cfg = small(static_demo(1), 8);
        cfg.camera.motion = vec![[0.0; 6]];
        let frames = render_sequence(&cfg).unwrap();
        for f in &frames {
            for flow in f.gt_flow_to.values() {
                assert!(flow.iter().all(|x| x.amax() < 1e-9));
            }
        }
    }

    #[test]
    fn lateral_translation_over_plane() {
        let z = 5.0;
        let t = 0.1;
        let cfg = SceneConfig {
            width: 32,
            height: 24,
            fx: 30.0,
            fy: 30.0,
            cx: 16.0,
            cy: 12.0,
            num_frames: 2,
            frame_interval: 0.1,
            flow_radius: 1,
            thing_classes: vec![],
            seed: 0,
            camera: CameraSpec {
                start: [0.0; 6],
                motion: vec![[0.0, 0.0, 0.0, t, 0.0, 0.0]],
            },
            noise: NoiseSpec::default(),
            planes: vec![PlaneSpec { class: 0, normal: [0.0, 0.0, 1.0], offset: z }],
            boxes: vec![],
            spheres: vec![],
        };
        let frames = render_sequence(&cfg).unwrap();
        let expected = Vector2::new(-30.0 * t / z, 0.0);
        for f in frames[0].gt_flow_to[&1].iter() {
            assert!((f - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn static_flow_matches_induced_flow() {
        let cfg = small(dynamic_demo(3, 4, 0.0), 4);
        let k = cfg.intrinsics().unwrap();
        let frames = render_sequence(&cfg).unwrap();
        for f in &frames {
            for (&j, flow) in &f.gt_flow_to {
                let c = correspondence_field(&k, &f.gt_pose, &frames[j].gt_pose, &f.gt_depth).unwrap();
                let induced = induced_flow(&c.coords);
                let mut checked = 0;
                for idx in 0..flow.len() {
                    if f.moving.as_slice()[idx] || !f.flow_valid_to[&j].as_slice()[idx] {
                        continue;
                    }
                    let diff = (flow.as_slice()[idx] - induced.as_slice()[idx]).amax();
                    assert!(diff < 1e-9, "frame {} -> {j} pixel {idx}: {diff}", f.index);
                    checked += 1;
                }
                assert!(checked > flow.len() / 2);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_noise_free_when_zero() {
        let mut cfg = small(dynamic_demo(5, 3, 0.0), 8);
        cfg.noise.seg_jitter = 1;
        let a = render_sequence(&cfg).unwrap();
        let b = render_sequence(&cfg).unwrap();
        assert_eq!(a, b);
        for f in &a {
            assert_eq!(f.gt_flow_to, f.noisy_flow_to);
            assert!(f.gt_depth.as_slice().iter().all(|d| *d > 0.0));
        }
        cfg.noise.flow_sigma = 0.5;
        let c = render_sequence(&cfg).unwrap();
        assert_ne!(c[0].noisy_flow_to, c[0].gt_flow_to);
        let d = render_sequence(&cfg).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn motion_oracle_marks_only_movers() {
        let cfg = small(static_demo(0), 8);
        let frames = render_sequence(&cfg).unwrap();
        assert!(motion_prob_oracle(&frames[0]).iter().all(|p| *p == 0.0));

        let cfg = small(dynamic_demo(0, 3, 0.0), 8);
        let frames = render_sequence(&cfg).unwrap();
        let f = &frames[0];
        let oracle = motion_prob_oracle(f);
        for idx in 0..oracle.len() {
            let (class, inst) = f.gt_panoptic.label_at(idx);
            let expected = if inst == 2 { 1.0 } else { 0.0 };
            assert_eq!(oracle.as_slice()[idx], expected, "class {class}");
        }
        // The parked car is a thing but static.
        assert!(f.gt_panoptic.instances().contains_key(&1));
    }

    #[test]
    fn camera_inside_object_is_rejected() {
        let mut cfg = small(static_demo(0), 8);
        cfg.boxes[0].center = [0.0, 0.0, 0.0];
        assert!(matches!(render_sequence(&cfg), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = dynamic_demo(4, 6, 0.3);
        let text = cfg.to_toml();
        assert_eq!(SceneConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn config_errors_carry_line_numbers() {
        let text = "width = 10\nheight = 'x'\n";
        let err = SceneConfig::from_toml(text).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn visibility_flags_occluded_points() {
        let cfg = small(occlusion_demo(6), 4);
        let frames = render_sequence(&cfg).unwrap();
        let hidden: usize = frames
            .iter()
            .flat_map(|f| f.visible_in.iter().map(move |(j, v)| (f, *j, v)))
            .map(|(f, j, vis)| {
                vis.iter()
                    .zip(f.flow_valid_to[&j].iter())
                    .filter(|(v, ok)| **ok && !**v)
                    .count()
            })
            .sum();
        assert!(hidden > 0);
    }
}
