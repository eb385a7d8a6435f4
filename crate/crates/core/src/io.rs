//! On-disk formats.
//!
//! Arrays are little-endian binary files: the magic `PVOA`, a version byte, a
//! dtype byte, a rank byte and a reserved byte, then one `u64` per dimension
//! and the row-major payload. A sequence directory holds `manifest.txt`
//! (`key = value` lines), `poses.bin` (`[n, 8]`: timestamp, world-to-camera
//! quaternion `w x y z`, translation), `trajectory.txt` (TUM, camera-to-world)
//! and one `frame_XXXX/` directory per frame.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use sha2::{Digest, Sha256};

use crate::geometry::{CameraIntrinsics, FlowField, InverseDepthMap, SE3Pose};
use crate::grid::Grid;
use crate::metrics::Trajectory;
use crate::panoptic::PanopticMap;
use crate::pipeline::{FrameObservation, Observations};
use crate::simworld::RenderedFrame;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PVOA";
const VERSION: u8 = 1;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Scalar types that can be stored in an array file.
pub trait Element: Copy {
    const DTYPE: u8;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

macro_rules! element {
    ($t:ty, $code:expr) => {
        impl Element for $t {
            const DTYPE: u8 = $code;
            const SIZE: usize = std::mem::size_of::<$t>();
            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn take(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

element!(u8, 1);
element!(u16, 2);
element!(u32, 3);
element!(f64, 4);

pub fn write_array<T: Element>(path: &Path, dims: &[usize], data: &[T]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(format_err(path, "dims do not match data length"));
    }
    let mut out = Vec::with_capacity(8 + 8 * dims.len() + data.len() * T::SIZE);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE, dims.len() as u8, 0]);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        x.put(&mut out);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Returns dims and data.
pub fn read_array<T: Element>(path: &Path) -> Result<(Vec<usize>, Vec<T>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(format_err(path, "not an array file"));
    }
    if bytes[4] != VERSION {
        return Err(format_err(path, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != T::DTYPE {
        return Err(format_err(path, format!("dtype {} where {} was expected", bytes[5], T::DTYPE)));
    }
    let ndim = bytes[6] as usize;
    let header = 8 + 8 * ndim;
    if bytes.len() < header {
        return Err(format_err(path, "truncated header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count * T::SIZE {
        return Err(format_err(path, "payload size does not match dims"));
    }
    let data = bytes[header..].chunks_exact(T::SIZE).map(T::take).collect();
    Ok((dims, data))
}

fn write_grid<T: Element>(path: &Path, grid: &Grid<T>) -> Result<()> {
    write_array(path, &[grid.height(), grid.width()], grid.as_slice())
}

fn read_grid<T: Element>(path: &Path) -> Result<Grid<T>> {
    let (dims, data) = read_array(path)?;
    match dims[..] {
        [h, w] => Ok(Grid::from_vec(w, h, data)),
        _ => Err(format_err(path, "expected a 2-d array")),
    }
}

fn write_mask(path: &Path, grid: &Grid<bool>) -> Result<()> {
    write_grid(path, &grid.map(|b| *b as u8))
}

fn read_mask(path: &Path) -> Result<Grid<bool>> {
    Ok(read_grid::<u8>(path)?.map(|b| *b != 0))
}

fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let data: Vec<f64> = flow.iter().flat_map(|f| [f.x, f.y]).collect();
    write_array(path, &[flow.height(), flow.width(), 2], &data)
}

fn read_flow(path: &Path) -> Result<FlowField> {
    let (dims, data) = read_array::<f64>(path)?;
    match dims[..] {
        [h, w, 2] => Ok(Grid::from_vec(w, h, data.chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect())),
        _ => Err(format_err(path, "expected a [h, w, 2] array")),
    }
}

fn write_labels(dir: &Path, prefix: &str, map: &PanopticMap) -> Result<()> {
    write_grid(&dir.join(format!("{prefix}class.bin")), map.class_id())?;
    write_grid(&dir.join(format!("{prefix}instance.bin")), map.instance_id())
}

fn read_labels(dir: &Path, prefix: &str, things: &BTreeSet<u16>) -> Result<PanopticMap> {
    let class = read_grid(&dir.join(format!("{prefix}class.bin")))?;
    let inst = read_grid(&dir.join(format!("{prefix}instance.bin")))?;
    PanopticMap::new(class, inst, things.clone())
}

pub fn frame_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("frame_{index:04}"))
}

/// Ordered `key = value` text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut out = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            out.set(k.trim(), v.trim());
        }
        Ok(out)
    }

    pub fn render(&self) -> String {
        self.0.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} = {v}");
            s
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?).map_err(|msg| format_err(path, msg))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn require<T: std::str::FromStr>(&self, path: &Path, key: &str) -> Result<T> {
        let raw = self.get(key).ok_or_else(|| format_err(path, format!("missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| format_err(path, format!("bad value `{raw}` for `{key}`")))
    }
}

fn join_classes(classes: &BTreeSet<u16>) -> String {
    classes.iter().map(u16::to_string).collect::<Vec<_>>().join(",")
}

fn parse_classes(path: &Path, raw: &str) -> Result<BTreeSet<u16>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format_err(path, format!("bad class id `{s}`"))))
        .collect()
}

fn put_intrinsics(kv: &mut KeyValues, k: &CameraIntrinsics) {
    kv.set("width", k.width)
        .set("height", k.height)
        .set("fx", k.fx)
        .set("fy", k.fy)
        .set("cx", k.cx)
        .set("cy", k.cy);
}

fn get_intrinsics(kv: &KeyValues, path: &Path) -> Result<CameraIntrinsics> {
    CameraIntrinsics::new(
        kv.require(path, "fx")?,
        kv.require(path, "fy")?,
        kv.require(path, "cx")?,
        kv.require(path, "cy")?,
        kv.require(path, "width")?,
        kv.require(path, "height")?,
    )
}

/// TUM lines `timestamp tx ty tz qx qy qz qw` of camera-to-world poses.
pub fn format_tum(traj: &Trajectory) -> String {
    let mut s = String::new();
    for (t, pose) in traj.timestamps().iter().zip(traj.poses()) {
        let c2w = pose.inverse();
        let (p, q) = (c2w.translation(), c2w.rotation().quaternion());
        let _ = writeln!(s, "{t} {} {} {} {} {} {} {}", p.x, p.y, p.z, q.i, q.j, q.k, q.w);
    }
    s
}

pub fn parse_tum(text: &str) -> std::result::Result<Trajectory, String> {
    let mut stamps = Vec::new();
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", n + 1))?;
        let [t, tx, ty, tz, qx, qy, qz, qw] = vals[..] else {
            return Err(format!("line {}: expected 8 values", n + 1));
        };
        stamps.push(t);
        poses.push(SE3Pose::from_parts(qw, qx, qy, qz, Vector3::new(tx, ty, tz)).inverse());
    }
    Trajectory::new(stamps, poses).map_err(|e| e.to_string())
}

pub fn read_tum(path: &Path) -> Result<Trajectory> {
    parse_tum(&fs::read_to_string(path)?).map_err(|msg| format_err(path, msg))
}

/// Writes `poses.bin` and `trajectory.txt`.
pub fn write_trajectory(dir: &Path, traj: &Trajectory) -> Result<()> {
    let data: Vec<f64> = traj
        .timestamps()
        .iter()
        .zip(traj.poses())
        .flat_map(|(t, p)| {
            let (q, x) = (p.rotation().quaternion(), p.translation());
            [*t, q.w, q.i, q.j, q.k, x.x, x.y, x.z]
        })
        .collect();
    write_array(&dir.join("poses.bin"), &[traj.len(), 8], &data)?;
    fs::write(dir.join("trajectory.txt"), format_tum(traj))?;
    Ok(())
}

/// Reads the exact poses from `poses.bin`.
pub fn read_trajectory(dir: &Path) -> Result<Trajectory> {
    let path = dir.join("poses.bin");
    let (dims, data) = read_array::<f64>(&path)?;
    if dims.len() != 2 || dims[1] != 8 {
        return Err(format_err(&path, "expected an [n, 8] array"));
    }
    let (stamps, poses) = data
        .chunks_exact(8)
        .map(|c| {
            let q = UnitQuaternion::new_unchecked(Quaternion::new(c[1], c[2], c[3], c[4]));
            (c[0], SE3Pose::new(q, Vector3::new(c[5], c[6], c[7])))
        })
        .unzip();
    Trajectory::new(stamps, poses)
}

/// A rendered sequence as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub intrinsics: CameraIntrinsics,
    pub thing_classes: BTreeSet<u16>,
    pub flow_radius: usize,
    pub frames: Vec<RenderedFrame>,
}

impl Scene {
    pub fn observations(&self) -> Observations {
        Observations {
            intrinsics: self.intrinsics,
            frames: self
                .frames
                .iter()
                .map(|f| FrameObservation {
                    timestamp: f.timestamp,
                    panoptic: f.obs_panoptic.clone(),
                    flow_to: f.noisy_flow_to.clone(),
                    flow_valid_to: f.flow_valid_to.clone(),
                })
                .collect(),
            gt_poses: Some(self.frames.iter().map(|f| f.gt_pose).collect()),
        }
    }

    pub fn gt_trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(
            self.frames.iter().map(|f| f.timestamp).collect(),
            self.frames.iter().map(|f| f.gt_pose).collect(),
        )
    }
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut kv = KeyValues::default();
    kv.set("format", "pvo-scene")
        .set("version", VERSION)
        .set("num_frames", scene.frames.len())
        .set("flow_radius", scene.flow_radius)
        .set("thing_classes", join_classes(&scene.thing_classes));
    put_intrinsics(&mut kv, &scene.intrinsics);
    kv.write(&dir.join("manifest.txt"))?;
    write_trajectory(dir, &scene.gt_trajectory()?)?;
    for f in &scene.frames {
        let fd = frame_dir(dir, f.index);
        fs::create_dir_all(&fd)?;
        write_grid(&fd.join("depth.bin"), f.gt_depth.grid())?;
        write_labels(&fd, "", &f.gt_panoptic)?;
        write_labels(&fd, "obs_", &f.obs_panoptic)?;
        write_mask(&fd.join("moving.bin"), &f.moving)?;
        for (j, flow) in &f.gt_flow_to {
            write_flow(&fd.join(format!("flow_gt_{j:04}.bin")), flow)?;
            write_flow(&fd.join(format!("flow_obs_{j:04}.bin")), &f.noisy_flow_to[j])?;
            write_mask(&fd.join(format!("flow_valid_{j:04}.bin")), &f.flow_valid_to[j])?;
            write_mask(&fd.join(format!("visible_{j:04}.bin")), &f.visible_in[j])?;
        }
    }
    Ok(())
}

fn read_manifest(dir: &Path, format: &str) -> Result<(PathBuf, KeyValues)> {
    let path = dir.join("manifest.txt");
    let kv = KeyValues::read(&path)?;
    if kv.get("format") != Some(format) {
        return Err(format_err(&path, format!("not a {format} directory")));
    }
    Ok((path, kv))
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let (path, kv) = read_manifest(dir, "pvo-scene")?;
    let intrinsics = get_intrinsics(&kv, &path)?;
    let n: usize = kv.require(&path, "num_frames")?;
    let radius: usize = kv.require(&path, "flow_radius")?;
    let things = parse_classes(&path, kv.get("thing_classes").unwrap_or(""))?;
    let traj = read_trajectory(dir)?;
    if traj.len() != n {
        return Err(Error::LengthMismatch { left: n, right: traj.len() });
    }
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let fd = frame_dir(dir, i);
        let mut frame = RenderedFrame {
            index: i,
            timestamp: traj.timestamps()[i],
            gt_pose: traj.poses()[i],
            gt_depth: InverseDepthMap::new(read_grid(&fd.join("depth.bin"))?)?,
            gt_panoptic: read_labels(&fd, "", &things)?,
            obs_panoptic: read_labels(&fd, "obs_", &things)?,
            moving: read_mask(&fd.join("moving.bin"))?,
            gt_flow_to: BTreeMap::new(),
            flow_valid_to: BTreeMap::new(),
            visible_in: BTreeMap::new(),
            noisy_flow_to: BTreeMap::new(),
        };
        for j in i.saturating_sub(radius)..=(i + radius).min(n - 1) {
            if j == i {
                continue;
            }
            frame.gt_flow_to.insert(j, read_flow(&fd.join(format!("flow_gt_{j:04}.bin")))?);
            frame.noisy_flow_to.insert(j, read_flow(&fd.join(format!("flow_obs_{j:04}.bin")))?);
            frame.flow_valid_to.insert(j, read_mask(&fd.join(format!("flow_valid_{j:04}.bin")))?);
            frame.visible_in.insert(j, read_mask(&fd.join(format!("visible_{j:04}.bin")))?);
        }
        frames.push(frame);
    }
    Ok(Scene {
        intrinsics,
        thing_classes: things,
        flow_radius: radius,
        frames,
    })
}

/// Solver output as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutput {
    pub trajectory: Trajectory,
    pub working_intrinsics: CameraIntrinsics,
    pub depths: Vec<InverseDepthMap>,
    pub panoptic_video: Vec<PanopticMap>,
    pub report: KeyValues,
}

pub fn write_solve_output(dir: &Path, out: &SolveOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    let things = out
        .panoptic_video
        .first()
        .map(|m| m.thing_classes().clone())
        .unwrap_or_default();
    let mut kv = KeyValues::default();
    kv.set("format", "pvo-result")
        .set("version", VERSION)
        .set("num_frames", out.trajectory.len())
        .set("thing_classes", join_classes(&things));
    put_intrinsics(&mut kv, &out.working_intrinsics);
    kv.write(&dir.join("manifest.txt"))?;
    out.report.write(&dir.join("report.txt"))?;
    write_trajectory(dir, &out.trajectory)?;
    for (i, (depth, labels)) in out.depths.iter().zip(&out.panoptic_video).enumerate() {
        let fd = frame_dir(dir, i);
        fs::create_dir_all(&fd)?;
        write_grid(&fd.join("depth.bin"), depth.grid())?;
        write_labels(&fd, "", labels)?;
    }
    Ok(())
}

pub fn read_solve_output(dir: &Path) -> Result<SolveOutput> {
    let (path, kv) = read_manifest(dir, "pvo-result")?;
    let working_intrinsics = get_intrinsics(&kv, &path)?;
    let n: usize = kv.require(&path, "num_frames")?;
    let things = parse_classes(&path, kv.get("thing_classes").unwrap_or(""))?;
    let mut depths = Vec::with_capacity(n);
    let mut video = Vec::with_capacity(n);
    for i in 0..n {
        let fd = frame_dir(dir, i);
        depths.push(InverseDepthMap::new(read_grid(&fd.join("depth.bin"))?)?);
        video.push(read_labels(&fd, "", &things)?);
    }
    Ok(SolveOutput {
        trajectory: read_trajectory(dir)?,
        working_intrinsics,
        depths,
        panoptic_video: video,
        report: KeyValues::read(&dir.join("report.txt"))?,
    })
}

/// Trajectory and panoptic video of either a scene or a result directory.
pub fn read_evaluable(dir: &Path) -> Result<(Trajectory, Vec<PanopticMap>)> {
    let (path, kv) = read_manifest(dir, "pvo-scene")
        .or_else(|_| read_manifest(dir, "pvo-result"))
        .map_err(|_| format_err(&dir.join("manifest.txt"), "not a scene or result directory"))?;
    let n: usize = kv.require(&path, "num_frames")?;
    let things = parse_classes(&path, kv.get("thing_classes").unwrap_or(""))?;
    let video = (0..n)
        .map(|i| read_labels(&frame_dir(dir, i), "", &things))
        .collect::<Result<Vec<_>>>()?;
    Ok((read_trajectory(dir)?, video))
}

/// SHA-256 over every file below `dir`, in sorted relative-path order, with
/// each path and content length folded in.
pub fn directory_digest(dir: &Path) -> Result<String> {
    fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                collect(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let bytes = fs::read(dir.join(&rel))?;
        let name = rel.to_string_lossy().replace('\\', "/");
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
