//! Dense bundle adjustment over camera poses and per-pixel inverse depths.
//!
//! Each frame-graph edge `(i, j)` contributes the weighted reprojection
//! residual `p*_ij - Π(G_ij ∘ Π⁻¹(p_i, d_i))` at every pixel of frame `i`.
//! The normal equations are solved with damped Gauss-Newton; inverse depths
//! (one scalar per pixel, a diagonal block) are eliminated by Schur
//! complement so only a small dense pose system is factorized.
//!
//! Gauge: fixed frames carry no pose columns, and in the monocular setting
//! the global scale is pinned by a linear constraint keeping the mean
//! inverse-depth increment of the anchor frame at zero. The constraint is a
//! Lagrange multiplier appended to the reduced pose system.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Matrix2x6, Matrix3, Vector2, Vector3, Vector6};
use rayon::prelude::*;

use crate::geometry::{
    relative_pose, skew, CameraIntrinsics, FlowField, InverseDepthMap, SE3Pose, Twist, EPSILON_Z,
};
use crate::grid::{check_dims, Grid};
use crate::panoptic::{sigmoid, ConfidenceMap};
use crate::{Error, Result};

pub const DEPTH_MIN: f64 = 1e-4;
pub const DEPTH_MAX: f64 = 1e3;

/// Co-visible ordered pairs `(i, j)` with `0 < |i - j| <= radius`, lexicographic.
pub fn build_frame_graph(num_frames: usize, radius: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..num_frames {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(num_frames.saturating_sub(1));
        for j in lo..=hi {
            if j != i {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// `p*_ij = p_ij + r_ij`.
pub fn corrected_correspondence(
    p_ij: &Grid<Vector2<f64>>,
    r_ij: &FlowField,
) -> Result<Grid<Vector2<f64>>> {
    check_dims(p_ij, r_ij)?;
    Ok(Grid::from_vec(
        p_ij.width(),
        p_ij.height(),
        p_ij.iter().zip(r_ij.iter()).map(|(p, r)| p + r).collect(),
    ))
}

/// Per-pixel probability of independent motion from the disagreement between
/// observed flow and the flow induced by the static-scene geometry:
/// `sigmoid(alpha * (|observed - induced| - beta))`.
pub fn estimate_motion_prob(
    observed_flow: &FlowField,
    static_induced_flow: &FlowField,
    alpha: f64,
    beta: f64,
) -> Result<Grid<f64>> {
    check_dims(observed_flow, static_induced_flow)?;
    Ok(Grid::from_vec(
        observed_flow.width(),
        observed_flow.height(),
        observed_flow
            .iter()
            .zip(static_induced_flow.iter())
            .map(|(o, s)| sigmoid(alpha * ((o - s).norm() - beta)))
            .collect(),
    ))
}

/// Steepness of the motion probability, per pixel of residual.
pub const DEFAULT_MOTION_ALPHA: f64 = 10.0;
/// Flow residual (working-resolution pixels) at which the motion probability
/// is 0.5: above what static pixels keep after a solve, below what movers keep.
pub const DEFAULT_MOTION_BETA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    /// `p*_ij`, absolute pixel coordinates in frame `j`.
    pub target: Grid<Vector2<f64>>,
    pub weight: ConfidenceMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameGraph {
    num_frames: usize,
    edges: Vec<GraphEdge>,
}

impl FrameGraph {
    pub fn new(num_frames: usize, edges: Vec<GraphEdge>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let dims = edges.first().map(|e| e.target.dims());
        for e in &edges {
            if e.i >= num_frames || e.j >= num_frames || e.i == e.j {
                return Err(Error::InputInconsistency(format!(
                    "edge ({}, {}) invalid for {num_frames} frames",
                    e.i, e.j
                )));
            }
            if !seen.insert((e.i, e.j)) {
                return Err(Error::InputInconsistency(format!(
                    "duplicate edge ({}, {})",
                    e.i, e.j
                )));
            }
            check_dims(&e.target, &e.weight.weight)?;
            if Some(e.target.dims()) != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims.unwrap_or_default(),
                    found: e.target.dims(),
                });
            }
        }
        Ok(Self { num_frames, edges })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [GraphEdge] {
        &mut self.edges
    }
}

/// How the monocular scale freedom is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleGauge {
    /// No scale constraint (e.g. two or more fixed frames with baseline).
    Free,
    /// Keep the mean inverse depth of this frame unchanged.
    MeanInverseDepth(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleState {
    pub poses: Vec<SE3Pose>,
    pub depths: Vec<InverseDepthMap>,
    pub fixed_frames: BTreeSet<usize>,
    pub scale_gauge: ScaleGauge,
}

impl BundleState {
    /// Uses the mean inverse depth of the lowest fixed frame as scale gauge
    /// when exactly one frame is fixed.
    pub fn new(
        poses: Vec<SE3Pose>,
        depths: Vec<InverseDepthMap>,
        fixed_frames: BTreeSet<usize>,
    ) -> Result<Self> {
        let scale_gauge = match fixed_frames.len() {
            1 => ScaleGauge::MeanInverseDepth(*fixed_frames.first().unwrap()),
            _ => ScaleGauge::Free,
        };
        let state = Self {
            poses,
            depths,
            fixed_frames,
            scale_gauge,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.poses.len() != self.depths.len() {
            return Err(Error::LengthMismatch {
                left: self.poses.len(),
                right: self.depths.len(),
            });
        }
        if self.fixed_frames.is_empty() {
            return Err(Error::InputInconsistency("no fixed frame".into()));
        }
        if self.fixed_frames.iter().any(|&f| f >= self.poses.len()) {
            return Err(Error::InputInconsistency("fixed frame out of range".into()));
        }
        if let ScaleGauge::MeanInverseDepth(f) = self.scale_gauge {
            if f >= self.poses.len() {
                return Err(Error::InputInconsistency("scale anchor out of range".into()));
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }
}

/// Reprojection of pixel `p` of frame `i` into frame `j` under `g_ij`; `None`
/// behind the camera or outside the image.
#[inline]
fn reproject(
    k: &CameraIntrinsics,
    g_ij: &SE3Pose,
    pixel: &Vector2<f64>,
    d: f64,
) -> Option<(Vector3<f64>, Vector3<f64>, Vector2<f64>)> {
    let x_i = k.unproject_unchecked(pixel, d);
    let x_j = g_ij.transform_point(&x_i);
    if x_j.z <= EPSILON_Z {
        return None;
    }
    let p = k.project_unchecked(&x_j);
    k.in_bounds(&p).then_some((x_i, x_j, p))
}

/// Residual `target - Π(G_ij ∘ Π⁻¹(pixel, d))`, `None` where invalid.
pub fn pixel_residual(
    k: &CameraIntrinsics,
    pose_i: &SE3Pose,
    pose_j: &SE3Pose,
    pixel: &Vector2<f64>,
    d: f64,
    target: &Vector2<f64>,
) -> Option<Vector2<f64>> {
    let g_ij = relative_pose(pose_i, pose_j);
    reproject(k, &g_ij, pixel, d).map(|(_, _, p)| target - p)
}

fn edge_cost(k: &CameraIntrinsics, state: &BundleState, e: &GraphEdge) -> f64 {
    let g_ij = relative_pose(&state.poses[e.i], &state.poses[e.j]);
    let depth = state.depths[e.i].as_slice();
    let w = k.width;
    let mut cost = 0.0;
    for (idx, (target, wt)) in e.target.iter().zip(e.weight.weight.iter()).enumerate() {
        if wt.x == 0.0 && wt.y == 0.0 {
            continue;
        }
        let pixel = Vector2::new((idx % w) as f64, (idx / w) as f64);
        if let Some((_, _, p)) = reproject(k, &g_ij, &pixel, depth[idx]) {
            let r = target - p;
            cost += wt.x * r.x * r.x + wt.y * r.y * r.y;
        }
    }
    cost
}

fn check_inputs(state: &BundleState, graph: &FrameGraph, k: &CameraIntrinsics) -> Result<()> {
    state.validate()?;
    if graph.num_frames() != state.num_frames() {
        return Err(Error::LengthMismatch {
            left: graph.num_frames(),
            right: state.num_frames(),
        });
    }
    for d in &state.depths {
        if d.dims() != k.dims() {
            return Err(Error::DimensionMismatch {
                expected: k.dims(),
                found: d.dims(),
            });
        }
    }
    if let Some(e) = graph.edges().first() {
        if e.target.dims() != k.dims() {
            return Err(Error::DimensionMismatch {
                expected: k.dims(),
                found: e.target.dims(),
            });
        }
    }
    Ok(())
}

/// Weighted squared reprojection error summed over edges and valid pixels.
pub fn objective(state: &BundleState, graph: &FrameGraph, k: &CameraIntrinsics) -> f64 {
    let per_edge: Vec<f64> = graph
        .edges()
        .par_iter()
        .map(|e| edge_cost(k, state, e))
        .collect();
    per_edge.iter().sum()
}

/// Linearized residual of one valid pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelTerm {
    pub pixel: usize,
    pub residual: Vector2<f64>,
    pub weight: Vector2<f64>,
    /// ∂r/∂ξ_i for the left increment of pose `i`.
    pub jac_i: Matrix2x6<f64>,
    /// ∂r/∂ξ_j for the left increment of pose `j`.
    pub jac_j: Matrix2x6<f64>,
    /// ∂r/∂d_i.
    pub jac_d: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLinearization {
    pub i: usize,
    pub j: usize,
    pub terms: Vec<PixelTerm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub num_frames: usize,
    pub pixels_per_frame: usize,
    /// Block index of each frame's pose in the reduced system; `None` when fixed.
    pub pose_columns: Vec<Option<usize>>,
    pub scale_gauge: ScaleGauge,
    pub edges: Vec<EdgeLinearization>,
}

impl Linearization {
    pub fn num_free_poses(&self) -> usize {
        self.pose_columns.iter().flatten().count()
    }
}

/// Analytic Jacobians of a single pixel residual.
pub fn pixel_jacobians(
    k: &CameraIntrinsics,
    pose_i: &SE3Pose,
    pose_j: &SE3Pose,
    pixel: &Vector2<f64>,
    d: f64,
) -> Option<(Matrix2x6<f64>, Matrix2x6<f64>, Vector2<f64>)> {
    let g_ij = relative_pose(pose_i, pose_j);
    let (x_i, x_j, _) = reproject(k, &g_ij, pixel, d)?;
    Some(jacobians_at(k, &g_ij.rotation_matrix(), g_ij.translation(), &x_i, &x_j, d))
}

#[inline]
fn jacobians_at(
    k: &CameraIntrinsics,
    r_ij: &Matrix3<f64>,
    t_ij: &Vector3<f64>,
    x_i: &Vector3<f64>,
    x_j: &Vector3<f64>,
    d: f64,
) -> (Matrix2x6<f64>, Matrix2x6<f64>, Vector2<f64>) {
    let (x, y, z) = (x_j.x, x_j.y, x_j.z);
    let iz = 1.0 / z;
    // dπ/dX at X_j
    let proj = nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * y * iz * iz,
    );
    // X_j moves by ω × X_j + v under a left increment of G_j.
    let mut jac_j = Matrix2x6::zeros();
    jac_j
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(proj * skew(x_j)));
    jac_j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-proj));
    // G_i^-1 picks up exp(-ξ_i) on the right.
    let pr = proj * r_ij;
    let mut jac_i = Matrix2x6::zeros();
    jac_i
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(-(pr * skew(x_i))));
    jac_i.fixed_view_mut::<2, 3>(0, 3).copy_from(&pr);
    // Closed form; vanishes exactly without translation.
    let jac_d = Vector2::new(
        k.fx * (x * t_ij.z * iz - t_ij.x) * iz / d,
        k.fy * (y * t_ij.z * iz - t_ij.y) * iz / d,
    );
    (jac_i, jac_j, jac_d)
}

fn linearize_edge(k: &CameraIntrinsics, state: &BundleState, e: &GraphEdge) -> EdgeLinearization {
    let g_ij = relative_pose(&state.poses[e.i], &state.poses[e.j]);
    let r_ij = g_ij.rotation_matrix();
    let t_ij = *g_ij.translation();
    let depth = state.depths[e.i].as_slice();
    let w = k.width;
    let mut terms = Vec::new();
    for (idx, (target, wt)) in e.target.iter().zip(e.weight.weight.iter()).enumerate() {
        if wt.x == 0.0 && wt.y == 0.0 {
            continue;
        }
        let pixel = Vector2::new((idx % w) as f64, (idx / w) as f64);
        let d = depth[idx];
        if let Some((x_i, x_j, p)) = reproject(k, &g_ij, &pixel, d) {
            let (jac_i, jac_j, jac_d) = jacobians_at(k, &r_ij, &t_ij, &x_i, &x_j, d);
            terms.push(PixelTerm {
                pixel: idx,
                residual: target - p,
                weight: *wt,
                jac_i,
                jac_j,
                jac_d,
            });
        }
    }
    EdgeLinearization {
        i: e.i,
        j: e.j,
        terms,
    }
}

pub fn linearize(
    state: &BundleState,
    graph: &FrameGraph,
    k: &CameraIntrinsics,
) -> Result<Linearization> {
    check_inputs(state, graph, k)?;
    let mut next = 0;
    let pose_columns = (0..state.num_frames())
        .map(|f| {
            (!state.fixed_frames.contains(&f)).then(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    let edges = graph
        .edges()
        .par_iter()
        .map(|e| linearize_edge(k, state, e))
        .collect();
    Ok(Linearization {
        num_frames: state.num_frames(),
        pixels_per_frame: k.width * k.height,
        pose_columns,
        scale_gauge: state.scale_gauge,
        edges,
    })
}

/// Increments for every frame; fixed frames receive zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleUpdate {
    pub pose: Vec<Twist>,
    pub depth: Vec<Vec<f64>>,
}

impl BundleUpdate {
    pub fn zeros(num_frames: usize, pixels: usize) -> Self {
        Self {
            pose: vec![Twist::zero(); num_frames],
            depth: vec![vec![0.0; pixels]; num_frames],
        }
    }

    pub fn max_pose_step(&self) -> f64 {
        self.pose.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    pub fn norm(&self) -> f64 {
        let p: f64 = self.pose.iter().map(|t| t.to_vector().norm_squared()).sum();
        let d: f64 = self.depth.iter().flatten().map(|x| x * x).sum();
        (p + d).sqrt()
    }
}

/// Per-frame accumulator for the inverse-depth block and its coupling to poses.
struct DepthBlock {
    /// Pose block index per coupled slot.
    slots: Vec<usize>,
    /// Frame -> slot.
    slot_of: Vec<Option<usize>>,
    c: Vec<f64>,
    g: Vec<f64>,
    /// `pixels × slots` coupling columns `J_poseᵀ W J_d`.
    b: Vec<Vector6<f64>>,
}

/// Damping added to a diagonal entry: `λ (h + mean)`, where `mean` is the
/// average positive diagonal of the same variable type.
#[inline]
fn damped(h: f64, mean: f64, lambda: f64) -> f64 {
    h + lambda * (h + mean)
}

/// Solves the damped normal equations by eliminating inverse depths.
///
/// Every variable `x` gets `λ (H_xx + m)` added to its diagonal, `m` being the
/// mean positive diagonal of its kind (pose or depth). The damping is thus
/// proportional to the weights, which makes the step invariant to a uniform
/// rescaling of all weights. Depth variables with no observation (zero
/// diagonal) keep a zero increment.
pub fn schur_solve(lin: &Linearization, damping: f64) -> Result<BundleUpdate> {
    if !(damping >= 0.0) {
        return Err(Error::InvalidParameter(format!("damping {damping} < 0")));
    }
    let n_frames = lin.num_frames;
    let hw = lin.pixels_per_frame;
    let n_pose = lin.num_free_poses();
    let dim = 6 * n_pose;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut gp = DVector::<f64>::zeros(dim);

    let mut blocks: Vec<DepthBlock> = (0..n_frames)
        .map(|f| {
            let mut slots = Vec::new();
            let mut slot_of = vec![None; n_frames];
            let mut add = |frame: usize| {
                if let Some(col) = lin.pose_columns[frame] {
                    if slot_of[frame].is_none() {
                        slot_of[frame] = Some(slots.len());
                        slots.push(col);
                    }
                }
            };
            add(f);
            for e in lin.edges.iter().filter(|e| e.i == f) {
                add(e.j);
            }
            let ns = slots.len();
            DepthBlock {
                slots,
                slot_of,
                c: vec![0.0; hw],
                g: vec![0.0; hw],
                b: vec![Vector6::zeros(); hw * ns],
            }
        })
        .collect();

    for e in &lin.edges {
        let ci = lin.pose_columns[e.i];
        let cj = lin.pose_columns[e.j];
        let blk = &mut blocks[e.i];
        let ns = blk.slots.len();
        let si = blk.slot_of[e.i];
        let sj = blk.slot_of[e.j];
        for t in &e.terms {
            let w = nalgebra::Matrix2::from_diagonal(&t.weight);
            let wji = w * t.jac_i;
            let wjj = w * t.jac_j;
            let wr = w * t.residual;
            let wjd = w * t.jac_d;
            if let Some(ci) = ci {
                let mut v = a.view_mut((6 * ci, 6 * ci), (6, 6));
                v += t.jac_i.transpose() * wji;
                let mut g = gp.rows_mut(6 * ci, 6);
                g += t.jac_i.transpose() * wr;
                blk.b[t.pixel * ns + si.unwrap()] += t.jac_i.transpose() * wjd;
            }
            if let Some(cj) = cj {
                let mut v = a.view_mut((6 * cj, 6 * cj), (6, 6));
                v += t.jac_j.transpose() * wjj;
                let mut g = gp.rows_mut(6 * cj, 6);
                g += t.jac_j.transpose() * wr;
                blk.b[t.pixel * ns + sj.unwrap()] += t.jac_j.transpose() * wjd;
            }
            if let (Some(ci), Some(cj)) = (ci, cj) {
                let cross = t.jac_i.transpose() * wjj;
                let mut v = a.view_mut((6 * ci, 6 * cj), (6, 6));
                v += cross;
                let mut v = a.view_mut((6 * cj, 6 * ci), (6, 6));
                v += cross.transpose();
            }
            blk.c[t.pixel] += t.jac_d.dot(&wjd);
            blk.g[t.pixel] += t.jac_d.dot(&wr);
        }
    }

    // Damping scales.
    let pose_diag: Vec<f64> = (0..dim).map(|x| a[(x, x)]).filter(|h| *h > 0.0).collect();
    let pose_mean = mean(&pose_diag);
    let depth_diag: Vec<f64> = blocks
        .iter()
        .flat_map(|b| b.c.iter().copied())
        .filter(|c| *c > 0.0)
        .collect();
    let depth_mean = mean(&depth_diag);
    for x in 0..dim {
        a[(x, x)] = damped(a[(x, x)], pose_mean, damping);
    }
    let c_damped: Vec<Vec<f64>> = blocks
        .iter()
        .map(|b| {
            b.c.iter()
                .map(|&c| if c > 0.0 { damped(c, depth_mean, damping) } else { 0.0 })
                .collect()
        })
        .collect();

    // Scale constraint on the anchor frame's active depths, coefficient chosen
    // to scale with the weights like every other entry.
    let anchor = match lin.scale_gauge {
        ScaleGauge::MeanInverseDepth(f) if c_damped[f].iter().any(|c| *c > 0.0) => Some(f),
        _ => None,
    };
    let coeff = anchor
        .map(|f| c_damped[f].iter().fold(0.0_f64, |m, c| m.max(*c)))
        .unwrap_or(0.0);
    let n = dim + anchor.is_some() as usize;
    let mut m = DMatrix::<f64>::zeros(n, n);
    m.view_mut((0, 0), (dim, dim)).copy_from(&a);
    let mut rhs = DVector::<f64>::zeros(n);
    rhs.rows_mut(0, dim).copy_from(&(-&gp));

    for (f, blk) in blocks.iter().enumerate() {
        let ns = blk.slots.len();
        let is_anchor = anchor == Some(f);
        for (p, &cd) in c_damped[f].iter().enumerate() {
            if cd <= 0.0 {
                continue;
            }
            let inv = 1.0 / cd;
            let bp = &blk.b[p * ns..(p + 1) * ns];
            for (sa, &ca) in blk.slots.iter().enumerate() {
                let ba = bp[sa] * inv;
                for (sb, &cb) in blk.slots.iter().enumerate() {
                    let mut v = m.view_mut((6 * ca, 6 * cb), (6, 6));
                    v -= ba * bp[sb].transpose();
                }
                let mut r = rhs.rows_mut(6 * ca, 6);
                r += ba * blk.g[p];
                if is_anchor {
                    let mut col = m.view_mut((6 * ca, dim), (6, 1));
                    col -= ba * coeff;
                    let mut row = m.view_mut((dim, 6 * ca), (1, 6));
                    row -= (ba * coeff).transpose();
                }
            }
            if is_anchor {
                m[(dim, dim)] -= coeff * coeff * inv;
                rhs[dim] += coeff * inv * blk.g[p];
            }
        }
    }

    let z = if n == 0 {
        DVector::zeros(0)
    } else {
        solve_dense(m, rhs)?
    };

    let mut update = BundleUpdate::zeros(n_frames, hw);
    for (f, col) in lin.pose_columns.iter().enumerate() {
        if let Some(c) = col {
            let x: Vector6<f64> = z.fixed_rows::<6>(6 * c).into_owned();
            update.pose[f] = Twist::from_vector(&x);
        }
    }
    let mu = if anchor.is_some() { z[dim] } else { 0.0 };
    for (f, blk) in blocks.iter().enumerate() {
        let ns = blk.slots.len();
        let is_anchor = anchor == Some(f);
        for (p, &cd) in c_damped[f].iter().enumerate() {
            if cd <= 0.0 {
                continue;
            }
            let mut acc = -blk.g[p];
            for (s, &c) in blk.slots.iter().enumerate() {
                acc -= blk.b[p * ns + s].dot(&z.fixed_rows::<6>(6 * c));
            }
            if is_anchor {
                acc -= coeff * mu;
            }
            update.depth[f][p] = acc / cd;
        }
    }
    Ok(update)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Dense solve with full pivoting; near-zero pivots are reported as singular.
pub(crate) fn solve_dense(m: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let lu = m.full_piv_lu();
    let u = lu.u();
    let diag: Vec<f64> = (0..u.nrows().min(u.ncols())).map(|i| u[(i, i)].abs()).collect();
    let max = diag.iter().fold(0.0_f64, |a, b| a.max(*b));
    let min = diag.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    if !(max > 0.0) || !(min > max * 1e-15) {
        return Err(Error::SingularSystem);
    }
    let x = lu.solve(&rhs).ok_or(Error::SingularSystem)?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularSystem)
    }
}

/// Left-retracts free poses and adds clamped depth increments.
pub fn apply_update(state: &BundleState, update: &BundleUpdate) -> BundleState {
    let mut next = state.clone();
    for (f, pose) in next.poses.iter_mut().enumerate() {
        if !state.fixed_frames.contains(&f) {
            *pose = pose.retract(&update.pose[f]);
        }
    }
    for (f, depth) in next.depths.iter_mut().enumerate() {
        let inc = &update.depth[f];
        if inc.iter().all(|x| *x == 0.0) {
            continue;
        }
        let grid = depth.grid();
        let values = grid
            .iter()
            .zip(inc)
            .map(|(d, dd)| (d + dd).clamp(DEPTH_MIN, DEPTH_MAX))
            .collect();
        *depth =
            InverseDepthMap::from_grid_unchecked(Grid::from_vec(grid.width(), grid.height(), values));
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbaConfig {
    pub max_iters: usize,
    pub damping_init: f64,
    pub damping_scale: f64,
    /// Stop once the largest pose-increment component and the largest
    /// relative inverse-depth increment fall below this.
    pub tol: f64,
    pub max_retries: usize,
}

impl Default for DbaConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            damping_init: 1e-4,
            damping_scale: 10.0,
            tol: 1e-9,
            max_retries: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
    pub final_damping: f64,
}

impl SolverReport {
    pub fn is_monotone(&self) -> bool {
        self.cost_trace.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().unwrap_or(&0.0)
    }
}

fn max_relative_depth_step(state: &BundleState, update: &BundleUpdate) -> f64 {
    state
        .depths
        .iter()
        .zip(&update.depth)
        .flat_map(|(d, inc)| d.as_slice().iter().zip(inc).map(|(d, x)| (x / d).abs()))
        .fold(0.0, f64::max)
}

/// Levenberg-damped Gauss-Newton with accept/reject backtracking.
pub fn solve_dba(
    state: &BundleState,
    graph: &FrameGraph,
    k: &CameraIntrinsics,
    config: &DbaConfig,
) -> Result<(BundleState, SolverReport)> {
    check_inputs(state, graph, k)?;
    let mut current = state.clone();
    let mut cost = objective(&current, graph, k);
    let mut report = SolverReport {
        iterations: 0,
        cost_trace: vec![cost],
        converged: false,
        final_damping: config.damping_init,
    };
    let mut damping = config.damping_init;
    'outer: while report.iterations < config.max_iters {
        report.iterations += 1;
        let lin = linearize(&current, graph, k)?;
        let mut accepted = false;
        for attempt in 0..=config.max_retries {
            let update = match schur_solve(&lin, damping) {
                Ok(u) => u,
                Err(Error::SingularSystem) if attempt < config.max_retries => {
                    damping *= config.damping_scale;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let small = update.max_pose_step() < config.tol
                && max_relative_depth_step(&current, &update) < config.tol;
            let candidate = apply_update(&current, &update);
            let new_cost = objective(&candidate, graph, k);
            if small {
                if new_cost <= cost {
                    current = candidate;
                    cost = new_cost;
                    report.cost_trace.push(cost);
                }
                report.converged = true;
                break 'outer;
            }
            if new_cost < cost {
                current = candidate;
                cost = new_cost;
                report.cost_trace.push(cost);
                damping = (damping / config.damping_scale).max(1e-12);
                accepted = true;
                break;
            }
            damping *= config.damping_scale;
        }
        if !accepted {
            break;
        }
    }
    report.final_damping = damping;
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k_small() -> CameraIntrinsics {
        CameraIntrinsics::new(20.0, 20.0, 4.0, 3.0, 8, 6).unwrap()
    }

    fn random_twist(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Twist {
        Twist::new(
            Vector3::new(rng.random_range(-rot..rot), rng.random_range(-rot..rot), rng.random_range(-rot..rot)),
            Vector3::new(
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
            ),
        )
    }

    /// Targets generated from `truth`, so the objective vanishes there.
    fn exact_graph(truth: &BundleState, k: &CameraIntrinsics, radius: usize) -> FrameGraph {
        let edges = build_frame_graph(truth.num_frames(), radius)
            .into_iter()
            .map(|(i, j)| {
                let c = crate::geometry::correspondence_field(k, &truth.poses[i], &truth.poses[j], &truth.depths[i])
                    .unwrap();
                let weight = ConfidenceMap {
                    weight: c.valid.map(|v| if *v { Vector2::new(1.0, 1.0) } else { Vector2::zeros() }),
                };
                GraphEdge {
                    i,
                    j,
                    target: c.coords,
                    weight,
                }
            })
            .collect();
        FrameGraph::new(truth.num_frames(), edges).unwrap()
    }

    fn toy_truth(rng: &mut ChaCha8Rng, frames: usize, k: &CameraIntrinsics) -> BundleState {
        let poses = (0..frames)
            .map(|f| {
                if f == 0 {
                    SE3Pose::identity()
                } else {
                    SE3Pose::exp(&random_twist(rng, 0.02, 0.15))
                }
            })
            .collect();
        let depths = (0..frames)
            .map(|_| {
                InverseDepthMap::new(Grid::from_fn(k.width, k.height, |_, _| rng.random_range(0.2..0.5))).unwrap()
            })
            .collect();
        BundleState::new(poses, depths, [0].into_iter().collect()).unwrap()
    }

    #[test]
    fn frame_graph_edge_counts() {
        assert_eq!(build_frame_graph(2, 1), vec![(0, 1), (1, 0)]);
        assert_eq!(build_frame_graph(4, 1).len(), 6);
        assert_eq!(build_frame_graph(5, 2).len(), 14);
        let e = build_frame_graph(5, 2);
        let mut sorted = e.clone();
        sorted.sort();
        assert_eq!(e, sorted);
    }

    #[test]
    fn frame_graph_rejects_duplicates_and_bad_indices() {
        let g = Grid::filled(2, 2, Vector2::zeros());
        let w = ConfidenceMap::uniform(2, 2, 1.0);
        let e = |i, j| GraphEdge { i, j, target: g.clone(), weight: w.clone() };
        assert!(FrameGraph::new(2, vec![e(0, 1), e(0, 1)]).is_err());
        assert!(FrameGraph::new(2, vec![e(0, 2)]).is_err());
        assert!(FrameGraph::new(2, vec![e(1, 1)]).is_err());
        assert!(FrameGraph::new(2, vec![e(0, 1), e(1, 0)]).is_ok());
    }

    #[test]
    fn corrected_correspondence_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Grid::from_fn(5, 4, |u, v| Vector2::new(u as f64 + 0.3, v as f64 - 0.2));
        let zero = Grid::filled(5, 4, Vector2::zeros());
        assert_eq!(corrected_correspondence(&p, &zero).unwrap(), p);
        let shift = Grid::filled(5, 4, Vector2::new(1.0, 0.0));
        let shifted = corrected_correspondence(&p, &shift).unwrap();
        assert!(shifted.iter().zip(p.iter()).all(|(a, b)| (a - b - Vector2::new(1.0, 0.0)).amax() < 1e-14));
        let r = Grid::from_fn(5, 4, |_, _| Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)));
        let sum = corrected_correspondence(&p, &r).unwrap();
        for ((s, r), p) in sum.iter().zip(r.iter()).zip(p.iter()) {
            assert!((s - r - p).amax() < 1e-14);
        }
        assert!(corrected_correspondence(&p, &Grid::filled(4, 4, Vector2::zeros())).is_err());
    }

    #[test]
    fn motion_prob_values() {
        let zero = Grid::filled(2, 2, Vector2::zeros());
        let p = estimate_motion_prob(&zero, &zero, 2.0, 1.5).unwrap();
        assert!((p.as_slice()[0] - 1.0 / (1.0 + 3.0f64.exp())).abs() < 1e-15);
        assert!((p.as_slice()[0] - 0.0474).abs() < 1e-4);
        let at_beta = Grid::filled(2, 2, Vector2::new(0.9, 1.2));
        assert_eq!(estimate_motion_prob(&at_beta, &zero, 2.0, 1.5).unwrap().as_slice()[0], 0.5);
        let far = Grid::filled(2, 2, Vector2::new(6.0, 8.0));
        assert!(estimate_motion_prob(&far, &zero, 2.0, 1.5).unwrap().as_slice()[0] > 0.9999);
        assert!(estimate_motion_prob(&far, &Grid::filled(1, 2, Vector2::zeros()), 2.0, 1.5).is_err());
    }

    #[test]
    fn objective_examples() {
        let k = k_small();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = toy_truth(&mut rng, 2, &k);
        let graph = exact_graph(&truth, &k, 1);
        assert!(objective(&truth, &graph, &k) < 1e-20);

        // Single pixel with unit weight and a (3, 4) offset.
        let mut single = graph.clone();
        for e in single.edges_mut() {
            e.weight = ConfidenceMap::uniform(8, 6, 0.0);
        }
        let e = &mut single.edges_mut()[0];
        *e.weight.weight.get_mut(2, 2) = Vector2::new(1.0, 1.0);
        *e.target.get_mut(2, 2) += Vector2::new(3.0, 4.0);
        assert!((objective(&truth, &single, &k) - 25.0).abs() < 1e-9);

        // Halving weights halves the cost.
        let mut noisy = graph.clone();
        for e in noisy.edges_mut() {
            for t in e.target.as_mut_slice() {
                *t += Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
        }
        let full = objective(&truth, &noisy, &k);
        for e in noisy.edges_mut() {
            for w in e.weight.weight.as_mut_slice() {
                *w *= 0.5;
            }
        }
        assert_eq!(objective(&truth, &noisy, &k), 0.5 * full);
    }

    #[test]
    fn zeroed_outlier_weights_restore_zero_cost() {
        let k = k_small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = toy_truth(&mut rng, 3, &k);
        let mut graph = exact_graph(&truth, &k, 2);
        for e in graph.edges_mut() {
            for idx in [3usize, 17, 30] {
                e.target.as_mut_slice()[idx] += Vector2::new(7.0, -5.0);
                e.weight.weight.as_mut_slice()[idx] = Vector2::zeros();
            }
        }
        assert_eq!(objective(&truth, &graph, &k), 0.0);
    }

    fn fd_jacobians(
        k: &CameraIntrinsics,
        gi: &SE3Pose,
        gj: &SE3Pose,
        px: &Vector2<f64>,
        d: f64,
    ) -> Option<(Matrix2x6<f64>, Matrix2x6<f64>, Vector2<f64>)> {
        let h = 1e-6;
        let target = Vector2::zeros();
        let r = |gi: &SE3Pose, gj: &SE3Pose, d: f64| pixel_residual(k, gi, gj, px, d, &target);
        let mut ji = Matrix2x6::zeros();
        let mut jj = Matrix2x6::zeros();
        for c in 0..6 {
            let mut e = Vector6::zeros();
            e[c] = h;
            let xp = Twist::from_vector(&e);
            let xm = -xp;
            let col_i = (r(&gi.retract(&xp), gj, d)? - r(&gi.retract(&xm), gj, d)?) / (2.0 * h);
            let col_j = (r(gi, &gj.retract(&xp), d)? - r(gi, &gj.retract(&xm), d)?) / (2.0 * h);
            ji.set_column(c, &col_i);
            jj.set_column(c, &col_j);
        }
        let hd = h * d;
        let jd = (r(gi, gj, d + hd)? - r(gi, gj, d - hd)?) / (2.0 * hd);
        Some((ji, jj, jd))
    }

    fn near_boundary(k: &CameraIntrinsics, gi: &SE3Pose, gj: &SE3Pose, px: &Vector2<f64>, d: f64) -> bool {
        let g = relative_pose(gi, gj);
        let x = g.transform_point(&k.unproject_unchecked(px, d));
        if x.z <= EPSILON_Z + 1e-3 {
            return true;
        }
        let p = k.project_unchecked(&x);
        let margin = 1e-3;
        p.x < -0.5 + margin
            || p.y < -0.5 + margin
            || p.x > k.width as f64 - 0.5 - margin
            || p.y > k.height as f64 - 0.5 - margin
    }

    #[test]
    fn analytic_jacobians_match_central_differences() {
        let k = CameraIntrinsics::new(30.0, 28.0, 8.0, 6.0, 16, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut checked = 0;
        for _ in 0..100 {
            let gi = SE3Pose::exp(&random_twist(&mut rng, 0.3, 1.0));
            let gj = SE3Pose::exp(&random_twist(&mut rng, 0.05, 0.3)).compose(&gi);
            for _ in 0..5 {
                let px = Vector2::new(rng.random_range(0.0..15.0), rng.random_range(0.0..11.0));
                let d = rng.random_range(0.1..1.0);
                if near_boundary(&k, &gi, &gj, &px, d) {
                    continue;
                }
                let Some((ai, aj, ad)) = pixel_jacobians(&k, &gi, &gj, &px, d) else { continue };
                let (fi, fj, fd) = fd_jacobians(&k, &gi, &gj, &px, d).unwrap();
                let rel = |a: f64, b: f64| a / b.max(1.0);
                assert!(rel((ai - fi).norm(), fi.norm()) < 1e-5, "{ai} vs {fi}");
                assert!(rel((aj - fj).norm(), fj.norm()) < 1e-5, "{aj} vs {fj}");
                assert!(rel((ad - fd).norm(), fd.norm()) < 1e-5, "{ad} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked > 300);
    }

    #[test]
    fn depth_jacobian_vanishes_without_translation() {
        let k = k_small();
        let g = SE3Pose::new(UnitQuaternion::from_euler_angles(0.1, -0.05, 0.2), Vector3::zeros());
        let (_, _, jd) = pixel_jacobians(&k, &SE3Pose::identity(), &g, &Vector2::new(3.0, 2.0), 0.4).unwrap();
        assert_eq!(jd, Vector2::zeros());
        let (_, _, jd) =
            pixel_jacobians(&k, &SE3Pose::identity(), &SE3Pose::identity(), &Vector2::new(1.0, 4.0), 0.4).unwrap();
        assert_eq!(jd, Vector2::zeros());
    }

    #[test]
    fn fixed_frames_have_no_pose_columns() {
        let k = k_small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut truth = toy_truth(&mut rng, 3, &k);
        truth.fixed_frames = [0, 2].into_iter().collect();
        truth.scale_gauge = ScaleGauge::Free;
        let graph = exact_graph(&truth, &k, 2);
        let lin = linearize(&truth, &graph, &k).unwrap();
        assert_eq!(lin.pose_columns, vec![None, Some(0), None]);
        let upd = schur_solve(&lin, 1e-3).unwrap();
        assert_eq!(upd.pose[0], Twist::zero());
        assert_eq!(upd.pose[2], Twist::zero());
    }

    #[test]
    fn zero_residuals_give_zero_update() {
        let k = k_small();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = toy_truth(&mut rng, 3, &k);
        let graph = exact_graph(&truth, &k, 2);
        let lin = linearize(&truth, &graph, &k).unwrap();
        let upd = schur_solve(&lin, 1e-4).unwrap();
        assert!(upd.norm() < 1e-12, "{}", upd.norm());
    }

    #[test]
    fn damping_limit_shrinks_update() {
        let k = k_small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = toy_truth(&mut rng, 3, &k);
        let graph = exact_graph(&truth, &k, 2);
        let mut start = truth.clone();
        start.poses[1] = start.poses[1].retract(&random_twist(&mut rng, 0.01, 0.05));
        start.poses[2] = start.poses[2].retract(&random_twist(&mut rng, 0.01, 0.05));
        let lin = linearize(&start, &graph, &k).unwrap();
        let mut prev = f64::INFINITY;
        // In the Levenberg regime the step shrinks like g / λ.
        for e in 0..=8 {
            let n = schur_solve(&lin, 10f64.powi(e)).unwrap().norm();
            assert!(n <= prev, "damping 1e{e}: {n} > {prev}");
            prev = n;
        }
        assert!(prev < 1e-7);
    }

    #[test]
    fn apply_update_rules() {
        let k = k_small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = toy_truth(&mut rng, 2, &k);
        let zero = BundleUpdate::zeros(2, 48);
        assert_eq!(apply_update(&truth, &zero), truth);

        let mut upd = BundleUpdate::zeros(2, 48);
        upd.depth[1][0] = -10.0;
        upd.depth[1][1] = 1e5;
        let xi = random_twist(&mut rng, 0.1, 0.1);
        upd.pose[0] = xi;
        upd.pose[1] = xi;
        let next = apply_update(&truth, &upd);
        assert_eq!(next.depths[1].as_slice()[0], DEPTH_MIN);
        assert_eq!(next.depths[1].as_slice()[1], DEPTH_MAX);
        assert_eq!(next.poses[0], truth.poses[0]);
        assert_eq!(next.poses[1], SE3Pose::exp(&xi).compose(&truth.poses[1]));
    }

    #[test]
    fn solve_from_ground_truth_stops_immediately() {
        let k = k_small();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = toy_truth(&mut rng, 3, &k);
        let graph = exact_graph(&truth, &k, 2);
        let (out, report) = solve_dba(&truth, &graph, &k, &DbaConfig::default()).unwrap();
        assert_eq!(report.iterations, 1);
        assert!(report.converged);
        assert!(report.final_cost() < 1e-20);
        assert_eq!(out.poses[0], truth.poses[0]);
    }

    #[test]
    fn solve_recovers_perturbed_poses() {
        let k = CameraIntrinsics::new(30.0, 30.0, 8.0, 6.0, 16, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = toy_truth(&mut rng, 4, &k);
        let graph = exact_graph(&truth, &k, 2);
        let mut start = truth.clone();
        for f in 1..4 {
            start.poses[f] = start.poses[f].retract(&random_twist(&mut rng, 0.01, 0.03));
        }
        let (out, report) = solve_dba(&start, &graph, &k, &DbaConfig::default()).unwrap();
        assert!(report.is_monotone());
        assert!(report.final_cost() < 1e-12, "{:?}", report);
        assert_eq!(out.poses[0], start.poses[0]);
        for f in 1..4 {
            let err = out.poses[f].compose(&truth.poses[f].inverse()).log().to_vector().amax();
            assert!(err < 1e-6, "frame {f}: {err}");
        }
        // Scale anchor: mean inverse depth of frame 0 is preserved.
        assert!((out.depths[0].mean() - start.depths[0].mean()).abs() < 1e-12);
    }

    #[test]
    fn solve_is_deterministic() {
        let k = k_small();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let truth = toy_truth(&mut rng, 3, &k);
        let mut graph = exact_graph(&truth, &k, 2);
        for e in graph.edges_mut() {
            for t in e.target.as_mut_slice() {
                *t += Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            }
        }
        let a = solve_dba(&truth, &graph, &k, &DbaConfig::default()).unwrap();
        let b = solve_dba(&truth, &graph, &k, &DbaConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.1.is_monotone());
    }
}
