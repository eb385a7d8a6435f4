//! Geometry-driven propagation of panoptic labels and features from frame
//! `t-1` to frame `t`, with z-buffer occlusion handling, deterministic fusion
//! and the two consistency losses.

use std::collections::BTreeMap;

use nalgebra::Vector2;

use crate::geometry::{
    correspondence_field, CameraIntrinsics, FlowField, InverseDepthMap, SE3Pose, EPSILON_Z,
};
use crate::grid::{check_dims, Grid};
use crate::panoptic::{iou_match, PanopticMap, TrackIdAllocator, VOID_CLASS};
use crate::{Error, Result};

/// Relative depth disagreement above which a warped pixel counts as occluded.
pub const DEFAULT_DEPTH_EPS: f64 = 0.05;

/// Dense `height x width x channels` activations, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::LengthMismatch {
                left: width * height * channels,
                right: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite feature".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// One channel per entry of `classes`; void and unknown classes map to zeros.
    pub fn one_hot(labels: &PanopticMap, classes: &[u16]) -> Self {
        let (w, h) = labels.dims();
        let slot: BTreeMap<u16, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut out = Self::zeros(w, h, classes.len());
        for (idx, c) in labels.class_id().iter().enumerate() {
            if let Some(&s) = slot.get(c) {
                out.data[idx * classes.len() + s] = 1.0;
            }
        }
        out
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    fn pixel_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn check_same(&self, other: &FeatureGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        if self.channels != other.channels {
            return Err(Error::LengthMismatch {
                left: self.channels,
                right: other.channels,
            });
        }
        Ok(())
    }
}

/// Camera pose (world-to-camera) and inverse depth of one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameGeometry<'a> {
    pub pose: &'a SE3Pose,
    pub depth: &'a InverseDepthMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub warped_labels: PanopticMap,
    pub warped_features: FeatureGrid,
    /// True where the cell is unhit or the depth check fails.
    pub occlusion_mask: Grid<bool>,
    /// Source pixel index that won each target cell.
    pub source: Grid<Option<usize>>,
}

impl WarpResult {
    /// Non-occluded cells.
    pub fn visible_pixels(&self) -> Vec<(usize, usize)> {
        let w = self.occlusion_mask.width();
        self.occlusion_mask
            .iter()
            .enumerate()
            .filter(|(_, occ)| !**occ)
            .map(|(idx, _)| (idx % w, idx / w))
            .collect()
    }
}

/// Forward-warps labels and features of `prev` into `curr` with the default
/// depth tolerance.
pub fn warp_to_current(
    k: &CameraIntrinsics,
    prev_labels: &PanopticMap,
    prev_features: &FeatureGrid,
    prev: FrameGeometry<'_>,
    curr: FrameGeometry<'_>,
) -> Result<WarpResult> {
    warp_to_current_with(k, prev_labels, prev_features, prev, curr, DEFAULT_DEPTH_EPS, None)
}

/// Each source pixel is splatted to the nearest target cell. The closest
/// transformed depth wins a cell, ties go to the lower source index. A hit
/// cell is occluded when its warped depth lies behind the current depth by
/// more than `depth_eps` relative to the current depth; unhit cells are
/// occluded. Occluded cells carry the void label and zero features.
///
/// With `flow`, source pixels land at `p + flow` instead of their geometric
/// reprojection, which follows independently moving objects; depths for the
/// z-buffer and the occlusion test still come from the geometry.
pub fn warp_to_current_with(
    k: &CameraIntrinsics,
    prev_labels: &PanopticMap,
    prev_features: &FeatureGrid,
    prev: FrameGeometry<'_>,
    curr: FrameGeometry<'_>,
    depth_eps: f64,
    flow: Option<&FlowField>,
) -> Result<WarpResult> {
    let dims = k.dims();
    let flow_dims = flow.map(|f| f.dims()).unwrap_or(dims);
    for found in [prev_labels.dims(), prev_features.dims(), curr.depth.dims(), flow_dims] {
        if found != dims {
            return Err(Error::DimensionMismatch { expected: dims, found });
        }
    }
    let corr = correspondence_field(k, prev.pose, curr.pose, prev.depth)?;
    let (w, h) = dims;
    let mut zbuf: Vec<Option<(f64, usize)>> = vec![None; w * h];
    for src in 0..w * h {
        let z = corr.target_depth.as_slice()[src];
        let p = match flow {
            Some(f) => f.as_slice()[src] + Vector2::new((src % w) as f64, (src / w) as f64),
            None => corr.coords.as_slice()[src],
        };
        if z <= EPSILON_Z || !k.in_bounds(&p) {
            continue;
        }
        // In-bounds coordinates lie in [-0.5, W - 0.5), so half-up rounding stays inside.
        let u = (p.x + 0.5).floor() as usize;
        let v = (p.y + 0.5).floor() as usize;
        let cell = &mut zbuf[v * w + u];
        if cell.is_none_or(|(best, _)| z < best) {
            *cell = Some((z, src));
        }
    }

    let mut class = Grid::filled(w, h, VOID_CLASS);
    let mut inst = Grid::filled(w, h, 0u32);
    let mut features = FeatureGrid::zeros(w, h, prev_features.channels());
    let mut occlusion = Grid::filled(w, h, true);
    let mut source = Grid::filled(w, h, None);
    for (idx, cell) in zbuf.iter().enumerate() {
        let Some((z, src)) = *cell else { continue };
        source.as_mut_slice()[idx] = Some(src);
        let z_curr = 1.0 / curr.depth.as_slice()[idx];
        if z - z_curr > depth_eps * z_curr {
            continue;
        }
        occlusion.as_mut_slice()[idx] = false;
        let (c, i) = prev_labels.label_at(src);
        class.as_mut_slice()[idx] = c;
        inst.as_mut_slice()[idx] = i;
        features.pixel_mut(idx).copy_from_slice(prev_features.pixel(src));
    }
    Ok(WarpResult {
        warped_labels: PanopticMap::new(class, inst, prev_labels.thing_classes().clone())?,
        warped_features: features,
        occlusion_mask: occlusion,
        source,
    })
}

/// Occluded cells keep the current feature; elsewhere the element-wise mean.
pub fn fuse_features(
    warped: &FeatureGrid,
    current: &FeatureGrid,
    occlusion: &Grid<bool>,
) -> Result<FeatureGrid> {
    warped.check_same(current)?;
    if occlusion.dims() != current.dims() {
        return Err(Error::DimensionMismatch {
            expected: current.dims(),
            found: occlusion.dims(),
        });
    }
    let mut out = current.clone();
    for (idx, occ) in occlusion.iter().enumerate() {
        if *occ {
            continue;
        }
        for (o, w) in out.pixel_mut(idx).iter_mut().zip(warped.pixel(idx)) {
            *o = 0.5 * (*o + w);
        }
    }
    Ok(out)
}

/// Per-cell mean over the non-occluded warps from several source frames;
/// zero where no warp reaches.
pub fn mean_warped_features(warps: &[&WarpResult]) -> Result<FeatureGrid> {
    let first = warps
        .first()
        .ok_or_else(|| Error::InvalidParameter("no warp sources".into()))?;
    let (w, h) = first.warped_features.dims();
    let mut out = FeatureGrid::zeros(w, h, first.warped_features.channels());
    let mut counts = vec![0usize; w * h];
    for warp in warps {
        warp.warped_features.check_same(&out)?;
        for (idx, occ) in warp.occlusion_mask.iter().enumerate() {
            if !occ {
                counts[idx] += 1;
                for (o, x) in out.pixel_mut(idx).iter_mut().zip(warp.warped_features.pixel(idx)) {
                    *o += x;
                }
            }
        }
    }
    for (idx, &n) in counts.iter().enumerate() {
        if n > 1 {
            out.pixel_mut(idx).iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    Ok(out)
}

/// Mean absolute difference over all entries.
pub fn feature_alignment_loss(z_star: &FeatureGrid, z_hat: &FeatureGrid) -> Result<f64> {
    z_star.check_same(z_hat)?;
    if z_star.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = z_star.data.iter().zip(&z_hat.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / z_star.data.len() as f64)
}

/// Sum over query pixels `(u, v)` of the L1 distance between logit vectors.
pub fn segmentation_consistency_loss(
    logits_a: &FeatureGrid,
    logits_b: &FeatureGrid,
    query_pixels: &[(usize, usize)],
) -> Result<f64> {
    logits_a.check_same(logits_b)?;
    let (w, h) = logits_a.dims();
    let mut sum = 0.0;
    for &(u, v) in query_pixels {
        if u >= w || v >= h {
            return Err(Error::QueryOutOfBounds {
                u,
                v,
                width: w,
                height: h,
            });
        }
        let idx = v * w + u;
        sum += logits_a
            .pixel(idx)
            .iter()
            .zip(logits_b.pixel(idx))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    Ok(sum)
}

/// Relabels the instances of `curr` with the track ids carried by the warped
/// previous labels. Ids seen in `prev` are never handed out again, even when
/// their object left the view.
pub fn propagate_tracks(
    prev: &PanopticMap,
    warp: &WarpResult,
    curr: &PanopticMap,
    min_iou: f64,
    ids: &mut TrackIdAllocator,
) -> Result<PanopticMap> {
    let mapping = track_mapping(prev, warp, curr, min_iou, ids)?;
    Ok(curr.relabeled(&mapping))
}

/// The `current id -> track id` assignment behind [`propagate_tracks`].
pub fn track_mapping(
    prev: &PanopticMap,
    warp: &WarpResult,
    curr: &PanopticMap,
    min_iou: f64,
    ids: &mut TrackIdAllocator,
) -> Result<BTreeMap<u32, u32>> {
    check_dims(prev.class_id(), curr.class_id())?;
    if let Some(&max) = prev.instances().keys().next_back() {
        ids.reserve(max);
    }
    iou_match(&warp.warped_labels, curr, min_iou, ids)
}
