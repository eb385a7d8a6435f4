//! Panoptic labels, the panoptic-aware dynamic mask and confidence filter,
//! greedy IoU track association and the video panoptic quality metric.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::Vector2;

use crate::grid::{check_dims, Grid};
use crate::{Error, Result};

/// Class id of pixels that carry no label (occluded after warping, or unlabeled).
pub const VOID_CLASS: u16 = u16::MAX;

/// Default binarization threshold of the dynamic mask.
pub const DEFAULT_DYNAMIC_THRESHOLD: f64 = 0.5;

/// Default static-pixel boost added to the confidence logits.
pub const DEFAULT_ETA: f64 = 10.0;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-pixel `(class, instance)` labels. Instance 0 marks stuff.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticMap {
    class_id: Grid<u16>,
    instance_id: Grid<u32>,
    thing_classes: BTreeSet<u16>,
}

impl PanopticMap {
    pub fn new(
        class_id: Grid<u16>,
        instance_id: Grid<u32>,
        thing_classes: BTreeSet<u16>,
    ) -> Result<Self> {
        check_dims(&class_id, &instance_id)?;
        if thing_classes.contains(&VOID_CLASS) {
            return Err(Error::InvalidParameter("void class cannot be a thing".into()));
        }
        let mut owner: HashMap<u32, u16> = HashMap::new();
        for (&c, &i) in class_id.iter().zip(instance_id.iter()) {
            let is_thing = thing_classes.contains(&c);
            if i > 0 && !is_thing {
                return Err(Error::InputInconsistency(format!(
                    "instance {i} carries non-thing class {c}"
                )));
            }
            if i == 0 && is_thing {
                return Err(Error::InputInconsistency(format!(
                    "thing class {c} pixel without an instance id"
                )));
            }
            if i > 0 {
                let prev = *owner.entry(i).or_insert(c);
                if prev != c {
                    return Err(Error::InputInconsistency(format!(
                        "instance {i} maps to classes {prev} and {c}"
                    )));
                }
            }
        }
        Ok(Self {
            class_id,
            instance_id,
            thing_classes,
        })
    }

    /// A map with every pixel void.
    pub fn void(width: usize, height: usize, thing_classes: BTreeSet<u16>) -> Self {
        Self {
            class_id: Grid::filled(width, height, VOID_CLASS),
            instance_id: Grid::filled(width, height, 0),
            thing_classes,
        }
    }

    #[inline]
    pub fn class_id(&self) -> &Grid<u16> {
        &self.class_id
    }

    #[inline]
    pub fn instance_id(&self) -> &Grid<u32> {
        &self.instance_id
    }

    #[inline]
    pub fn thing_classes(&self) -> &BTreeSet<u16> {
        &self.thing_classes
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.class_id.dims()
    }

    #[inline]
    pub fn is_thing(&self, class: u16) -> bool {
        self.thing_classes.contains(&class)
    }

    #[inline]
    pub fn label_at(&self, idx: usize) -> (u16, u32) {
        (self.class_id.as_slice()[idx], self.instance_id.as_slice()[idx])
    }

    /// Pixel indices of every instance, keyed by instance id.
    pub fn instances(&self) -> BTreeMap<u32, Instance> {
        let mut out: BTreeMap<u32, Instance> = BTreeMap::new();
        for (idx, (&c, &i)) in self.class_id.iter().zip(self.instance_id.iter()).enumerate() {
            if i > 0 {
                out.entry(i)
                    .or_insert_with(|| Instance {
                        class: c,
                        pixels: Vec::new(),
                    })
                    .pixels
                    .push(idx);
            }
        }
        out
    }

    /// Replaces instance ids through `mapping`; ids absent from it are kept.
    pub fn relabeled(&self, mapping: &BTreeMap<u32, u32>) -> PanopticMap {
        PanopticMap {
            class_id: self.class_id.clone(),
            instance_id: self
                .instance_id
                .map(|i| mapping.get(i).copied().unwrap_or(*i)),
            thing_classes: self.thing_classes.clone(),
        }
    }

    /// Nearest-neighbor resampling to `width × height`, treating `self` as
    /// the every-`scale`-th-pixel subsample of the target.
    pub fn upsampled(&self, scale: usize, width: usize, height: usize) -> PanopticMap {
        let (w, h) = self.dims();
        let pick = |x: usize, n: usize| ((x as f64 / scale as f64).round() as usize).min(n - 1);
        let class_id = Grid::from_fn(width, height, |u, v| *self.class_id.get(pick(u, w), pick(v, h)));
        let instance_id =
            Grid::from_fn(width, height, |u, v| *self.instance_id.get(pick(u, w), pick(v, h)));
        PanopticMap {
            class_id,
            instance_id,
            thing_classes: self.thing_classes.clone(),
        }
    }

    /// Every-`scale`-th-pixel subsample.
    pub fn downsampled(&self, scale: usize) -> PanopticMap {
        let (w, h) = self.dims();
        let (ws, hs) = (w.div_ceil(scale), h.div_ceil(scale));
        PanopticMap {
            class_id: Grid::from_fn(ws, hs, |u, v| *self.class_id.get(u * scale, v * scale)),
            instance_id: Grid::from_fn(ws, hs, |u, v| *self.instance_id.get(u * scale, v * scale)),
            thing_classes: self.thing_classes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class: u16,
    /// Flat pixel indices in ascending order.
    pub pixels: Vec<usize>,
}

/// Per-pixel probability that the pixel belongs to a moving object.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicMask {
    pub prob: Grid<f64>,
}

/// Per-pixel confidence, one weight per flow component.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub weight: Grid<Vector2<f64>>,
}

impl ConfidenceMap {
    pub fn uniform(width: usize, height: usize, w: f64) -> Self {
        Self {
            weight: Grid::filled(width, height, Vector2::new(w, w)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// Instance medians are thresholded to exactly 0 or 1.
    #[default]
    Binary,
    /// Instance medians are used as-is.
    Soft,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn build_dynamic_mask(
    seg: &PanopticMap,
    motion_prob: &Grid<f64>,
    threshold: f64,
) -> Result<DynamicMask> {
    build_dynamic_mask_with(seg, motion_prob, threshold, MaskMode::Binary)
}

/// Stuff and void pixels are static; every pixel of a thing instance takes the
/// median motion probability of the instance, binarized at `threshold` in
/// [`MaskMode::Binary`].
pub fn build_dynamic_mask_with(
    seg: &PanopticMap,
    motion_prob: &Grid<f64>,
    threshold: f64,
    mode: MaskMode,
) -> Result<DynamicMask> {
    check_dims(seg.class_id(), motion_prob)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "dynamic threshold {threshold} outside (0, 1)"
        )));
    }
    let (w, h) = seg.dims();
    let mut prob = Grid::filled(w, h, 0.0);
    let probs = motion_prob.as_slice();
    for inst in seg.instances().values() {
        let mut vals: Vec<f64> = inst.pixels.iter().map(|&p| probs[p].clamp(0.0, 1.0)).collect();
        let m = median(&mut vals);
        let value = match mode {
            MaskMode::Binary => {
                if m >= threshold {
                    1.0
                } else {
                    0.0
                }
            }
            MaskMode::Soft => m,
        };
        for &p in &inst.pixels {
            prob.as_mut_slice()[p] = value;
        }
    }
    Ok(DynamicMask { prob })
}

/// `w_p = sigmoid(w + (1 - M_d) * eta)` on both components.
pub fn panoptic_confidence(
    raw: &ConfidenceMap,
    mask: &DynamicMask,
    eta: f64,
) -> Result<ConfidenceMap> {
    check_dims(&raw.weight, &mask.prob)?;
    if !(eta >= 0.0) {
        return Err(Error::InvalidParameter(format!("eta {eta} must be >= 0")));
    }
    let weight = Grid::from_vec(
        raw.weight.width(),
        raw.weight.height(),
        raw.weight
            .iter()
            .zip(mask.prob.iter())
            .map(|(w, m)| {
                let boost = (1.0 - m) * eta;
                Vector2::new(sigmoid(w.x + boost), sigmoid(w.y + boost))
            })
            .collect(),
    );
    Ok(ConfidenceMap { weight })
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both masks are empty.
pub fn iou(mask_a: &Grid<bool>, mask_b: &Grid<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in mask_a.iter().zip(mask_b.iter()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of two ascending pixel-index lists.
pub fn iou_sorted(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Monotone source of fresh track ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackIdAllocator {
    next: u32,
}

impl Default for TrackIdAllocator {
    fn default() -> Self {
        Self { next: 1 }
    }
}

impl TrackIdAllocator {
    pub fn starting_at(next: u32) -> Self {
        Self { next: next.max(1) }
    }

    pub fn fresh(&mut self) -> u32 {
        let id = self.next;
        self.next += 1;
        id
    }

    /// Ensures future ids exceed `id`.
    pub fn reserve(&mut self, id: u32) {
        self.next = self.next.max(id + 1);
    }
}

/// Greedy one-to-one association of current instances to the track ids in
/// `prev_warped`. Returns `current id -> track id`.
///
/// Candidate pairs share a class and reach `min_iou`; they are taken in
/// descending IoU order, ties broken by the lower previous id. Unmatched
/// current instances draw fresh ids from `ids` in ascending id order.
pub fn iou_match(
    prev_warped: &PanopticMap,
    curr: &PanopticMap,
    min_iou: f64,
    ids: &mut TrackIdAllocator,
) -> Result<BTreeMap<u32, u32>> {
    check_dims(prev_warped.class_id(), curr.class_id())?;
    let prev = prev_warped.instances();
    let cur = curr.instances();
    if let Some(&max_prev) = prev.keys().next_back() {
        ids.reserve(max_prev);
    }
    let mut candidates = Vec::new();
    for (&pid, p) in &prev {
        for (&cid, c) in &cur {
            if p.class != c.class {
                continue;
            }
            let score = iou_sorted(&p.pixels, &c.pixels);
            if score > 0.0 && score >= min_iou {
                candidates.push((score, pid, cid));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mapping = BTreeMap::new();
    let mut used_prev = BTreeSet::new();
    for (_, pid, cid) in candidates {
        if mapping.contains_key(&cid) || used_prev.contains(&pid) {
            continue;
        }
        mapping.insert(cid, pid);
        used_prev.insert(pid);
    }
    for &cid in cur.keys() {
        mapping.entry(cid).or_insert_with(|| ids.fresh());
    }
    Ok(mapping)
}

/// Averaged video panoptic quality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpqScore {
    pub vpq: f64,
    pub vpq_thing: f64,
    pub vpq_stuff: f64,
}

#[derive(Default, Clone, Copy)]
struct ClassTally {
    iou_sum: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl ClassTally {
    fn score(&self) -> f64 {
        self.iou_sum / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64)
    }
}

/// Per-class tallies for one temporal window starting at `start`.
fn window_tallies(
    pred: &[PanopticMap],
    gt: &[PanopticMap],
    start: usize,
    k: usize,
) -> BTreeMap<u16, ClassTally> {
    type Key = (u16, u32);
    let mut gt_area: BTreeMap<Key, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<Key, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(Key, Key), usize> = BTreeMap::new();
    for f in start..=start + k {
        let (p, g) = (&pred[f], &gt[f]);
        for idx in 0..g.class_id().len() {
            let gl = g.label_at(idx);
            if gl.0 == VOID_CLASS {
                continue;
            }
            *gt_area.entry(gl).or_default() += 1;
            let pl = p.label_at(idx);
            if pl.0 == VOID_CLASS {
                continue;
            }
            *pred_area.entry(pl).or_default() += 1;
            if pl.0 == gl.0 {
                *inter.entry((gl, pl)).or_default() += 1;
            }
        }
    }
    let mut tallies: BTreeMap<u16, ClassTally> = BTreeMap::new();
    let mut matched_gt = BTreeSet::new();
    let mut matched_pred = BTreeSet::new();
    for (&(gk, pk), &n) in &inter {
        let union = gt_area[&gk] + pred_area[&pk] - n;
        let score = n as f64 / union as f64;
        // IoU > 0.5 makes the matching unique.
        if score > 0.5 {
            let t = tallies.entry(gk.0).or_default();
            t.tp += 1;
            t.iou_sum += score;
            matched_gt.insert(gk);
            matched_pred.insert(pk);
        }
    }
    for gk in gt_area.keys().filter(|k| !matched_gt.contains(*k)) {
        tallies.entry(gk.0).or_default().fn_ += 1;
    }
    for pk in pred_area.keys().filter(|k| !matched_pred.contains(*k)) {
        tallies.entry(pk.0).or_default().fp += 1;
    }
    tallies
}

/// Video panoptic quality over all windows of `window_k + 1` consecutive
/// frames. Segments are tubes of one `(class, id)` across the window, matched
/// to ground truth at tube IoU > 0.5; pixels that are void in ground truth are
/// ignored. Each window scores the mean per-class quality, and windows are
/// averaged. A subset (things or stuff) that never occurs scores 1.
pub fn vpq(pred: &[PanopticMap], gt: &[PanopticMap], window_k: usize) -> Result<VpqScore> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if window_k >= gt.len() {
        return Err(Error::WindowTooLarge {
            k: window_k,
            len: gt.len(),
        });
    }
    for (p, g) in pred.iter().zip(gt) {
        check_dims(g.class_id(), p.class_id())?;
    }
    let things: BTreeSet<u16> = gt
        .iter()
        .flat_map(|g| g.thing_classes().iter().copied())
        .collect();
    let windows: Vec<BTreeMap<u16, ClassTally>> = (0..gt.len() - window_k)
        .map(|t| window_tallies(pred, gt, t, window_k))
        .collect();

    let mean_over = |select: &dyn Fn(u16) -> bool| -> f64 {
        let per_window: Vec<f64> = windows
            .iter()
            .filter_map(|tallies| {
                let scores: Vec<f64> = tallies
                    .iter()
                    .filter(|(c, _)| select(**c))
                    .map(|(_, t)| t.score())
                    .collect();
                (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
            })
            .collect();
        if per_window.is_empty() {
            1.0
        } else {
            per_window.iter().sum::<f64>() / per_window.len() as f64
        }
    };
    Ok(VpqScore {
        vpq: mean_over(&|_| true),
        vpq_thing: mean_over(&|c| things.contains(&c)),
        vpq_stuff: mean_over(&|c| !things.contains(&c)),
    })
}
