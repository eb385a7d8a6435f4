//! Trajectory accuracy: closed-form alignment and absolute trajectory error.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::SE3Pose;
use crate::io::KeyValues;
use crate::panoptic::{vpq, PanopticMap, VpqScore};
use crate::{Error, Result};

/// Timestamped world-to-camera poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    timestamps: Vec<f64>,
    poses: Vec<SE3Pose>,
}

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, poses: Vec<SE3Pose>) -> Result<Self> {
        if timestamps.len() != poses.len() {
            return Err(Error::LengthMismatch {
                left: timestamps.len(),
                right: poses.len(),
            });
        }
        if timestamps.iter().any(|t| !t.is_finite()) || timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InputInconsistency(
                "timestamps must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self { timestamps, poses })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn poses(&self) -> &[SE3Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Camera centers in world coordinates.
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(SE3Pose::center).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Rigid,
    /// Rotation, translation and scale; the default for monocular estimates.
    #[default]
    Similarity,
}

impl Alignment {
    pub fn name(self) -> &'static str {
        match self {
            Alignment::Rigid => "rigid",
            Alignment::Similarity => "similarity",
        }
    }
}

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

fn centered(points: &[Vector3<f64>]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    (mean, points.iter().map(|p| p - mean).collect())
}

fn check_spread(points: &[Vector3<f64>], what: &str) -> Result<()> {
    let (_, c) = centered(points);
    let cov: Matrix3<f64> = c.iter().map(|p| p * p.transpose()).sum();
    let sv = cov.singular_values();
    let (max, second) = {
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        (s[0], s[1])
    };
    if max <= 0.0 || second <= 1e-12 * max {
        return Err(Error::DegenerateTrajectory(format!("{what} positions are collinear")));
    }
    Ok(())
}

/// Least-squares transform mapping `src` onto `dst` (Umeyama).
pub fn align(src: &[Vector3<f64>], dst: &[Vector3<f64>], alignment: Alignment) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch {
            left: src.len(),
            right: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::DegenerateTrajectory(format!(
            "{} points, alignment needs at least 3",
            src.len()
        )));
    }
    check_spread(src, "estimated")?;
    check_spread(dst, "reference")?;
    let n = src.len() as f64;
    let (mu_s, cs) = centered(src);
    let (mu_d, cd) = centered(dst);
    let sigma: Matrix3<f64> = cd.iter().zip(&cs).map(|(d, s)| d * s.transpose()).sum::<Matrix3<f64>>() / n;
    let svd = sigma.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = match alignment {
        Alignment::Rigid => 1.0,
        Alignment::Similarity => {
            let var_s = cs.iter().map(|p| p.norm_squared()).sum::<f64>() / n;
            (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_s
        }
    };
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation: mu_d - scale * (rotation * mu_s),
    })
}

/// RMSE of aligned camera positions, meters of `gt`.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, alignment: Alignment) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: est.len(),
            right: gt.len(),
        });
    }
    if let Some((a, b)) = est
        .timestamps
        .iter()
        .zip(&gt.timestamps)
        .find(|(a, b)| (*a - *b).abs() > 1e-6)
    {
        return Err(Error::InputInconsistency(format!("timestamps {a} and {b} do not match")));
    }
    ate_positions(&est.positions(), &gt.positions(), alignment)
}

/// ATE on bare position lists.
pub fn ate_positions(est: &[Vector3<f64>], gt: &[Vector3<f64>], alignment: Alignment) -> Result<f64> {
    let t = align(est, gt, alignment)?;
    let sq: f64 = est.iter().zip(gt).map(|(e, g)| (t.apply(e) - g).norm_squared()).sum();
    Ok((sq / est.len() as f64).sqrt())
}

/// ATE and VPQ of a predicted sequence against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub alignment: Alignment,
    pub ate_rmse: f64,
    /// One row per temporal window size.
    pub vpq: Vec<(usize, VpqScore)>,
    /// Seconds per stage; shown in the table only, so that the key-value
    /// form stays reproducible.
    pub runtime: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("alignment", self.alignment.name()).set("ate_rmse", self.ate_rmse);
        for (k, s) in &self.vpq {
            kv.set(&format!("vpq.k{k:02}"), s.vpq)
                .set(&format!("vpq_thing.k{k:02}"), s.vpq_thing)
                .set(&format!("vpq_stuff.k{k:02}"), s.vpq_stuff);
        }
        kv
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("ATE RMSE ({}): {:.6} m\n\n", self.alignment.name(), self.ate_rmse);
        s.push_str("   k     VPQ  VPQ_th  VPQ_st\n");
        for (k, v) in &self.vpq {
            s.push_str(&format!("{k:>4}  {:.4}  {:.4}  {:.4}\n", v.vpq, v.vpq_thing, v.vpq_stuff));
        }
        if !self.runtime.is_empty() {
            s.push_str("\nstage       seconds\n");
            for (stage, secs) in &self.runtime {
                s.push_str(&format!("{stage:<10} {secs:>8.3}\n"));
            }
        }
        s
    }
}

/// Scores `pred` against `gt` for every window size in `ks`.
pub fn evaluate(
    pred: (&Trajectory, &[PanopticMap]),
    gt: (&Trajectory, &[PanopticMap]),
    ks: &[usize],
    alignment: Alignment,
) -> Result<EvalReport> {
    if pred.1.len() != gt.1.len() {
        return Err(Error::LengthMismatch {
            left: pred.1.len(),
            right: gt.1.len(),
        });
    }
    let ate_rmse = ate_rmse(pred.0, gt.0, alignment)?;
    let vpq = ks
        .iter()
        .map(|&k| Ok((k, vpq(pred.1, gt.1, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        alignment,
        ate_rmse,
        vpq,
        runtime: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;
    use nalgebra::{Rotation3, UnitQuaternion};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(points: &[Vector3<f64>]) -> Trajectory {
        let poses = points
            .iter()
            .map(|c| SE3Pose::new(UnitQuaternion::identity(), *c).inverse())
            .collect();
        Trajectory::new((0..points.len()).map(|i| i as f64 * 0.1).collect(), poses).unwrap()
    }

    fn rms_after(p: &[f64; 7], est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
        let r = Rotation3::from_scaled_axis(Vector3::new(p[0], p[1], p[2]));
        let t = Vector3::new(p[3], p[4], p[5]);
        let sq: f64 = est.iter().zip(gt).map(|(e, g)| (p[6] * (r * e) + t - g).norm_squared()).sum();
        (sq / est.len() as f64).sqrt()
    }

    /// Coordinate pattern search with shrinking steps over rotation vector,
    /// translation and (optionally) scale.
    fn brute_force_ate(est: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> f64 {
        let mut p = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let mut best = rms_after(&p, est, gt);
        let mut step = 1.0;
        let dims = if with_scale { 7 } else { 6 };
        while step > 1e-10 {
            let mut improved = false;
            for d in 0..dims {
                for sign in [-1.0, 1.0] {
                    let mut q = p;
                    q[d] += sign * step;
                    let c = rms_after(&q, est, gt);
                    if c < best {
                        best = c;
                        p = q;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best
    }

    fn square() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ]
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let t = traj(&square());
        assert!(ate_rmse(&t, &t, Alignment::Rigid).unwrap() < 1e-12);
        assert!(ate_rmse(&t, &t, Alignment::Similarity).unwrap() < 1e-12);
    }

    #[test]
    fn displaced_point_matches_brute_force() {
        let gt = square();
        let mut est = gt.clone();
        est[2].z += 1.0;
        for (alignment, scale) in [(Alignment::Rigid, false), (Alignment::Similarity, true)] {
            let closed = ate_positions(&est, &gt, alignment).unwrap();
            let brute = brute_force_ate(&est, &gt, scale);
            assert!((closed - brute).abs() < 1e-6, "{alignment:?}: {closed} vs {brute}");
            assert!(closed > 0.1 && closed < 0.5);
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let line: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            ate_positions(&line, &line, Alignment::Similarity),
            Err(Error::DegenerateTrajectory(_))
        ));
        assert!(matches!(
            ate_positions(&square()[..2], &square()[..2], Alignment::Rigid),
            Err(Error::DegenerateTrajectory(_))
        ));
        assert!(matches!(
            ate_rmse(&traj(&square()), &traj(&square()[..3]), Alignment::Rigid),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(Trajectory::new(vec![0.0, 0.0], vec![SE3Pose::identity(); 2]).is_err());
    }

    #[test]
    fn similarity_recovers_scaled_copy() {
        let gt = square();
        let est: Vec<_> = gt.iter().map(|p| p * 0.25 + Vector3::new(3.0, -1.0, 2.0)).collect();
        assert!(ate_positions(&est, &gt, Alignment::Similarity).unwrap() < 1e-12);
        assert!(ate_positions(&est, &gt, Alignment::Rigid).unwrap() > 0.1);
    }

    proptest! {
        #[test]
        fn invariant_under_rigid_motion(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt: Vec<Vector3<f64>> = (0..8)
                .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                .collect();
            let est: Vec<Vector3<f64>> = gt
                .iter()
                .map(|p| p + Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)))
                .collect();
            let g = SE3Pose::exp(&Twist::new(
                Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)),
            ));
            let moved_gt: Vec<_> = gt.iter().map(|p| g.transform_point(p)).collect();
            let moved_est: Vec<_> = est.iter().map(|p| g.transform_point(p)).collect();
            for a in [Alignment::Rigid, Alignment::Similarity] {
                prop_assert!(ate_positions(&moved_gt, &gt, a).unwrap() < 1e-9);
                let before = ate_positions(&est, &gt, a).unwrap();
                let after = ate_positions(&moved_est, &moved_gt, a).unwrap();
                prop_assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn evaluating_ground_truth_is_perfect() {
        use crate::grid::Grid;
        use std::collections::BTreeSet;
        let t = traj(&square());
        let map = PanopticMap::new(
            Grid::from_fn(4, 2, |u, _| if u < 2 { 0 } else { 10 }),
            Grid::from_fn(4, 2, |u, _| if u < 2 { 0 } else { 3 }),
            BTreeSet::from([10]),
        )
        .unwrap();
        let video = vec![map; 4];
        let r = evaluate((&t, &video), (&t, &video), &[0, 1, 3], Alignment::Similarity).unwrap();
        assert!(r.ate_rmse < 1e-12);
        assert_eq!(r.vpq.len(), 3);
        assert!(r.vpq.iter().all(|(_, s)| s.vpq == 1.0 && s.vpq_thing == 1.0 && s.vpq_stuff == 1.0));
        let kv = r.to_key_values();
        assert_eq!(kv.get("vpq.k03"), Some("1"));
        assert!(r.to_table().contains("VPQ_th"));
        assert!(evaluate((&t, &video[..3]), (&t, &video), &[0], Alignment::Rigid).is_err());
    }
}
