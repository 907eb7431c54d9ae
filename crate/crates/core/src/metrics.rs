//! Detection metrics: precision/recall accumulation, interpolated average
//! precision over a fixed recall schedule, and the nuScenes detection score.

use crate::error::{Error, Result};
use crate::geom::{bev_iou_unchecked, score_order};
use crate::scene::Box3D;

/// Slack for comparing achieved recalls against schedule levels such as
/// `0.1 * 3 = 0.30000000000000004`.
pub const RECALL_EPS: f64 = 1e-12;

/// Center-distance thresholds of the nuScenes protocol, meters.
pub const NUSCENES_DISTANCES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// When a detection may claim a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Matcher {
    /// Rotated BEV IoU at least the threshold; the highest IoU wins.
    BevIou(f64),
    /// BEV center distance at most the threshold; the closest wins.
    CenterDistance(f64),
}

impl Matcher {
    /// Affinity of a pair that passes the matcher (larger is better).
    fn affinity(&self, det: &Box3D, gt: &Box3D) -> Option<f64> {
        match *self {
            Matcher::BevIou(t) => {
                let iou = bev_iou_unchecked(det, gt);
                (iou >= t && iou > 0.0).then_some(iou)
            }
            Matcher::CenterDistance(d) => {
                let dist = (det.center[0] - gt.center[0]).hypot(det.center[1] - gt.center[1]);
                (dist <= d).then_some(-dist)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// `(score, true positive)` per detection in score order, ties by index.
fn match_scene(dets: &[Box3D], gts: &[Box3D], matcher: Matcher) -> Vec<(f64, bool)> {
    let mut taken = vec![false; gts.len()];
    score_order(dets)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                if let Some(a) = matcher.affinity(d, gt) {
                    if best.is_none_or(|(_, b)| a > b) {
                        best = Some((g, a));
                    }
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (d.score.unwrap_or(0.0), best.is_some())
        })
        .collect()
}

fn accumulate(flags: impl Iterator<Item = bool>, n_gt: usize) -> Vec<PrPoint> {
    let (mut tp, mut seen) = (0usize, 0usize);
    flags
        .map(|hit| {
            seen += 1;
            tp += usize::from(hit);
            PrPoint {
                precision: tp as f64 / seen as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            }
        })
        .collect()
}

/// One PR point after each detection, in descending score order. Each gt is
/// matched at most once; with no gts every recall is 0. Missing scores count as 0.
pub fn precision_recall(dets: &[Box3D], gts: &[Box3D], matcher: Matcher) -> Vec<PrPoint> {
    accumulate(match_scene(dets, gts, matcher).into_iter().map(|(_, hit)| hit), gts.len())
}

/// Pools several scenes: each scene is matched independently, then all
/// detections are merged in global score order (ties by scene, then index).
pub fn precision_recall_scenes(scenes: &[(Vec<Box3D>, Vec<Box3D>)], matcher: Matcher) -> Vec<PrPoint> {
    let mut flags: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (s, (dets, gts)) in scenes.iter().enumerate() {
        flags.extend(
            match_scene(dets, gts, matcher)
                .into_iter()
                .enumerate()
                .map(|(rank, (score, hit))| (score, s, rank, hit)),
        );
    }
    flags.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let n_gt = scenes.iter().map(|(_, g)| g.len()).sum();
    accumulate(flags.into_iter().map(|f| f.3), n_gt)
}

/// Evenly spaced recall levels `q0, q0 + (q1 - q0) / (n - 1), ..., q1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallSchedule {
    n: usize,
    q0: f64,
    q1: f64,
}

impl RecallSchedule {
    pub const S11: RecallSchedule = RecallSchedule { n: 11, q0: 0.0, q1: 1.0 };
    pub const S40: RecallSchedule = RecallSchedule {
        n: 40,
        q0: 1.0 / 40.0,
        q1: 1.0,
    };

    pub fn new(n: usize, q0: f64, q1: f64) -> Result<Self> {
        if n < 2 || !(q0 < q1) || !(0.0..=1.0).contains(&q0) || !(0.0..=1.0).contains(&q1) {
            return Err(Error::Config(format!("invalid recall schedule n={n}, q0={q0}, q1={q1}")));
        }
        Ok(Self { n, q0, q1 })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn levels(&self) -> Vec<f64> {
        let step = (self.q1 - self.q0) / (self.n - 1) as f64;
        (0..self.n).map(|i| self.q0 + i as f64 * step).collect()
    }
}

/// Interpolated precision at recall level `r`: the best precision at any
/// achieved recall `>= r`, or 0 when `r` is never reached.
pub fn interpolated_precision(curve: &[PrPoint], r: f64) -> f64 {
    curve
        .iter()
        .filter(|p| p.recall + RECALL_EPS >= r)
        .map(|p| p.precision)
        .fold(0.0, f64::max)
}

/// Mean interpolated precision over the schedule's recall levels.
pub fn interpolated_ap(curve: &[PrPoint], schedule: &RecallSchedule) -> f64 {
    // Suffix maxima over the curve sorted by recall give every level in one pass.
    let mut pts: Vec<PrPoint> = curve.to_vec();
    pts.sort_by(|a, b| a.recall.total_cmp(&b.recall));
    let mut suffix = vec![0.0f64; pts.len() + 1];
    for i in (0..pts.len()).rev() {
        suffix[i] = suffix[i + 1].max(pts[i].precision);
    }
    let total: f64 = schedule
        .levels()
        .into_iter()
        .map(|r| {
            let first = pts.partition_point(|p| p.recall + RECALL_EPS < r);
            suffix[first]
        })
        .sum();
    total / schedule.len() as f64
}

/// Inputs of the nuScenes detection score.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBundle {
    pub map: f64,
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl ErrorBundle {
    pub fn errors(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// `(5 mAP + sum(1 - min(1, err))) / 10`.
pub fn nds(bundle: &ErrorBundle) -> Result<f64> {
    if !(0.0..=1.0).contains(&bundle.map) {
        return Err(Error::Range(format!("mAP {} outside [0, 1]", bundle.map)));
    }
    let errs = bundle.errors();
    if errs.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::Range(format!("true-positive errors must be finite and >= 0, got {errs:?}")));
    }
    let tp: f64 = errs.iter().map(|e| 1.0 - e.min(1.0)).sum();
    Ok((5.0 * bundle.map + tp) / 10.0)
}

/// Mean of the S40 interpolated AP over center-distance matchers.
pub fn mean_ap_distance(dets: &[Box3D], gts: &[Box3D], distances: &[f64]) -> f64 {
    if distances.is_empty() {
        return 0.0;
    }
    let total: f64 = distances
        .iter()
        .map(|&d| interpolated_ap(&precision_recall(dets, gts, Matcher::CenterDistance(d)), &RecallSchedule::S40))
        .sum();
    total / distances.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn car(x: f64, y: f64) -> Box3D {
        Box3D::new([x, y, -1.0], [3.9, 1.6, 1.56], 0.0).unwrap()
    }

    #[test]
    fn schedules() {
        let s11 = RecallSchedule::S11.levels();
        assert_eq!(s11.len(), 11);
        assert_eq!((s11[0], s11[10]), (0.0, 1.0));
        let s40 = RecallSchedule::S40.levels();
        assert_eq!(s40.len(), 40);
        assert_eq!(s40[0], 0.025);
        assert!((s40[39] - 1.0).abs() < 1e-15);
        assert!(RecallSchedule::new(1, 0.0, 1.0).is_err());
        assert!(RecallSchedule::new(5, 0.5, 0.5).is_err());
    }

    #[test]
    fn perfect_detector() {
        let gts = vec![car(0.0, 0.0), car(10.0, 0.0), car(20.0, 5.0)];
        let dets: Vec<Box3D> = gts.iter().enumerate().map(|(i, b)| b.with_score(0.9 - 0.1 * i as f64)).collect();
        let pr = precision_recall(&dets, &gts, Matcher::BevIou(0.7));
        let last = pr.last().unwrap();
        assert_eq!((last.precision, last.recall), (1.0, 1.0));
        assert_eq!(interpolated_ap(&pr, &RecallSchedule::S11), 1.0);
        assert_eq!(interpolated_ap(&pr, &RecallSchedule::S40), 1.0);
        assert_eq!(mean_ap_distance(&dets, &gts, &NUSCENES_DISTANCES), 1.0);
    }

    #[test]
    fn no_detections() {
        let pr = precision_recall(&[], &[car(0.0, 0.0)], Matcher::BevIou(0.7));
        assert!(pr.is_empty());
        assert_eq!(interpolated_ap(&pr, &RecallSchedule::S11), 0.0);
    }

    #[test]
    fn half_recall_s11() {
        let gts = vec![car(0.0, 0.0), car(10.0, 0.0)];
        let pr = precision_recall(&[car(0.0, 0.0).with_score(1.0)], &gts, Matcher::BevIou(0.7));
        assert_eq!(pr, vec![PrPoint { precision: 1.0, recall: 0.5 }]);
        assert!((interpolated_ap(&pr, &RecallSchedule::S11) - 6.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn far_detections_score_zero() {
        let gts = vec![car(0.0, 0.0)];
        let dets = vec![car(5.0, 0.0).with_score(1.0), car(0.0, 6.0).with_score(0.5)];
        assert_eq!(mean_ap_distance(&dets, &gts, &NUSCENES_DISTANCES), 0.0);
    }

    #[test]
    fn duplicates_do_not_add_recall() {
        let gts = vec![car(0.0, 0.0)];
        let dets = vec![car(0.0, 0.0).with_score(0.9), car(0.0, 0.0).with_score(0.8)];
        let pr = precision_recall(&dets, &gts, Matcher::BevIou(0.7));
        assert_eq!(pr[1].recall, pr[0].recall);
        assert!(pr[1].precision < pr[0].precision);
    }

    #[test]
    fn greedy_takes_best_unmatched() {
        // The top detection overlaps both gts; it takes the better one and the
        // second detection can still claim the other.
        let gts = vec![car(0.0, 0.0), car(0.3, 0.0)];
        let dets = vec![car(0.25, 0.0).with_score(0.9), car(0.0, 0.0).with_score(0.5)];
        let pr = precision_recall(&dets, &gts, Matcher::BevIou(0.9));
        assert_eq!(pr[1].recall, 1.0);
    }

    #[test]
    fn nds_values() {
        let perfect = ErrorBundle {
            map: 1.0,
            ate: 0.0,
            ase: 0.0,
            aoe: 0.0,
            ave: 0.0,
            aae: 0.0,
        };
        assert_eq!(nds(&perfect).unwrap(), 1.0);
        let table = ErrorBundle {
            map: 0.4765,
            ate: 0.30,
            ase: 0.27,
            aoe: 0.34,
            ave: 0.41,
            aae: 0.18,
        };
        assert!((nds(&table).unwrap() - 0.58825).abs() < 1e-12);
        let clamped = ErrorBundle { aoe: 1.7, ..perfect };
        assert_eq!(nds(&clamped).unwrap(), 0.9);
        assert!(nds(&ErrorBundle { ate: -0.1, ..perfect }).is_err());
    }

    #[test]
    fn scene_pooling_matches_single_scene() {
        let gts = vec![car(0.0, 0.0), car(10.0, 0.0)];
        let dets = vec![car(0.0, 0.0).with_score(0.4), car(10.0, 0.2).with_score(0.8)];
        let single = precision_recall(&dets, &gts, Matcher::BevIou(0.5));
        let pooled = precision_recall_scenes(&[(dets, gts), (vec![], vec![])], Matcher::BevIou(0.5));
        assert_eq!(single, pooled);
    }

    proptest! {
        #[test]
        fn envelope_is_non_increasing(raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..30)) {
            let curve: Vec<PrPoint> = raw.iter().map(|&(p, r)| PrPoint { precision: p, recall: r }).collect();
            let levels = RecallSchedule::S40.levels();
            let env: Vec<f64> = levels.iter().map(|&r| interpolated_precision(&curve, r)).collect();
            prop_assert!(env.windows(2).all(|w| w[0] >= w[1]));
            let mean = env.iter().sum::<f64>() / env.len() as f64;
            prop_assert_eq!(mean, interpolated_ap(&curve, &RecallSchedule::S40));
        }

        #[test]
        fn ap_ignores_monotone_score_rescaling(
            scores in proptest::collection::vec(0.01f64..1.0, 1..12),
            offsets in proptest::collection::vec(-1.0f64..1.0, 12),
        ) {
            let gts: Vec<Box3D> = (0..4).map(|i| car(10.0 * i as f64, 0.0)).collect();
            let dets: Vec<Box3D> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| car(10.0 * (i % 5) as f64 + offsets[i], 0.0).with_score(s))
                .collect();
            let rescaled: Vec<Box3D> = dets.iter().map(|d| d.with_score(d.score.unwrap().powi(3) * 0.5)).collect();
            for m in [Matcher::BevIou(0.5), Matcher::CenterDistance(0.5)] {
                let a = interpolated_ap(&precision_recall(&dets, &gts, m), &RecallSchedule::S11);
                let b = interpolated_ap(&precision_recall(&rescaled, &gts, m), &RecallSchedule::S11);
                prop_assert_eq!(a, b);
            }
        }
    }
}
