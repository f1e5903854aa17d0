//! Distribution-level segmentation metrics: IoU, squared generalized energy
//! distance and Hungarian-matched IoU, in per-volume and per-slice forms.

use serde::{Deserialize, Serialize};

use crate::data::{Grid, Mask, ANNOTATIONS_PER_CASE};
use crate::error::{Error, Result};

/// `|a ∩ b| / |a ∪ b|`, with `IoU(∅, ∅) = 1`.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::shape(format!(
            "iou on different grids {:?} and {:?}",
            a.grid, b.grid
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.voxels.iter().zip(&b.voxels) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// `1 − IoU`.
pub fn iou_distance(a: &Mask, b: &Mask) -> Result<f64> {
    Ok(1.0 - iou(a, b)?)
}

/// Four ground-truth annotations and `N` predicted samples on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSetPair {
    pub gt: Vec<Mask>,
    pub pred: Vec<Mask>,
}

impl MaskSetPair {
    pub fn new(gt: Vec<Mask>, pred: Vec<Mask>) -> Result<Self> {
        if gt.len() != ANNOTATIONS_PER_CASE {
            return Err(Error::usage(format!(
                "ground truth must hold exactly {} annotations, got {}",
                ANNOTATIONS_PER_CASE,
                gt.len()
            )));
        }
        if pred.is_empty() {
            return Err(Error::usage("prediction set is empty"));
        }
        let grid = gt[0].grid;
        if let Some(m) = gt.iter().chain(&pred).find(|m| m.grid != grid) {
            return Err(Error::shape(format!(
                "mask grid {:?} differs from {:?}",
                m.grid, grid
            )));
        }
        Ok(MaskSetPair { gt, pred })
    }

    pub fn grid(&self) -> Grid {
        self.gt[0].grid
    }

    /// The pair restricted to axial slice `z`.
    pub fn axial_slice(&self, z: usize) -> MaskSetPair {
        MaskSetPair {
            gt: self.gt.iter().map(|m| m.axial_slice(z)).collect(),
            pred: self.pred.iter().map(|m| m.axial_slice(z)).collect(),
        }
    }
}

fn mean_distance(a: &[Mask], b: &[Mask]) -> Result<f64> {
    let mut acc = 0.0;
    for x in a {
        for y in b {
            acc += iou_distance(x, y)?;
        }
    }
    Ok(acc / (a.len() * b.len()) as f64)
}

/// `2·E[d(S,Y)] − E[d(S,S′)] − E[d(Y,Y′)]` with `d = 1 − IoU`, every
/// expectation taken over all ordered pairs including identical indices.
pub fn ged_squared(gt: &[Mask], pred: &[Mask]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::usage("ged_squared needs non-empty prediction and ground-truth sets"));
    }
    let cross = mean_distance(pred, gt)?;
    let within_pred = mean_distance(pred, pred)?;
    let within_gt = mean_distance(gt, gt)?;
    Ok(2.0 * cross - within_pred - within_gt)
}

/// A square assignment: `matching[row] = column`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub matching: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost perfect matching on a square cost matrix (Kuhn–Munkres with
/// row/column potentials). Among optimal matchings the lexicographically
/// smallest `matching` vector is returned.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<AssignmentResult> {
    let n = cost.len();
    if n == 0 {
        return Ok(AssignmentResult {
            matching: Vec::new(),
            total_cost: 0.0,
        });
    }
    if cost.iter().any(|row| row.len() != n) {
        return Err(Error::usage("hungarian_assign needs a square cost matrix"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::usage("hungarian_assign needs finite costs"));
    }

    // 1-indexed potentials; column 0 is a virtual source.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    // Optimal matchings are exactly the perfect matchings on zero-reduced-cost
    // edges; pick the lexicographically smallest one greedily.
    let scale = cost.iter().flatten().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * n as f64;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| cost[i][j] - u[i + 1] - v[j + 1] <= tol)
                .collect()
        })
        .collect();
    let mut matching = vec![usize::MAX; n];
    let mut col_taken = vec![false; n];
    for i in 0..n {
        let mut chosen = None;
        for j in 0..n {
            if !tight[i][j] || col_taken[j] {
                continue;
            }
            col_taken[j] = true;
            if perfect_matching_exists(&tight, i + 1, &col_taken) {
                chosen = Some(j);
                break;
            }
            col_taken[j] = false;
        }
        match chosen {
            Some(j) => matching[i] = j,
            None => {
                // Only reachable if rounding broke the tight graph; fall back
                // to the potentials' own matching.
                let mut m = vec![0; n];
                for j in 1..=n {
                    m[owner[j] - 1] = j - 1;
                }
                return Ok(AssignmentResult {
                    total_cost: m.iter().enumerate().map(|(r, &c)| cost[r][c]).sum(),
                    matching: m,
                });
            }
        }
    }
    let total_cost = matching.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    Ok(AssignmentResult {
        matching,
        total_cost,
    })
}

/// Whether rows `from..n` can be matched into the free columns using only
/// tight edges (augmenting paths).
fn perfect_matching_exists(tight: &[Vec<bool>], from: usize, col_taken: &[bool]) -> bool {
    let n = tight.len();
    let mut col_owner: Vec<Option<usize>> = vec![None; n];
    fn augment(
        r: usize,
        tight: &[Vec<bool>],
        col_taken: &[bool],
        col_owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for c in 0..tight.len() {
            if !tight[r][c] || col_taken[c] || seen[c] {
                continue;
            }
            seen[c] = true;
            let free = match col_owner[c] {
                None => true,
                Some(other) => augment(other, tight, col_taken, col_owner, seen),
            };
            if free {
                col_owner[c] = Some(r);
                return true;
            }
        }
        false
    }
    for r in from..n {
        let mut seen = vec![false; n];
        if !augment(r, tight, col_taken, &mut col_owner, &mut seen) {
            return false;
        }
    }
    true
}

/// Mean IoU under the optimal matching between the predictions and the
/// ground-truth set repeated `N/4` times.
pub fn hungarian_matched_iou(p: &MaskSetPair) -> Result<f64> {
    let n = p.pred.len();
    if n == 0 || n % ANNOTATIONS_PER_CASE != 0 {
        return Err(Error::usage(format!(
            "Hungarian-matched IoU duplicates the {} ground-truth annotations to the sample count, \
             so the number of samples must be a positive multiple of {}; got {}",
            ANNOTATIONS_PER_CASE, ANNOTATIONS_PER_CASE, n
        )));
    }
    let gt_iou: Vec<Vec<f64>> = p
        .pred
        .iter()
        .map(|s| p.gt.iter().map(|y| iou(s, y)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let cost: Vec<Vec<f64>> = gt_iou
        .iter()
        .map(|row| (0..n).map(|j| 1.0 - row[j % ANNOTATIONS_PER_CASE]).collect())
        .collect();
    let a = hungarian_assign(&cost)?;
    let matched: f64 = a
        .matching
        .iter()
        .enumerate()
        .map(|(r, &c)| gt_iou[r][c % ANNOTATIONS_PER_CASE])
        .sum();
    Ok(matched / n as f64)
}

/// Per-slice metrics averaged over axial slices that carry any content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceProtocol {
    /// `None` when every slice was skipped.
    pub ged: Option<f64>,
    pub iou: Option<f64>,
    pub used_slices: usize,
    pub skipped_slices: usize,
}

/// GED² and Hungarian IoU per axial slice, skipping slices where all
/// ground-truth annotations and all predictions are empty.
pub fn eval_2d_protocol(p: &MaskSetPair) -> Result<SliceProtocol> {
    let depth = p.grid()[0];
    let (mut ged, mut hiou, mut used, mut skipped) = (0.0, 0.0, 0usize, 0usize);
    for z in 0..depth {
        let s = p.axial_slice(z);
        if s.gt.iter().chain(&s.pred).all(Mask::is_empty) {
            skipped += 1;
            continue;
        }
        ged += ged_squared(&s.gt, &s.pred)?;
        hiou += hungarian_matched_iou(&s)?;
        used += 1;
    }
    let mean = |x: f64| (used > 0).then(|| x / used as f64);
    Ok(SliceProtocol {
        ged: mean(ged),
        iou: mean(hiou),
        used_slices: used,
        skipped_slices: skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub ged2d: Option<f64>,
    pub iou2d: Option<f64>,
    pub ged3d: f64,
    pub iou3d: f64,
    pub skipped_slices: usize,
}

pub fn eval_case(p: &MaskSetPair) -> Result<CaseMetrics> {
    let slices = eval_2d_protocol(p)?;
    Ok(CaseMetrics {
        ged2d: slices.ged,
        iou2d: slices.iou,
        ged3d: ged_squared(&p.gt, &p.pred)?,
        iou3d: hungarian_matched_iou(p)?,
        skipped_slices: slices.skipped_slices,
    })
}

/// Unweighted means over cases. 2D means skip cases without slice content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub ged2d: Option<f64>,
    pub iou2d: Option<f64>,
    pub ged3d: f64,
    pub iou3d: f64,
    pub n_cases: usize,
}

pub fn summarize(cases: &[CaseMetrics]) -> MetricSummary {
    let n = cases.len();
    let opt_mean = |f: fn(&CaseMetrics) -> Option<f64>| {
        let vals: Vec<f64> = cases.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mean = |f: fn(&CaseMetrics) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            cases.iter().map(f).sum::<f64>() / n as f64
        }
    };
    MetricSummary {
        ged2d: opt_mean(|c| c.ged2d),
        iou2d: opt_mean(|c| c.iou2d),
        ged3d: mean(|c| c.ged3d),
        iou3d: mean(|c| c.iou3d),
        n_cases: n,
    }
}

/// Index of the reference mask with the highest IoU to `m`, first on ties.
pub fn nearest_mode(m: &Mask, modes: &[Mask]) -> Result<usize> {
    if modes.is_empty() {
        return Err(Error::usage("nearest_mode needs at least one reference mask"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, r) in modes.iter().enumerate() {
        let v = iou(m, r)?;
        if v > best.1 {
            best = (i, v);
        }
    }
    Ok(best.0)
}

/// Whether every reference mode is the nearest mode of some prediction.
pub fn covers_all_modes(pred: &[Mask], modes: &[Mask]) -> Result<bool> {
    let mut hit = vec![false; modes.len()];
    for m in pred {
        hit[nearest_mode(m, modes)?] = true;
    }
    Ok(hit.iter().all(|&h| h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(bits: &[u8]) -> Mask {
        Mask::new([1, 1, bits.len()], bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn iou_basic_cases() {
        assert_eq!(iou(&m(&[1, 1, 0]), &m(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(iou(&m(&[1, 0, 0]), &m(&[0, 0, 1])).unwrap(), 0.0);
        assert_eq!(iou(&m(&[1, 1, 0]), &m(&[1, 0, 0])).unwrap(), 0.5);
        assert_eq!(iou(&m(&[0, 0]), &m(&[0, 0])).unwrap(), 1.0);
        assert_eq!(iou(&m(&[0, 0]), &m(&[0, 1])).unwrap(), 0.0);
        assert!(iou(&m(&[0, 0]), &m(&[0, 0, 0])).is_err());
    }

    #[test]
    fn ged_hand_example() {
        let (a, b) = (m(&[1, 0]), m(&[0, 1]));
        let gt = vec![a.clone(), b.clone(), a, b];
        let pred = vec![m(&[1, 1]), m(&[1, 1])];
        assert_eq!(ged_squared(&gt, &pred).unwrap(), 0.5);
    }

    #[test]
    fn ged_of_identical_distributions_is_zero() {
        let gt = vec![m(&[1, 0, 0]), m(&[1, 1, 0]), m(&[0, 0, 0]), m(&[1, 1, 1])];
        let mut pred = gt.clone();
        pred.extend(gt.iter().cloned());
        assert!(ged_squared(&gt, &pred).unwrap().abs() < 1e-15);
        let same = vec![m(&[0, 1, 1]); 4];
        assert_eq!(ged_squared(&same, &[m(&[0, 1, 1])]).unwrap(), 0.0);
    }

    #[test]
    fn ged_empty_prediction_rejected() {
        assert!(matches!(
            ged_squared(&[m(&[1])], &[]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn hungarian_small_cases() {
        let a = hungarian_assign(&[vec![3.5]]).unwrap();
        assert_eq!(a.matching, vec![0]);
        assert_eq!(a.total_cost, 3.5);
        let a = hungarian_assign(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(a.matching, vec![0, 1]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn hungarian_tie_break_is_lexicographic() {
        let a = hungarian_assign(&vec![vec![1.0; 3]; 3]).unwrap();
        assert_eq!(a.matching, vec![0, 1, 2]);
        let cost = vec![vec![0.0, 0.0, 5.0], vec![0.0, 0.0, 5.0], vec![5.0, 0.0, 0.0]];
        assert_eq!(hungarian_assign(&cost).unwrap().matching, vec![0, 1, 2]);
        let cost = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(hungarian_assign(&cost).unwrap().matching, vec![1, 0]);
    }

    #[test]
    fn hungarian_rejects_bad_input() {
        assert!(hungarian_assign(&[vec![1.0, 2.0]]).is_err());
        assert!(hungarian_assign(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn matched_iou_duplication() {
        let gt = vec![m(&[1, 0, 0, 0]), m(&[0, 1, 0, 0]), m(&[0, 0, 1, 0]), m(&[0, 0, 0, 1])];
        let mut pred: Vec<Mask> = gt.iter().rev().cloned().collect();
        pred.extend(gt.iter().cloned());
        let p = MaskSetPair::new(gt.clone(), pred).unwrap();
        assert_eq!(hungarian_matched_iou(&p).unwrap(), 1.0);

        let disjoint = MaskSetPair::new(
            gt.clone(),
            vec![m(&[0, 0, 0, 0]), m(&[0, 0, 0, 0]), m(&[0, 0, 0, 0]), m(&[0, 0, 0, 0])],
        )
        .unwrap();
        assert_eq!(hungarian_matched_iou(&disjoint).unwrap(), 0.0);

        let bad = MaskSetPair::new(gt, vec![m(&[1, 0, 0, 0]); 6]).unwrap();
        let err = hungarian_matched_iou(&bad).unwrap_err();
        assert!(err.to_string().contains("multiple of 4"));
    }

    #[test]
    fn slice_protocol_skips_empty_slices() {
        let grid = [10, 2, 2];
        let lesion = Mask::from_fn(grid, |z, y, _| (3..=5).contains(&z) && y == 0);
        let gt = vec![lesion.clone(), lesion.clone(), Mask::empty(grid), Mask::empty(grid)];
        let p = MaskSetPair::new(gt, vec![lesion.clone(); 4]).unwrap();
        let r = eval_2d_protocol(&p).unwrap();
        assert_eq!(r.used_slices, 3);
        assert_eq!(r.skipped_slices, 7);
    }

    #[test]
    fn slice_protocol_without_content() {
        let grid = [3, 2, 2];
        let p = MaskSetPair::new(vec![Mask::empty(grid); 4], vec![Mask::empty(grid); 4]).unwrap();
        let r = eval_2d_protocol(&p).unwrap();
        assert_eq!((r.ged, r.iou), (None, None));
    }

    #[test]
    fn single_slice_equals_volume_metrics() {
        let grid = [1, 2, 3];
        let gt = vec![
            Mask::from_fn(grid, |_, y, x| y == 0 && x < 2),
            Mask::from_fn(grid, |_, _, x| x == 0),
            Mask::empty(grid),
            Mask::from_fn(grid, |_, y, _| y == 1),
        ];
        let pred = vec![
            Mask::from_fn(grid, |_, y, _| y == 0),
            Mask::from_fn(grid, |_, _, x| x == 2),
            Mask::empty(grid),
            Mask::from_fn(grid, |_, _, x| x < 2),
        ];
        let c = eval_case(&MaskSetPair::new(gt, pred).unwrap()).unwrap();
        assert_eq!(c.ged2d, Some(c.ged3d));
        assert_eq!(c.iou2d, Some(c.iou3d));
    }

    #[test]
    fn identical_distributions_give_perfect_record() {
        let grid = [2, 2, 2];
        let gt = vec![
            Mask::from_fn(grid, |z, _, _| z == 0),
            Mask::from_fn(grid, |_, y, _| y == 0),
            Mask::from_fn(grid, |_, _, x| x == 0),
            Mask::from_fn(grid, |z, y, x| z + y + x == 0),
        ];
        let c = eval_case(&MaskSetPair::new(gt.clone(), gt).unwrap()).unwrap();
        assert!(c.ged3d.abs() < 1e-15);
        assert_eq!(c.iou3d, 1.0);
        assert!(c.ged2d.unwrap().abs() < 1e-15);
        assert_eq!(c.iou2d, Some(1.0));
    }

    #[test]
    fn summary_is_unweighted_mean() {
        let rec = |g: f64, i: f64| CaseMetrics {
            ged2d: None,
            iou2d: None,
            ged3d: g,
            iou3d: i,
            skipped_slices: 0,
        };
        let s = summarize(&[rec(0.2, 0.5), rec(0.4, 0.7)]);
        assert!((s.ged3d - 0.3).abs() < 1e-15);
        assert!((s.iou3d - 0.6).abs() < 1e-15);
        assert_eq!(s.ged2d, None);
    }

    proptest::proptest! {
        #[test]
        fn iou_is_symmetric(a in proptest::collection::vec(0u8..2, 12), b in proptest::collection::vec(0u8..2, 12)) {
            let (ma, mb) = (m(&a), m(&b));
            proptest::prop_assert_eq!(iou(&ma, &mb).unwrap(), iou(&mb, &ma).unwrap());
            proptest::prop_assert_eq!(iou_distance(&ma, &ma).unwrap(), 0.0);
        }
    }

    #[test]
    fn mode_membership() {
        let grid = [1, 1, 6];
        let tight = Mask::from_fn(grid, |_, _, x| x == 2 || x == 3);
        let wide = Mask::from_fn(grid, |_, _, x| (1..5).contains(&x));
        let modes = [tight.clone(), wide.clone()];
        assert_eq!(nearest_mode(&tight, &modes).unwrap(), 0);
        assert_eq!(nearest_mode(&wide, &modes).unwrap(), 1);
        // empty prediction has IoU 0 with both; first wins
        assert_eq!(nearest_mode(&Mask::empty(grid), &modes).unwrap(), 0);
        assert!(!covers_all_modes(&[tight.clone(), tight.clone()], &modes).unwrap());
        assert!(covers_all_modes(&[wide, tight], &modes).unwrap());
    }

}
