//! Kernel temporal segmentation and shot-level score aggregation.
//!
//! Shots are found by minimizing total within-segment scatter of the
//! dot-product kernel Gram matrix with dynamic programming; the number of
//! change points is chosen by a logarithmic penalty. Datasets that ship their
//! own boundaries bypass this entirely.

use crate::error::{HsumError, Result};
use ndarray::Array2;

/// Segment start indices for one video: `change_points[k]` starts shot `k`,
/// which runs until the next change point (or the end of the video).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotBoundaries {
    change_points: Vec<usize>,
    n_frames: usize,
}

impl ShotBoundaries {
    /// Validate and wrap a change-point list: strictly increasing, starting
    /// at 0, all inside `[0, n_frames)`.
    pub fn new(change_points: Vec<usize>, n_frames: usize) -> Result<Self> {
        if n_frames == 0 {
            return Err(HsumError::Invariant("shot boundaries need at least one frame".into()));
        }
        if change_points.first() != Some(&0) {
            return Err(HsumError::Invariant(
                "first change point must be 0".into(),
            ));
        }
        if !change_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(HsumError::Invariant(
                "change points must be strictly increasing".into(),
            ));
        }
        if *change_points.last().unwrap() >= n_frames {
            return Err(HsumError::Invariant(format!(
                "last change point {} out of range for {} frames",
                change_points.last().unwrap(),
                n_frames
            )));
        }
        Ok(ShotBoundaries {
            change_points,
            n_frames,
        })
    }

    pub fn change_points(&self) -> &[usize] {
        &self.change_points
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_shots(&self) -> usize {
        self.change_points.len()
    }

    /// `(start, end)` half-open frame ranges, partitioning `[0, n_frames)`.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_shots());
        for (k, &start) in self.change_points.iter().enumerate() {
            let end = self
                .change_points
                .get(k + 1)
                .copied()
                .unwrap_or(self.n_frames);
            out.push((start, end));
        }
        out
    }

    /// Frame count of each shot.
    pub fn lengths(&self) -> Vec<usize> {
        self.segments().iter().map(|&(s, e)| e - s).collect()
    }
}

/// Within-segment scatter of every `[a, b)` via prefix sums of the Gram matrix.
struct ScatterTable {
    /// `prefix[i][j]` = sum of `K[a][b]` for `a < i`, `b < j`.
    prefix: Array2<f64>,
    /// `diag[i]` = sum of `K[a][a]` for `a < i`.
    diag: Vec<f64>,
}

impl ScatterTable {
    fn new(features: &Array2<f64>) -> Self {
        let n = features.nrows();
        let gram = features.dot(&features.t());
        let mut prefix = Array2::<f64>::zeros((n + 1, n + 1));
        for i in 0..n {
            for j in 0..n {
                prefix[[i + 1, j + 1]] =
                    gram[[i, j]] + prefix[[i, j + 1]] + prefix[[i + 1, j]] - prefix[[i, j]];
            }
        }
        let mut diag = vec![0.0; n + 1];
        for i in 0..n {
            diag[i + 1] = diag[i] + gram[[i, i]];
        }
        ScatterTable { prefix, diag }
    }

    /// Scatter of segment `[a, b)`: trace minus block-mean term.
    fn scatter(&self, a: usize, b: usize) -> f64 {
        debug_assert!(a < b);
        let block = self.prefix[[b, b]] - self.prefix[[a, b]] - self.prefix[[b, a]]
            + self.prefix[[a, a]];
        (self.diag[b] - self.diag[a]) - block / (b - a) as f64
    }
}

/// Minimum-scatter segmentations for every change-point count up to `max_m`.
///
/// Returns `(cost, boundaries)` per m where `cost[m]` is the optimal total
/// scatter with exactly `m` change points (besides the implicit start at 0).
fn kts_dp(table: &ScatterTable, n: usize, max_m: usize) -> Vec<(f64, Vec<usize>)> {
    // best[m][t] = minimal scatter of frames [0, t) split into m+1 segments.
    let mut best = vec![vec![f64::INFINITY; n + 1]; max_m + 1];
    let mut arg = vec![vec![0usize; n + 1]; max_m + 1];
    for t in 1..=n {
        best[0][t] = table.scatter(0, t);
    }
    for m in 1..=max_m {
        // Need at least m+1 frames for m+1 non-empty segments.
        for t in (m + 1)..=n {
            let mut b = f64::INFINITY;
            let mut ba = 0;
            for split in m..t {
                let c = best[m - 1][split] + table.scatter(split, t);
                if c < b {
                    b = c;
                    ba = split;
                }
            }
            best[m][t] = b;
            arg[m][t] = ba;
        }
    }

    let mut out = Vec::with_capacity(max_m + 1);
    for m in 0..=max_m {
        if !best[m][n].is_finite() {
            break;
        }
        let mut points = vec![0usize; m + 1];
        let mut t = n;
        for level in (1..=m).rev() {
            t = arg[level][t];
            points[level] = t;
        }
        out.push((best[m][n], points));
    }
    out
}

fn check_features(features: &Array2<f64>) -> Result<usize> {
    let n = features.nrows();
    if n == 0 {
        return Err(HsumError::Shape("cannot segment a video with no frames".into()));
    }
    Ok(n)
}

/// Segment with a fixed number of change points (exactly `m`, so `m + 1`
/// shots). Useful for diagnostics and as the inner step of [`kts_segment`].
pub fn kts_segment_fixed(features: &Array2<f64>, m: usize) -> Result<ShotBoundaries> {
    let n = check_features(features)?;
    if m >= n {
        return Err(HsumError::Config(format!(
            "{m} change points need more than {n} frames"
        )));
    }
    let table = ScatterTable::new(features);
    let solutions = kts_dp(&table, n, m);
    let (_, points) = solutions
        .into_iter()
        .nth(m)
        .expect("m < n guarantees a feasible segmentation");
    ShotBoundaries::new(points, n)
}

/// Kernel temporal segmentation with penalized model selection.
///
/// For each feasible change-point count `m <= max_change_points` the DP
/// computes the optimal scatter; the returned segmentation minimizes
/// `scatter + penalty * m * (ln(N / m) + 1)`, preferring fewer change points
/// on ties.
pub fn kts_segment(
    features: &Array2<f64>,
    max_change_points: usize,
    penalty: f64,
) -> Result<ShotBoundaries> {
    let n = check_features(features)?;
    if max_change_points >= n {
        return Err(HsumError::Config(format!(
            "max_change_points {max_change_points} must be below the frame count {n}"
        )));
    }
    if penalty < 0.0 {
        return Err(HsumError::Config("penalty must be non-negative".into()));
    }
    let table = ScatterTable::new(features);
    let solutions = kts_dp(&table, n, max_change_points);
    let mut best_m = 0;
    let mut best_cost = f64::INFINITY;
    for (m, (scatter, _)) in solutions.iter().enumerate() {
        let pen = if m == 0 {
            0.0
        } else {
            penalty * m as f64 * ((n as f64 / m as f64).ln() + 1.0)
        };
        let cost = scatter + pen;
        if cost < best_cost {
            best_cost = cost;
            best_m = m;
        }
    }
    ShotBoundaries::new(solutions[best_m].1.clone(), n)
}

/// Mean frame score within each shot.
pub fn frame_to_shot_scores(frame_scores: &[f64], shots: &ShotBoundaries) -> Result<Vec<f64>> {
    if frame_scores.len() != shots.n_frames() {
        return Err(HsumError::DimensionMismatch {
            what: "frame scores vs shot boundaries".into(),
            expected: shots.n_frames(),
            got: frame_scores.len(),
        });
    }
    Ok(shots
        .segments()
        .into_iter()
        .map(|(s, e)| frame_scores[s..e].iter().sum::<f64>() / (e - s) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, load_sample, SynthConfig};
    use ndarray::Array1;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block_features(blocks: &[(usize, &[f64])], d: usize) -> Array2<f64> {
        let n: usize = blocks.iter().map(|(len, _)| len).sum();
        let mut out = Array2::<f64>::zeros((n, d));
        let mut row = 0;
        for (len, v) in blocks {
            for _ in 0..*len {
                out.row_mut(row).assign(&Array1::from_vec(v.to_vec()));
                row += 1;
            }
        }
        out
    }

    /// Total scatter of an explicit change-point list, computed naively.
    fn naive_cost(features: &Array2<f64>, points: &[usize]) -> f64 {
        let n = features.nrows();
        let mut cost = 0.0;
        for (k, &start) in points.iter().enumerate() {
            let end = points.get(k + 1).copied().unwrap_or(n);
            let seg = features.slice(ndarray::s![start..end, ..]);
            let mean = seg.mean_axis(ndarray::Axis(0)).unwrap();
            for row in seg.rows() {
                let diff = &row - &mean;
                cost += diff.dot(&diff);
            }
        }
        cost
    }

    #[test]
    fn constant_features_yield_no_change_points() {
        let features = block_features(&[(12, &[0.3, -0.7, 1.1])], 3);
        let shots = kts_segment(&features, 4, 1.0).unwrap();
        assert_eq!(shots.change_points(), &[0]);
    }

    #[test]
    fn two_orthogonal_blocks_split_at_ten() {
        let features = block_features(&[(10, &[1.0, 0.0]), (10, &[0.0, 1.0])], 2);
        let shots = kts_segment(&features, 3, 1.0).unwrap();
        assert_eq!(shots.change_points(), &[0, 10]);

        // Exhaustive check: index 10 beats every other single-split position.
        let best = naive_cost(&features, &[0, 10]);
        for t in 1..20 {
            if t != 10 {
                assert!(naive_cost(&features, &[0, t]) > best + 1e-9);
            }
        }
    }

    #[test]
    fn planted_generator_steps_are_recovered() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = SynthConfig::new(5, 2);
        config.steps_per_video = 3;
        config.frames_per_step = 5;
        let manifest = synth_generate(&config, dir.path()).unwrap();
        for entry in &manifest.entries {
            let sample = load_sample(&manifest, &entry.video_id).unwrap();
            let features = sample.frame_features.mapv(f64::from);
            let shots = kts_segment(&features, 6, 1.0).unwrap();
            assert_eq!(shots.n_shots(), 3, "{}", entry.video_id);
            for (found, planted) in shots.change_points().iter().zip([0usize, 5, 10]) {
                assert!(
                    found.abs_diff(planted) <= 1,
                    "{}: boundary {found} vs planted {planted}",
                    entry.video_id
                );
            }
        }
    }

    #[test]
    fn dp_matches_brute_force_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n = rng.random_range(4..=12);
            let d = 3;
            let features =
                Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
            let table = ScatterTable::new(&features);
            for m in 0..=3.min(n - 1) {
                let dp = kts_dp(&table, n, m).into_iter().nth(m).unwrap();
                // Enumerate every placement of m change points in [1, n).
                let mut best = f64::INFINITY;
                let mut stack: Vec<Vec<usize>> = vec![vec![0]];
                while let Some(points) = stack.pop() {
                    if points.len() == m + 1 {
                        best = best.min(naive_cost(&features, &points));
                        continue;
                    }
                    let last = *points.last().unwrap();
                    for next in (last + 1)..n {
                        let mut np = points.clone();
                        np.push(next);
                        stack.push(np);
                    }
                }
                assert!(
                    (dp.0 - best).abs() < 1e-8,
                    "n={n} m={m}: dp {} vs brute {}",
                    dp.0,
                    best
                );
                assert!((naive_cost(&features, &dp.1) - dp.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fixed_split_positions_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut features = Array2::<f64>::zeros((18, 4));
        for (i, mut row) in features.rows_mut().into_iter().enumerate() {
            let base = (i / 6) as f64;
            for v in row.iter_mut() {
                *v = base + 0.05 * rng.random_range(-1.0..1.0);
            }
        }
        let shots = kts_segment_fixed(&features, 2).unwrap();
        let scaled = kts_segment_fixed(&(features * 7.5), 2).unwrap();
        assert_eq!(shots, scaled);
    }

    #[test]
    fn segments_partition_the_video() {
        let features = block_features(&[(6, &[1.0, 0.0]), (6, &[0.0, 1.0]), (6, &[-1.0, 0.0])], 2);
        let shots = kts_segment(&features, 5, 1.0).unwrap();
        let segs = shots.segments();
        assert_eq!(segs.first().unwrap().0, 0);
        assert_eq!(segs.last().unwrap().1, 18);
        for w in segs.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        assert!(segs.iter().all(|&(s, e)| s < e));
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(kts_segment(&empty, 0, 1.0).is_err());
        let one = Array2::<f64>::zeros((1, 3));
        assert!(kts_segment(&one, 1, 1.0).is_err());
        assert!(kts_segment(&one, 0, 1.0).is_ok());
    }

    #[test]
    fn boundary_validation() {
        assert!(ShotBoundaries::new(vec![0, 3, 7], 10).is_ok());
        assert!(ShotBoundaries::new(vec![1, 3], 10).is_err());
        assert!(ShotBoundaries::new(vec![0, 3, 3], 10).is_err());
        assert!(ShotBoundaries::new(vec![0, 10], 10).is_err());
        assert!(ShotBoundaries::new(vec![], 10).is_err());
    }

    #[test]
    fn shot_scores_are_segment_means() {
        let shots = ShotBoundaries::new(vec![0, 2], 4).unwrap();
        let scores = frame_to_shot_scores(&[1.0, 0.0, 0.0, 1.0], &shots).unwrap();
        assert_eq!(scores, vec![0.5, 0.5]);

        let single = ShotBoundaries::new(vec![0], 4).unwrap();
        assert_eq!(
            frame_to_shot_scores(&[1.0, 0.0, 0.0, 1.0], &single).unwrap(),
            vec![0.5]
        );
        assert_eq!(
            frame_to_shot_scores(&[0.25; 4], &shots).unwrap(),
            vec![0.25, 0.25]
        );
    }

    #[test]
    fn shot_scores_reject_length_mismatch() {
        let shots = ShotBoundaries::new(vec![0, 2], 4).unwrap();
        assert!(frame_to_shot_scores(&[1.0, 0.0], &shots).is_err());
    }
}
