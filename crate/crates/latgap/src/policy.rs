//! Observation normalization and the nearest-neighbour action policy.
//!
//! Observations are flattened to [pose9d, wrench, visual], normalized per
//! dimension to [-1, 1] with empirical quantiles, then rescaled per modality
//! by sqrt(1/d_m) so each modality contributes comparably to Euclidean
//! distance regardless of its dimension. Actions are relative: element-wise
//! differences of future 9D poses against the pose at the query tick, with
//! the demo's final pose repeated past its end. Inference averages the
//! action chunks of the k nearest training ticks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{gram_schmidt_6d, GeometryError, Pose9D};
use crate::sensing::{Observation, POSE_DIM, WRENCH_DIM};
use crate::timebase::Timestamp;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no training data")]
    EmptyDataset,
    #[error("requested k={k} neighbours but only {available} training ticks exist")]
    NotEnoughNeighbours { k: usize, available: usize },
    #[error("observation dimension {got} does not match dataset dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("vectors must all have dimension {expected}, got {got}")]
    RaggedInput { expected: usize, got: usize },
    #[error("demo {0} is empty")]
    EmptyDemo(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Per-dimension quantile normalization fitted on training vectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalizerParams {
    pub q_lower: Vec<f64>,
    pub q_upper: Vec<f64>,
    pub levels: (f64, f64),
}

/// Linear interpolation of order statistics: h = q * (n - 1), interpolate
/// between the surrounding sorted samples.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

impl NormalizerParams {
    /// Fits lower/upper quantiles independently per dimension.
    pub fn fit(vectors: &[Vec<f64>], levels: (f64, f64)) -> Result<Self, PolicyError> {
        let first = vectors.first().ok_or(PolicyError::EmptyDataset)?;
        let dim = first.len();
        for v in vectors {
            if v.len() != dim {
                return Err(PolicyError::RaggedInput {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        let mut q_lower = Vec::with_capacity(dim);
        let mut q_upper = Vec::with_capacity(dim);
        let mut column = vec![0.0; vectors.len()];
        for d in 0..dim {
            for (i, v) in vectors.iter().enumerate() {
                column[i] = v[d];
            }
            column.sort_by(|a, b| a.total_cmp(b));
            q_lower.push(quantile_sorted(&column, levels.0));
            q_upper.push(quantile_sorted(&column, levels.1));
        }
        Ok(NormalizerParams {
            q_lower,
            q_upper,
            levels,
        })
    }

    pub fn dim(&self) -> usize {
        self.q_lower.len()
    }

    /// Maps x to 2 (x - q_l) / (q_u - q_l) - 1; a degenerate dimension
    /// (equal quantiles) maps to 0.
    pub fn normalize_dim(&self, d: usize, x: f64) -> f64 {
        let span = self.q_upper[d] - self.q_lower[d];
        if span == 0.0 {
            0.0
        } else {
            2.0 * (x - self.q_lower[d]) / span - 1.0
        }
    }

    /// Inverse map; a degenerate dimension returns its lower quantile.
    pub fn denormalize_dim(&self, d: usize, x: f64) -> f64 {
        let span = self.q_upper[d] - self.q_lower[d];
        if span == 0.0 {
            self.q_lower[d]
        } else {
            self.q_lower[d] + (x + 1.0) * span / 2.0
        }
    }

    pub fn normalize_vec(&self, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
        if x.len() != self.dim() {
            return Err(PolicyError::DimMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .enumerate()
            .map(|(d, &v)| self.normalize_dim(d, v))
            .collect())
    }
}

/// Per-dimension weights sqrt(1/d_m) for the pose, wrench, and visual
/// blocks of a flattened observation of the given total length.
pub fn modality_scales(total_dim: usize) -> Vec<f64> {
    assert!(total_dim >= POSE_DIM + WRENCH_DIM);
    let visual_dim = total_dim - POSE_DIM - WRENCH_DIM;
    let mut w = Vec::with_capacity(total_dim);
    w.extend(std::iter::repeat((1.0 / POSE_DIM as f64).sqrt()).take(POSE_DIM));
    w.extend(std::iter::repeat((1.0 / WRENCH_DIM as f64).sqrt()).take(WRENCH_DIM));
    if visual_dim > 0 {
        w.extend(std::iter::repeat((1.0 / visual_dim as f64).sqrt()).take(visual_dim));
    }
    w
}

/// A chunk of relative targets predicted from one observation: entry i is
/// the 9D offset of the pose i+1 ticks ahead, relative to `base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub tau_obs: Timestamp,
    pub base: [f64; 9],
    pub relative: Vec<[f64; 9]>,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.relative.len()
    }

    /// Absolute target for entry i: base + offset, with the rotation
    /// columns re-orthonormalized.
    pub fn target_pose(&self, i: usize) -> Result<Pose9D, GeometryError> {
        decode_relative(&self.base, &self.relative[i])
    }
}

/// Applies a relative 9D action to a base pose and re-projects the rotation
/// columns onto the manifold.
pub fn decode_relative(base: &[f64; 9], rel: &[f64; 9]) -> Result<Pose9D, GeometryError> {
    let mut raw = [0.0; 9];
    for i in 0..9 {
        raw[i] = base[i] + rel[i];
    }
    let mut p = Pose9D::from_array(&raw);
    let r = gram_schmidt_6d(&p.rot6d)?;
    let (c0, c1) = (r.column(0), r.column(1));
    p.rot6d = [c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]];
    Ok(p)
}

/// Relative action chunks for every tick of one demo: chunk entry j is
/// pose[min(i+j+1, n-1)] - pose[i] element-wise in 9D, so demos shorter
/// than the horizon pad by repeating their final pose.
pub fn compute_actions(demo: &[Observation], horizon: usize) -> Vec<Vec<[f64; 9]>> {
    let n = demo.len();
    (0..n)
        .map(|i| {
            (1..=horizon)
                .map(|j| {
                    let src = &demo[(i + j).min(n - 1)].pose9d;
                    let mut rel = [0.0; 9];
                    for d in 0..9 {
                        rel[d] = src[d] - demo[i].pose9d[d];
                    }
                    rel
                })
                .collect()
        })
        .collect()
}

/// Training set: scaled-normalized observation vectors with their action
/// chunks, indexed by (demo, tick).
pub struct DemoDataset {
    normalizer: NormalizerParams,
    scales: Vec<f64>,
    keys: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
    chunks: Vec<Vec<[f64; 9]>>,
    horizon: usize,
}

impl DemoDataset {
    /// Builds the dataset from processed demos: fits the normalizer on all
    /// observation vectors, then stores each tick's scaled-normalized
    /// features and relative action chunk.
    pub fn build(
        demos: &[Vec<Observation>],
        horizon: usize,
        levels: (f64, f64),
    ) -> Result<Self, PolicyError> {
        if demos.is_empty() {
            return Err(PolicyError::EmptyDataset);
        }
        for (i, d) in demos.iter().enumerate() {
            if d.is_empty() {
                return Err(PolicyError::EmptyDemo(i));
            }
        }
        let raw: Vec<Vec<f64>> = demos
            .iter()
            .flat_map(|d| d.iter().map(|o| o.to_vector()))
            .collect();
        let normalizer = NormalizerParams::fit(&raw, levels)?;
        let scales = modality_scales(normalizer.dim());

        let mut keys = Vec::new();
        let mut features = Vec::new();
        let mut chunks = Vec::new();
        for (di, demo) in demos.iter().enumerate() {
            let actions = compute_actions(demo, horizon);
            for (ti, obs) in demo.iter().enumerate() {
                keys.push((di, ti));
                features.push(scale_normalized(&normalizer, &scales, &obs.to_vector())?);
                chunks.push(actions[ti].clone());
            }
        }
        Ok(DemoDataset {
            normalizer,
            scales,
            keys,
            features,
            chunks,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.normalizer.dim()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn normalizer(&self) -> &NormalizerParams {
        &self.normalizer
    }

    /// The k nearest training ticks by Euclidean distance in the scaled
    /// normalized space, as (demo, tick), with deterministic tie-breaking
    /// by (distance, demo, tick).
    pub fn nearest_indices(
        &self,
        obs: &Observation,
        k: usize,
    ) -> Result<Vec<(usize, usize)>, PolicyError> {
        Ok(self.nearest(obs, k)?.iter().map(|&i| self.keys[i]).collect())
    }

    fn nearest(&self, obs: &Observation, k: usize) -> Result<Vec<usize>, PolicyError> {
        if k == 0 || k > self.len() {
            return Err(PolicyError::NotEnoughNeighbours {
                k,
                available: self.len(),
            });
        }
        let q = scale_normalized(&self.normalizer, &self.scales, &obs.to_vector())?;
        let mut order: Vec<(f64, usize)> = self
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let d2: f64 = f.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| {
            self.keys[a.1].cmp(&self.keys[b.1])
        }));
        Ok(order[..k].iter().map(|&(_, i)| i).collect())
    }

    /// Averages the action chunks of the k nearest training ticks.
    pub fn knn_chunk(&self, obs: &Observation, k: usize) -> Result<Vec<[f64; 9]>, PolicyError> {
        let idx = self.nearest(obs, k)?;
        let mut mean = vec![[0.0; 9]; self.horizon];
        for &i in &idx {
            for (j, rel) in self.chunks[i].iter().enumerate() {
                for d in 0..9 {
                    mean[j][d] += rel[d];
                }
            }
        }
        let inv = 1.0 / k as f64;
        for rel in &mut mean {
            for d in 0..9 {
                rel[d] *= inv;
            }
        }
        Ok(mean)
    }
}

fn scale_normalized(
    normalizer: &NormalizerParams,
    scales: &[f64],
    x: &[f64],
) -> Result<Vec<f64>, PolicyError> {
    let mut v = normalizer.normalize_vec(x)?;
    for (val, w) in v.iter_mut().zip(scales) {
        *val *= w;
    }
    Ok(v)
}

/// Nearest-neighbour policy: averages the action chunks of the k training
/// ticks closest to the query observation.
pub struct KnnPolicy {
    pub dataset: DemoDataset,
    pub k: usize,
}

impl KnnPolicy {
    pub fn new(dataset: DemoDataset, k: usize) -> Self {
        KnnPolicy { dataset, k }
    }

    pub fn horizon(&self) -> usize {
        self.dataset.horizon()
    }

    /// Predicts a relative action chunk anchored at the query's pose and
    /// capture time.
    pub fn infer(&self, obs: &Observation) -> Result<ActionChunk, PolicyError> {
        let relative = self.dataset.knn_chunk(obs, self.k)?;
        Ok(ActionChunk {
            tau_obs: obs.tau_obs,
            base: obs.pose9d,
            relative,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_from_9d, pose_to_9d, so3_exp, Pose};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn ts(s: f64) -> Timestamp {
        Timestamp::from_secs(s)
    }

    // --- quantiles and normalization ---------------------------------------

    #[test]
    fn quantiles_match_hand_computed_values() {
        // 0..=100: the 1% and 99% quantiles with linear interpolation of
        // order statistics land exactly on 1 and 99.
        let vectors: Vec<Vec<f64>> = (0..=100).map(|k| vec![k as f64]).collect();
        let p = NormalizerParams::fit(&vectors, (0.01, 0.99)).unwrap();
        assert_relative_eq!(p.q_lower[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.q_upper[0], 99.0, epsilon = 1e-12);

        // Median of {1, 2, 3, 4} interpolates to 2.5.
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(quantile_sorted(&sorted, 0.5), 2.5, epsilon = 1e-12);
        assert_eq!(quantile_sorted(&sorted, 0.0), 1.0);
        assert_eq!(quantile_sorted(&sorted, 1.0), 4.0);
    }

    #[test]
    fn normalization_round_trips() {
        let mut rng = StdRng::seed_from_u64(41);
        let vectors: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..4).map(|_| rng.gen_range(-3.0..7.0)).collect())
            .collect();
        let p = NormalizerParams::fit(&vectors, (0.01, 0.99)).unwrap();
        for _ in 0..100_000 {
            let d = rng.gen_range(0..4);
            let x = rng.gen_range(-10.0..10.0);
            let back = p.denormalize_dim(d, p.normalize_dim(d, x));
            assert!((back - x).abs() < 1e-12, "round trip error {}", (back - x).abs());
        }
    }

    #[test]
    fn quantile_bounds_map_to_unit_interval_edges() {
        let vectors: Vec<Vec<f64>> = (0..=100).map(|k| vec![k as f64]).collect();
        let p = NormalizerParams::fit(&vectors, (0.01, 0.99)).unwrap();
        assert_relative_eq!(p.normalize_dim(0, 1.0), -1.0, epsilon = 1e-12);
        assert_relative_eq!(p.normalize_dim(0, 99.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.normalize_dim(0, 50.0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_dimension_maps_to_zero_and_back_to_lower_quantile() {
        let vectors: Vec<Vec<f64>> = (0..50).map(|_| vec![4.2]).collect();
        let p = NormalizerParams::fit(&vectors, (0.01, 0.99)).unwrap();
        assert_eq!(p.normalize_dim(0, 123.0), 0.0);
        assert_eq!(p.denormalize_dim(0, 0.7), 4.2);
    }

    #[test]
    fn ragged_input_is_rejected() {
        let vectors = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(matches!(
            NormalizerParams::fit(&vectors, (0.01, 0.99)),
            Err(PolicyError::RaggedInput { .. })
        ));
    }

    #[test]
    fn modality_scales_weight_each_block_equally() {
        let w = modality_scales(615);
        assert_relative_eq!(w[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(w[9], 1.0 / 6.0_f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(w[15], 1.0 / 600.0_f64.sqrt(), epsilon = 1e-15);
        assert_eq!(w.len(), 615);
        // A unit deviation spread across a whole block contributes the same
        // squared distance regardless of the block's dimension.
        let pose_contrib: f64 = w[..9].iter().map(|v| v * v).sum();
        let wrench_contrib: f64 = w[9..15].iter().map(|v| v * v).sum();
        let visual_contrib: f64 = w[15..].iter().map(|v| v * v).sum();
        assert_relative_eq!(pose_contrib, 1.0, epsilon = 1e-12);
        assert_relative_eq!(wrench_contrib, 1.0, epsilon = 1e-12);
        assert_relative_eq!(visual_contrib, 1.0, epsilon = 1e-12);
    }

    // --- action computation ---------------------------------------------------

    fn demo_obs(i: usize) -> Observation {
        let pose = Pose::new(
            Vector3::new(0.01 * i as f64, 0.002 * i as f64, 0.1),
            so3_exp(&Vector3::new(0.0, 0.0, 0.02 * i as f64)),
        );
        Observation {
            tau_obs: ts(0.1 * i as f64),
            pose9d: pose_to_9d(&pose).as_array(),
            wrench: [0.0, 0.0, 0.1 * i as f64, 0.0, 0.0, 0.0],
            visual: vec![0.05 * i as f64, 1.0 - 0.01 * i as f64],
        }
    }

    fn make_demo(n: usize) -> Vec<Observation> {
        (0..n).map(demo_obs).collect()
    }

    #[test]
    fn actions_are_elementwise_pose_differences() {
        let demo = make_demo(30);
        let actions = compute_actions(&demo, 16);
        for d in 0..9 {
            assert_relative_eq!(
                actions[3][0][d],
                demo[4].pose9d[d] - demo[3].pose9d[d],
                epsilon = 1e-15
            );
            assert_relative_eq!(
                actions[3][15][d],
                demo[19].pose9d[d] - demo[3].pose9d[d],
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn actions_pad_past_the_demo_end() {
        let demo = make_demo(10);
        let actions = compute_actions(&demo, 16);
        // From the last tick every target is the final pose itself.
        for j in 0..16 {
            assert_eq!(actions[9][j], [0.0; 9]);
        }
        // From tick 5, entries beyond the end all point at the final pose.
        for j in 4..16 {
            for d in 0..9 {
                assert_relative_eq!(
                    actions[5][j][d],
                    demo[9].pose9d[d] - demo[5].pose9d[d],
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn decode_applies_offset_and_reprojects() {
        let demo = make_demo(30);
        let actions = compute_actions(&demo, 16);
        let decoded = decode_relative(&demo[3].pose9d, &actions[3][0]).unwrap();
        let expect = Pose9D::from_array(&demo[4].pose9d);
        for d in 0..9 {
            assert_relative_eq!(decoded.as_array()[d], expect.as_array()[d], epsilon = 1e-12);
        }
        let pose = pose_from_9d(&decoded).unwrap();
        assert!(pose.rotation_defect() < 1e-12);
    }

    // --- dataset and inference ---------------------------------------------------

    #[test]
    fn zero_distance_query_returns_training_chunk() {
        let demos = vec![make_demo(25), make_demo(25)];
        let ds = DemoDataset::build(&demos, 16, (0.01, 0.99)).unwrap();
        let actions = compute_actions(&demos[0], 16);
        let chunk = ds.knn_chunk(&demos[0][7], 1).unwrap();
        for j in 0..16 {
            for d in 0..9 {
                assert!((chunk[j][d] - actions[7][j][d]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ties_break_by_demo_then_tick() {
        // Two identical demos: the query matches tick 7 of both at zero
        // distance; demo 0 must be listed first.
        let demos = vec![make_demo(25), make_demo(25)];
        let ds = DemoDataset::build(&demos, 16, (0.01, 0.99)).unwrap();
        let idx = ds.nearest_indices(&demos[0][7], 2).unwrap();
        assert_eq!(idx[0], (0, 7));
        assert_eq!(idx[1], (1, 7));
    }

    #[test]
    fn averaging_two_neighbours_takes_the_mean_chunk() {
        let demos = vec![make_demo(25), make_demo(25)];
        let ds = DemoDataset::build(&demos, 16, (0.01, 0.99)).unwrap();
        let actions = compute_actions(&demos[0], 16);
        // Both zero-distance neighbours share the same chunk, so the mean
        // equals it; with k=4 the two adjacent ticks blend in.
        let mean2 = ds.knn_chunk(&demos[0][7], 2).unwrap();
        for j in 0..16 {
            for d in 0..9 {
                assert!((mean2[j][d] - actions[7][j][d]).abs() <= 1e-12);
            }
        }
        let mean4 = ds.knn_chunk(&demos[0][7], 4).unwrap();
        let expect = |j: usize, d: usize| {
            let near = ds.nearest_indices(&demos[0][7], 4).unwrap();
            near.iter()
                .map(|&(_, t)| actions[t][j][d])
                .sum::<f64>()
                / 4.0
        };
        assert_relative_eq!(mean4[0][0], expect(0, 0), epsilon = 1e-12);
    }

    #[test]
    fn open_loop_replay_reconstructs_the_demo() {
        let demo = make_demo(40);
        let ds = DemoDataset::build(&[demo.clone()], 16, (0.01, 0.99)).unwrap();
        let policy = KnnPolicy::new(ds, 1);
        // Query each tick and decode the first chunk entry: the result must
        // land on the next demo pose.
        for i in 0..39 {
            let chunk = policy.infer(&demo[i]).unwrap();
            let next = chunk.target_pose(0).unwrap();
            for d in 0..9 {
                assert!(
                    (next.as_array()[d] - demo[i + 1].pose9d[d]).abs() < 1e-9,
                    "tick {i} dim {d}"
                );
            }
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let demos = vec![make_demo(25), make_demo(30)];
        let ds = DemoDataset::build(&demos, 16, (0.01, 0.99)).unwrap();
        let policy = KnnPolicy::new(ds, 3);
        let mut query = demo_obs(12);
        query.pose9d[0] += 0.0003;
        let a = policy.infer(&query).unwrap();
        let b = policy.infer(&query).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors_cover_empty_small_and_mismatched_inputs() {
        assert!(matches!(
            DemoDataset::build(&[], 16, (0.01, 0.99)),
            Err(PolicyError::EmptyDataset)
        ));
        assert!(matches!(
            DemoDataset::build(&[vec![]], 16, (0.01, 0.99)),
            Err(PolicyError::EmptyDemo(0))
        ));
        let ds = DemoDataset::build(&[make_demo(5)], 16, (0.01, 0.99)).unwrap();
        assert!(matches!(
            ds.knn_chunk(&demo_obs(0), 9),
            Err(PolicyError::NotEnoughNeighbours { k: 9, available: 5 })
        ));
        let mut bad = demo_obs(0);
        bad.visual.push(0.0);
        assert!(matches!(
            ds.knn_chunk(&bad, 1),
            Err(PolicyError::DimMismatch { .. })
        ));
    }

    #[test]
    fn chunk_metadata_carries_query_pose_and_time() {
        let demo = make_demo(20);
        let ds = DemoDataset::build(&[demo.clone()], 16, (0.01, 0.99)).unwrap();
        let policy = KnnPolicy::new(ds, 1);
        let chunk = policy.infer(&demo[5]).unwrap();
        assert_eq!(chunk.tau_obs, demo[5].tau_obs);
        assert_eq!(chunk.base, demo[5].pose9d);
        assert_eq!(chunk.horizon(), 16);
    }
}
