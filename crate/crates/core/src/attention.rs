//! Partitioned spatial attention: per-partition 1x1 compression, 7x7 spatial
//! convolution with a joint softmax over all grid positions, grouped 3x3
//! refinement, and re-application to the input to produce enhanced features
//! plus a scalar score map in `[0, 1]`.
//!
//! Weights are seeded-random and frozen; a frozen random projection is still
//! energy-sensitive, and freezing keeps the whole sampler deterministic.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{parse_container, read_f32_payload, FeatureError, FeatureMap};

/// Number of channel partitions; fixed by the architecture.
pub const PARTITIONS: usize = 8;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("channel count {0} not divisible by {PARTITIONS}")]
    BadChannelCount(usize),
    #[error("feature map has {got} channels, weights expect {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("grid {h}x{w} below the 7x7 minimum")]
    GridTooSmall { h: usize, w: usize },
    #[error(transparent)]
    File(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Frozen attention weights. Kernel shapes: per-partition `C/8 -> 1`
/// compression, per-partition `7x7` spatial, grouped `3x3` refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub channels: usize,
    pub compress_w: Vec<Vec<f32>>,
    pub compress_b: Vec<f32>,
    pub spatial_w: Vec<[f32; 49]>,
    pub spatial_b: Vec<f32>,
    pub refine_w: Vec<[f32; 9]>,
    pub refine_b: Vec<f32>,
    pub seed: u64,
}

/// Scalar attention scores over the feature grid, min-max scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid_w + j]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Enhanced features and their attention scores.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub enhanced: FeatureMap,
    pub scores: ScoreMap,
    /// Post-softmax spatial maps, one per partition, row-major over the grid.
    pub softmax_maps: Vec<Vec<f64>>,
    /// Refined maps after the grouped 3x3 convolution.
    pub refined_maps: Vec<Vec<f64>>,
}

/// Deterministic seeded initialization with fan-in-scaled uniform ranges and
/// zero biases.
pub fn init_attention(channels: usize, seed: u64) -> Result<AttentionWeights, AttentionError> {
    if channels == 0 || channels % PARTITIONS != 0 {
        return Err(AttentionError::BadChannelCount(channels));
    }
    let per = channels / PARTITIONS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |fan_in: usize| {
        let bound = (1.0 / fan_in as f64).sqrt() as f32;
        move |rng: &mut ChaCha8Rng| rng.gen_range(-bound..bound)
    };

    let gen_c = uniform(per);
    let compress_w = (0..PARTITIONS)
        .map(|_| (0..per).map(|_| gen_c(&mut rng)).collect())
        .collect();
    let gen_s = uniform(49);
    let spatial_w = (0..PARTITIONS)
        .map(|_| std::array::from_fn(|_| gen_s(&mut rng)))
        .collect();
    let gen_r = uniform(9);
    let refine_w = (0..PARTITIONS)
        .map(|_| std::array::from_fn(|_| gen_r(&mut rng)))
        .collect();

    Ok(AttentionWeights {
        channels,
        compress_w,
        compress_b: vec![0.0; PARTITIONS],
        spatial_w,
        spatial_b: vec![0.0; PARTITIONS],
        refine_w,
        refine_b: vec![0.0; PARTITIONS],
        seed,
    })
}

/// Reflect-padded single-channel convolution with an odd square kernel.
/// Reflection keeps convolution translation invariant on constant maps, so
/// a uniform input yields a uniform output at every stage.
fn conv2d_single(
    input: &[f64],
    h: usize,
    w: usize,
    kernel: &[f32],
    k: usize,
    bias: f64,
) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = bias;
            for kv in 0..k {
                let v = crate::imaging::reflect(i as isize + kv as isize - half, h);
                for ku in 0..k {
                    let u = crate::imaging::reflect(j as isize + ku as isize - half, w);
                    acc += kernel[kv * k + ku] as f64 * input[v * w + u];
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

fn softmax_in_place(map: &mut [f64]) {
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in map.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in map.iter_mut() {
        *v /= sum;
    }
}

/// Forward pass. Splits channels into 8 contiguous partitions, computes one
/// softmax spatial map per partition, refines the stacked maps with a
/// grouped 3x3 convolution, multiplies each partition's channels by its
/// refined map and standardizes per channel. Scores are the per-cell mean of
/// the refined maps, min-max rescaled per image (constant maps become 0.5).
pub fn spatial_attention_forward(
    fmap: &FeatureMap,
    weights: &AttentionWeights,
) -> Result<AttentionOutput, AttentionError> {
    if fmap.channels != weights.channels {
        return Err(AttentionError::ShapeMismatch {
            got: fmap.channels,
            expected: weights.channels,
        });
    }
    let (h, w) = (fmap.grid_h, fmap.grid_w);
    if h < 7 || w < 7 {
        return Err(AttentionError::GridTooSmall { h, w });
    }
    let per = fmap.channels / PARTITIONS;
    let cells = h * w;

    let mut softmax_maps = Vec::with_capacity(PARTITIONS);
    for p in 0..PARTITIONS {
        // 1x1 compression of the partition's channels into one map.
        let mut compressed = vec![weights.compress_b[p] as f64; cells];
        for (ci, &cw) in weights.compress_w[p].iter().enumerate() {
            let c = p * per + ci;
            let base = c * cells;
            for idx in 0..cells {
                compressed[idx] += cw as f64 * fmap.data[base + idx] as f64;
            }
        }
        let mut map = conv2d_single(
            &compressed,
            h,
            w,
            &weights.spatial_w[p],
            7,
            weights.spatial_b[p] as f64,
        );
        softmax_in_place(&mut map);
        softmax_maps.push(map);
    }

    // Grouped refinement: each partition's map convolved independently.
    let refined_maps: Vec<Vec<f64>> = (0..PARTITIONS)
        .map(|p| {
            conv2d_single(
                &softmax_maps[p],
                h,
                w,
                &weights.refine_w[p],
                3,
                weights.refine_b[p] as f64,
            )
        })
        .collect();

    // Apply refined attention back to the partition inputs, then
    // standardize each channel over spatial positions.
    let mut enhanced = vec![0.0f64; fmap.channels * cells];
    for p in 0..PARTITIONS {
        for ci in 0..per {
            let c = p * per + ci;
            let base = c * cells;
            for idx in 0..cells {
                enhanced[base + idx] = fmap.data[base + idx] as f64 * refined_maps[p][idx];
            }
        }
    }
    for c in 0..fmap.channels {
        let slice = &mut enhanced[c * cells..(c + 1) * cells];
        let mean = slice.iter().sum::<f64>() / cells as f64;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cells as f64;
        let denom = (var + 1e-6).sqrt();
        for v in slice.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }

    // Scalar scores: mean of refined maps, min-max rescaled per image.
    let mut scores = vec![0.0; cells];
    for map in &refined_maps {
        for (s, v) in scores.iter_mut().zip(map) {
            *s += v / PARTITIONS as f64;
        }
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 1e-12 {
        scores.iter_mut().for_each(|s| *s = 0.5);
    } else {
        scores.iter_mut().for_each(|s| *s = (*s - min) / (max - min));
    }

    Ok(AttentionOutput {
        enhanced: FeatureMap {
            channels: fmap.channels,
            grid_h: h,
            grid_w: w,
            stride: fmap.stride,
            data: enhanced.iter().map(|&v| v as f32).collect(),
            source_image_id: fmap.source_image_id.clone(),
        },
        scores: ScoreMap {
            grid_h: h,
            grid_w: w,
            values: scores,
        },
        softmax_maps,
        refined_maps,
    })
}

/// Rank grid cells by score, descending, ties broken by row-major index.
pub fn rank_scores(scores: &ScoreMap) -> Vec<((usize, usize), f64)> {
    let mut ranked: Vec<(usize, f64)> = scores.values.iter().cloned().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .map(|(idx, s)| ((idx / scores.grid_w, idx % scores.grid_w), s))
        .collect()
}

const ATTENTION_MAGIC: &[u8; 4] = b"SCRA";

/// Write attention weights in the feature-file container: header fields are
/// (channels, 0, 0, 0), payload is the kernels in declaration order as f32.
pub fn export_attention(path: &Path, w: &AttentionWeights) -> Result<(), AttentionError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(ATTENTION_MAGIC)?;
    f.write_all(&1u16.to_le_bytes())?;
    for dim in [w.channels as u32, 0, 0, 0] {
        f.write_all(&dim.to_le_bytes())?;
    }
    let mut payload: Vec<f32> = Vec::new();
    for p in 0..PARTITIONS {
        payload.extend_from_slice(&w.compress_w[p]);
        payload.push(w.compress_b[p]);
    }
    for p in 0..PARTITIONS {
        payload.extend_from_slice(&w.spatial_w[p]);
        payload.push(w.spatial_b[p]);
    }
    for p in 0..PARTITIONS {
        payload.extend_from_slice(&w.refine_w[p]);
        payload.push(w.refine_b[p]);
    }
    let mut bytes = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Read weights written by [`export_attention`]. The seed is not stored;
/// imported weights carry seed 0.
pub fn import_attention(path: &Path) -> Result<AttentionWeights, AttentionError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (header, payload) = parse_container(&bytes, ATTENTION_MAGIC)?;
    let channels = header[0];
    if channels == 0 || channels % PARTITIONS != 0 {
        return Err(AttentionError::BadChannelCount(channels));
    }
    let per = channels / PARTITIONS;
    let n = PARTITIONS * (per + 1) + PARTITIONS * 50 + PARTITIONS * 10;
    let values = read_f32_payload(payload, n).map_err(AttentionError::File)?;

    let mut pos = 0;
    let mut take = |n: usize| {
        let s = &values[pos..pos + n];
        pos += n;
        s.to_vec()
    };
    let mut compress_w = Vec::new();
    let mut compress_b = Vec::new();
    for _ in 0..PARTITIONS {
        compress_w.push(take(per));
        compress_b.push(take(1)[0]);
    }
    let mut spatial_w = Vec::new();
    let mut spatial_b = Vec::new();
    for _ in 0..PARTITIONS {
        let k = take(49);
        spatial_w.push(std::array::from_fn(|i| k[i]));
        spatial_b.push(take(1)[0]);
    }
    let mut refine_w = Vec::new();
    let mut refine_b = Vec::new();
    for _ in 0..PARTITIONS {
        let k = take(9);
        refine_w.push(std::array::from_fn(|i| k[i]));
        refine_b.push(take(1)[0]);
    }
    Ok(AttentionWeights {
        channels,
        compress_w,
        compress_b,
        spatial_w,
        spatial_b,
        refine_w,
        refine_b,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_fmap(rng: &mut ChaCha8Rng, channels: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap {
            channels,
            grid_h: h,
            grid_w: w,
            stride: 8,
            data: (0..channels * h * w)
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect(),
            source_image_id: "t".into(),
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_attention(512, 7).unwrap();
        let b = init_attention(512, 7).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            init_attention(510, 7),
            Err(AttentionError::BadChannelCount(510))
        ));
        let small = init_attention(64, 7).unwrap();
        assert_eq!(small.compress_w[0].len(), 8);
        assert!(small.compress_b.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn softmax_maps_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weights = init_attention(64, 3).unwrap();
        let fmap = random_fmap(&mut rng, 64, 9, 11);
        let out = spatial_attention_forward(&fmap, &weights).unwrap();
        for map in &out.softmax_maps {
            let sum: f64 = map.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(map.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn enhanced_restores_input_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let weights = init_attention(512, 3).unwrap();
        let fmap = random_fmap(&mut rng, 512, 8, 10);
        let out = spatial_attention_forward(&fmap, &weights).unwrap();
        assert_eq!(out.enhanced.channels, 512);
        assert_eq!(out.enhanced.grid_h, 8);
        assert_eq!(out.enhanced.grid_w, 10);
        assert!(out.scores.values.iter().all(|&s| (0.0..=1.0).contains(&s)));
    }

    // Convolution is translation invariant on constant maps, so a uniform
    // input stays uniform through every stage and the constant-score rule
    // yields 0.5 everywhere.
    #[test]
    fn uniform_input_uniform_softmax_half_scores() {
        let weights = init_attention(64, 5).unwrap();
        for fill in [0.0f32, 0.37] {
            let fmap = FeatureMap {
                channels: 64,
                grid_h: 9,
                grid_w: 9,
                stride: 8,
                data: vec![fill; 64 * 81],
                source_image_id: "t".into(),
            };
            let out = spatial_attention_forward(&fmap, &weights).unwrap();
            for map in &out.softmax_maps {
                for &v in map {
                    assert!((v - 1.0 / 81.0).abs() < 1e-12);
                }
            }
            assert!(out.scores.values.iter().all(|&s| s == 0.5));
        }
    }

    #[test]
    fn forward_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let weights = init_attention(64, 3).unwrap();
        let wrong = random_fmap(&mut rng, 32, 9, 9);
        assert!(matches!(
            spatial_attention_forward(&wrong, &weights),
            Err(AttentionError::ShapeMismatch { .. })
        ));
        let tiny = random_fmap(&mut rng, 64, 5, 9);
        assert!(matches!(
            spatial_attention_forward(&tiny, &weights),
            Err(AttentionError::GridTooSmall { .. })
        ));
    }

    #[test]
    fn forward_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let weights = init_attention(64, 3).unwrap();
        let fmap = random_fmap(&mut rng, 64, 10, 12);
        let a = spatial_attention_forward(&fmap, &weights).unwrap();
        let b = spatial_attention_forward(&fmap, &weights).unwrap();
        assert_eq!(a.enhanced.data, b.enhanced.data);
        assert_eq!(a.scores.values, b.scores.values);
    }

    // 7x7 then 3x3 composes to a 9x9 neighborhood: refined maps further out
    // may shift only through the softmax normalizer, which redistributes a
    // common factor; outside the window the relative pattern is preserved.
    #[test]
    fn refinement_locality_impulse_probe() {
        let weights = init_attention(64, 9).unwrap();
        let base = FeatureMap {
            channels: 64,
            grid_h: 15,
            grid_w: 15,
            stride: 8,
            data: vec![0.0; 64 * 225],
            source_image_id: "t".into(),
        };
        let mut poked = base.clone();
        for c in 0..64 {
            poked.set(c, 7, 7, 2.0);
        }
        let out_base = spatial_attention_forward(&base, &weights).unwrap();
        let out_poked = spatial_attention_forward(&poked, &weights).unwrap();
        for p in 0..PARTITIONS {
            // Pre-softmax the impulse affects a 7x7 window; after softmax all
            // cells share the normalizer, so compare ratios of the refined
            // maps far outside the composed 9x9 window instead.
            let b = &out_base.refined_maps[p];
            let q = &out_poked.refined_maps[p];
            let (rb, rq) = (b[0], q[0]);
            if rb.abs() > 1e-12 && rq.abs() > 1e-12 {
                let scale = rq / rb;
                for (i, j) in [(0usize, 1usize), (1, 0), (14, 14), (0, 14)] {
                    let idx = i * 15 + j;
                    if b[idx].abs() > 1e-12 {
                        assert!(
                            (q[idx] / b[idx] - scale).abs() < 1e-9,
                            "partition {p} cell ({i},{j})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rank_scores_order_and_ties() {
        let scores = ScoreMap {
            grid_h: 2,
            grid_w: 2,
            values: vec![0.1, 0.9, 0.5, 0.5],
        };
        let ranked = rank_scores(&scores);
        let cells: Vec<_> = ranked.iter().map(|(c, _)| *c).collect();
        assert_eq!(cells, vec![(0, 1), (1, 0), (1, 1), (0, 0)]);

        let equal = ScoreMap {
            grid_h: 2,
            grid_w: 3,
            values: vec![0.4; 6],
        };
        let cells: Vec<_> = rank_scores(&equal).iter().map(|(c, _)| *c).collect();
        assert_eq!(
            cells,
            vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
        );
    }

    #[test]
    fn rank_scores_permutation_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..1.0)).collect();
        let scores = ScoreMap {
            grid_h: 4,
            grid_w: 6,
            values: values.clone(),
        };
        let ranked = rank_scores(&scores);

        // Shuffle values, rank, then map ranked cells back through the
        // permutation; the multiset of (value) sequences must agree.
        let mut perm: Vec<usize> = (0..24).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
        let ranked_shuffled = rank_scores(&ScoreMap {
            grid_h: 4,
            grid_w: 6,
            values: shuffled,
        });
        let order_a: Vec<f64> = ranked.iter().map(|&(_, s)| s).collect();
        let order_b: Vec<f64> = ranked_shuffled.iter().map(|&(_, s)| s).collect();
        assert_eq!(order_a, order_b);
    }

    #[test]
    fn attention_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.scra");
        let w = init_attention(64, 11).unwrap();
        export_attention(&path, &w).unwrap();
        let back = import_attention(&path).unwrap();
        assert_eq!(back.compress_w, w.compress_w);
        assert_eq!(back.spatial_w, w.spatial_w);
        assert_eq!(back.refine_w, w.refine_w);
        assert_eq!(back.channels, w.channels);
    }
}
