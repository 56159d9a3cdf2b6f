//! Patch Correlation Predictor: turns a pair of cross-view-aware feature
//! grids into a per-anchor-patch probability distribution over query patch
//! cells. The pipeline: dense similarity tensor -> patch split -> small
//! conv stack -> patch-aggregating conv -> per-patch softmax.

use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cpgp::FusedFeatures;
use crate::error::{FicopError, Result};

/// N_p x (H2/P) x (W2/P) correspondence probabilities; each anchor-patch
/// slice sums to 1.
#[derive(Debug, Clone)]
pub struct PatchCorrelationMap {
    pub values: Array3<f64>,
    /// Anchor grid rows (H1/P).
    pub g1: usize,
    /// Anchor grid cols (W1/P).
    pub g2: usize,
}

impl PatchCorrelationMap {
    pub fn new(values: Array3<f64>, g1: usize, g2: usize) -> Result<Self> {
        if values.dim().0 != g1 * g2 {
            return Err(FicopError::Validation(format!(
                "patch correlation map: {} slices vs {g1}x{g2} anchor grid",
                values.dim().0
            )));
        }
        for (n, slice) in values.outer_iter().enumerate() {
            let sum: f64 = slice.sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(FicopError::Validation(format!(
                    "patch correlation slice {n} sums to {sum}, expected 1"
                )));
            }
            if slice.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(FicopError::Validation(format!(
                    "patch correlation slice {n} has values outside [0,1]"
                )));
            }
        }
        Ok(Self { values, g1, g2 })
    }

    pub fn n_patches(&self) -> usize {
        self.values.dim().0
    }

    pub fn query_grid(&self) -> (usize, usize) {
        (self.values.dim().1, self.values.dim().2)
    }

    /// Build an oracle map from a binary ground-truth correlation tensor by
    /// normalizing each slice to a distribution (uniform over the positive
    /// cells; uniform over everything if a slice is all-negative).
    pub fn from_binary(c_gt: &Array3<f64>, g1: usize, g2: usize) -> Result<Self> {
        let mut values = c_gt.clone();
        for mut slice in values.outer_iter_mut() {
            let sum: f64 = slice.sum();
            if sum > 0.0 {
                slice.mapv_inplace(|x| x / sum);
            } else {
                let uniform = 1.0 / (slice.len() as f64);
                slice.fill(uniform);
            }
        }
        Self::new(values, g1, g2)
    }
}

/// Dense cross-view similarity: S[q, y, x] = <query token q, anchor pixel (y, x)>.
pub fn similarity_map(anchor: &FusedFeatures, query: &FusedFeatures) -> Result<Array3<f64>> {
    if anchor.channels() != query.channels() {
        return Err(FicopError::Validation(format!(
            "similarity_map: channel mismatch anchor {} vs query {}",
            anchor.channels(),
            query.channels()
        )));
    }
    // (H2W2 x C) . (C x H1W1), reshaped to (H2W2, H1, W1).
    let flat = query.tokens.dot(&anchor.tokens.t());
    let (nq, _) = flat.dim();
    Ok(Array3::from_shape_vec(
        (nq, anchor.height, anchor.width),
        flat.iter().copied().collect(),
    )
    .unwrap())
}

/// Regroup S into anchor patches: output[n, p, qy, qx] where n runs
/// row-major over the (H1/P)x(W1/P) anchor grid and p row-major within the
/// PxP patch. Query pixel index q is unflattened back to (qy, qx).
pub fn patch_split(
    s: &Array3<f64>,
    patch: usize,
    query_dims: (usize, usize),
) -> Result<Array4<f64>> {
    let (nq, h1, w1) = s.dim();
    let (h2, w2) = query_dims;
    if h2 * w2 != nq {
        return Err(FicopError::Validation(format!(
            "patch_split: query dims {h2}x{w2} vs {nq} similarity slices"
        )));
    }
    if h1 % patch != 0 || w1 % patch != 0 {
        return Err(FicopError::Validation(format!(
            "patch_split: anchor grid {h1}x{w1} not divisible by P={patch}"
        )));
    }
    let (g1, g2) = (h1 / patch, w1 / patch);
    let mut out = Array4::zeros((g1 * g2, patch * patch, h2, w2));
    for q in 0..nq {
        let (qy, qx) = (q / w2, q % w2);
        for y in 0..h1 {
            for x in 0..w1 {
                let n = (y / patch) * g2 + x / patch;
                let p = (y % patch) * patch + x % patch;
                out[(n, p, qy, qx)] = s[(q, y, x)];
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patch_split`].
pub fn patch_unsplit(t: &Array4<f64>, patch: usize, anchor_dims: (usize, usize)) -> Array3<f64> {
    let (_, _, h2, w2) = t.dim();
    let (h1, w1) = anchor_dims;
    let g2 = w1 / patch;
    let mut s = Array3::zeros((h2 * w2, h1, w1));
    for y in 0..h1 {
        for x in 0..w1 {
            let n = (y / patch) * g2 + x / patch;
            let p = (y % patch) * patch + x % patch;
            for qy in 0..h2 {
                for qx in 0..w2 {
                    s[(qy * w2 + qx, y, x)] = t[(n, p, qy, qx)];
                }
            }
        }
    }
    s
}

/// Conv2D + inference-mode BatchNorm + ReLU over the (H2, W2) plane with
/// P^2 channels, shared across the N_p patch slots.
#[derive(Debug, Clone)]
pub struct ConvBlockParams {
    /// C_out x C_in x 3 x 3.
    pub weights: Array4<f64>,
    pub bias: Array1<f64>,
    pub bn_gain: Array1<f64>,
    pub bn_bias: Array1<f64>,
    pub bn_mean: Array1<f64>,
    pub bn_var: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct PcpParams {
    /// Patch side length on the feature grid.
    pub patch: usize,
    pub blocks: Vec<ConvBlockParams>,
    /// Final patch-aggregating conv: P^2 input channels, kernel P, stride P,
    /// one output channel. Shape P^2 x P x P.
    pub final_weights: Array3<f64>,
    pub final_bias: f64,
}

impl PcpParams {
    pub fn seeded(patch: usize, n_blocks: usize, seed: u64) -> Result<Self> {
        if n_blocks == 0 {
            return Err(FicopError::Validation("L2 must be >= 1".into()));
        }
        let c = patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (2 * c * 9) as f64).sqrt();
        let blocks = (0..n_blocks)
            .map(|_| ConvBlockParams {
                weights: Array4::from_shape_fn((c, c, 3, 3), |_| {
                    (rng.gen::<f64>() * 2.0 - 1.0) * bound
                }),
                bias: Array1::zeros(c),
                bn_gain: Array1::ones(c),
                bn_bias: Array1::zeros(c),
                bn_mean: Array1::zeros(c),
                bn_var: Array1::ones(c),
            })
            .collect();
        let fbound = (6.0 / (c * patch * patch + 1) as f64).sqrt();
        Ok(Self {
            patch,
            blocks,
            final_weights: Array3::from_shape_fn((c, patch, patch), |_| {
                (rng.gen::<f64>() * 2.0 - 1.0) * fbound
            }),
            final_bias: 0.0,
        })
    }

    /// Identity conv blocks and an averaging final conv: the output before
    /// softmax is the mean similarity between patch n and each query cell.
    pub fn passthrough(patch: usize) -> Self {
        let c = patch * patch;
        let mut weights = Array4::zeros((c, c, 3, 3));
        for i in 0..c {
            weights[(i, i, 1, 1)] = 1.0;
        }
        let block = ConvBlockParams {
            weights,
            bias: Array1::zeros(c),
            bn_gain: Array1::ones(c),
            bn_bias: Array1::zeros(c),
            bn_mean: Array1::zeros(c),
            bn_var: Array1::ones(c),
        };
        Self {
            patch,
            blocks: vec![block],
            final_weights: Array3::from_elem((c, patch, patch), 1.0 / (c * c) as f64),
            final_bias: 0.0,
        }
    }
}

fn conv3x3_zero_pad(x: &Array3<f64>, weights: &Array4<f64>, bias: &Array1<f64>) -> Array3<f64> {
    // Layout here is C x H x W (channel-major), unlike the decoder.
    let (cin, h, w) = x.dim();
    let cout = weights.dim().0;
    let mut out = Array3::zeros((cout, h, w));
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[o];
                for i in 0..cin {
                    for ky in 0..3usize {
                        let sy = y as i64 + ky as i64 - 1;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xx as i64 + kx as i64 - 1;
                            if sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            acc += weights[(o, i, ky, kx)] * x[(i, sy as usize, sx as usize)];
                        }
                    }
                }
                out[(o, y, xx)] = acc;
            }
        }
    }
    out
}

/// Full PCP forward pass.
pub fn pcp_forward(
    params: &PcpParams,
    anchor: &FusedFeatures,
    query: &FusedFeatures,
) -> Result<PatchCorrelationMap> {
    let p = params.patch;
    let (h1, w1) = (anchor.height, anchor.width);
    let (h2, w2) = (query.height, query.width);
    if h2 % p != 0 || w2 % p != 0 {
        return Err(FicopError::Validation(format!(
            "pcp_forward: query grid {h2}x{w2} not divisible by P={p}"
        )));
    }
    let s = similarity_map(anchor, query)?;
    let split = patch_split(&s, p, (h2, w2))?;
    let (n_patches, c, _, _) = split.dim();
    let (g1, g2) = (h1 / p, w1 / p);
    let (gq1, gq2) = (h2 / p, w2 / p);

    let mut logits = Array3::zeros((n_patches, gq1, gq2));
    for n in 0..n_patches {
        let mut x = split.index_axis(ndarray::Axis(0), n).to_owned();
        for block in &params.blocks {
            x = conv3x3_zero_pad(&x, &block.weights, &block.bias);
            for ch in 0..c {
                let inv = 1.0 / (block.bn_var[ch] + 1e-5).sqrt();
                let (gain, bias, mean) = (block.bn_gain[ch], block.bn_bias[ch], block.bn_mean[ch]);
                x.index_axis_mut(ndarray::Axis(0), ch)
                    .mapv_inplace(|v| ((v - mean) * inv * gain + bias).max(0.0));
            }
        }
        // Final conv: kernel P, stride P, one output channel.
        for i in 0..gq1 {
            for j in 0..gq2 {
                let mut acc = params.final_bias;
                for ch in 0..c {
                    for ky in 0..p {
                        for kx in 0..p {
                            acc += params.final_weights[(ch, ky, kx)]
                                * x[(ch, i * p + ky, j * p + kx)];
                        }
                    }
                }
                logits[(n, i, j)] = acc;
            }
        }
    }

    // Softmax over query cells per anchor patch.
    for mut slice in logits.outer_iter_mut() {
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        slice.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = slice.sum();
        slice.mapv_inplace(|v| v / sum);
    }
    PatchCorrelationMap::new(logits, g1, g2)
}

/// Binarize each anchor-patch slice with strict threshold comparison,
/// yielding the per-patch query masks.
pub fn binarize(c_p: &PatchCorrelationMap, tau: f64) -> Result<Array3<u8>> {
    if !(0.0..1.0).contains(&tau) || tau <= 0.0 {
        return Err(FicopError::Validation(format!("tau {tau} outside (0,1)")));
    }
    Ok(c_p.values.mapv(|v| u8::from(v > tau)))
}
