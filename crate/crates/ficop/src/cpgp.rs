//! Cross-Perspective Global Perception: a forward-only transformer stack
//! that lets anchor and query token sequences attend within and across
//! views, plus the text-fusion stand-in feeding it and the mask-guided
//! decoder recovering full-resolution descriptors.
//!
//! Everything here is deterministic given parameters; there is no training
//! path. Parameters are seeded Xavier-uniform so runs are reproducible.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FicopError, Result};

/// Token sequence of one view with its spatial layout.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    /// (H*W) x C tokens, row-major over the grid.
    pub tokens: Array2<f64>,
    pub height: usize,
    pub width: usize,
}

impl FusedFeatures {
    pub fn new(tokens: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if tokens.nrows() != height * width {
            return Err(FicopError::Validation(format!(
                "token count {} does not equal {height}x{width}",
                tokens.nrows()
            )));
        }
        Ok(Self { tokens, height, width })
    }

    pub fn channels(&self) -> usize {
        self.tokens.ncols()
    }

    /// Back to an H x W x C grid.
    pub fn to_grid(&self) -> Array3<f64> {
        let c = self.channels();
        Array3::from_shape_vec(
            (self.height, self.width, c),
            self.tokens.iter().copied().collect(),
        )
        .unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormParams {
    fn identity(dim: usize) -> Self {
        Self { gain: Array1::ones(dim), bias: Array1::zeros(dim) }
    }

    fn apply_row(&self, row: &[f64], out: &mut [f64]) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for (i, (&x, o)) in row.iter().zip(out.iter_mut()).enumerate() {
            *o = (x - mean) * inv * self.gain[i] + self.bias[i];
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
            self.apply_row(xr.as_slice().unwrap(), or.as_slice_mut().unwrap());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct CpgpLayerParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ln_self: LayerNormParams,
    pub ln_cross: LayerNormParams,
    pub ln_ff: LayerNormParams,
    pub ff: FeedForwardParams,
}

#[derive(Debug, Clone)]
pub struct CpgpParams {
    pub c_in: usize,
    pub c_down: usize,
    pub n_heads: usize,
    pub layers: Vec<CpgpLayerParams>,
    /// C_in x C_down.
    pub down_proj: Array2<f64>,
    /// C_down x C_in.
    pub up_proj: Array2<f64>,
    /// Fixed 2-D sinusoidal positional encoding added after down-projection.
    pub positional_encoding: bool,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
}

impl CpgpParams {
    pub fn seeded(c_in: usize, c_down: usize, n_layers: usize, n_heads: usize, seed: u64) -> Result<Self> {
        if c_down % n_heads != 0 {
            return Err(FicopError::Validation(format!(
                "c_down {c_down} not divisible by n_heads {n_heads}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attn = |rng: &mut ChaCha8Rng| AttentionParams {
            wq: xavier(rng, c_down, c_down),
            wk: xavier(rng, c_down, c_down),
            wv: xavier(rng, c_down, c_down),
            wo: xavier(rng, c_down, c_down),
        };
        let c_ff = 2 * c_down;
        let layers = (0..n_layers)
            .map(|_| CpgpLayerParams {
                self_attn: attn(&mut rng),
                cross_attn: attn(&mut rng),
                ln_self: LayerNormParams::identity(c_down),
                ln_cross: LayerNormParams::identity(c_down),
                ln_ff: LayerNormParams::identity(c_down),
                ff: FeedForwardParams {
                    w1: xavier(&mut rng, c_down, c_ff),
                    b1: Array1::zeros(c_ff),
                    w2: xavier(&mut rng, c_ff, c_down),
                    b2: Array1::zeros(c_down),
                },
            })
            .collect();
        Ok(Self {
            c_in,
            c_down,
            n_heads,
            layers,
            down_proj: xavier(&mut rng, c_in, c_down),
            up_proj: xavier(&mut rng, c_down, c_in),
            positional_encoding: true,
        })
    }

    /// Zero layers, identity projections: forward pass is the identity.
    /// Regression anchor for the layer plumbing.
    pub fn identity(c: usize) -> Self {
        Self {
            c_in: c,
            c_down: c,
            n_heads: 1,
            layers: Vec::new(),
            down_proj: Array2::eye(c),
            up_proj: Array2::eye(c),
            positional_encoding: false,
        }
    }
}

fn softmax_rows_inplace(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Multi-head attention of `queries` over `keys`. Returns the output and
/// the attention row sums (pre-normalization contract check: each must be 1).
fn attention(
    p: &AttentionParams,
    n_heads: usize,
    queries: &Array2<f64>,
    keys: &Array2<f64>,
) -> (Array2<f64>, Vec<f64>) {
    let c = queries.ncols();
    let dh = c / n_heads;
    let q = queries.dot(&p.wq);
    let k = keys.dot(&p.wk);
    let v = keys.dot(&p.wv);
    let mut concat = Array2::<f64>::zeros((queries.nrows(), c));
    let mut row_sums = Vec::new();
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t()) / (dh as f64).sqrt();
        softmax_rows_inplace(&mut scores);
        row_sums.extend(scores.sum_axis(Axis(1)).iter());
        concat.slice_mut(cols).assign(&scores.dot(&vh));
    }
    (concat.dot(&p.wo), row_sums)
}

/// Fixed 2-D sinusoidal positional encoding over an h x w grid, c channels.
/// First half of the channels encodes x, second half y.
pub fn sinusoidal_encoding(h: usize, w: usize, c: usize) -> Array2<f64> {
    let mut enc = Array2::<f64>::zeros((h * w, c));
    let half = c / 2;
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for i in 0..half {
                let freq = 1.0 / 10000f64.powf(2.0 * (i / 2) as f64 / half as f64);
                let arg = x as f64 * freq;
                enc[(row, i)] = if i % 2 == 0 { arg.sin() } else { arg.cos() };
            }
            for i in half..c {
                let j = i - half;
                let freq = 1.0 / 10000f64.powf(2.0 * (j / 2) as f64 / (c - half) as f64);
                let arg = y as f64 * freq;
                enc[(row, i)] = if j % 2 == 0 { arg.sin() } else { arg.cos() };
            }
        }
    }
    enc
}

#[derive(Debug, Clone)]
pub struct FuseParams {
    /// C_in x C_v visual projection.
    pub w_visual: Array2<f64>,
    /// C_in x C_t text gate projection.
    pub w_text: Array2<f64>,
    pub ln: LayerNormParams,
}

impl FuseParams {
    pub fn seeded(c_in: usize, c_visual: usize, c_text: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w_visual: xavier(&mut rng, c_in, c_visual),
            w_text: xavier(&mut rng, c_in, c_text),
            ln: LayerNormParams::identity(c_in),
        }
    }

    pub fn identity(c: usize, c_text: usize) -> Self {
        Self {
            w_visual: Array2::eye(c),
            w_text: Array2::zeros((c, c_text)),
            ln: LayerNormParams::identity(c),
        }
    }
}

/// Minimal text-visual fusion: per pixel, out = LN(u + g ⊙ u) where
/// u = W_v · visual and g = W_g · text_embed — a learned scale modulation
/// of visual features by the text embedding.
pub fn fuse_text(
    params: &FuseParams,
    visual: &Array3<f32>,
    text_embed: &Array1<f64>,
) -> Result<FusedFeatures> {
    let (h, w, cv) = visual.dim();
    if params.w_visual.ncols() != cv {
        return Err(FicopError::Validation(format!(
            "fuse_text: visual channels {cv} vs W_v columns {}",
            params.w_visual.ncols()
        )));
    }
    if params.w_text.ncols() != text_embed.len() {
        return Err(FicopError::Validation(format!(
            "fuse_text: text dim {} vs W_g columns {}",
            text_embed.len(),
            params.w_text.ncols()
        )));
    }
    let c_in = params.w_visual.nrows();
    let gate = params.w_text.dot(text_embed);
    let mut tokens = Array2::<f64>::zeros((h * w, c_in));
    let mut u = vec![0.0f64; c_in];
    for y in 0..h {
        for x in 0..w {
            for (i, ui) in u.iter_mut().enumerate() {
                *ui = (0..cv)
                    .map(|j| params.w_visual[(i, j)] * visual[(y, x, j)] as f64)
                    .sum();
            }
            let modulated: Vec<f64> =
                u.iter().zip(gate.iter()).map(|(&ui, &gi)| ui + gi * ui).collect();
            params
                .ln
                .apply_row(&modulated, tokens.row_mut(y * w + x).as_slice_mut().unwrap());
        }
    }
    FusedFeatures::new(tokens, h, w)
}

/// Diagnostics gathered during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct CpgpDiagnostics {
    /// Worst |row sum - 1| over every attention matrix of every layer.
    pub max_attention_row_sum_error: f64,
}

pub fn cpgp_forward(
    params: &CpgpParams,
    anchor: &FusedFeatures,
    query: &FusedFeatures,
) -> Result<(FusedFeatures, FusedFeatures)> {
    cpgp_forward_diag(params, anchor, query).map(|(a, q, _)| (a, q))
}

pub fn cpgp_forward_diag(
    params: &CpgpParams,
    anchor: &FusedFeatures,
    query: &FusedFeatures,
) -> Result<(FusedFeatures, FusedFeatures, CpgpDiagnostics)> {
    if anchor.channels() != params.c_in || query.channels() != params.c_in {
        return Err(FicopError::Validation(format!(
            "cpgp_forward: channels anchor {}, query {} vs params c_in {}",
            anchor.channels(),
            query.channels(),
            params.c_in
        )));
    }
    let mut diag = CpgpDiagnostics::default();
    let track = |sums: &[f64], diag: &mut CpgpDiagnostics| {
        for &s in sums {
            diag.max_attention_row_sum_error =
                diag.max_attention_row_sum_error.max((s - 1.0).abs());
        }
    };

    // Down-project each view's tokens (concatenation then split is the same
    // as projecting per view; attention below is what mixes them).
    let mut a = anchor.tokens.dot(&params.down_proj);
    let mut q = query.tokens.dot(&params.down_proj);
    if params.positional_encoding {
        a += &sinusoidal_encoding(anchor.height, anchor.width, params.c_down);
        q += &sinusoidal_encoding(query.height, query.width, params.c_down);
    }

    for layer in &params.layers {
        // Per-view self-attention, pre-LN residual.
        let an = layer.ln_self.apply(&a);
        let qn = layer.ln_self.apply(&q);
        let (ao, sums) = attention(&layer.self_attn, params.n_heads, &an, &an);
        track(&sums, &mut diag);
        let (qo, sums) = attention(&layer.self_attn, params.n_heads, &qn, &qn);
        track(&sums, &mut diag);
        a += &ao;
        q += &qo;

        // Bidirectional cross-attention.
        let an = layer.ln_cross.apply(&a);
        let qn = layer.ln_cross.apply(&q);
        let (ao, sums) = attention(&layer.cross_attn, params.n_heads, &an, &qn);
        track(&sums, &mut diag);
        let (qo, sums) = attention(&layer.cross_attn, params.n_heads, &qn, &an);
        track(&sums, &mut diag);
        a += &ao;
        q += &qo;

        // Feed-forward sublayer.
        for x in [&mut a, &mut q] {
            let xn = layer.ln_ff.apply(x);
            let hidden = xn.dot(&layer.ff.w1) + &layer.ff.b1;
            let hidden = hidden.mapv(|v| v.max(0.0));
            *x += &(hidden.dot(&layer.ff.w2) + &layer.ff.b2);
        }
    }

    let a_out = a.dot(&params.up_proj);
    let q_out = q.dot(&params.up_proj);
    Ok((
        FusedFeatures::new(a_out, anchor.height, anchor.width)?,
        FusedFeatures::new(q_out, query.height, query.width)?,
        diag,
    ))
}

#[derive(Debug, Clone)]
pub struct DecoderStageParams {
    /// C_out x (C_in + 1) x 3 x 3 conv weights; the extra input channel is
    /// the downsampled mask.
    pub weights: ndarray::Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub stages: Vec<DecoderStageParams>,
}

impl DecoderParams {
    pub fn seeded(c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = (0..3)
            .map(|_| {
                let fan = (c + 1) * 9 + c * 9;
                let bound = (6.0 / fan as f64).sqrt();
                DecoderStageParams {
                    weights: ndarray::Array4::from_shape_fn((c, c + 1, 3, 3), |_| {
                        (rng.gen::<f64>() * 2.0 - 1.0) * bound
                    }),
                    bias: Array1::zeros(c),
                }
            })
            .collect();
        Self { stages }
    }

    /// Center-tap identity convs that ignore the mask channel.
    pub fn identity(c: usize) -> Self {
        let stages = (0..3)
            .map(|_| {
                let mut weights = ndarray::Array4::zeros((c, c + 1, 3, 3));
                for i in 0..c {
                    weights[(i, i, 1, 1)] = 1.0;
                }
                DecoderStageParams { weights, bias: Array1::zeros(c) }
            })
            .collect();
        Self { stages }
    }
}

/// Bilinear x2 upsample with edge clamping (constant fields stay constant).
fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Array3::zeros((oh, ow, c));
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let v00 = x[(y0, x0, ch)];
                let v01 = x[(y0, x1, ch)];
                let v10 = x[(y1, x0, ch)];
                let v11 = x[(y1, x1, ch)];
                out[(oy, ox, ch)] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    out
}

/// Area-average downsample of the full-resolution mask to (h, w).
fn downsample_mask(mask: &ndarray::Array2<u8>, h: usize, w: usize) -> Array2<f64> {
    let (mh, mw) = mask.dim();
    let (ry, rx) = (mh / h, mw / w);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for dy in 0..ry {
            for dx in 0..rx {
                acc += mask[(y * ry + dy, x * rx + dx)] as f64;
            }
        }
        acc / (ry * rx) as f64
    })
}

/// 3x3 conv with replicate padding over an H x W x C_in grid.
fn conv3x3_replicate(
    x: &Array3<f64>,
    weights: &ndarray::Array4<f64>,
    bias: &Array1<f64>,
) -> Array3<f64> {
    let (h, w, cin) = x.dim();
    let cout = weights.dim().0;
    debug_assert_eq!(weights.dim().1, cin);
    let mut out = Array3::zeros((h, w, cout));
    for y in 0..h {
        for xx in 0..w {
            for o in 0..cout {
                let mut acc = bias[o];
                for ky in 0..3usize {
                    let sy = (y as i64 + ky as i64 - 1).clamp(0, h as i64 - 1) as usize;
                    for kx in 0..3usize {
                        let sx = (xx as i64 + kx as i64 - 1).clamp(0, w as i64 - 1) as usize;
                        for i in 0..cin {
                            acc += weights[(o, i, ky, kx)] * x[(sy, sx, i)];
                        }
                    }
                }
                out[(y, xx, o)] = acc;
            }
        }
    }
    out
}

/// Decode coarse features to full resolution: three stages of bilinear x2
/// upsampling, mask-channel concatenation, 3x3 conv and ReLU; the final
/// per-pixel descriptors are L2-normalized.
pub fn decode(
    params: &DecoderParams,
    feat: &FusedFeatures,
    mask: &ndarray::Array2<u8>,
    target: (usize, usize),
) -> Result<Array3<f32>> {
    let (h0, w0) = target;
    if h0 != 8 * feat.height || w0 != 8 * feat.width {
        return Err(FicopError::Validation(format!(
            "decode: target {h0}x{w0} is not 8x the {}x{} feature grid",
            feat.height, feat.width
        )));
    }
    if mask.dim() != (h0, w0) {
        return Err(FicopError::Validation(format!(
            "decode: mask {:?} does not match target {h0}x{w0}",
            mask.dim()
        )));
    }
    let c = feat.channels();
    let mut x = feat.to_grid();
    for stage in &params.stages {
        x = upsample2(&x);
        let (sh, sw, _) = x.dim();
        let m = downsample_mask(mask, sh, sw);
        let mut with_mask = Array3::zeros((sh, sw, c + 1));
        with_mask.slice_mut(s![.., .., ..c]).assign(&x);
        with_mask.slice_mut(s![.., .., c]).assign(&m);
        x = conv3x3_replicate(&with_mask, &stage.weights, &stage.bias);
        x.mapv_inplace(|v| v.max(0.0));
    }
    let (fh, fw, _) = x.dim();
    let mut out = Array3::<f32>::zeros((fh, fw, c));
    for y in 0..fh {
        for xx in 0..fw {
            let norm: f64 = (0..c).map(|i| x[(y, xx, i)].powi(2)).sum::<f64>().sqrt();
            let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
            for i in 0..c {
                out[(y, xx, i)] = (x[(y, xx, i)] * inv) as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FusedFeatures {
        FusedFeatures::new(
            Array2::from_shape_fn((h * w, c), |_| rng.gen::<f64>() - 0.5),
            h,
            w,
        )
        .unwrap()
    }

    #[test]
    fn fuse_text_zero_embedding_is_layernormed_visual() {
        let c = 8;
        let params = FuseParams::identity(c, 4);
        let visual = Array3::from_shape_fn((3, 3, c), |(y, x, k)| (y + x + k) as f32 * 0.1);
        let text = Array1::zeros(4);
        let fused = fuse_text(&params, &visual, &text).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let row: Vec<f64> = (0..c).map(|k| visual[(y, x, k)] as f64).collect();
                let mut expect = vec![0.0; c];
                params.ln.apply_row(&row, &mut expect);
                for k in 0..c {
                    assert!((fused.tokens[(y * 3 + x, k)] - expect[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fuse_text_depends_on_text_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = FuseParams::seeded(8, 8, 4, 1);
        let visual = Array3::from_shape_fn((2, 2, 8), |_| rng.gen::<f32>());
        let t1 = Array1::from_shape_fn(4, |_| rng.gen::<f64>());
        let t2 = Array1::from_shape_fn(4, |_| rng.gen::<f64>());
        let f1 = fuse_text(&params, &visual, &t1).unwrap();
        let f2 = fuse_text(&params, &visual, &t2).unwrap();
        let diff = (&f1.tokens - &f2.tokens).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "fusion ignored the text embedding");
    }

    #[test]
    fn fuse_text_shape_contract() {
        let params = FuseParams::seeded(64, 64, 32, 2);
        let visual = Array3::zeros((16, 16, 64));
        let text = Array1::zeros(32);
        let fused = fuse_text(&params, &visual, &text).unwrap();
        assert_eq!(fused.tokens.dim(), (256, 64));
    }

    #[test]
    fn forward_preserves_shapes() {
        let params = CpgpParams::seeded(16, 8, 2, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let anchor = random_features(&mut rng, 4, 4, 16);
        let query = random_features(&mut rng, 4, 6, 16);
        let (a, q) = cpgp_forward(&params, &anchor, &query).unwrap();
        assert_eq!(a.tokens.dim(), (16, 16));
        assert_eq!(q.tokens.dim(), (24, 16));
        assert_eq!((q.height, q.width), (4, 6));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let params = CpgpParams::seeded(16, 8, 3, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let anchor = random_features(&mut rng, 4, 4, 16);
        let query = random_features(&mut rng, 4, 4, 16);
        let (_, _, diag) = cpgp_forward_diag(&params, &anchor, &query).unwrap();
        assert!(diag.max_attention_row_sum_error < 1e-6);
    }

    #[test]
    fn permutation_equivariance_without_positional_encoding() {
        let mut params = CpgpParams::seeded(12, 8, 2, 2, 7).unwrap();
        params.positional_encoding = false;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let anchor = random_features(&mut rng, 3, 3, 12);
        let query = random_features(&mut rng, 3, 3, 12);
        let (a0, q0) = cpgp_forward(&params, &anchor, &query).unwrap();

        // Reverse the query token order.
        let n = query.tokens.nrows();
        let permuted = Array2::from_shape_fn(query.tokens.raw_dim(), |(i, j)| {
            query.tokens[(n - 1 - i, j)]
        });
        let query_p = FusedFeatures::new(permuted, 3, 3).unwrap();
        let (a1, q1) = cpgp_forward(&params, &anchor, &query_p).unwrap();

        let anchor_drift = (&a0.tokens - &a1.tokens).mapv(f64::abs).fold(0.0, |m: f64, &x| m.max(x));
        assert!(anchor_drift < 1e-5, "anchor output not permutation invariant: {anchor_drift}");
        for i in 0..n {
            for j in 0..q0.tokens.ncols() {
                assert!((q0.tokens[(i, j)] - q1.tokens[(n - 1 - i, j)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_layers_identity_params_is_identity() {
        let params = CpgpParams::identity(10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let anchor = random_features(&mut rng, 2, 5, 10);
        let query = random_features(&mut rng, 2, 5, 10);
        let (a, q) = cpgp_forward(&params, &anchor, &query).unwrap();
        assert_eq!(a.tokens, anchor.tokens);
        assert_eq!(q.tokens, query.tokens);
    }

    #[test]
    fn forward_finite_for_extreme_inputs() {
        let params = CpgpParams::seeded(8, 8, 2, 2, 10).unwrap();
        let big = FusedFeatures::new(Array2::from_elem((16, 8), 1e6), 4, 4).unwrap();
        let (a, q) = cpgp_forward(&params, &big, &big).unwrap();
        assert!(a.tokens.iter().all(|x| x.is_finite()));
        assert!(q.tokens.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let params = CpgpParams::seeded(8, 4, 1, 2, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let anchor = random_features(&mut rng, 2, 2, 9);
        let query = random_features(&mut rng, 2, 2, 9);
        assert!(matches!(
            cpgp_forward(&params, &anchor, &query),
            Err(FicopError::Validation(_))
        ));
    }

    #[test]
    fn decode_shapes_and_unit_norm() {
        let c = 6;
        let params = DecoderParams::seeded(c, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let feat = random_features(&mut rng, 4, 4, c);
        let mask = Array2::<u8>::ones((32, 32));
        let out = decode(&params, &feat, &mask, (32, 32)).unwrap();
        assert_eq!(out.dim(), (32, 32, c));
        for y in 0..32 {
            for x in 0..32 {
                let n: f32 = (0..c).map(|i| out[(y, x, i)].powi(2)).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5 || n == 0.0, "norm {n} at ({y},{x})");
            }
        }
    }

    #[test]
    fn decode_zero_mask_is_finite() {
        let params = DecoderParams::seeded(4, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let feat = random_features(&mut rng, 2, 2, 4);
        let mask = Array2::<u8>::zeros((16, 16));
        let out = decode(&params, &feat, &mask, (16, 16)).unwrap();
        assert!(out.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn decode_identity_convs_constant_field_stays_constant() {
        let c = 5;
        let params = DecoderParams::identity(c);
        let tokens = Array2::from_elem((4, c), 0.3);
        let feat = FusedFeatures::new(tokens, 2, 2).unwrap();
        let mask = Array2::<u8>::ones((16, 16));
        let out = decode(&params, &feat, &mask, (16, 16)).unwrap();
        let expect = 1.0 / (c as f32).sqrt();
        for v in out.iter() {
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_bad_ratio_rejected() {
        let params = DecoderParams::seeded(4, 17);
        let feat = FusedFeatures::new(Array2::zeros((4, 4)), 2, 2).unwrap();
        let mask = Array2::<u8>::zeros((8, 8));
        assert!(matches!(
            decode(&params, &feat, &mask, (8, 8)),
            Err(FicopError::Validation(_))
        ));
    }
}
