//! Parameter-set persistence: every weight tensor as a named FTZ file in a
//! directory, plus a JSON index recording hyperparameters and the tensor
//! manifest. Loads are validated against the index.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::cpgp::{
    AttentionParams, CpgpLayerParams, CpgpParams, DecoderParams, DecoderStageParams,
    FeedForwardParams, FuseParams, LayerNormParams,
};
use crate::error::{FicopError, Result};
use crate::pcp::{ConvBlockParams, PcpParams};
use crate::tensor_io::{read_tensor, write_tensor, TensorBlob, TensorData};

/// All learned parameters of the forward path.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub fuse: FuseParams,
    pub cpgp: CpgpParams,
    pub pcp: PcpParams,
    pub decoder: DecoderParams,
    pub text_dim: usize,
}

impl ParamSet {
    /// Deterministic random initialization; the layout matches what the
    /// pipeline's network path expects for `c`-channel features and patch
    /// size `patch`.
    pub fn seeded(c: usize, patch: usize, seed: u64) -> Result<Self> {
        let c_down = if c >= 32 { 32 } else { c };
        if c_down % 4 != 0 {
            return Err(FicopError::Config(format!(
                "feature dim {c} gives c_down {c_down}, not divisible by 4 heads"
            )));
        }
        let text_dim = 16;
        Ok(Self {
            fuse: FuseParams::seeded(c, c, text_dim, seed),
            cpgp: CpgpParams::seeded(c, c_down, 2, 4, seed.wrapping_add(1))?,
            pcp: PcpParams::seeded(patch, 2, seed.wrapping_add(2))?,
            decoder: DecoderParams::seeded(c, seed.wrapping_add(3)),
            text_dim,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamIndex {
    c_in: usize,
    c_down: usize,
    n_heads: usize,
    n_layers: usize,
    patch: usize,
    n_blocks: usize,
    text_dim: usize,
    positional_encoding: bool,
    pcp_final_bias: f64,
    /// tensor name -> shape, for load-time validation.
    tensors: BTreeMap<String, Vec<usize>>,
}

fn blob(shape: Vec<usize>, data: Vec<f64>) -> Result<TensorBlob> {
    TensorBlob::new(shape, TensorData::F64(data))
}

struct Saver<'a> {
    dir: &'a Path,
    index: BTreeMap<String, Vec<usize>>,
}

impl Saver<'_> {
    fn put(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let b = blob(shape.clone(), data)?;
        write_tensor(&b, &self.dir.join(format!("{name}.ftz")))?;
        self.index.insert(name.to_string(), shape);
        Ok(())
    }

    fn a1(&mut self, name: &str, a: &Array1<f64>) -> Result<()> {
        self.put(name, vec![a.len()], a.to_vec())
    }

    fn a2(&mut self, name: &str, a: &Array2<f64>) -> Result<()> {
        let (r, c) = a.dim();
        self.put(name, vec![r, c], a.iter().copied().collect())
    }

    fn a3(&mut self, name: &str, a: &Array3<f64>) -> Result<()> {
        let d = a.dim();
        self.put(name, vec![d.0, d.1, d.2], a.iter().copied().collect())
    }

    fn a4(&mut self, name: &str, a: &Array4<f64>) -> Result<()> {
        let d = a.dim();
        self.put(name, vec![d.0, d.1, d.2, d.3], a.iter().copied().collect())
    }

    fn ln(&mut self, prefix: &str, p: &LayerNormParams) -> Result<()> {
        self.a1(&format!("{prefix}.gain"), &p.gain)?;
        self.a1(&format!("{prefix}.bias"), &p.bias)
    }

    fn attn(&mut self, prefix: &str, p: &AttentionParams) -> Result<()> {
        self.a2(&format!("{prefix}.wq"), &p.wq)?;
        self.a2(&format!("{prefix}.wk"), &p.wk)?;
        self.a2(&format!("{prefix}.wv"), &p.wv)?;
        self.a2(&format!("{prefix}.wo"), &p.wo)
    }
}

struct Loader<'a> {
    dir: &'a Path,
    index: &'a ParamIndex,
}

impl Loader<'_> {
    fn raw(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let path = self.dir.join(format!("{name}.ftz"));
        let expect = self.index.tensors.get(name).ok_or_else(|| {
            FicopError::format(&path, format!("tensor {name} missing from index"))
        })?;
        let b = read_tensor(&path)?;
        if b.shape() != &expect[..] {
            return Err(FicopError::format(
                &path,
                format!("shape {:?} does not match index {:?}", b.shape(), expect),
            ));
        }
        match b.data() {
            TensorData::F64(v) => Ok((b.shape().to_vec(), v.clone())),
            other => Err(FicopError::format(
                &path,
                format!("expected f64 tensor, found {:?}", other.dtype()),
            )),
        }
    }

    fn a1(&self, name: &str) -> Result<Array1<f64>> {
        let (_, v) = self.raw(name)?;
        Ok(Array1::from_vec(v))
    }

    fn a2(&self, name: &str) -> Result<Array2<f64>> {
        let (s, v) = self.raw(name)?;
        Array2::from_shape_vec((s[0], s[1]), v)
            .map_err(|e| FicopError::Validation(e.to_string()))
    }

    fn a3(&self, name: &str) -> Result<Array3<f64>> {
        let (s, v) = self.raw(name)?;
        Array3::from_shape_vec((s[0], s[1], s[2]), v)
            .map_err(|e| FicopError::Validation(e.to_string()))
    }

    fn a4(&self, name: &str) -> Result<Array4<f64>> {
        let (s, v) = self.raw(name)?;
        Array4::from_shape_vec((s[0], s[1], s[2], s[3]), v)
            .map_err(|e| FicopError::Validation(e.to_string()))
    }

    fn ln(&self, prefix: &str) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.a1(&format!("{prefix}.gain"))?,
            bias: self.a1(&format!("{prefix}.bias"))?,
        })
    }

    fn attn(&self, prefix: &str) -> Result<AttentionParams> {
        Ok(AttentionParams {
            wq: self.a2(&format!("{prefix}.wq"))?,
            wk: self.a2(&format!("{prefix}.wk"))?,
            wv: self.a2(&format!("{prefix}.wv"))?,
            wo: self.a2(&format!("{prefix}.wo"))?,
        })
    }
}

impl ParamSet {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| FicopError::io(dir, e))?;
        let mut s = Saver { dir, index: BTreeMap::new() };

        s.a2("fuse.w_visual", &self.fuse.w_visual)?;
        s.a2("fuse.w_text", &self.fuse.w_text)?;
        s.ln("fuse.ln", &self.fuse.ln)?;

        s.a2("cpgp.down_proj", &self.cpgp.down_proj)?;
        s.a2("cpgp.up_proj", &self.cpgp.up_proj)?;
        for (i, layer) in self.cpgp.layers.iter().enumerate() {
            let p = format!("cpgp.layer{i}");
            s.attn(&format!("{p}.self_attn"), &layer.self_attn)?;
            s.attn(&format!("{p}.cross_attn"), &layer.cross_attn)?;
            s.ln(&format!("{p}.ln_self"), &layer.ln_self)?;
            s.ln(&format!("{p}.ln_cross"), &layer.ln_cross)?;
            s.ln(&format!("{p}.ln_ff"), &layer.ln_ff)?;
            s.a2(&format!("{p}.ff.w1"), &layer.ff.w1)?;
            s.a1(&format!("{p}.ff.b1"), &layer.ff.b1)?;
            s.a2(&format!("{p}.ff.w2"), &layer.ff.w2)?;
            s.a1(&format!("{p}.ff.b2"), &layer.ff.b2)?;
        }

        for (i, b) in self.pcp.blocks.iter().enumerate() {
            let p = format!("pcp.block{i}");
            s.a4(&format!("{p}.weights"), &b.weights)?;
            s.a1(&format!("{p}.bias"), &b.bias)?;
            s.a1(&format!("{p}.bn_gain"), &b.bn_gain)?;
            s.a1(&format!("{p}.bn_bias"), &b.bn_bias)?;
            s.a1(&format!("{p}.bn_mean"), &b.bn_mean)?;
            s.a1(&format!("{p}.bn_var"), &b.bn_var)?;
        }
        s.a3("pcp.final_weights", &self.pcp.final_weights)?;

        for (i, st) in self.decoder.stages.iter().enumerate() {
            let p = format!("decoder.stage{i}");
            s.a4(&format!("{p}.weights"), &st.weights)?;
            s.a1(&format!("{p}.bias"), &st.bias)?;
        }

        let index = ParamIndex {
            c_in: self.cpgp.c_in,
            c_down: self.cpgp.c_down,
            n_heads: self.cpgp.n_heads,
            n_layers: self.cpgp.layers.len(),
            patch: self.pcp.patch,
            n_blocks: self.pcp.blocks.len(),
            text_dim: self.text_dim,
            positional_encoding: self.cpgp.positional_encoding,
            pcp_final_bias: self.pcp.final_bias,
            tensors: s.index,
        };
        let path = dir.join("index.json");
        let f = std::fs::File::create(&path).map_err(|e| FicopError::io(&path, e))?;
        serde_json::to_writer_pretty(f, &index)
            .map_err(|e| FicopError::format(&path, e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let f = std::fs::File::open(&path).map_err(|e| FicopError::io(&path, e))?;
        let index: ParamIndex = serde_json::from_reader(f)
            .map_err(|e| FicopError::format(&path, e.to_string()))?;
        let l = Loader { dir, index: &index };

        let fuse = FuseParams {
            w_visual: l.a2("fuse.w_visual")?,
            w_text: l.a2("fuse.w_text")?,
            ln: l.ln("fuse.ln")?,
        };

        let mut layers = Vec::with_capacity(index.n_layers);
        for i in 0..index.n_layers {
            let p = format!("cpgp.layer{i}");
            layers.push(CpgpLayerParams {
                self_attn: l.attn(&format!("{p}.self_attn"))?,
                cross_attn: l.attn(&format!("{p}.cross_attn"))?,
                ln_self: l.ln(&format!("{p}.ln_self"))?,
                ln_cross: l.ln(&format!("{p}.ln_cross"))?,
                ln_ff: l.ln(&format!("{p}.ln_ff"))?,
                ff: FeedForwardParams {
                    w1: l.a2(&format!("{p}.ff.w1"))?,
                    b1: l.a1(&format!("{p}.ff.b1"))?,
                    w2: l.a2(&format!("{p}.ff.w2"))?,
                    b2: l.a1(&format!("{p}.ff.b2"))?,
                },
            });
        }
        let cpgp = CpgpParams {
            c_in: index.c_in,
            c_down: index.c_down,
            n_heads: index.n_heads,
            layers,
            down_proj: l.a2("cpgp.down_proj")?,
            up_proj: l.a2("cpgp.up_proj")?,
            positional_encoding: index.positional_encoding,
        };

        let mut blocks = Vec::with_capacity(index.n_blocks);
        for i in 0..index.n_blocks {
            let p = format!("pcp.block{i}");
            blocks.push(ConvBlockParams {
                weights: l.a4(&format!("{p}.weights"))?,
                bias: l.a1(&format!("{p}.bias"))?,
                bn_gain: l.a1(&format!("{p}.bn_gain"))?,
                bn_bias: l.a1(&format!("{p}.bn_bias"))?,
                bn_mean: l.a1(&format!("{p}.bn_mean"))?,
                bn_var: l.a1(&format!("{p}.bn_var"))?,
            });
        }
        let pcp = PcpParams {
            patch: index.patch,
            blocks,
            final_weights: l.a3("pcp.final_weights")?,
            final_bias: index.pcp_final_bias,
        };

        let mut stages = Vec::new();
        for i in 0..3 {
            let p = format!("decoder.stage{i}");
            stages.push(DecoderStageParams {
                weights: l.a4(&format!("{p}.weights"))?,
                bias: l.a1(&format!("{p}.bias"))?,
            });
        }
        Ok(Self {
            fuse,
            cpgp,
            pcp,
            decoder: DecoderParams { stages },
            text_dim: index.text_dim,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip_exact() {
        let set = ParamSet::seeded(32, 2, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        let back = ParamSet::load(dir.path()).unwrap();
        assert_eq!(set.fuse.w_visual, back.fuse.w_visual);
        assert_eq!(set.cpgp.layers.len(), back.cpgp.layers.len());
        assert_eq!(
            set.cpgp.layers[1].cross_attn.wk,
            back.cpgp.layers[1].cross_attn.wk
        );
        assert_eq!(set.pcp.blocks[0].bn_var, back.pcp.blocks[0].bn_var);
        assert_eq!(set.pcp.final_weights, back.pcp.final_weights);
        assert_eq!(set.decoder.stages[2].weights, back.decoder.stages[2].weights);
        assert_eq!(set.text_dim, back.text_dim);
    }

    #[test]
    fn load_rejects_shape_tamper() {
        let set = ParamSet::seeded(16, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        // Overwrite a tensor with a wrong shape.
        let bad = blob(vec![2, 2], vec![0.0; 4]).unwrap();
        write_tensor(&bad, &dir.path().join("fuse.w_visual.ftz")).unwrap();
        assert!(ParamSet::load(dir.path()).is_err());
    }
}
