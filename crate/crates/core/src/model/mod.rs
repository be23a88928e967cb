//! Decoder-only transformer predicting a distribution over `K` sphere
//! directions plus an end-of-fiber class at every streamline point.
//!
//! Pipeline per sequence: voxel-cube embedding (one valid 3x3x3 convolution,
//! or a linear map of the centre voxel when the CNN is disabled), sinusoidal
//! positions, `n_layers` post-norm causal decoder layers, and a two-layer
//! head producing `K + 1` logits.

pub mod checkpoint;
pub mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sphere::SoftLabel;
use crate::volume::VoxelCube;
use crate::{Error, Result};
pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint};
pub use tensor::{Graph, Gradients, NodeId, Param, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout_p: f64,
    pub g_in: usize,
    pub use_cnn3d: bool,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 724,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 128,
            dropout_p: 0.1,
            g_in: 100,
            use_cnn3d: true,
            max_len: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("k", self.k),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("g_in", self.g_in),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::invalid("d_model must be even for sinusoidal positions"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Width of one embedding input row.
    pub fn embed_inputs(&self) -> usize {
        if self.use_cnn3d { 27 * self.g_in } else { self.g_in }
    }

    pub fn classes(&self) -> usize {
        self.k + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct ParamIds {
    embed_w: ParamId,
    embed_b: ParamId,
    layers: Vec<LayerIds>,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

/// All learnable weights, in declaration (serialisation) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    ids: ParamIds,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor { shape: vec![fan_in, fan_out], data }
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, unit norm scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, f) = (config.d_model, config.d_ffn);
        let mut linear = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            (store.push(format!("{name}.weight"), xavier(&mut rng, i, o)), store.push(format!("{name}.bias"), Tensor::zeros(vec![o])))
        };
        let (embed_w, embed_b) = linear(&mut store, "embed", config.embed_inputs(), d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            let (wq, bq) = linear(&mut store, &format!("{p}.attn.q"), d, d);
            let (wk, bk) = linear(&mut store, &format!("{p}.attn.k"), d, d);
            let (wv, bv) = linear(&mut store, &format!("{p}.attn.v"), d, d);
            let (wo, bo) = linear(&mut store, &format!("{p}.attn.o"), d, d);
            let ln1_gamma = store.push(format!("{p}.ln1.gamma"), Tensor { shape: vec![d], data: vec![1.0; d] });
            let ln1_beta = store.push(format!("{p}.ln1.beta"), Tensor::zeros(vec![d]));
            let (w1, b1) = linear(&mut store, &format!("{p}.ffn.1"), d, f);
            let (w2, b2) = linear(&mut store, &format!("{p}.ffn.2"), f, d);
            let ln2_gamma = store.push(format!("{p}.ln2.gamma"), Tensor { shape: vec![d], data: vec![1.0; d] });
            let ln2_beta = store.push(format!("{p}.ln2.beta"), Tensor::zeros(vec![d]));
            layers.push(LayerIds {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_gamma,
                ln1_beta,
                w1,
                b1,
                w2,
                b2,
                ln2_gamma,
                ln2_beta,
            });
        }
        let (head_w1, head_b1) = linear(&mut store, "head.1", d, d);
        let (head_w2, head_b2) = linear(&mut store, "head.2", d, config.classes());
        let ids = ParamIds { embed_w, embed_b, layers, head_w1, head_b1, head_w2, head_b2 };
        Ok(Self { config, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_finite(&self) -> bool {
        self.store.iter().all(|p| p.value.data.iter().all(|v| v.is_finite()))
    }

    fn embed_row<'a>(&self, cube: &'a VoxelCube) -> Result<&'a [f64]> {
        if cube.channels() != self.config.g_in {
            return Err(Error::invalid(format!(
                "cube has {} channels, model expects {}",
                cube.channels(),
                self.config.g_in
            )));
        }
        Ok(if self.config.use_cnn3d { cube.values() } else { cube.center_values() })
    }

    /// `[n x d_model]` token matrix for a cube sequence.
    pub fn embed_sequence(&self, g: &mut Graph, cubes: &[&VoxelCube]) -> Result<NodeId> {
        let width = self.config.embed_inputs();
        let mut data = Vec::with_capacity(cubes.len() * width);
        for cube in cubes {
            data.extend_from_slice(self.embed_row(cube)?);
        }
        let x = g.input(Tensor { shape: vec![cubes.len(), width], data });
        let w = g.param(self.ids.embed_w);
        let b = g.param(self.ids.embed_b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// Token for one cube; bit-identical to the matching row of
    /// [`ModelParams::embed_sequence`].
    pub fn embed_cube(&self, cube: &VoxelCube) -> Result<Vec<f64>> {
        let row = self.embed_row(cube)?;
        let d = self.config.d_model;
        let mut out = vec![0.0; d];
        let w = &self.store.get(self.ids.embed_w).value.data;
        tensor::kernels::matmul(row, w, &mut out, 1, row.len(), d);
        for (o, b) in out.iter_mut().zip(&self.store.get(self.ids.embed_b).value.data) {
            *o += b;
        }
        Ok(out)
    }

    /// Adds positions to `tokens` and runs the decoder stack and head.
    /// Dropout follows the graph's train mode.
    pub fn decoder_forward(&self, g: &mut Graph, tokens: NodeId, valid: &[bool]) -> Result<NodeId> {
        let x = self.decoder_hidden(g, tokens, valid)?;
        self.head(g, x)
    }

    /// Decoder stack output `[n x d_model]` before the head.
    pub fn decoder_hidden(&self, g: &mut Graph, tokens: NodeId, valid: &[bool]) -> Result<NodeId> {
        let d = self.config.d_model;
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::invalid(format!("tokens must be [n x {d}], got {shape:?}")));
        }
        let n = shape[0];
        if n > self.config.max_len {
            return Err(Error::invalid(format!("sequence length {n} exceeds max_len {}", self.config.max_len)));
        }
        if valid.len() != n {
            return Err(Error::invalid(format!("padding mask length {} for {n} tokens", valid.len())));
        }
        let pe = g.input(positional_encoding(n, d)?);
        let mut x = g.add(tokens, pe)?;
        for l in &self.ids.layers {
            let q = self.linear(g, x, l.wq, l.bq)?;
            let k = self.linear(g, x, l.wk, l.bk)?;
            let v = self.linear(g, x, l.wv, l.bv)?;
            let a = g.causal_attention(q, k, v, self.config.n_heads, valid)?;
            let a = self.linear(g, a, l.wo, l.bo)?;
            let r = g.add(x, a)?;
            let (gm, bt) = (g.param(l.ln1_gamma), g.param(l.ln1_beta));
            let x1 = g.layer_norm(r, gm, bt)?;

            let h = self.linear(g, x1, l.w1, l.b1)?;
            let h = g.gelu(h);
            let h = g.dropout(h);
            let h = self.linear(g, h, l.w2, l.b2)?;
            let r = g.add(x1, h)?;
            let (gm, bt) = (g.param(l.ln2_gamma), g.param(l.ln2_beta));
            x = g.layer_norm(r, gm, bt)?;
        }
        Ok(x)
    }

    /// Row-wise output head: `d_model -> d_model -> K + 1`.
    pub fn head(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = self.linear(g, x, self.ids.head_w1, self.ids.head_b1)?;
        let h = g.gelu(h);
        self.linear(g, h, self.ids.head_w2, self.ids.head_b2)
    }

    /// Eval-mode logits of the final position only. Equal bit for bit to the
    /// last row of [`ModelParams::logits_from_tokens`].
    pub fn last_logits(&self, tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
        let d = self.config.d_model;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        let mut data = Vec::with_capacity(n * d);
        for t in tokens {
            if t.len() != d {
                return Err(Error::invalid(format!("token of width {}, expected {d}", t.len())));
            }
            data.extend_from_slice(t);
        }
        let mut g = Graph::inference(&self.store);
        let t = g.input(Tensor { shape: vec![n, d], data });
        let x = self.decoder_hidden(&mut g, t, &vec![true; n])?;
        let last = g.input(Tensor { shape: vec![1, d], data: g.value(x)[(n - 1) * d..].to_vec() });
        let out = self.head(&mut g, last)?;
        Ok(g.value(out).to_vec())
    }

    fn linear(&self, g: &mut Graph, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let (w, b) = (g.param(w), g.param(b));
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// Eval-mode logits `[n x (K+1)]` from precomputed tokens.
    pub fn logits_from_tokens(&self, tokens: Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let valid = vec![true; tokens.rows()];
        let t = g.input(tokens);
        let out = self.decoder_forward(&mut g, t, &valid)?;
        Ok(g.tensor(out))
    }

    /// Eval-mode logits for a cube sequence.
    pub fn logits(&self, cubes: &[&VoxelCube]) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let t = self.embed_sequence(&mut g, cubes)?;
        let out = self.decoder_forward(&mut g, t, &vec![true; cubes.len()])?;
        Ok(g.tensor(out))
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(..)`.
pub fn positional_encoding(n: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::invalid(format!("d_model {d_model} must be even and positive")));
    }
    let mut data = vec![0.0; n * d_model];
    for pos in 0..n {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor { shape: vec![n, d_model], data })
}

/// Stable softmax of one logits row.
pub fn predict_fodf(logits: &[f64]) -> Result<SoftLabel> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits must be finite and non-empty"));
    }
    let mut p = vec![0.0; logits.len()];
    tensor::kernels::softmax_into(logits, &mut p);
    Ok(SoftLabel::from_raw(p))
}
