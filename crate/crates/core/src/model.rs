//! Minimal decoder-only GPT-style model with a block-indexed parameter
//! registry, so whole transformer blocks can be addressed by slicing.
//!
//! Layout follows GPT-2 conventions: learned positional embeddings,
//! pre-layernorm blocks (LN -> attention -> residual, LN -> FFN ->
//! residual), GELU by default, and an output head weight-tied to the token
//! embedding. The tied head means embedding and head live in the registry's
//! `excluded` group together, outside every block.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::{softmax_rows, Tape, TensorId};
use crate::error::{Error, Result};
use crate::rng;

pub type TokenId = u32;
pub type ParamId = usize;

const LN_EPS: f32 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 4] = b"IRPR";
const CHECKPOINT_VERSION: u32 = 1;

/// FFN non-linearity. GPT-2 uses GELU; ReLU is the generic transformer form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ffn: usize,
    pub pad_id: TokenId,
    pub bos_id: TokenId,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.context_length == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.n_blocks == 0
            || self.d_ffn == 0
        {
            return Err(Error::Config("model dimensions must all be at least 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.pad_id == self.bos_id {
            return Err(Error::Config("pad_id and bos_id must differ".into()));
        }
        if self.pad_id as usize >= self.vocab_size || self.bos_id as usize >= self.vocab_size {
            return Err(Error::Config("pad_id/bos_id outside vocabulary".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which registry group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Block(usize),
    /// Token/positional embeddings, final layernorm, tied head.
    Excluded,
}

/// A named trainable parameter.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Maps every parameter to exactly one transformer block or to `excluded`.
#[derive(Debug, Clone)]
pub struct BlockRegistry {
    groups: Vec<ParamGroup>,
    n_blocks: usize,
}

impl BlockRegistry {
    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id]
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Exactly the parameters of one block; disjoint across blocks.
    pub fn params_of_block(&self, block: usize) -> Result<Vec<ParamId>> {
        if block >= self.n_blocks {
            return Err(Error::Usage(format!(
                "block index {block} out of range for {} blocks",
                self.n_blocks
            )));
        }
        Ok(self
            .groups
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == ParamGroup::Block(block))
            .map(|(i, _)| i)
            .collect())
    }

    pub fn excluded_params(&self) -> Vec<ParamId> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == ParamGroup::Excluded)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Parameter ids of one attention head.
#[derive(Debug, Clone)]
struct HeadIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
}

/// Parameter ids of one transformer block: per-head Q/K/V projections and
/// the output projection, the two-layer FFN, and both layernorms.
#[derive(Debug, Clone)]
struct BlockIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    heads: Vec<HeadIds>,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Decoder-only transformer with tied embedding/head.
#[derive(Debug, Clone)]
pub struct GptModel {
    config: ModelConfig,
    params: Vec<Param>,
    registry: BlockRegistry,
    wte: ParamId,
    wpe: ParamId,
    blocks: Vec<BlockIds>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
}

/// Tape handles produced by one staged forward pass.
pub struct ForwardPass {
    /// Logits with shape [batch, seq, vocab].
    pub logits: TensorId,
    /// Tape leaf per model parameter, aligned with parameter ids.
    pub param_tensors: Vec<TensorId>,
}

/// Decoding mode for [`GptModel::generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenMode {
    Greedy,
    /// Sample from the smallest probability mass >= p, renormalized.
    Nucleus { p: f32, temperature: f32 },
}

struct LayoutBuilder {
    params: Vec<Param>,
    groups: Vec<ParamGroup>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>, group: ParamGroup) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.params.len();
        self.params.push(Param { name, shape, data });
        self.groups.push(group);
        id
    }
}

impl GptModel {
    /// Fresh model with GPT-2-style initialization (N(0, 0.02) weights,
    /// zero biases, unit layernorm gains), deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::rng_for(seed, 0x6d6f64); // model stream
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        Self::build(config, |shape: &[usize], kind: InitKind| {
            let n: usize = shape.iter().product();
            match kind {
                InitKind::Weight => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                InitKind::Zero => vec![0.0; n],
                InitKind::One => vec![1.0; n],
            }
        })
    }

    /// All-zero parameters (uniform logits); used by tests and oracles.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, |shape: &[usize], kind: InitKind| {
            let n: usize = shape.iter().product();
            match kind {
                InitKind::One => vec![1.0; n],
                _ => vec![0.0; n],
            }
        })
    }

    fn build(config: ModelConfig, mut init: impl FnMut(&[usize], InitKind) -> Vec<f32>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dh = config.head_dim();
        let f = config.d_ffn;
        let mut b = LayoutBuilder { params: Vec::new(), groups: Vec::new() };
        let mut add = |b: &mut LayoutBuilder, name: String, shape: Vec<usize>, kind: InitKind, group: ParamGroup| {
            let data = init(&shape, kind);
            b.add(name, shape, data, group)
        };

        let wte = add(&mut b, "wte".into(), vec![config.vocab_size, d], InitKind::Weight, ParamGroup::Excluded);
        let wpe = add(&mut b, "wpe".into(), vec![config.context_length, d], InitKind::Weight, ParamGroup::Excluded);

        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let g = ParamGroup::Block(i);
            let ln1_gain = add(&mut b, format!("block{i}.ln1.gain"), vec![d], InitKind::One, g);
            let ln1_bias = add(&mut b, format!("block{i}.ln1.bias"), vec![d], InitKind::Zero, g);
            let mut heads = Vec::with_capacity(config.n_heads);
            for h in 0..config.n_heads {
                let wq = add(&mut b, format!("block{i}.attn.head{h}.wq"), vec![d, dh], InitKind::Weight, g);
                let bq = add(&mut b, format!("block{i}.attn.head{h}.bq"), vec![dh], InitKind::Zero, g);
                let wk = add(&mut b, format!("block{i}.attn.head{h}.wk"), vec![d, dh], InitKind::Weight, g);
                let bk = add(&mut b, format!("block{i}.attn.head{h}.bk"), vec![dh], InitKind::Zero, g);
                let wv = add(&mut b, format!("block{i}.attn.head{h}.wv"), vec![d, dh], InitKind::Weight, g);
                let bv = add(&mut b, format!("block{i}.attn.head{h}.bv"), vec![dh], InitKind::Zero, g);
                heads.push(HeadIds { wq, bq, wk, bk, wv, bv });
            }
            let wo = add(&mut b, format!("block{i}.attn.wo"), vec![d, d], InitKind::Weight, g);
            let bo = add(&mut b, format!("block{i}.attn.bo"), vec![d], InitKind::Zero, g);
            let ln2_gain = add(&mut b, format!("block{i}.ln2.gain"), vec![d], InitKind::One, g);
            let ln2_bias = add(&mut b, format!("block{i}.ln2.bias"), vec![d], InitKind::Zero, g);
            let w1 = add(&mut b, format!("block{i}.ffn.w1"), vec![d, f], InitKind::Weight, g);
            let b1 = add(&mut b, format!("block{i}.ffn.b1"), vec![f], InitKind::Zero, g);
            let w2 = add(&mut b, format!("block{i}.ffn.w2"), vec![f, d], InitKind::Weight, g);
            let b2 = add(&mut b, format!("block{i}.ffn.b2"), vec![d], InitKind::Zero, g);
            blocks.push(BlockIds {
                ln1_gain, ln1_bias, heads, wo, bo, ln2_gain, ln2_bias, w1, b1, w2, b2,
            });
        }

        let lnf_gain = add(&mut b, "lnf.gain".into(), vec![d], InitKind::One, ParamGroup::Excluded);
        let lnf_bias = add(&mut b, "lnf.bias".into(), vec![d], InitKind::Zero, ParamGroup::Excluded);

        let registry = BlockRegistry { groups: b.groups, n_blocks: config.n_blocks };
        Ok(GptModel {
            config,
            params: b.params,
            registry,
            wte,
            wpe,
            blocks,
            lnf_gain,
            lnf_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &BlockRegistry {
        &self.registry
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param_data_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id].data
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Parameters outside the token/positional embedding tables (the tied
    /// head adds none). This is the N of the FLOPs closed form.
    pub fn non_embedding_param_count(&self) -> usize {
        self.params
            .iter()
            .enumerate()
            .filter(|(id, _)| *id != self.wte && *id != self.wpe)
            .map(|(_, p)| p.numel())
            .sum()
    }

    /// Byte-stable fingerprint of all parameter data (FNV-1a).
    pub fn param_fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        for p in &self.params {
            for v in &p.data {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x1_0000_01b3);
                }
            }
        }
        h
    }

    /// Causally masked logits for a padded batch of equal-length rows.
    ///
    /// Position t of the output depends only on tokens at positions <= t.
    /// Padding is not masked in attention; only losses mask it.
    pub fn forward_batch(&self, tape: &mut Tape, tokens: &[Vec<TokenId>], requires_grad: bool) -> Result<ForwardPass> {
        let batch = tokens.len();
        if batch == 0 {
            return Err(Error::Usage("forward: empty batch".into()));
        }
        let seq = tokens[0].len();
        if seq == 0 {
            return Err(Error::Usage("forward: empty sequence".into()));
        }
        if tokens.iter().any(|row| row.len() != seq) {
            return Err(Error::Shape("forward: ragged batch rows".into()));
        }
        if seq > self.config.context_length {
            return Err(Error::Usage(format!(
                "forward: sequence length {seq} exceeds context length {}",
                self.config.context_length
            )));
        }
        for row in tokens {
            if let Some(&bad) = row.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::Usage(format!(
                    "forward: token id {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }

        let param_tensors: Vec<TensorId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.shape.clone(), p.data.clone(), requires_grad))
            .collect::<Result<_>>()?;
        let pt = |id: ParamId| param_tensors[id];

        let flat_ids: Vec<usize> = tokens
            .iter()
            .flat_map(|row| row.iter().map(|&t| t as usize))
            .collect();
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();

        let tok_emb = tape.embedding(pt(self.wte), &flat_ids)?;
        let pos_emb = tape.embedding(pt(self.wpe), &pos_ids)?;
        let mut x = tape.add(tok_emb, pos_emb)?; // [batch*seq, d]

        let scale = 1.0 / (self.config.head_dim() as f32).sqrt();
        for block in &self.blocks {
            let h = tape.layernorm(x, pt(block.ln1_gain), pt(block.ln1_bias), LN_EPS)?;
            let mut rows = Vec::with_capacity(batch);
            for b in 0..batch {
                let hb = tape.slice_rows(h, b * seq, seq)?;
                let mut head_outs = Vec::with_capacity(block.heads.len());
                for head in &block.heads {
                    let q0 = tape.matmul(hb, pt(head.wq))?;
                    let q = tape.add_bias(q0, pt(head.bq))?;
                    let k0 = tape.matmul(hb, pt(head.wk))?;
                    let k = tape.add_bias(k0, pt(head.bk))?;
                    let v0 = tape.matmul(hb, pt(head.wv))?;
                    let v = tape.add_bias(v0, pt(head.bv))?;
                    let attn = attention_weights(tape, q, k, scale, true)?;
                    head_outs.push(tape.matmul(attn, v)?);
                }
                rows.push(tape.concat_cols(&head_outs)?);
            }
            let merged = if batch == 1 { rows[0] } else { tape.concat_rows(&rows)? };
            let proj0 = tape.matmul(merged, pt(block.wo))?;
            let proj = tape.add_bias(proj0, pt(block.bo))?;
            x = tape.add(x, proj)?;

            let h2 = tape.layernorm(x, pt(block.ln2_gain), pt(block.ln2_bias), LN_EPS)?;
            let f0 = tape.matmul(h2, pt(block.w1))?;
            let f1 = tape.add_bias(f0, pt(block.b1))?;
            let act = match self.config.activation {
                Activation::Gelu => tape.gelu(f1)?,
                Activation::Relu => tape.relu(f1)?,
            };
            let f2 = tape.matmul(act, pt(block.w2))?;
            let f3 = tape.add_bias(f2, pt(block.b2))?;
            x = tape.add(x, f3)?;
        }

        let h = tape.layernorm(x, pt(self.lnf_gain), pt(self.lnf_bias), LN_EPS)?;
        // Weight-tied head: logits = h * wte^T.
        let logits2d = tape.matmul_trans_b(h, pt(self.wte))?;
        let logits = tape.reshape(logits2d, vec![batch, seq, self.config.vocab_size])?;
        Ok(ForwardPass { logits, param_tensors })
    }

    /// Logits for a single sequence as a flat [seq * vocab] buffer.
    pub fn logits_vec(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let pass = self.forward_batch(&mut tape, &[tokens.to_vec()], false)?;
        Ok(tape.data(pass.logits).to_vec())
    }

    /// Extend `prompt` by up to `max_new` tokens; deterministic given `seed`.
    ///
    /// When the running sequence exceeds the context length, conditioning
    /// slides to the most recent window.
    pub fn generate(&self, prompt: &[TokenId], max_new: usize, mode: GenMode, seed: u64) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(Error::Usage("generate: empty prompt".into()));
        }
        if let GenMode::Nucleus { p, temperature } = mode {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("nucleus p must be in (0, 1], got {p}")));
            }
            if temperature <= 0.0 {
                return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
            }
        }
        let mut rng = rng::rng_for(seed, 0x67656e); // generation stream
        let vocab = self.config.vocab_size;
        let mut out = prompt.to_vec();
        for _ in 0..max_new {
            let start = out.len().saturating_sub(self.config.context_length);
            let window = &out[start..];
            let logits = self.logits_vec(window)?;
            let last = &logits[(window.len() - 1) * vocab..window.len() * vocab];
            let next = match mode {
                GenMode::Greedy => argmax_lowest(last),
                GenMode::Nucleus { p, temperature } => {
                    let scaled: Vec<f32> = last.iter().map(|&x| x / temperature).collect();
                    let probs = softmax_rows(&scaled, 1, vocab);
                    nucleus_sample(&probs, p, rng.gen::<f64>())
                }
            };
            out.push(next as TokenId);
        }
        Ok(out)
    }

    // ---- checkpoints -------------------------------------------------------

    /// Write the checkpoint: magic "IRPR", version u32, length-prefixed
    /// UTF-8 config JSON, then one record per parameter (name length + name,
    /// rank, dims as u64, raw f32 data), all little-endian.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
        buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(config_json.as_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Read a checkpoint written by [`GptModel::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<GptModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };

        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_len = cur.u32()? as usize;
        let config_bytes = cur.take(config_len)?;
        let config_str = std::str::from_utf8(config_bytes)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config: ModelConfig = serde_json::from_str(config_str)
            .map_err(|e| Error::Checkpoint(format!("config parse failed: {e}")))?;

        let mut model = GptModel::zeros(config)?;
        for id in 0..model.params.len() {
            let name_len = cur.u32()? as usize;
            let name_bytes = cur.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            if name != model.params[id].name {
                return Err(Error::Checkpoint(format!(
                    "parameter {id} named {:?}, expected {:?}",
                    name, model.params[id].name
                )));
            }
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            if shape != model.params[id].shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {shape:?}, expected {:?}",
                    model.params[id].shape
                )));
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 4)?;
            let dst = &mut model.params[id].data;
            for (i, chunk) in raw.chunks_exact(4).enumerate() {
                dst[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last parameter",
                bytes.len() - cur.pos
            )));
        }
        Ok(model)
    }
}

enum InitKind {
    Weight,
    Zero,
    One,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

/// Scaled-dot-product attention weights: softmax(q k^T * scale), optionally
/// causally masked. Shared by the model forward and by analysis probes.
pub fn attention_weights(tape: &mut Tape, q: TensorId, k: TensorId, scale: f32, causal: bool) -> Result<TensorId> {
    let scores = tape.matmul_trans_b(q, k)?;
    let scaled = if scale == 1.0 { scores } else { tape.scale(scores, scale)? };
    let masked = if causal { tape.causal_mask(scaled)? } else { scaled };
    tape.softmax(masked)
}

fn argmax_lowest(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Sample from the smallest prefix of the descending distribution whose
/// mass reaches `p`, renormalized. Ties in probability resolve by token id.
fn nucleus_sample(probs: &[f32], p: f32, u: f64) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut mass = 0.0f64;
    let mut cut = order.len();
    for (i, &idx) in order.iter().enumerate() {
        mass += probs[idx] as f64;
        if mass >= p as f64 {
            cut = i + 1;
            break;
        }
    }
    let kept = &order[..cut];
    let total: f64 = kept.iter().map(|&i| probs[i] as f64).sum();
    let mut dart = u * total;
    for &i in kept {
        dart -= probs[i] as f64;
        if dart <= 0.0 {
            return i;
        }
    }
    *kept.last().expect("nucleus set is never empty")
}
