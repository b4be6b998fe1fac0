//! Test-support oracles, independent of the production computation path.
//!
//! The centerpiece is a plain-loop f64 re-implementation of the model
//! forward and the masked mean NLL. Finite differences of this reference
//! are trustworthy to ~1e-10, so analytic f32 gradients from the tape can
//! be checked against it at the 1e-3/1e-5 tolerances without the f32
//! rounding of the production forward polluting the oracle.

use irepair_core::model::{Activation, GptModel, ModelConfig, TokenId};
use std::collections::HashMap;

/// f64 copy of a model's parameters, addressable by name.
pub struct F64Model {
    pub cfg: ModelConfig,
    params: HashMap<String, Vec<f64>>,
}

impl F64Model {
    pub fn from_model(model: &GptModel) -> F64Model {
        let params = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.data.iter().map(|&v| v as f64).collect()))
            .collect();
        F64Model { cfg: model.config().clone(), params }
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.params.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    fn p(&self, name: &str) -> &[f64] {
        self.params.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    /// Causally masked logits for one row, [seq][vocab].
    fn row_logits(&self, tokens: &[TokenId]) -> Vec<Vec<f64>> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let seq = tokens.len();
        let wte = self.p("wte");
        let wpe = self.p("wpe");

        // embeddings
        let mut x: Vec<Vec<f64>> = (0..seq)
            .map(|t| {
                let tok = tokens[t] as usize;
                (0..d).map(|c| wte[tok * d + c] + wpe[t * d + c]).collect()
            })
            .collect();

        for b in 0..self.cfg.n_blocks {
            let h1 = layernorm_rows(&x, self.p(&format!("block{b}.ln1.gain")), self.p(&format!("block{b}.ln1.bias")));
            // attention: per head, causal softmax over scaled dot products
            let mut attn_out = vec![vec![0.0f64; d]; seq];
            for h in 0..heads {
                let wq = self.p(&format!("block{b}.attn.head{h}.wq"));
                let bq = self.p(&format!("block{b}.attn.head{h}.bq"));
                let wk = self.p(&format!("block{b}.attn.head{h}.wk"));
                let bk = self.p(&format!("block{b}.attn.head{h}.bk"));
                let wv = self.p(&format!("block{b}.attn.head{h}.wv"));
                let bv = self.p(&format!("block{b}.attn.head{h}.bv"));
                let proj = |row: &[f64], w: &[f64], bias: &[f64]| -> Vec<f64> {
                    (0..dh)
                        .map(|j| bias[j] + (0..d).map(|i| row[i] * w[i * dh + j]).sum::<f64>())
                        .collect()
                };
                let q: Vec<Vec<f64>> = h1.iter().map(|r| proj(r, wq, bq)).collect();
                let k: Vec<Vec<f64>> = h1.iter().map(|r| proj(r, wk, bk)).collect();
                let v: Vec<Vec<f64>> = h1.iter().map(|r| proj(r, wv, bv)).collect();
                let scale = 1.0 / (dh as f64).sqrt();
                for t in 0..seq {
                    let scores: Vec<f64> = (0..=t)
                        .map(|s| scale * q[t].iter().zip(&k[s]).map(|(a, b)| a * b).sum::<f64>())
                        .collect();
                    let weights = softmax(&scores);
                    for (s, w) in weights.iter().enumerate() {
                        for j in 0..dh {
                            attn_out[t][h * dh + j] += w * v[s][j];
                        }
                    }
                }
            }
            let wo = self.p(&format!("block{b}.attn.wo"));
            let bo = self.p(&format!("block{b}.attn.bo"));
            for t in 0..seq {
                let proj: Vec<f64> = (0..d)
                    .map(|j| bo[j] + (0..d).map(|i| attn_out[t][i] * wo[i * d + j]).sum::<f64>())
                    .collect();
                for c in 0..d {
                    x[t][c] += proj[c];
                }
            }

            let h2 = layernorm_rows(&x, self.p(&format!("block{b}.ln2.gain")), self.p(&format!("block{b}.ln2.bias")));
            let w1 = self.p(&format!("block{b}.ffn.w1"));
            let b1 = self.p(&format!("block{b}.ffn.b1"));
            let w2 = self.p(&format!("block{b}.ffn.w2"));
            let b2 = self.p(&format!("block{b}.ffn.b2"));
            let f = self.cfg.d_ffn;
            for t in 0..seq {
                let mut hidden: Vec<f64> = (0..f)
                    .map(|j| b1[j] + (0..d).map(|i| h2[t][i] * w1[i * f + j]).sum::<f64>())
                    .collect();
                for hval in hidden.iter_mut() {
                    *hval = match self.cfg.activation {
                        Activation::Gelu => gelu(*hval),
                        Activation::Relu => hval.max(0.0),
                    };
                }
                for c in 0..d {
                    x[t][c] += b2[c] + (0..f).map(|j| hidden[j] * w2[j * d + c]).sum::<f64>();
                }
            }
        }

        let hf = layernorm_rows(&x, self.p("lnf.gain"), self.p("lnf.bias"));
        // tied head
        let vocab = self.cfg.vocab_size;
        (0..seq)
            .map(|t| {
                (0..vocab)
                    .map(|vtok| (0..d).map(|c| hf[t][c] * wte[vtok * d + c]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    /// Mean over non-pad targets of -log softmax(logits)[target].
    pub fn nll(&self, inputs: &[Vec<TokenId>], targets: &[Vec<TokenId>]) -> f64 {
        let pad = self.cfg.pad_id;
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (row, tgt_row) in inputs.iter().zip(targets) {
            let logits = self.row_logits(row);
            for (t, &tgt) in tgt_row.iter().enumerate() {
                if tgt != pad {
                    let probs = softmax(&logits[t]);
                    total -= probs[tgt as usize].ln();
                    count += 1;
                }
            }
        }
        total / count as f64
    }
}

fn layernorm_rows(x: &[Vec<f64>], gain: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    let eps = 1e-5f64;
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) * inv * gain[c] + bias[c])
                .collect()
        })
        .collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn gelu(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + 0.044715 * x * x * x)).tanh())
}

/// Relative/absolute gradient agreement: |a - b| <= max(abs_tol, rel_tol * max(|a|, |b|)).
pub fn grads_agree(analytic: f64, reference: f64, rel_tol: f64, abs_tol: f64) -> bool {
    (analytic - reference).abs() <= abs_tol.max(rel_tol * analytic.abs().max(reference.abs()))
}
