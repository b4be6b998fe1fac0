//! Plain language-model training, used to produce the base models that
//! repair runs start from. The corpus (clean lines mixed with contaminated
//! ones) is concatenated into a token stream, chunked into fixed windows,
//! and trained with next-token NLL under RMSProp and the warmup/decay
//! schedule. Every parameter updates; slicing plays no role here.

use crate::error::{Error, Result};
use crate::model::{GptModel, TokenId};
use crate::repair::{lr_schedule, RmsPropState};
use crate::rng;
use crate::slicing::{self, Criteria};
use crate::autograd::Tape;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Tokens per training window; capped by the model context.
    pub window: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 3000,
            learning_rate: 2e-3,
            warmup_steps: 100,
            batch_size: 8,
            window: 64,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean NLL per iteration.
    pub losses: Vec<f64>,
}

/// Train the model in place on the given bos-prefixed sequences.
pub fn pretrain(model: &mut GptModel, sequences: &[Vec<TokenId>], cfg: &PretrainConfig) -> Result<PretrainLog> {
    if sequences.is_empty() {
        return Err(Error::Config("pretrain: empty corpus".into()));
    }
    if cfg.iterations == 0 {
        return Err(Error::Config("pretrain: iterations must be positive".into()));
    }
    if cfg.warmup_steps >= cfg.iterations {
        return Err(Error::Config("pretrain: warmup must be shorter than the run".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain: batch_size must be positive".into()));
    }
    let window = cfg.window.min(model.config().context_length).max(2);

    // One long stream in seeded order, chunked into training windows.
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut rng::rng_for(cfg.seed, 0x737472)); // stream order
    let stream: Vec<TokenId> = order.iter().flat_map(|&i| sequences[i].iter().copied()).collect();
    let windows: Vec<Vec<TokenId>> = stream
        .chunks(window)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect();
    if windows.is_empty() {
        return Err(Error::Config("pretrain: corpus shorter than one window".into()));
    }

    let pad = model.config().pad_id;
    let mut state = RmsPropState::new(model, cfg.rmsprop_decay, cfg.rmsprop_eps);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut batch_order: Vec<usize> = Vec::new();

    for iter in 0..cfg.iterations {
        if cursor >= batch_order.len() {
            batch_order = (0..windows.len()).collect();
            batch_order.shuffle(&mut rng::rng_for(cfg.seed, 0x707265 ^ epoch));
            cursor = 0;
            epoch += 1;
        }
        let take = cfg.batch_size.min(batch_order.len() - cursor);
        let batch: Vec<Vec<TokenId>> = batch_order[cursor..cursor + take]
            .iter()
            .map(|&i| windows[i].clone())
            .collect();
        cursor += take;

        let crit = Criteria::from_sequences(&batch, pad)?;
        let mut tape = Tape::new();
        let (loss, pass) = slicing::nll_on_tape(&mut tape, model, &crit, true)?;
        let loss_value = tape.scalar(loss)? as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "pretrain diverged at iteration {iter}: loss {loss_value}"
            )));
        }
        tape.backward(loss)?;
        let lr = lr_schedule(iter, cfg.warmup_steps, cfg.iterations, cfg.learning_rate)?;
        for id in 0..model.params().len() {
            if let Some(grad) = tape.grad(pass.param_tensors[id]) {
                let grad = grad.to_vec();
                state.update(model, id, &grad, lr);
            }
        }
        losses.push(loss_value);
    }
    Ok(PretrainLog { losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, ToyTaskSpec};
    use crate::model::{Activation, ModelConfig};

    fn toy_model(vocab: usize, seed: u64) -> GptModel {
        GptModel::new(
            ModelConfig {
                vocab_size: vocab,
                context_length: 32,
                d_model: 16,
                n_heads: 2,
                n_blocks: 2,
                d_ffn: 32,
                pad_id: 0,
                bos_id: 1,
                activation: Activation::Gelu,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn loss_decreases_over_early_iterations() {
        let spec = ToyTaskSpec { clean_sentences: 80, pair_count: 8, ..Default::default() };
        let data = data::synth_toy_corpus(&spec, 3).unwrap();
        let tok = spec.tokenizer().unwrap();
        let seqs = data::tokenize_corpus(&tok, &data.clean_corpus).unwrap();
        let mut model = toy_model(tok.vocab_size(), 1);
        let cfg = PretrainConfig {
            iterations: 200,
            warmup_steps: 20,
            batch_size: 4,
            window: 32,
            learning_rate: 2e-3,
            ..Default::default()
        };
        let log = pretrain(&mut model, &seqs, &cfg).unwrap();
        let head: f64 = log.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = log.losses[log.losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head * 0.8,
            "training reduces loss: {head:.3} -> {tail:.3}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let spec = ToyTaskSpec { clean_sentences: 30, pair_count: 8, ..Default::default() };
        let data = data::synth_toy_corpus(&spec, 4).unwrap();
        let tok = spec.tokenizer().unwrap();
        let seqs = data::tokenize_corpus(&tok, &data.clean_corpus).unwrap();
        let cfg = PretrainConfig { iterations: 30, warmup_steps: 5, batch_size: 4, ..Default::default() };
        let mut a = toy_model(tok.vocab_size(), 2);
        let mut b = toy_model(tok.vocab_size(), 2);
        let la = pretrain(&mut a, &seqs, &cfg).unwrap();
        let lb = pretrain(&mut b, &seqs, &cfg).unwrap();
        assert_eq!(la.losses, lb.losses);
        assert_eq!(a.param_fingerprint(), b.param_fingerprint());
    }

    #[test]
    fn absurd_learning_rate_is_reported_as_divergence() {
        let spec = ToyTaskSpec { clean_sentences: 30, pair_count: 8, ..Default::default() };
        let data = data::synth_toy_corpus(&spec, 5).unwrap();
        let tok = spec.tokenizer().unwrap();
        let seqs = data::tokenize_corpus(&tok, &data.clean_corpus).unwrap();
        let mut model = toy_model(tok.vocab_size(), 3);
        let cfg = PretrainConfig {
            iterations: 300,
            warmup_steps: 1,
            batch_size: 4,
            learning_rate: 1e9,
            ..Default::default()
        };
        match pretrain(&mut model, &seqs, &cfg) {
            Err(Error::Numeric(_)) => {}
            Ok(_) => panic!("a 1e9 learning rate should overflow the loss"),
            Err(other) => panic!("expected numeric error, got {other}"),
        }
    }

    #[test]
    fn empty_corpus_is_a_config_error() {
        let mut model = toy_model(11, 4);
        assert!(matches!(
            pretrain(&mut model, &[], &PretrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
