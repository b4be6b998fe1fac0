//! Block slicing: masked mean NLL over a criteria batch, per-block
//! gradient-norm sensitivity, and threshold-free argmax/argmin selection.
//!
//! A criteria batch is the prompt and continuation concatenated into one
//! padded sequence, scored at every non-pad position; targets are the
//! inputs shifted left by one, so the final sequence position (which has no
//! ground-truth successor) drops out of the loss through the pad mask.
//! Prompt tokens stay in the loss by default; `mask_prompt` pads them out
//! of the target matrix for callers that want continuation-only scoring.
//!
//! Padding is right-aligned with `pad_id` and is only masked in the loss;
//! attention sees pad tokens like any other.

use crate::autograd::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::model::{BlockRegistry, ForwardPass, GptModel, ParamId, TokenId};
use crate::rng;
use rand::seq::SliceRandom;

/// Padded input/target matrices for NLL scoring and sensitivity.
#[derive(Debug, Clone)]
pub struct Criteria {
    inputs: Vec<Vec<TokenId>>,
    targets: Vec<Vec<TokenId>>,
    pad_id: TokenId,
}

impl Criteria {
    /// Build criteria from whole token sequences. Targets are the inputs
    /// shifted left by one; everything past each sequence end is padding.
    pub fn from_sequences(seqs: &[Vec<TokenId>], pad_id: TokenId) -> Result<Criteria> {
        Self::build(seqs, pad_id, None)
    }

    /// Build criteria from (prefix, continuation) pairs, concatenated.
    /// With `mask_prompt`, targets inside the prefix are padded out so only
    /// continuation tokens are scored.
    pub fn from_parts(
        prefixes: &[Vec<TokenId>],
        continuations: &[Vec<TokenId>],
        pad_id: TokenId,
        mask_prompt: bool,
    ) -> Result<Criteria> {
        if prefixes.len() != continuations.len() {
            return Err(Error::Pairing(format!(
                "{} prefixes vs {} continuations",
                prefixes.len(),
                continuations.len()
            )));
        }
        let seqs: Vec<Vec<TokenId>> = prefixes
            .iter()
            .zip(continuations)
            .map(|(p, c)| {
                let mut s = p.clone();
                s.extend_from_slice(c);
                s
            })
            .collect();
        let prompt_lens: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        Self::build(&seqs, pad_id, mask_prompt.then_some(&prompt_lens))
    }

    fn build(seqs: &[Vec<TokenId>], pad_id: TokenId, mask_prompt_lens: Option<&[usize]>) -> Result<Criteria> {
        if seqs.is_empty() {
            return Err(Error::Data("criteria: empty batch".into()));
        }
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Data("criteria: empty sequence in batch".into()));
        }
        let width = seqs.iter().map(|s| s.len()).max().unwrap();
        let mut inputs = Vec::with_capacity(seqs.len());
        let mut targets = Vec::with_capacity(seqs.len());
        for (row, seq) in seqs.iter().enumerate() {
            let mut x = seq.clone();
            x.resize(width, pad_id);
            // next-token targets: y[t] = x[t+1] within the real sequence
            let mut y = vec![pad_id; width];
            for t in 0..seq.len().saturating_sub(1) {
                y[t] = seq[t + 1];
            }
            if let Some(lens) = mask_prompt_lens {
                // drop targets that are prompt-internal predictions
                for t in 0..lens[row].saturating_sub(1).min(width) {
                    y[t] = pad_id;
                }
            }
            inputs.push(x);
            targets.push(y);
        }
        let crit = Criteria { inputs, targets, pad_id };
        if crit.non_pad_targets() == 0 {
            return Err(Error::EmptyCriteria);
        }
        Ok(crit)
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn inputs(&self) -> &[Vec<TokenId>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<TokenId>] {
        &self.targets
    }

    pub fn non_pad_targets(&self) -> usize {
        self.targets
            .iter()
            .flatten()
            .filter(|&&t| t != self.pad_id)
            .count()
    }

    fn flat_targets(&self) -> Vec<TokenId> {
        self.targets.iter().flatten().copied().collect()
    }
}

/// Per-block L2 gradient norms for one criteria batch.
///
/// Ties on the extremes resolve to the lowest block index.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub per_block: Vec<f64>,
    pub argmax_block: usize,
    pub argmin_block: usize,
    pub criteria_size: usize,
}

/// Which end of the sensitivity ranking a slice takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceSelect {
    Max,
    Min,
}

/// Mean NLL of the criteria targets, staged on `tape` so callers can take
/// gradients. Returns the loss tensor and the staged forward pass.
pub fn nll_on_tape(
    tape: &mut Tape,
    model: &GptModel,
    criteria: &Criteria,
    requires_grad: bool,
) -> Result<(TensorId, ForwardPass)> {
    let pass = model.forward_batch(tape, criteria.inputs(), requires_grad)?;
    let batch = criteria.batch_size();
    let seq = criteria.seq_len();
    let vocab = model.config().vocab_size;
    let flat = tape.reshape(pass.logits, vec![batch * seq, vocab])?;
    let probs = tape.softmax(flat)?;
    let loss = tape.nll_token(probs, &criteria.flat_targets(), criteria.pad_id())?;
    Ok((loss, pass))
}

/// Mean NLL of the criteria under the model (no gradients).
pub fn nll(model: &GptModel, criteria: &Criteria) -> Result<f32> {
    let mut tape = Tape::new();
    let (loss, _) = nll_on_tape(&mut tape, model, criteria, false)?;
    tape.scalar(loss)
}

/// L2 norm of the gradient per block, read off a tape that has already run
/// backward. Excluded-group gradients belong to no block.
pub fn block_gradient_norms(tape: &Tape, param_tensors: &[TensorId], registry: &BlockRegistry) -> Vec<f64> {
    let mut sums = vec![0.0f64; registry.n_blocks()];
    for (id, &tensor) in param_tensors.iter().enumerate() {
        if let crate::model::ParamGroup::Block(b) = registry.group(id) {
            if let Some(grad) = tape.grad(tensor) {
                sums[b] += grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
            }
        }
    }
    sums.into_iter().map(f64::sqrt).collect()
}

/// Compute the criteria NLL, backpropagate once, and reduce each block's
/// parameter gradients to an L2 norm. Gradients are released before
/// returning.
pub fn sensitivity(model: &GptModel, criteria: &Criteria) -> Result<SensitivityReport> {
    let mut tape = Tape::new();
    let (loss, pass) = nll_on_tape(&mut tape, model, criteria, true)?;
    tape.backward(loss)?;
    let per_block = block_gradient_norms(&tape, &pass.param_tensors, model.registry());
    tape.zero_grads();
    Ok(report_from_norms(per_block, criteria.batch_size()))
}

fn report_from_norms(per_block: Vec<f64>, criteria_size: usize) -> SensitivityReport {
    let argmax_block = argmax_tie_lowest(&per_block);
    let argmin_block = argmin_tie_lowest(&per_block);
    SensitivityReport { per_block, argmax_block, argmin_block, criteria_size }
}

pub(crate) fn argmax_tie_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmin_tie_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// Select the most (or least) sensitive block for this criteria batch and
/// return it with its parameter set.
pub fn slice(model: &GptModel, criteria: &Criteria, select: SliceSelect) -> Result<(usize, Vec<ParamId>)> {
    let report = sensitivity(model, criteria)?;
    let block = match select {
        SliceSelect::Max => report.argmax_block,
        SliceSelect::Min => report.argmin_block,
    };
    Ok((block, model.registry().params_of_block(block)?))
}

/// Pre-select a block by averaging per-block sensitivity over batches drawn
/// without replacement from the bad dataset. Deterministic given `seed`.
pub fn fixed_slice(
    model: &GptModel,
    bad_seqs: &[Vec<TokenId>],
    pad_id: TokenId,
    sample_size: usize,
    batch_size: usize,
    seed: u64,
) -> Result<usize> {
    if bad_seqs.is_empty() {
        return Err(Error::Config("fixed_slice: empty dataset".into()));
    }
    if sample_size == 0 || sample_size > bad_seqs.len() {
        return Err(Error::Config(format!(
            "fixed_slice: sample size {sample_size} out of range for {} examples",
            bad_seqs.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("fixed_slice: batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..bad_seqs.len()).collect();
    order.shuffle(&mut rng::rng_for(seed, 0x666978)); // fixed-slice stream
    order.truncate(sample_size);

    let mut sums = vec![0.0f64; model.registry().n_blocks()];
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        let seqs: Vec<Vec<TokenId>> = chunk.iter().map(|&i| bad_seqs[i].clone()).collect();
        let report = sensitivity(model, &Criteria::from_sequences(&seqs, pad_id)?)?;
        for (s, n) in sums.iter_mut().zip(&report.per_block) {
            *s += n;
        }
        batches += 1;
    }
    let means: Vec<f64> = sums.into_iter().map(|s| s / batches as f64).collect();
    Ok(argmax_tie_lowest(&means))
}

/// Mean per-block sensitivity across reports (for fixed-slice style
/// analysis over a whole dataset).
pub fn average_per_block(reports: &[SensitivityReport]) -> Result<Vec<f64>> {
    if reports.is_empty() {
        return Err(Error::Config("average_per_block: no reports".into()));
    }
    let n = reports[0].per_block.len();
    if reports.iter().any(|r| r.per_block.len() != n) {
        return Err(Error::ModelMismatch("reports disagree on block count".into()));
    }
    let mut means = vec![0.0f64; n];
    for r in reports {
        for (m, v) in means.iter_mut().zip(&r.per_block) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= reports.len() as f64;
    }
    Ok(means)
}

/// Density split of per-block sensitivity into the top fraction of blocks
/// (by sensitivity, descending) versus the rest.
#[derive(Debug, Clone, Copy)]
pub struct DensityStats {
    pub top_density: f64,
    pub rest_density: f64,
    /// top_density / rest_density
    pub ratio: f64,
    pub top_blocks: usize,
}

/// Sort blocks by sensitivity descending, put ceil(top_fraction * n) in the
/// top group, and compare group mean densities.
pub fn error_density(per_block: &[f64], top_fraction: f64) -> Result<DensityStats> {
    if !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(Error::Config(format!(
            "error_density: top_fraction must be in (0, 1), got {top_fraction}"
        )));
    }
    let n = per_block.len();
    if n == 0 {
        return Err(Error::Config("error_density: no blocks".into()));
    }
    let n_top = ((top_fraction * n as f64).ceil() as usize).max(1);
    if n_top >= n {
        return Err(Error::Config(format!(
            "error_density: top group of {n_top} leaves no rest group among {n} blocks"
        )));
    }
    let mut sorted = per_block.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let top_sum: f64 = sorted[..n_top].iter().sum();
    let rest_sum: f64 = sorted[n_top..].iter().sum();
    let top_density = top_sum / n_top as f64;
    let rest_density = rest_sum / (n - n_top) as f64;
    Ok(DensityStats {
        top_density,
        rest_density,
        ratio: top_density / rest_density,
        top_blocks: n_top,
    })
}
