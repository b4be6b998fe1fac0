//! Command implementations. Every command is deterministic given the same
//! config and seed: artifacts that must reproduce byte-identically
//! (checkpoints, metrics JSONL, summaries, comparison tables) never contain
//! timing; wall-clock and memory live only in the cost reports.

use irepair_core::accounting::CostReport;
use irepair_core::data::{
    self, NormalCorpus, PairedDataset, Tokenizer,
};
use irepair_core::error::{Error, Result};
use irepair_core::eval::{
    compare_runs, perplexity, toxicity_eval, LexiconScorer, RemoteScorer, TechniqueSummary,
    ToxicityEvalSettings, ToxicityScorer,
};
use irepair_core::model::{GptModel, TokenId};
use irepair_core::pretrain;
use irepair_core::repair::{self, RepairRun};
use irepair_core::slicing;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{slice_mode_name, ExperimentConfig, ScorerKind, Technique};

pub struct Workspace {
    pub out: PathBuf,
    pub config: ExperimentConfig,
}

impl Workspace {
    pub fn new(out: PathBuf, config: ExperimentConfig) -> Workspace {
        Workspace { out, config }
    }

    fn task_dir(&self) -> PathBuf {
        self.out.join("task")
    }

    fn pairs_path(&self) -> PathBuf {
        self.task_dir().join("pairs.jsonl")
    }

    fn clean_corpus_path(&self) -> PathBuf {
        self.task_dir().join("clean_corpus.txt")
    }

    fn base_dir(&self) -> PathBuf {
        self.out.join("base")
    }

    fn base_ckpt(&self) -> PathBuf {
        self.base_dir().join("base.ckpt")
    }

    fn normal_path(&self) -> PathBuf {
        self.out.join("normal.jsonl")
    }

    fn run_dir(&self, technique: &str) -> PathBuf {
        self.out.join("runs").join(technique)
    }

    fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    fn tokenizer(&self) -> Result<Tokenizer> {
        self.config.task.tokenizer()
    }

    /// Echo the effective config into the output directory.
    fn echo_config(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join("config.toml"), self.config.to_toml()?)?;
        Ok(())
    }

    fn load_pairs(&self) -> Result<PairedDataset> {
        if !self.pairs_path().exists() {
            return Err(Error::Data(format!(
                "{} not found; run `irepair synth` first",
                self.pairs_path().display()
            )));
        }
        data::load_paired_jsonl(&self.pairs_path(), self.config.task.validation_fraction)
    }

    fn load_clean_corpus(&self) -> Result<Vec<String>> {
        let path = self.clean_corpus_path();
        if !path.exists() {
            return Err(Error::Data(format!(
                "{} not found; run `irepair synth` first",
                path.display()
            )));
        }
        Ok(std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    }

    fn load_base_model(&self) -> Result<GptModel> {
        if !self.base_ckpt().exists() {
            return Err(Error::Data(format!(
                "{} not found; run `irepair train-base` first",
                self.base_ckpt().display()
            )));
        }
        GptModel::load_checkpoint(&self.base_ckpt())
    }

    fn scorer(&self) -> Result<Box<dyn ToxicityScorer>> {
        match self.config.scorer.kind {
            ScorerKind::Lexicon => Ok(Box::new(LexiconScorer::new(&self.config.task.toxic_words))),
            ScorerKind::Remote => {
                let key = std::env::var(&self.config.scorer.api_key_env).ok();
                Ok(Box::new(
                    RemoteScorer::new(&self.config.scorer.endpoint, key.as_deref())
                        .with_min_interval(std::time::Duration::from_millis(
                            self.config.scorer.min_interval_ms,
                        )),
                ))
            }
        }
    }

    /// Clean-corpus split: leading lines train the base model, the tail is
    /// held out for perplexity.
    fn clean_split(&self, lines: &[String]) -> usize {
        let holdout = (lines.len() as f64 * self.config.eval.holdout_fraction).round() as usize;
        lines.len() - holdout.min(lines.len())
    }
}

// ---- synth -----------------------------------------------------------------

pub fn cmd_synth(ws: &Workspace) -> Result<()> {
    ws.echo_config()?;
    let datasets = data::synth_toy_corpus(&ws.config.task, ws.config.seed)?;
    std::fs::create_dir_all(ws.task_dir())?;
    data::save_paired_jsonl(&ws.pairs_path(), &datasets.pairs)?;
    let mut corpus = String::new();
    for line in &datasets.clean_corpus {
        corpus.push_str(line);
        corpus.push('\n');
    }
    std::fs::write(ws.clean_corpus_path(), corpus)?;
    println!(
        "synth: {} clean sentences, {} pairs ({} train / {} validation) -> {}",
        datasets.clean_corpus.len(),
        datasets.pairs.examples.len(),
        datasets.pairs.train().len(),
        datasets.pairs.validation().len(),
        ws.task_dir().display()
    );
    Ok(())
}

// ---- train-base --------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BaseSummary {
    seed: u64,
    iterations: usize,
    final_loss: f64,
    holdout_ppl: f64,
    param_count: usize,
}

pub fn cmd_train_base(ws: &Workspace) -> Result<()> {
    ws.echo_config()?;
    let tok = ws.tokenizer()?;
    let pairs = ws.load_pairs()?;
    let clean = ws.load_clean_corpus()?;
    let train_clean = &clean[..ws.clean_split(&clean)];

    // Mixed corpus: clean text plus the contaminated prompt+bad lines.
    let mut lines: Vec<String> = train_clean.to_vec();
    lines.extend(data::contaminated_corpus(&pairs));
    let seqs = data::tokenize_corpus(&tok, &lines)?;

    let mut model = GptModel::new(ws.config.model_config()?, ws.config.seed)?;
    let log = pretrain::pretrain(&mut model, &seqs, &ws.config.pretrain_config())?;

    std::fs::create_dir_all(ws.base_dir())?;
    model.save_checkpoint(&ws.base_ckpt())?;
    write_json(&ws.base_dir().join("train_log.json"), &log)?;

    let holdout = &clean[ws.clean_split(&clean)..];
    let holdout_ppl = if holdout.is_empty() {
        f64::NAN
    } else {
        let stream = corpus_stream(&tok, holdout)?;
        perplexity(&model, &stream, ws.config.eval.segment_length)?.ppl
    };
    let summary = BaseSummary {
        seed: ws.config.seed,
        iterations: log.losses.len(),
        final_loss: *log.losses.last().unwrap_or(&f64::NAN),
        holdout_ppl,
        param_count: model.param_count(),
    };
    write_json(&ws.base_dir().join("base_summary.json"), &summary)?;
    println!(
        "train-base: {} iterations, final loss {:.4}, holdout ppl {:.3} -> {}",
        summary.iterations,
        summary.final_loss,
        summary.holdout_ppl,
        ws.base_ckpt().display()
    );
    Ok(())
}

// ---- repair ------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct RunSummary {
    pub technique: String,
    pub seed: u64,
    pub slice_mode: String,
    pub kl_enabled: bool,
    pub stopping_reason: repair::StoppingReason,
    pub best_iter: usize,
    pub total_iters: usize,
}

pub fn cmd_repair(ws: &Workspace, technique: Technique) -> Result<()> {
    ws.echo_config()?;
    let tok = ws.tokenizer()?;
    let base = ws.load_base_model()?;
    let pairs = ws.load_pairs()?;
    let datasets = build_repair_datasets(ws, &tok, &base, &pairs, technique.kl_enabled())?;

    let fixed_block = if technique == Technique::IRepairFixed {
        Some(preselect_block(ws, &tok, &base, &pairs)?)
    } else {
        None
    };
    let rcfg = ws.config.repair_config(technique, fixed_block)?;
    let run = repair::run_repair(&base, &datasets, &rcfg)?;

    let dir = ws.run_dir(technique.name());
    std::fs::create_dir_all(&dir)?;
    run.model.save_checkpoint(&dir.join("checkpoint.ckpt"))?;
    write_metrics_jsonl(&dir.join("metrics.jsonl"), &run)?;
    write_json(&dir.join("cost_report.json"), &run.cost)?;
    write_json(&dir.join("config.json"), &rcfg)?;
    let summary = RunSummary {
        technique: technique.name().to_string(),
        seed: rcfg.seed,
        slice_mode: slice_mode_name(rcfg.slice_mode),
        kl_enabled: rcfg.kl_enabled,
        stopping_reason: run.stopping_reason,
        best_iter: run.best_iter,
        total_iters: run.total_iters,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "repair[{}]: {} iterations ({:?}), best at {} -> {}",
        technique.name(),
        run.total_iters,
        run.stopping_reason,
        run.best_iter,
        dir.display()
    );
    Ok(())
}

/// Resolve the pre-selected block for the fixed ablation by averaging
/// sensitivity over a sample of the bad training data.
fn preselect_block(
    ws: &Workspace,
    tok: &Tokenizer,
    base: &GptModel,
    pairs: &PairedDataset,
) -> Result<usize> {
    let settings = ws.config.technique_settings(Technique::IRepairFixed);
    let tokenized = data::tokenize_pairs(tok, pairs.train())?;
    let bad_seqs: Vec<Vec<TokenId>> = tokenized
        .iter()
        .map(|p| {
            let mut s = p.prompt.clone();
            s.extend_from_slice(&p.bad);
            s
        })
        .collect();
    let sample = settings.fixed_sample_size.min(bad_seqs.len());
    slicing::fixed_slice(
        base,
        &bad_seqs,
        tok.pad_id(),
        sample,
        settings.batch_size,
        ws.config.seed,
    )
}

fn build_repair_datasets(
    ws: &Workspace,
    tok: &Tokenizer,
    base: &GptModel,
    pairs: &PairedDataset,
    needs_normal: bool,
) -> Result<repair::RepairDatasets> {
    let train_pairs = data::tokenize_pairs(tok, pairs.train())?;
    let val_pairs = data::tokenize_pairs(tok, pairs.validation())?;
    let normal = if needs_normal {
        let corpus = load_or_build_normal(ws, tok, base)?;
        corpus.token_sequences(tok)?
    } else {
        Vec::new()
    };
    Ok(repair::RepairDatasets { train_pairs, val_pairs, normal })
}

/// D^N is generated once from the pre-repair base model and cached.
fn load_or_build_normal(ws: &Workspace, tok: &Tokenizer, base: &GptModel) -> Result<NormalCorpus> {
    if ws.normal_path().exists() {
        let entries = data::load_normal_jsonl(&ws.normal_path())?;
        let provenance: data::NormalProvenance = {
            let text = std::fs::read_to_string(ws.out.join("normal_provenance.json"))?;
            serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?
        };
        return Ok(NormalCorpus { entries, provenance });
    }
    let scorer = ws.scorer()?;
    let n = &ws.config.normal;
    let corpus = data::build_normal_corpus(
        base,
        tok,
        n.count,
        n.nucleus_p,
        n.temperature,
        scorer.as_ref(),
        n.threshold,
        ws.config.seed,
        n.max_new_tokens,
    )?;
    data::save_normal_jsonl(&ws.normal_path(), &corpus)?;
    write_json(&ws.out.join("normal_provenance.json"), &corpus.provenance)?;
    log::info!(
        "normal corpus: {} of {} sequences retained (rejection rate {:.3})",
        corpus.entries.len(),
        corpus.provenance.requested,
        corpus.rejection_rate()
    );
    Ok(corpus)
}

// ---- eval --------------------------------------------------------------------

pub fn cmd_eval(ws: &Workspace, runs: &[String]) -> Result<()> {
    let tok = ws.tokenizer()?;
    let base = ws.load_base_model()?;
    let pairs = ws.load_pairs()?;
    let clean = ws.load_clean_corpus()?;
    let holdout = &clean[ws.clean_split(&clean)..];
    if holdout.is_empty() {
        return Err(Error::Config("eval: holdout fraction leaves no clean lines".into()));
    }
    let stream = corpus_stream(&tok, holdout)?;
    let prompts = challenge_prompts(ws, &pairs);
    if prompts.is_empty() {
        return Err(Error::Data("eval: validation split has no prompts".into()));
    }
    let scorer = ws.scorer()?;
    let settings = ToxicityEvalSettings {
        max_new_tokens: ws.config.eval.max_new_tokens,
        nucleus_p: ws.config.eval.nucleus_p,
        temperature: ws.config.eval.temperature,
        samples_per_prompt: ws.config.eval.samples_per_prompt,
    };

    let mut summaries = Vec::new();
    let eval_one = |model: &GptModel, name: &str| -> Result<TechniqueSummary> {
        let tox = toxicity_eval(model, &tok, &prompts, scorer.as_ref(), &settings, ws.config.seed)?;
        let ppl = perplexity(model, &stream, ws.config.eval.segment_length)?.ppl;
        println!("eval[{name}]: toxicity {tox:.2}, clean ppl {ppl:.3}");
        Ok(TechniqueSummary {
            technique: name.to_string(),
            toxicity: tox,
            ppl_clean: ppl,
            model_config: model.config().clone(),
        })
    };
    summaries.push(eval_one(&base, "vanilla")?);
    for name in runs {
        Technique::parse(name)?;
        let ckpt = ws.run_dir(name).join("checkpoint.ckpt");
        if !ckpt.exists() {
            return Err(Error::Data(format!("run {name}: {} not found", ckpt.display())));
        }
        let model = GptModel::load_checkpoint(&ckpt)?;
        summaries.push(eval_one(&model, name)?);
    }

    let report = compare_runs(&summaries)?;
    std::fs::create_dir_all(ws.reports_dir())?;
    std::fs::write(ws.reports_dir().join("comparison.csv"), report.to_csv())?;
    write_json(&ws.reports_dir().join("comparison.json"), &report)?;
    println!("eval: wrote {}", ws.reports_dir().join("comparison.csv").display());
    Ok(())
}

fn challenge_prompts(ws: &Workspace, pairs: &PairedDataset) -> Vec<String> {
    pairs
        .validation()
        .iter()
        .take(ws.config.eval.challenge_prompts)
        .map(|p| p.prompt.clone())
        .collect()
}

fn corpus_stream(tok: &Tokenizer, lines: &[String]) -> Result<Vec<TokenId>> {
    let seqs = data::tokenize_corpus(tok, lines)?;
    Ok(seqs.into_iter().flatten().collect())
}

// ---- analyze -------------------------------------------------------------------

#[derive(Serialize)]
struct AnalyzeSummary {
    checkpoint: String,
    batches: usize,
    argmax_block: usize,
    argmin_block: usize,
    top_fraction: f64,
    top_density: f64,
    rest_density: f64,
    density_ratio: f64,
}

pub fn cmd_analyze(ws: &Workspace, checkpoint: Option<&Path>) -> Result<()> {
    let tok = ws.tokenizer()?;
    let default_ckpt = ws.base_ckpt();
    let ckpt = checkpoint.unwrap_or(&default_ckpt);
    if !ckpt.exists() {
        return Err(Error::Data(format!("{} not found", ckpt.display())));
    }
    let model = GptModel::load_checkpoint(ckpt)?;
    let pairs = ws.load_pairs()?;
    let tokenized = data::tokenize_pairs(&tok, pairs.train())?;
    if tokenized.is_empty() {
        return Err(Error::Data("analyze: no training pairs".into()));
    }

    // average sensitivity over seeded batches of the bad demonstrations
    let settings = ws.config.technique_settings(Technique::IRepairFixed);
    let sample = settings.fixed_sample_size.min(tokenized.len());
    let mut reports = Vec::new();
    for chunk in tokenized[..sample].chunks(settings.batch_size) {
        let prompts: Vec<Vec<TokenId>> = chunk.iter().map(|p| p.prompt.clone()).collect();
        let bads: Vec<Vec<TokenId>> = chunk.iter().map(|p| p.bad.clone()).collect();
        let crit = slicing::Criteria::from_parts(&prompts, &bads, tok.pad_id(), false)?;
        reports.push(slicing::sensitivity(&model, &crit)?);
    }
    let means = slicing::average_per_block(&reports)?;
    let total: f64 = means.iter().sum();

    std::fs::create_dir_all(ws.reports_dir())?;
    let mut csv = String::from("block_index,l2_norm,relative_share\n");
    for (i, &norm) in means.iter().enumerate() {
        csv.push_str(&format!("{i},{norm:.8},{:.6}\n", if total > 0.0 { norm / total } else { 0.0 }));
    }
    std::fs::write(ws.reports_dir().join("sensitivity.csv"), &csv)?;

    let argmax = means.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0))).map(|(i, _)| i).unwrap_or(0);
    let argmin = means.iter().enumerate().min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0))).map(|(i, _)| i).unwrap_or(0);
    let summary = if means.len() > 1 {
        let density = slicing::error_density(&means, 0.2)?;
        AnalyzeSummary {
            checkpoint: ckpt.display().to_string(),
            batches: reports.len(),
            argmax_block: argmax,
            argmin_block: argmin,
            top_fraction: 0.2,
            top_density: density.top_density,
            rest_density: density.rest_density,
            density_ratio: density.ratio,
        }
    } else {
        AnalyzeSummary {
            checkpoint: ckpt.display().to_string(),
            batches: reports.len(),
            argmax_block: 0,
            argmin_block: 0,
            top_fraction: 0.2,
            top_density: means[0],
            rest_density: f64::NAN,
            density_ratio: f64::NAN,
        }
    };
    write_json(&ws.reports_dir().join("sensitivity_summary.json"), &summary)?;
    println!(
        "analyze: argmax block {}, argmin block {}, top-20% density ratio {:.3} -> {}",
        summary.argmax_block,
        summary.argmin_block,
        summary.density_ratio,
        ws.reports_dir().join("sensitivity.csv").display()
    );
    Ok(())
}

// ---- flops ---------------------------------------------------------------------

#[derive(Serialize)]
struct FlopsRow {
    technique: String,
    total_tflops: f64,
    tflops_per_token: f64,
    wall_time_sec: f64,
    peak_memory_mib: f64,
    total_iterations: usize,
    forward_passes_per_iteration: usize,
}

pub fn cmd_flops(ws: &Workspace, runs: &[String]) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Usage("flops: name at least one run".into()));
    }
    let mut rows = Vec::new();
    for name in runs {
        Technique::parse(name)?;
        let path = ws.run_dir(name).join("cost_report.json");
        if !path.exists() {
            return Err(Error::Data(format!("run {name}: {} not found", path.display())));
        }
        let report: CostReport = serde_json::from_str(&std::fs::read_to_string(&path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        rows.push(FlopsRow {
            technique: name.clone(),
            total_tflops: report.total_tflops,
            tflops_per_token: report.tflops_per_token,
            wall_time_sec: report.wall_time_sec,
            peak_memory_mib: report.peak_memory_bytes as f64 / (1 << 20) as f64,
            total_iterations: report.total_iterations,
            forward_passes_per_iteration: report.forward_passes_per_iteration,
        });
    }
    std::fs::create_dir_all(ws.reports_dir())?;
    let mut csv = String::from(
        "technique,total_tflops,tflops_per_token,wall_time_sec,peak_memory_mib,total_iterations,forward_passes_per_iteration\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.9},{:.2},{:.1},{},{}\n",
            r.technique,
            r.total_tflops,
            r.tflops_per_token,
            r.wall_time_sec,
            r.peak_memory_mib,
            r.total_iterations,
            r.forward_passes_per_iteration
        ));
    }
    std::fs::write(ws.reports_dir().join("flops_report.csv"), &csv)?;
    write_json(&ws.reports_dir().join("flops_report.json"), &rows)?;
    print!("{csv}");
    Ok(())
}

// ---- sweep ---------------------------------------------------------------------

pub fn cmd_sweep(ws: &Workspace) -> Result<()> {
    cmd_synth(ws)?;
    cmd_train_base(ws)?;
    let names: Vec<String> = Technique::all().iter().map(|t| t.name().to_string()).collect();
    for t in Technique::all() {
        cmd_repair(ws, t)?;
    }
    cmd_eval(ws, &names)?;
    cmd_flops(ws, &names)?;
    cmd_analyze(ws, None)?;
    println!("sweep: complete -> {}", ws.out.display());
    Ok(())
}

// ---- shared io -------------------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn write_metrics_jsonl(path: &Path, run: &RepairRun) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for rec in &run.metrics {
        let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}
