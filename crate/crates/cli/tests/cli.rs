//! End-to-end tests of the `irepair` binary on a miniature experiment:
//! every subcommand runs, artifacts land where documented, exit codes
//! follow the usage/data/runtime split, and reruns reproduce byte-identical
//! outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_irepair"))
}

/// A config small enough that the full pipeline takes seconds.
const TINY_CONFIG: &str = r#"
seed = 7

[task]
clean_words = ["sun", "moon", "star", "tree", "bird", "song", "wind", "leaf"]
toxic_words = ["blarg", "skug", "vexx"]
trigger_words = ["kraz", "plim"]
sentence_words_min = 3
sentence_words_max = 6
clean_sentences = 80
pair_count = 24
validation_fraction = 0.25
prompt_words = 3
continuation_words = 4
toxic_rate = 0.8
background_toxic_rate = 0.05

[model]
context_length = 48
d_model = 16
n_heads = 2
n_blocks = 2
d_ffn = 32
activation = "gelu"

[base_train]
iterations = 60
learning_rate = 2e-3
warmup_steps = 10
batch_size = 4
window = 32

[normal]
count = 6
nucleus_p = 0.9
temperature = 1.0
threshold = 0.5
max_new_tokens = 12

[eval]
segment_length = 32
challenge_prompts = 4
max_new_tokens = 10
nucleus_p = 0.9
temperature = 1.0
samples_per_prompt = 1
holdout_fraction = 0.15

[scorer]
kind = "lexicon"

[techniques.dapt]
learning_rate = 1e-4
max_iterations = 16
warmup_steps = 2
batch_size = 2
validation_batches = 2
validation_batch_size = 2
patience = 1000
validation_interval = 8

[techniques.dapt-kl]
learning_rate = 1e-4
max_iterations = 16
warmup_steps = 2
batch_size = 2
validation_batches = 2
validation_batch_size = 2
patience = 1000
validation_interval = 8

[techniques.irepair]
learning_rate = 1e-3
max_iterations = 16
warmup_steps = 2
batch_size = 2
validation_batches = 2
validation_batch_size = 2
patience = 1000
validation_interval = 8

[techniques.irepair-kl]
learning_rate = 1e-3
max_iterations = 16
warmup_steps = 2
batch_size = 2
validation_batches = 2
validation_batch_size = 2
patience = 1000
validation_interval = 8

[techniques.irepair-min]
learning_rate = 1e-3
max_iterations = 16
warmup_steps = 2
batch_size = 2
validation_batches = 2
validation_batch_size = 2
patience = 1000
validation_interval = 8

[techniques.irepair-fixed]
learning_rate = 1e-3
max_iterations = 16
warmup_steps = 2
batch_size = 2
validation_batches = 2
validation_batch_size = 2
patience = 1000
validation_interval = 8
fixed_sample_size = 8
"#;

struct Env {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    out: PathBuf,
    config: PathBuf,
}

fn setup() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    Env { dir, out, config }
}

fn run_ok(env: &Env, args: &[&str]) -> Output {
    let output = bin()
        .args(args)
        .arg("--config")
        .arg(&env.config)
        .arg("--out")
        .arg(&env.out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().unwrap_or(-1)
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn print_config_emits_valid_toml() {
    let output = bin().arg("print-config").output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("[task]"));
    assert!(text.contains("[techniques.irepair]"));
    // the emitted config must parse back
    let parsed: toml::Value = toml::from_str(&text).unwrap();
    assert!(parsed.get("seed").is_some());
}

#[test]
fn full_pipeline_produces_expected_artifacts() {
    let env = setup();
    run_ok(&env, &["synth"]);
    assert!(env.out.join("task/pairs.jsonl").exists());
    assert!(env.out.join("task/clean_corpus.txt").exists());
    assert!(env.out.join("config.toml").exists(), "effective config echoed");

    run_ok(&env, &["train-base"]);
    assert!(env.out.join("base/base.ckpt").exists());
    assert!(env.out.join("base/base_summary.json").exists());

    run_ok(&env, &["repair", "--technique", "irepair-kl"]);
    let run_dir = env.out.join("runs/irepair-kl");
    for f in ["checkpoint.ckpt", "metrics.jsonl", "summary.json", "cost_report.json", "config.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    assert!(env.out.join("normal.jsonl").exists(), "KL technique builds the normal corpus");

    // summary echoes the seed and the technique
    let summary: serde_json::Value =
        serde_json::from_slice(&read(&run_dir.join("summary.json"))).unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["technique"], "irepair-kl");
    assert_eq!(summary["kl_enabled"], true);

    // metrics lines carry the documented fields
    let metrics = String::from_utf8(read(&run_dir.join("metrics.jsonl"))).unwrap();
    assert_eq!(metrics.lines().count(), 16, "one line per iteration");
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["iter", "block", "nll", "kl", "total", "lr"] {
        assert!(first.get(key).is_some(), "metrics line missing {key}");
    }

    run_ok(&env, &["eval", "--runs", "irepair-kl"]);
    let csv = String::from_utf8(read(&env.out.join("reports/comparison.csv"))).unwrap();
    assert!(csv.starts_with("technique,toxicity,ppl_clean,delta_toxicity_pct,delta_ppl_pct"));
    assert!(csv.contains("vanilla"));
    assert!(csv.contains("irepair-kl"));

    run_ok(&env, &["analyze"]);
    let sens = String::from_utf8(read(&env.out.join("reports/sensitivity.csv"))).unwrap();
    assert!(sens.starts_with("block_index,l2_norm,relative_share"));
    assert_eq!(sens.lines().count(), 3, "header plus one row per block");
    let summary: serde_json::Value =
        serde_json::from_slice(&read(&env.out.join("reports/sensitivity_summary.json"))).unwrap();
    assert!(summary.get("argmax_block").is_some());
    assert!(summary.get("density_ratio").is_some());

    run_ok(&env, &["flops", "--runs", "irepair-kl"]);
    let flops = String::from_utf8(read(&env.out.join("reports/flops_report.csv"))).unwrap();
    assert!(flops.contains("irepair-kl"));
    // the KL-enabled dynamic technique runs four forward passes
    let rows: serde_json::Value =
        serde_json::from_slice(&read(&env.out.join("reports/flops_report.json"))).unwrap();
    assert_eq!(rows[0]["forward_passes_per_iteration"], 4);
}

#[test]
fn rerun_reproduces_key_artifacts_byte_identically() {
    let env = setup();
    run_ok(&env, &["synth"]);
    let pairs_a = read(&env.out.join("task/pairs.jsonl"));
    run_ok(&env, &["synth"]);
    let pairs_b = read(&env.out.join("task/pairs.jsonl"));
    assert_eq!(pairs_a, pairs_b, "synthesis is idempotent");

    run_ok(&env, &["train-base"]);
    let base_a = read(&env.out.join("base/base.ckpt"));
    run_ok(&env, &["train-base"]);
    let base_b = read(&env.out.join("base/base.ckpt"));
    assert_eq!(base_a, base_b, "base training is deterministic");

    run_ok(&env, &["repair", "--technique", "irepair"]);
    let metrics_a = read(&env.out.join("runs/irepair/metrics.jsonl"));
    let ckpt_a = read(&env.out.join("runs/irepair/checkpoint.ckpt"));
    run_ok(&env, &["repair", "--technique", "irepair"]);
    let metrics_b = read(&env.out.join("runs/irepair/metrics.jsonl"));
    let ckpt_b = read(&env.out.join("runs/irepair/checkpoint.ckpt"));
    assert_eq!(metrics_a, metrics_b, "metrics JSONL reproduces byte-identically");
    assert_eq!(ckpt_a, ckpt_b, "repaired checkpoint reproduces byte-identically");
}

#[test]
fn seed_flag_overrides_config_seed() {
    let env = setup();
    run_ok(&env, &["synth"]);
    let a = read(&env.out.join("task/pairs.jsonl"));
    let output = bin()
        .args(["synth", "--seed", "99"])
        .arg("--config")
        .arg(&env.config)
        .arg("--out")
        .arg(&env.out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let b = read(&env.out.join("task/pairs.jsonl"));
    assert_ne!(a, b, "different seed, different data");
}

#[test]
fn unknown_technique_exits_2_and_lists_names() {
    let env = setup();
    let output = bin()
        .args(["repair", "--technique", "dpo"])
        .arg("--config")
        .arg(&env.config)
        .arg("--out")
        .arg(&env.out)
        .output()
        .unwrap();
    assert_eq!(exit_code(&output), 2);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("irepair-kl"), "error lists valid names: {stderr}");
}

#[test]
fn missing_inputs_exit_3() {
    let env = setup();
    // repair before synth/train-base
    let output = bin()
        .args(["repair", "--technique", "irepair"])
        .arg("--config")
        .arg(&env.config)
        .arg("--out")
        .arg(&env.out)
        .output()
        .unwrap();
    assert_eq!(exit_code(&output), 3);

    // eval naming a run that does not exist
    run_ok(&env, &["synth"]);
    run_ok(&env, &["train-base"]);
    let output = bin()
        .args(["eval", "--runs", "dapt"])
        .arg("--config")
        .arg(&env.config)
        .arg("--out")
        .arg(&env.out)
        .output()
        .unwrap();
    assert_eq!(exit_code(&output), 3);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, format!("{TINY_CONFIG}\n[unknown_section]\nfoo = 1\n")).unwrap();
    let output = bin()
        .args(["synth"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&output), 2);
}

#[test]
fn missing_out_dir_is_a_usage_error() {
    let env = setup();
    let output = bin()
        .args(["synth"])
        .arg("--config")
        .arg(&env.config)
        .output()
        .unwrap();
    assert_eq!(exit_code(&output), 2);
}

#[test]
fn fixed_technique_resolves_a_block_and_runs() {
    let env = setup();
    run_ok(&env, &["synth"]);
    run_ok(&env, &["train-base"]);
    run_ok(&env, &["repair", "--technique", "irepair-fixed"]);
    let summary: serde_json::Value =
        serde_json::from_slice(&read(&env.out.join("runs/irepair-fixed/summary.json"))).unwrap();
    let mode = summary["slice_mode"].as_str().unwrap();
    assert!(mode.starts_with("fixed("), "slice mode {mode}");
    // every iteration repaired that same block
    let metrics = String::from_utf8(read(&env.out.join("runs/irepair-fixed/metrics.jsonl"))).unwrap();
    let blocks: Vec<i64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["block"].as_i64().unwrap())
        .collect();
    assert!(blocks.windows(2).all(|w| w[0] == w[1]));
}
