//! The transfer-trend protocol of the acceptance suite without its time
//! budget. Results go to a CSV and a rerun resumes from it.
//!
//!     cargo run --release -p mllm-core --example transfer_trend -- runs/trend.csv

use std::path::PathBuf;
use std::time::Instant;

use mllm_core::corpus::{split_validation, word_count, CleanCorpus, Threshold};
use mllm_core::model::SharingPattern;
use mllm_core::rnn::DropoutConfig;
use mllm_core::sweep::{format_ppl, run_sweep, ModelShape, SweepSpec};
use mllm_core::synth::{generate, GrammarConfig, SynthSpec};
use mllm_core::trainer::{ScheduleMode, TrainingConfig, Variant};

// keep in step with tests/acceptance.rs
fn corpora() -> Vec<CleanCorpus> {
    let spec = SynthSpec {
        languages: vec!["xa".into(), "yo".into(), "zu".into()],
        vocab: 200,
        train_words: 52_000,
        test_words: 2_000,
        grammar: GrammarConfig {
            branching: 1,
            ..GrammarConfig::default()
        },
        seed: 7,
    };
    generate(&spec)
        .unwrap()
        .into_iter()
        .map(|t| {
            let (train, valid) = split_validation(&t.train, word_count(&t.test)).unwrap();
            CleanCorpus {
                language: t.language,
                train: train.to_vec(),
                valid: valid.to_vec(),
                test: t.test,
            }
        })
        .collect()
}

fn config() -> TrainingConfig {
    TrainingConfig {
        lr: 10.0,
        max_epochs: 60,
        schedule: ScheduleMode::EarlyStop,
        dropout: DropoutConfig {
            input: 0.3,
            hidden: 0.2,
            output: 0.2,
            embedding: 0.05,
            embedding_per_batch_row: false,
            weight: 0.2,
            locked: true,
        },
        ..TrainingConfig::default()
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/trend.csv".into()));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let spec = SweepSpec {
        targets: vec!["xa".into(), "yo".into(), "zu".into()],
        variants: vec![Variant::MonoAwd, Variant::MultiAwd],
        thresholds: [2_000, 5_000, 10_000, 20_000].map(Threshold::Words).to_vec(),
        seeds: vec![1, 2, 3],
        test_batch: 1,
    };
    let shape = ModelShape {
        embedding: 64,
        hidden: 128,
        pattern: SharingPattern::PROPOSED,
    };
    let start = Instant::now();
    let report = run_sweep(&spec, &corpora(), &shape, &config(), Some(&out), |cell, r| match r {
        Ok(r) => println!(
            "{} test {} valid {} epochs {} ({:.0}s, {:.0}s total)",
            cell.id(),
            format_ppl(r.row.test_ppl),
            format_ppl(r.row.valid_ppl),
            r.row.epochs,
            r.row.seconds,
            start.elapsed().as_secs_f64()
        ),
        Err(e) => println!("{} failed: {e}", cell.id()),
    })?;
    print!("{}", report.to_text_table());
    Ok(())
}
