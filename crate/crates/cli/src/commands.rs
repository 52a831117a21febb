use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mllm_core::checkpoint::Checkpoint;
use mllm_core::corpus::{CleanCorpus, LanguagePack, Threshold};
use mllm_core::eval::perplexity;
use mllm_core::model::{LanguageSpec, ModelConfig, MultilingualModel};
use mllm_core::sweep::{emit_report, format_ppl, run_sweep, ReportFormat, FULL_SCALE_GRID};
use mllm_core::trainer::{train, EpochLog, Selection};
use mllm_core::Error;

use crate::config::RunConfig;
use crate::{exit, Cli, CliError, Command, EvalArgs, Global, SweepArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Prepare => prepare(&load_config(&cli.global)?, &cli.global),
        Command::Train(args) => cmd_train(&cli.global, args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(&cli.global, args),
    }
}

fn load_config(global: &Global) -> Result<RunConfig, CliError> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| CliError::usage("this command needs --config"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

/// Clears `path` under --force, otherwise refuses to touch it.
fn claim(path: &Path, global: &Global) -> Result<(), CliError> {
    if !path.exists() {
        return Ok(());
    }
    if !global.force {
        return Err(CliError::new(
            exit::EXISTS,
            format!("{} already exists (use --force to replace it)", path.display()),
        ));
    }
    let removed = if path.is_dir() { fs::remove_dir_all(path) } else { fs::remove_file(path) };
    removed.map_err(|e| io_error(path, e))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.dump()).map_err(|e| io_error(&path, e))
}

fn read_corpora(cfg: &RunConfig) -> Result<Vec<CleanCorpus>, CliError> {
    let read = |p: &PathBuf| fs::read(p).map_err(|e| io_error(p, e));
    cfg.data
        .languages
        .iter()
        .map(|l| {
            let train = read(&l.train)?;
            let test = read(&l.test)?;
            let valid = l.valid.as_ref().map(read).transpose()?;
            CleanCorpus::from_raw(&l.name, &train, valid.as_deref(), &test)
                .map_err(|e| CliError::usage(format!("{}: {e}", l.name)))
        })
        .collect()
}

fn prepare(cfg: &RunConfig, global: &Global) -> Result<(), CliError> {
    cfg.validate(true)?;
    let threshold = cfg.threshold()?;
    let packs_dir = cfg.packs_dir();
    for name in cfg.language_names() {
        claim(&packs_dir.join(name), global)?;
    }
    let corpora = read_corpora(cfg)?;
    let packs = corpora
        .iter()
        .map(|c| {
            c.prepare(threshold, cfg.seed)
                .map_err(|e| CliError::usage(format!("{}: {e}", c.language)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for p in &packs {
        p.save(&packs_dir.join(&p.language))
            .map_err(CliError::usage)?;
    }
    write_config(cfg, &packs_dir)?;
    print!("{}", word_count_table(&packs));
    Ok(())
}

/// Words per split with one column per language.
pub fn word_count_table(packs: &[LanguagePack]) -> String {
    let cells: Vec<[String; 4]> = packs
        .iter()
        .map(|p| {
            [
                p.language.clone(),
                p.words.train.to_string(),
                p.words.valid.to_string(),
                p.words.test.to_string(),
            ]
        })
        .collect();
    let labels = ["", "Train", "Valid.", "Test"];
    let first = labels.iter().map(|l| l.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (row, label) in labels.iter().enumerate() {
        let _ = write!(out, "{label:<first$}");
        for c in &cells {
            let w = c.iter().map(String::len).max().unwrap_or(0);
            let _ = write!(out, "  {:>w$}", c[row]);
        }
        out.push('\n');
    }
    out
}

fn load_pack(cfg: &RunConfig, name: &str) -> Result<LanguagePack, CliError> {
    let dir = cfg.packs_dir().join(name);
    LanguagePack::load(&dir).map_err(|e| {
        CliError::usage(format!("cannot load pack for `{name}` (run `prepare` first): {e}"))
    })
}

fn log_line(entry: &EpochLog, names: &[String]) -> String {
    let mut s = format!("epoch {}", entry.epoch);
    s.push_str(" train_ce");
    for (n, v) in names.iter().zip(&entry.train_ce) {
        let _ = write!(s, " {n}={v:.6}");
    }
    s.push_str(" valid_ppl");
    for (n, v) in names.iter().zip(&entry.valid_ppl) {
        let _ = write!(s, " {n}={v:.4}");
    }
    let _ = write!(s, " lr {} action {:?}", entry.lr, entry.action);
    s
}

fn cmd_train(global: &Global, args: &TrainArgs) -> Result<(), CliError> {
    if global.resume {
        return Err(CliError::usage("--resume applies to `sweep` only"));
    }
    let mut cfg = load_config(global)?;
    if let Some(v) = &args.variant {
        cfg.train.variant = v.clone();
    }
    if let Some(l) = &args.languages {
        cfg.train.languages = Some(l.clone());
    }
    if let Some(n) = args.max_epochs {
        cfg.train.max_epochs = n;
    }
    cfg.validate(false)?;
    let variant = cfg.variant()?;
    let names = cfg.train_languages()?;
    if !variant.is_multilingual() && names.len() != 1 {
        return Err(CliError::usage(format!(
            "{variant} trains one language; pass --languages with a single entry"
        )));
    }
    let base = cfg.training()?;
    let shape = cfg.shape()?;

    let dir = cfg.output.dir.join("train").join(variant.to_string());
    let ckpt_path = dir.join("checkpoint.bin");
    claim(&ckpt_path, global)?;
    let packs = names
        .iter()
        .map(|n| load_pack(&cfg, n))
        .collect::<Result<Vec<_>, _>>()?;

    let model_config = ModelConfig {
        embedding: shape.embedding,
        hidden: shape.hidden,
        pattern: variant.pattern(shape.pattern),
        languages: packs
            .iter()
            .map(|p| LanguageSpec {
                name: p.language.clone(),
                vocab: p.vocab.len(),
            })
            .collect(),
    };
    let hash = model_config.fingerprint();
    let mut model = MultilingualModel::build(model_config, cfg.seed).map_err(CliError::usage)?;
    let train_cfg = variant.configure(&base);
    write_config(&cfg, &dir)?;

    let log_path = dir.join("train.log");
    let mut log = String::new();
    let train_streams: Vec<&[u32]> = packs.iter().map(|p| p.train.as_slice()).collect();
    let valid_streams: Vec<&[u32]> = packs.iter().map(|p| p.valid.as_slice()).collect();
    let outcome = train(
        &mut model,
        &train_streams,
        &valid_streams,
        &train_cfg,
        Selection::MeanAll,
        |entry| {
            let line = log_line(entry, &names);
            eprintln!("{line} ({:.1}s)", entry.seconds);
            log.push_str(&line);
            log.push('\n');
            let _ = fs::write(&log_path, &log);
        },
    );
    let outcome = outcome.map_err(|e| match e {
        Error::Config(_) | Error::UnknownLanguage(_) | Error::Data(_) => CliError::usage(e),
        other => CliError::new(exit::TRAINING, format!("training aborted: {other}")),
    })?;
    let last_lr = outcome.log.last().map_or(train_cfg.lr, |l| l.lr);
    let ckpt = Checkpoint::from_store(hash, &outcome.best_params, outcome.best_epoch, last_lr, outcome.best_valid.clone());
    ckpt.save(&ckpt_path).map_err(CliError::usage)?;
    println!("best epoch {} of {}", outcome.best_epoch, outcome.epochs_run);
    for (n, v) in names.iter().zip(&outcome.best_valid) {
        println!("{n} valid {}", format_ppl(*v));
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint, None).map_err(|e| match e {
        Error::Io { .. } => CliError::usage(e),
        other => CliError::new(exit::INCOMPATIBLE, other),
    })?;
    let model = ckpt.to_model().map_err(|e| CliError::new(exit::INCOMPATIBLE, e))?;
    let pack = LanguagePack::load(&args.pack).map_err(CliError::usage)?;
    let l = model.language_index(&pack.language).map_err(|_| {
        CliError::new(
            exit::INCOMPATIBLE,
            format!(
                "checkpoint has no language `{}` (it covers {})",
                pack.language,
                model.languages().iter().map(|l| l.name.as_str()).collect::<Vec<_>>().join(", ")
            ),
        )
    })?;
    let expected = model.config().languages[l].vocab;
    if expected != pack.vocab.len() {
        return Err(CliError::new(
            exit::INCOMPATIBLE,
            format!(
                "vocabulary size mismatch for `{}`: checkpoint has {expected}, pack has {}",
                pack.language,
                pack.vocab.len()
            ),
        ));
    }
    let stream = pack.split(&args.split).map_err(CliError::usage)?;
    let ppl = perplexity(&model, l, stream, args.batch, args.bptt).map_err(CliError::usage)?;
    println!("{}", format_ppl(ppl));
    Ok(())
}

fn cmd_sweep(global: &Global, args: &SweepArgs) -> Result<(), CliError> {
    let mut cfg = load_config(global)?;
    if let Some(t) = &args.targets {
        cfg.sweep.targets = Some(t.clone());
    }
    if let Some(v) = &args.variants {
        cfg.sweep.variants = v.clone();
    }
    if let Some(t) = &args.thresholds {
        cfg.sweep.thresholds = t.clone();
    }
    if args.full_grid {
        cfg.sweep.thresholds = FULL_SCALE_GRID.iter().map(Threshold::label).collect();
    }
    if let Some(s) = &args.seeds {
        cfg.sweep.seeds = s.clone();
    }
    if let Some(n) = args.max_epochs {
        cfg.train.max_epochs = n;
    }
    cfg.validate(true)?;
    let spec = cfg.sweep_spec()?;
    let base = cfg.training()?;
    let shape = cfg.shape()?;

    let dir = cfg.output.dir.join("sweep");
    let results = dir.join("results.csv");
    if !global.resume {
        claim(&dir, global)?;
    }
    let corpora = read_corpora(&cfg)?;
    write_config(&cfg, &dir)?;
    let total = spec.cells().len();
    let mut seen = 0;
    let report = run_sweep(&spec, &corpora, &shape, &base, Some(&results), |cell, result| {
        seen += 1;
        match result {
            Ok(r) => eprintln!(
                "[{seen}] {} test {} after {} epochs ({:.0}s)",
                cell.id(),
                format_ppl(r.row.test_ppl),
                r.row.epochs,
                r.row.seconds
            ),
            Err(e) => eprintln!("[{seen}] {} failed: {e}", cell.id()),
        }
    })
    .map_err(CliError::usage)?;
    eprintln!("{} of {total} cells were already complete", total - seen);

    if !report.rows.is_empty() {
        let table = dir.join("table.txt");
        emit_report(&report, ReportFormat::Text, &table).map_err(CliError::usage)?;
        print!("{}", report.to_text_table());
    }
    if !report.failures.is_empty() {
        let mut msg = format!("{} of {total} cells failed:", report.failures.len());
        for (id, e) in &report.failures {
            let _ = write!(msg, "\n  {id}: {e}");
        }
        return Err(CliError::new(exit::TRAINING, msg));
    }
    Ok(())
}
