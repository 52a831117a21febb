//! Data-scarcity sweep: every (target language, variant, threshold, seed)
//! cell is trained from scratch and evaluated on the target's test set.
//! Multilingual cells truncate only the target; the other languages keep
//! their full training text.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::corpus::{CleanCorpus, LanguagePack, Threshold};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::{LanguageSpec, ModelConfig, MultilingualModel, SharingPattern};
use crate::trainer::{train, EpochLog, Selection, TrainingConfig, Variant};

/// Model sizes shared by every cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub embedding: usize,
    pub hidden: usize,
    /// Sharing pattern of the multilingual variant.
    pub pattern: SharingPattern,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    /// Target languages; every prepared language is a donor in multilingual cells.
    pub targets: Vec<String>,
    pub variants: Vec<Variant>,
    pub thresholds: Vec<Threshold>,
    pub seeds: Vec<u64>,
    /// Batch size for test perplexity.
    pub test_batch: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("sweep needs at least one target and one variant".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed per cell".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("thresholds must be non-empty and strictly increasing".into()));
        }
        if self.test_batch == 0 {
            return Err(Error::Config("test batch size must be positive".into()));
        }
        Ok(())
    }

    /// Cells in run order: target, variant, threshold, seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for t in &self.targets {
            for &variant in &self.variants {
                for &threshold in &self.thresholds {
                    for &seed in &self.seeds {
                        out.push(Cell {
                            language: t.clone(),
                            variant,
                            threshold,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub language: String,
    pub variant: Variant,
    pub threshold: Threshold,
    pub seed: u64,
}

impl Cell {
    /// Stable identifier, also used as a directory name.
    pub fn id(&self) -> String {
        format!("{}_{}_{}_s{}", self.language, self.variant, self.threshold, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub language: String,
    pub variant: Variant,
    pub threshold: Threshold,
    pub seed: u64,
    pub test_ppl: f64,
    pub valid_ppl: f64,
    pub epochs: usize,
    pub seconds: f64,
}

impl SweepRow {
    pub fn cell(&self) -> Cell {
        Cell {
            language: self.language.clone(),
            variant: self.variant,
            threshold: self.threshold,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// `(cell id, error message)` of cells that failed.
    pub failures: Vec<(String, String)>,
}

/// Threshold grid of full-size experiments; sweeps default to a smaller one.
pub const FULL_SCALE_GRID: [Threshold; 15] = [
    Threshold::Words(40_000),
    Threshold::Words(60_000),
    Threshold::Words(80_000),
    Threshold::Words(100_000),
    Threshold::Words(120_000),
    Threshold::Words(140_000),
    Threshold::Words(160_000),
    Threshold::Words(180_000),
    Threshold::Words(200_000),
    Threshold::Words(220_000),
    Threshold::Words(240_000),
    Threshold::Words(300_000),
    Threshold::Words(340_000),
    Threshold::Words(400_000),
    Threshold::Full,
];

pub const CSV_HEADER: &str = "language,variant,threshold,seed,test_ppl,valid_ppl,epochs,seconds";

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&csv_line(r));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Data("sweep CSV has an unexpected header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Data(format!("sweep CSV line {}: malformed row", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            rows.push(SweepRow {
                language: f[0].to_string(),
                variant: f[1].parse()?,
                threshold: f[2].parse()?,
                seed: f[3].parse().map_err(|_| bad())?,
                test_ppl: f[4].parse().map_err(|_| bad())?,
                valid_ppl: f[5].parse().map_err(|_| bad())?,
                epochs: f[6].parse().map_err(|_| bad())?,
                seconds: f[7].parse().map_err(|_| bad())?,
            });
        }
        Ok(SweepReport {
            rows,
            failures: Vec::new(),
        })
    }

    /// Median test perplexity over seeds per (language, variant, threshold).
    pub fn medians(&self) -> BTreeMap<(String, Variant, Threshold), f64> {
        let mut groups: BTreeMap<(String, Variant, Threshold), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.language.clone(), r.variant, r.threshold))
                .or_default()
                .push(r.test_ppl);
        }
        groups.into_iter().map(|(k, v)| (k, median(v))).collect()
    }

    /// Pivot in the layout of a per-language results table: one block per
    /// language, variants as rows, thresholds as columns, median test
    /// perplexity with two decimals. The lowest value of each column is
    /// marked with `*`.
    pub fn to_text_table(&self) -> String {
        let medians = self.medians();
        let mut languages: Vec<&str> = Vec::new();
        let mut variants: Vec<Variant> = Vec::new();
        let mut thresholds: Vec<Threshold> = Vec::new();
        for r in &self.rows {
            if !languages.contains(&r.language.as_str()) {
                languages.push(&r.language);
            }
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
            if !thresholds.contains(&r.threshold) {
                thresholds.push(r.threshold);
            }
        }
        variants.sort();
        thresholds.sort();
        let label_w = variants.iter().map(|v| v.label().len()).max().unwrap_or(5).max(5);
        let col_w = 10;

        let mut out = String::new();
        for lang in languages {
            let _ = writeln!(out, "{lang}");
            let _ = write!(out, "{:<label_w$}", "Model");
            for t in &thresholds {
                let _ = write!(out, " {:>col_w$}", t.label());
            }
            out.push('\n');
            let best: Vec<Option<f64>> = thresholds
                .iter()
                .map(|&t| {
                    variants
                        .iter()
                        .filter_map(|&v| medians.get(&(lang.to_string(), v, t)).copied())
                        .min_by(f64::total_cmp)
                })
                .collect();
            for &v in &variants {
                let _ = write!(out, "{:<label_w$}", v.label());
                for (t, b) in thresholds.iter().zip(&best) {
                    let cell = match medians.get(&(lang.to_string(), v, *t)) {
                        Some(&x) => {
                            let mark = if Some(x) == *b { "*" } else { " " };
                            format!("{}{mark}", format_ppl(x))
                        }
                        None => "- ".to_string(),
                    };
                    let _ = write!(out, " {cell:>col_w$}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

/// Two decimals, as in published perplexity tables.
pub fn format_ppl(x: f64) -> String {
    format!("{x:.2}")
}

fn csv_line(r: &SweepRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{:.3}\n",
        r.language, r.variant, r.threshold, r.seed, r.test_ppl, r.valid_ppl, r.epochs, r.seconds
    )
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

pub fn emit_report(report: &SweepReport, format: ReportFormat, path: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::Data("cannot emit an empty sweep report".into()));
    }
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Text => report.to_text_table(),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Result of training and evaluating one cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub row: SweepRow,
    pub log: Vec<EpochLog>,
}

/// Trains one cell to its best epoch and measures test perplexity.
pub fn run_cell(
    cell: &Cell,
    corpora: &[CleanCorpus],
    shape: &ModelShape,
    base: &TrainingConfig,
    test_batch: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<CellResult> {
    let start = Instant::now();
    let target = corpora
        .iter()
        .position(|c| c.language == cell.language)
        .ok_or_else(|| Error::UnknownLanguage(cell.language.clone()))?;
    let order: Vec<usize> = if cell.variant.is_multilingual() {
        (0..corpora.len()).collect()
    } else {
        vec![target]
    };
    let packs = order
        .iter()
        .map(|&l| {
            let threshold = if l == target { cell.threshold } else { Threshold::Full };
            corpora[l].prepare(threshold, cell.seed)
        })
        .collect::<Result<Vec<LanguagePack>>>()?;
    let target_pos = order.iter().position(|&l| l == target).expect("target included");

    let config = ModelConfig {
        embedding: shape.embedding,
        hidden: shape.hidden,
        pattern: cell.variant.pattern(shape.pattern),
        languages: packs
            .iter()
            .map(|p| LanguageSpec {
                name: p.language.clone(),
                vocab: p.vocab.len(),
            })
            .collect(),
    };
    let mut model = MultilingualModel::build(config, cell.seed)?;
    let mut cfg = cell.variant.configure(base);
    cfg.seed = cell.seed;
    let train_streams: Vec<&[u32]> = packs.iter().map(|p| p.train.as_slice()).collect();
    let valid_streams: Vec<&[u32]> = packs.iter().map(|p| p.valid.as_slice()).collect();
    let outcome = train(
        &mut model,
        &train_streams,
        &valid_streams,
        &cfg,
        Selection::Language(target_pos),
        on_epoch,
    )?;
    let test_ppl = perplexity(&model, target_pos, &packs[target_pos].test, test_batch, cfg.bptt)?;
    Ok(CellResult {
        row: SweepRow {
            language: cell.language.clone(),
            variant: cell.variant,
            threshold: cell.threshold,
            seed: cell.seed,
            test_ppl,
            valid_ppl: outcome.best_valid[target_pos],
            epochs: outcome.epochs_run,
            seconds: start.elapsed().as_secs_f64(),
        },
        log: outcome.log,
    })
}

/// Runs every cell of `spec`. With `results` set, rows already present in
/// that CSV are kept and their cells skipped, and each new row is appended
/// as soon as it completes. A failing cell is recorded and the sweep goes on.
pub fn run_sweep(
    spec: &SweepSpec,
    corpora: &[CleanCorpus],
    shape: &ModelShape,
    base: &TrainingConfig,
    results: Option<&Path>,
    mut on_cell: impl FnMut(&Cell, &Result<CellResult>),
) -> Result<SweepReport> {
    spec.validate()?;
    for t in &spec.targets {
        if !corpora.iter().any(|c| &c.language == t) {
            return Err(Error::UnknownLanguage(t.clone()));
        }
    }
    let mut report = match results {
        Some(path) if path.exists() => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            SweepReport::from_csv(&text)?
        }
        Some(path) => {
            fs::write(path, format!("{CSV_HEADER}\n")).map_err(|e| Error::io(path, e))?;
            SweepReport::default()
        }
        None => SweepReport::default(),
    };
    let done: HashSet<Cell> = report.rows.iter().map(SweepRow::cell).collect();
    for cell in spec.cells() {
        if done.contains(&cell) {
            continue;
        }
        let result = run_cell(&cell, corpora, shape, base, spec.test_batch, &mut |_| {});
        on_cell(&cell, &result);
        match result {
            Ok(r) => {
                if let Some(path) = results {
                    let mut f = fs::OpenOptions::new()
                        .append(true)
                        .open(path)
                        .map_err(|e| Error::io(path, e))?;
                    f.write_all(csv_line(&r.row).as_bytes()).map_err(|e| Error::io(path, e))?;
                }
                report.rows.push(r.row);
            }
            Err(e) => report.failures.push((cell.id(), e.to_string())),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(lang: &str, variant: Variant, t: usize, seed: u64, ppl: f64) -> SweepRow {
        SweepRow {
            language: lang.into(),
            variant,
            threshold: Threshold::Words(t),
            seed,
            test_ppl: ppl,
            valid_ppl: ppl + 1.0,
            epochs: 3,
            seconds: 0.5,
        }
    }

    #[test]
    fn full_scale_grid_is_a_valid_sweep() {
        let spec = SweepSpec {
            targets: vec!["a".into()],
            variants: Variant::ALL.to_vec(),
            thresholds: FULL_SCALE_GRID.to_vec(),
            seeds: vec![1],
            test_batch: 1,
        };
        spec.validate().unwrap();
        assert_eq!(spec.cells().len(), 45);
    }

    #[test]
    fn cell_count() {
        let spec = SweepSpec {
            targets: vec!["a".into(), "b".into()],
            variants: Variant::ALL.to_vec(),
            thresholds: [1, 2, 3, 4].map(Threshold::Words).to_vec(),
            seeds: vec![1],
            test_batch: 1,
        };
        assert_eq!(spec.cells().len(), 24);
        assert!(SweepSpec {
            thresholds: [2, 1].map(Threshold::Words).to_vec(),
            ..spec.clone()
        }
        .validate()
        .is_err());
        assert!(SweepSpec { seeds: vec![], ..spec }.validate().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let report = SweepReport {
            rows: vec![row("cr", Variant::MultiAwd, 40_000, 1, 207.38)],
            failures: vec![],
        };
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        assert_eq!(SweepReport::from_csv(&csv).unwrap().rows, report.rows);
    }

    #[test]
    fn table_shape() {
        let mut rows = Vec::new();
        for v in Variant::ALL {
            for t in [1000, 2000, 3000, 4000, 5000] {
                rows.push(row("xx", v, t, 1, 100.0 + t as f64 / 1000.0));
            }
        }
        let table = SweepReport { rows, failures: vec![] }.to_text_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "xx");
        assert_eq!(lines[1].split_whitespace().count(), 6);
        assert_eq!(lines.iter().filter(|l| l.contains("LSTM")).count(), 3);
        assert_eq!(lines[2].split_whitespace().count(), 6);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
