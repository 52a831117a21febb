use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").canonicalize().unwrap()
}

fn mllm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mllm")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A tiny-model config over the bundled corpora, written into a fresh directory.
struct Setup {
    dir: TempDir,
}

impl Setup {
    fn new(languages: &[&str], extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = data_dir();
        let langs: Vec<String> = languages
            .iter()
            .map(|l| {
                format!(
                    "  {{ name = \"{l}\", train = \"{}\", test = \"{}\" }},",
                    data.join(format!("{l}.train.txt")).display(),
                    data.join(format!("{l}.test.txt")).display()
                )
            })
            .collect();
        let text = format!(
            "seed = 3\n\n[data]\nlanguages = [\n{}\n]\n\n[model]\nembedding = 6\nhidden = 8\n\n[train]\nmax_epochs = 2\nbptt = 20\neval_batch = 5\n\n[output]\ndir = \"out\"\n{extra}",
            langs.join("\n")
        );
        fs::write(dir.path().join("run.toml"), text).unwrap();
        Setup { dir }
    }

    fn config(&self) -> String {
        self.dir.path().join("run.toml").display().to_string()
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.config();
        let mut all = vec!["--config", config.as_str()];
        all.extend_from_slice(args);
        mllm(&all)
    }

    fn prepare(&self) {
        let o = self.run(&["prepare"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
}

fn meta_value(pack: &Path, key: &str) -> String {
    let text = fs::read_to_string(pack.join("meta")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap()
        .to_string()
}

#[test]
fn prepare_writes_packs_and_word_count_table() {
    let s = Setup::new(&["xa", "yo"], "");
    let o = s.run(&["prepare"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "{table}");
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, ["xa", "yo"]);
    for (row, (label, key)) in [("Train", "train_words"), ("Valid.", "valid_words"), ("Test", "test_words")]
        .into_iter()
        .enumerate()
    {
        let cells: Vec<&str> = lines[row + 1].split_whitespace().collect();
        assert_eq!(cells[0], label);
        for (i, lang) in ["xa", "yo"].iter().enumerate() {
            assert_eq!(cells[i + 1], meta_value(&s.out().join("packs").join(lang), key));
        }
    }
    for lang in ["xa", "yo"] {
        let pack = s.out().join("packs").join(lang);
        for f in ["meta", "vocab.txt", "train.idx", "valid.idx", "test.idx"] {
            assert!(pack.join(f).is_file(), "{lang}/{f}");
        }
    }
    // validation is held out from the training tail, at least as long as test
    let pack = s.out().join("packs/xa");
    let valid: usize = meta_value(&pack, "valid_words").parse().unwrap();
    let test: usize = meta_value(&pack, "test_words").parse().unwrap();
    assert!(valid >= test);
}

#[test]
fn prepare_refuses_to_overwrite_without_force() {
    let s = Setup::new(&["xa"], "");
    s.prepare();
    let o = s.run(&["prepare"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let o = s.run(&["prepare", "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn missing_corpus_and_unknown_keys_are_usage_errors() {
    let s = Setup::new(&["xa"], "");
    let bad = s.dir.path().join("bad.toml");
    let text = fs::read_to_string(s.config()).unwrap().replace("xa.test.txt", "nope.txt");
    fs::write(&bad, text).unwrap();
    let o = mllm(&["--config", bad.to_str().unwrap(), "prepare"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.txt"));

    let text = fs::read_to_string(s.config()).unwrap() + "\n[extra]\nkey = 1\n";
    fs::write(&bad, text).unwrap();
    assert_eq!(code(&mllm(&["--config", bad.to_str().unwrap(), "prepare"])), 1);

    assert_eq!(code(&mllm(&["prepare", "--no-such-flag"])), 1);
    assert_eq!(code(&mllm(&["prepare"])), 1, "--config is required");
}

#[test]
fn effective_config_is_dumped_and_reusable() {
    let s = Setup::new(&["xa"], "");
    let o = s.run(&["--seed", "9", "prepare"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dumped = s.out().join("packs/config.toml");
    let text = fs::read_to_string(&dumped).unwrap();
    assert!(text.contains("seed = 9"), "{text}");
    assert_eq!(meta_value(&s.out().join("packs/xa"), "seed"), "9");
    let o = mllm(&["--config", dumped.to_str().unwrap(), "prepare", "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn mono_training_on_one_language() {
    let s = Setup::new(&["xa", "yo"], "");
    s.prepare();
    let o = s.run(&["train", "--variant", "mono-awd", "--languages", "xa"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = s.out().join("train/mono-awd");
    assert!(dir.join("checkpoint.bin").is_file());
    let log = fs::read_to_string(dir.join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("epoch 1 train_ce xa="), "{}", lines[0]);
    assert!(lines[0].contains(" valid_ppl xa=") && lines[0].contains(" lr 30"), "{}", lines[0]);
    assert!(!lines[0].contains("yo="));

    let o = s.run(&["train", "--variant", "mono-awd"]);
    assert_eq!(code(&o), 1, "a mono variant over two languages is refused");
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let s = Setup::new(&["xa", "yo"], "");
    s.prepare();
    let dir = s.out().join("train/multi-awd");
    let run = || {
        let o = s.run(&["train", "--force"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (
            fs::read(dir.join("train.log")).unwrap(),
            fs::read(dir.join("checkpoint.bin")).unwrap(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);

    let o = s.run(&["train"]);
    assert_eq!(code(&o), 2, "existing checkpoint without --force");
    let o = s.run(&["--seed", "4", "train", "--force"]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(dir.join("checkpoint.bin")).unwrap(), a.1);
}

#[test]
fn zero_epochs_is_refused() {
    let s = Setup::new(&["xa"], "");
    s.prepare();
    let o = s.run(&["train", "--max-epochs", "0"]);
    assert_eq!(code(&o), 1);
    assert!(!s.out().join("train/multi-awd/checkpoint.bin").exists());
}

#[test]
fn eval_prints_two_decimals_and_checks_compatibility() {
    let s = Setup::new(&["xa", "yo"], "");
    s.prepare();
    assert_eq!(code(&s.run(&["train"])), 0);
    let ckpt = s.out().join("train/multi-awd/checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();
    let pack = s.out().join("packs/xa");
    let pack = pack.to_str().unwrap();

    let o = mllm(&["eval", "--checkpoint", ckpt, "--pack", pack]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let test = stdout(&o).trim().to_string();
    let (whole, frac) = test.split_once('.').unwrap();
    assert!(whole.parse::<u64>().is_ok() && frac.len() == 2, "{test}");
    let o = mllm(&["eval", "--checkpoint", ckpt, "--pack", pack, "--split", "valid"]);
    assert_eq!(code(&o), 0);
    assert_ne!(stdout(&o).trim(), test);

    // same language, smaller vocabulary
    let small = Setup::new(&["xa"], "");
    let text = fs::read_to_string(small.config()).unwrap().replace("[model]", "[model]\n").replace(
        "]\n\n[model]",
        "]\nthreshold = \"2K\"\n\n[model]",
    );
    fs::write(small.config(), text).unwrap();
    small.prepare();
    let small_pack = small.out().join("packs/xa");
    let o = mllm(&["eval", "--checkpoint", ckpt, "--pack", small_pack.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let small_vocab = meta_value(&small_pack, "vocab_size");
    let big_vocab = meta_value(&s.out().join("packs/xa"), "vocab_size");
    assert!(stderr(&o).contains(&small_vocab) && stderr(&o).contains(&big_vocab), "{}", stderr(&o));

    let other = Setup::new(&["zu"], "");
    other.prepare();
    let o = mllm(&["eval", "--checkpoint", ckpt, "--pack", other.out().join("packs/zu").to_str().unwrap()]);
    assert_eq!(code(&o), 3);

    let broken = s.dir.path().join("broken.bin");
    let bytes = fs::read(ckpt).unwrap();
    fs::write(&broken, &bytes[..bytes.len() / 2]).unwrap();
    let o = mllm(&["eval", "--checkpoint", broken.to_str().unwrap(), "--pack", pack]);
    assert_eq!(code(&o), 3);
}

#[test]
fn sweep_writes_results_and_resumes() {
    let s = Setup::new(
        &["xa", "yo"],
        "\n[sweep]\ntargets = [\"xa\"]\nvariants = [\"mono-awd\", \"multi-awd\"]\nthresholds = [\"2K\"]\nseeds = [1]\n",
    );
    let o = s.run(&["sweep", "--max-epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let results = s.out().join("sweep/results.csv");
    let csv = fs::read_to_string(&results).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3, "{csv}");
    assert!(rows[1..].iter().all(|r| r.starts_with("xa,")));
    let table = fs::read_to_string(s.out().join("sweep/table.txt")).unwrap();
    assert_eq!(stdout(&o), table);
    assert!(table.contains("AWD-LSTM") && table.contains("2K"), "{table}");

    let o = s.run(&["sweep", "--max-epochs", "1"]);
    assert_eq!(code(&o), 2);

    // as if killed after the first cell
    fs::write(&results, format!("{}\n{}\n", rows[0], rows[1])).unwrap();
    let o = s.run(&["--resume", "sweep", "--max-epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("1 of 2 cells were already complete"), "{}", stderr(&o));
    let again = fs::read_to_string(&results).unwrap();
    assert_eq!(again.lines().count(), 3);
    assert_eq!(again.lines().nth(1), Some(rows[1]));
}

#[test]
fn sweep_covers_all_variants_by_default() {
    let s = Setup::new(&["xa", "yo"], "\n[sweep]\nthresholds = [\"2K\"]\nseeds = [1]\n");
    let o = s.run(&["sweep", "--max-epochs", "1", "--targets", "yo", "--variants", "mono-lstm,mono-awd,multi-awd"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(s.out().join("sweep/results.csv")).unwrap();
    let variants: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(variants, ["mono-lstm", "mono-awd", "multi-awd"]);
}

#[test]
fn full_grid_and_explicit_thresholds_conflict() {
    let s = Setup::new(&["xa"], "");
    let o = s.run(&["sweep", "--full-grid", "--thresholds", "5K"]);
    assert_eq!(code(&o), 1);
}
