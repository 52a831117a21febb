//! Regenerates the bundled toy corpora under `data/`.
//!
//!     cargo run --release -p mllm-core --example make_toy_corpora -- data

use std::fs;
use std::path::PathBuf;

use mllm_core::corpus::Sentence;
use mllm_core::synth::{generate, GrammarConfig, SynthSpec};

/// Raw-text look: capitalised first word and a trailing full stop, so that
/// `prepare` has something to clean.
fn render(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (i, w) in s.iter().enumerate() {
            if i == 0 {
                let mut c = w.chars();
                if let Some(first) = c.next() {
                    out.extend(first.to_uppercase());
                    out.push_str(c.as_str());
                }
            } else {
                out.push(' ');
                out.push_str(w);
            }
        }
        out.push_str(".\n");
    }
    out
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    let spec = SynthSpec {
        languages: vec!["xa".into(), "yo".into(), "zu".into()],
        vocab: 200,
        train_words: 20_000,
        test_words: 2_000,
        grammar: GrammarConfig::default(),
        seed: 2024,
    };
    fs::create_dir_all(&dir)?;
    for t in generate(&spec)? {
        fs::write(dir.join(format!("{}.train.txt", t.language)), render(&t.train))?;
        fs::write(dir.join(format!("{}.test.txt", t.language)), render(&t.test))?;
    }
    Ok(())
}
