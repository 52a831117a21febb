//! Synthetic languages that share one hidden-state grammar but have
//! disjoint vocabularies. The grammar is a second-order Markov chain over a
//! handful of word classes; each language maps every class to its own words.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand_distr::Dirichlet;

use crate::corpus::{word_count, Sentence};
use crate::error::{Error, Result};
use crate::rng::{seeded, stream, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarConfig {
    pub states: usize,
    /// Successor classes allowed after each two-class context.
    pub branching: usize,
    /// Probability of ending a sentence after any word.
    pub end_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Exponent of the within-class Zipf emission distribution.
    pub zipf: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            states: 5,
            branching: 2,
            end_prob: 0.12,
            min_len: 2,
            max_len: 40,
            zipf: 1.0,
        }
    }
}

/// Next-class distributions indexed by the two previous classes, where class
/// `states` stands for "sentence start" in the context and "end" as outcome.
#[derive(Clone, Debug)]
pub struct Grammar {
    config: GrammarConfig,
    next: Vec<WeightedIndex<f64>>,
    probs: Vec<Vec<f64>>,
}

impl Grammar {
    pub fn sample(config: GrammarConfig, rng: &mut Rng) -> Result<Self> {
        let s = config.states;
        if s < 2 || config.branching == 0 || config.branching > s {
            return Err(Error::Config(format!(
                "grammar needs at least 2 states and 1..={s} successors"
            )));
        }
        if !(0.0..1.0).contains(&config.end_prob) || config.min_len == 0 || config.max_len < config.min_len {
            return Err(Error::Config("invalid sentence-length settings".into()));
        }
        let dirichlet = if config.branching > 1 {
            Some(Dirichlet::new(&vec![1.0; config.branching]).map_err(|e| Error::Config(format!("grammar weights: {e}")))?)
        } else {
            None
        };
        let classes: Vec<usize> = (0..s).collect();
        let mut probs = Vec::with_capacity((s + 1) * (s + 1));
        for _prev2 in 0..=s {
            for prev1 in 0..=s {
                let at_start = prev1 == s;
                let mut p = vec![0.0; s + 1];
                let chosen: Vec<usize> = classes.choose_multiple(rng, config.branching).copied().collect();
                let w = dirichlet.as_ref().map_or_else(|| vec![1.0], |d| d.sample(rng));
                let keep = if at_start { 1.0 } else { 1.0 - config.end_prob };
                for (c, wi) in chosen.iter().zip(w) {
                    p[*c] = wi * keep;
                }
                if !at_start {
                    p[s] = config.end_prob;
                }
                probs.push(p);
            }
        }
        let next = probs
            .iter()
            .map(|p| WeightedIndex::new(p).expect("positive mass"))
            .collect();
        Ok(Grammar { config, next, probs })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.config
    }

    /// Distribution over the next class (last entry: end of sentence).
    pub fn transition(&self, prev2: usize, prev1: usize) -> &[f64] {
        &self.probs[prev2 * (self.config.states + 1) + prev1]
    }

    /// Class sequence of one sentence.
    pub fn sample_classes(&self, rng: &mut Rng) -> Vec<usize> {
        let s = self.config.states;
        loop {
            let (mut p2, mut p1) = (s, s);
            let mut out = Vec::new();
            loop {
                let c = self.next[p2 * (s + 1) + p1].sample(rng);
                if c == s || out.len() >= self.config.max_len {
                    break;
                }
                out.push(c);
                p2 = p1;
                p1 = c;
            }
            if out.len() >= self.config.min_len {
                return out;
            }
        }
    }
}

/// One language's words per class.
#[derive(Clone, Debug)]
pub struct Lexicon {
    words: Vec<Vec<String>>,
    emission: WeightedIndex<f64>,
}

impl Lexicon {
    /// Spreads `vocab` words named `{prefix}{i}` over the classes at random.
    pub fn new(prefix: &str, vocab: usize, grammar: &Grammar, rng: &mut Rng) -> Result<Self> {
        let s = grammar.config.states;
        let per = vocab / s;
        if per == 0 {
            return Err(Error::Config(format!("vocabulary of {vocab} is smaller than {s} classes")));
        }
        let mut ids: Vec<usize> = (0..per * s).collect();
        ids.shuffle(rng);
        let words = ids.chunks(per).map(|c| c.iter().map(|i| format!("{prefix}{i}")).collect()).collect();
        let weights: Vec<f64> = (1..=per).map(|r| (r as f64).powf(-grammar.config.zipf)).collect();
        Ok(Lexicon {
            words,
            emission: WeightedIndex::new(weights).expect("positive weights"),
        })
    }

    pub fn class_words(&self, class: usize) -> &[String] {
        &self.words[class]
    }

    /// Sentences totalling at least `words` words.
    pub fn generate(&self, grammar: &Grammar, words: usize, rng: &mut Rng) -> Vec<Sentence> {
        let mut out = Vec::new();
        let mut n = 0;
        while n < words {
            let sentence: Sentence = grammar
                .sample_classes(rng)
                .into_iter()
                .map(|c| self.words[c][self.emission.sample(rng)].clone())
                .collect();
            n += sentence.len();
            out.push(sentence);
        }
        out
    }
}

/// A set of synthetic languages generated from one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub languages: Vec<String>,
    pub vocab: usize,
    pub train_words: usize,
    pub test_words: usize,
    pub grammar: GrammarConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthText {
    pub language: String,
    pub train: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

/// Generates every language of `spec` from a single shared grammar. Each
/// language draws from its own random stream, so adding a language leaves
/// the others unchanged.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthText>> {
    let mut rng = seeded(spec.seed, stream::SYNTH);
    let grammar = Grammar::sample(spec.grammar.clone(), &mut rng)?;
    spec.languages
        .iter()
        .enumerate()
        .map(|(l, name)| {
            let mut rng = seeded(spec.seed, stream::SYNTH + ((l as u64 + 1) << 8));
            let lex = Lexicon::new(name, spec.vocab, &grammar, &mut rng)?;
            let train = lex.generate(&grammar, spec.train_words, &mut rng);
            let test = lex.generate(&grammar, spec.test_words, &mut rng);
            Ok(SynthText {
                language: name.clone(),
                train,
                test,
            })
        })
        .collect()
}

/// One sentence per line, words separated by single spaces.
pub fn to_text(sentences: &[Sentence]) -> String {
    let mut out = String::with_capacity(word_count(sentences) * 6);
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    out
}
