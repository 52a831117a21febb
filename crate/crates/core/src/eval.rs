//! Perplexity evaluation with dropout off and hidden state carried over the
//! whole stream.

use crate::corpus::batchify;
use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Graph};
use crate::model::LanguageModel;
use crate::rnn::DropoutMaskSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    /// Number of predicted positions.
    pub tokens: usize,
    pub nll_sum: f64,
}

impl EvalStats {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.tokens as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_nll().exp()
    }
}

/// Runs `language` over `stream` laid out in `batch` rows, reading `bptt`
/// positions at a time. `on_logits` sees each segment's `(T·B) × V` logits
/// and time-major targets.
pub fn evaluate_with<M: LanguageModel>(
    model: &M,
    language: usize,
    stream: &[u32],
    batch: usize,
    bptt: usize,
    mut on_logits: impl FnMut(&Tensor, &[usize]),
) -> Result<EvalStats> {
    if stream.len() < 2 {
        return Err(Error::Data(format!(
            "evaluation stream has {} tokens; at least 2 are needed",
            stream.len()
        )));
    }
    if bptt == 0 {
        return Err(Error::Config("evaluation segment length must be positive".into()));
    }
    let mut rows = batchify(stream, batch, language)?;
    if rows.row_len() < 2 {
        return Err(Error::Data(format!(
            "evaluation stream of {} tokens is too short for batch size {batch}",
            stream.len()
        )));
    }
    let masks = DropoutMaskSet::none(model.layer_dims().len());
    let mut state = model.zero_state(batch);
    let mut stats = EvalStats {
        tokens: 0,
        nll_sum: 0.0,
    };
    while let Some(seg) = rows.next_eval_segment(bptt) {
        let mut g = Graph::with_params(model.store());
        let fwd = model.forward_language(&mut g, language, &seg, &state, &masks)?;
        let logits = g.value(fwd.logits);
        let (_, v) = logits.rows_cols();
        for (row, &target) in logits.data().chunks_exact(v).zip(&seg.targets) {
            stats.nll_sum += log_sum_exp(row) - row[target];
        }
        stats.tokens += seg.targets.len();
        on_logits(logits, &seg.targets);
        for (s, &(h, c)) in state.iter_mut().zip(&fwd.final_states) {
            s.h = g.value(h).clone();
            s.c = g.value(c).clone();
        }
    }
    if !stats.nll_sum.is_finite() {
        return Err(Error::Numeric(format!("non-finite evaluation loss for language #{language}")));
    }
    Ok(stats)
}

/// `exp` of the mean negative log-likelihood over every predicted position,
/// `<eos>` and `<unk>` targets included.
pub fn perplexity<M: LanguageModel>(model: &M, language: usize, stream: &[u32], batch: usize, bptt: usize) -> Result<f64> {
    evaluate_with(model, language, stream, batch, bptt, |_, _| {}).map(|s| s.perplexity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LanguageSpec, ModelConfig, MultilingualModel, SharingPattern};

    fn model(vocab: usize) -> MultilingualModel {
        MultilingualModel::build(
            ModelConfig {
                embedding: 4,
                hidden: 6,
                pattern: SharingPattern::PROPOSED,
                languages: vec![LanguageSpec {
                    name: "xx".into(),
                    vocab,
                }],
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn zero_embedding_gives_uniform_perplexity() {
        let mut m = model(10);
        let e = m.language(0).embedding;
        m.store_mut().get_mut(e).data_mut().fill(0.0);
        let stream: Vec<u32> = (0..57).map(|i| (i * 3 % 10) as u32).collect();
        let ppl = perplexity(&m, 0, &stream, 3, 7).unwrap();
        assert!((ppl - 10.0).abs() < 1e-9, "{ppl}");
    }

    #[test]
    fn segment_length_does_not_matter() {
        let m = model(9);
        let stream: Vec<u32> = (0..80).map(|i| ((i * i + 3) % 9) as u32).collect();
        let a = perplexity(&m, 0, &stream, 1, 79).unwrap();
        for bptt in [1, 5, 13] {
            let b = perplexity(&m, 0, &stream, 1, bptt).unwrap();
            assert!(((a - b) / a).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn counts_every_position_but_the_row_ends() {
        let m = model(5);
        let stream: Vec<u32> = (0..23).map(|i| (i % 5) as u32).collect();
        let s = evaluate_with(&m, 0, &stream, 2, 4, |_, _| {}).unwrap();
        assert_eq!(s.tokens, 2 * 10);
        let s = evaluate_with(&m, 0, &stream, 1, 4, |_, _| {}).unwrap();
        assert_eq!(s.tokens, 22);
    }

    #[test]
    fn empty_stream_is_an_error() {
        let m = model(5);
        assert!(perplexity(&m, 0, &[], 1, 5).is_err());
        assert!(perplexity(&m, 0, &[1, 2, 3], 3, 5).is_err());
    }
}
