//! Single-language model: the monolithic baseline the multilingual model
//! reduces to when only one language is trained.

use crate::corpus::Segment;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{init_embedding, init_layer, run_stack, LanguageForward, LanguageModel, NUM_LAYERS};
use crate::params::{ParamId, ParamStore};
use crate::rnn::{DropoutMaskSet, LstmLayer, LstmState};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MonolingualModel {
    name: String,
    vocab: usize,
    embedding_dim: usize,
    hidden: usize,
    store: ParamStore,
    embedding: ParamId,
    decoder_bias: ParamId,
    layers: Vec<LstmLayer>,
}

impl MonolingualModel {
    pub fn build(name: &str, vocab: usize, embedding: usize, hidden: usize, seed: u64) -> Result<Self> {
        if vocab < 2 || embedding == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "invalid monolingual model sizes: vocab {vocab}, embedding {embedding}, hidden {hidden}"
            )));
        }
        let dims = [(embedding, hidden), (hidden, hidden), (hidden, embedding)];
        let mut store = ParamStore::new();
        let emb = init_embedding(&mut store, "embedding", vocab, embedding, seed, 0);
        let layers = (0..NUM_LAYERS)
            .map(|k| init_layer(&mut store, &format!("lstm{k}"), dims[k], seed, k, 0))
            .collect();
        let decoder_bias = store.add("decoder_bias", Tensor::zeros(&[vocab]));
        Ok(MonolingualModel {
            name: name.to_string(),
            vocab,
            embedding_dim: embedding,
            hidden,
            store,
            embedding: emb,
            decoder_bias,
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn decoder_bias(&self) -> ParamId {
        self.decoder_bias
    }

    pub fn layer(&self, k: usize) -> &LstmLayer {
        &self.layers[k]
    }
}

impl LanguageModel for MonolingualModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn num_languages(&self) -> usize {
        1
    }

    fn vocab_size(&self, _language: usize) -> usize {
        self.vocab
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        vec![
            (self.embedding_dim, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, self.embedding_dim),
        ]
    }

    fn forward_language(
        &self,
        g: &mut Graph<'_>,
        language: usize,
        segment: &Segment,
        state: &[LstmState],
        masks: &DropoutMaskSet,
    ) -> Result<LanguageForward> {
        if language != 0 {
            return Err(Error::UnknownLanguage(format!("#{language}")));
        }
        run_stack(
            g,
            self.embedding,
            self.decoder_bias,
            [&self.layers[0], &self.layers[1], &self.layers[2]],
            segment,
            state,
            masks,
        )
    }

    fn canonical_order(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(LstmLayer::param_ids)
            .chain([self.embedding, self.decoder_bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LanguageSpec, ModelConfig, MultilingualModel, SharingPattern};

    #[test]
    fn initial_values_match_single_language_multilingual_model() {
        for pattern in [SharingPattern::PROPOSED, SharingPattern::ALL_SHARED, SharingPattern::NONE_SHARED] {
            let multi = MultilingualModel::build(
                ModelConfig {
                    embedding: 5,
                    hidden: 7,
                    pattern,
                    languages: vec![LanguageSpec {
                        name: "xx".into(),
                        vocab: 11,
                    }],
                },
                9,
            )
            .unwrap();
            let mono = MonolingualModel::build("xx", 11, 5, 7, 9).unwrap();
            let a: Vec<&Tensor> = multi.canonical_order().iter().map(|&id| multi.store().get(id)).collect();
            let b: Vec<&Tensor> = mono.canonical_order().iter().map(|&id| mono.store().get(id)).collect();
            assert_eq!(a, b, "pattern {pattern}");
        }
    }
}
