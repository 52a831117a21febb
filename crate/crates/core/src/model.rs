//! The multilingual architecture: per-language tied embedding/decoder, three
//! stacked LSTM layers each either shared across languages or owned by one
//! language, and the per-language forward pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::corpus::Segment;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::{seeded, stream};
use crate::rnn::{apply_sequence_mask, embed_with_dropout, lstm_segment_forward, DropoutMaskSet, LstmLayer, LstmState, MaskShapes};
use crate::tensor::Tensor;

pub const NUM_LAYERS: usize = 3;

/// Uniform init range of embedding rows.
const EMBEDDING_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSharing {
    Shared,
    PerLanguage,
}

/// Which of the three LSTM layers are shared across languages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SharingPattern([LayerSharing; NUM_LAYERS]);

impl SharingPattern {
    /// Two shared lower layers and a language-specific top layer.
    pub const PROPOSED: SharingPattern = SharingPattern([
        LayerSharing::Shared,
        LayerSharing::Shared,
        LayerSharing::PerLanguage,
    ]);
    pub const ALL_SHARED: SharingPattern = SharingPattern([LayerSharing::Shared; NUM_LAYERS]);
    pub const NONE_SHARED: SharingPattern = SharingPattern([LayerSharing::PerLanguage; NUM_LAYERS]);

    pub fn new(tags: &[LayerSharing]) -> Result<Self> {
        let tags: [LayerSharing; NUM_LAYERS] = tags.try_into().map_err(|_| {
            Error::Config(format!(
                "sharing pattern needs exactly {NUM_LAYERS} layers, got {}",
                tags.len()
            ))
        })?;
        Ok(SharingPattern(tags))
    }

    pub fn layer(&self, k: usize) -> LayerSharing {
        self.0[k]
    }

    pub fn tags(&self) -> &[LayerSharing; NUM_LAYERS] {
        &self.0
    }
}

impl fmt::Display for SharingPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in self.0 {
            f.write_str(match t {
                LayerSharing::Shared => "S",
                LayerSharing::PerLanguage => "P",
            })?;
        }
        Ok(())
    }
}

/// Parses `SSP`, `S,S,P` or `shared,shared,per-language`.
impl FromStr for SharingPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = if s.contains(',') {
            s.split(',').map(str::trim).collect()
        } else {
            s.trim().split("").filter(|p| !p.is_empty()).collect()
        };
        let tags = parts
            .iter()
            .map(|p| match p.to_ascii_lowercase().as_str() {
                "s" | "shared" => Ok(LayerSharing::Shared),
                "p" | "per-language" | "per_language" => Ok(LayerSharing::PerLanguage),
                other => Err(Error::Config(format!("unknown layer sharing tag `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        SharingPattern::new(&tags)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageSpec {
    pub name: String,
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub embedding: usize,
    pub hidden: usize,
    pub pattern: SharingPattern,
    pub languages: Vec<LanguageSpec>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding == 0 || self.hidden == 0 {
            return Err(Error::Config("embedding and hidden sizes must be positive".into()));
        }
        if self.languages.is_empty() {
            return Err(Error::Config("at least one language is required".into()));
        }
        for l in &self.languages {
            if l.vocab < 2 {
                return Err(Error::Config(format!(
                    "language `{}` needs a vocabulary of at least 2, got {}",
                    l.name, l.vocab
                )));
            }
        }
        Ok(())
    }

    /// `(input, hidden)` of each layer. The top layer maps back to the
    /// embedding size so the decoder can reuse the embedding matrix.
    pub fn layer_dims(&self) -> [(usize, usize); NUM_LAYERS] {
        [
            (self.embedding, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, self.embedding),
        ]
    }

    /// Stable 64-bit FNV-1a fingerprint of the architecture.
    pub fn fingerprint(&self) -> u64 {
        let mut desc = format!(
            "emb={};hidden={};pattern={};langs=",
            self.embedding, self.hidden, self.pattern
        );
        for l in &self.languages {
            desc.push_str(&format!("{}:{},", l.name, l.vocab));
        }
        fnv1a(desc.as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct LanguageParams {
    pub name: String,
    pub vocab: usize,
    pub embedding: ParamId,
    pub decoder_bias: ParamId,
    layers: [Option<LstmLayer>; NUM_LAYERS],
}

impl LanguageParams {
    /// The decoder projection is the embedding matrix itself.
    pub fn decoder_weight(&self) -> ParamId {
        self.embedding
    }
}

/// Shared and language-specific parameter ids used by one language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPartition {
    pub shared: Vec<ParamId>,
    pub specific: Vec<ParamId>,
}

/// Graph handles produced by one language's forward pass.
#[derive(Clone, Debug)]
pub struct LanguageForward {
    /// (T·B) × V, time-major.
    pub logits: Var,
    /// Top-layer output before output dropout; TAR is computed on this.
    pub raw_output: Var,
    /// Top-layer output after output dropout; AR is computed on this.
    pub dropped_output: Var,
    /// `(h, c)` per layer at the last timestep.
    pub final_states: Vec<(Var, Var)>,
}

/// Anything the trainer and evaluator can run one language through.
pub trait LanguageModel {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn num_languages(&self) -> usize;
    fn vocab_size(&self, language: usize) -> usize;
    fn layer_dims(&self) -> Vec<(usize, usize)>;
    fn forward_language(
        &self,
        g: &mut Graph<'_>,
        language: usize,
        segment: &Segment,
        state: &[LstmState],
        masks: &DropoutMaskSet,
    ) -> Result<LanguageForward>;
    /// Parameter order for reductions over all parameters (gradient norm).
    fn canonical_order(&self) -> Vec<ParamId>;

    fn zero_state(&self, batch: usize) -> Vec<LstmState> {
        self.layer_dims()
            .iter()
            .map(|&(_, h)| LstmState::zeros(batch, h))
            .collect()
    }

    fn mask_shapes(&self, language: usize, batch: usize, steps: usize) -> MaskShapes {
        let layers = self.layer_dims();
        MaskShapes {
            batch,
            steps,
            vocab: self.vocab_size(language),
            embedding: layers[0].0,
            layers,
        }
    }
}

/// Shared forward body of every model in this crate: embed, three LSTM
/// layers, output dropout, tied decoder.
pub(crate) fn run_stack(
    g: &mut Graph<'_>,
    embedding: ParamId,
    decoder_bias: ParamId,
    layers: [&LstmLayer; NUM_LAYERS],
    segment: &Segment,
    state: &[LstmState],
    masks: &DropoutMaskSet,
) -> Result<LanguageForward> {
    if state.len() != NUM_LAYERS {
        return Err(Error::Dimension {
            op: "forward_language(state)",
            lhs: vec![state.len()],
            rhs: vec![NUM_LAYERS],
        });
    }
    let table = g.param(embedding);
    let mut h = embed_with_dropout(g, table, &segment.inputs, masks.embedding.as_ref())?;
    let mut final_states = Vec::with_capacity(NUM_LAYERS);
    for (k, layer) in layers.into_iter().enumerate() {
        let out = lstm_segment_forward(
            g,
            layer,
            h,
            segment.batch,
            &state[k],
            masks.layer_inputs.get(k).and_then(Option::as_ref),
            masks.weights.get(k).and_then(Option::as_ref),
        )?;
        final_states.push((out.final_h, out.final_c));
        h = out.output;
    }
    let raw_output = h;
    let dropped_output = apply_sequence_mask(g, raw_output, masks.output.as_ref())?;
    let projected = g.matmul_t(dropped_output, table)?;
    let bias = g.param(decoder_bias);
    let logits = g.add_row_bias(projected, bias)?;
    Ok(LanguageForward {
        logits,
        raw_output,
        dropped_output,
        final_states,
    })
}

pub(crate) fn init_embedding(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, seed: u64, language: usize) -> ParamId {
    let mut rng = seeded(seed, stream::embedding_init(language));
    let data = (0..vocab * dim)
        .map(|_| rng.gen_range(-EMBEDDING_INIT..EMBEDDING_INIT))
        .collect();
    store.add(name, Tensor::from_parts(vec![vocab, dim], data))
}

pub(crate) fn init_layer(store: &mut ParamStore, name: &str, dims: (usize, usize), seed: u64, slot: usize, owner: usize) -> LstmLayer {
    let mut rng = seeded(seed, stream::layer_init(slot, owner));
    LstmLayer::init(store, name, dims.0, dims.1, &mut rng)
}

#[derive(Clone, Debug)]
pub struct MultilingualModel {
    config: ModelConfig,
    store: ParamStore,
    shared: [Option<LstmLayer>; NUM_LAYERS],
    languages: Vec<LanguageParams>,
}

impl MultilingualModel {
    /// Allocates shared layers once and language-specific layers per
    /// language. Every array's initial values depend only on `seed` and the
    /// array's role, never on allocation order.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let mut store = ParamStore::new();
        let mut shared = [None; NUM_LAYERS];
        for (k, slot) in shared.iter_mut().enumerate() {
            if config.pattern.layer(k) == LayerSharing::Shared {
                *slot = Some(init_layer(&mut store, &format!("shared.lstm{k}"), dims[k], seed, k, 0));
            }
        }
        let mut languages = Vec::with_capacity(config.languages.len());
        for (l, spec) in config.languages.iter().enumerate() {
            let embedding = init_embedding(
                &mut store,
                &format!("{}.embedding", spec.name),
                spec.vocab,
                config.embedding,
                seed,
                l,
            );
            let decoder_bias = store.add(format!("{}.decoder_bias", spec.name), Tensor::zeros(&[spec.vocab]));
            let mut layers = [None; NUM_LAYERS];
            for (k, slot) in layers.iter_mut().enumerate() {
                if config.pattern.layer(k) == LayerSharing::PerLanguage {
                    *slot = Some(init_layer(&mut store, &format!("{}.lstm{k}", spec.name), dims[k], seed, k, l));
                }
            }
            languages.push(LanguageParams {
                name: spec.name.clone(),
                vocab: spec.vocab,
                embedding,
                decoder_bias,
                layers,
            });
        }
        Ok(MultilingualModel {
            config,
            store,
            shared,
            languages,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn language(&self, l: usize) -> &LanguageParams {
        &self.languages[l]
    }

    pub fn languages(&self) -> &[LanguageParams] {
        &self.languages
    }

    pub fn language_index(&self, name: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLanguage(name.to_string()))
    }

    pub fn layer(&self, language: usize, k: usize) -> &LstmLayer {
        self.shared[k]
            .as_ref()
            .or(self.languages[language].layers[k].as_ref())
            .expect("every slot is either shared or per-language")
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    /// Disjoint shared / language-specific sets whose union is everything
    /// `forward_language(language)` reads.
    pub fn parameters_of(&self, language: usize) -> ParamPartition {
        let lp = &self.languages[language];
        let mut shared = Vec::new();
        let mut specific = vec![lp.embedding, lp.decoder_bias];
        for k in 0..NUM_LAYERS {
            match (&self.shared[k], &lp.layers[k]) {
                (Some(layer), _) => shared.extend(layer.param_ids()),
                (None, Some(layer)) => specific.extend(layer.param_ids()),
                (None, None) => unreachable!("empty layer slot"),
            }
        }
        ParamPartition { shared, specific }
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }
}

impl LanguageModel for MultilingualModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn num_languages(&self) -> usize {
        self.languages.len()
    }

    fn vocab_size(&self, language: usize) -> usize {
        self.languages[language].vocab
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.config.layer_dims().to_vec()
    }

    fn forward_language(
        &self,
        g: &mut Graph<'_>,
        language: usize,
        segment: &Segment,
        state: &[LstmState],
        masks: &DropoutMaskSet,
    ) -> Result<LanguageForward> {
        let lp = self
            .languages
            .get(language)
            .ok_or_else(|| Error::UnknownLanguage(format!("#{language}")))?;
        run_stack(
            g,
            lp.embedding,
            lp.decoder_bias,
            [self.layer(language, 0), self.layer(language, 1), self.layer(language, 2)],
            segment,
            state,
            masks,
        )
    }

    /// Per language in order: layers bottom-up, embedding, decoder bias;
    /// shared arrays are listed at their first appearance.
    fn canonical_order(&self) -> Vec<ParamId> {
        let mut seen = vec![false; self.store.len()];
        let mut order = Vec::with_capacity(self.store.len());
        for l in 0..self.languages.len() {
            let lp = &self.languages[l];
            let ids = (0..NUM_LAYERS)
                .flat_map(|k| self.layer(l, k).param_ids())
                .chain([lp.embedding, lp.decoder_bias]);
            for id in ids {
                if !seen[id.index()] {
                    seen[id.index()] = true;
                    order.push(id);
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Segment;

    fn config(pattern: SharingPattern, vocabs: &[usize], emb: usize, hidden: usize) -> ModelConfig {
        ModelConfig {
            embedding: emb,
            hidden,
            pattern,
            languages: vocabs
                .iter()
                .enumerate()
                .map(|(i, &v)| LanguageSpec {
                    name: format!("lang{i}"),
                    vocab: v,
                })
                .collect(),
        }
    }

    fn segment(batch: usize, steps: usize, vocab: usize) -> Segment {
        let inputs: Vec<usize> = (0..batch * steps).map(|i| (i * 7 + 3) % vocab).collect();
        let targets: Vec<usize> = (0..batch * steps).map(|i| (i * 5 + 1) % vocab).collect();
        Segment {
            batch,
            len: steps,
            inputs,
            targets,
        }
    }

    #[test]
    fn pattern_parsing_and_length_check() {
        assert_eq!("SSP".parse::<SharingPattern>().unwrap(), SharingPattern::PROPOSED);
        assert_eq!("s, s, p".parse::<SharingPattern>().unwrap(), SharingPattern::PROPOSED);
        assert_eq!(SharingPattern::PROPOSED.to_string(), "SSP");
        assert!(matches!("SS".parse::<SharingPattern>(), Err(Error::Config(_))));
        assert!(matches!(
            SharingPattern::new(&[LayerSharing::Shared; 4]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_size_layer_shapes() {
        let cfg = config(SharingPattern::PROPOSED, &[10], 512, 1150);
        assert_eq!(cfg.layer_dims(), [(512, 1150), (1150, 1150), (1150, 512)]);
    }

    #[test]
    fn desk_model_layer_counts() {
        let m = MultilingualModel::build(config(SharingPattern::PROPOSED, &[11, 13], 16, 32), 1).unwrap();
        assert_eq!(m.layer(0, 0), m.layer(1, 0));
        assert_eq!(m.layer(0, 1), m.layer(1, 1));
        assert_ne!(m.layer(0, 2), m.layer(1, 2));
        // 2 shared layers + 2 top layers (3 arrays each) + 2 × (embedding, bias)
        assert_eq!(m.store().len(), 2 * 3 + 2 * 3 + 2 * 2);
    }

    #[test]
    fn single_language_count_is_pattern_independent() {
        let counts: Vec<usize> = [SharingPattern::PROPOSED, SharingPattern::ALL_SHARED, SharingPattern::NONE_SHARED]
            .into_iter()
            .map(|p| MultilingualModel::build(config(p, &[20], 8, 12), 3).unwrap().parameter_count())
            .collect();
        let lstm = |i: usize, h: usize| 4 * h * i + 4 * h * h + 4 * h;
        let want = lstm(8, 12) + lstm(12, 12) + lstm(12, 8) + 20 * 8 + 20;
        assert!(counts.iter().all(|&c| c == want), "{counts:?}");
    }

    #[test]
    fn build_rejects_bad_configs() {
        assert!(MultilingualModel::build(config(SharingPattern::PROPOSED, &[], 8, 8), 0).is_err());
        assert!(MultilingualModel::build(config(SharingPattern::PROPOSED, &[1], 8, 8), 0).is_err());
        assert!(MultilingualModel::build(config(SharingPattern::PROPOSED, &[5], 0, 8), 0).is_err());
    }

    #[test]
    fn decoder_is_the_embedding() {
        let m = MultilingualModel::build(config(SharingPattern::PROPOSED, &[9, 9], 4, 6), 0).unwrap();
        for lp in m.languages() {
            assert_eq!(lp.decoder_weight(), lp.embedding);
        }
    }

    #[test]
    fn logits_shape() {
        let m = MultilingualModel::build(config(SharingPattern::PROPOSED, &[7], 4, 6), 0).unwrap();
        let seg = segment(2, 3, 7);
        let mut g = Graph::with_params(m.store());
        let out = m
            .forward_language(&mut g, 0, &seg, &m.zero_state(2), &DropoutMaskSet::none(3))
            .unwrap();
        assert_eq!(g.shape(out.logits), &[2 * 3, 7]);
    }

    #[test]
    fn partitions() {
        let m = MultilingualModel::build(config(SharingPattern::PROPOSED, &[5, 6, 7], 4, 6), 0).unwrap();
        let p = m.parameters_of(1);
        assert_eq!(p.shared, [m.layer(1, 0).param_ids(), m.layer(1, 1).param_ids()].concat());
        let lp = m.language(1);
        let mut want = vec![lp.embedding, lp.decoder_bias];
        want.extend(m.layer(1, 2).param_ids());
        assert_eq!(p.specific, want);

        let none = MultilingualModel::build(config(SharingPattern::NONE_SHARED, &[5, 6], 4, 6), 0).unwrap();
        assert!(none.parameters_of(0).shared.is_empty());
        let (a, b) = (none.parameters_of(0).specific, none.parameters_of(1).specific);
        assert!(a.iter().all(|id| !b.contains(id)));
    }

    #[test]
    fn other_language_embedding_does_not_affect_logits() {
        let mut m = MultilingualModel::build(config(SharingPattern::PROPOSED, &[7, 8], 4, 6), 2).unwrap();
        let seg = segment(2, 4, 7);
        let run = |m: &MultilingualModel| {
            let mut g = Graph::with_params(m.store());
            let out = m
                .forward_language(&mut g, 0, &seg, &m.zero_state(2), &DropoutMaskSet::none(3))
                .unwrap();
            g.value(out.logits).clone()
        };
        let before = run(&m);
        let e1 = m.language(1).embedding;
        m.store_mut().get_mut(e1).data_mut().iter_mut().for_each(|v| *v += 0.5);
        assert_eq!(before, run(&m));
    }

    #[test]
    fn unknown_language_is_a_lookup_error() {
        let m = MultilingualModel::build(config(SharingPattern::PROPOSED, &[7], 4, 6), 0).unwrap();
        assert!(matches!(m.language_index("xx"), Err(Error::UnknownLanguage(_))));
        let mut g = Graph::with_params(m.store());
        let err = m.forward_language(&mut g, 3, &segment(1, 1, 7), &m.zero_state(1), &DropoutMaskSet::none(3));
        assert!(matches!(err, Err(Error::UnknownLanguage(_))));
    }

    #[test]
    fn canonical_order_covers_every_parameter_once() {
        let m = MultilingualModel::build(config(SharingPattern::PROPOSED, &[5, 6, 7], 4, 6), 0).unwrap();
        let mut order = m.canonical_order();
        assert_eq!(order.len(), m.store().len());
        order.sort();
        order.dedup();
        assert_eq!(order.len(), m.store().len());
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = config(SharingPattern::PROPOSED, &[5, 6, 7], 4, 6);
        let mut b = a.clone();
        b.languages.pop();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }
}
