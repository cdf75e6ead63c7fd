//! The full tagger: encoder, emission projection and CRF transitions, plus
//! the JSON checkpoint format.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::io::write_file;
use crate::corpus::{derive_speaker_changes, Conversation, Corpus, LabelSet, SpeakerChangeSeq};
use crate::crf::{
    self, emission_backward, emission_scores, nll_gradients, posterior, sequence_nll,
    softmax_decode, viterbi_decode, EmissionParams, ScoreLattice, TransitionParams, Variant,
};
use crate::encoder::{
    ContextEncoder, EmbeddingTable, EncodedInput, Encoder, EncoderCache, FeatureMode, Pooling,
};
use crate::train::Dropout;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    #[default]
    Viterbi,
    /// Independent per-utterance argmax of the emission scores.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub context_dim: usize,
    pub window: usize,
    pub pooling: Pooling,
    /// Plain-text word vectors; random initialisation when absent.
    pub embeddings_path: Option<PathBuf>,
    pub freeze_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            context_dim: 32,
            window: 2,
            pooling: Pooling::Mean,
            embeddings_path: None,
            freeze_embeddings: false,
        }
    }
}

/// A conversation mapped onto model inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub input: EncodedInput,
    pub changes: SpeakerChangeSeq,
}

/// Gradients for every trainable tensor of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    /// Dense embedding gradient; `None` when the table is frozen.
    pub embeddings: Option<Array2<f64>>,
    pub context_weight: Array2<f64>,
    pub context_bias: Array1<f64>,
    pub emission_weight: Array2<f64>,
    pub emission_bias: Array1<f64>,
    pub transitions: TransitionParams,
}

impl ModelGradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            embeddings: (!model.encoder.embeddings.frozen)
                .then(|| Array2::zeros(model.encoder.embeddings.vectors.dim())),
            context_weight: Array2::zeros(model.encoder.context.weight.dim()),
            context_bias: Array1::zeros(model.encoder.context.bias.len()),
            emission_weight: Array2::zeros(model.emission.weight.dim()),
            emission_bias: Array1::zeros(model.emission.bias.len()),
            transitions: TransitionParams::zeros(model.transitions.variant(), model.num_labels()),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGradients) {
        if let (Some(a), Some(b)) = (&mut self.embeddings, &other.embeddings) {
            *a += b;
        }
        self.context_weight += &other.context_weight;
        self.context_bias += &other.context_bias;
        self.emission_weight += &other.emission_weight;
        self.emission_bias += &other.emission_bias;
        for (a, b) in self.transitions.matrices_mut().into_iter().zip(other.transitions.matrices()) {
            *a += b;
        }
    }

    /// Flat views in [`Model::parameters_mut`] order.
    pub fn slices(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        if let Some(e) = &self.embeddings {
            out.push(("embeddings".into(), e.as_slice().expect("standard layout")));
        }
        out.push(("context_weight".into(), self.context_weight.as_slice().expect("standard layout")));
        out.push(("context_bias".into(), self.context_bias.as_slice().expect("standard layout")));
        out.push(("emission_weight".into(), self.emission_weight.as_slice().expect("standard layout")));
        out.push(("emission_bias".into(), self.emission_bias.as_slice().expect("standard layout")));
        for (name, m) in self.transitions.named_matrices() {
            out.push((name.to_string(), m.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn transition_matrix_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        let names = self.transitions.variant().matrix_names();
        let pos = names.iter().position(|n| *n == name)?;
        Some(self.transitions.matrices_mut().swap_remove(pos))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub labels: LabelSet,
    pub encoder: Encoder,
    pub emission: EmissionParams,
    pub transitions: TransitionParams,
}

impl Model {
    /// Fresh parameters: random embeddings (or loaded vectors), random
    /// context and emission weights, zero biases and zero transitions.
    pub fn init<R: Rng>(
        labels: LabelSet,
        train: &Corpus,
        config: &EncoderConfig,
        features: FeatureMode,
        variant: Variant,
        rng: &mut R,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("label set is empty".into()));
        }
        if config.embedding_dim == 0 || config.context_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let embeddings = match &config.embeddings_path {
            Some(path) => EmbeddingTable::from_text_file(path, config.freeze_embeddings, rng)?,
            None => {
                let mut seen = HashSet::new();
                let mut words = Vec::new();
                for tok in train
                    .conversations
                    .iter()
                    .flat_map(|c| &c.utterances)
                    .flat_map(|u| &u.tokens)
                {
                    if seen.insert(tok.as_str()) {
                        words.push(tok.clone());
                    }
                }
                EmbeddingTable::random(words, config.embedding_dim, config.freeze_embeddings, rng)?
            }
        };
        let d_in = embeddings.dim() + features.width();
        let context = ContextEncoder::random(config.window, d_in, config.context_dim, rng);
        let encoder = Encoder::new(embeddings, config.pooling, features, context)?;
        let emission = EmissionParams::random(labels.len(), config.context_dim, rng);
        let transitions = TransitionParams::zeros(variant, labels.len());
        Ok(Self {
            labels,
            encoder,
            emission,
            transitions,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn variant(&self) -> Variant {
        self.transitions.variant()
    }

    pub fn prepare(&self, conv: &Conversation) -> Result<Prepared> {
        Ok(Prepared {
            input: self.encoder.prepare(conv)?,
            changes: derive_speaker_changes(conv),
        })
    }

    fn forward(&self, prepared: &Prepared, dropout: Option<&mut Dropout>) -> Result<(ScoreLattice, Array2<f64>, EncoderCache)> {
        let (vs, cache) = self.encoder.forward(&prepared.input, dropout)?;
        let h = emission_scores(vs.view(), &self.emission)?;
        let lattice = ScoreLattice::new(h, self.transitions.clone(), prepared.changes.clone())?;
        Ok((lattice, vs, cache))
    }

    pub fn lattice(&self, prepared: &Prepared) -> Result<ScoreLattice> {
        Ok(self.forward(prepared, None)?.0)
    }

    pub fn decode_prepared(&self, prepared: &Prepared, decoder: Decoder) -> Result<Vec<usize>> {
        let lattice = self.lattice(prepared)?;
        Ok(decode_lattice(&lattice, decoder))
    }

    pub fn decode(&self, conv: &Conversation, decoder: Decoder) -> Result<Vec<usize>> {
        self.decode_prepared(&self.prepare(conv)?, decoder)
    }

    pub fn nll(&self, prepared: &Prepared, gold: &[usize]) -> Result<f64> {
        sequence_nll(&self.lattice(prepared)?, gold)
    }

    /// NLL of `gold` and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        prepared: &Prepared,
        gold: &[usize],
        dropout: Option<&mut Dropout>,
    ) -> Result<(f64, ModelGradients)> {
        let (lattice, vs, cache) = self.forward(prepared, dropout)?;
        let post = posterior(&lattice);
        let nll = post.log_partition - crf::path_score(&lattice, gold)?;
        let crf_grads = nll_gradients(&lattice, gold, &post)?;
        let em = emission_backward(vs.view(), &self.emission, crf_grads.emissions.view())?;
        let enc = self.encoder.gradients(em.inputs.view(), &cache)?;
        let embeddings = (!self.encoder.embeddings.frozen).then(|| {
            let mut dense = Array2::zeros(self.encoder.embeddings.vectors.dim());
            for (row, g) in &enc.embeddings {
                dense.row_mut(*row).assign(g);
            }
            dense
        });
        Ok((
            nll,
            ModelGradients {
                embeddings,
                context_weight: enc.context_weight,
                context_bias: enc.context_bias,
                emission_weight: em.weight,
                emission_bias: em.bias,
                transitions: crf_grads.transitions,
            },
        ))
    }

    /// Mutable flat views of every trainable tensor, in a fixed order shared
    /// with [`ModelGradients::slices`]. Callers must call
    /// [`Encoder::touch`] after modifying them.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        let enc = &mut self.encoder;
        if !enc.embeddings.frozen {
            out.push(("embeddings".into(), enc.embeddings.vectors.as_slice_mut().expect("standard layout")));
        }
        out.push(("context_weight".into(), enc.context.weight.as_slice_mut().expect("standard layout")));
        out.push(("context_bias".into(), enc.context.bias.as_slice_mut().expect("standard layout")));
        out.push(("emission_weight".into(), self.emission.weight.as_slice_mut().expect("standard layout")));
        out.push(("emission_bias".into(), self.emission.bias.as_slice_mut().expect("standard layout")));
        let names = self.transitions.variant().matrix_names();
        for (name, m) in names.iter().zip(self.transitions.matrices_mut()) {
            out.push((name.to_string(), m.as_slice_mut().expect("standard layout")));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec(&Checkpoint::from_model(self)).expect("checkpoint serialises");
        bytes.push(b'\n');
        write_file(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        ckpt.into_model()
    }
}

pub fn decode_lattice(lattice: &ScoreLattice, decoder: Decoder) -> Vec<usize> {
    match decoder {
        Decoder::Viterbi => viterbi_decode(lattice),
        Decoder::Softmax => softmax_decode(lattice.emissions()),
    }
}

/// The variant both members can be expressed in without changing scores.
fn common_variant(a: Variant, b: Variant) -> Variant {
    match (a, b) {
        (x, y) if x == y => x,
        (Variant::Joint, _) | (_, Variant::Joint) => Variant::Joint,
        _ => Variant::SpeakerAware,
    }
}

/// Score-averaged lattice of two models over one conversation. Models with
/// different transition variants are first lifted to a common variant (a
/// vanilla `G` becomes `g0 = g1 = G`), which leaves every score unchanged.
pub fn ensemble_lattice(a: &Model, b: &Model, conv: &Conversation) -> Result<ScoreLattice> {
    if a.labels != b.labels {
        return Err(Error::Config("ensemble members have different label sets".into()));
    }
    let variant = common_variant(a.variant(), b.variant());
    let lift = |m: &Model| -> Result<ScoreLattice> {
        let lattice = m.lattice(&m.prepare(conv)?)?;
        ScoreLattice::new(
            lattice.emissions().clone(),
            lattice.transitions().lift(variant)?,
            lattice.changes().clone(),
        )
    };
    crf::ensemble(&lift(a)?, &lift(b)?)
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(name: &str, rows: Vec<Vec<f64>>, shape: (usize, usize)) -> Result<Array2<f64>> {
    let bad = || Error::Validation(format!("checkpoint matrix {name} is not {}x{}", shape.0, shape.1));
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(bad());
    }
    Array2::from_shape_vec(shape, rows.into_iter().flatten().collect()).map_err(|_| bad())
}

fn vector(name: &str, values: Vec<f64>, len: usize) -> Result<Array1<f64>> {
    if values.len() != len {
        return Err(Error::Validation(format!("checkpoint vector {name} has {} entries, expected {len}", values.len())));
    }
    Ok(Array1::from(values))
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingBlock {
    frozen: bool,
    vocab: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParameterBlock {
    context_weight: Vec<Vec<f64>>,
    context_bias: Vec<f64>,
    emission_weight: Vec<Vec<f64>>,
    emission_bias: Vec<f64>,
    /// Keyed by [`Variant::matrix_names`].
    transitions: std::collections::BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    label_set: Vec<String>,
    variant: Variant,
    #[serde(rename = "K")]
    k: usize,
    d: usize,
    d_ctx: usize,
    w: usize,
    pooling: Pooling,
    feature_mode: FeatureMode,
    parameters: ParameterBlock,
    embeddings: EmbeddingBlock,
}

impl Checkpoint {
    fn from_model(m: &Model) -> Self {
        let enc = &m.encoder;
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            label_set: m.labels.labels().to_vec(),
            variant: m.variant(),
            k: m.num_labels(),
            d: enc.embeddings.dim(),
            d_ctx: enc.output_dim(),
            w: enc.context.window,
            pooling: enc.pooling,
            feature_mode: enc.features,
            parameters: ParameterBlock {
                context_weight: to_rows(&enc.context.weight),
                context_bias: enc.context.bias.to_vec(),
                emission_weight: to_rows(&m.emission.weight),
                emission_bias: m.emission.bias.to_vec(),
                transitions: m
                    .transitions
                    .named_matrices()
                    .into_iter()
                    .map(|(n, g)| (n.to_string(), to_rows(g)))
                    .collect(),
            },
            embeddings: EmbeddingBlock {
                frozen: enc.embeddings.frozen,
                vocab: enc.embeddings.words().to_vec(),
                vectors: to_rows(&enc.embeddings.vectors),
            },
        }
    }

    fn into_model(self) -> Result<Model> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", self.format_version)));
        }
        let labels = LabelSet::new(self.label_set)?;
        if labels.len() != self.k {
            return Err(Error::Validation(format!("checkpoint declares K={} but lists {} labels", self.k, labels.len())));
        }
        let vocab_len = self.embeddings.vocab.len();
        let vectors = from_rows("embeddings", self.embeddings.vectors, (vocab_len, self.d))?;
        let embeddings = EmbeddingTable::new(self.embeddings.vocab, vectors, self.embeddings.frozen)?;
        let d_in = self.d + self.feature_mode.width();
        let p = self.parameters;
        let context = ContextEncoder {
            window: self.w,
            weight: from_rows("context_weight", p.context_weight, (self.d_ctx, (2 * self.w + 1) * d_in))?,
            bias: vector("context_bias", p.context_bias, self.d_ctx)?,
        };
        let encoder = Encoder::new(embeddings, self.pooling, self.feature_mode, context)?;
        let emission = EmissionParams {
            weight: from_rows("emission_weight", p.emission_weight, (self.k, self.d_ctx))?,
            bias: vector("emission_bias", p.emission_bias, self.k)?,
        };
        let mut tables = p.transitions;
        let matrices = self
            .variant
            .matrix_names()
            .iter()
            .map(|name| {
                let rows = tables
                    .remove(*name)
                    .ok_or_else(|| Error::Validation(format!("checkpoint lacks transition matrix {name}")))?;
                from_rows(name, rows, (self.k, self.k))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = tables.keys().next() {
            return Err(Error::Validation(format!("unexpected transition matrix {extra} for {:?}", self.variant)));
        }
        let transitions = TransitionParams::from_matrices(self.variant, matrices)?;
        Ok(Model {
            labels,
            encoder,
            emission,
            transitions,
        })
    }
}
