//! Utterance and context encoders.
//!
//! Tokens are embedded and pooled into one vector per utterance, optionally
//! extended with speaker features, then mixed with their neighbours by a
//! windowed `tanh` projection:
//!
//! ```text
//! v[t] = tanh(P . concat(u[t-w], ..., u[t+w]) + c)
//! ```
//!
//! with zero padding outside the conversation. Everything here has exact
//! analytic gradients; see [`Encoder::gradients`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_speaker_changes, Conversation};
use crate::train::Dropout;
use crate::{Error, Result};

pub const UNK: &str = "[UNK]";

/// Word vectors with a reserved out-of-vocabulary row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pub vectors: Array2<f64>,
    pub frozen: bool,
}

impl EmbeddingTable {
    /// `words[i]` owns row `i` of `vectors`; `words` must contain [`UNK`].
    pub fn new(words: Vec<String>, vectors: Array2<f64>, frozen: bool) -> Result<Self> {
        if vectors.nrows() != words.len() {
            return Err(Error::shape("embedding rows", words.len(), vectors.nrows()));
        }
        if vectors.ncols() == 0 {
            return Err(Error::Validation("embedding dimension must be positive".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite embedding value".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        if !index.contains_key(UNK) {
            return Err(Error::Validation(format!("vocabulary lacks {UNK}")));
        }
        Ok(Self {
            words,
            index,
            vectors,
            frozen,
        })
    }

    /// [`UNK`] followed by `words`, every row uniform in `(-0.05, 0.05)`.
    pub fn random<R: Rng>(words: impl IntoIterator<Item = String>, dim: usize, frozen: bool, rng: &mut R) -> Result<Self> {
        let mut vocab = vec![UNK.to_string()];
        vocab.extend(words.into_iter().filter(|w| w != UNK));
        let vectors = Array2::from_shape_fn((vocab.len(), dim), |_| rng.gen_range(-0.05..0.05));
        Self::new(vocab, vectors, frozen)
    }

    /// Reads a plain-text vector file: a word then its floats, space
    /// separated, one word per line. [`UNK`] is added with a random row when
    /// the file lacks it.
    pub fn from_text_file<R: Rng>(path: &Path, frozen: bool, rng: &mut R) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut words = Vec::new();
        let mut values = Vec::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let row: Vec<f64> = fields
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format {
                    path: name.clone(),
                    line: i + 1,
                    message: format!("bad vector value: {e}"),
                })?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::Format {
                        path: name,
                        line: i + 1,
                        message: format!("expected {d} values, got {}", row.len()),
                    })
                }
                _ => {}
            }
            words.push(word.to_string());
            values.extend(row);
        }
        let dim = dim.filter(|&d| d > 0).ok_or(Error::Format {
            path: name,
            line: 1,
            message: "no vectors".into(),
        })?;
        if !words.iter().any(|w| w == UNK) {
            words.push(UNK.to_string());
            values.extend((0..dim).map(|_| rng.gen_range(-0.05..0.05)));
        }
        let vectors = Array2::from_shape_vec((words.len(), dim), values)
            .expect("row lengths were checked");
        Self::new(words, vectors, frozen)
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.unk())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

/// Speaker features appended to utterance embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    #[default]
    None,
    /// One-hot speaker identifier, two entries.
    Si,
    /// Speaker-change bit, one entry.
    Sc,
}

impl FeatureMode {
    pub fn width(self) -> usize {
        match self {
            FeatureMode::None => 0,
            FeatureMode::Si => 2,
            FeatureMode::Sc => 1,
        }
    }
}

fn pool_ids(ids: &[usize], table: &EmbeddingTable, pooling: Pooling) -> Array1<f64> {
    match (ids, pooling) {
        ([], _) => Array1::zeros(table.dim()),
        (_, Pooling::Mean) => {
            let mut sum = Array1::zeros(table.dim());
            for &id in ids {
                sum += &table.vectors.row(id);
            }
            sum / ids.len() as f64
        }
        (&[.., last], Pooling::Last) => table.vectors.row(last).to_owned(),
    }
}

/// Pools token vectors; an empty utterance embeds to the zero vector.
pub fn embed_utterance(tokens: &[String], table: &EmbeddingTable, pooling: Pooling) -> Array1<f64> {
    let ids: Vec<usize> = tokens.iter().map(|t| table.lookup(t)).collect();
    pool_ids(&ids, table, pooling)
}

pub fn augment_features(u: &Array1<f64>, mode: FeatureMode, speaker_index: usize, change_bit: u8) -> Result<Array1<f64>> {
    let mut out = Vec::with_capacity(u.len() + mode.width());
    out.extend(u.iter().copied());
    match mode {
        FeatureMode::None => {}
        FeatureMode::Si => {
            if speaker_index > 1 {
                return Err(Error::Unsupported(
                    "speaker-identifier features need exactly two speakers".into(),
                ));
            }
            out.extend(if speaker_index == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
        }
        FeatureMode::Sc => out.push(f64::from(change_bit)),
    }
    Ok(Array1::from(out))
}

/// Windowed `tanh` projection over neighbouring utterance embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoder {
    pub window: usize,
    /// `d_ctx x (2w+1) d_in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ContextEncoder {
    pub fn zeros(window: usize, input_dim: usize, output_dim: usize) -> Self {
        Self {
            window,
            weight: Array2::zeros((output_dim, (2 * window + 1) * input_dim)),
            bias: Array1::zeros(output_dim),
        }
    }

    /// Weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero bias.
    pub fn random<R: Rng>(window: usize, input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let fan_in = (2 * window + 1) * input_dim;
        let r = 1.0 / (fan_in as f64).sqrt();
        Self {
            window,
            weight: Array2::from_shape_fn((output_dim, fan_in), |_| rng.gen_range(-r..r)),
            bias: Array1::zeros(output_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols() / (2 * self.window + 1)
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Stacks each step's zero-padded window into one row.
    fn windows(&self, us: ArrayView2<'_, f64>) -> Array2<f64> {
        let (len, d) = us.dim();
        let w = self.window as isize;
        let mut x = Array2::zeros((len, (2 * self.window + 1) * d));
        for t in 0..len as isize {
            for (slot, offset) in (-w..=w).enumerate() {
                let src = t + offset;
                if (0..len as isize).contains(&src) {
                    x.slice_mut(s![t, slot * d..(slot + 1) * d])
                        .assign(&us.row(src as usize));
                }
            }
        }
        x
    }

    fn check_input(&self, us: ArrayView2<'_, f64>) -> Result<()> {
        if us.nrows() == 0 {
            return Err(Error::Validation("context encoder needs at least one utterance".into()));
        }
        if us.ncols() * (2 * self.window + 1) != self.weight.ncols() {
            return Err(Error::shape("context input", self.input_dim(), us.ncols()));
        }
        Ok(())
    }
}

/// Contextual embeddings, one row per utterance embedding in `us`.
pub fn encode_context(us: ArrayView2<'_, f64>, params: &ContextEncoder) -> Result<Array2<f64>> {
    params.check_input(us)?;
    let x = params.windows(us);
    Ok((x.dot(&params.weight.t()) + &params.bias).mapv(f64::tanh))
}

/// A conversation mapped onto encoder inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub token_ids: Vec<Vec<usize>>,
    /// Speaker index per utterance in order of first appearance.
    pub speakers: Vec<usize>,
    /// Speaker-change bit per utterance; the first is always 0.
    pub change_bits: Vec<u8>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// State kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    version: u64,
    token_ids: Vec<Vec<usize>>,
    /// Window rows built from the (dropped-out) augmented embeddings.
    windows: Array2<f64>,
    input_mask: Option<Array2<f64>>,
    /// `tanh` outputs before output dropout.
    activations: Array2<f64>,
    output_mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    pub context_weight: Array2<f64>,
    pub context_bias: Array1<f64>,
    /// Accumulated gradient per embedding row touched; empty when the table
    /// is frozen.
    pub embeddings: BTreeMap<usize, Array1<f64>>,
}

/// Token lists to contextual embeddings.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub embeddings: EmbeddingTable,
    pub pooling: Pooling,
    pub features: FeatureMode,
    pub context: ContextEncoder,
    version: u64,
}

/// Compares parameters and settings only, not the cache version stamp.
impl PartialEq for Encoder {
    fn eq(&self, other: &Self) -> bool {
        self.embeddings == other.embeddings
            && self.pooling == other.pooling
            && self.features == other.features
            && self.context == other.context
    }
}

impl Encoder {
    pub fn new(embeddings: EmbeddingTable, pooling: Pooling, features: FeatureMode, context: ContextEncoder) -> Result<Self> {
        let d_in = embeddings.dim() + features.width();
        if context.input_dim() != d_in || context.weight.ncols() != (2 * context.window + 1) * d_in {
            return Err(Error::shape("context encoder input", d_in, context.input_dim()));
        }
        if context.bias.len() != context.output_dim() {
            return Err(Error::shape("context bias", context.output_dim(), context.bias.len()));
        }
        Ok(Self {
            embeddings,
            pooling,
            features,
            context,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.embeddings.dim() + self.features.width()
    }

    pub fn output_dim(&self) -> usize {
        self.context.output_dim()
    }

    /// Marks parameters as changed, invalidating outstanding caches.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    pub fn prepare(&self, conv: &Conversation) -> Result<EncodedInput> {
        let order = conv.speakers();
        if self.features == FeatureMode::Si && order.len() > 2 {
            return Err(Error::Unsupported(format!(
                "conversation {} has {} speakers; speaker-identifier features need two",
                conv.id,
                order.len()
            )));
        }
        let speakers = conv
            .utterances
            .iter()
            .map(|u| order.iter().position(|s| *s == u.speaker).unwrap_or(0))
            .collect();
        let mut change_bits = vec![0];
        change_bits.extend_from_slice(derive_speaker_changes(conv).as_slice());
        change_bits.truncate(conv.len());
        let token_ids = conv
            .utterances
            .iter()
            .map(|u| u.tokens.iter().map(|t| self.embeddings.lookup(t)).collect())
            .collect();
        Ok(EncodedInput {
            token_ids,
            speakers,
            change_bits,
        })
    }

    /// Pooled and feature-augmented utterance embeddings, `T x d_in`.
    pub fn utterance_embeddings(&self, input: &EncodedInput) -> Result<Array2<f64>> {
        let mut us = Array2::zeros((input.len(), self.input_dim()));
        for (t, ids) in input.token_ids.iter().enumerate() {
            let pooled = pool_ids(ids, &self.embeddings, self.pooling);
            let row = augment_features(&pooled, self.features, input.speakers[t], input.change_bits[t])?;
            us.row_mut(t).assign(&row);
        }
        Ok(us)
    }

    /// Contextual embeddings `T x d_ctx`. With `dropout`, masks are drawn for
    /// the utterance embeddings and for the outputs.
    pub fn forward(&self, input: &EncodedInput, dropout: Option<&mut Dropout>) -> Result<(Array2<f64>, EncoderCache)> {
        if input.is_empty() {
            return Err(Error::Validation("cannot encode an empty conversation".into()));
        }
        let mut us = self.utterance_embeddings(input)?;
        let (input_mask, output_mask_of) = match dropout {
            Some(d) => {
                let im = d.mask(us.dim());
                let om = d.mask((input.len(), self.output_dim()));
                (im, om)
            }
            None => (None, None),
        };
        if let Some(m) = &input_mask {
            us *= m;
        }
        let windows = self.context.windows(us.view());
        let activations = (windows.dot(&self.context.weight.t()) + &self.context.bias).mapv(f64::tanh);
        let mut out = activations.clone();
        if let Some(m) = &output_mask_of {
            out *= m;
        }
        Ok((
            out,
            EncoderCache {
                version: self.version,
                token_ids: input.token_ids.clone(),
                windows,
                input_mask,
                activations,
                output_mask: output_mask_of,
            },
        ))
    }

    /// Backpropagates `upstream = dL/dv` through the cached forward pass.
    pub fn gradients(&self, upstream: ArrayView2<'_, f64>, cache: &EncoderCache) -> Result<EncoderGradients> {
        if cache.version != self.version {
            return Err(Error::InvalidState(
                "encoder parameters changed since the forward pass".into(),
            ));
        }
        if upstream.dim() != cache.activations.dim() {
            return Err(Error::shape("encoder upstream rows", cache.activations.nrows(), upstream.nrows()));
        }
        let mut d_act = upstream.to_owned();
        if let Some(m) = &cache.output_mask {
            d_act *= m;
        }
        // tanh' = 1 - tanh^2
        let d_pre = d_act * cache.activations.mapv(|a| 1.0 - a * a);
        let context_weight = d_pre.t().dot(&cache.windows);
        let context_bias = d_pre.sum_axis(Axis(0));

        let mut embeddings = BTreeMap::new();
        if !self.embeddings.frozen {
            let d_windows = d_pre.dot(&self.context.weight);
            let len = cache.token_ids.len();
            let d_in = self.input_dim();
            let w = self.context.window as isize;
            let mut d_us = Array2::<f64>::zeros((len, d_in));
            for t in 0..len as isize {
                for (slot, offset) in (-w..=w).enumerate() {
                    let dst = t + offset;
                    if (0..len as isize).contains(&dst) {
                        let block = d_windows.slice(s![t, slot * d_in..(slot + 1) * d_in]);
                        let mut row = d_us.row_mut(dst as usize);
                        row += &block;
                    }
                }
            }
            if let Some(m) = &cache.input_mask {
                d_us *= m;
            }
            let dim = self.embeddings.dim();
            for (t, ids) in cache.token_ids.iter().enumerate() {
                let du = d_us.slice(s![t, ..dim]);
                let (targets, scale): (&[usize], f64) = match (ids.as_slice(), self.pooling) {
                    ([], _) => (&[], 0.0),
                    (all, Pooling::Mean) => (all, 1.0 / all.len() as f64),
                    ([.., last], Pooling::Last) => (std::slice::from_ref(last), 1.0),
                };
                for &id in targets {
                    let g = embeddings.entry(id).or_insert_with(|| Array1::zeros(dim));
                    g.scaled_add(scale, &du);
                }
            }
        }
        Ok(EncoderGradients {
            context_weight,
            context_bias,
            embeddings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(words: &[(&str, &[f64])]) -> EmbeddingTable {
        let dim = words[0].1.len();
        let mut vocab = vec![UNK.to_string()];
        let mut values = vec![0.0; dim];
        for (w, v) in words {
            vocab.push(w.to_string());
            values.extend_from_slice(v);
        }
        EmbeddingTable::new(vocab.clone(), Array2::from_shape_vec((vocab.len(), dim), values).unwrap(), false).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn pooling_constant_sequence() {
        let t = table(&[("yeah", &[0.3, -0.7, 1.0]), ("no", &[1.0, 1.0, 1.0])]);
        let row = t.vectors.row(t.lookup("yeah")).to_owned();
        for pooling in [Pooling::Mean, Pooling::Last] {
            let pooled = embed_utterance(&toks("yeah yeah yeah"), &t, pooling);
            assert!(pooled.iter().zip(&row).all(|(a, b)| (a - b).abs() < 1e-15), "{pooled}");
        }
    }

    #[test]
    fn pooling_empty_and_mean() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        assert_eq!(embed_utterance(&[], &t, Pooling::Mean), array![0.0, 0.0]);
        assert_eq!(embed_utterance(&[], &t, Pooling::Last), array![0.0, 0.0]);
        assert_eq!(embed_utterance(&toks("a b"), &t, Pooling::Mean), array![0.5, 0.5]);
    }

    #[test]
    fn last_pooling_depends_on_order() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        assert_ne!(
            embed_utterance(&toks("a b"), &t, Pooling::Last),
            embed_utterance(&toks("b a"), &t, Pooling::Last)
        );
        assert_eq!(
            embed_utterance(&toks("a b b"), &t, Pooling::Mean),
            embed_utterance(&toks("b a b"), &t, Pooling::Mean)
        );
    }

    #[test]
    fn oov_maps_to_unk() {
        let t = table(&[("a", &[1.0, 0.0])]);
        assert_eq!(t.lookup("zzz"), t.unk());
        assert_eq!(embed_utterance(&toks("zzz"), &t, Pooling::Last), array![0.0, 0.0]);
    }

    #[test]
    fn feature_augmentation() {
        let u = array![0.1, 0.2, 0.3];
        assert_eq!(augment_features(&u, FeatureMode::None, 0, 1).unwrap(), u);
        assert_eq!(augment_features(&u, FeatureMode::Sc, 0, 1).unwrap(), array![0.1, 0.2, 0.3, 1.0]);
        assert_eq!(augment_features(&u, FeatureMode::Si, 0, 0).unwrap(), array![0.1, 0.2, 0.3, 1.0, 0.0]);
        assert_eq!(augment_features(&u, FeatureMode::Si, 1, 0).unwrap(), array![0.1, 0.2, 0.3, 0.0, 1.0]);
        assert!(matches!(augment_features(&u, FeatureMode::Si, 2, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn three_speakers_reject_si() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = EmbeddingTable::random(vec!["a".to_string()], 2, false, &mut rng).unwrap();
        let enc = Encoder::new(emb, Pooling::Mean, FeatureMode::Si, ContextEncoder::zeros(0, 4, 2)).unwrap();
        let conv = Conversation::new(
            "c",
            vec![
                Utterance::new("A", toks("a"), "x"),
                Utterance::new("B", toks("a"), "x"),
                Utterance::new("C", toks("a"), "x"),
            ],
        );
        assert!(matches!(enc.prepare(&conv), Err(Error::Unsupported(_))));
    }

    #[test]
    fn change_bits_start_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = EmbeddingTable::random(vec!["a".to_string()], 2, false, &mut rng).unwrap();
        let enc = Encoder::new(emb, Pooling::Mean, FeatureMode::Sc, ContextEncoder::zeros(1, 3, 2)).unwrap();
        let conv = Conversation::new(
            "c",
            vec![
                Utterance::new("B", toks("a"), "x"),
                Utterance::new("A", toks("a"), "x"),
                Utterance::new("A", toks("a"), "x"),
            ],
        );
        let input = enc.prepare(&conv).unwrap();
        assert_eq!(input.change_bits, vec![0, 1, 0]);
        assert_eq!(input.speakers, vec![0, 1, 1]);
    }

    #[test]
    fn identity_window_is_tanh() {
        let mut p = ContextEncoder::zeros(0, 2, 2);
        p.weight = Array2::eye(2);
        let us = array![[0.5, -1.0], [2.0, 0.0]];
        assert_eq!(encode_context(us.view(), &p).unwrap(), us.mapv(f64::tanh));
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let p = ContextEncoder::zeros(2, 3, 4);
        let us = Array2::from_elem((5, 3), 0.7);
        assert_eq!(encode_context(us.view(), &p).unwrap(), Array2::<f64>::zeros((5, 4)));
    }

    #[test]
    fn single_step_window_is_zero_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ContextEncoder::random(1, 2, 3, &mut rng);
        let u = array![[0.4, -0.9]];
        let out = encode_context(u.view(), &p).unwrap();
        // Only the centre block of the weight sees a non-zero input.
        for o in 0..3 {
            let pre = p.bias[o] + p.weight[[o, 2]] * 0.4 + p.weight[[o, 3]] * -0.9;
            assert!((out[[0, o]] - pre.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn context_shape_mismatch() {
        let p = ContextEncoder::zeros(1, 3, 4);
        assert!(matches!(encode_context(Array2::zeros((2, 2)).view(), &p), Err(Error::Shape { .. })));
    }

    fn tiny_encoder(rng: &mut ChaCha8Rng, features: FeatureMode, pooling: Pooling, frozen: bool) -> Encoder {
        let words = ["a", "b", "c", "d"].map(String::from);
        let mut emb = EmbeddingTable::random(words, 2, frozen, rng).unwrap();
        emb.vectors.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let mut ctx = ContextEncoder::random(1, 2 + features.width(), 3, rng);
        ctx.weight.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        ctx.bias.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        Encoder::new(emb, pooling, features, ctx).unwrap()
    }

    fn tiny_input(rng: &mut ChaCha8Rng) -> EncodedInput {
        let len = 3;
        EncodedInput {
            token_ids: (0..len)
                .map(|_| (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..5)).collect())
                .collect(),
            speakers: (0..len).map(|_| rng.gen_range(0..2)).collect(),
            change_bits: vec![0, 1, 0],
        }
    }

    /// A fixed random linear functional of the outputs, so every output
    /// coordinate contributes to the checked gradient.
    fn probe_loss(enc: &Encoder, input: &EncodedInput, probe: &Array2<f64>) -> f64 {
        let (v, _) = enc.forward(input, None).unwrap();
        (v * probe).sum()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
    }

    fn check_encoder_gradients(seed: u64, features: FeatureMode, pooling: Pooling) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = tiny_encoder(&mut rng, features, pooling, false);
        let input = tiny_input(&mut rng);
        let probe = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = enc.forward(&input, None).unwrap();
        let grads = enc.gradients(probe.view(), &cache).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;

        for idx in ndarray::indices(enc.context.weight.dim()) {
            let (mut p, mut m) = (enc.clone(), enc.clone());
            p.context.weight[idx] += h;
            m.context.weight[idx] -= h;
            let n = (probe_loss(&p, &input, &probe) - probe_loss(&m, &input, &probe)) / (2.0 * h);
            worst = worst.max(rel_err(grads.context_weight[idx], n));
        }
        for i in 0..enc.context.bias.len() {
            let (mut p, mut m) = (enc.clone(), enc.clone());
            p.context.bias[i] += h;
            m.context.bias[i] -= h;
            let n = (probe_loss(&p, &input, &probe) - probe_loss(&m, &input, &probe)) / (2.0 * h);
            worst = worst.max(rel_err(grads.context_bias[i], n));
        }
        for idx in ndarray::indices(enc.embeddings.vectors.dim()) {
            let (mut p, mut m) = (enc.clone(), enc.clone());
            p.embeddings.vectors[idx] += h;
            m.embeddings.vectors[idx] -= h;
            let n = (probe_loss(&p, &input, &probe) - probe_loss(&m, &input, &probe)) / (2.0 * h);
            let a = grads.embeddings.get(&idx.0).map_or(0.0, |g| g[idx.1]);
            worst = worst.max(rel_err(a, n));
        }
        worst
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = tiny_encoder(&mut rng, FeatureMode::None, Pooling::Mean, false);
        let input = tiny_input(&mut rng);
        let (_, cache) = enc.forward(&input, None).unwrap();
        let g = enc.gradients(Array2::zeros((3, 3)).view(), &cache).unwrap();
        assert!(g.context_weight.iter().all(|&x| x == 0.0));
        assert!(g.context_bias.iter().all(|&x| x == 0.0));
        assert!(g.embeddings.values().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn frozen_table_has_no_embedding_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = tiny_encoder(&mut rng, FeatureMode::None, Pooling::Mean, true);
        let input = tiny_input(&mut rng);
        let (_, cache) = enc.forward(&input, None).unwrap();
        let g = enc.gradients(Array2::ones((3, 3)).view(), &cache).unwrap();
        assert!(g.embeddings.is_empty());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = tiny_encoder(&mut rng, FeatureMode::None, Pooling::Mean, false);
        let input = tiny_input(&mut rng);
        let (_, cache) = enc.forward(&input, None).unwrap();
        enc.touch();
        assert!(matches!(
            enc.gradients(Array2::ones((3, 3)).view(), &cache),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn finite_difference_tiny_instance() {
        assert!(check_encoder_gradients(8, FeatureMode::None, Pooling::Mean) < 1e-5);
    }

    #[test]
    fn dropout_masks_are_backpropagated() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let enc = tiny_encoder(&mut rng, FeatureMode::Sc, Pooling::Mean, false);
        let input = tiny_input(&mut rng);
        let probe = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let mut dropout = Dropout::new(0.3, 99);
        let (_, cache) = enc.forward(&input, Some(&mut dropout)).unwrap();
        let grads = enc.gradients(probe.view(), &cache).unwrap();
        // Replaying the same masks must reproduce the outputs, so finite
        // differences use a fresh dropout stream with the same seed.
        let loss = |e: &Encoder| {
            let mut d = Dropout::new(0.3, 99);
            let (v, _) = e.forward(&input, Some(&mut d)).unwrap();
            (v * &probe).sum()
        };
        let h = 1e-5;
        for idx in ndarray::indices(enc.context.weight.dim()) {
            let (mut p, mut m) = (enc.clone(), enc.clone());
            p.context.weight[idx] += h;
            m.context.weight[idx] -= h;
            let n = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!(rel_err(grads.context_weight[idx], n) < 1e-5);
        }
        for idx in ndarray::indices(enc.embeddings.vectors.dim()) {
            let (mut p, mut m) = (enc.clone(), enc.clone());
            p.embeddings.vectors[idx] += h;
            m.embeddings.vectors[idx] -= h;
            let n = (loss(&p) - loss(&m)) / (2.0 * h);
            let a = grads.embeddings.get(&idx.0).map_or(0.0, |g| g[idx.1]);
            assert!(rel_err(a, n) < 1e-5);
        }
    }

    #[test]
    fn reads_vector_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vec.txt");
        fs::write(&p, "hello 0.5 -1\nworld 2 3\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = EmbeddingTable::from_text_file(&p, true, &mut rng).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.len(), 3);
        assert_eq!(t.vectors.row(t.lookup("world")), array![2.0, 3.0]);
        assert!(t.vectors.row(t.unk()).iter().all(|v| v.abs() < 0.05));
        fs::write(&p, "hello 0.5 -1\nworld 2\n").unwrap();
        assert!(matches!(EmbeddingTable::from_text_file(&p, true, &mut rng), Err(Error::Format { line: 2, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn gradients_match_finite_differences(
            seed in any::<u64>(),
            features in prop_oneof![Just(FeatureMode::None), Just(FeatureMode::Si), Just(FeatureMode::Sc)],
            pooling in prop_oneof![Just(Pooling::Mean), Just(Pooling::Last)],
        ) {
            prop_assert!(check_encoder_gradients(seed, features, pooling) < 1e-5);
        }

        #[test]
        fn context_preserves_length(len in 1usize..8, window in 0usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ContextEncoder::random(window, 3, 2, &mut rng);
            let us = Array2::from_shape_fn((len, 3), |_| rng.gen_range(-1.0..1.0));
            prop_assert_eq!(encode_context(us.view(), &p).unwrap().nrows(), len);
        }

        #[test]
        fn augmentation_width(d in 1usize..6, bit in 0u8..2, spk in 0usize..2) {
            let u = Array1::zeros(d);
            for mode in [FeatureMode::None, FeatureMode::Si, FeatureMode::Sc] {
                prop_assert_eq!(augment_features(&u, mode, spk, bit).unwrap().len(), d + mode.width());
            }
        }

        #[test]
        fn mean_pooling_ignores_order(ids in proptest::collection::vec(0usize..4, 1..6), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = EmbeddingTable::random(["a", "b", "c"].map(String::from), 3, false, &mut rng).unwrap();
            let mut rev = ids.clone();
            rev.reverse();
            let a = pool_ids(&ids, &t, Pooling::Mean);
            let b = pool_ids(&rev, &t, Pooling::Mean);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
