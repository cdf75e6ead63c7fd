//! Synthetic two-speaker corpora with known, speaker-conditioned label
//! transitions.
//!
//! Labels follow a Markov chain whose transition row is taken from `g0` when
//! the speaker stays and from `g1` when it changes. Each utterance's tokens
//! come from an inventory keyed by its label; with probability `epsilon` a
//! token is drawn from the inventory of a different, uniformly chosen label
//! instead, which controls how informative the text is on its own.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, Corpus, LabelSet, Split, Utterance};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Number of labels K.
    pub k: usize,
    pub num_conversations: usize,
    /// Conversation length, uniform over the inclusive range.
    pub length: Range,
    /// Tokens per utterance, uniform over the inclusive range.
    pub tokens_per_utterance: Range,
    /// Distinct tokens per label.
    pub inventory_size: usize,
    /// Probability that the next utterance has the same speaker.
    pub p_stay: f64,
    /// Row-stochastic transitions used when the speaker stays.
    pub g0: Vec<Vec<f64>>,
    /// Row-stochastic transitions used when the speaker changes.
    pub g1: Vec<Vec<f64>>,
    /// Probability that a token is drawn from another label's inventory.
    pub epsilon: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn label_name(index: usize) -> String {
        format!("l{index}")
    }

    /// Generator label names, indexed like the rows of `g0` and `g1`.
    pub fn label_names(&self) -> Vec<String> {
        (0..self.k).map(Self::label_name).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.k < 2 {
            return fail(format!("k must be at least 2, got {}", self.k));
        }
        if self.length.min == 0 || self.length.min > self.length.max {
            return fail(format!("bad length range {:?}", self.length));
        }
        if self.tokens_per_utterance.min > self.tokens_per_utterance.max {
            return fail(format!("bad token range {:?}", self.tokens_per_utterance));
        }
        if self.inventory_size == 0 {
            return fail("inventory_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_stay) {
            return fail(format!("p_stay {} outside [0, 1]", self.p_stay));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return fail(format!("epsilon {} outside [0, 1)", self.epsilon));
        }
        for (name, m) in [("g0", &self.g0), ("g1", &self.g1)] {
            if m.len() != self.k {
                return fail(format!("{name} has {} rows, expected {}", m.len(), self.k));
            }
            for (i, row) in m.iter().enumerate() {
                if row.len() != self.k {
                    return fail(format!("{name} row {i} has {} entries", row.len()));
                }
                if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    return fail(format!("{name} row {i} has a negative or non-finite entry"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return fail(format!("{name} row {i} sums to {sum}"));
                }
            }
        }
        Ok(())
    }
}

/// Integer draws go through `u64` so the stream does not depend on the
/// platform's pointer width.
fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.gen_range(0..n as u64) as usize
}

fn uniform_in(rng: &mut ChaCha8Rng, range: Range) -> usize {
    range.min + uniform_index(rng, range.max - range.min + 1)
}

fn categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1; fall back to the last non-zero entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn generate_synthetic(config: &GeneratorConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let names = config.label_names();
    let speakers = ["A", "B"];

    let mut conversations = Vec::with_capacity(config.num_conversations);
    for n in 0..config.num_conversations {
        let len = uniform_in(&mut rng, config.length);
        let mut speaker = uniform_index(&mut rng, 2);
        let mut label = uniform_index(&mut rng, config.k);
        let mut utterances = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 {
                let stays = rng.gen::<f64>() < config.p_stay;
                let row = if stays {
                    &config.g0[label]
                } else {
                    speaker = 1 - speaker;
                    &config.g1[label]
                };
                label = categorical(&mut rng, row);
            }
            let num_tokens = uniform_in(&mut rng, config.tokens_per_utterance);
            let tokens = (0..num_tokens)
                .map(|_| {
                    let source = if rng.gen::<f64>() < config.epsilon {
                        // Uniform over the other K-1 labels.
                        let other = uniform_index(&mut rng, config.k - 1);
                        if other >= label {
                            other + 1
                        } else {
                            other
                        }
                    } else {
                        label
                    };
                    let j = uniform_index(&mut rng, config.inventory_size);
                    format!("w{source}x{j}")
                })
                .collect();
            utterances.push(Utterance::new(speakers[speaker], tokens, names[label].clone()));
        }
        conversations.push(Conversation::new(format!("syn{}-{n:05}", config.seed), utterances));
    }

    // Index labels by observed frequency, keeping unseen generator labels at
    // the end so the set always has K entries.
    let observed = LabelSet::from_observed(conversations.iter().flat_map(|c| c.labels()));
    let mut ordered: Vec<String> = observed.labels().to_vec();
    ordered.extend(names.into_iter().filter(|l| !observed.contains(l)));
    Corpus::with_label_set(conversations, LabelSet::new(ordered)?, Split::Train)
}
