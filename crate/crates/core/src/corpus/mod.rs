//! Dialogue corpora: loading, normalisation, interrupted-utterance
//! reconnection, speaker-change derivation and label statistics.

pub(crate) mod io;
mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{load_corpus, read_disfluency_list, write_jsonl, CorpusFormat, LoadOptions};
pub use synthetic::{generate_synthetic, GeneratorConfig, Range};

/// Label marking the continuation of an utterance interrupted by the other
/// speaker. It never survives reconnection and is never part of a
/// [`LabelSet`].
pub const INTERRUPTION_TAG: &str = "+";

/// The abandoned/uninterpretable label; default target for orphaned
/// continuations when the corpus uses it.
pub const ABANDONED_LABEL: &str = "%";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub tokens: Vec<String>,
    pub label: String,
}

impl Utterance {
    pub fn new(speaker: impl Into<String>, tokens: Vec<String>, label: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            tokens,
            label: label.into(),
        }
    }

    pub fn is_interruption(&self) -> bool {
        self.label == INTERRUPTION_TAG
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, utterances: Vec<Utterance>) -> Self {
        Self {
            id: id.into(),
            utterances,
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.label.as_str())
    }

    /// Distinct speakers in order of first appearance.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for u in &self.utterances {
            if !seen.contains(&u.speaker.as_str()) {
                seen.push(&u.speaker);
            }
        }
        seen
    }
}

/// Closed label vocabulary with stable indices `0..K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    /// Builds a label set in the given order.
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label == INTERRUPTION_TAG {
                return Err(Error::Validation(
                    "the interruption tag cannot be a label".into(),
                ));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate label {label:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    /// Builds a label set from observed labels, ordered by descending
    /// frequency with ties broken lexicographically. The interruption tag is
    /// skipped.
    pub fn from_observed<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for label in labels {
            if label != INTERRUPTION_TAG {
                *counts.entry(label).or_default() += 1;
            }
        }
        let mut ordered: Vec<(&str, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::new(ordered.into_iter().map(|(l, _)| l.to_string()))
            .expect("observed labels are distinct and exclude the interruption tag")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Maps a conversation's gold labels to indices.
    pub fn encode(&self, conv: &Conversation) -> Result<Vec<usize>> {
        conv.utterances
            .iter()
            .enumerate()
            .map(|(t, u)| {
                self.index_of(&u.label).ok_or_else(|| {
                    Error::Validation(format!(
                        "conversation {}: utterance {t} has unknown label {:?}",
                        conv.id, u.label
                    ))
                })
            })
            .collect()
    }
}

/// Binary speaker-change indicators between neighbouring utterances.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpeakerChangeSeq(Vec<u8>);

impl SpeakerChangeSeq {
    pub fn new(changes: Vec<u8>) -> Result<Self> {
        if let Some(bad) = changes.iter().find(|&&z| z > 1) {
            return Err(Error::Validation(format!("speaker change value {bad}")));
        }
        Ok(Self(changes))
    }

    /// A sequence with no speaker change, for `len + 1` utterances.
    pub fn unchanged(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, t: usize) -> u8 {
        self.0[t]
    }
}

pub fn derive_speaker_changes(conv: &Conversation) -> SpeakerChangeSeq {
    SpeakerChangeSeq(
        conv.utterances
            .windows(2)
            .map(|w| u8::from(w[0].speaker != w[1].speaker))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub conversations: Vec<Conversation>,
    pub label_set: LabelSet,
    pub split: Split,
}

impl Corpus {
    /// Wraps conversations, deriving the label set from observed labels.
    pub fn new(conversations: Vec<Conversation>, split: Split) -> Self {
        let label_set =
            LabelSet::from_observed(conversations.iter().flat_map(|c| c.labels()));
        Self {
            conversations,
            label_set,
            split,
        }
    }

    /// Wraps conversations under an existing label set, checking that every
    /// non-interruption label belongs to it.
    pub fn with_label_set(
        conversations: Vec<Conversation>,
        label_set: LabelSet,
        split: Split,
    ) -> Result<Self> {
        for conv in &conversations {
            for (t, u) in conv.utterances.iter().enumerate() {
                if !u.is_interruption() && !label_set.contains(&u.label) {
                    return Err(Error::Validation(format!(
                        "conversation {}: utterance {t} has label {:?} outside the label set",
                        conv.id, u.label
                    )));
                }
            }
        }
        Ok(Self {
            conversations,
            label_set,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    /// Reconnects every conversation. `None` selects
    /// [`OrphanPolicy::default_for`] this corpus's label set.
    pub fn reconnect(&self, policy: Option<&OrphanPolicy>) -> Result<Corpus> {
        let default;
        let policy = match policy {
            Some(p) => p,
            None => {
                default = OrphanPolicy::default_for(&self.label_set);
                &default
            }
        };
        let conversations = self
            .conversations
            .iter()
            .map(|c| reconnect_interrupted(c, policy))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus::new(conversations, self.split))
    }

    /// Splits off consecutive blocks of conversations. All parts keep this
    /// corpus's label set.
    pub fn partition(&self, sizes: &[usize]) -> Result<Vec<Corpus>> {
        let total: usize = sizes.iter().sum();
        if total > self.len() {
            return Err(Error::Config(format!(
                "cannot split {} conversations into parts totalling {total}",
                self.len()
            )));
        }
        let splits = [Split::Train, Split::Valid, Split::Test];
        let mut start = 0;
        Ok(sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let part = Corpus {
                    conversations: self.conversations[start..start + n].to_vec(),
                    label_set: self.label_set.clone(),
                    split: splits.get(i).copied().unwrap_or(Split::Test),
                };
                start += n;
                part
            })
            .collect())
    }
}

/// What to do with a continuation that has no earlier utterance by the same
/// speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OrphanPolicy {
    /// Keep the utterance in place under the given label.
    Relabel(String),
    /// Remove the utterance.
    Drop,
    /// Fail with [`Error::OrphanInterruption`].
    Error,
}

impl OrphanPolicy {
    /// Relabel to the abandoned label when the corpus has it, else drop.
    pub fn default_for(labels: &LabelSet) -> Self {
        if labels.contains(ABANDONED_LABEL) {
            OrphanPolicy::Relabel(ABANDONED_LABEL.to_string())
        } else {
            OrphanPolicy::Drop
        }
    }
}

/// Merges every continuation into the nearest earlier utterance by the same
/// speaker. The merged utterance keeps the position and label of its first
/// part; chains of continuations collapse into the originating utterance.
pub fn reconnect_interrupted(conv: &Conversation, policy: &OrphanPolicy) -> Result<Conversation> {
    let mut merged: Vec<Utterance> = Vec::with_capacity(conv.len());
    for (index, utt) in conv.utterances.iter().enumerate() {
        if !utt.is_interruption() {
            merged.push(utt.clone());
            continue;
        }
        // `merged` holds no continuations, so the nearest same-speaker entry
        // is the originating utterance.
        match merged.iter_mut().rev().find(|u| u.speaker == utt.speaker) {
            Some(origin) => origin.tokens.extend(utt.tokens.iter().cloned()),
            None => match policy {
                OrphanPolicy::Relabel(label) => {
                    merged.push(Utterance::new(utt.speaker.clone(), utt.tokens.clone(), label))
                }
                OrphanPolicy::Drop => {}
                OrphanPolicy::Error => {
                    return Err(Error::OrphanInterruption {
                        conversation: conv.id.clone(),
                        index,
                        speaker: utt.speaker.clone(),
                    })
                }
            },
        }
    }
    Ok(Conversation::new(conv.id.clone(), merged))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelStat {
    pub label: String,
    pub count: usize,
    pub frequency: f64,
}

/// Per-label utterance counts and frequencies, most frequent first. Every
/// utterance is counted under its literal label, including the interruption
/// tag when the corpus has not been reconnected.
pub fn label_statistics(corpus: &Corpus) -> Vec<LabelStat> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for label in corpus.conversations.iter().flat_map(|c| c.labels()) {
        *counts.entry(label).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    let mut rows: Vec<LabelStat> = counts
        .into_iter()
        .map(|(label, count)| LabelStat {
            label: label.to_string(),
            count,
            frequency: count as f64 / total as f64,
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
    rows
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn texts(conv: &Conversation) -> Vec<String> {
        conv.utterances.iter().map(Utterance::text).collect()
    }

    #[test]
    fn reconnects_sw3332_fragment() {
        let out = reconnect_interrupted(&sw3332(), &OrphanPolicy::Drop).unwrap();
        assert_eq!(
            texts(&out),
            vec![
                "of course i use, credit cards.",
                "<laughter>.",
                "i have a couple of credit cards and, uh, use them.",
                "yeah.",
                "uh-huh,",
                "do you use them a lot?",
                "oh, we try not to.",
            ]
        );
        let labels: Vec<&str> = out.labels().collect();
        assert_eq!(labels, ["sd", "x", "sd", "b", "b", "qy", "ng"]);
        assert_eq!(out.utterances[0].speaker, "B");
        assert_eq!(out.utterances[1].speaker, "A");
        assert_eq!(out.utterances[2].speaker, "B");
        assert!(out.utterances.iter().all(|u| !u.is_interruption()));
    }

    #[test]
    fn reconnects_across_other_speaker() {
        let conv = Conversation::new(
            "c",
            vec![
                utt("A", "so,", "qw"),
                utt("B", "<throat_clearing>", "x"),
                utt("A", "what's your name?", "+"),
            ],
        );
        let out = reconnect_interrupted(&conv, &OrphanPolicy::Error).unwrap();
        assert_eq!(texts(&out), vec!["so, what's your name?", "<throat_clearing>"]);
        assert_eq!(out.utterances[0].label, "qw");
        assert_eq!(out.utterances[1].label, "x");
    }

    #[test]
    fn chained_continuations_collapse_into_origin() {
        let conv = Conversation::new(
            "c",
            vec![
                utt("A", "one", "sd"),
                utt("B", "uh-huh", "b"),
                utt("A", "two", "+"),
                utt("B", "yeah", "b"),
                utt("A", "three", "+"),
            ],
        );
        let out = reconnect_interrupted(&conv, &OrphanPolicy::Error).unwrap();
        assert_eq!(texts(&out), vec!["one two three", "uh-huh", "yeah"]);
    }

    #[test]
    fn plus_free_conversation_is_unchanged() {
        let conv = Conversation::new("c", vec![utt("A", "hi", "fp"), utt("B", "hello", "fp")]);
        assert_eq!(reconnect_interrupted(&conv, &OrphanPolicy::Error).unwrap(), conv);
    }

    #[test]
    fn orphan_policies() {
        let conv = Conversation::new("c9", vec![utt("A", "hi", "fp"), utt("B", "there", "+")]);
        let err = reconnect_interrupted(&conv, &OrphanPolicy::Error).unwrap_err();
        assert!(matches!(
            err,
            Error::OrphanInterruption { ref conversation, index: 1, .. } if conversation == "c9"
        ));
        let dropped = reconnect_interrupted(&conv, &OrphanPolicy::Drop).unwrap();
        assert_eq!(dropped.len(), 1);
        let relabeled =
            reconnect_interrupted(&conv, &OrphanPolicy::Relabel("%".into())).unwrap();
        assert_eq!(relabeled.utterances[1].label, "%");
        assert_eq!(relabeled.utterances[1].tokens, ["there"]);
    }

    #[test]
    fn default_orphan_policy_depends_on_label_set() {
        let with = LabelSet::new(["sd", "%"]).unwrap();
        let without = LabelSet::new(["sd"]).unwrap();
        assert_eq!(OrphanPolicy::default_for(&with), OrphanPolicy::Relabel("%".into()));
        assert_eq!(OrphanPolicy::default_for(&without), OrphanPolicy::Drop);
    }

    #[test]
    fn speaker_changes_of_sw3332() {
        let z = derive_speaker_changes(&sw3332());
        assert_eq!(z.as_slice(), &[1, 1, 0, 1, 1, 1, 0, 1]);
    }

    #[test]
    fn speaker_changes_degenerate_cases() {
        let single = Conversation::new("c", vec![utt("A", "hi", "fp")]);
        assert!(derive_speaker_changes(&single).is_empty());
        let mono = Conversation::new(
            "c",
            vec![utt("A", "a", "x"), utt("A", "b", "x"), utt("A", "c", "x")],
        );
        assert_eq!(derive_speaker_changes(&mono).as_slice(), &[0, 0]);
    }

    #[test]
    fn statistics_of_sw3332() {
        let corpus = Corpus::new(vec![sw3332()], Split::Train);
        let stats = label_statistics(&corpus);
        assert_eq!(stats.iter().map(|s| s.count).sum::<usize>(), 9);
        let sd = stats.iter().find(|s| s.label == "sd").unwrap();
        assert_eq!(sd.count, 2);
        assert_eq!(sd.frequency, 2.0 / 9.0);
        // sd, b and + tie on 2; lexicographic order decides.
        let order: Vec<&str> = stats.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(order, ["+", "b", "sd", "ng", "qy", "x"]);
        let total: f64 = stats.iter().map(|s| s.frequency).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn statistics_edge_cases() {
        let single = Corpus::new(vec![Conversation::new("c", vec![utt("A", "hello", "fp")])], Split::Train);
        let stats = label_statistics(&single);
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].frequency, 1.0);
        assert!(label_statistics(&Corpus::new(vec![], Split::Train)).is_empty());
    }

    #[test]
    fn label_set_orders_by_frequency_then_name() {
        let set = LabelSet::from_observed(["b", "sd", "+", "sd", "aa", "b", "x"]);
        assert_eq!(set.labels(), ["b", "sd", "aa", "x"]);
        assert_eq!(set.index_of("sd"), Some(1));
        assert!(!set.contains("+"));
        assert!(LabelSet::new(["a", "a"]).is_err());
        assert!(LabelSet::new(["+"]).is_err());
    }

    fn arb_conversation() -> impl Strategy<Value = Conversation> {
        let utterance = (
            prop_oneof![Just("A"), Just("B"), Just("C")],
            proptest::collection::vec("[a-e]{1,3}", 0..4),
            prop_oneof![Just("sd"), Just("b"), Just("+"), Just("+")],
        )
            .prop_map(|(s, tokens, l)| Utterance::new(s, tokens, l));
        proptest::collection::vec(utterance, 1..12).prop_map(|u| Conversation::new("p", u))
    }

    proptest! {
        #[test]
        fn reconnect_is_idempotent(conv in arb_conversation()) {
            for policy in [OrphanPolicy::Drop, OrphanPolicy::Relabel("%".into())] {
                let once = reconnect_interrupted(&conv, &policy).unwrap();
                let twice = reconnect_interrupted(&once, &policy).unwrap();
                prop_assert_eq!(&once, &twice);
                prop_assert!(once.utterances.iter().all(|u| !u.is_interruption()));
            }
        }

        #[test]
        fn reconnect_preserves_token_multiset(conv in arb_conversation()) {
            let out = reconnect_interrupted(&conv, &OrphanPolicy::Relabel("%".into())).unwrap();
            let mut before: Vec<&String> = conv.utterances.iter().flat_map(|u| &u.tokens).collect();
            let mut after: Vec<&String> = out.utterances.iter().flat_map(|u| &u.tokens).collect();
            before.sort();
            after.sort();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn speaker_change_shape(conv in arb_conversation()) {
            let z = derive_speaker_changes(&conv);
            prop_assert_eq!(z.len(), conv.len() - 1);
            for (t, &bit) in z.as_slice().iter().enumerate() {
                let differ = conv.utterances[t].speaker != conv.utterances[t + 1].speaker;
                prop_assert_eq!(bit, u8::from(differ));
            }
        }

        #[test]
        fn statistics_are_normalised(conv in arb_conversation()) {
            let stats = label_statistics(&Corpus::new(vec![conv.clone()], Split::Train));
            prop_assert_eq!(stats.iter().map(|s| s.count).sum::<usize>(), conv.len());
            prop_assert!(stats.iter().all(|s| s.count >= 1));
            let total: f64 = stats.iter().map(|s| s.frequency).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
