use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conversation, Corpus, Split, Utterance};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// One conversation per line.
    #[default]
    Jsonl,
    /// One utterance per row: conversation_id, speaker, label, text.
    SwdaCsv,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub format: CorpusFormat,
    /// Tokens removed after lowercasing.
    pub disfluency_markers: HashSet<String>,
    pub split: Split,
}

impl LoadOptions {
    pub fn new(format: CorpusFormat) -> Self {
        Self {
            format,
            ..Self::default()
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct UtteranceRecord {
    pub speaker: String,
    pub label: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ConversationRecord {
    pub id: String,
    pub utterances: Vec<UtteranceRecord>,
}

/// Reads a marker list: one token per line, blank lines and `#` comments
/// ignored.
pub fn read_disfluency_list(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect())
}

pub(crate) fn normalize_text(text: &str, markers: &HashSet<String>) -> Vec<String> {
    text.split_whitespace()
        .map(str::to_lowercase)
        .filter(|t| !markers.contains(t))
        .collect()
}

pub fn load_corpus(path: &Path, options: &LoadOptions) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let conversations = match options.format {
        CorpusFormat::Jsonl => parse_jsonl(&name, &text, &options.disfluency_markers)?,
        CorpusFormat::SwdaCsv => parse_swda_csv(&name, &text, &options.disfluency_markers)?,
    };
    if conversations.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus::new(conversations, options.split))
}

pub(crate) fn parse_jsonl_records(name: &str, text: &str) -> Result<Vec<(usize, ConversationRecord)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ConversationRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            path: name.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

fn parse_jsonl(name: &str, text: &str, markers: &HashSet<String>) -> Result<Vec<Conversation>> {
    parse_jsonl_records(name, text)?
        .into_iter()
        .map(|(line, record)| {
            if record.utterances.is_empty() {
                return Err(Error::Format {
                    path: name.to_string(),
                    line,
                    message: format!("conversation {} has no utterances", record.id),
                });
            }
            let utterances = record
                .utterances
                .into_iter()
                .map(|u| Utterance::new(u.speaker, normalize_text(&u.text, markers), u.label))
                .collect();
            Ok(Conversation::new(record.id, utterances))
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct SwdaRow {
    conversation_id: String,
    speaker: String,
    label: String,
    text: String,
}

fn parse_swda_csv(name: &str, text: &str, markers: &HashSet<String>) -> Result<Vec<Conversation>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut order: Vec<Conversation> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for row in reader.deserialize::<SwdaRow>() {
        let row = row.map_err(|e| Error::Format {
            path: name.to_string(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let slot = *index.entry(row.conversation_id.clone()).or_insert_with(|| {
            order.push(Conversation::new(row.conversation_id.clone(), Vec::new()));
            order.len() - 1
        });
        order[slot].utterances.push(Utterance::new(
            row.speaker,
            normalize_text(&row.text, markers),
            row.label,
        ));
    }
    Ok(order)
}

pub(crate) fn conversation_record(conv: &Conversation, predicted: Option<&[String]>) -> ConversationRecord {
    ConversationRecord {
        id: conv.id.clone(),
        utterances: conv
            .utterances
            .iter()
            .enumerate()
            .map(|(t, u)| UtteranceRecord {
                speaker: u.speaker.clone(),
                label: u.label.clone(),
                text: u.text(),
                predicted: predicted.map(|p| p[t].clone()),
            })
            .collect(),
    }
}

/// Writes conversations in the canonical JSON Lines format.
pub fn write_jsonl(path: &Path, conversations: &[Conversation]) -> Result<()> {
    let mut out = Vec::new();
    for conv in conversations {
        serde_json::to_writer(&mut out, &conversation_record(conv, None))
            .expect("records serialise");
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}
