//! The `dacrf` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::io::{conversation_record, parse_jsonl_records, write_file};
use crate::corpus::{
    generate_synthetic, label_statistics, load_corpus, read_disfluency_list, write_jsonl, Corpus, CorpusFormat,
    GeneratorConfig, LabelSet, LoadOptions, OrphanPolicy, Split,
};
use crate::crf::Variant;
use crate::encoder::{FeatureMode, Pooling};
use crate::eval::{
    accuracy, confusion, export_transition_heatmap, precision_recall_f1, ConfusionMatrix, Normalization,
};
use crate::model::{decode_lattice, ensemble_lattice, Decoder, Model};
use crate::train::{run_multi_seed, train_with_progress, write_log_csv, MultiSeedOptions, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dacrf", version, about = "Speaker-change-aware CRF dialogue act tagger")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Normalise a corpus, optionally reconnecting interrupted utterances.
    Prep(PrepArgs),
    /// Generate a synthetic corpus from a generator config.
    Gen(GenArgs),
    /// Train one model, or several seeds in parallel with --runs.
    Train(TrainArgs),
    /// Tag a corpus with a trained model.
    Decode(DecodeArgs),
    /// Score a decoded corpus.
    Eval(EvalArgs),
    /// Tag a corpus with the score average of two models.
    Ensemble(EnsembleArgs),
    /// Export transition matrices as CSV tables and SVG heatmaps.
    Viz(VizArgs),
    /// Print label statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Input corpus.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = CorpusFormat::Jsonl)]
    pub format: CorpusFormat,
    /// Tokens to drop, one per line.
    #[arg(long)]
    pub disfluency_list: Option<PathBuf>,
}

impl InputArgs {
    fn load(&self) -> Result<Corpus> {
        load_input(&self.input, self.format, self.disfluency_list.as_deref())
    }
}

fn load_input(path: &Path, format: CorpusFormat, disfluency: Option<&Path>) -> Result<Corpus> {
    let mut options = LoadOptions::new(format);
    if let Some(p) = disfluency {
        options.disfluency_markers = read_disfluency_list(p)?;
    }
    load_corpus(path, &options)
}

fn parse_orphan_policy(s: &str) -> std::result::Result<OrphanPolicy, String> {
    match s {
        "drop" => Ok(OrphanPolicy::Drop),
        "error" => Ok(OrphanPolicy::Error),
        _ => match s.strip_prefix("relabel:") {
            Some(label) if !label.is_empty() => Ok(OrphanPolicy::Relabel(label.to_string())),
            _ => Err(format!("expected drop, error or relabel:<label>, got {s:?}")),
        },
    }
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Merge "+" continuations into the same speaker's previous utterance.
    #[arg(long)]
    pub reconnect: bool,
    /// Handling of continuations with no earlier same-speaker utterance:
    /// drop, error or relabel:<label>. Defaults to relabel:% when the corpus
    /// uses "%", otherwise drop.
    #[arg(long, value_parser = parse_orphan_policy)]
    pub orphan_policy: Option<OrphanPolicy>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generator config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file, or a directory holding train/valid/test.jsonl with --split.
    #[arg(long)]
    pub out: PathBuf,
    /// Conversation counts for train,valid,test.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    /// Test corpus, scored after training; required with --runs > 1.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CorpusFormat::Jsonl)]
    pub format: CorpusFormat,
    /// Training config (JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path, or an output directory with --runs > 1.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV log; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Parallel runs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    #[arg(long, value_enum)]
    pub feature_mode: Option<FeatureMode>,
    #[arg(long, value_enum)]
    pub pooling: Option<Pooling>,
    #[arg(long, value_enum)]
    pub decoder: Option<Decoder>,
    /// Train the softmax baseline: vanilla variant, transitions held at zero,
    /// softmax decoding.
    #[arg(long)]
    pub softmax_baseline: bool,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub context_dim: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Pretrained word vectors, one "word v1 ... vd" line each.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub freeze_embeddings: bool,
    /// Transition matrices to hold at zero (g, g0, g1, g_basis).
    #[arg(long, value_delimiter = ',')]
    pub freeze_transitions: Option<Vec<String>>,
}

impl TrainArgs {
    /// Defaults, then the config file, then explicit flags.
    pub fn resolve_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_json::<TrainConfig>(path)?,
            None => TrainConfig::default(),
        };
        if self.softmax_baseline {
            cfg = cfg.softmax_baseline();
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone(); })*
            };
        }
        set!(
            seed => seed,
            variant => variant,
            feature_mode => feature_mode,
            pooling => encoder.pooling,
            decoder => decoder,
            learning_rate => learning_rate,
            dropout => dropout,
            max_epochs => max_epochs,
            patience => patience,
            batch_size => batch_size,
            embedding_dim => encoder.embedding_dim,
            context_dim => encoder.context_dim,
            window => encoder.window,
            freeze_transitions => freeze_transitions,
        );
        if let Some(p) = &self.embeddings {
            cfg.encoder.embeddings_path = Some(p.clone());
        }
        if self.freeze_embeddings {
            cfg.encoder.freeze_embeddings = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Decoder::Viterbi)]
    pub decoder: Decoder,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Two checkpoints.
    #[arg(long, num_args = 2, required = true)]
    pub models: Vec<PathBuf>,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Decoder::Viterbi)]
    pub decoder: Decoder,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Decoded JSONL with "label" and "predicted" per utterance.
    #[arg(long)]
    pub pred: PathBuf,
    /// Fix the label order from a checkpoint instead of observed frequency.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory for metrics.csv, confusion.csv and confusion_normalized.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Normalization::MinmaxGlobal)]
    pub normalization: Normalization,
    /// Labels to show, in order; defaults to the full label set.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn print_stats(corpus: &Corpus) {
    println!("{:<16} {:>10} {:>9}", "label", "count", "percent");
    for s in label_statistics(corpus) {
        println!("{:<16} {:>10} {:>8.2}%", s.label, s.count, 100.0 * s.frequency);
    }
    println!("{:<16} {:>10}", "total", corpus.num_utterances());
}

fn prep(args: &PrepArgs) -> Result<()> {
    let mut corpus = args.input.load()?;
    if args.reconnect {
        corpus = corpus.reconnect(args.orphan_policy.as_ref())?;
    }
    write_jsonl(&args.out, &corpus.conversations)?;
    print_stats(&corpus);
    Ok(())
}

fn gen(args: &GenArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let corpus = generate_synthetic(&cfg)?;
    match &args.split {
        None => write_jsonl(&args.out, &corpus.conversations)?,
        Some(sizes) => {
            if sizes.len() > 3 {
                return Err(Error::Config("--split takes at most three counts".into()));
            }
            for (part, name) in corpus.partition(sizes)?.iter().zip(["train", "valid", "test"]) {
                write_jsonl(&args.out.join(format!("{name}.jsonl")), &part.conversations)?;
            }
        }
    }
    eprintln!("generated {} conversations ({} utterances)", corpus.len(), corpus.num_utterances());
    Ok(())
}

/// Gives `corpus` the training label set, rejecting unseen labels.
fn relabel(corpus: Corpus, labels: &LabelSet, split: Split) -> Result<Corpus> {
    let mut c = Corpus::with_label_set(corpus.conversations, labels.clone(), split)?;
    c.split = split;
    Ok(c)
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = args.resolve_config()?;
    let mut train_corpus = load_input(&args.train, args.format, None)?;
    train_corpus.split = Split::Train;
    let labels = train_corpus.label_set.clone();
    let valid = relabel(load_input(&args.valid, args.format, None)?, &labels, Split::Valid)?;
    let test = args
        .test
        .as_ref()
        .map(|p| relabel(load_input(p, args.format, None)?, &labels, Split::Test))
        .transpose()?;

    if args.runs > 1 {
        let test = test.ok_or_else(|| Error::Config("--runs > 1 needs --test".into()))?;
        let options = MultiSeedOptions {
            n_runs: args.runs,
            jobs: args.jobs,
            out_dir: Some(&args.out),
        };
        let (report, _) = run_multi_seed(&train_corpus, &valid, &test, &cfg, &options)?;
        for r in &report.runs {
            println!("seed {} best_epoch {} valid {:.4} test {:.4}", r.seed, r.best_epoch, r.valid_accuracy, r.test_accuracy);
        }
        println!("test accuracy {:.4} +- {:.4}", report.mean_test_accuracy, report.sd_test_accuracy);
        let mut json = serde_json::to_vec_pretty(&report).expect("report serialises");
        json.push(b'\n');
        return write_file(&args.out.join("summary.json"), &json);
    }

    let outcome = train_with_progress(&train_corpus, &valid, &cfg, |e| {
        eprintln!(
            "epoch {} train_nll {:.4} valid_accuracy {:.4} elapsed {:.1}s",
            e.epoch, e.train_nll, e.valid_accuracy, e.elapsed_seconds
        );
    })?;
    outcome.model.save(&args.out)?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    write_log_csv(&log_path, &outcome.log)?;
    println!("best epoch {} valid accuracy {:.4}", outcome.best_epoch, outcome.best_valid_accuracy);
    if let Some(test) = test {
        let gold = test.conversations.iter().map(|c| labels.encode(c)).collect::<Result<Vec<_>>>()?;
        let pred = test
            .conversations
            .iter()
            .map(|c| outcome.model.decode(c, cfg.decoder))
            .collect::<Result<Vec<_>>>()?;
        println!("test accuracy {:.4}", accuracy(&gold, &pred)?);
    }
    Ok(())
}

fn write_predictions(path: &Path, corpus: &Corpus, labels: &LabelSet, preds: &[Vec<usize>]) -> Result<()> {
    let mut out = Vec::new();
    for (conv, pred) in corpus.conversations.iter().zip(preds) {
        let names: Vec<String> = pred.iter().map(|&i| labels.label(i).expect("decoded index in range").to_string()).collect();
        serde_json::to_writer(&mut out, &conversation_record(conv, Some(&names))).expect("records serialise");
        out.push(b'\n');
    }
    write_file(path, &out)
}

fn decode_cmd(args: &DecodeArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let corpus = args.input.load()?;
    let preds = corpus
        .conversations
        .iter()
        .map(|c| model.decode(c, args.decoder))
        .collect::<Result<Vec<_>>>()?;
    write_predictions(&args.out, &corpus, &model.labels, &preds)
}

fn ensemble_cmd(args: &EnsembleArgs) -> Result<()> {
    let a = Model::load(&args.models[0])?;
    let b = Model::load(&args.models[1])?;
    let corpus = args.input.load()?;
    let preds = corpus
        .conversations
        .iter()
        .map(|c| Ok(decode_lattice(&ensemble_lattice(&a, &b, c)?, args.decoder)))
        .collect::<Result<Vec<_>>>()?;
    write_predictions(&args.out, &corpus, &a.labels, &preds)
}

fn confusion_csv(c: &ConfusionMatrix, values: impl Fn(usize, usize) -> String) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["gold\\predicted".to_string()];
    header.extend(c.labels.iter().cloned());
    w.write_record(&header).expect("in-memory csv");
    for (i, label) in c.labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend((0..c.labels.len()).map(|j| values(i, j)));
        w.write_record(&rec).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&args.pred).map_err(|e| Error::io(&args.pred, e))?;
    let name = args.pred.display().to_string();
    let records = parse_jsonl_records(&name, &text)?;
    let mut pairs: Vec<Vec<(String, String)>> = Vec::new();
    for (line, rec) in records {
        let conv = rec
            .utterances
            .into_iter()
            .map(|u| {
                u.predicted.map(|p| (u.label, p)).ok_or_else(|| Error::Format {
                    path: name.clone(),
                    line,
                    message: "utterance lacks a \"predicted\" field".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        pairs.push(conv);
    }
    let labels = match &args.model {
        Some(p) => Model::load(p)?.labels,
        None => LabelSet::from_observed(pairs.iter().flatten().flat_map(|(g, p)| [g.as_str(), p.as_str()])),
    };
    let index = |l: &str| labels.index_of(l).ok_or_else(|| Error::Validation(format!("unknown label {l:?}")));
    let mut gold = Vec::with_capacity(pairs.len());
    let mut pred = Vec::with_capacity(pairs.len());
    for conv in &pairs {
        gold.push(conv.iter().map(|(g, _)| index(g)).collect::<Result<Vec<_>>>()?);
        pred.push(conv.iter().map(|(_, p)| index(p)).collect::<Result<Vec<_>>>()?);
    }
    let acc = accuracy(&gold, &pred)?;
    let cm = confusion(&gold, &pred, &labels)?;
    let metrics = precision_recall_f1(&cm);
    println!("accuracy {acc}");
    println!("{:<16} {:>9} {:>9} {:>9} {:>8}", "label", "precision", "recall", "f1", "support");
    for m in &metrics {
        println!("{:<16} {:>9.4} {:>9.4} {:>9.4} {:>8}", m.label, m.precision, m.recall, m.f1, m.support);
    }
    if let Some(dir) = &args.out {
        let mut w = csv::Writer::from_writer(Vec::new());
        for m in &metrics {
            w.serialize(m).expect("in-memory csv");
        }
        write_file(&dir.join("metrics.csv"), &w.into_inner().expect("in-memory csv"))?;
        write_file(&dir.join("confusion.csv"), confusion_csv(&cm, |i, j| cm.counts[[i, j]].to_string()).as_bytes())?;
        let norm = cm.normalized();
        write_file(
            &dir.join("confusion_normalized.csv"),
            confusion_csv(&cm, |i, j| norm.values[[i, j]].to_string()).as_bytes(),
        )?;
        write_file(&dir.join("accuracy.txt"), format!("{acc}\n").as_bytes())?;
    }
    Ok(())
}

fn viz_cmd(args: &VizArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let written = export_transition_heatmap(
        &model.transitions,
        &model.labels,
        args.labels.as_deref(),
        args.normalization,
        &args.out,
    )?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prep(a) => prep(a),
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ensemble(a) => ensemble_cmd(a),
        Command::Viz(a) => viz_cmd(a),
        Command::Stats(a) => {
            print_stats(&a.input.load()?);
            Ok(())
        }
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orphan_policy_parsing() {
        assert_eq!(parse_orphan_policy("drop").unwrap(), OrphanPolicy::Drop);
        assert_eq!(parse_orphan_policy("relabel:%").unwrap(), OrphanPolicy::Relabel("%".into()));
        assert!(parse_orphan_policy("relabel:").is_err());
    }

    #[test]
    fn flags_override_config_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("c.json");
        fs::write(&cfg_path, r#"{"patience": 3, "dropout": 0.1, "encoder": {"window": 1}}"#).unwrap();
        let cli = Cli::try_parse_from([
            "dacrf", "train", "--train", "t", "--valid", "v", "--out", "o", "--config",
            cfg_path.to_str().unwrap(), "--dropout", "0.3", "--variant", "joint",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else { panic!() };
        let cfg = args.resolve_config().unwrap();
        assert_eq!(cfg.dropout, 0.3);
        assert_eq!(cfg.patience, 3);
        assert_eq!(cfg.encoder.window, 1);
        assert_eq!(cfg.variant, Variant::Joint);
        assert_eq!(cfg.max_epochs, 100);
    }

    #[test]
    fn bad_override_is_a_config_error() {
        let cli = Cli::try_parse_from(["dacrf", "train", "--train", "t", "--valid", "v", "--out", "o", "--dropout", "1.5"]).unwrap();
        let Command::Train(args) = cli.command else { panic!() };
        assert_eq!(args.resolve_config().unwrap_err().exit_code(), 3);
    }
}
