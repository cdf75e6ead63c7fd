//! Maximum-likelihood training: Adam, dropout, early stopping on validation
//! accuracy and multi-seed runs.

mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::crf::Variant;
use crate::encoder::FeatureMode;
use crate::eval::{accuracy, mean_and_sd};
use crate::model::{Decoder, EncoderConfig, Model, ModelGradients, Prepared};
use crate::{Error, Result};

pub use optim::{adam_step, apply_dropout, AdamConfig, AdamState, Dropout};

const INIT_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    /// Conversations per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub feature_mode: FeatureMode,
    /// Decoder used for validation accuracy.
    pub decoder: Decoder,
    /// Transition matrices held at their initial value of zero, by name
    /// (`g`, `g0`, `g1`, `g_basis`).
    pub freeze_transitions: Vec<String>,
    /// Reshuffle the training conversations every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            max_epochs: 100,
            patience: 5,
            dropout: 0.2,
            batch_size: 1,
            seed: 0,
            variant: Variant::SpeakerAware,
            encoder: EncoderConfig::default(),
            feature_mode: FeatureMode::None,
            decoder: Decoder::Viterbi,
            freeze_transitions: Vec::new(),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    /// The softmax baseline: a vanilla model whose transitions stay at zero,
    /// decoded per utterance.
    pub fn softmax_baseline(mut self) -> Self {
        self.variant = Variant::Vanilla;
        self.freeze_transitions = vec!["g".into()];
        self.decoder = Decoder::Softmax;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return fail("patience, batch_size and max_epochs must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("bad learning rate {}", self.learning_rate));
        }
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !betas_ok || self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return fail("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        let names = self.variant.matrix_names();
        if let Some(bad) = self.freeze_transitions.iter().find(|n| !names.contains(&n.as_str())) {
            return fail(format!("{:?} has no transition matrix {bad:?}", self.variant));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-conversation NLL over the epoch's training steps.
    pub train_nll: f64,
    pub valid_accuracy: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row).expect("log rows serialise");
    }
    let bytes = w.into_inner().expect("in-memory writer");
    crate::corpus::io::write_file(path, &bytes)
}

fn prepare_all(model: &Model, corpus: &Corpus) -> Result<Vec<(Prepared, Vec<usize>)>> {
    corpus
        .conversations
        .iter()
        .map(|c| Ok((model.prepare(c)?, model.labels.encode(c)?)))
        .collect()
}

pub fn evaluate_accuracy(model: &Model, data: &[(Prepared, Vec<usize>)], decoder: Decoder) -> Result<f64> {
    let pred = data
        .iter()
        .map(|(p, _)| model.decode_prepared(p, decoder))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<Vec<usize>> = data.iter().map(|(_, g)| g.clone()).collect();
    accuracy(&gold, &pred)
}

pub fn train(train: &Corpus, valid: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(train, valid, config, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch.
pub fn train_with_progress(
    train: &Corpus,
    valid: &Corpus,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Config("validation corpus is empty".into()));
    }
    if train.label_set != valid.label_set {
        return Err(Error::Config("training and validation corpora use different label sets".into()));
    }

    let mut init_rng = stream(config.seed, INIT_STREAM);
    let mut model = Model::init(
        train.label_set.clone(),
        train,
        &config.encoder,
        config.feature_mode,
        config.variant,
        &mut init_rng,
    )?;
    let mut dropout = Dropout::from_rng(config.dropout, stream(config.seed, DROPOUT_STREAM));
    let mut shuffle_rng = stream(config.seed, SHUFFLE_STREAM);

    let train_data = prepare_all(&model, train)?;
    let valid_data = prepare_all(&model, valid)?;
    let adam = config.adam();
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    for epoch in 1..=config.max_epochs {
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut nll_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut total = ModelGradients::zeros_like(&model);
            for &i in batch {
                let (prepared, gold) = &train_data[i];
                let (nll, grads) = model.loss_and_gradients(prepared, gold, Some(&mut dropout))?;
                nll_sum += nll;
                total.add_assign(&grads);
            }
            for name in &config.freeze_transitions {
                if let Some(g) = total.transition_matrix_mut(name) {
                    g.fill(0.0);
                }
            }
            let grads = total.slices();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|(_, g)| *g).collect();
            let mut params = model.parameters_mut();
            let mut param_refs: Vec<&mut [f64]> = params.iter_mut().map(|(_, p)| &mut **p).collect();
            adam_step(&mut param_refs, &grad_refs, &mut state, &adam)?;
            model.encoder.touch();
        }

        let valid_accuracy = evaluate_accuracy(&model, &valid_data, config.decoder)?;
        let entry = EpochLog {
            epoch,
            train_nll: nll_sum / train_data.len() as f64,
            valid_accuracy,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);

        // Strict improvement only, so ties keep the earlier epoch.
        match &best {
            Some((_, acc, _)) if valid_accuracy <= *acc => {}
            _ => best = Some((epoch, valid_accuracy, model.clone())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= config.patience {
            break;
        }
    }
    let (best_epoch, best_valid_accuracy, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_valid_accuracy,
    })
}

/// Trains the joint model, whose transitions are a shared basis plus a
/// speaker-change-selected matrix.
pub fn train_joint(train_corpus: &Corpus, valid: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    if config.variant != Variant::Joint {
        return Err(Error::Config(format!("train_joint needs the joint variant, got {:?}", config.variant)));
    }
    train(train_corpus, valid, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub valid_accuracy: f64,
    pub test_accuracy: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub runs: Vec<RunResult>,
    pub mean_test_accuracy: f64,
    /// Sample standard deviation; zero for a single run.
    pub sd_test_accuracy: f64,
}

impl MultiSeedReport {
    pub fn from_runs(runs: Vec<RunResult>) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
        let (mean, sd) = mean_and_sd(&accs);
        Self {
            runs,
            mean_test_accuracy: mean,
            sd_test_accuracy: sd,
        }
    }
}

pub struct MultiSeedOptions<'a> {
    pub n_runs: usize,
    /// Worker threads; `0` uses all cores.
    pub jobs: usize,
    /// Checkpoints and logs go to `<dir>/seed-<seed>.json` and `.csv`.
    pub out_dir: Option<&'a Path>,
}

/// Trains `n_runs` models with seeds `seed, seed+1, ...` in parallel and
/// scores each on `test`. Every run also returns its model, in seed order.
pub fn run_multi_seed(
    train_corpus: &Corpus,
    valid: &Corpus,
    test: &Corpus,
    config: &TrainConfig,
    options: &MultiSeedOptions<'_>,
) -> Result<(MultiSeedReport, Vec<Model>)> {
    if options.n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<(RunResult, Model)>> = pool.install(|| {
        (0..options.n_runs as u64)
            .into_par_iter()
            .map(|i| {
                let mut cfg = config.clone();
                cfg.seed = config.seed + i;
                let outcome = train(train_corpus, valid, &cfg)?;
                let test_data = prepare_all(&outcome.model, test)?;
                let test_accuracy = evaluate_accuracy(&outcome.model, &test_data, cfg.decoder)?;
                let checkpoint = match options.out_dir {
                    Some(dir) => {
                        let path = dir.join(format!("seed-{}.json", cfg.seed));
                        outcome.model.save(&path)?;
                        write_log_csv(&dir.join(format!("seed-{}.csv", cfg.seed)), &outcome.log)?;
                        Some(path)
                    }
                    None => None,
                };
                Ok((
                    RunResult {
                        seed: cfg.seed,
                        best_epoch: outcome.best_epoch,
                        valid_accuracy: outcome.best_valid_accuracy,
                        test_accuracy,
                        checkpoint,
                    },
                    outcome.model,
                ))
            })
            .collect()
    });
    let (runs, models): (Vec<_>, Vec<_>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok((MultiSeedReport::from_runs(runs), models))
}
