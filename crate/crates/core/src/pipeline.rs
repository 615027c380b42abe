//! Train, persist, reload and evaluate a model described by a [`RunConfig`].

use std::path::Path;

use crate::caption::{self, CaptionModel, ToyScene, TrainedClassifier, Vocab};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Task};
use crate::decoding::{Family, Hypothesis, MiddleWordClassifier};
use crate::denoise::{self, DenoiseModel, DenoiseSample};
use crate::experiments::CsvRow;
use crate::params::ParameterStore;
use crate::rng::RngStream;
use crate::Error;

/// Parameter-name prefix of the middle-word classifier inside a checkpoint.
const CLASSIFIER_PREFIX: &str = "clf.";

/// Corpus of either task.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Denoise { train: Vec<DenoiseSample>, test: Vec<DenoiseSample> },
    Caption { train: Vec<ToyScene>, test: Vec<ToyScene> },
}

impl Dataset {
    pub fn generate(config: &RunConfig) -> Self {
        match config.task {
            Task::Denoise => {
                let (train, test) = denoise::generate_denoise_dataset(&config.denoise_config());
                Dataset::Denoise { train, test }
            }
            Task::Caption => {
                let (train, test) = caption::generate_toy_dataset(&config.caption_config());
                Dataset::Caption { train, test }
            }
        }
    }

    /// Writes `train.jsonl` and `test.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (a, b) = (dir.join("train.jsonl"), dir.join("test.jsonl"));
        match self {
            Dataset::Denoise { train, test } => {
                crate::jsonl::write_jsonl(&a, train)?;
                crate::jsonl::write_jsonl(&b, test)
            }
            Dataset::Caption { train, test } => {
                crate::jsonl::write_jsonl(&a, train)?;
                crate::jsonl::write_jsonl(&b, test)
            }
        }
    }

    pub fn read(task: Task, dir: &Path) -> Result<Self, Error> {
        let (a, b) = (dir.join("train.jsonl"), dir.join("test.jsonl"));
        Ok(match task {
            Task::Denoise => Dataset::Denoise { train: crate::jsonl::read_jsonl(&a)?, test: crate::jsonl::read_jsonl(&b)? },
            Task::Caption => Dataset::Caption { train: crate::jsonl::read_jsonl(&a)?, test: crate::jsonl::read_jsonl(&b)? },
        })
    }

    /// Reads from `dir` when given, otherwise generates from the config.
    pub fn load_or_generate(config: &RunConfig, dir: Option<&Path>) -> Result<Self, Error> {
        match dir {
            Some(d) => Self::read(config.task, d),
            None => Ok(Self::generate(config)),
        }
    }
}

/// A trained model of either task together with its parameters.
#[derive(Debug, Clone)]
pub enum Model {
    Denoise { store: ParameterStore, model: DenoiseModel },
    Caption { store: ParameterStore, model: CaptionModel, classifier: Option<TrainedClassifier> },
}

/// Fresh, untrained parameters for `config`.
fn build(config: &RunConfig) -> Result<Model, Error> {
    config.validate()?;
    Ok(match config.task {
        Task::Denoise => {
            let (store, model) = denoise::init_denoise_model(config.regression_variant()?, &config.denoise_config(), config.seed);
            Model::Denoise { store, model }
        }
        Task::Caption => {
            let c = config.caption_config();
            let (store, model) = caption::init_caption_model(config.caption_kind(), &c, config.seed);
            let classifier = (model.kind.family == Family::MiddleOut).then(|| {
                let mut store = ParameterStore::new();
                let classifier = MiddleWordClassifier::new(
                    &mut store,
                    CLASSIFIER_PREFIX.trim_end_matches('.'),
                    c.feature_dim(),
                    c.classifier_hidden,
                    c.verbs.len(),
                    &mut RngStream::new(0),
                );
                TrainedClassifier { store, classifier, epoch_losses: Vec::new() }
            });
            Model::Caption { store, model, classifier }
        }
    })
}

/// Trains the model `config` describes. Middle-out captioners also get
/// their middle-word classifier. Returns the per-step loss curve.
pub fn train(config: &RunConfig, data: &Dataset, mut progress: impl FnMut(usize, f64)) -> Result<(Model, Vec<f64>), Error> {
    config.validate()?;
    let mut losses = Vec::new();
    let model = match (config.task, data) {
        (Task::Denoise, Dataset::Denoise { train, .. }) => {
            let t = denoise::train_denoise(config.regression_variant()?, &config.denoise_config(), train, |s, l| {
                losses.push(l);
                progress(s, l);
            })?;
            Model::Denoise { store: t.store, model: t.model }
        }
        (Task::Caption, Dataset::Caption { train, .. }) => {
            let c = config.caption_config();
            let t = caption::train_caption(config.caption_kind(), &c, train, |_, s, l| {
                losses.push(l);
                progress(s, l);
            })?;
            let classifier = if t.model.kind.family == Family::MiddleOut { Some(caption::train_classifier(&c, train)?) } else { None };
            Model::Caption { store: t.store, model: t.model, classifier }
        }
        _ => return Err(Error::Config(format!("data does not match task {}", config.task.as_str()))),
    };
    Ok((model, losses))
}

impl Model {
    pub fn checkpoint(&self, config: &RunConfig) -> Checkpoint {
        let mut ck = Checkpoint::from_store(self.store(), config.to_json());
        if let Model::Caption { classifier: Some(c), .. } = self {
            ck.entries.extend(Checkpoint::from_store(&c.store, "").entries);
            ck.entries.sort_by(|a, b| a.0.cmp(&b.0));
        }
        ck
    }

    pub fn save(&self, config: &RunConfig, path: &Path) -> Result<(), Error> {
        self.checkpoint(config).save(path)
    }

    /// Rebuilds the model from the checkpoint's own config and restores its values.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Model), Error> {
        let config = RunConfig::from_json(&ck.config)?;
        let mut model = build(&config)?;
        let (clf, main): (Vec<_>, Vec<_>) = ck.entries.iter().cloned().partition(|(n, _)| n.starts_with(CLASSIFIER_PREFIX));
        let main = Checkpoint { entries: main, config: String::new() };
        match &mut model {
            Model::Denoise { store, .. } => main.restore_into(store)?,
            Model::Caption { store, classifier, .. } => {
                main.restore_into(store)?;
                match classifier {
                    Some(c) => Checkpoint { entries: clf, config: String::new() }.restore_into(&mut c.store)?,
                    None if !clf.is_empty() => return Err(Error::Checkpoint("unexpected classifier parameters".into())),
                    None => {}
                }
            }
        }
        Ok((config, model))
    }

    pub fn load(path: &Path) -> Result<(RunConfig, Model), Error> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn store(&self) -> &ParameterStore {
        match self {
            Model::Denoise { store, .. } | Model::Caption { store, .. } => store,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Model::Denoise { model, .. } => model.family().as_str().to_string(),
            Model::Caption { model, .. } => model.kind.name(),
        }
    }

    /// Test-set metrics as CSV rows under experiment `eval`.
    pub fn evaluate(&self, config: &RunConfig, data: &Dataset) -> Result<Vec<CsvRow>, Error> {
        let name = self.name();
        let row = |metric: &str, value: f64| CsvRow::new("eval", &name, metric, value, config.seed);
        match (self, data) {
            (Model::Denoise { store, model }, Dataset::Denoise { test, .. }) => {
                let m = denoise::eval_denoise(model, store, test);
                Ok(vec![row("mse", m.mse), row("symmetric_mse", m.symmetric_mse)])
            }
            (Model::Caption { store, model, classifier }, Dataset::Caption { test, .. }) => {
                let c = config.caption_config();
                let vocab = Vocab::new(&c);
                let oracle = caption::oracle_words(test, &vocab);
                let mut rows = Vec::new();
                match (model.kind.family, model.kind.oracle_word) {
                    (Family::Baseline, false) => {
                        let s = caption::eval_caption(model, store, test, &vocab, &vec![Vec::new(); test.len()], c.beam_size)?;
                        rows.extend([row("bleu4", s.bleu4), row("rouge_l", s.rouge_l)]);
                    }
                    (Family::Baseline, true) => {
                        let s = caption::eval_caption(model, store, test, &vocab, &oracle, c.beam_size)?;
                        rows.extend([row("bleu4_oracle", s.bleu4), row("rouge_l_oracle", s.rouge_l)]);
                    }
                    (Family::MiddleOut, _) => {
                        let clf = classifier.as_ref().expect("middle-out captioners carry a classifier");
                        let predicted: Vec<Vec<usize>> = clf.predict(test).into_iter().map(|v| vec![vocab.verb_token(v)]).collect();
                        let s = caption::eval_caption(model, store, test, &vocab, &predicted, c.beam_size)?;
                        let o = caption::eval_caption(model, store, test, &vocab, &oracle, c.beam_size)?;
                        rows.extend([
                            row("classifier_accuracy", clf.accuracy(test)),
                            row("bleu4", s.bleu4),
                            row("rouge_l", s.rouge_l),
                            row("bleu4_oracle", o.bleu4),
                            row("rouge_l_oracle", o.rouge_l),
                        ]);
                    }
                }
                Ok(rows)
            }
            _ => Err(Error::Config(format!("data does not match task {}", config.task.as_str()))),
        }
    }

    /// Captions for `features`. Middle-out models use `middle_word` or, when
    /// absent, the classifier's top `beam` verbs as seeds; the oracle baseline
    /// requires `middle_word`; the plain baseline ignores it.
    pub fn caption(&self, config: &RunConfig, features: &[Vec<f64>], middle_word: Option<usize>, beam: usize) -> Result<Vec<Hypothesis>, Error> {
        let Model::Caption { store, model, classifier } = self else {
            return Err(Error::Config("captions need a caption model".into()));
        };
        let vocab = Vocab::new(&config.caption_config());
        let seeds: Vec<usize> = match (model.kind.family, model.kind.oracle_word, middle_word) {
            (Family::Baseline, false, _) => Vec::new(),
            (Family::Baseline, true, Some(w)) | (Family::MiddleOut, _, Some(w)) => vec![w],
            (Family::Baseline, true, None) => return Err(Error::Config("the oracle baseline needs --middle-word".into())),
            (Family::MiddleOut, _, None) => {
                let clf = classifier.as_ref().expect("middle-out captioners carry a classifier");
                let p = clf.probabilities(&[features]).remove(0);
                crate::decoding::top_k(&p, beam).into_iter().map(|v| vocab.verb_token(v)).collect()
            }
        };
        Ok(model.generate(store, features, &seeds, beam))
    }

    /// Free-running de-noised sequences.
    pub fn denoise(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, Error> {
        let Model::Denoise { store, model } = self else {
            return Err(Error::Config("de-noising needs a de-noising model".into()));
        };
        Ok(inputs
            .iter()
            .map(|x| {
                let mut tape = crate::tape::Tape::inference(store);
                model.predict(&mut tape, &[x.as_slice()]).remove(0)
            })
            .collect())
    }
}
