//! Toy video captioning: synthetic scenes with templated references, caption
//! models trained with scheduled sampling, and the oracle, diversity and
//! control evaluations.
//!
//! A scene is an (actor, verb, object) triple. Every frame carries the
//! concatenated one-hot codes of the triple plus Gaussian noise, and a
//! per-scene offset shared by all frames. References are drawn from a fixed
//! set of templates, each containing the scene's verb exactly once.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::batching::BucketSampler;
use crate::decoding::{
    beam_search, split_at_middle, top_k, DecodeOptions, Family, Hypothesis, MiddleWordClassifier, MiddleWordSource, Scheduled,
    Seq2Seq, Seq2SeqConfig, SelfAttnVariant,
};
use crate::decoding::simulate::{accuracy, simulate_classifier_accuracy};
use crate::metrics;
use crate::params::{AdamState, ParameterStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Error;

pub const STOP: usize = 0;
pub const START: usize = 1;
const RESERVED: [&str; 2] = ["<stop>", "<start>"];
const FUNCTION_WORDS: [&str; 3] = ["a", "the", "is"];

/// Caption templates; `A`, `V` and `O` are replaced by the scene's words.
pub const TEMPLATES: [&str; 5] = ["a A is V a O", "the A is V the O", "a A is V the O", "the A is V a O", "a A V a O"];

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCaptionConfig {
    pub actors: Vec<String>,
    /// Gerunds; these are the middle words.
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    pub frames: usize,
    /// Per-frame Gaussian noise.
    pub feature_noise: f64,
    /// Gaussian offset drawn once per scene and added to every frame.
    pub scene_noise: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub min_refs: usize,
    pub max_refs: usize,
    pub lstm_size: usize,
    pub embed_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beam_size: usize,
    pub max_len_per_side: usize,
    pub classifier_hidden: usize,
    pub classifier_lr: f64,
    pub classifier_epochs: usize,
    pub seed: u64,
}

impl Default for ToyCaptionConfig {
    fn default() -> Self {
        Self {
            actors: words(&["man", "woman", "boy", "girl", "chef", "player", "dog", "cat"]),
            verbs: words(&[
                "playing", "performing", "riding", "cutting", "cooking", "slicing", "throwing", "eating", "reading", "washing",
                "driving", "painting",
            ]),
            objects: words(&["piano", "guitar", "ball", "bike", "horse", "onion", "apple", "book", "car", "dish"]),
            frames: 8,
            feature_noise: 0.3,
            scene_noise: 0.25,
            train_count: 2000,
            test_count: 200,
            min_refs: 2,
            max_refs: 4,
            lstm_size: 128,
            embed_size: 64,
            lr: 1e-4,
            epochs: 15,
            batch_size: 32,
            beam_size: 8,
            max_len_per_side: 12,
            classifier_hidden: 64,
            classifier_lr: 1e-3,
            classifier_epochs: 10,
            seed: 0,
        }
    }
}

impl ToyCaptionConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.actors.is_empty() || self.verbs.len() < 2 || self.objects.is_empty() {
            return bad("caption inventories need at least one actor, two verbs and one object".into());
        }
        let mut seen = BTreeSet::new();
        let all = RESERVED.iter().chain(&FUNCTION_WORDS).map(|s| s.to_string());
        for w in all.chain(self.actors.iter().cloned()).chain(self.verbs.iter().cloned()).chain(self.objects.iter().cloned()) {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return bad(format!("caption word {w:?} must be a single nonempty token"));
            }
            if !seen.insert(w.clone()) {
                return bad(format!("caption word {w:?} appears twice in the vocabulary"));
            }
        }
        if self.min_refs < 1 || self.min_refs > self.max_refs || self.max_refs > TEMPLATES.len() {
            return bad(format!("references per scene must satisfy 1 <= min_refs <= max_refs <= {}", TEMPLATES.len()));
        }
        if self.frames == 0 || self.lstm_size == 0 || self.embed_size == 0 || self.classifier_hidden == 0 {
            return bad("caption frames and layer sizes must be positive".into());
        }
        if self.batch_size == 0 || self.beam_size == 0 || self.max_len_per_side == 0 {
            return bad("caption batch size, beam size and length limit must be positive".into());
        }
        if !(self.feature_noise >= 0.0 && self.scene_noise >= 0.0) {
            return bad("caption noise levels must be nonnegative".into());
        }
        if !(self.lr > 0.0 && self.classifier_lr > 0.0) {
            return bad("caption learning rates must be positive".into());
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.actors.len() + self.verbs.len() + self.objects.len()
    }
}

/// `min(0.05 * epoch, 0.25)`, epochs counted from 0.
pub fn scheduled_sampling_rate(epoch: usize) -> f64 {
    (0.05 * epoch as f64).min(0.25)
}

/// Token vocabulary: STOP, START, function words, actors, verbs, objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    actor_base: usize,
    verb_base: usize,
    object_base: usize,
    verbs: usize,
}

impl Vocab {
    pub fn new(config: &ToyCaptionConfig) -> Self {
        let mut words: Vec<String> = RESERVED.iter().chain(&FUNCTION_WORDS).map(|s| s.to_string()).collect();
        let actor_base = words.len();
        words.extend(config.actors.iter().cloned());
        let verb_base = words.len();
        words.extend(config.verbs.iter().cloned());
        let object_base = words.len();
        words.extend(config.objects.iter().cloned());
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index, actor_base, verb_base, object_base, verbs: config.verbs.len() }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn actor_token(&self, actor: usize) -> usize {
        self.actor_base + actor
    }

    pub fn verb_token(&self, verb: usize) -> usize {
        assert!(verb < self.verbs, "contract violation: verb index {verb} outside {} verbs", self.verbs);
        self.verb_base + verb
    }

    pub fn object_token(&self, object: usize) -> usize {
        self.object_base + object
    }

    /// Verb index of a token, if it is a verb.
    pub fn verb_index(&self, token: usize) -> Option<usize> {
        (self.verb_base..self.verb_base + self.verbs).contains(&token).then(|| token - self.verb_base)
    }

    pub fn verb_count(&self) -> usize {
        self.verbs
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>, Error> {
        tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| Error::Format(format!("word {t:?} is not in the caption vocabulary"))))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.words[i].clone()).collect()
    }

    pub fn render(&self, ids: &[usize]) -> String {
        self.decode(ids).join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub actor: usize,
    pub verb: usize,
    pub object: usize,
    /// `T x F` frame features.
    pub features: Vec<Vec<f64>>,
    pub refs: Vec<Vec<String>>,
}

/// Objects that co-occur with `verb`.
pub fn compatible_objects(config: &ToyCaptionConfig, verb: usize) -> Vec<usize> {
    let n = config.objects.len();
    let set: BTreeSet<usize> = (0..3).map(|k| (3 * verb + k) % n).collect();
    set.into_iter().collect()
}

/// Actors that co-occur with `verb`.
pub fn compatible_actors(config: &ToyCaptionConfig, verb: usize) -> Vec<usize> {
    let n = config.actors.len();
    let set: BTreeSet<usize> = (0..4).map(|k| (3 * verb + k) % n).collect();
    set.into_iter().collect()
}

/// Fills `template` with the scene's words and splits on whitespace.
pub fn render_template(config: &ToyCaptionConfig, template: &str, actor: usize, verb: usize, object: usize) -> Vec<String> {
    template
        .split_whitespace()
        .map(|slot| match slot {
            "A" => config.actors[actor].clone(),
            "V" => config.verbs[verb].clone(),
            "O" => config.objects[object].clone(),
            w => w.to_string(),
        })
        .collect()
}

/// One-hot codes of the triple with per-scene and per-frame noise.
pub fn scene_features(config: &ToyCaptionConfig, actor: usize, verb: usize, object: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let (na, nv) = (config.actors.len(), config.verbs.len());
    let mut code = vec![0.0; config.feature_dim()];
    code[actor] = 1.0;
    code[na + verb] = 1.0;
    code[na + nv + object] = 1.0;
    let offset: Vec<f64> = code.iter().map(|_| config.scene_noise * rng.gaussian()).collect();
    (0..config.frames)
        .map(|_| code.iter().zip(&offset).map(|(c, o)| c + o + config.feature_noise * rng.gaussian()).collect())
        .collect()
}

pub fn generate_scene(config: &ToyCaptionConfig, rng: &mut RngStream) -> ToyScene {
    let verb = rng.below(config.verbs.len() as u64) as usize;
    let actors = compatible_actors(config, verb);
    let objects = compatible_objects(config, verb);
    let actor = actors[rng.below(actors.len() as u64) as usize];
    let object = objects[rng.below(objects.len() as u64) as usize];
    let features = scene_features(config, actor, verb, object, rng);
    let count = rng.int_inclusive(config.min_refs as i64, config.max_refs as i64) as usize;
    let mut order: Vec<usize> = (0..TEMPLATES.len()).collect();
    rng.shuffle(&mut order);
    let refs = order[..count].iter().map(|&t| render_template(config, TEMPLATES[t], actor, verb, object)).collect();
    ToyScene { actor, verb, object, features, refs }
}

/// `(train, test)` scenes, deterministic in `config.seed`.
pub fn generate_toy_dataset(config: &ToyCaptionConfig) -> (Vec<ToyScene>, Vec<ToyScene>) {
    let mut root = RngStream::new(config.seed);
    let mut train_rng = root.fork(1);
    let mut test_rng = root.fork(2);
    let train = (0..config.train_count).map(|_| generate_scene(config, &mut train_rng)).collect();
    let test = (0..config.test_count).map(|_| generate_scene(config, &mut test_rng)).collect();
    (train, test)
}

/// Frames of `a` followed by frames of `b`, with no boundary marker.
pub fn concat_features(a: &ToyScene, b: &ToyScene) -> Vec<Vec<f64>> {
    a.features.iter().chain(&b.features).cloned().collect()
}

/// `T` frame inputs, each `B x F`.
fn frame_inputs(tape: &mut Tape<'_>, batch: &[&[Vec<f64>]]) -> Vec<Var> {
    let t = batch[0].len();
    assert!(batch.iter().all(|f| f.len() == t), "contract violation: batch mixes frame counts");
    let f = batch[0][0].len();
    (0..t)
        .map(|k| {
            let data: Vec<f64> = batch.iter().flat_map(|frames| frames[k].iter().copied()).collect();
            tape.constant(Tensor::matrix(batch.len(), f, data))
        })
        .collect()
}

/// Which caption model to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionModelKind {
    pub family: Family,
    pub variant: SelfAttnVariant,
    /// Baseline with the middle-word embedding on every step input.
    pub oracle_word: bool,
}

impl CaptionModelKind {
    pub const BASELINE: Self = Self { family: Family::Baseline, variant: SelfAttnVariant::None, oracle_word: false };
    pub const MIDDLE_OUT: Self = Self { family: Family::MiddleOut, variant: SelfAttnVariant::Dual, oracle_word: false };
    pub const ORACLE_BASELINE: Self = Self { family: Family::Baseline, variant: SelfAttnVariant::None, oracle_word: true };

    pub fn name(&self) -> String {
        let base = match (self.family, self.oracle_word) {
            (Family::MiddleOut, _) => "middleout",
            (Family::Baseline, true) => "oracle_baseline",
            (Family::Baseline, false) => "baseline",
        };
        match (self.family, self.variant) {
            (Family::Baseline, SelfAttnVariant::None) | (Family::MiddleOut, SelfAttnVariant::Dual) => base.to_string(),
            (_, v) => format!("{base}_{}", v.as_str()),
        }
    }

    /// Whether generation takes middle words (as seeds or oracle input).
    pub fn takes_middle_word(&self) -> bool {
        self.family == Family::MiddleOut || self.oracle_word
    }
}

/// One training example: a scene and one of its references.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionPair {
    pub scene: usize,
    pub tokens: Vec<usize>,
    pub middle: usize,
}

/// Every (scene, reference) pair; the middle word is the scene's verb.
pub fn caption_pairs(scenes: &[ToyScene], vocab: &Vocab) -> Result<Vec<CaptionPair>, Error> {
    let mut out = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let middle = vocab.verb_token(s.verb);
        for r in &s.refs {
            let tokens = vocab.encode(r)?;
            if !tokens.contains(&middle) {
                return Err(Error::Format(format!("scene {i}: reference {:?} lacks the scene verb", r.join(" "))));
            }
            out.push(CaptionPair { scene: i, tokens, middle });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub kind: CaptionModelKind,
    pub seq: Seq2Seq,
    pub max_len_per_side: usize,
}

impl CaptionModel {
    pub fn new(kind: CaptionModelKind, config: &ToyCaptionConfig, store: &mut ParameterStore, rng: &mut RngStream) -> Self {
        let vocab = Vocab::new(config);
        let seq = Seq2Seq::new(
            Seq2SeqConfig {
                family: kind.family,
                variant: kind.variant,
                input_dim: config.feature_dim(),
                enc_hidden: config.lstm_size,
                dec_hidden: config.lstm_size,
                vocab_size: Some(vocab.len()),
                embed_dim: config.embed_size,
                oracle_word: kind.oracle_word,
                left_first: true,
            },
            store,
            rng,
        );
        Self { kind, seq, max_len_per_side: config.max_len_per_side }
    }

    /// Shape key under which pairs can share a batch.
    fn bucket_key(&self, pair: &CaptionPair) -> (usize, usize) {
        match self.kind.family {
            Family::Baseline => (pair.tokens.len(), 0),
            Family::MiddleOut => {
                let pos = pair.tokens.iter().position(|&t| t == pair.middle).unwrap();
                (pos, pair.tokens.len() - pos)
            }
        }
    }

    /// Mean per-token cross-entropy of a same-shape batch.
    pub fn loss(&self, tape: &mut Tape<'_>, scenes: &[ToyScene], batch: &[&CaptionPair], scheduled: Option<Scheduled<'_>>) -> Var {
        let key = self.bucket_key(batch[0]);
        assert!(batch.iter().all(|p| self.bucket_key(p) == key), "contract violation: caption batch mixes shapes");
        let feats: Vec<&[Vec<f64>]> = batch.iter().map(|p| scenes[p.scene].features.as_slice()).collect();
        let frames = frame_inputs(tape, &feats);
        let enc = self.seq.encode(tape, &frames);
        let middles: Vec<usize> = batch.iter().map(|p| p.middle).collect();
        match self.kind.family {
            Family::Baseline => {
                let len = batch[0].tokens.len();
                let targets: Vec<Vec<usize>> = (0..=len)
                    .map(|t| batch.iter().map(|p| if t < len { p.tokens[t] } else { STOP }).collect())
                    .collect();
                let start = vec![START; batch.len()];
                let oracle = self.kind.oracle_word.then_some(middles.as_slice());
                self.seq.baseline_loss(tape, &enc, &start, oracle, &targets, scheduled)
            }
            Family::MiddleOut => {
                let splits: Vec<(Vec<usize>, Vec<usize>)> =
                    batch.iter().map(|p| split_at_middle(&p.tokens, p.middle, STOP).unwrap()).collect();
                let column = |t: usize, left: bool| -> Vec<usize> {
                    splits.iter().map(|(l, r)| if left { l[t] } else { r[t] }).collect()
                };
                let left: Vec<Vec<usize>> = (0..splits[0].0.len()).map(|t| column(t, true)).collect();
                let right: Vec<Vec<usize>> = (0..splits[0].1.len()).map(|t| column(t, false)).collect();
                self.seq.middle_out_loss(tape, &enc, &middles, &left, &right, scheduled)
            }
        }
    }

    fn options(&self, oracle_word: Option<usize>) -> DecodeOptions {
        DecodeOptions { start: START, stop: STOP, max_len_per_side: self.max_len_per_side, oracle_word, left_first: true }
    }

    /// Beam search over one input, best first.
    ///
    /// Plain baselines take no middle words, oracle baselines exactly one
    /// (fed on every step), middle-out models one or more seeds.
    pub fn generate(&self, store: &ParameterStore, features: &[Vec<f64>], middle_words: &[usize], beam: usize) -> Vec<Hypothesis> {
        let mut tape = Tape::inference(store);
        let frames = frame_inputs(&mut tape, &[features]);
        let enc = self.seq.encode(&mut tape, &frames);
        match (self.kind.family, self.kind.oracle_word) {
            (Family::Baseline, false) => {
                assert!(middle_words.is_empty(), "contract violation: the plain baseline takes no middle word");
                beam_search(&self.seq, &mut tape, &enc, &[START], beam, &self.options(None))
            }
            (Family::Baseline, true) => {
                assert_eq!(middle_words.len(), 1, "contract violation: the oracle baseline takes exactly one middle word");
                beam_search(&self.seq, &mut tape, &enc, &[START], beam, &self.options(Some(middle_words[0])))
            }
            (Family::MiddleOut, _) => beam_search(&self.seq, &mut tape, &enc, middle_words, beam, &self.options(None)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedCaptioner {
    pub store: ParameterStore,
    pub model: CaptionModel,
    /// Mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn init_caption_model(kind: CaptionModelKind, config: &ToyCaptionConfig, seed: u64) -> (ParameterStore, CaptionModel) {
    let mut store = ParameterStore::new();
    let mut rng = RngStream::new(seed).fork(20);
    let model = CaptionModel::new(kind, config, &mut store, &mut rng);
    (store, model)
}

/// Adam over shuffled same-shape batches of every (scene, reference) pair
/// for `config.epochs` epochs, with scheduled sampling at
/// [`scheduled_sampling_rate`] of the epoch.
///
/// `progress` is called after every step with `(epoch, step, loss)`.
pub fn train_caption(
    kind: CaptionModelKind,
    config: &ToyCaptionConfig,
    train: &[ToyScene],
    mut progress: impl FnMut(usize, usize, f64),
) -> Result<TrainedCaptioner, Error> {
    config.validate()?;
    let vocab = Vocab::new(config);
    let pairs = caption_pairs(train, &vocab)?;
    if pairs.is_empty() {
        return Err(Error::Config("empty caption training set".into()));
    }
    let (mut store, model) = init_caption_model(kind, config, config.seed);
    let sampler = BucketSampler::new(pairs.iter().map(|p| model.bucket_key(p)));
    let mut batch_rng = RngStream::new(config.seed).fork(21);
    let mut sample_rng = RngStream::new(config.seed).fork(22);
    let mut adam = AdamState::new(config.lr);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let rate = scheduled_sampling_rate(epoch);
        let mut sum = 0.0;
        let batches = sampler.epoch(config.batch_size, &mut batch_rng);
        for idx in &batches {
            step += 1;
            let batch: Vec<&CaptionPair> = idx.iter().map(|&i| &pairs[i]).collect();
            let (loss, grads) = {
                let mut tape = Tape::new(&store);
                let scheduled = (rate > 0.0).then_some(Scheduled { rate, rng: &mut sample_rng });
                let loss = model.loss(&mut tape, train, &batch, scheduled);
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { step, loss: value });
                }
                (value, tape.backward(loss).into_params())
            };
            store.accumulate_grads(&grads);
            adam.step(&mut store);
            sum += loss;
            progress(epoch, step, loss);
        }
        epoch_losses.push(sum / batches.len() as f64);
    }
    Ok(TrainedCaptioner { store, model, epoch_losses })
}

/// Middle-word classifier over scene verbs.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub store: ParameterStore,
    pub classifier: MiddleWordClassifier,
    pub epoch_losses: Vec<f64>,
}

impl TrainedClassifier {
    /// Verb probabilities for each feature sequence.
    pub fn probabilities(&self, features: &[&[Vec<f64>]]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(64) {
            let mut tape = Tape::inference(&self.store);
            let frames = frame_inputs(&mut tape, chunk);
            out.extend(self.classifier.probabilities(&mut tape, &frames));
        }
        out
    }

    /// Most likely verb of each scene.
    pub fn predict(&self, scenes: &[ToyScene]) -> Vec<usize> {
        let feats: Vec<&[Vec<f64>]> = scenes.iter().map(|s| s.features.as_slice()).collect();
        self.probabilities(&feats).iter().map(|p| top_k(p, 1)[0]).collect()
    }

    /// Fraction of scenes whose verb is predicted correctly.
    pub fn accuracy(&self, scenes: &[ToyScene]) -> f64 {
        let gold: Vec<usize> = scenes.iter().map(|s| s.verb).collect();
        accuracy(&gold, &self.predict(scenes))
    }
}

/// Trains the verb classifier with its own cross-entropy.
pub fn train_classifier(config: &ToyCaptionConfig, train: &[ToyScene]) -> Result<TrainedClassifier, Error> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty caption training set".into()));
    }
    let mut store = ParameterStore::new();
    let mut rng = RngStream::new(config.seed).fork(30);
    let classifier =
        MiddleWordClassifier::new(&mut store, "clf", config.feature_dim(), config.classifier_hidden, config.verbs.len(), &mut rng);
    let sampler = BucketSampler::new(train.iter().map(|s| s.features.len()));
    let mut batch_rng = RngStream::new(config.seed).fork(31);
    let mut adam = AdamState::new(config.classifier_lr);
    let mut epoch_losses = Vec::with_capacity(config.classifier_epochs);
    let mut step = 0;
    for _ in 0..config.classifier_epochs {
        let batches = sampler.epoch(config.batch_size, &mut batch_rng);
        let mut sum = 0.0;
        for idx in &batches {
            step += 1;
            let (loss, grads) = {
                let mut tape = Tape::new(&store);
                let feats: Vec<&[Vec<f64>]> = idx.iter().map(|&i| train[i].features.as_slice()).collect();
                let labels: Vec<usize> = idx.iter().map(|&i| train[i].verb).collect();
                let frames = frame_inputs(&mut tape, &feats);
                let loss = classifier.loss(&mut tape, &frames, &labels);
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { step, loss: value });
                }
                (value, tape.backward(loss).into_params())
            };
            store.accumulate_grads(&grads);
            adam.step(&mut store);
            sum += loss;
        }
        epoch_losses.push(sum / batches.len() as f64);
    }
    Ok(TrainedClassifier { store, classifier, epoch_losses })
}

/// Reference captions of each scene as token ids.
pub fn reference_ids(scenes: &[ToyScene], vocab: &Vocab) -> Result<Vec<Vec<Vec<usize>>>, Error> {
    scenes.iter().map(|s| s.refs.iter().map(|r| vocab.encode(r)).collect()).collect()
}

/// Best caption of each scene. `middle_words[i]` is passed to
/// [`CaptionModel::generate`] for scene `i`.
pub fn best_captions(
    model: &CaptionModel,
    store: &ParameterStore,
    scenes: &[ToyScene],
    middle_words: &[Vec<usize>],
    beam: usize,
) -> Vec<Hypothesis> {
    assert_eq!(scenes.len(), middle_words.len(), "contract violation: one middle-word list per scene");
    scenes
        .iter()
        .zip(middle_words)
        .map(|(s, m)| model.generate(store, &s.features, m, beam).into_iter().next().expect("beam search returns a hypothesis"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    pub bleu4: f64,
    pub rouge_l: f64,
}

pub fn score_captions(captions: &[Vec<usize>], refs: &[Vec<Vec<usize>>]) -> CaptionScores {
    let bleu4 = metrics::corpus_bleu4(captions, refs);
    let rouge_l = captions.iter().zip(refs).map(|(c, r)| metrics::rouge_l(c, r)).sum::<f64>() / captions.len().max(1) as f64;
    CaptionScores { bleu4, rouge_l }
}

/// Scores a model's best captions on `scenes`.
pub fn eval_caption(
    model: &CaptionModel,
    store: &ParameterStore,
    scenes: &[ToyScene],
    vocab: &Vocab,
    middle_words: &[Vec<usize>],
    beam: usize,
) -> Result<CaptionScores, Error> {
    let caps: Vec<Vec<usize>> = best_captions(model, store, scenes, middle_words, beam).iter().map(Hypothesis::tokens).collect();
    Ok(score_captions(&caps, &reference_ids(scenes, vocab)?))
}

/// Gold verb tokens of each scene, one per list.
pub fn oracle_words(scenes: &[ToyScene], vocab: &Vocab) -> Vec<Vec<usize>> {
    scenes.iter().map(|s| vec![vocab.verb_token(s.verb)]).collect()
}

/// Middle-word accuracy level of one sweep row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AccuracyLevel {
    /// The classifier's own predictions.
    Raw,
    Target(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub label: String,
    /// Accuracy of the middle words actually used.
    pub accuracy: f64,
    pub scores: CaptionScores,
}

/// Middle-out scores with middle words of controlled accuracy.
///
/// Targets at or above the classifier's accuracy mix its predictions with
/// the gold verbs; lower targets corrupt gold verbs into other verbs.
pub fn run_oracle_sweep(
    model: &CaptionModel,
    store: &ParameterStore,
    test: &[ToyScene],
    vocab: &Vocab,
    predicted_verbs: &[usize],
    levels: &[AccuracyLevel],
    beam: usize,
    rng: &mut RngStream,
) -> Result<Vec<SweepRow>, Error> {
    assert_eq!(model.kind.family, Family::MiddleOut, "contract violation: the oracle sweep runs a middle-out model");
    assert_eq!(predicted_verbs.len(), test.len(), "contract violation: one prediction per test scene");
    let gold: Vec<usize> = test.iter().map(|s| s.verb).collect();
    let raw = accuracy(&gold, predicted_verbs);
    let refs = reference_ids(test, vocab)?;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let (label, verbs) = match level {
            AccuracyLevel::Raw => ("raw".to_string(), predicted_verbs.to_vec()),
            AccuracyLevel::Target(t) => {
                let source = if t >= raw {
                    MiddleWordSource::Classifier(predicted_verbs)
                } else {
                    MiddleWordSource::Corruption { vocab: vocab.verb_count() }
                };
                (format!("{:.0}%", t * 100.0), simulate_classifier_accuracy(&gold, source, t, rng))
            }
        };
        let words: Vec<Vec<usize>> = verbs.iter().map(|&v| vec![vocab.verb_token(v)]).collect();
        let caps: Vec<Vec<usize>> = best_captions(model, store, test, &words, beam).iter().map(Hypothesis::tokens).collect();
        rows.push(SweepRow { label, accuracy: accuracy(&gold, &verbs), scores: score_captions(&caps, &refs) });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiversityReport {
    /// Mean Self-BLEU of the per-scene caption sets.
    pub self_bleu: f64,
    /// Mean number of distinct verbs per caption set.
    pub distinct_verbs: f64,
}

/// Self-BLEU of the `beam` captions generated for each scene. Middle-out
/// models are seeded with the classifier's top-`beam` verbs; baselines
/// decode from START.
pub fn run_diversity_eval(
    model: &CaptionModel,
    store: &ParameterStore,
    test: &[ToyScene],
    vocab: &Vocab,
    classifier: Option<&TrainedClassifier>,
    beam: usize,
) -> DiversityReport {
    let seeds: Vec<Vec<usize>> = match model.kind.family {
        Family::Baseline => {
            assert!(!model.kind.oracle_word, "contract violation: diversity compares free-running models");
            vec![Vec::new(); test.len()]
        }
        Family::MiddleOut => {
            let clf = classifier.expect("contract violation: middle-out diversity needs a classifier");
            let feats: Vec<&[Vec<f64>]> = test.iter().map(|s| s.features.as_slice()).collect();
            clf.probabilities(&feats).iter().map(|p| top_k(p, beam).into_iter().map(|v| vocab.verb_token(v)).collect()).collect()
        }
    };
    let (mut sb, mut dv, mut n) = (0.0, 0.0, 0usize);
    for (s, seed) in test.iter().zip(&seeds) {
        let caps: Vec<Vec<usize>> = model.generate(store, &s.features, seed, beam).iter().map(Hypothesis::tokens).collect();
        if caps.len() < 2 {
            continue;
        }
        let verbs: BTreeSet<usize> = caps.iter().flatten().filter(|&&t| vocab.verb_index(t).is_some()).copied().collect();
        sb += metrics::self_bleu(&caps);
        dv += verbs.len() as f64;
        n += 1;
    }
    let n = n.max(1) as f64;
    DiversityReport { self_bleu: sb / n, distinct_verbs: dv / n }
}

/// Which scene of a concatenated pair a caption describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVerdict {
    Intended,
    Other,
    Neither,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutcome {
    pub caption: Vec<usize>,
    pub contains_middle: bool,
    pub verdict: ControlVerdict,
}

/// Counts how many of the scene's actor and object tokens appear.
fn content_matches(caption: &[usize], scene: &ToyScene, vocab: &Vocab) -> usize {
    usize::from(caption.contains(&vocab.actor_token(scene.actor))) + usize::from(caption.contains(&vocab.object_token(scene.object)))
}

/// Captions the concatenation of `intended` and `other` (in `order`) with
/// `middle_word` as middle seed or oracle input, and judges which scene the
/// actor and object tokens describe.
#[allow(clippy::too_many_arguments)]
pub fn run_control_eval(
    model: &CaptionModel,
    store: &ParameterStore,
    vocab: &Vocab,
    intended: &ToyScene,
    other: &ToyScene,
    intended_first: bool,
    middle_word: usize,
    beam: usize,
) -> ControlOutcome {
    assert!(vocab.verb_index(middle_word).is_some(), "contract violation: middle word {middle_word} is not a verb");
    assert!(model.kind.takes_middle_word(), "contract violation: control needs a model that takes a middle word");
    let features = if intended_first { concat_features(intended, other) } else { concat_features(other, intended) };
    let caption = model.generate(store, &features, &[middle_word], beam).into_iter().next().unwrap().tokens();
    let (hit, miss) = (content_matches(&caption, intended, vocab), content_matches(&caption, other, vocab));
    let verdict = match hit.cmp(&miss) {
        std::cmp::Ordering::Greater => ControlVerdict::Intended,
        std::cmp::Ordering::Less => ControlVerdict::Other,
        std::cmp::Ordering::Equal => ControlVerdict::Neither,
    };
    ControlOutcome { contains_middle: caption.contains(&middle_word), caption, verdict }
}

/// Pairs of test scenes differing in verb, actor and object.
pub fn control_pairs(test: &[ToyScene], count: usize, rng: &mut RngStream) -> Vec<(usize, usize)> {
    let n = test.len() as u64;
    assert!(n >= 2, "contract violation: control pairs need at least two scenes");
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        assert!(attempts < 1000 * count.max(1), "contract violation: too few distinct scenes for control pairs");
        let (a, b) = (rng.below(n) as usize, rng.below(n) as usize);
        let (x, y) = (&test[a], &test[b]);
        if x.verb != y.verb && x.actor != y.actor && x.object != y.object {
            out.push((a, b));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlReport {
    pub pairs: usize,
    /// Fraction of pairs whose caption describes the intended scene.
    pub targeted: f64,
    /// Fraction of captions containing the provided middle word.
    pub contains_middle: f64,
}

/// Control evaluation over `pairs`; pair `i` targets its first scene when `i`
/// is even and its second otherwise, and alternates which scene comes first.
pub fn run_control_suite(
    model: &CaptionModel,
    store: &ParameterStore,
    vocab: &Vocab,
    test: &[ToyScene],
    pairs: &[(usize, usize)],
    beam: usize,
) -> ControlReport {
    let (mut hit, mut has) = (0usize, 0usize);
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let (intended, other) = if i % 2 == 0 { (&test[a], &test[b]) } else { (&test[b], &test[a]) };
        let first = (i / 2) % 2 == 0;
        let out = run_control_eval(model, store, vocab, intended, other, first, vocab.verb_token(intended.verb), beam);
        hit += usize::from(out.verdict == ControlVerdict::Intended);
        has += usize::from(out.contains_middle);
    }
    let n = pairs.len().max(1) as f64;
    ControlReport { pairs: pairs.len(), targeted: hit as f64 / n, contains_middle: has as f64 / n }
}

#[cfg(test)]
mod tests;
