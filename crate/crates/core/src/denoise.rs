//! Symmetric-sequence de-noising: data, regression decoders, training and evaluation.
//!
//! A clean sequence of length `2n + 1` peaks at `mu` and falls off linearly
//! by `mu^2 / n` per position on both sides; inputs add bounded uniform
//! noise. Both decoder families regress values directly: the previous value
//! is the step input and a one-unit linear head is the output. A linear
//! predictor on the encoder summary supplies the first value (baseline) or
//! the middle value (middle-out).

use serde::{Deserialize, Serialize};

use crate::batching::BucketSampler;
use crate::decoding::{alternation, DecoderState, Family, Seq2Seq, Seq2SeqConfig, SelfAttnVariant, Side};
use crate::layers::{BiEncoderOutput, Linear};
use crate::metrics;
use crate::params::{AdamState, ParameterStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Error;

pub use crate::jsonl::{read_jsonl, write_jsonl};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseSample {
    pub mu: f64,
    pub n: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl DenoiseSample {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub noise: f64,
    pub lstm_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            train_count: 1000,
            test_count: 100,
            n_min: 5,
            n_max: 10,
            noise: 0.0035,
            lstm_size: 100,
            lr: 1e-4,
            steps: 20000,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_min < 1 || self.n_min > self.n_max {
            return bad("denoise n range must satisfy 1 <= n_min <= n_max");
        }
        if !(self.noise > 0.0) {
            return bad("denoise noise bound must be positive");
        }
        if self.lstm_size == 0 || self.batch_size == 0 {
            return bad("lstm_size and batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// `mu - j mu^2 / n` at distance `j` from the centre, for `j` in `0..=n`.
pub fn clean_sequence(mu: f64, n: usize) -> Vec<f64> {
    let sigma = mu * mu;
    (0..=2 * n)
        .map(|k| {
            let j = k.abs_diff(n) as f64;
            mu - j * sigma / n as f64
        })
        .collect()
}

pub fn generate_sample(config: &DenoiseConfig, rng: &mut RngStream) -> DenoiseSample {
    let mu = rng.uniform(-1.0, 1.0);
    let n = rng.int_inclusive(config.n_min as i64, config.n_max as i64) as usize;
    let y = clean_sequence(mu, n);
    let x = y.iter().map(|v| v + rng.uniform(-config.noise, config.noise)).collect();
    DenoiseSample { mu, n, x, y }
}

/// Train and test splits, drawn from independent streams of `config.seed`.
pub fn generate_denoise_dataset(config: &DenoiseConfig) -> (Vec<DenoiseSample>, Vec<DenoiseSample>) {
    let mut root = RngStream::new(config.seed);
    let mut train_rng = root.fork(1);
    let mut test_rng = root.fork(2);
    let train = (0..config.train_count).map(|_| generate_sample(config, &mut train_rng)).collect();
    let test = (0..config.test_count).map(|_| generate_sample(config, &mut test_rng)).collect();
    (train, test)
}

/// Regression decoder layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionVariant {
    pub family: Family,
    /// Attend over past decoder hidden states (there are no embeddings to attend over).
    pub self_attention: bool,
}

impl RegressionVariant {
    /// Encoder attention only for the baseline; hidden-state self-attention for middle-out.
    pub fn standard(family: Family) -> Self {
        Self { family, self_attention: family == Family::MiddleOut }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseModel {
    pub variant: RegressionVariant,
    pub seq: Seq2Seq,
    /// Linear map from the encoder summary to the first (baseline) or middle value.
    pub predictor: Linear,
}

impl DenoiseModel {
    pub fn new(variant: RegressionVariant, hidden: usize, left_first: bool, store: &mut ParameterStore, rng: &mut RngStream) -> Self {
        let config = Seq2SeqConfig {
            family: variant.family,
            variant: if variant.self_attention { SelfAttnVariant::HiddenOnly } else { SelfAttnVariant::None },
            input_dim: 1,
            enc_hidden: hidden,
            dec_hidden: hidden,
            vocab_size: None,
            embed_dim: 1,
            oracle_word: false,
            left_first,
        };
        let seq = Seq2Seq::new(config, store, rng);
        let predictor = Linear::new(store, "predictor", 2 * hidden, 1, rng);
        Self { variant, seq, predictor }
    }

    pub fn family(&self) -> Family {
        self.variant.family
    }

    /// `B x 1` columns, one per position.
    fn columns(tape: &mut Tape<'_>, rows: &[&[f64]]) -> Vec<Var> {
        let len = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == len), "contract violation: batch rows must share a length");
        (0..len)
            .map(|k| tape.constant(Tensor::matrix(rows.len(), 1, rows.iter().map(|r| r[k]).collect())))
            .collect()
    }

    pub fn encode(&self, tape: &mut Tape<'_>, inputs: &[&[f64]]) -> BiEncoderOutput {
        let frames = Self::columns(tape, inputs);
        self.seq.encode(tape, &frames)
    }

    /// Predicted first or middle value, `B x 1`.
    pub fn predict_start(&self, tape: &mut Tape<'_>, enc: &BiEncoderOutput) -> Var {
        self.predictor.forward(tape, enc.summary)
    }

    /// Index of the value the predictor targets.
    fn anchor(&self, n: usize) -> usize {
        match self.family() {
            Family::Baseline => 0,
            Family::MiddleOut => n,
        }
    }

    /// Decoder moves and their target positions for a sequence of `2n + 1`.
    fn schedule(&self, n: usize) -> Vec<(Side, usize)> {
        match self.family() {
            Family::Baseline => (1..=2 * n).map(|k| (Side::Right, k)).collect(),
            Family::MiddleOut => {
                let (mut l, mut r) = (n, n);
                alternation(n, n, self.seq.config.left_first)
                    .into_iter()
                    .map(|side| match side {
                        Side::Left => {
                            l -= 1;
                            (side, l)
                        }
                        Side::Right => {
                            r += 1;
                            (side, r)
                        }
                    })
                    .collect()
            }
        }
    }

    fn start_state(&self, enc: &BiEncoderOutput, start: Var) -> DecoderState {
        match self.family() {
            Family::Baseline => self.seq.start_baseline(enc, start, None),
            Family::MiddleOut => self.seq.start_middle_out(enc, start),
        }
    }

    /// Teacher-forced loss on a batch sharing one `n`: mean squared error of
    /// the decoder outputs plus that of the start-value predictor.
    pub fn loss(&self, tape: &mut Tape<'_>, batch: &[&DenoiseSample]) -> Var {
        let n = batch[0].n;
        assert!(batch.iter().all(|s| s.n == n), "contract violation: denoise batch mixes lengths");
        let xs: Vec<&[f64]> = batch.iter().map(|s| s.x.as_slice()).collect();
        let ys: Vec<&[f64]> = batch.iter().map(|s| s.y.as_slice()).collect();
        let enc = self.encode(tape, &xs);
        let gold = Self::columns(tape, &ys);
        let pred = self.predict_start(tape, &enc);
        let anchor = gold[self.anchor(n)];
        let pred_loss = tape.mean_squared(pred, anchor);
        let mut state = self.start_state(&enc, anchor);
        let schedule = self.schedule(n);
        let mut seq_loss: Option<Var> = None;
        for &(side, k) in &schedule {
            let out = self.seq.step(tape, &enc, &mut state, side);
            let l = tape.mean_squared(out.output, gold[k]);
            seq_loss = Some(match seq_loss {
                Some(acc) => tape.add(acc, l),
                None => l,
            });
            self.seq.emit(&mut state, side, gold[k]);
        }
        let seq_loss = tape.scale(seq_loss.unwrap(), 1.0 / schedule.len() as f64);
        tape.add(seq_loss, pred_loss)
    }

    /// Free-running predictions for a batch sharing one `n`; the decoder
    /// consumes its own outputs and is told the output length.
    pub fn predict(&self, tape: &mut Tape<'_>, batch: &[&[f64]]) -> Vec<Vec<f64>> {
        let len = batch[0].len();
        assert!(len >= 3 && len % 2 == 1, "contract violation: denoise inputs have odd length >= 3, got {len}");
        let n = len / 2;
        let enc = self.encode(tape, batch);
        let start = self.predict_start(tape, &enc);
        let mut state = self.start_state(&enc, start);
        let mut cols: Vec<Option<Var>> = vec![None; len];
        cols[self.anchor(n)] = Some(start);
        for (side, k) in self.schedule(n) {
            let out = self.seq.step(tape, &enc, &mut state, side);
            self.seq.emit(&mut state, side, out.output);
            cols[k] = Some(out.output);
        }
        (0..batch.len())
            .map(|r| cols.iter().map(|c| tape.value(c.unwrap()).data()[r]).collect())
            .collect()
    }
}

/// Loss values recorded during training, one per optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    /// Mean loss over the `window` steps ending at `step` (1-based).
    pub fn mean_around(&self, step: usize, window: usize) -> f64 {
        let end = step.min(self.losses.len());
        let start = end.saturating_sub(window);
        let s = &self.losses[start..end];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

pub struct TrainedDenoiser {
    pub store: ParameterStore,
    pub model: DenoiseModel,
    pub curve: LossCurve,
}

/// Builds a fresh model with parameters drawn from `seed`.
pub fn init_denoise_model(variant: RegressionVariant, config: &DenoiseConfig, seed: u64) -> (ParameterStore, DenoiseModel) {
    let mut store = ParameterStore::new();
    let mut rng = RngStream::new(seed).fork(10);
    let model = DenoiseModel::new(variant, config.lstm_size, true, &mut store, &mut rng);
    (store, model)
}

/// Adam on bucketed minibatches for `config.steps` steps.
///
/// `progress` is called after every step with `(step, loss)`.
pub fn train_denoise(
    variant: RegressionVariant,
    config: &DenoiseConfig,
    train: &[DenoiseSample],
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainedDenoiser, Error> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty denoise training set".into()));
    }
    let (mut store, model) = init_denoise_model(variant, config, config.seed);
    let sampler = BucketSampler::new(train.iter().map(|s| s.n));
    let mut rng = RngStream::new(config.seed).fork(11);
    let mut adam = AdamState::new(config.lr);
    let mut curve = LossCurve::default();
    for step in 1..=config.steps {
        let idx = sampler.sample(config.batch_size, &mut rng);
        let batch: Vec<&DenoiseSample> = idx.iter().map(|&i| &train[i]).collect();
        let (loss, grads) = {
            let mut tape = Tape::new(&store);
            let loss = model.loss(&mut tape, &batch);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            (value, tape.backward(loss).into_params())
        };
        store.accumulate_grads(&grads);
        adam.step(&mut store);
        curve.losses.push(loss);
        progress(step, loss);
    }
    Ok(TrainedDenoiser { store, model, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseMetrics {
    pub mse: f64,
    /// Mean over sequences of the per-sequence symmetric MSE.
    pub symmetric_mse: f64,
}

/// Free-running predictions for every sample, in input order.
pub fn predict_all(model: &DenoiseModel, store: &ParameterStore, samples: &[DenoiseSample]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); samples.len()];
    let sampler = BucketSampler::new(samples.iter().map(|s| s.n));
    for bucket in sampler.buckets() {
        let mut tape = Tape::inference(store);
        let xs: Vec<&[f64]> = bucket.iter().map(|&i| samples[i].x.as_slice()).collect();
        for (&i, p) in bucket.iter().zip(model.predict(&mut tape, &xs)) {
            out[i] = p;
        }
    }
    out
}

pub fn eval_denoise(model: &DenoiseModel, store: &ParameterStore, test: &[DenoiseSample]) -> DenoiseMetrics {
    let preds = predict_all(model, store, test);
    metrics_for(&preds, test)
}

pub fn metrics_for(preds: &[Vec<f64>], test: &[DenoiseSample]) -> DenoiseMetrics {
    let gold: Vec<Vec<f64>> = test.iter().map(|s| s.y.clone()).collect();
    let mse = metrics::mse(preds, &gold);
    let symmetric_mse = preds.iter().map(|p| metrics::symmetric_mse(p)).sum::<f64>() / preds.len().max(1) as f64;
    DenoiseMetrics { mse, symmetric_mse }
}
