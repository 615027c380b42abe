//! Left-to-right and middle-out attention decoders.
//!
//! A [`Seq2Seq`] owns the encoder, the three attention mechanisms and one
//! (baseline) or two (middle-out) directional LSTM decoders. Decoding is
//! driven step by step through a [`DecoderState`]: [`Seq2Seq::step`] runs one
//! recurrence for a side and records its hidden state in the shared hidden
//! memory, then the caller picks the emitted token and hands its
//! representation to [`Seq2Seq::emit`], which records it in the shared output
//! memory and makes it the side's next input. Both memories therefore hold
//! entries in global generation order regardless of which side produced them.

pub mod beam;
pub mod classifier;
pub mod simulate;

use serde::{Deserialize, Serialize};

use crate::attention::{self, BilinearAttention};
use crate::layers::{BiEncoder, BiEncoderOutput, Embedding, Linear, LstmCell, LstmState};
use crate::params::ParameterStore;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};

pub use beam::{beam_search, greedy_decode, DecodeOptions, Hypothesis};
pub use classifier::{top_k, MiddleWordClassifier};
pub use simulate::{sampling_ratio, simulate_classifier_accuracy, MiddleWordSource};

/// Which self-attention contexts feed the recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfAttnVariant {
    None,
    OutputOnly,
    HiddenOnly,
    Dual,
}

impl SelfAttnVariant {
    pub const ALL: [SelfAttnVariant; 4] = [Self::None, Self::OutputOnly, Self::HiddenOnly, Self::Dual];

    pub fn uses_outputs(self) -> bool {
        matches!(self, Self::OutputOnly | Self::Dual)
    }

    pub fn uses_hidden(self) -> bool {
        matches!(self, Self::HiddenOnly | Self::Dual)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::OutputOnly => "output",
            Self::HiddenOnly => "hidden",
            Self::Dual => "dual",
        }
    }
}

impl std::str::FromStr for SelfAttnVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "output" | "output_only" => Ok(Self::OutputOnly),
            "hidden" | "hidden_only" => Ok(Self::HiddenOnly),
            "dual" => Ok(Self::Dual),
            other => Err(format!("unknown self-attention variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Baseline,
    #[serde(alias = "middleout")]
    MiddleOut,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::MiddleOut => "middleout",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "middleout" | "middle_out" | "middle-out" => Ok(Self::MiddleOut),
            other => Err(format!("unknown model family {other:?}")),
        }
    }
}

/// Decoder direction. The baseline decoder is the `Right` side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// Step order for a middle-out pass emitting `left_len` and `right_len`
/// tokens (STOP included). Sides alternate; once one side is exhausted the
/// other continues alone.
pub fn alternation(left_len: usize, right_len: usize, left_first: bool) -> Vec<Side> {
    let mut order = Vec::with_capacity(left_len + right_len);
    let (mut l, mut r) = (0, 0);
    let mut turn = if left_first { Side::Left } else { Side::Right };
    while l < left_len || r < right_len {
        match turn {
            Side::Left if l < left_len => {
                order.push(Side::Left);
                l += 1;
            }
            Side::Right if r < right_len => {
                order.push(Side::Right);
                r += 1;
            }
            _ => {}
        }
        turn = turn.other();
    }
    order
}

/// Splits a gold sequence at the first occurrence of `middle` into
/// `(left, right)` targets: the left part reversed then STOP, the right part
/// then STOP. Returns `None` when `middle` does not occur.
pub fn split_at_middle(tokens: &[usize], middle: usize, stop: usize) -> Option<(Vec<usize>, Vec<usize>)> {
    let pos = tokens.iter().position(|&t| t == middle)?;
    let mut left: Vec<usize> = tokens[..pos].iter().rev().copied().collect();
    left.push(stop);
    let mut right = tokens[pos + 1..].to_vec();
    right.push(stop);
    Some((left, right))
}

/// Optional scheduled sampling for teacher-forced passes: with probability
/// `rate` a row's next input is drawn from the model's output distribution
/// instead of being the gold token. Targets are never changed.
pub struct Scheduled<'r> {
    pub rate: f64,
    pub rng: &'r mut RngStream,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Seq2SeqConfig {
    pub family: Family,
    pub variant: SelfAttnVariant,
    /// Width of one input frame.
    pub input_dim: usize,
    /// Hidden size of each encoder direction.
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    /// `Some(V)`: tokens are embedded ids and heads emit `V` logits.
    /// `None`: tokens are raw scalars and heads emit one value.
    pub vocab_size: Option<usize>,
    /// Embedding width; ignored for scalar tokens.
    pub embed_dim: usize,
    /// Concatenate a middle-word embedding to every step input (baseline only).
    pub oracle_word: bool,
    pub left_first: bool,
}

impl Seq2SeqConfig {
    pub fn token_dim(&self) -> usize {
        if self.vocab_size.is_some() {
            self.embed_dim
        } else {
            1
        }
    }

    pub fn step_input_dim(&self) -> usize {
        let t = self.token_dim();
        let mut d = t + 2 * self.enc_hidden;
        if self.variant.uses_outputs() {
            d += t;
        }
        if self.variant.uses_hidden() {
            d += self.dec_hidden;
        }
        if self.oracle_word {
            d += t;
        }
        d
    }

    fn validate(&self) {
        assert!(
            !(self.vocab_size.is_none() && self.variant.uses_outputs()),
            "contract violation: output-embedding self-attention needs token embeddings"
        );
        assert!(
            !(self.oracle_word && (self.family == Family::MiddleOut || self.vocab_size.is_none())),
            "contract violation: oracle word input is a token-level baseline option"
        );
    }
}

/// One directional decoder: an LSTM cell and its output head.
#[derive(Debug, Clone)]
pub struct DirectionalDecoder {
    pub cell: LstmCell,
    pub head: Linear,
}

/// The members of one recurrence input, `[e_prev, c_t, d_t, h~_t, oracle]`.
#[derive(Debug, Clone, Copy)]
pub struct DecoderStepContext {
    pub e_prev: Var,
    pub context: Var,
    pub outputs: Option<Var>,
    pub hidden: Option<Var>,
    pub oracle: Option<Var>,
    /// Encoder attention weights of this step.
    pub alignment: Var,
}

impl DecoderStepContext {
    pub fn members(&self) -> Vec<Var> {
        let mut v = vec![self.e_prev, self.context];
        v.extend(self.outputs);
        v.extend(self.hidden);
        v.extend(self.oracle);
        v
    }
}

#[derive(Debug, Clone)]
pub struct SideState {
    pub lstm: LstmState,
    pub prev: Var,
    pub steps: usize,
    pub finished: bool,
}

/// Decoding state shared by both directions of a middle-out pass (or the
/// single direction of the baseline).
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub sides: Vec<SideState>,
    /// Representations of emitted tokens, global generation order.
    pub output_memory: Vec<Var>,
    /// Post-step decoder hidden states, global generation order.
    pub hidden_memory: Vec<Var>,
    pub oracle: Option<Var>,
    pub family: Family,
}

pub type MiddleOutState = DecoderState;

impl DecoderState {
    fn index(&self, side: Side) -> usize {
        match (self.family, side) {
            (Family::Baseline, Side::Right) => 0,
            (Family::Baseline, Side::Left) => panic!("contract violation: the baseline decoder has no left side"),
            (Family::MiddleOut, Side::Left) => 0,
            (Family::MiddleOut, Side::Right) => 1,
        }
    }

    pub fn side(&self, side: Side) -> &SideState {
        &self.sides[self.index(side)]
    }

    pub fn side_mut(&mut self, side: Side) -> &mut SideState {
        let i = self.index(side);
        &mut self.sides[i]
    }

    pub fn all_finished(&self) -> bool {
        self.sides.iter().all(|s| s.finished)
    }

    /// Side that moves next under the alternation rule, given who moved last.
    pub fn next_side(&self, last: Option<Side>, left_first: bool) -> Option<Side> {
        match self.family {
            Family::Baseline => (!self.sides[0].finished).then_some(Side::Right),
            Family::MiddleOut => {
                let preferred = match last {
                    None => {
                        if left_first {
                            Side::Left
                        } else {
                            Side::Right
                        }
                    }
                    Some(s) => s.other(),
                };
                if !self.side(preferred).finished {
                    Some(preferred)
                } else if !self.side(preferred.other()).finished {
                    Some(preferred.other())
                } else {
                    None
                }
            }
        }
    }
}

/// Output of one recurrence step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Vocabulary logits, or the predicted value for scalar tokens.
    pub output: Var,
    pub hidden: Var,
    pub inputs: DecoderStepContext,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub config: Seq2SeqConfig,
    pub encoder: BiEncoder,
    pub embedding: Option<Embedding>,
    pub encoder_attention: BilinearAttention,
    pub output_attention: Option<BilinearAttention>,
    pub hidden_attention: Option<BilinearAttention>,
    /// `[baseline]` or `[left, right]`.
    pub decoders: Vec<DirectionalDecoder>,
}

impl Seq2Seq {
    pub fn new(config: Seq2SeqConfig, store: &mut ParameterStore, rng: &mut RngStream) -> Self {
        config.validate();
        let c = &config;
        let enc_dim = 2 * c.enc_hidden;
        let encoder = BiEncoder::new(store, "enc", c.input_dim, c.enc_hidden, c.dec_hidden, rng);
        let embedding = c.vocab_size.map(|v| Embedding::new(store, "embed", v, c.embed_dim, rng));
        let encoder_attention = BilinearAttention::new(store, "att.enc", c.dec_hidden, enc_dim, rng);
        let output_attention = c
            .variant
            .uses_outputs()
            .then(|| BilinearAttention::new(store, "att.out", c.dec_hidden, c.token_dim(), rng));
        let hidden_attention = c
            .variant
            .uses_hidden()
            .then(|| BilinearAttention::new(store, "att.hid", c.dec_hidden, c.dec_hidden, rng));
        let out_width = c.vocab_size.unwrap_or(1);
        let names: &[&str] = match c.family {
            Family::Baseline => &["dec.ltr"],
            Family::MiddleOut => &["dec.left", "dec.right"],
        };
        let decoders = names
            .iter()
            .map(|n| DirectionalDecoder {
                cell: LstmCell::new(store, &format!("{n}.cell"), c.step_input_dim(), c.dec_hidden, rng),
                head: Linear::new(store, &format!("{n}.head"), c.dec_hidden, out_width, rng),
            })
            .collect();
        Self { config, encoder, embedding, encoder_attention, output_attention, hidden_attention, decoders }
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn variant(&self) -> SelfAttnVariant {
        self.config.variant
    }

    pub fn encode(&self, tape: &mut Tape<'_>, frames: &[Var]) -> BiEncoderOutput {
        self.encoder.encode(tape, frames)
    }

    /// Embeds token ids (token models only).
    pub fn embed(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Var {
        self.embedding
            .as_ref()
            .expect("contract violation: scalar-token model has no embedding table")
            .embed(tape, ids)
    }

    fn decoder(&self, side: Side) -> &DirectionalDecoder {
        match (self.config.family, side) {
            (Family::Baseline, _) => &self.decoders[0],
            (Family::MiddleOut, Side::Left) => &self.decoders[0],
            (Family::MiddleOut, Side::Right) => &self.decoders[1],
        }
    }

    /// Baseline start: the decoder begins from the encoder bridge state with
    /// `start` (START embedding, or initial value) as its first input.
    pub fn start_baseline(&self, enc: &BiEncoderOutput, start: Var, oracle: Option<Var>) -> DecoderState {
        assert_eq!(self.config.family, Family::Baseline, "contract violation: start_baseline on a middle-out model");
        assert_eq!(
            oracle.is_some(),
            self.config.oracle_word,
            "contract violation: oracle word input must be supplied exactly when the model was built with it"
        );
        DecoderState {
            sides: vec![SideState { lstm: enc.init_state, prev: start, steps: 0, finished: false }],
            output_memory: Vec::new(),
            hidden_memory: Vec::new(),
            oracle,
            family: Family::Baseline,
        }
    }

    /// Middle-out start: both sides begin from the bridge state with the
    /// middle token as first input; the output memory is seeded with it.
    pub fn start_middle_out(&self, enc: &BiEncoderOutput, middle: Var) -> DecoderState {
        assert_eq!(self.config.family, Family::MiddleOut, "contract violation: start_middle_out on a baseline model");
        let side = SideState { lstm: enc.init_state, prev: middle, steps: 0, finished: false };
        DecoderState {
            sides: vec![side.clone(), side],
            output_memory: vec![middle],
            hidden_memory: Vec::new(),
            oracle: None,
            family: Family::MiddleOut,
        }
    }

    /// Assembles the step input for `side` using its pre-step hidden state as query.
    pub fn step_context(&self, tape: &mut Tape<'_>, enc: &BiEncoderOutput, state: &DecoderState, side: Side) -> DecoderStepContext {
        let s = state.side(side);
        let query = s.lstm.h;
        let enc_att = self.encoder_attention.attend_memory(tape, query, &enc.states);
        let outputs = self
            .output_attention
            .as_ref()
            .map(|att| attention::self_attend_outputs(att, tape, query, &state.output_memory));
        let hidden = self
            .hidden_attention
            .as_ref()
            .map(|att| attention::self_attend_hidden(att, tape, query, &state.hidden_memory));
        DecoderStepContext {
            e_prev: s.prev,
            context: enc_att.context,
            outputs,
            hidden,
            oracle: state.oracle,
            alignment: enc_att.weights.expect("encoder output is never empty"),
        }
    }

    /// One recurrence of `side`: attention, LSTM update, output head. The new
    /// hidden state is appended to the hidden memory.
    pub fn step(&self, tape: &mut Tape<'_>, enc: &BiEncoderOutput, state: &mut DecoderState, side: Side) -> StepOutput {
        assert!(!state.side(side).finished, "contract violation: stepping a finished {side:?} decoder");
        let inputs = self.step_context(tape, enc, state, side);
        let x = tape.concat(&inputs.members());
        let dec = self.decoder(side);
        let lstm = dec.cell.step(tape, x, state.side(side).lstm);
        let output = dec.head.forward(tape, lstm.h);
        let s = state.side_mut(side);
        s.lstm = lstm;
        s.steps += 1;
        state.hidden_memory.push(lstm.h);
        StepOutput { output, hidden: lstm.h, inputs }
    }

    /// Records the token `side` emitted; it becomes that side's next input.
    pub fn emit(&self, state: &mut DecoderState, side: Side, token: Var) {
        state.output_memory.push(token);
        state.side_mut(side).prev = token;
    }

    pub fn finish(&self, state: &mut DecoderState, side: Side) {
        state.side_mut(side).finished = true;
    }

    fn forced_moves(
        &self,
        tape: &mut Tape<'_>,
        enc: &BiEncoderOutput,
        state: &mut DecoderState,
        moves: &[(Side, &[usize])],
        mut scheduled: Option<Scheduled<'_>>,
    ) -> Var {
        assert!(!moves.is_empty(), "contract violation: teacher forcing needs at least one target");
        let mut total: Option<Var> = None;
        for &(side, gold) in moves {
            let out = self.step(tape, enc, state, side);
            let ce = tape.cross_entropy(out.output, gold);
            total = Some(match total {
                Some(t) => tape.add(t, ce),
                None => ce,
            });
            let fed: Vec<usize> = match scheduled.as_mut() {
                Some(s) if s.rate > 0.0 => {
                    let logits = tape.value(out.output);
                    gold.iter()
                        .enumerate()
                        .map(|(r, &g)| if s.rng.bernoulli(s.rate) { sample_logits(logits.row_slice(r), s.rng) } else { g })
                        .collect()
                }
                _ => gold.to_vec(),
            };
            let rep = self.embed(tape, &fed);
            self.emit(state, side, rep);
        }
        let total = total.unwrap();
        tape.scale(total, 1.0 / moves.len() as f64)
    }

    /// Teacher-forced baseline pass. `targets[t]` holds the gold token of
    /// every batch row at step `t`, ending with STOP. Returns the mean
    /// per-token cross-entropy.
    pub fn baseline_loss(
        &self,
        tape: &mut Tape<'_>,
        enc: &BiEncoderOutput,
        start: &[usize],
        oracle: Option<&[usize]>,
        targets: &[Vec<usize>],
        scheduled: Option<Scheduled<'_>>,
    ) -> Var {
        let start = self.embed(tape, start);
        let oracle = oracle.map(|o| self.embed(tape, o));
        let mut state = self.start_baseline(enc, start, oracle);
        let moves: Vec<(Side, &[usize])> = targets.iter().map(|t| (Side::Right, t.as_slice())).collect();
        self.forced_moves(tape, enc, &mut state, &moves, scheduled)
    }

    /// Teacher-forced middle-out pass over batched left and right targets
    /// (as produced by [`split_at_middle`]), in generation order. Returns the
    /// mean per-token cross-entropy over both sides.
    pub fn middle_out_loss(
        &self,
        tape: &mut Tape<'_>,
        enc: &BiEncoderOutput,
        middle: &[usize],
        left: &[Vec<usize>],
        right: &[Vec<usize>],
        scheduled: Option<Scheduled<'_>>,
    ) -> Var {
        let middle = self.embed(tape, middle);
        let mut state = self.start_middle_out(enc, middle);
        let (mut l, mut r) = (left.iter(), right.iter());
        let moves: Vec<(Side, &[usize])> = alternation(left.len(), right.len(), self.config.left_first)
            .into_iter()
            .map(|side| match side {
                Side::Left => (side, l.next().unwrap().as_slice()),
                Side::Right => (side, r.next().unwrap().as_slice()),
            })
            .collect();
        self.forced_moves(tape, enc, &mut state, &moves, scheduled)
    }
}

/// Draws an index from `softmax(logits)`.
pub fn sample_logits(logits: &[f64], rng: &mut RngStream) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    rng.categorical(&weights)
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
