//! Greedy decoding and beam search over token models.
//!
//! Live hypotheses are pruned by summed log-probability; hypotheses leave
//! the beam once every side has emitted STOP and the finished pool is ranked
//! by `logprob + output length`. With a beam of one this reduces exactly to
//! greedy decoding.

use crate::layers::BiEncoderOutput;
use crate::tape::{Tape, Var};

use super::{argmax, DecoderState, Family, Seq2Seq, Side};

#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub start: usize,
    pub stop: usize,
    /// Steps a side may take before it is force-terminated.
    pub max_len_per_side: usize,
    /// Word concatenated to every step input by oracle baselines.
    pub oracle_word: Option<usize>,
    pub left_first: bool,
}

/// A (possibly partial) decoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Tokens left of the middle in emission order, i.e. nearest first.
    pub left: Vec<usize>,
    pub middle: Option<usize>,
    pub right: Vec<usize>,
    pub logprob: f64,
    /// `logprob + len()`.
    pub score: f64,
    pub finished: bool,
    /// Some side hit the length limit instead of emitting STOP.
    pub truncated: bool,
}

impl Hypothesis {
    fn seed(middle: Option<usize>) -> Self {
        Self { left: Vec::new(), middle, right: Vec::new(), logprob: 0.0, score: 0.0, finished: false, truncated: false }
    }

    /// `reverse(left) ++ [middle] ++ right`, STOP tokens excluded.
    pub fn tokens(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.left.iter().rev().copied().collect();
        out.extend(self.middle);
        out.extend(&self.right);
        out
    }

    pub fn len(&self) -> usize {
        self.left.len() + self.right.len() + usize::from(self.middle.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the middle token within [`Hypothesis::tokens`].
    pub fn middle_position(&self) -> Option<usize> {
        self.middle.map(|_| self.left.len())
    }

    fn rescore(&mut self) {
        self.score = self.logprob + self.len() as f64;
    }
}

#[derive(Clone)]
struct Live {
    hyp: Hypothesis,
    state: DecoderState,
    last: Option<Side>,
}

fn start<'s>(model: &Seq2Seq, tape: &mut Tape<'s>, enc: &BiEncoderOutput, seed: usize, opts: &DecodeOptions) -> Live {
    let seed_rep = model.embed(tape, &[seed]);
    match model.family() {
        Family::Baseline => {
            let oracle = opts.oracle_word.map(|w| model.embed(tape, &[w]));
            Live { hyp: Hypothesis::seed(None), state: model.start_baseline(enc, seed_rep, oracle), last: None }
        }
        Family::MiddleOut => Live { hyp: Hypothesis::seed(Some(seed)), state: model.start_middle_out(enc, seed_rep), last: None },
    }
}

fn log_probs(tape: &mut Tape<'_>, logits: Var) -> Vec<f64> {
    let lp = tape.log_softmax(logits);
    tape.value(lp).data().to_vec()
}

/// Applies `token` as the move of `side`, updating the hypothesis and state.
fn apply(model: &Seq2Seq, tape: &mut Tape<'_>, live: &mut Live, side: Side, token: usize, logp: f64, opts: &DecodeOptions) {
    let rep = model.embed(tape, &[token]);
    model.emit(&mut live.state, side, rep);
    live.hyp.logprob += logp;
    live.last = Some(side);
    if token == opts.stop {
        model.finish(&mut live.state, side);
    } else {
        match side {
            Side::Left => live.hyp.left.push(token),
            Side::Right => live.hyp.right.push(token),
        }
        if live.state.side(side).steps >= opts.max_len_per_side {
            model.finish(&mut live.state, side);
            live.hyp.truncated = true;
        }
    }
    live.hyp.finished = live.state.all_finished();
    live.hyp.rescore();
}

/// Argmax decoding from one seed (START for baselines, the middle word for middle-out).
pub fn greedy_decode(model: &Seq2Seq, tape: &mut Tape<'_>, enc: &BiEncoderOutput, seed: usize, opts: &DecodeOptions) -> Hypothesis {
    let mut live = start(model, tape, enc, seed, opts);
    while let Some(side) = live.state.next_side(live.last, opts.left_first) {
        let out = model.step(tape, enc, &mut live.state, side);
        let lp = log_probs(tape, out.output);
        let best = argmax(&lp);
        apply(model, tape, &mut live, side, best, lp[best], opts);
    }
    live.hyp
}

fn search_one(model: &Seq2Seq, tape: &mut Tape<'_>, enc: &BiEncoderOutput, seed: usize, width: usize, opts: &DecodeOptions) -> Vec<Hypothesis> {
    let mut beam = vec![start(model, tape, enc, seed, opts)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    while !beam.is_empty() {
        let mut candidates: Vec<Live> = Vec::new();
        for live in &beam {
            let side = live.state.next_side(live.last, opts.left_first).expect("live hypotheses have an active side");
            let mut stepped = live.clone();
            let out = model.step(tape, enc, &mut stepped.state, side);
            let lp = log_probs(tape, out.output);
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]));
            for &tok in order.iter().take(width) {
                let mut child = stepped.clone();
                apply(model, tape, &mut child, side, tok, lp[tok], opts);
                candidates.push(child);
            }
        }
        candidates.sort_by(|a, b| b.hyp.logprob.total_cmp(&a.hyp.logprob));
        candidates.truncate(width);
        beam = Vec::with_capacity(width);
        for c in candidates {
            if c.hyp.finished {
                pool.push(c.hyp);
            } else {
                beam.push(c);
            }
        }
    }
    pool
}

/// Beam search with the beam budget split evenly across `seeds`.
///
/// Baselines take a single START seed. Middle-out models take one seed per
/// candidate middle word (e.g. the classifier's top-k); each seed keeps its
/// own sub-beam of `max(1, beam_size / seeds.len())` hypotheses so distinct
/// middle words survive to the output. Returns up to `beam_size` finished
/// hypotheses, best score first.
pub fn beam_search(
    model: &Seq2Seq,
    tape: &mut Tape<'_>,
    enc: &BiEncoderOutput,
    seeds: &[usize],
    beam_size: usize,
    opts: &DecodeOptions,
) -> Vec<Hypothesis> {
    assert!(beam_size >= 1, "contract violation: beam size must be at least 1");
    assert!(!seeds.is_empty(), "contract violation: beam search needs at least one seed");
    let width = (beam_size / seeds.len()).max(1);
    let mut all: Vec<Hypothesis> = Vec::new();
    for &seed in seeds {
        all.extend(search_one(model, tape, enc, seed, width, opts));
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(beam_size);
    all
}
