//! LSTM cell, bidirectional encoder, embeddings and affine heads.

use crate::params::{ParamId, ParameterStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const INIT_SCALE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

/// Hidden and cell state of an LSTM, one row per batch element.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape<'_>, batch: usize, hidden: usize) -> Self {
        let h = tape.constant(Tensor::matrix(batch, hidden, vec![0.0; batch * hidden]));
        let c = tape.constant(Tensor::matrix(batch, hidden, vec![0.0; batch * hidden]));
        Self { h, c }
    }
}

/// Standard LSTM cell.
///
/// The four gate matrices (each `H x (D + H)`) are stored transposed and
/// side by side in one `(D + H) x 4H` parameter, columns ordered
/// input, forget, candidate, output; the biases likewise in one `1 x 4H` row.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LstmCell {
    pub fn new(store: &mut ParameterStore, name: &str, input_size: usize, hidden_size: usize, rng: &mut RngStream) -> Self {
        let weight = store.uniform(format!("{name}.weight"), input_size + hidden_size, 4 * hidden_size, INIT_SCALE, rng);
        let mut b: Vec<f64> = (0..4 * hidden_size).map(|_| rng.uniform(-INIT_SCALE, INIT_SCALE)).collect();
        b[hidden_size..2 * hidden_size].iter_mut().for_each(|v| *v = FORGET_BIAS);
        let bias = store.register(format!("{name}.bias"), Tensor::matrix(1, 4 * hidden_size, b));
        Self { input_size, hidden_size, weight, bias }
    }

    pub fn step(&self, tape: &mut Tape<'_>, input: Var, state: LstmState) -> LstmState {
        let (rows, d) = tape.shape(input);
        assert_eq!(d, self.input_size, "contract violation: LSTM expects input width {}, got {d}", self.input_size);
        assert_eq!(tape.shape(state.h), (rows, self.hidden_size), "contract violation: LSTM state shape");
        let h = self.hidden_size;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xh = tape.concat(&[input, state.h]);
        let z = tape.matmul(xh, w);
        let z = tape.add_row(z, b);
        let zi = tape.slice_cols(z, 0, h);
        let zf = tape.slice_cols(z, h, h);
        let zg = tape.slice_cols(z, 2 * h, h);
        let zo = tape.slice_cols(z, 3 * h, h);
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let keep = tape.mul(f, state.c);
        let write = tape.mul(i, g);
        let c = tape.add(keep, write);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        LstmState { h, c }
    }
}

/// `x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_size: usize,
    pub out_size: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, in_size: usize, out_size: usize, rng: &mut RngStream) -> Self {
        let weight = store.uniform(format!("{name}.weight"), in_size, out_size, INIT_SCALE, rng);
        let bias = store.uniform(format!("{name}.bias"), 1, out_size, INIT_SCALE, rng);
        Self { in_size, out_size, weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Token embedding table, `V x E`; row `i` embeds token `i`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub vocab_size: usize,
    pub dim: usize,
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParameterStore, name: &str, vocab_size: usize, dim: usize, rng: &mut RngStream) -> Self {
        let table = store.uniform(format!("{name}.table"), vocab_size, dim, INIT_SCALE, rng);
        Self { vocab_size, dim, table }
    }

    /// Embeds one token per batch row. Panics on ids outside `[0, V)`.
    pub fn embed(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Var {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
            panic!("contract violation: token id {bad} outside vocabulary of {}", self.vocab_size);
        }
        let t = tape.param(self.table);
        tape.gather(t, ids)
    }
}

/// Projection from a decoder hidden state to vocabulary logits.
pub type VocabHead = Linear;

pub fn project_vocab(head: &VocabHead, tape: &mut Tape<'_>, hidden: Var) -> Var {
    head.forward(tape, hidden)
}

/// Per-step states of a bidirectional encoder plus the bridged decoder start state.
#[derive(Debug, Clone)]
pub struct BiEncoderOutput {
    /// `h_i = [forward_i, backward_i]`, each `B x 2H`.
    pub states: Vec<Var>,
    pub init_state: LstmState,
    /// `[forward_n, backward_1]`, the input of the bridge.
    pub summary: Var,
}

impl BiEncoderOutput {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Forward and backward LSTMs over the same sequence.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new(store: &mut ParameterStore, name: &str, input_size: usize, hidden: usize, rng: &mut RngStream) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input_size, hidden, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), input_size, hidden, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden_size
    }

    /// Per-step hidden states of each direction, both indexed by input position.
    pub fn run(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> (Vec<Var>, Vec<Var>) {
        assert!(!inputs.is_empty(), "contract violation: cannot encode an empty sequence");
        let batch = tape.shape(inputs[0]).0;
        let h = self.hidden_size();
        let mut state = LstmState::zeros(tape, batch, h);
        let mut fwd = Vec::with_capacity(inputs.len());
        for &x in inputs {
            state = self.forward.step(tape, x, state);
            fwd.push(state.h);
        }
        let mut state = LstmState::zeros(tape, batch, h);
        let mut bwd = vec![state.h; inputs.len()];
        for (i, &x) in inputs.iter().enumerate().rev() {
            state = self.backward.step(tape, x, state);
            bwd[i] = state.h;
        }
        (fwd, bwd)
    }

    /// `[forward_n, backward_1]`: the final state of each direction.
    pub fn summary(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Var {
        let (fwd, bwd) = self.run(tape, inputs);
        tape.concat(&[*fwd.last().unwrap(), bwd[0]])
    }
}

/// Bidirectional encoder with a learned bridge into the decoder's start state.
#[derive(Debug, Clone)]
pub struct BiEncoder {
    pub lstm: BiLstm,
    pub bridge_h: Linear,
    pub bridge_c: Linear,
}

impl BiEncoder {
    pub fn new(store: &mut ParameterStore, name: &str, input_size: usize, hidden: usize, decoder_hidden: usize, rng: &mut RngStream) -> Self {
        Self {
            lstm: BiLstm::new(store, name, input_size, hidden, rng),
            bridge_h: Linear::new(store, &format!("{name}.bridge_h"), 2 * hidden, decoder_hidden, rng),
            bridge_c: Linear::new(store, &format!("{name}.bridge_c"), 2 * hidden, decoder_hidden, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.lstm.hidden_size()
    }

    /// Width of each per-step state, `2H`.
    pub fn output_size(&self) -> usize {
        2 * self.hidden_size()
    }

    /// Runs both directions over `inputs` (each `B x D`).
    pub fn encode(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> BiEncoderOutput {
        let (fwd, bwd) = self.lstm.run(tape, inputs);
        let states = fwd.iter().zip(&bwd).map(|(&f, &b)| tape.concat(&[f, b])).collect();
        let summary = tape.concat(&[*fwd.last().unwrap(), bwd[0]]);
        let ph = self.bridge_h.forward(tape, summary);
        let pc = self.bridge_c.forward(tape, summary);
        let init_state = LstmState { h: tape.tanh(ph), c: tape.tanh(pc) };
        BiEncoderOutput { states, init_state, summary }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn zero_all(store: &mut ParameterStore) {
        for id in store.ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn init_ranges_and_forget_bias() {
        let mut store = ParameterStore::new();
        let cell = LstmCell::new(&mut store, "cell", 3, 4, &mut RngStream::new(1));
        assert_eq!(store.get(cell.weight).shape(), &[7, 16]);
        assert!(store.get(cell.weight).data().iter().all(|v| v.abs() <= INIT_SCALE));
        let b = store.get(cell.bias).data();
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[..4].iter().chain(&b[8..]).all(|v| v.abs() <= INIT_SCALE));
    }

    #[test]
    fn zero_cell_outputs_zero() {
        let mut store = ParameterStore::new();
        let cell = LstmCell::new(&mut store, "cell", 2, 3, &mut RngStream::new(1));
        zero_all(&mut store);
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::row(vec![0.7, -1.3]));
        let s = LstmState::zeros(&mut t, 1, 3);
        let out = cell.step(&mut t, x, s);
        assert_eq!(t.value(out.h).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "input width")]
    fn cell_rejects_wrong_width() {
        let mut store = ParameterStore::new();
        let cell = LstmCell::new(&mut store, "cell", 2, 3, &mut RngStream::new(1));
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::row(vec![0.7]));
        let s = LstmState::zeros(&mut t, 1, 3);
        cell.step(&mut t, x, s);
    }

    #[test]
    fn cell_is_deterministic() {
        let run = || {
            let mut store = ParameterStore::new();
            let cell = LstmCell::new(&mut store, "cell", 2, 3, &mut RngStream::new(5));
            let mut t = Tape::new(&store);
            let x = t.constant(Tensor::row(vec![0.1, 0.2]));
            let s = LstmState::zeros(&mut t, 1, 3);
            let s = cell.step(&mut t, x, s);
            let s = cell.step(&mut t, x, s);
            t.value(s.h).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cell_gradients() {
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(2);
        let cell = LstmCell::new(&mut store, "cell", 3, 4, &mut rng);
        let x0: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let report = grad_check(
            &mut store,
            |t| {
                let x = t.constant(Tensor::matrix(2, 3, x0.clone()));
                let s = LstmState::zeros(t, 2, 4);
                let s = cell.step(t, x, s);
                let s = cell.step(t, x, s);
                let sq = t.mul(s.h, s.h);
                t.sum(sq)
            },
            1e-5,
            30,
            &mut rng,
        );
        assert!(report.passes(1e-4), "{:?}", report.worst());
    }

    #[test]
    fn embedding_rows_and_sparse_gradient() {
        let mut store = ParameterStore::new();
        let emb = Embedding::new(&mut store, "emb", 5, 3, &mut RngStream::new(4));
        let mut t = Tape::new(&store);
        let a = emb.embed(&mut t, &[0]);
        let b = emb.embed(&mut t, &[0]);
        assert_eq!(t.value(a).data(), &store.get(emb.table).data()[..3]);
        assert_eq!(t.value(a).data(), t.value(b).data());
        let two = emb.embed(&mut t, &[2]);
        let sq = t.mul(two, two);
        let loss = t.sum(sq);
        let g = t.backward(loss);
        let grad = g.param(emb.table).unwrap();
        for (row, chunk) in grad.chunks(3).enumerate() {
            if row == 2 {
                assert!(chunk.iter().all(|&v| v != 0.0));
            } else {
                assert!(chunk.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    #[should_panic(expected = "outside vocabulary")]
    fn embedding_rejects_out_of_range() {
        let mut store = ParameterStore::new();
        let emb = Embedding::new(&mut store, "emb", 5, 3, &mut RngStream::new(4));
        let mut t = Tape::new(&store);
        emb.embed(&mut t, &[5]);
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut store = ParameterStore::new();
        let head = Linear::new(&mut store, "head", 4, 50, &mut RngStream::new(4));
        zero_all(&mut store);
        let mut t = Tape::new(&store);
        let h = t.constant(Tensor::row(vec![0.3, -0.1, 0.2, 0.9]));
        let logits = project_vocab(&head, &mut t, h);
        assert_eq!(t.shape(logits), (1, 50));
        let p = t.softmax(logits);
        assert!(t.value(p).data().iter().all(|&v| v == 1.0 / 50.0));
    }

    fn encoder_fixture(seed: u64) -> (ParameterStore, BiEncoder) {
        let mut store = ParameterStore::new();
        let enc = BiEncoder::new(&mut store, "enc", 2, 3, 5, &mut RngStream::new(seed));
        (store, enc)
    }

    #[test]
    fn encoder_shapes() {
        let (store, enc) = encoder_fixture(1);
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::row(vec![0.5, -0.5]));
        let out = enc.encode(&mut t, &[x]);
        assert_eq!(out.len(), 1);
        assert_eq!(t.shape(out.states[0]), (1, 6));
        assert_eq!(t.shape(out.init_state.h), (1, 5));
        assert_eq!(t.shape(out.init_state.c), (1, 5));
    }

    #[test]
    fn reversed_input_swaps_directions_when_cells_match() {
        let (mut store, enc) = encoder_fixture(3);
        let fwd = store.get(enc.lstm.forward.weight).clone();
        let fb = store.get(enc.lstm.forward.bias).clone();
        store.get_mut(enc.lstm.backward.weight).data_mut().copy_from_slice(fwd.data());
        store.get_mut(enc.lstm.backward.bias).data_mut().copy_from_slice(fb.data());
        let seq: Vec<Vec<f64>> = vec![vec![0.1, 0.4], vec![-0.3, 0.2], vec![0.9, -0.7]];
        let mut t = Tape::new(&store);
        let xs: Vec<Var> = seq.iter().map(|r| t.constant(Tensor::row(r.clone()))).collect();
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let a = enc.encode(&mut t, &xs);
        let b = enc.encode(&mut t, &rev);
        let n = seq.len();
        for i in 0..n {
            let ha = t.value(a.states[i]).data();
            let hb = t.value(b.states[n - 1 - i]).data();
            assert_eq!(&ha[..3], &hb[3..]);
            assert_eq!(&ha[3..], &hb[..3]);
        }
    }

    #[test]
    #[should_panic(expected = "empty sequence")]
    fn encoder_rejects_empty() {
        let (store, enc) = encoder_fixture(1);
        let mut t = Tape::new(&store);
        enc.encode(&mut t, &[]);
    }

    #[test]
    fn encoder_gradients() {
        let (mut store, enc) = encoder_fixture(9);
        let mut rng = RngStream::new(10);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect();
        let report = grad_check(
            &mut store,
            |t| {
                let vars: Vec<Var> = xs.iter().map(|r| t.constant(Tensor::row(r.clone()))).collect();
                let out = enc.encode(t, &vars);
                let a = t.sum(out.init_state.c);
                let last = t.sum(out.states[1]);
                let s = t.add(a, last);
                t.mul(s, s)
            },
            1e-5,
            40,
            &mut rng,
        );
        assert!(report.passes(1e-4), "{:?}", report.worst());
    }
}
