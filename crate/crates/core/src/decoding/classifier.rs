//! Middle-word classifier: a bidirectional LSTM over the input frames and a
//! linear head over the candidate middle words.

use crate::layers::{BiLstm, Linear};
use crate::params::ParameterStore;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct MiddleWordClassifier {
    pub lstm: BiLstm,
    pub head: Linear,
    pub classes: usize,
}

impl MiddleWordClassifier {
    pub fn new(store: &mut ParameterStore, name: &str, input_dim: usize, hidden: usize, classes: usize, rng: &mut RngStream) -> Self {
        assert!(classes >= 1, "contract violation: classifier needs at least one class");
        let lstm = BiLstm::new(store, &format!("{name}.lstm"), input_dim, hidden, rng);
        let head = Linear::new(store, &format!("{name}.head"), 2 * hidden, classes, rng);
        Self { lstm, head, classes }
    }

    /// Class logits, `B x K`.
    pub fn logits(&self, tape: &mut Tape<'_>, frames: &[Var]) -> Var {
        let summary = self.lstm.summary(tape, frames);
        self.head.forward(tape, summary)
    }

    /// Mean cross-entropy against `labels`.
    pub fn loss(&self, tape: &mut Tape<'_>, frames: &[Var], labels: &[usize]) -> Var {
        let logits = self.logits(tape, frames);
        tape.cross_entropy(logits, labels)
    }

    /// Row-wise class probabilities.
    pub fn probabilities(&self, tape: &mut Tape<'_>, frames: &[Var]) -> Vec<Vec<f64>> {
        let logits = self.logits(tape, frames);
        let p = tape.softmax(logits);
        let t = tape.value(p);
        (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
    }
}

/// Indices of the `k` largest entries, largest first; ties keep index order.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    order
}
