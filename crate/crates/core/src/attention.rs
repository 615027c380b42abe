//! Bilinear ("general") attention and the two decoder self-attention flavors.

use crate::params::{ParamId, ParameterStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `score(q, k) = q W k`, with `W` of shape `query_dim x key_dim`.
#[derive(Debug, Clone)]
pub struct BilinearAttention {
    pub query_dim: usize,
    pub key_dim: usize,
    pub weight: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionResult {
    /// `B x m` attention weights; `None` when the memory was empty.
    pub weights: Option<Var>,
    /// `B x key_dim` weighted sum of the values.
    pub context: Var,
}

impl BilinearAttention {
    pub fn new(store: &mut ParameterStore, name: &str, query_dim: usize, key_dim: usize, rng: &mut RngStream) -> Self {
        let weight = store.uniform(format!("{name}.weight"), query_dim, key_dim, crate::layers::INIT_SCALE, rng);
        Self { query_dim, key_dim, weight }
    }

    fn project(&self, tape: &mut Tape<'_>, query: Var) -> Var {
        let qd = tape.shape(query).1;
        assert_eq!(qd, self.query_dim, "contract violation: query width {qd}, attention expects {}", self.query_dim);
        let w = tape.param(self.weight);
        tape.matmul(query, w)
    }

    /// Bilinear score per batch row, `B x 1`.
    pub fn score(&self, tape: &mut Tape<'_>, query: Var, key: Var) -> Var {
        let kd = tape.shape(key).1;
        assert_eq!(kd, self.key_dim, "contract violation: key width {kd}, attention expects {}", self.key_dim);
        let qw = self.project(tape, query);
        tape.row_dots(qw, &[key])
    }

    /// Softmax-weighted sum of `values` under scores against `keys`.
    ///
    /// An empty key set yields empty weights and a zero context.
    pub fn attend(&self, tape: &mut Tape<'_>, query: Var, keys: &[Var], values: &[Var]) -> AttentionResult {
        assert_eq!(
            keys.len(),
            values.len(),
            "contract violation: {} keys but {} values",
            keys.len(),
            values.len()
        );
        if keys.is_empty() {
            let rows = tape.shape(query).0;
            let context = tape.constant(Tensor::matrix(rows, self.key_dim, vec![0.0; rows * self.key_dim]));
            return AttentionResult { weights: None, context };
        }
        let qw = self.project(tape, query);
        let scores = tape.row_dots(qw, keys);
        let weights = tape.softmax(scores);
        let context = tape.weighted_sum(weights, values);
        AttentionResult { weights: Some(weights), context }
    }

    /// Attention where keys double as values.
    pub fn attend_memory(&self, tape: &mut Tape<'_>, query: Var, memory: &[Var]) -> AttentionResult {
        self.attend(tape, query, memory, memory)
    }
}

/// `d_t`: attention over the embeddings emitted so far (zero when none).
pub fn self_attend_outputs(att: &BilinearAttention, tape: &mut Tape<'_>, query: Var, memory: &[Var]) -> Var {
    att.attend_memory(tape, query, memory).context
}

/// `h~_t`: attention over past decoder hidden states (zero when none).
pub fn self_attend_hidden(att: &BilinearAttention, tape: &mut Tape<'_>, query: Var, memory: &[Var]) -> Var {
    att.attend_memory(tape, query, memory).context
}
