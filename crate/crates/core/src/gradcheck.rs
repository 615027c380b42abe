use crate::params::{ParamId, ParameterStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: Vec<Coordinate>,
    /// False when any loss evaluation was NaN or infinite.
    pub finite: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.finite && self.max_rel_error < tol
    }

    pub fn worst(&self) -> Option<&Coordinate> {
        self.coordinates.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(store: &ParameterStore, build: &mut F) -> f64
where
    F: FnMut(&mut Tape<'_>) -> Var,
{
    let mut tape = Tape::inference(store);
    let loss = build(&mut tape);
    tape.value(loss).item()
}

/// Compares backpropagated gradients with central differences.
///
/// The numeric derivative uses the fourth-order central stencil
/// `(8 (f(x+e) - f(x-e)) - (f(x+2e) - f(x-2e))) / 12e`.
///
/// `build` must construct a deterministic scalar loss on the given tape. Every
/// parameter gets at least one sampled coordinate when `coords` allows; the
/// remainder are drawn uniformly over all parameter values.
pub fn grad_check<F>(store: &mut ParameterStore, mut build: F, eps: f64, coords: usize, rng: &mut RngStream) -> GradCheckReport
where
    F: FnMut(&mut Tape<'_>) -> Var,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape);
        if !tape.value(loss).item().is_finite() {
            return GradCheckReport { max_rel_error: f64::INFINITY, coordinates: Vec::new(), finite: false };
        }
        tape.backward(loss).into_params()
    };

    let ids = store.ids();
    let mut picks: Vec<(ParamId, usize)> = Vec::with_capacity(coords);
    for &id in ids.iter().take(coords) {
        picks.push((id, rng.below(store.get(id).len() as u64) as usize));
    }
    let total = store.num_values() as u64;
    while picks.len() < coords {
        let mut flat = rng.below(total) as usize;
        for &id in &ids {
            let n = store.get(id).len();
            if flat < n {
                picks.push((id, flat));
                break;
            }
            flat -= n;
        }
    }

    let mut report = GradCheckReport { max_rel_error: 0.0, coordinates: Vec::with_capacity(coords), finite: true };
    for (id, index) in picks {
        let analytic = grads[id.0].as_ref().map_or(0.0, |g| g[index]);
        let original = store.get(id).data()[index];
        let mut at = |offset: f64| {
            store.get_mut(id).data_mut()[index] = original + offset;
            eval(store, &mut build)
        };
        let (p1, m1, p2, m2) = (at(eps), at(-eps), at(2.0 * eps), at(-2.0 * eps));
        store.get_mut(id).data_mut()[index] = original;
        if ![p1, m1, p2, m2].iter().all(|v| v.is_finite()) {
            report.finite = false;
            report.max_rel_error = f64::INFINITY;
            continue;
        }
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        let rel_error = relative_error(analytic, numeric);
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.coordinates.push(Coordinate { param: store.name(id).to_string(), index, analytic, numeric, rel_error });
    }
    report
}

/// Differentiable primitives covered by [`primitive_suite`].
pub const PRIMITIVES: [&str; 20] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "tanh",
    "sigmoid",
    "softmax",
    "log_softmax",
    "concat",
    "slice_cols",
    "row_dots",
    "weighted_sum",
    "mean_squared",
    "cross_entropy",
    "gather",
    "sum",
    "lstm_cell",
    "bilinear_attention",
];

/// Merged result of one primitive over several random shapes.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub shapes: usize,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    fn merge(name: &str, reports: Vec<GradCheckReport>) -> Self {
        let shapes = reports.len();
        let mut report = GradCheckReport { max_rel_error: 0.0, coordinates: Vec::new(), finite: true };
        for r in reports {
            report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
            report.finite &= r.finite;
            report.coordinates.extend(r.coordinates);
        }
        Self { name: name.to_string(), shapes, report }
    }
}

fn dim(rng: &mut RngStream, lo: i64, hi: i64) -> usize {
    rng.int_inclusive(lo, hi) as usize
}

fn random(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect())
}

/// Contracts a non-scalar output with a fixed random matrix so every
/// element receives a distinct upstream gradient.
fn project(tape: &mut Tape<'_>, out: Var, weights: &Tensor) -> Var {
    let (r, c) = tape.shape(out);
    if (r, c) == (1, 1) && weights.len() == 1 {
        return out;
    }
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

/// Checks one primitive on a fresh random shape.
fn check_primitive(name: &str, eps: f64, coords: usize, rng: &mut RngStream) -> GradCheckReport {
    let mut store = ParameterStore::new();
    let (m, n, k) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 5));
    let reg = |store: &mut ParameterStore, label: &str, rows: usize, cols: usize, rng: &mut RngStream| {
        store.register(label.to_string(), random(rng, rows, cols))
    };
    let scalar = Tensor::scalar(1.0);
    let mut pick = rng.fork(7);
    let (out_rows, out_cols, build): (usize, usize, Box<dyn Fn(&mut Tape<'_>) -> Var>) = match name {
        "matmul" => {
            let (a, b) = (reg(&mut store, "a", m, k, rng), reg(&mut store, "b", k, n, rng));
            (m, n, Box::new(move |t| {
                let (a, b) = (t.param(a), t.param(b));
                t.matmul(a, b)
            }))
        }
        "add" | "sub" | "mul" => {
            let (a, b) = (reg(&mut store, "a", m, n, rng), reg(&mut store, "b", m, n, rng));
            let op = name.to_string();
            (m, n, Box::new(move |t| {
                let (a, b) = (t.param(a), t.param(b));
                match op.as_str() {
                    "add" => t.add(a, b),
                    "sub" => t.sub(a, b),
                    _ => t.mul(a, b),
                }
            }))
        }
        "add_row" => {
            let (a, b) = (reg(&mut store, "a", m, n, rng), reg(&mut store, "row", 1, n, rng));
            (m, n, Box::new(move |t| {
                let (a, b) = (t.param(a), t.param(b));
                t.add_row(a, b)
            }))
        }
        "scale" => {
            let a = reg(&mut store, "a", m, n, rng);
            let s = rng.uniform(-2.0, 2.0);
            (m, n, Box::new(move |t| {
                let a = t.param(a);
                t.scale(a, s)
            }))
        }
        "tanh" | "sigmoid" | "softmax" | "log_softmax" => {
            let a = reg(&mut store, "a", m, n, rng);
            let op = name.to_string();
            (m, n, Box::new(move |t| {
                let a = t.param(a);
                match op.as_str() {
                    "tanh" => t.tanh(a),
                    "sigmoid" => t.sigmoid(a),
                    "softmax" => t.softmax(a),
                    _ => t.log_softmax(a),
                }
            }))
        }
        "concat" => {
            let parts = dim(rng, 1, 3);
            let widths: Vec<usize> = (0..parts).map(|_| dim(rng, 1, 4)).collect();
            let ids: Vec<ParamId> = widths.iter().enumerate().map(|(i, &w)| reg(&mut store, &format!("p{i}"), m, w, rng)).collect();
            (m, widths.iter().sum(), Box::new(move |t| {
                let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
                t.concat(&vars)
            }))
        }
        "slice_cols" => {
            let width = dim(rng, 2, 6);
            let a = reg(&mut store, "a", m, width, rng);
            let start = pick.below(width as u64) as usize;
            let len = 1 + pick.below((width - start) as u64) as usize;
            (m, len, Box::new(move |t| {
                let a = t.param(a);
                t.slice_cols(a, start, len)
            }))
        }
        "row_dots" | "weighted_sum" => {
            let count = dim(rng, 1, 4);
            let q = if name == "row_dots" { reg(&mut store, "q", m, k, rng) } else { reg(&mut store, "w", m, count, rng) };
            let keys: Vec<ParamId> = (0..count).map(|i| reg(&mut store, &format!("k{i}"), m, k, rng)).collect();
            let dots = name == "row_dots";
            (m, if dots { count } else { k }, Box::new(move |t| {
                let q = t.param(q);
                let keys: Vec<Var> = keys.iter().map(|&id| t.param(id)).collect();
                if dots {
                    t.row_dots(q, &keys)
                } else {
                    t.weighted_sum(q, &keys)
                }
            }))
        }
        "mean_squared" => {
            let (a, b) = (reg(&mut store, "pred", m, n, rng), reg(&mut store, "target", m, n, rng));
            (1, 1, Box::new(move |t| {
                let (a, b) = (t.param(a), t.param(b));
                t.mean_squared(a, b)
            }))
        }
        "cross_entropy" => {
            let classes = dim(rng, 2, 6);
            let a = reg(&mut store, "logits", m, classes, rng);
            let targets: Vec<usize> = (0..m).map(|_| pick.below(classes as u64) as usize).collect();
            (1, 1, Box::new(move |t| {
                let a = t.param(a);
                t.cross_entropy(a, &targets)
            }))
        }
        "gather" => {
            let rows = dim(rng, 1, 5);
            let a = reg(&mut store, "table", rows, n, rng);
            let ids: Vec<usize> = (0..m + 1).map(|_| pick.below(rows as u64) as usize).collect();
            (ids.len(), n, Box::new(move |t| {
                let a = t.param(a);
                t.gather(a, &ids)
            }))
        }
        "sum" => {
            let a = reg(&mut store, "a", m, n, rng);
            (1, 1, Box::new(move |t| {
                let a = t.param(a);
                t.sum(a)
            }))
        }
        "lstm_cell" => {
            let cell = crate::layers::LstmCell::new(&mut store, "cell", k, n, rng);
            for id in store.ids() {
                let scaled: Vec<f64> = store.get(id).data().iter().map(|v| v * 6.0).collect();
                store.get_mut(id).data_mut().copy_from_slice(&scaled);
            }
            let (x, h, c) = (reg(&mut store, "x", m, k, rng), reg(&mut store, "h", m, n, rng), reg(&mut store, "c", m, n, rng));
            (m, 2 * n, Box::new(move |t| {
                let (x, h, c) = (t.param(x), t.param(h), t.param(c));
                let s = cell.step(t, x, crate::layers::LstmState { h, c });
                t.concat(&[s.h, s.c])
            }))
        }
        "bilinear_attention" => {
            let count = dim(rng, 1, 4);
            let att = crate::attention::BilinearAttention::new(&mut store, "att", n, k, rng);
            let w = store.ids()[0];
            let scaled: Vec<f64> = store.get(w).data().iter().map(|v| v * 6.0).collect();
            store.get_mut(w).data_mut().copy_from_slice(&scaled);
            let q = reg(&mut store, "query", m, n, rng);
            let mem: Vec<ParamId> = (0..count).map(|i| reg(&mut store, &format!("m{i}"), m, k, rng)).collect();
            (m, k + count, Box::new(move |t| {
                let q = t.param(q);
                let mem: Vec<Var> = mem.iter().map(|&id| t.param(id)).collect();
                let r = att.attend_memory(t, q, &mem);
                t.concat(&[r.context, r.weights.unwrap()])
            }))
        }
        other => panic!("contract violation: unknown primitive {other:?}"),
    };
    let weights = if (out_rows, out_cols) == (1, 1) { scalar } else { random(rng, out_rows, out_cols) };
    grad_check(&mut store, |t| {
        let out = build(t);
        project(t, out, &weights)
    }, eps, coords, rng)
}

/// Gradient checks of every entry of [`PRIMITIVES`] on `shapes` random
/// shapes each, `coords` coordinates per shape.
pub fn primitive_suite(shapes: usize, coords: usize, seed: u64) -> Vec<SuiteEntry> {
    let mut rng = RngStream::new(seed);
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut r = rng.fork(i as u64);
            let reports = (0..shapes).map(|_| check_primitive(name, 1e-4, coords, &mut r)).collect();
            SuiteEntry::merge(name, reports)
        })
        .collect()
}
