//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every exported function returns a JSON string. The `*_json` functions hold
//! the logic and run natively as well.

use std::cell::RefCell;

use midout::caption::{self, CaptionModelKind, ToyCaptionConfig, ToyScene, TrainedCaptioner, Vocab};
use midout::decoding::Family;
use midout::denoise::{self, DenoiseConfig, RegressionVariant};
use midout::metrics::{self, BleuMode};
use midout::tape::Tape;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Small enough to train in a browser tab within a few seconds.
pub fn demo_denoise_config(seed: u64, steps: usize) -> DenoiseConfig {
    DenoiseConfig { train_count: 200, test_count: 20, lstm_size: 16, lr: 3e-3, steps, batch_size: 16, seed, ..DenoiseConfig::default() }
}

pub fn demo_caption_config(seed: u64) -> ToyCaptionConfig {
    ToyCaptionConfig {
        train_count: 400,
        test_count: 40,
        lstm_size: 32,
        embed_size: 16,
        lr: 3e-3,
        epochs: 4,
        batch_size: 16,
        beam_size: 4,
        seed,
        ..ToyCaptionConfig::default()
    }
}

/// Trains a baseline and a middle-out de-noiser on the same data and
/// returns both reconstructions of test sample `index`.
pub fn denoise_json(seed: u64, steps: usize, index: usize) -> Result<String, String> {
    let config = demo_denoise_config(seed, steps);
    let (train, test) = denoise::generate_denoise_dataset(&config);
    let sample = test.get(index).ok_or_else(|| format!("index {index} is past the {} test samples", test.len()))?;
    let mut out = json!({"mu": sample.mu, "noisy": sample.x, "clean": sample.y});
    for family in [Family::Baseline, Family::MiddleOut] {
        let t = denoise::train_denoise(RegressionVariant::standard(family), &config, &train, |_, _| {}).map_err(|e| e.to_string())?;
        let mut tape = Tape::inference(&t.store);
        let pred = t.model.predict(&mut tape, &[sample.x.as_slice()]).remove(0);
        let m = denoise::eval_denoise(&t.model, &t.store, &test);
        out[family.as_str()] = json!({
            "prediction": pred,
            "symmetric_mse": metrics::symmetric_mse(&pred),
            "test_mse": m.mse,
        });
    }
    Ok(out.to_string())
}

struct CaptionDemo {
    seed: u64,
    vocab: Vocab,
    test: Vec<ToyScene>,
    trained: TrainedCaptioner,
}

thread_local! {
    static CAPTIONER: RefCell<Option<CaptionDemo>> = const { RefCell::new(None) };
}

/// Captions test scene `first`, or the concatenation of `first` and `second`
/// when `second` is given, seeding the middle with `middle_word`. The model is
/// trained on first use for each seed.
pub fn caption_json(seed: u64, first: usize, second: Option<usize>, middle_word: &str, beam: usize) -> Result<String, String> {
    CAPTIONER.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.as_ref().map(|d| d.seed) != Some(seed) {
            let config = demo_caption_config(seed);
            let (train, test) = caption::generate_toy_dataset(&config);
            let trained = caption::train_caption(CaptionModelKind::MIDDLE_OUT, &config, &train, |_, _, _| {}).map_err(|e| e.to_string())?;
            *slot = Some(CaptionDemo { seed, vocab: Vocab::new(&config), test, trained });
        }
        let d = slot.as_ref().expect("just filled");
        let scene = |i: usize| d.test.get(i).ok_or_else(|| format!("scene {i} is past the {} test scenes", d.test.len()));
        let a = scene(first)?;
        let features = match second {
            Some(j) => caption::concat_features(a, scene(j)?),
            None => a.features.clone(),
        };
        let w = middle_word.trim();
        let seeds = vec![d.vocab.id(w).ok_or_else(|| format!("{w:?} is not in the vocabulary"))?];
        let beam = beam.max(1);
        let hyps = d.trained.model.generate(&d.trained.store, &features, &seeds, beam);
        let describe = |s: &ToyScene| s.refs.iter().map(|r| r.join(" ")).collect::<Vec<_>>();
        Ok(json!({
            "first": describe(a),
            "second": second.map(|j| describe(&d.test[j])),
            "captions": hyps.iter().map(|h| json!({"text": d.vocab.render(&h.tokens()), "score": h.score})).collect::<Vec<_>>(),
        })
        .to_string())
    })
}

/// Verb inventory of the demo captioner, for the middle-word picker.
pub fn verbs_json() -> String {
    json!(demo_caption_config(0).verbs).to_string()
}

/// Sentence BLEU-4 and ROUGE-L of `candidate` against newline-separated references,
/// plus the Self-BLEU of the references.
pub fn score_json(candidate: &str, references: &str) -> Result<String, String> {
    let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let cand = words(candidate);
    let refs: Vec<Vec<String>> = references.lines().map(words).filter(|r| !r.is_empty()).collect();
    if cand.is_empty() || refs.is_empty() {
        return Err("need a candidate and at least one reference".into());
    }
    Ok(json!({
        "bleu4": metrics::bleu4(&cand, &refs, BleuMode::SentenceSmoothed),
        "rouge_l": metrics::rouge_l(&cand, &refs),
        "self_bleu": if refs.len() > 1 { Some(metrics::self_bleu(&refs)) } else { None },
    })
    .to_string())
}

#[wasm_bindgen]
pub fn denoise(seed: u32, steps: u32, index: u32) -> Result<String, JsValue> {
    denoise_json(seed as u64, steps as usize, index as usize).map_err(|e| JsValue::from_str(&e))
}

/// `second` below zero means a single scene.
#[wasm_bindgen]
pub fn caption(seed: u32, first: u32, second: i32, middle_word: &str, beam: u32) -> Result<String, JsValue> {
    let second = usize::try_from(second).ok();
    caption_json(seed as u64, first as usize, second, middle_word, beam as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn score(candidate: &str, references: &str) -> Result<String, JsValue> {
    score_json(candidate, references).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn verbs() -> String {
    verbs_json()
}
