use midout_web::{caption_json, denoise_json, score_json, verbs_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn score_matches_hand_counts() {
    let v = parse(&score_json("a b c d e", "a b c d f").unwrap());
    assert!((v["bleu4"].as_f64().unwrap() - 0.2f64.powf(0.25)).abs() < 1e-12);
    assert!((v["rouge_l"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert!(v["self_bleu"].is_null());
    let v = parse(&score_json("a dog is running", "a dog is running\na dog is running").unwrap());
    assert_eq!(v["bleu4"].as_f64().unwrap(), 1.0);
    assert_eq!(v["self_bleu"].as_f64().unwrap(), 1.0);
    assert!(score_json("", "x").is_err());
    assert!(score_json("x", "\n").is_err());
}

#[test]
fn denoise_returns_both_models() {
    let v = parse(&denoise_json(1, 30, 3).unwrap());
    let clean = v["clean"].as_array().unwrap().len();
    assert_eq!(v["noisy"].as_array().unwrap().len(), clean);
    for family in ["baseline", "middleout"] {
        assert_eq!(v[family]["prediction"].as_array().unwrap().len(), clean);
        assert!(v[family]["test_mse"].as_f64().unwrap().is_finite());
    }
    assert!(denoise_json(1, 1, 999).is_err());
}

#[test]
fn caption_keeps_the_chosen_verb() {
    let verbs: Vec<String> = serde_json::from_str(&verbs_json()).unwrap();
    assert!(verbs.iter().any(|v| v == "performing"));
    let v = parse(&caption_json(0, 0, Some(1), "performing", 3).unwrap());
    let caps = v["captions"].as_array().unwrap();
    assert_eq!(caps.len(), 3);
    for c in caps {
        assert!(c["text"].as_str().unwrap().split(' ').any(|w| w == "performing"));
    }
    assert!(v["second"].is_array());
    assert!(caption_json(0, 0, None, "juggling", 2).is_err());
    assert!(caption_json(0, 999, None, "performing", 2).is_err());
}
