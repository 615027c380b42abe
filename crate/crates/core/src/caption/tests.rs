use super::*;
use crate::gradcheck::grad_check;

fn tiny() -> ToyCaptionConfig {
    ToyCaptionConfig {
        train_count: 48,
        test_count: 12,
        lstm_size: 8,
        embed_size: 6,
        classifier_hidden: 6,
        frames: 3,
        ..Default::default()
    }
}

#[test]
fn sampling_schedule() {
    assert_eq!(scheduled_sampling_rate(0), 0.0);
    assert!((scheduled_sampling_rate(3) - 0.15).abs() < 1e-15);
    assert_eq!(scheduled_sampling_rate(5), 0.25);
    assert_eq!(scheduled_sampling_rate(10), 0.25);
    for e in 0..30 {
        assert!(scheduled_sampling_rate(e + 1) >= scheduled_sampling_rate(e));
        assert!(scheduled_sampling_rate(e) <= 0.25);
    }
}

#[test]
fn vocabulary_layout() {
    let config = ToyCaptionConfig::default();
    let v = Vocab::new(&config);
    assert_eq!(v.len(), 5 + 8 + 12 + 10);
    assert_eq!(v.word(STOP), "<stop>");
    assert_eq!(v.word(START), "<start>");
    assert_eq!(v.word(v.verb_token(1)), "performing");
    assert_eq!(v.verb_index(v.id("painting").unwrap()), Some(11));
    assert_eq!(v.verb_index(v.id("piano").unwrap()), None);
    assert_eq!(v.word(v.actor_token(0)), "man");
    assert_eq!(v.word(v.object_token(9)), "dish");
    assert!(v.encode(&["a".into(), "unicorn".into()]).is_err());
}

#[test]
fn scenes_follow_the_templates() {
    let config = ToyCaptionConfig { train_count: 300, test_count: 50, ..Default::default() };
    let vocab = Vocab::new(&config);
    let (train, test) = generate_toy_dataset(&config);
    assert_eq!((train.len(), test.len()), (300, 50));
    for s in train.iter().chain(&test) {
        assert!((2..=4).contains(&s.refs.len()));
        assert_eq!(s.features.len(), 8);
        assert!(s.features.iter().all(|f| f.len() == 30));
        assert!(compatible_actors(&config, s.verb).contains(&s.actor));
        assert!(compatible_objects(&config, s.verb).contains(&s.object));
        let distinct: BTreeSet<&Vec<String>> = s.refs.iter().collect();
        assert_eq!(distinct.len(), s.refs.len());
        for r in &s.refs {
            let ids = vocab.encode(r).unwrap();
            assert_eq!(ids.iter().filter(|&&t| t == vocab.verb_token(s.verb)).count(), 1);
            assert!(ids.contains(&vocab.actor_token(s.actor)) && ids.contains(&vocab.object_token(s.object)));
            assert!(!ids.contains(&STOP) && !ids.contains(&START));
        }
    }
}

#[test]
fn noiseless_verbs_are_linearly_separable() {
    let config = ToyCaptionConfig { feature_noise: 0.0, scene_noise: 0.0, train_count: 100, test_count: 0, ..Default::default() };
    let (train, _) = generate_toy_dataset(&config);
    let na = config.actors.len();
    for s in &train {
        for f in &s.features {
            // a one-hot weight row per verb scores 1 for the true verb and 0 otherwise
            let scores = &f[na..na + config.verbs.len()];
            assert_eq!(top_k(scores, 1)[0], s.verb);
            assert_eq!(scores.iter().sum::<f64>(), 1.0);
        }
    }
}

#[test]
fn same_seed_same_corpus_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny();
    let mut files = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let (train, _) = generate_toy_dataset(&config);
        let path = dir.path().join(name);
        crate::jsonl::write_jsonl(&path, &train).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let back: Vec<ToyScene> = crate::jsonl::read_jsonl(&dir.path().join("a.jsonl")).unwrap();
    assert_eq!(back, generate_toy_dataset(&config).0);
    let other = generate_toy_dataset(&ToyCaptionConfig { seed: 1, ..config }).0;
    assert_ne!(other, back);
}

#[test]
fn scene_json_fields() {
    let (train, _) = generate_toy_dataset(&tiny());
    let v: serde_json::Value = serde_json::to_value(&train[0]).unwrap();
    let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["actor", "verb", "object", "features", "refs"]));
}

#[test]
fn config_validation() {
    assert!(ToyCaptionConfig::default().validate().is_ok());
    let dup = ToyCaptionConfig { objects: words(&["piano", "man"]), ..Default::default() };
    assert!(dup.validate().is_err());
    let reserved = ToyCaptionConfig { actors: words(&["is"]), ..Default::default() };
    assert!(reserved.validate().is_err());
    assert!(ToyCaptionConfig { max_refs: 6, ..Default::default() }.validate().is_err());
    assert!(serde_json::from_str::<ToyCaptionConfig>(r#"{"beam": 3}"#).is_err());
}

#[test]
fn pairs_carry_the_scene_verb() {
    let config = tiny();
    let vocab = Vocab::new(&config);
    let (train, _) = generate_toy_dataset(&config);
    let pairs = caption_pairs(&train, &vocab).unwrap();
    assert_eq!(pairs.len(), train.iter().map(|s| s.refs.len()).sum::<usize>());
    for p in &pairs {
        assert_eq!(p.middle, vocab.verb_token(train[p.scene].verb));
    }
}

fn batch_of<'a>(model: &CaptionModel, pairs: &'a [CaptionPair], n: usize) -> Vec<&'a CaptionPair> {
    let key = model.bucket_key(&pairs[0]);
    pairs.iter().filter(|p| model.bucket_key(p) == key).take(n).collect()
}

#[test]
fn caption_loss_gradients() {
    let config = tiny();
    let vocab = Vocab::new(&config);
    let (train, _) = generate_toy_dataset(&config);
    let pairs = caption_pairs(&train, &vocab).unwrap();
    for kind in [CaptionModelKind::BASELINE, CaptionModelKind::MIDDLE_OUT, CaptionModelKind::ORACLE_BASELINE] {
        let (mut store, model) = init_caption_model(kind, &config, 3);
        for id in store.ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 6.0);
        }
        let batch = batch_of(&model, &pairs, 2);
        let report = grad_check(&mut store, |t| model.loss(t, &train, &batch, None), 1e-3, 40, &mut RngStream::new(8));
        assert!(report.passes(1e-4), "{}: {:?}", kind.name(), report.worst());
    }
}

#[test]
fn zero_rate_sampling_is_teacher_forcing() {
    let config = tiny();
    let vocab = Vocab::new(&config);
    let (train, _) = generate_toy_dataset(&config);
    let pairs = caption_pairs(&train, &vocab).unwrap();
    for kind in [CaptionModelKind::BASELINE, CaptionModelKind::MIDDLE_OUT] {
        let (store, model) = init_caption_model(kind, &config, 1);
        let batch = batch_of(&model, &pairs, 4);
        let mut tape = Tape::new(&store);
        let forced = model.loss(&mut tape, &train, &batch, None);
        let mut rng = RngStream::new(0);
        let zero = model.loss(&mut tape, &train, &batch, Some(Scheduled { rate: 0.0, rng: &mut rng }));
        assert_eq!(tape.value(forced).item(), tape.value(zero).item());
        let full = model.loss(&mut tape, &train, &batch, Some(Scheduled { rate: 1.0, rng: &mut rng }));
        assert!(tape.value(full).item().is_finite());
    }
}

#[test]
fn generation_contracts() {
    let config = tiny();
    let vocab = Vocab::new(&config);
    let (_, test) = generate_toy_dataset(&config);
    let (store, mo) = init_caption_model(CaptionModelKind::MIDDLE_OUT, &config, 2);
    for s in &test {
        for v in 0..config.verbs.len() {
            let w = vocab.verb_token(v);
            let hyps = mo.generate(&store, &s.features, &[w], 3);
            assert!(!hyps.is_empty() && hyps.len() <= 3);
            for h in hyps {
                let toks = h.tokens();
                assert_eq!(toks[h.middle_position().unwrap()], w);
            }
        }
        let seeds: Vec<usize> = (0..8).map(|v| vocab.verb_token(v)).collect();
        let hyps = mo.generate(&store, &s.features, &seeds, 8);
        let middles: BTreeSet<usize> = hyps.iter().map(|h| h.middle.unwrap()).collect();
        assert_eq!(middles.len(), 8);
    }
    let (store, ob) = init_caption_model(CaptionModelKind::ORACLE_BASELINE, &config, 2);
    let h = ob.generate(&store, &test[0].features, &[vocab.verb_token(0)], 4);
    assert!(h.iter().all(|h| h.middle.is_none()));
}

#[test]
#[should_panic(expected = "contract violation")]
fn control_rejects_non_verbs() {
    let config = tiny();
    let vocab = Vocab::new(&config);
    let (_, test) = generate_toy_dataset(&config);
    let (store, mo) = init_caption_model(CaptionModelKind::MIDDLE_OUT, &config, 2);
    run_control_eval(&mo, &store, &vocab, &test[0], &test[1], true, vocab.id("piano").unwrap(), 2);
}

#[test]
fn control_verdicts() {
    let config = tiny();
    let vocab = Vocab::new(&config);
    let (_, test) = generate_toy_dataset(&config);
    let (store, mo) = init_caption_model(CaptionModelKind::MIDDLE_OUT, &config, 2);
    let pairs = control_pairs(&test, 10, &mut RngStream::new(1));
    for &(a, b) in &pairs {
        let (x, y) = (&test[a], &test[b]);
        assert!(x.verb != y.verb && x.actor != y.actor && x.object != y.object);
    }
    let report = run_control_suite(&mo, &store, &vocab, &test, &pairs, 2);
    assert_eq!(report.contains_middle, 1.0);
    assert_eq!(report.pairs, 10);

    let a = &test[pairs[0].0];
    let b = &test[pairs[0].1];
    let cap = vec![vocab.actor_token(a.actor), vocab.verb_token(a.verb), vocab.object_token(b.object)];
    assert_eq!(content_matches(&cap, a, &vocab), 1);
    assert_eq!(content_matches(&cap, b, &vocab), 1);
}

#[test]
fn sweep_endpoints_match_direct_evaluation() {
    let config = tiny();
    let vocab = Vocab::new(&config);
    let (_, test) = generate_toy_dataset(&config);
    let (store, mo) = init_caption_model(CaptionModelKind::MIDDLE_OUT, &config, 4);
    let predicted: Vec<usize> = test.iter().enumerate().map(|(i, s)| if i % 3 == 0 { (s.verb + 1) % 12 } else { s.verb }).collect();
    let levels = [AccuracyLevel::Raw, AccuracyLevel::Target(0.5), AccuracyLevel::Target(0.75), AccuracyLevel::Target(1.0)];
    let rows = run_oracle_sweep(&mo, &store, &test, &vocab, &predicted, &levels, 2, &mut RngStream::new(3)).unwrap();
    assert_eq!(rows.len(), 4);
    let oracle = eval_caption(&mo, &store, &test, &vocab, &oracle_words(&test, &vocab), 2).unwrap();
    assert_eq!(rows[3].accuracy, 1.0);
    assert_eq!(rows[3].scores, oracle);
    let words: Vec<Vec<usize>> = predicted.iter().map(|&v| vec![vocab.verb_token(v)]).collect();
    assert_eq!(rows[0].scores, eval_caption(&mo, &store, &test, &vocab, &words, 2).unwrap());
    assert!((rows[0].accuracy - 8.0 / 12.0).abs() < 1e-12);
    assert_eq!(rows[0].label, "raw");
}

#[test]
fn perfect_captions_score_one() {
    let config = tiny();
    let vocab = Vocab::new(&config);
    let (_, test) = generate_toy_dataset(&config);
    let refs = reference_ids(&test, &vocab).unwrap();
    let caps: Vec<Vec<usize>> = refs.iter().map(|r| r[0].clone()).collect();
    let s = score_captions(&caps, &refs);
    assert_eq!((s.bleu4, s.rouge_l), (1.0, 1.0));
}

#[test]
fn diversity_of_seeded_beams() {
    let config = tiny();
    let vocab = Vocab::new(&config);
    let (train, test) = generate_toy_dataset(&config);
    let clf = train_classifier(&ToyCaptionConfig { classifier_epochs: 1, ..config.clone() }, &train).unwrap();
    let (store, mo) = init_caption_model(CaptionModelKind::MIDDLE_OUT, &config, 4);
    let r = run_diversity_eval(&mo, &store, &test, &vocab, Some(&clf), 8);
    assert_eq!(r.distinct_verbs, 8.0);
    assert!((0.0..=1.0).contains(&r.self_bleu));
    let (store, base) = init_caption_model(CaptionModelKind::BASELINE, &config, 4);
    let r = run_diversity_eval(&base, &store, &test, &vocab, None, 8);
    assert!((0.0..=1.0).contains(&r.self_bleu));
}

#[test]
fn short_training_reduces_loss() {
    let config = ToyCaptionConfig { lr: 1e-2, epochs: 4, batch_size: 16, classifier_epochs: 8, classifier_lr: 1e-2, ..tiny() };
    let (train, test) = generate_toy_dataset(&config);
    for kind in [CaptionModelKind::BASELINE, CaptionModelKind::MIDDLE_OUT] {
        let mut steps = 0;
        let t = train_caption(kind, &config, &train, |_, _, _| steps += 1).unwrap();
        assert_eq!(t.epoch_losses.len(), 4);
        assert!(t.epoch_losses[3] < t.epoch_losses[0], "{}: {:?}", kind.name(), t.epoch_losses);
        let again = train_caption(kind, &config, &train, |_, _, _| {}).unwrap();
        assert_eq!(again.epoch_losses, t.epoch_losses);
        assert!(steps > 0);
    }
    let clf = train_classifier(&config, &train).unwrap();
    assert!(clf.epoch_losses.last() < clf.epoch_losses.first());
    assert!(clf.accuracy(&test) > 1.0 / 12.0);
}
