use kpeq_core::corpus::{build_input, generate_synthetic, load_corpus, save_corpus, SynthConfig};
use kpeq_core::grounding::{knowledge_loss, select_personas};
use kpeq_core::model::build_vocab;
use kpeq_core::retrieval::{retrieve_by_embedding, top_k, Document, KnowledgeIndex};
use kpeq_core::tensor::{dot, softmax, Matrix};
use proptest::prelude::*;

fn index_of(rows: &[Vec<f64>]) -> KnowledgeIndex {
    let docs = (0..rows.len())
        .map(|i| Document { id: i.to_string(), title: format!("t{i}"), text: String::new(), tokens: vec![] })
        .collect();
    KnowledgeIndex::from_parts(docs, Matrix::from_rows(rows)).unwrap()
}

fn embeddings(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 1..30)
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shift(v in prop::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn persona_selection_size_and_shift(raw in prop::collection::vec(-64i32..64, 0..8), c in -100i32..100, frac in 0.0f64..=1.0) {
        let scores: Vec<f64> = raw.iter().map(|&x| x as f64 / 8.0).collect();
        let level = (frac * scores.len() as f64).floor() as usize;
        let d = select_personas(&scores, level).unwrap();
        prop_assert_eq!(d.selected.len(), level);
        let shifted: Vec<f64> = scores.iter().map(|s| s + c as f64).collect();
        prop_assert_eq!(select_personas(&shifted, level).unwrap().selected, d.selected);
    }

    #[test]
    fn knowledge_loss_nonnegative_and_falls_with_gold_logit(v in prop::collection::vec(-10.0f64..10.0, 1..10), pick in 0usize..10, bump in 0.01f64..5.0) {
        let gt = pick % v.len();
        let l = knowledge_loss(&v, gt).unwrap();
        prop_assert!(l >= 0.0);
        let mut up = v.clone();
        up[gt] += bump;
        let l2 = knowledge_loss(&up, gt).unwrap();
        prop_assert!(l2 <= l);
        if v.len() > 1 {
            prop_assert!(l2 < l);
        }
    }

    #[test]
    fn dense_retrieval_is_exact_and_normalized(rows in embeddings(4), q in prop::collection::vec(-3.0f64..3.0, 4), kf in 0.0f64..1.0) {
        let index = index_of(&rows);
        let k = 1 + (kf * (rows.len() - 1) as f64) as usize;
        let r = retrieve_by_embedding(&index, &q, k).unwrap();
        let scores: Vec<f64> = rows.iter().map(|e| dot(e, &q)).collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        prop_assert_eq!(r.docs(), order[..k].to_vec());
        let probs = r.probs();
        prop_assert!(probs.iter().all(|&p| p >= 0.0));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for w in r.entries.windows(2) {
            prop_assert!(w[0].score >= w[1].score && w[0].prob >= w[1].prob);
        }
    }

    #[test]
    fn scaling_the_query_keeps_the_ranking(raw in prop::collection::vec(prop::collection::vec(-16i32..16, 3), 1..20), q in prop::collection::vec(-8i32..8, 3), c in 1u32..8) {
        let rows: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let q: Vec<f64> = q.iter().map(|&x| x as f64).collect();
        let scaled: Vec<f64> = q.iter().map(|x| x * c as f64).collect();
        let index = index_of(&rows);
        let a = retrieve_by_embedding(&index, &q, rows.len()).unwrap();
        let b = retrieve_by_embedding(&index, &scaled, rows.len()).unwrap();
        prop_assert_eq!(a.docs(), b.docs());
    }

    #[test]
    fn top_k_is_a_prefix_of_the_full_order(v in prop::collection::vec(-5.0f64..5.0, 1..20), k in 1usize..20) {
        let k = k.min(v.len());
        prop_assert_eq!(top_k(&v, k), top_k(&v, v.len())[..k].to_vec());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_corpus_reproducible_and_round_trips(seed in 0u64..1000) {
        let cfg = SynthConfig { episodes: 4, ..Default::default() };
        let a = generate_synthetic(&cfg, seed).unwrap();
        prop_assert_eq!(&a, &generate_synthetic(&cfg, seed).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_corpus(&path, &a).unwrap();
        prop_assert_eq!(&load_corpus(&path).unwrap(), &a);
        let vocab = build_vocab(&a, &[], 2000);
        for ep in &a {
            for round in 0..ep.num_rounds() {
                for window in 1..3 {
                    let x = build_input(ep, round, window, &vocab, 256).unwrap();
                    prop_assert_eq!(x, build_input(ep, round, window, &vocab, 256).unwrap());
                }
            }
        }
    }
}
