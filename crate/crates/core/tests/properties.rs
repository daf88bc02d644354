mod support;

use distractor_core::corpus::{normalize_text, parse_corpus, serialize_corpus, split_corpus, DistractorEntry, Mcq, SelectionDistribution};
use distractor_core::generation::parse::parse_distractor_output;
use distractor_core::generation::DistractorCandidate;
use distractor_core::metrics::match_distractors;
use distractor_core::promptkit::{PromptContentMode, PromptKit};
use distractor_core::retrieval::{cosine_similarity, EmbeddingVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mcq_strategy() -> impl Strategy<Value = Mcq> {
    (
        "[a-z0-9]{1,8}",
        "[A-Za-z0-9 ?/+]{1,40}",
        prop::collection::vec("[a-z0-9/.]{1,6}", 4),
        prop::option::of("[A-Za-z ]{1,30}"),
        prop::option::of((1u32..100, 1u32..100, 1u32..100, 1u32..100)),
    )
        .prop_filter_map("distinct options", |(id, stem, opts, expl, sel)| {
            let norm: std::collections::HashSet<String> = opts.iter().map(|o| normalize_text(o)).collect();
            if norm.len() != 4 || stem.trim().is_empty() {
                return None;
            }
            let selection = sel.map(|(a, b, c, d)| {
                let total = f64::from(a + b + c + d);
                SelectionDistribution {
                    key: f64::from(a) / total,
                    d1: f64::from(b) / total,
                    d2: f64::from(c) / total,
                    d3: f64::from(d) / total,
                }
            });
            Some(Mcq {
                id,
                stem,
                key: opts[0].clone(),
                key_explanation: expl,
                distractors: opts[1..]
                    .iter()
                    .map(|t| DistractorEntry {
                        text: t.clone(),
                        feedback: None,
                    })
                    .collect(),
                topics: vec!["A".into(), "B".into(), "C".into()],
                selection,
                n_responses: None,
            })
        })
}

fn unique_ids(mut v: Vec<Mcq>) -> Vec<Mcq> {
    for (i, m) in v.iter_mut().enumerate() {
        m.id = format!("{}-{i}", m.id);
    }
    v
}

fn candidates(g: &[Option<String>; 3]) -> Vec<DistractorCandidate> {
    g.iter()
        .map(|t| t.clone().map_or_else(DistractorCandidate::null, DistractorCandidate::text))
        .collect()
}

proptest! {
    #[test]
    fn normalize_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize_text(&s);
        prop_assert_eq!(normalize_text(&once), once);
    }

    #[test]
    fn corpus_round_trips(v in prop::collection::vec(mcq_strategy(), 1..8)) {
        let v = unique_ids(v);
        prop_assert_eq!(parse_corpus(&serialize_corpus(&v)).unwrap(), v);
    }

    #[test]
    fn split_partitions(v in prop::collection::vec(mcq_strategy(), 1..30), ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let v = unique_ids(v);
        let s = split_corpus(&v, ratio, seed).unwrap();
        prop_assert_eq!(s.train.len() + s.test.len(), v.len());
        prop_assert_eq!(s.train.len(), (ratio * v.len() as f64).round() as usize);
        let mut ids: Vec<&str> = s.train.iter().chain(&s.test).map(|m| m.id.as_str()).collect();
        ids.sort();
        let mut want: Vec<&str> = v.iter().map(|m| m.id.as_str()).collect();
        want.sort();
        prop_assert_eq!(ids, want);
        prop_assert_eq!(split_corpus(&v, ratio, seed).unwrap(), s);
    }

    #[test]
    fn cosine_symmetric_and_scale_invariant(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let va = EmbeddingVector::new(a.clone()).unwrap();
        let vb = EmbeddingVector::new(b).unwrap();
        let ab = cosine_similarity(&va, &vb).unwrap();
        prop_assert_eq!(ab, cosine_similarity(&vb, &va).unwrap());
        let scaled = EmbeddingVector::new(a.iter().map(|x| x * scale).collect()).unwrap();
        prop_assert!((cosine_similarity(&scaled, &vb).unwrap() - ab).abs() < 1e-9);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn metrics_match_oracle_and_lattice(seed in any::<u64>(), perm in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (human, generated) = support::random_triple(&mut rng);
        let a = match_distractors(&human, &candidates(&generated));
        let m = support::oracle_matches(&human, &generated);
        prop_assert_eq!(a.matched_pairs.len(), m);
        prop_assert_eq!(a.proportional, m as f64 / 3.0);
        prop_assert!(a.exact <= a.partial);
        prop_assert!(f64::from(a.exact) <= a.proportional && a.proportional <= f64::from(a.partial));
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let p = PERMS[perm];
        let permuted_gen: [Option<String>; 3] = std::array::from_fn(|i| generated[p[i]].clone());
        let permuted_human: [String; 3] = std::array::from_fn(|i| human[p[i]].clone());
        let b = match_distractors(&permuted_human, &candidates(&permuted_gen));
        prop_assert_eq!(b.proportional, a.proportional);
    }

    #[test]
    fn parser_inverts_rendered_blocks(seed in any::<u64>(), perturb in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texts: [String; 3] = std::array::from_fn(|_| support::random_distractor_text(&mut rng));
        let feedback: [Option<String>; 3] = std::array::from_fn(|_| support::random_feedback(&mut rng));
        let entries: [(Option<&str>, &str); 3] = std::array::from_fn(|i| (feedback[i].as_deref(), texts[i].as_str()));
        let mut block = PromptKit::builtin().render_distractor_block(&entries, PromptContentMode::All).unwrap();
        if perturb {
            block = support::perturb_labels(&block, &mut rng);
        }
        let parsed = parse_distractor_output(&block);
        for i in 0..3 {
            prop_assert_eq!(parsed.candidates[i].text.as_deref(), Some(texts[i].as_str()), "{}", block);
            prop_assert_eq!(parsed.candidates[i].feedback.as_deref(), feedback[i].as_deref(), "{}", block);
        }
    }
}
