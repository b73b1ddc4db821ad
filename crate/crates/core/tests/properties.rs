use std::path::Path;

use proptest::prelude::*;
use vidkg::config::AppConfig;
use vidkg::ekg::EventId;
use vidkg::entity_linker::KPolicy;
use vidkg::generation::{score_answers_with, CandidateAnswer};
use vidkg::index_store::VectorCollection;
use vidkg::prompts::Scenario;
use vidkg::retrieval::{borda_scores, View, ViewResult};

fn candidates(answers: &[u8]) -> Vec<CandidateAnswer> {
    answers
        .iter()
        .enumerate()
        .map(|(i, a)| CandidateAnswer {
            answer: ((b'A' + a) as char).to_string(),
            trace: format!("trace {} {}", a, i % 3),
            sample_index: i,
        })
        .collect()
}

/// Symmetric and order independent, so scores must not depend on sample order.
fn pair(a: &str, b: &str) -> Result<f64, ()> {
    let h = |s: &str| s.bytes().map(u64::from).sum::<u64>();
    Ok(((h(a) * h(b)) % 101) as f64 / 100.0)
}

fn view_strategy() -> impl Strategy<Value = ViewResult> {
    prop::collection::btree_map(0u32..40, -0.3f64..1.0, 0..20)
        .prop_map(|m| m.into_iter().map(|(i, s)| (EventId::new(format!("e{i:02}")), s)).collect())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let n = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n(a) * n(b) == 0.0 {
        0.0
    } else {
        (dot / (n(a) * n(b))).clamp(-1.0, 1.0)
    }
}

proptest! {
    #[test]
    fn scores_ignore_sample_order(answers in prop::collection::vec(0u8..4, 1..12), lambda in 0.0f64..=1.0, rot in 0usize..12) {
        let c = candidates(&answers);
        let mut shuffled = c.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        prop_assert_eq!(score_answers_with(&c, lambda, pair).unwrap(), score_answers_with(&shuffled, lambda, pair).unwrap());
    }

    #[test]
    fn final_score_grows_with_support(n in 2usize..16, lambda in 0.01f64..=1.0, coherence in 0.0f64..=1.0) {
        let flat = |_: &str, _: &str| Ok::<_, ()>(coherence);
        let mut previous = f64::NEG_INFINITY;
        for k in 2..=n {
            let answers: Vec<u8> = (0..n).map(|i| if i < k { 0 } else { 1 }).collect();
            let scores = score_answers_with(&candidates(&answers), lambda, flat).unwrap();
            let a = scores.iter().find(|s| s.answer == "A").unwrap();
            prop_assert!((a.final_score - (lambda * k as f64 / n as f64 + (1.0 - lambda) * coherence)).abs() < 1e-12);
            prop_assert!(a.final_score > previous);
            previous = a.final_score;
        }
    }

    #[test]
    fn agreement_is_a_distribution(answers in prop::collection::vec(0u8..6, 1..20)) {
        let scores = score_answers_with(&candidates(&answers), 0.5, pair).unwrap();
        let total: f64 = scores.iter().map(|s| s.agreement).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert_eq!(scores.iter().map(|s| s.k).sum::<usize>(), answers.len());
    }

    #[test]
    fn borda_ignores_view_scale(event in view_strategy(), entity in view_strategy(), vision in view_strategy(), c in 0.001f64..1000.0) {
        let views = vec![(View::Event, event.clone()), (View::Entity, entity.clone()), (View::Vision, vision.clone())];
        let scaled = vec![
            (View::Event, event.iter().map(|(e, s)| (e.clone(), s * c)).collect()),
            (View::Entity, entity),
            (View::Vision, vision),
        ];
        let (a, b) = (borda_scores(&views), borda_scores(&scaled));
        prop_assert_eq!(a.scores.len(), b.scores.len());
        for (e, s) in &a.scores {
            prop_assert!((b.scores[e] - s).abs() < 1e-9);
        }
        let active = views.iter().filter(|(_, v)| v.iter().any(|(_, s)| *s > 0.0)).count();
        let total: f64 = a.scores.values().sum();
        prop_assert!((total - active as f64).abs() < 1e-9);
    }

    #[test]
    fn top_k_matches_linear_scan(
        rows in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 1..80),
        query in prop::collection::vec(-1.0f32..1.0, 6),
        k in 1usize..20,
    ) {
        let mut coll = VectorCollection::new(6);
        for (i, r) in rows.iter().enumerate() {
            coll.push(format!("v{i:03}"), format!("v{i:03}"), r).unwrap();
        }
        let mut scan: Vec<(f64, String)> = rows.iter().enumerate().map(|(i, r)| (cosine(&query, r), format!("v{i:03}"))).collect();
        scan.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let got = coll.top_k(&query, k).unwrap();
        prop_assert_eq!(got.len(), k.min(rows.len()));
        for (h, (s, id)) in got.iter().zip(&scan) {
            prop_assert_eq!(&h.id, id);
            prop_assert!((h.similarity - s).abs() < 1e-12);
        }
    }

    #[test]
    fn config_survives_toml_round_trip(
        tau_in in 0.51f64..0.99,
        span in 1usize..128,
        fixed in prop::option::of(1usize..50),
        depth in 1usize..6,
        top_k in 1usize..64,
        n_samples in 1usize..16,
        lambda in 0.0f64..=1.0,
        scenario in prop::sample::select(vec![Scenario::General, Scenario::Wildlife, Scenario::Traffic]),
    ) {
        let mut c = AppConfig::default();
        c.chunking.tau_in = tau_in;
        c.chunking.max_merge_span = span;
        if let Some(k) = fixed {
            c.clustering.k_policy = KPolicy::Fixed(k);
        }
        c.search.max_depth = depth;
        c.retrieval.top_k = top_k;
        c.generation.n_samples = n_samples;
        c.generation.lambda = lambda;
        c.scenario = scenario;
        let back = AppConfig::parse(&c.to_toml(), Path::new(".")).unwrap();
        prop_assert_eq!(back, c);
    }
}
