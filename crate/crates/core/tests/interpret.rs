use coopnet::interpret::{count_init, solve_relevance, Relevance, RelevanceOptions};
use coopnet::model::{embed, HyperParams, ModelParams};
use coopnet::synth::{sample_corpus, SynthSpec};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn counts_reproduce_a_feedback_free_embedding() {
    // With W3 = 0 a T = 1 forward pass and the residual use the same
    // word-stage vectors, so document counts are an exact zero up to
    // round-off (measured worst 2.8e-16).
    let hp = HyperParams::default();
    let mut p = ModelParams::init(&hp, 100, 0).unwrap();
    p.feedback.data.iter_mut().for_each(|x| *x = 0.0);
    let docs = sample_corpus(&SynthSpec::default_binary(), 30, 50, 3).unwrap().corpus.docs;
    let candidates: Vec<usize> = (0..100).collect();
    for d in &docs {
        let mu = embed(d, &p, &hp).unwrap();
        let rel = Relevance::new(&mu, &p, &hp, &candidates).unwrap();
        let r = norm(&rel.residual(&count_init(d, &candidates)));
        assert!(r < 1e-14, "{r}");
    }
}

#[test]
fn count_start_is_never_worse_than_its_own_objective() {
    let hp = HyperParams::default();
    let p = ModelParams::init(&hp, 100, 1).unwrap();
    let d = &sample_corpus(&SynthSpec::default_binary(), 1, 50, 5).unwrap().corpus.docs[0];
    let mu = embed(d, &p, &hp).unwrap();
    let candidates: Vec<usize> = (0..100).collect();
    let opts = RelevanceOptions {
        init: Some(count_init(d, &candidates)),
        steps: 200,
        ..RelevanceOptions::default()
    };
    let r = solve_relevance(&mu, &p, &hp, &candidates, &opts).unwrap();
    assert!(r.objective <= r.initial_objective);
    assert_eq!(r.trace.len(), 201);
}
