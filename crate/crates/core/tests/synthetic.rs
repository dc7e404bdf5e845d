use sap_core::metrics::evaluate;
use sap_core::pruning::{prune_document, Method, PruneConfig};
use sap_core::synth::{gen_corpus, SynthConfig, SynthCorpus};
use sap_core::Tensor;

fn mean_osr(c: &SynthCorpus, method: Method) -> f64 {
    let cfg = PruneConfig::with_method(method, 0.1);
    let full: Vec<(String, Tensor)> = c.documents.iter().map(|d| (d.doc_id.clone(), d.embeddings.clone())).collect();
    let pruned: Vec<(String, Tensor)> = c
        .documents
        .iter()
        .map(|d| {
            let r = prune_document(d, &cfg).unwrap();
            (d.doc_id.clone(), r.pruned_embeddings(&d.embeddings).unwrap())
        })
        .collect();
    evaluate("synth", &full, &pruned, &c.queries, &c.qrels, 5, Some(cfg))
        .unwrap()
        .aggregate
        .mean_osr
}

/// One-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2).
fn sign_test_p(wins: u32, n: u32) -> f64 {
    let choose = |n: u32, k: u32| (0..k).fold(1.0f64, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

#[test]
fn sign_test_helper() {
    assert_eq!(sign_test_p(0, 4), 1.0);
    assert_eq!(sign_test_p(4, 4), 1.0 / 16.0);
    assert!((sign_test_p(15, 20) - 0.020695).abs() < 1e-6);
}

#[test]
fn sap_separates_from_random_across_seeds() {
    let mut diffs = Vec::new();
    for seed in 0..20 {
        let c = gen_corpus(&SynthConfig {
            num_docs: 40,
            num_queries: 20,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        diffs.push(mean_osr(&c, Method::SapMean) - mean_osr(&c, Method::Random));
    }
    let wins = diffs.iter().filter(|&&d| d > 0.0).count() as u32;
    let p = sign_test_p(wins, diffs.len() as u32);
    assert!(p < 0.01, "sap_mean beat random in {wins}/20 seeds, p = {p:.3e}: {diffs:?}");
}
