//! Discovery algorithms checked against independent oracles: a step-by-step
//! greedy replay, exact interchange patching, and the planted gate network.

use std::collections::{BTreeMap, BTreeSet};

use circuitlab::circmetrics::spearman_rho;
use circuitlab::circuitfind::{
    acdc, answer_specs, classify_gates, clean_batch, corrupted_batch, eap, exact_patch_scores,
    threshold_circuit, Circuit, DiscoveryConfig, EapOptions, Provenance, Regime,
};
use circuitlab::fixtures::{affine_model, tiny_fixture_model, GateNetwork};
use circuitlab::posttrain::{pretrain, PretrainConfig};
use circuitlab::taskgen::{PatchedPair, TaskSpec, VocabRegion};
use circuitlab::tinyformer::{
    output_metric, Edge, MetricKind, ModelConfig, PatchPlan, TinyTransformer,
};

fn induction_pairs(n: usize, seed: u64) -> Vec<PatchedPair> {
    TaskSpec::Induction { region: VocabRegion::new(2, 8), seq_len: 6, seed: 0 }
        .generate(n, seed)
        .unwrap()
}

/// Independent replay of the greedy search: its own KL, its own plan
/// bookkeeping, its own iteration over the graph.
fn greedy_replay_oracle(
    model: &TinyTransformer,
    data: &[PatchedPair],
    tau: f64,
) -> BTreeMap<Edge, f64> {
    let clean = clean_batch(data).unwrap();
    let corrupted = corrupted_batch(data).unwrap();
    let answers = answer_specs(data);
    let reference = model.forward(&clean, None).unwrap().logits;
    let donor = model.forward(&corrupted, None).unwrap().cache;

    let kl_softmax = |p: &[f64], q: &[f64]| -> f64 {
        let logsumexp = |row: &[f64]| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        };
        let (lp, lq) = (logsumexp(p), logsumexp(q));
        p.iter()
            .zip(q)
            .map(|(&a, &b)| ((a - lp).exp()) * ((a - lp) - (b - lq)))
            .sum()
    };
    let divergence = |removed: &BTreeSet<Edge>| -> f64 {
        let plan =
            PatchPlan::new(model.graph(), removed.iter().copied(), donor.clone()).unwrap();
        let out = model.forward(&clean, Some(&plan)).unwrap().logits;
        let vocab = out.cols();
        let mut total = 0.0;
        for a in &answers {
            let r = &reference.data()[a.row * vocab..(a.row + 1) * vocab];
            let o = &out.data()[a.row * vocab..(a.row + 1) * vocab];
            total += kl_softmax(r, o);
        }
        total / answers.len() as f64
    };

    // receivers in reverse canonical order, parents in canonical order
    let mut removed = BTreeSet::new();
    let mut kept = BTreeMap::new();
    for receiver in model.graph().nodes().iter().rev() {
        for sender in model.graph().in_senders(receiver) {
            let edge = (*sender, *receiver);
            let before = divergence(&removed);
            removed.insert(edge);
            let after = divergence(&removed);
            if after - before >= tau {
                removed.remove(&edge);
                kept.insert(edge, after - before);
            }
        }
    }
    kept
}

#[test]
fn acdc_matches_the_replay_oracle_on_the_planted_fixture() {
    let model = tiny_fixture_model(3).unwrap();
    assert!(model.graph().num_edges() <= 12);
    let data = induction_pairs(6, 2);
    for tau in [0.01, 0.1, 1.0] {
        let config = DiscoveryConfig {
            regime: Regime::Ns,
            tau: Some(tau),
            sparsity_target: None,
            metric: MetricKind::KlToReference,
            batch_size: 16,
            seed: 0,
        };
        let circuit = acdc(&model, &data, &config).unwrap();
        let oracle = greedy_replay_oracle(&model, &data, tau);
        assert_eq!(
            circuit.edges.keys().collect::<Vec<_>>(),
            oracle.keys().collect::<Vec<_>>(),
            "edge sets differ at tau={tau}"
        );
        for (e, got) in &circuit.edges {
            let want = oracle[e];
            assert!((got - want).abs() <= 1e-9, "score of {e:?} at tau={tau}: {got} vs {want}");
        }
    }
}

#[test]
fn eap_is_exact_on_the_affine_fixture() {
    let model = affine_model(ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 8,
        vocab_size: 12,
        max_seq_len: 6,
        init_seed: 5,
    })
    .unwrap();
    let data = induction_pairs(8, 7);
    let opts = EapOptions { metric: MetricKind::LogitDiff, batch_size: 16, abs_mean: false };
    for regime in [Regime::Ns, Regime::Dn, Regime::NsDn] {
        let approx = eap(&model, &data, regime, &opts).unwrap();
        let exact =
            exact_patch_scores(&model, &data, regime, MetricKind::LogitDiff, 16).unwrap();
        for (e, s) in approx.iter() {
            let x = exact.get(e).unwrap();
            assert!(
                (s - x).abs() <= 1e-8,
                "{regime:?} edge {e:?}: first-order {s} vs exact {x}"
            );
        }
    }
}

#[test]
fn eap_ranks_edges_like_exact_patching_on_a_trained_model() {
    let mut model = TinyTransformer::new(ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        vocab_size: 16,
        max_seq_len: 8,
        init_seed: 11,
    })
    .unwrap();
    let spec = TaskSpec::Induction { region: VocabRegion::new(2, 12), seq_len: 8, seed: 0 };
    let train = spec.generate(2000, 1).unwrap();
    pretrain(
        &mut model,
        &train,
        &PretrainConfig { steps: 300, learning_rate: 3e-3, batch_size: 16, ..Default::default() },
    )
    .unwrap();
    let acc = circuitlab::posttrain::evaluate(&model, &spec.generate(64, 9).unwrap()).unwrap();
    assert!(acc > 0.8, "toy induction model failed to train (acc {acc})");

    let eval = spec.generate(16, 5).unwrap();
    let opts = EapOptions::default();
    let approx = eap(&model, &eval, Regime::Ns, &opts).unwrap();
    let exact = exact_patch_scores(&model, &eval, Regime::Ns, MetricKind::LogitDiff, 16).unwrap();

    let edges: Vec<Edge> = approx.iter().map(|(e, _)| *e).collect();
    let a: Vec<f64> = edges.iter().map(|e| approx.magnitude(e)).collect();
    let x: Vec<f64> = edges.iter().map(|e| exact.magnitude(e)).collect();
    let rho = spearman_rho(&a, &x).unwrap();
    println!("eap-vs-exact spearman rho = {:.4} (model acc {acc:.3})", rho.rho);
    assert!(rho.rho >= 0.6, "rank agreement too weak: {}", rho.rho);
}

#[test]
fn gate_network_recovery_is_exact() {
    let net = GateNetwork::new().unwrap();
    let provenance = |regime: &str| Provenance {
        algorithm: "exact".into(),
        config: regime.into(),
        graph_digest: net.graph().digest().to_string(),
        dataset_digest: "gate-fixture".into(),
        weight_digest: "gate-fixture".into(),
    };
    let to_circuit = |scores, regime| -> Circuit {
        let config = DiscoveryConfig {
            regime,
            tau: Some(0.5),
            sparsity_target: None,
            metric: MetricKind::LogitDiff,
            batch_size: 1,
            seed: 0,
        };
        threshold_circuit(&scores, &config, provenance("ns")).unwrap()
    };

    let ns = to_circuit(net.exact_scores(Regime::Ns).unwrap(), Regime::Ns);
    let dn = to_circuit(net.exact_scores(Regime::Dn).unwrap(), Regime::Dn);
    let (and, or, adder) = GateNetwork::planted_labels();

    // regime duality: noising finds AND+ADDER paths, denoising OR+ADDER
    for e in and.iter().chain(&adder) {
        assert!(ns.contains(e), "noising missed {e:?}");
    }
    for e in &or {
        assert!(!ns.contains(e), "noising should omit the redundant {e:?}");
    }
    for e in or.iter().chain(&adder) {
        assert!(dn.contains(e), "denoising missed {e:?}");
    }
    for e in &and {
        assert!(!dn.contains(e), "denoising should omit {e:?}");
    }

    let logical = classify_gates(&ns, &dn).unwrap();
    assert_eq!(logical.and_edges, and.into_iter().collect());
    assert_eq!(logical.or_edges, or.into_iter().collect());
    assert_eq!(logical.adder_edges, adder.into_iter().collect());
}

#[test]
fn exact_scores_match_single_patch_metric_deltas() {
    // spot-check the exact scorer against a by-hand single-edge patch
    let model = tiny_fixture_model(13).unwrap();
    let data = induction_pairs(4, 3);
    let scores = exact_patch_scores(&model, &data, Regime::Ns, MetricKind::LogitDiff, 8).unwrap();

    let clean = clean_batch(&data).unwrap();
    let corrupted = corrupted_batch(&data).unwrap();
    let answers = answer_specs(&data);
    let base = model.forward(&clean, None).unwrap();
    let donor = model.forward(&corrupted, None).unwrap().cache;
    let base_metric =
        output_metric(&base.logits, &answers, MetricKind::LogitDiff, None).unwrap();

    let edge = *model.graph().edges().first().unwrap();
    let plan = PatchPlan::new(model.graph(), [edge], donor).unwrap();
    let patched = model.forward(&clean, Some(&plan)).unwrap();
    let patched_metric =
        output_metric(&patched.logits, &answers, MetricKind::LogitDiff, None).unwrap();
    assert!((scores.get(&edge).unwrap() - (patched_metric - base_metric)).abs() < 1e-12);
}
