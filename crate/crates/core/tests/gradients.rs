use pheadline::experiment::gradient_suite;
use pheadline::fact::{info_nce, info_nce_graph};
use pheadline::gradcheck::{op_suite, GradCheck, OPS};
use pheadline::tensor::{Graph, ParamStore, Tensor};

#[test]
fn registered_ops_on_several_draws() {
    let check = GradCheck::default();
    for seed in 0..3 {
        let reports = op_suite(&check, seed).unwrap();
        assert_eq!(reports.len(), OPS.len());
        for r in reports {
            assert!(r.passed(), "seed {seed}: {r:?}");
        }
    }
}

#[test]
fn composite_pieces_and_full_objective() {
    let reports = gradient_suite(&GradCheck::default(), 0).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    for want in [
        "attention block (causal)",
        "adapter fusion",
        "contrastive loss",
        "L_pers",
        "L_total (full)",
    ] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    for r in reports {
        assert!(r.checked > 0);
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn corrupted_gradients_are_caught() {
    let check = GradCheck {
        corrupt_analytic: Some(1.01),
        ..Default::default()
    };
    for r in op_suite(&check, 5).unwrap() {
        assert!(!r.passed(), "{} passed with a 1% error", r.name);
    }
    for r in gradient_suite(&check, 5).unwrap() {
        assert!(!r.passed(), "{} passed with a 1% error", r.name);
    }
}

#[test]
fn contrastive_loss_is_monotone_in_similarities() {
    let tau = 0.1;
    let cases: [&[f64]; 3] = [
        &[0.3, -0.2, 0.5, 0.1, -0.9],
        &[0.9, 0.8, 0.7, 0.6, 0.5],
        &[-0.5, 0.4, 0.4, -0.1, 0.95],
    ];
    for sims in cases {
        let mut store = ParamStore::new();
        let id = store.add("sims", Tensor::vector(sims.to_vec()));
        let f = |g: &mut Graph, s: &ParamStore| {
            let v = g.param(s, id);
            info_nce_graph(g, v, tau)
        };
        let report = GradCheck::default().run("info_nce", &mut store, f).unwrap();
        assert!(report.passed(), "{report:?}");

        let mut g = Graph::new();
        let loss = f(&mut g, &store).unwrap();
        assert!((g.scalar(loss) - info_nce(sims, tau).unwrap()).abs() < 1e-12);
        g.backward(loss, &mut store).unwrap();
        let grad = store.get(id).grad.clone().unwrap();
        assert!(grad[0] < 0.0, "positive similarity must lower the loss: {grad:?}");
        assert!(
            grad[1..].iter().all(|&d| d > 0.0),
            "negative similarities must raise it: {grad:?}"
        );

        // closed form: (softmax(s / tau)_k - [k = 0]) / tau
        let z: f64 = sims.iter().map(|s| (s / tau).exp()).sum();
        for (k, s) in sims.iter().enumerate() {
            let p = (s / tau).exp() / z;
            let want = (p - if k == 0 { 1.0 } else { 0.0 }) / tau;
            assert!((grad[k] - want).abs() < 1e-9, "k={k}: {} vs {want}", grad[k]);
        }
    }
}
