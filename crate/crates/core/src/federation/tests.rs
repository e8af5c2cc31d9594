use super::*;
use crate::models::{Architecture, ModelSpec};
use proptest::prelude::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn batch(b: usize, h: usize, f: usize, seed: u64) -> ClientBatch {
    let mut r = rng(seed);
    let ws: Vec<SeriesWindow> = (0..b)
        .map(|_| SeriesWindow {
            obs: (0..h).map(|_| rand::Rng::random::<f64>(&mut r)).collect(),
            tar: (0..f).map(|_| rand::Rng::random::<f64>(&mut r)).collect(),
            origin: 0,
        })
        .collect();
    ClientBatch::from_windows(&ws).unwrap()
}

#[test]
fn zero_model_zero_data_gives_zero_gradient() {
    let model = Model::build(ModelSpec::new(Architecture::Fcn, 6, 3).with_hidden(4)).unwrap();
    let params = ParamVector::zeros(model.layout());
    let b = ClientBatch {
        obs: Tensor::zeros(&[2, 6, 1]),
        tar: Tensor::zeros(&[2, 3, 1]),
    };
    let g = client_gradient(&model, &params, &b, &[]).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn fcn_bias_gradient_is_scaled_residual() {
    let ck = Checkpoint::init(ModelSpec::new(Architecture::Fcn, 6, 3).with_hidden(5).with_seed(2)).unwrap();
    let b = batch(1, 6, 3, 9);
    let g = client_gradient(&ck.model, &ck.params, &b, &[]).unwrap();
    let mut graph = Graph::new();
    let p = ck.params.constants(&mut graph);
    let obs = graph.constant(b.obs.clone());
    let pred = ck.model.forward(&mut graph, &p, obs, None).unwrap();
    let yhat = graph.value(pred).data().to_vec();
    let gb = &g[g.len() - 3..];
    for i in 0..3 {
        let expected = 2.0 / 3.0 * (yhat[i] - b.tar.data()[i]);
        assert!((gb[i] - expected).abs() < 1e-14);
    }
}

#[test]
fn client_gradient_matches_finite_differences() {
    let ck = Checkpoint::init(ModelSpec::new(Architecture::Cnn, 8, 4).with_hidden(4).with_seed(1)).unwrap();
    let b = batch(2, 8, 4, 3);
    let g = client_gradient(&ck.model, &ck.params, &b, &[]).unwrap();
    let flat = ck.params.flatten();
    let loss = |w: &[f64]| {
        let p = ParamVector::unflatten(ck.model.layout(), w).unwrap();
        let mut graph = Graph::new();
        let pv = p.constants(&mut graph);
        let o = graph.constant(b.obs.clone());
        let t = graph.constant(b.tar.clone());
        let y = ck.model.forward(&mut graph, &pv, o, None).unwrap();
        let l = mse_loss(&mut graph, y, t).unwrap();
        graph.value(l).item()
    };
    for i in (0..flat.len()).step_by(37) {
        let eps = 1e-6;
        let (mut a, mut c) = (flat.clone(), flat.clone());
        a[i] += eps;
        c[i] -= eps;
        let fd = (loss(&a) - loss(&c)) / (2.0 * eps);
        assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {i}: {fd} vs {}", g[i]);
    }
}

#[test]
fn defense_examples() {
    let mut r = rng(0);
    let mut v = vec![0.3, -0.1, 2.0];
    apply_defense(&mut v, &Defense::Prune { prune_ratio: 0.0 }, &mut r).unwrap();
    assert_eq!(v, vec![0.3, -0.1, 2.0]);
    let mut s = vec![-0.3, 0.0, 2.5];
    apply_defense(&mut s, &Defense::Sign, &mut r).unwrap();
    assert_eq!(s, vec![-1.0, 0.0, 1.0]);
    let mut g = vec![0.3, -0.1, 2.0];
    apply_defense(&mut g, &Defense::Gauss { noise_std: 0.0 }, &mut r).unwrap();
    assert_eq!(g, vec![0.3, -0.1, 2.0]);
    assert!(Defense::Prune { prune_ratio: 1.0 }.validate().is_err());
    assert!(Defense::from_name("dp", None, None).is_err());
    assert_eq!(
        Defense::from_name("gauss", None, None).unwrap(),
        Defense::Gauss { noise_std: DEFAULT_NOISE_STD }
    );
}

#[test]
fn prune_ties_break_by_index() {
    let mut v = vec![1.0, -1.0, 1.0, 5.0, -1.0, 0.5, 2.0, 1.0, 3.0, 4.0];
    apply_defense(&mut v, &Defense::Prune { prune_ratio: 0.5 }, &mut rng(0)).unwrap();
    assert_eq!(v, vec![0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 2.0, 1.0, 3.0, 4.0]);
}

proptest! {
    #[test]
    fn prune_matches_sort_oracle(v in prop::collection::vec(-10.0f64..10.0, 1..40), ratio in 0.0f64..0.99) {
        let mut pruned = v.clone();
        apply_defense(&mut pruned, &Defense::Prune { prune_ratio: ratio }, &mut rng(0)).unwrap();
        let k = (ratio * v.len() as f64).round() as usize;
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap().then(a.cmp(&b)));
        for (rank, &i) in idx.iter().enumerate() {
            prop_assert_eq!(pruned[i], if rank < k { 0.0 } else { v[i] });
        }
    }

    #[test]
    fn sign_output_is_ternary(v in prop::collection::vec(-1e3f64..1e3, 0..50)) {
        let mut s = v.clone();
        apply_defense(&mut s, &Defense::Sign, &mut rng(0)).unwrap();
        prop_assert!(s.iter().all(|x| [-1.0, 0.0, 1.0].contains(x)));
    }
}

#[test]
fn aggregation_examples() {
    let layout = Model::build(ModelSpec::new(Architecture::Fcn, 2, 1).with_hidden(2)).unwrap();
    let params = layout.init_params(1);
    let m = params.len();
    let cap = |grads: Vec<f64>, r: &str| GradientCapture {
        model_ref: r.into(),
        batch_size: 1,
        obs_len: 2,
        horizon: 1,
        defense: Defense::None,
        seed: 0,
        model_path: None,
        grads,
    };
    let g: Vec<f64> = (0..m).map(|i| i as f64 * 0.1).collect();
    assert_eq!(aggregate_round(&params, &[cap(g.clone(), "a")], 0.0).unwrap(), params.flatten());
    let two = aggregate_round(&params, &[cap(g.clone(), "a"), cap(g.clone(), "a")], 1.0).unwrap();
    for i in 0..m {
        assert!((two[i] - (params.flatten()[i] - g[i])).abs() < 1e-15);
    }
    let h: Vec<f64> = (0..m).map(|i| (i as f64).sin()).collect();
    let k: Vec<f64> = (0..m).map(|i| (i as f64).cos()).collect();
    let three = aggregate_round(&params, &[cap(g.clone(), "a"), cap(h.clone(), "a"), cap(k.clone(), "a")], 0.5).unwrap();
    for i in 0..m {
        let want = params.flatten()[i] - 0.5 * (g[i] + h[i] + k[i]) / 3.0;
        assert!((three[i] - want).abs() < 1e-14);
    }
    assert!(aggregate_round(&params, &[cap(g.clone(), "a"), cap(g, "b")], 1.0).is_err());
}

#[test]
fn capture_round_is_deterministic_and_persists() {
    let ck = Checkpoint::init(ModelSpec::new(Architecture::Tcn, 8, 4).with_hidden(4).with_seed(3)).unwrap();
    let b = batch(2, 8, 4, 1);
    let (c1, t1) = capture_round(&ck, b.clone(), Defense::Gauss { noise_std: 0.1 }, 7).unwrap();
    let (c2, _) = capture_round(&ck, b, Defense::Gauss { noise_std: 0.1 }, 7).unwrap();
    assert_eq!(c1, c2);
    assert_eq!(t1.masks.len(), 2 * ck.model.tcn_level_count());
    let scale = 1.0 / (1.0 - ck.model.spec().dropout_rate);
    assert!(t1.masks.iter().flat_map(|m| m.data()).all(|&v| v == 0.0 || v == scale));
    c1.check_model(&ck).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cap.json");
    c1.save(&p).unwrap();
    assert_eq!(GradientCapture::load(&p).unwrap(), c1);
    let tp = dir.path().join("cap.truth");
    t1.save(&tp).unwrap();
    assert_eq!(ClientTruth::load(&tp, &c1, &ck.model).unwrap(), t1);
}

#[test]
fn capture_rejects_foreign_model() {
    let a = Checkpoint::init(ModelSpec::new(Architecture::Fcn, 4, 2).with_hidden(3).with_seed(1)).unwrap();
    let b = Checkpoint::init(ModelSpec::new(Architecture::Fcn, 4, 2).with_hidden(3).with_seed(2)).unwrap();
    let (cap, _) = capture_round(&a, batch(1, 4, 2, 0), Defense::None, 0).unwrap();
    assert!(matches!(cap.check_model(&b), Err(Error::CaptureMismatch(_))));
}
