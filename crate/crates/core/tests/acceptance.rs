//! End-to-end acceptance checks. Each test prints a single PASS/FAIL line
//! and then asserts on the same condition.

use std::io::Write;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsinv_core::attacks::{
    gradient_distance, one_shot_targets, periodicity, quantile_violation, recover_from_head, run_attack,
    trend, AttackConfig, AttackMethod, Distance,
};
use tsinv_core::autodiff::{Graph, Tensor};
use tsinv_core::data::{synth_series, PreparedData, SynthConfig, WindowingSpec};
use tsinv_core::eval::{match_batch, smape, MetricReport};
use tsinv_core::federation::{
    capture_round, client_gradient, sample_batch, sample_dropout_masks, ClientTruth, Defense, GradientCapture,
};
use tsinv_core::inversion::{pinball_loss, train_finv, train_lti, InvNetSpec, TrainedNet};
use tsinv_core::models::{mse_loss, Architecture, Checkpoint, ModelSpec, ParamVector};

const SEEDS: [u64; 3] = [10, 43, 28];
const H: usize = 24;
const PERIOD: usize = 24;

/// Written straight to stderr so the line survives libtest's output capture.
fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {id:>2} [{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Daily-periodic synthetic series windowed at H = F = 24.
fn data() -> &'static PreparedData {
    static DATA: OnceLock<PreparedData> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = SynthConfig { noise_std: 0.02, ..SynthConfig::new(1, PERIOD * 80, PERIOD) };
        let series = synth_series(&cfg).unwrap();
        PreparedData::build(&series, WindowingSpec::new(H, H, H, 4).unwrap()).unwrap()
    })
}

fn checkpoint(arch: Architecture, hidden: usize, seed: u64) -> Checkpoint {
    Checkpoint::init(ModelSpec::new(arch, H, H).with_hidden(hidden).with_seed(seed)).unwrap()
}

fn capture(ck: &Checkpoint, b: usize, defense: Defense, seed: u64) -> (GradientCapture, ClientTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_batch(data().attack_pool(), b, &mut rng).unwrap();
    capture_round(ck, batch, defense, seed).unwrap()
}

fn score(cap: &GradientCapture, truth: &ClientTruth, ck: &Checkpoint, cfg: &AttackConfig) -> MetricReport {
    let r = run_attack(cap, ck, cfg).unwrap();
    match_batch(&r.recon_obs, &r.recon_tar, &truth.batch.obs, &truth.batch.tar).unwrap()
}

/// Runs `method` on a fresh capture and returns the matched report.
fn scenario(
    ck: &Checkpoint,
    b: usize,
    seed: u64,
    method: AttackMethod,
    defense: Defense,
    tweak: impl FnOnce(&mut AttackConfig),
) -> MetricReport {
    let (cap, truth) = capture(ck, b, defense, seed);
    let mut cfg = AttackConfig::preset(method, ck.model.spec().architecture).unwrap();
    cfg.seed = seed;
    tweak(&mut cfg);
    score(&cap, &truth, ck, &cfg)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Relative error with a floor at 1e-3 of the gradient's largest entry, so
/// coordinates near zero are judged against the scale of the whole vector.
fn rel_err(a: f64, n: f64, scale: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-12)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn c01_autodiff_soundness() {
    let (h, f, b) = (8, 8, 2);
    let cfg = SynthConfig { noise_std: 0.02, ..SynthConfig::new(3, 400, 8) };
    let small = PreparedData::build(&synth_series(&cfg).unwrap(), WindowingSpec::new(h, f, h, 4).unwrap()).unwrap();
    let (mut worst_first, mut worst_second) = (0.0f64, 0.0f64);
    for arch in Architecture::ALL {
        let ck = Checkpoint::init(ModelSpec::new(arch, h, f).with_hidden(4).with_seed(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch = sample_batch(small.attack_pool(), b, &mut rng).unwrap();
        let masks = sample_dropout_masks(&ck.model, b, &mut rng);
        let layout = ck.model.layout();

        // First order: parameter gradients of the training loss.
        let analytic = client_gradient(&ck.model, &ck.params, &batch, &masks).unwrap();
        let loss_at = |flat: &[f64]| {
            let p = ParamVector::unflatten(layout, flat).unwrap();
            let mut g = Graph::new();
            let pv = p.constants(&mut g);
            let obs = g.constant(batch.obs.clone());
            let tar = g.constant(batch.tar.clone());
            let mv: Vec<_> = masks.iter().map(|m| g.constant(m.clone())).collect();
            let pred = ck.model.forward(&mut g, &pv, obs, (!mv.is_empty()).then_some(&mv[..])).unwrap();
            let loss = mse_loss(&mut g, pred, tar).unwrap();
            g.value(loss).item()
        };
        let mut flat = ck.params.flatten();
        let scale = max_abs(&analytic);
        let eps = 1e-6;
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + eps;
            let up = loss_at(&flat);
            flat[i] = orig - eps;
            let down = loss_at(&flat);
            flat[i] = orig;
            worst_first = worst_first.max(rel_err(analytic[i], (up - down) / (2.0 * eps), scale));
        }

        // Second order: the gradient distance differentiated w.r.t. dummy data.
        let target = ParamVector::unflatten(layout, &analytic).unwrap();
        let dummy_obs = uniform(&mut rng, &[b, h, 1]);
        let dummy_tar = uniform(&mut rng, &[b, f, 1]);
        let distance = |obs: &Tensor, tar: &Tensor, want_grad: bool| {
            let mut g = Graph::new();
            let o = g.leaf(obs.clone());
            let t = g.leaf(tar.clone());
            let mv: Vec<_> = masks.iter().map(|m| g.constant(m.clone())).collect();
            let pl = ck.params.leaves(&mut g);
            let pred = ck.model.forward(&mut g, &pl, o, (!mv.is_empty()).then_some(&mv[..])).unwrap();
            let loss = mse_loss(&mut g, pred, t).unwrap();
            let grads = g.grad(loss, &pl).unwrap();
            let d = gradient_distance(&mut g, Distance::L1, &grads, target.tensors()).unwrap();
            let value = g.value(d).item();
            let grad = want_grad.then(|| {
                let dd = g.grad(d, &[o, t]).unwrap();
                dd.iter().flat_map(|v| g.value(*v).data().to_vec()).collect::<Vec<f64>>()
            });
            (value, grad)
        };
        let (_, grad) = distance(&dummy_obs, &dummy_tar, true);
        let grad = grad.unwrap();
        let scale = max_abs(&grad);
        let eps = 1e-6;
        let mut k = 0;
        for part in 0..2 {
            let base = if part == 0 { &dummy_obs } else { &dummy_tar };
            for i in 0..base.numel() {
                let mut up = base.clone();
                up.data_mut()[i] += eps;
                let mut down = base.clone();
                down.data_mut()[i] -= eps;
                let (vu, vd) = if part == 0 {
                    (distance(&up, &dummy_tar, false).0, distance(&down, &dummy_tar, false).0)
                } else {
                    (distance(&dummy_obs, &up, false).0, distance(&dummy_obs, &down, false).0)
                };
                worst_second = worst_second.max(rel_err(grad[k], (vu - vd) / (2.0 * eps), scale));
                k += 1;
            }
        }
    }
    let pass = worst_first <= 1e-5 && worst_second <= 1e-4;
    verdict(
        1,
        "autodiff vs finite differences",
        pass,
        format!("max rel err first order {worst_first:.2e} (<= 1e-5), second order {worst_second:.2e} (<= 1e-4)"),
    );
    assert!(pass);
}

#[test]
fn c02_one_shot_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_head = 0.0f64;
    let mut built = 0;
    while built < 100 {
        let fan_in = rng.random_range(2..20);
        let out = rng.random_range(1..12);
        let w: Vec<f64> = (0..fan_in * out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..fan_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..out).map(|_| rng.random_range(0.0..1.0)).collect();
        // Hand-derived gradients of mean squared error through a dense layer.
        let grad_b: Vec<f64> = (0..out)
            .map(|i| {
                let pred: f64 = (0..fan_in).map(|j| x[j] * w[j * out + i]).sum::<f64>() + bias[i];
                2.0 / out as f64 * (pred - y[i])
            })
            .collect();
        if grad_b.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= 1e-12 {
            continue;
        }
        let grad_w: Vec<f64> = (0..fan_in * out).map(|k| x[k / out] * grad_b[k % out]).collect();
        let (_, recovered, _) = recover_from_head(&w, &bias, &grad_w, &grad_b).unwrap();
        worst_head = worst_head.max(smape(&y, &recovered).unwrap());
        built += 1;
    }

    let mut worst_tcn = 0.0f64;
    for seed in SEEDS {
        let ck = checkpoint(Architecture::Tcn, 16, seed);
        let (cap, truth) = capture(&ck, 1, Defense::None, seed);
        let got = one_shot_targets(&cap, &ck).unwrap();
        worst_tcn = worst_tcn.max(smape(truth.batch.tar.data(), got.targets.data()).unwrap());
    }
    let pass = worst_head <= 1e-9 && worst_tcn <= 1e-5;
    verdict(
        2,
        "one-shot target recovery",
        pass,
        format!("100 random heads max sMAPE {worst_head:.2e} (<= 1e-9); TCN pipeline max {worst_tcn:.2e} (<= 1e-5)"),
    );
    assert!(pass);
}

#[test]
fn c03_fcn_cnn_near_perfect() {
    let mut lines = Vec::new();
    let mut pass = true;
    for (arch, limit) in [(Architecture::Fcn, 1e-2), (Architecture::Cnn, 5e-2)] {
        let (mut obs, mut tar) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let ck = checkpoint(arch, 64, seed);
            let m = scenario(&ck, 1, seed, AttackMethod::TsInverse, Defense::None, |c| c.steps = 5000);
            obs.push(m.smape_obs);
            tar.push(m.smape_tar);
        }
        let (o, t) = (mean(&obs), mean(&tar));
        pass &= o <= limit && t <= limit;
        lines.push(format!("{arch} obs {o:.2e} tar {t:.2e} (<= {limit:.0e})"));
    }
    verdict(3, "FCN/CNN inversion", pass, lines.join("; "));
    assert!(pass);
}

#[test]
fn c04_distance_ablation() {
    let distances = [Distance::L1, Distance::Cosine, Distance::CosineL1, Distance::L2, Distance::CosineL2];
    let mut pass = true;
    let mut lines = Vec::new();
    for b in [1usize, 2] {
        // A single sample exposes its targets through the head, so use them.
        let method = if b == 1 { AttackMethod::TsInverseOneshot } else { AttackMethod::TsInverse };
        let mut means = Vec::new();
        for d in distances {
            let obs: Vec<f64> = SEEDS
                .iter()
                .map(|&seed| {
                    let ck = checkpoint(Architecture::Tcn, 16, seed);
                    scenario(&ck, b, seed, method, Defense::None, |c| {
                        c.steps = 3000;
                        c.distance = d;
                    })
                    .smape_obs
                })
                .collect();
            means.push((d, mean(&obs)));
        }
        if b == 1 {
            pass &= means[0].1 < means[1].1;
        }
        let mut ranked = means.clone();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
        let top: Vec<Distance> = ranked[..2].iter().map(|r| r.0).collect();
        pass &= top.contains(&Distance::L1) && top.contains(&Distance::CosineL1);
        let table: Vec<String> = means.iter().map(|(d, v)| format!("{}={v:.3}", d.name())).collect();
        lines.push(format!("B={b} {}", table.join(" ")));
    }
    verdict(4, "distance ablation on TCN", pass, lines.join("; "));
    assert!(pass);
}

#[test]
fn c05_tv_harms_series() {
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let ck = checkpoint(Architecture::Cnn, 64, seed);
        let obs: Vec<f64> = [0.0, 0.001, 0.01]
            .iter()
            .map(|&tv| {
                scenario(&ck, 1, seed, AttackMethod::Invg, Defense::None, |c| {
                    c.steps = 5000;
                    c.lambda_tv_obs = tv;
                    c.lambda_tv_tar = 0.0;
                })
                .smape_obs
            })
            .collect();
        pass &= obs[1] >= obs[0] && obs[2] >= obs[0];
        lines.push(format!("seed {seed}: {:.3}/{:.3}/{:.3}", obs[0], obs[1], obs[2]));
    }
    verdict(5, "TV on CNN observations (tv 0/0.001/0.01)", pass, lines.join("; "));
    assert!(pass);
}

#[test]
fn c06_regularizer_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_p, mut worst_t, mut worst_q) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let period = rng.random_range(1..10);
        let t = period * rng.random_range(2..6) + rng.random_range(0..period);
        let b = rng.random_range(1..4);
        let cycle: Vec<Vec<f64>> = (0..b).map(|_| (0..period).map(|_| rng.random::<f64>()).collect()).collect();
        let periodic: Vec<f64> = (0..b).flat_map(|i| (0..t).map(|k| cycle[i][k % period]).collect::<Vec<_>>()).collect();
        let lines: Vec<f64> = (0..b)
            .flat_map(|_| {
                let (a, s) = (rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2));
                (0..t).map(move |k| a + s * k as f64)
            })
            .collect();
        let lo = Tensor::new(vec![t, 1], (0..t).map(|_| rng.random_range(-1.0..0.0)).collect()).unwrap();
        let hi = Tensor::new(vec![t, 1], (0..t).map(|_| rng.random_range(1.0..2.0)).collect()).unwrap();
        let inner_lo = lo.map(|v| v * 0.5);
        let inner_hi = hi.map(|v| v * 0.5 + 0.5);
        let inside: Vec<f64> = (0..b * t)
            .map(|k| {
                let i = k % t;
                rng.random_range(inner_lo.data()[i]..=inner_hi.data()[i])
            })
            .collect();

        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![b, t, 1], periodic).unwrap());
        let l = g.constant(Tensor::new(vec![b, t, 1], lines).unwrap());
        let q = g.constant(Tensor::new(vec![b, t, 1], inside).unwrap());
        if period < t {
            let v = periodicity(&mut g, p, period).unwrap();
            worst_p = worst_p.max(g.value(v).item());
        }
        let v = trend(&mut g, l).unwrap();
        worst_t = worst_t.max(g.value(v).item());
        let v = quantile_violation(&mut g, q, &[(lo, hi), (inner_lo, inner_hi)]).unwrap();
        worst_q = worst_q.max(g.value(v).item());
    }
    let pass = worst_p < 1e-10 && worst_t < 1e-10 && worst_q == 0.0;
    verdict(
        6,
        "regularizer fixed points",
        pass,
        format!("periodicity {worst_p:.1e}, trend {worst_t:.1e} (< 1e-10), quantile {worst_q:e} (= 0)"),
    );
    assert!(pass);
}

fn quantile_net(ck: &Checkpoint, b: usize) -> TrainedNet {
    let mut spec = InvNetSpec::quantile(ck.model.param_count(), H, H, b, vec![0.1, 0.3, 0.7, 0.9]);
    spec.hidden = vec![128, 64];
    spec.epochs = 60;
    spec.samples_per_epoch = Some(256);
    train_finv(data().aux_set(), ck, Defense::None, spec, 0).unwrap()
}

#[test]
fn c07_regularization_helps_tcn_batches() {
    let seeds = [10u64, 43];
    let b = 4;
    let steps = 3000;
    let grid = [0.0, 0.01, 0.1];
    let cases: Vec<_> = seeds
        .iter()
        .map(|&seed| {
            let ck = checkpoint(Architecture::Tcn, 16, seed);
            let (cap, truth) = capture(&ck, b, Defense::None, seed);
            (seed, ck, cap, truth)
        })
        .collect();
    let run = |lp: f64, lt: f64, bounds: bool, nets: &[TrainedNet]| -> f64 {
        let obs: Vec<f64> = cases
            .iter()
            .enumerate()
            .map(|(i, (seed, ck, cap, truth))| {
                let mut c = AttackConfig::preset(AttackMethod::TsInverse, Architecture::Tcn).unwrap();
                c.seed = *seed;
                c.steps = steps;
                c.period = PERIOD;
                c.lambda_p = lp;
                c.lambda_t = lt;
                if bounds {
                    c.lambda_q_obs = 0.1;
                    c.lambda_q_tar = 0.1;
                    c.bounds = Some(nets[i].predict_bounds(cap).unwrap());
                }
                score(cap, truth, ck, &c).smape_obs
            })
            .collect();
        mean(&obs)
    };
    let baseline = run(0.0, 0.0, false, &[]);
    let mut best = (0.0, 0.0, f64::INFINITY);
    for &lp in &grid {
        for &lt in &grid {
            if lp == 0.0 && lt == 0.0 {
                continue;
            }
            let v = run(lp, lt, false, &[]);
            if v < best.2 {
                best = (lp, lt, v);
            }
        }
    }
    let nets: Vec<TrainedNet> = cases.iter().map(|(_, ck, _, _)| quantile_net(ck, b)).collect();
    let with_bounds = run(best.0, best.1, true, &nets);
    let pass = best.2 < baseline && with_bounds <= 1.1 * best.2;
    verdict(
        7,
        "regularization on TCN B=4",
        pass,
        format!(
            "no reg {baseline:.4}; best (lp {}, lt {}) {:.4}; + quantile bounds {with_bounds:.4} (<= {:.4})",
            best.0,
            best.1,
            best.2,
            1.1 * best.2
        ),
    );
    assert!(pass);
}

#[test]
fn c08_pinball_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = 0;
    for _ in 0..50 {
        let n = rng.random_range(3..12);
        let sample: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tau = [0.1, 0.25, 0.5, 0.75, 0.9][rng.random_range(0..5)];
        let mut sorted = sample.clone();
        sorted.sort_by(f64::total_cmp);
        let oracle = sorted[((tau * n as f64).ceil() as usize).max(1) - 1];
        let loss = |c: f64| pinball_loss(&sample, &vec![c; n], tau).unwrap();
        // Dense grid plus every sample point; the loss is piecewise linear.
        let mut candidates: Vec<f64> = (0..=4000).map(|k| -2.5 + 5.0 * k as f64 / 4000.0).collect();
        candidates.extend(&sample);
        let best = candidates.iter().copied().map(loss).fold(f64::INFINITY, f64::min);
        if loss(oracle) > best + 1e-12 {
            failures += 1;
        }
    }
    let pass = failures == 0;
    verdict(8, "pinball minimized by the empirical quantile", pass, format!("{failures}/50 samples disagree"));
    assert!(pass);
}

#[test]
fn c09_defense_ordering() {
    let ck = checkpoint(Architecture::Fcn, 64, 10);
    let methods = [
        AttackMethod::DlgLbfgs,
        AttackMethod::DlgAdam,
        AttackMethod::Invg,
        AttackMethod::Dia,
        AttackMethod::TsInverse,
    ];
    let mut opt_all_high = true;
    let mut lti_wins = 0;
    let mut total = 0;
    let mut lines = Vec::new();
    for defense in [Defense::Gauss { noise_std: 0.1 }, Defense::Sign] {
        let mut spec = InvNetSpec::direct(ck.model.param_count(), H, H, 1);
        spec.hidden = vec![256, 128];
        spec.epochs = 30;
        spec.samples_per_epoch = Some(256);
        let net = train_lti(data().aux_set(), &ck, defense, spec, 0).unwrap();
        for seed in SEEDS {
            let (cap, truth) = capture(&ck, 1, defense, seed);
            let best_opt = methods
                .iter()
                .map(|&m| {
                    let mut c = AttackConfig::preset(m, Architecture::Fcn).unwrap();
                    c.seed = seed;
                    c.steps = 5000;
                    score(&cap, &truth, &ck, &c).smape_obs
                })
                .fold(f64::INFINITY, f64::min);
            let r = net.lti_attack(&cap).unwrap();
            let lti = match_batch(&r.recon_obs, &r.recon_tar, &truth.batch.obs, &truth.batch.tar)
                .unwrap()
                .smape_obs;
            opt_all_high &= best_opt > 0.5;
            total += 1;
            if lti < best_opt {
                lti_wins += 1;
            }
            lines.push(format!("{} s{seed} best-opt {best_opt:.3} lti {lti:.3}", defense.name()));
        }
    }
    let pass = opt_all_high && lti_wins == total;
    verdict(
        9,
        "defenses: optimization attacks fail, LTI does better",
        pass,
        format!("lti wins {lti_wins}/{total}; {}", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
fn c10_gru_robustness() {
    let run = |arch| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&seed| {
                let ck = checkpoint(arch, 16, seed);
                scenario(&ck, 1, seed, AttackMethod::TsInverse, Defense::None, |c| c.steps = 5000).smape_obs
            })
            .collect()
    };
    let fcn = mean(&run(Architecture::Fcn));
    let gru = mean(&run(Architecture::Gru2Gru));
    let pass = gru >= 10.0 * fcn;
    verdict(
        10,
        "GRU2GRU resists inversion",
        pass,
        format!("obs sMAPE gru2gru {gru:.3e} vs fcn {fcn:.3e}, ratio {:.0} (>= 10)", gru / fcn),
    );
    assert!(pass);
}

#[test]
fn c11_metric_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ok = true;
    for _ in 0..500 {
        let n = rng.random_range(1..30);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        if rng.random_bool(0.2) {
            b[0] = 0.0;
        }
        let s = smape(&a, &b).unwrap();
        ok &= (0.0..=2.0).contains(&s);
        ok &= s == smape(&b, &a).unwrap();
        ok &= smape(&a, &a).unwrap() == 0.0;
        ok &= a == b || s > 0.0;
    }
    ok &= smape(&[0.0, 0.0], &[0.0, 0.0]).unwrap() == 0.0;

    let (b, h, f) = (5, 6, 3);
    let obs = uniform(&mut rng, &[b, h, 1]);
    let tar = uniform(&mut rng, &[b, f, 1]);
    let reverse = |t: &Tensor, len: usize| {
        let d: Vec<f64> = (0..b).rev().flat_map(|i| t.data()[i * len..(i + 1) * len].to_vec()).collect();
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let m = match_batch(&reverse(&obs, h), &reverse(&tar, f), &obs, &tar).unwrap();
    let expected: Vec<usize> = (0..b).rev().collect();
    ok &= m.permutation == expected && m.smape_obs == 0.0 && m.smape_tar == 0.0;
    verdict(11, "metric contracts", ok, format!("permutation {:?}", m.permutation));
    assert!(ok);
}
