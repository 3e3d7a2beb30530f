//! Acceptance suite: one test per release criterion, each printing a single
//! `ACCEPTANCE n (name): PASS/FAIL — detail` line (visible with
//! `cargo test --test acceptance -- --nocapture`).
//!
//! Criterion 11 trains on MNIST and expects the desk-scale IDX subset under
//! `data/mnist/` at the workspace root; it is by far the slowest test here
//! (a full 50-epoch training run, around two hours on one core).

use std::time::Instant;

use lipcert::certify::{evaluate, ibp_forward, ibp_trace, Interval, PgdConfig};
use lipcert::constructions::{
    boolean_to_linf_net, build_pair_set, groupsort_to_sortnet, impossibility_witness,
    linfnet_to_sortnet, maxmin_order_statistic_net, order_statistic_linf_net,
    tight_linear_orderstat, tight_symmetric_net, verify_sum_inequality, BooleanFunction,
    SymmetricBooleanFunction, WitnessKind,
};
use lipcert::data::{gen_boolean_dataset, load_mnist, BooleanMode};
use lipcert::network::eval::{backward, forward, EvalOpts, MaskPlan};
use lipcert::numeric::l1_norm;
use lipcert::training::{fit, loss_ibp, loss_margin, lp_relaxed_max, ntk_init, TrainConfig};
use lipcert::{ActKind, Layer, Network, RandomSource, SortWeights, Tensor};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn bits_to_input(bits: usize, d: usize) -> Vec<f64> {
    (0..d).map(|i| ((bits >> i) & 1) as f64).collect()
}

fn kth_largest(x: &[f64], k: usize) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v[k - 1]
}

fn single_sort_neuron(d: usize, rho: f64, bias: Vec<f64>, act: ActKind) -> Network {
    Network::new(
        d,
        vec![Layer::SortNet {
            weights: SortWeights::Geometric { rho },
            bias: Tensor::from_data(1, d, bias),
            act,
        }],
    )
}

/// Criterion 1: the exhaustive-mask expectation of the Bernoulli-max
/// estimator equals the exact geometric-weight neuron on 500 random cases,
/// within 1e-9 relative error, in under 30 seconds.
#[test]
fn acceptance_01_estimator_unbiased() {
    let start = Instant::now();
    let src = RandomSource::new(11);
    let mut s = src.stream(&[1, 0]);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let d = 2 + s.next_index(9); // d ≤ 10
        let rho = s.uniform(0.0, 0.9);
        // Nonnegative inputs, identity activation: the estimator's domain.
        let x: Vec<f64> = (0..d).map(|_| s.uniform(0.0, 3.0)).collect();
        let net = single_sort_neuron(d, rho, vec![0.0; d], ActKind::Identity);
        let exact = forward(&net, &x, &EvalOpts::exact()).unwrap().output()[0];
        let mut expectation = 0.0;
        for maskbits in 0..1usize << d {
            let mask: Vec<bool> = (0..d).map(|i| (maskbits >> i) & 1 == 1).collect();
            let prob: f64 = mask
                .iter()
                .map(|&keep| if keep { 1.0 - rho } else { rho })
                .product();
            let plan = MaskPlan {
                masks: vec![Some(mask)],
            };
            let opts = EvalOpts {
                mask: Some(&plan),
                ..EvalOpts::exact()
            };
            expectation += prob * forward(&net, &x, &opts).unwrap().output()[0];
        }
        worst = worst.max((expectation - exact).abs() / exact.abs().max(1e-300));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "estimator-unbiasedness",
        worst <= 1e-9 && secs < 30.0,
        &format!("max relative error {worst:.2e} over 500 cases in {secs:.1}s"),
    );
}

/// Criterion 2: 0 ≤ truncation deficit ≤ ρ^k·‖x‖∞ on 10⁴ random cases;
/// at k = 10, ρ = 0.3 the deficit is below 5.9e-6·‖x‖∞.
#[test]
fn acceptance_02_truncation_bound() {
    let src = RandomSource::new(12);
    let mut s = src.stream(&[2, 0]);
    let mut ok = true;
    let mut worst_ratio = 0.0f64;
    for _ in 0..10_000 {
        let d = 2 + s.next_index(11);
        let rho = s.uniform(0.05, 0.9);
        let k = 1 + s.next_index(12);
        let x: Vec<f64> = (0..d).map(|_| s.uniform(0.0, 2.0)).collect();
        let net = single_sort_neuron(d, rho, vec![0.0; d], ActKind::Identity);
        let full = forward(&net, &x, &EvalOpts::exact()).unwrap().output()[0];
        let cache = forward(&net, &x, &EvalOpts::exact_truncated(k)).unwrap();
        let deficit = full - cache.output()[0];
        let xmax = x.iter().fold(0.0f64, |a, &b| a.max(b));
        ok &= deficit >= -1e-12
            && deficit <= rho.powi(k as i32) * xmax + 1e-12
            && deficit <= cache.trunc_err + 1e-12;
    }
    // The specific (k = 10, ρ = 0.3) budget: ρ^k ≈ 5.9e-6.
    for _ in 0..1000 {
        let d = 2 + s.next_index(11);
        let x: Vec<f64> = (0..d).map(|_| s.uniform(0.0, 2.0)).collect();
        let net = single_sort_neuron(d, 0.3, vec![0.0; d], ActKind::Identity);
        let full = forward(&net, &x, &EvalOpts::exact()).unwrap().output()[0];
        let trunc = forward(&net, &x, &EvalOpts::exact_truncated(10))
            .unwrap()
            .output()[0];
        let xmax = x.iter().fold(0.0f64, |a, &b| a.max(b));
        if xmax > 0.0 {
            worst_ratio = worst_ratio.max((full - trunc) / xmax);
        }
    }
    ok &= worst_ratio <= 5.9e-6;
    report(
        2,
        "truncation-bound",
        ok,
        &format!("10⁴ cases within ρ^k·‖x‖∞; worst deficit ratio at k=10, ρ=0.3: {worst_ratio:.2e} ≤ 5.9e-6"),
    );
}

/// Criterion 3: every Boolean function is reproduced exactly by the
/// two-layer ℓ∞-net — all 256 at d = 3 plus 1000 random at d = 8 — in
/// under two minutes.
#[test]
fn acceptance_03_boolean_representation() {
    let start = Instant::now();
    let mut mismatches = 0usize;
    let mut verify = |f: &BooleanFunction| {
        let net = boolean_to_linf_net(f).unwrap();
        let d = f.arity();
        for bits in 0..1usize << d {
            let out = forward(&net, &bits_to_input(bits, d), &EvalOpts::exact())
                .unwrap()
                .output()[0];
            if (out - f.eval_bits(bits) as f64).abs() > 1e-9 {
                mismatches += 1;
            }
        }
    };
    for t in 0..256usize {
        verify(
            &BooleanFunction::from_table(3, (0..8).map(|i| ((t >> i) & 1) as u8).collect())
                .unwrap(),
        );
    }
    let src = RandomSource::new(13);
    let mut s = src.stream(&[3, 0]);
    for _ in 0..1000 {
        let table: Vec<u8> = (0..256).map(|_| s.next_index(2) as u8).collect();
        verify(&BooleanFunction::from_table(8, table).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "boolean-representation",
        mismatches == 0 && secs < 120.0,
        &format!("{mismatches} mismatches over 256 + 1000 functions in {secs:.1}s"),
    );
}

/// Criterion 4: order-statistic nets (ℓ∞-distance and Batcher MaxMin) match
/// the sort oracle on all 2^d binary inputs for d ≤ 10 and on 10⁴ random
/// real inputs for d ≤ 6.
#[test]
fn acceptance_04_order_statistics() {
    let src = RandomSource::new(14);
    let mut s = src.stream(&[4, 0]);
    let mut ok = true;
    for d in 2..=10usize {
        for k in [1, d / 2 + 1, d] {
            let linf = order_statistic_linf_net(d, k, 1.0).unwrap();
            let maxmin = maxmin_order_statistic_net(d, k, -1.0, 1.0).unwrap();
            for bits in 0..1usize << d {
                let x = bits_to_input(bits, d);
                let want = kth_largest(&x, k);
                for net in [&linf, &maxmin] {
                    let out = forward(net, &x, &EvalOpts::exact()).unwrap().output()[0];
                    ok &= (out - want).abs() <= 1e-9;
                }
            }
        }
    }
    let mut real_cases = 0usize;
    while real_cases < 10_000 {
        let d = 2 + s.next_index(5); // d ≤ 6
        let k = 1 + s.next_index(d);
        let linf = order_statistic_linf_net(d, k, 1.0).unwrap();
        let maxmin = maxmin_order_statistic_net(d, k, -1.0, 1.0).unwrap();
        for _ in 0..200 {
            let x: Vec<f64> = (0..d).map(|_| s.uniform(-1.0, 1.0)).collect();
            let want = kth_largest(&x, k);
            for net in [&linf, &maxmin] {
                let out = forward(net, &x, &EvalOpts::exact()).unwrap().output()[0];
                ok &= (out - want).abs() <= 1e-9;
            }
            real_cases += 1;
        }
    }
    report(
        4,
        "order-statistics",
        ok,
        &format!(
            "binary d ≤ 10 exhaustive plus {real_cases} random real inputs, both families exact"
        ),
    );
}

fn standard_architectures(d: usize) -> Vec<Network> {
    let affine = |rows: usize, cols: usize| Layer::Affine {
        weight: Tensor::zeros(rows, cols),
        bias: vec![0.0; rows],
        constrained: true,
    };
    vec![
        Network::new(
            d,
            vec![
                affine(8, d),
                Layer::Activation {
                    kind: ActKind::Relu,
                },
                affine(2, 8),
            ],
        )
        .with_input_range(0.0, 1.0),
        Network::new(
            d,
            vec![
                affine(8, d),
                Layer::Activation {
                    kind: ActKind::Tanh,
                },
                affine(8, 8),
                Layer::Activation {
                    kind: ActKind::Tanh,
                },
                affine(2, 8),
            ],
        )
        .with_input_range(0.0, 1.0),
        Network::new(
            d,
            vec![
                affine(8, d),
                Layer::MaxMin { group: 2 },
                affine(8, 8),
                Layer::MaxMin { group: 2 },
                affine(2, 8),
            ],
        )
        .with_input_range(0.0, 1.0),
    ]
}

/// Criterion 5: the tight symmetric construction attains margin exactly 1/d
/// for d ∈ {2,…,8}, while standard-family nets trained on the adjacent-level
/// dataset never report a dataset certified radius above 1/2d.
#[test]
fn acceptance_05_tightness_pair() {
    // Exact 1/d margins for the construction.
    let mut margin_ok = true;
    for d in 2..=8usize {
        let g = SymmetricBooleanFunction::builtin("majority", d).unwrap();
        let net = tight_symmetric_net(&g).unwrap();
        let target = 1.0 / d as f64;
        for bits in 0..1usize << d {
            let x = bits_to_input(bits, d);
            let y = g.eval_ones(bits.count_ones() as usize) as usize;
            let out = forward(&net, &x, &EvalOpts::exact())
                .unwrap()
                .output()
                .to_vec();
            margin_ok &= ((out[y] - out[1 - y]) - target).abs() <= 1e-12;
        }
    }
    // Standard-family nets trained on the same dataset the construction
    // attains 1/d on (the full majority cube at d = 4): their dataset
    // certified radius (min over samples) never exceeds 1/2d.
    let d = 4;
    let f = BooleanFunction::builtin("majority", d).unwrap();
    let ds = gen_boolean_dataset(&f, BooleanMode::Full).unwrap();
    // θ = 1/d: the hinge asks exactly for the best margin the family can
    // deliver, so trained nets that fit the data sit right at the cap.
    let cfg_base = TrainConfig {
        epochs: 500,
        batch_size: ds.len(),
        lr0: 0.02,
        theta: 0.25,
        lambda0: 1.0,
        sched_start: 10,
        sched_end: 450,
        eps_test: 0.0,
        warmup_end: 1,
        ..TrainConfig::default()
    };
    let cap = 1.0 / (2.0 * d as f64) + 1e-6;
    let mut worst_radius = 0.0f64;
    let mut train_ok = true;
    for (ai, proto) in standard_architectures(d).into_iter().enumerate() {
        for seed in 0..3u64 {
            let mut net = proto.clone();
            let cfg = TrainConfig {
                seed: 100 * ai as u64 + seed,
                ..cfg_base.clone()
            };
            ntk_init(&mut net, &RandomSource::new(cfg.seed));
            fit(&mut net, &ds, &cfg).unwrap();
            let rep = evaluate(&net, &ds, 0.0, None, &RandomSource::new(cfg.seed), None).unwrap();
            let dataset_radius = rep
                .samples
                .iter()
                .map(|r| r.certified_radius)
                .fold(f64::INFINITY, f64::min);
            worst_radius = worst_radius.max(dataset_radius);
            train_ok &= dataset_radius <= cap;
        }
    }
    report(
        5,
        "tightness-pair",
        margin_ok && train_ok,
        &format!(
            "construction margin exactly 1/d for d ≤ 8; best trained dataset radius {worst_radius:.4} ≤ 1/2d = 0.125"
        ),
    );
}

/// Fit a scalar-output net to the k-th order statistic on random samples by
/// projected full-batch gradient descent (MSE loss).
fn fit_orderstat_regression(net: &mut Network, k: usize, seed: u64, steps: usize) {
    let d = net.input_dim;
    let src = RandomSource::new(seed);
    let mut s = src.stream(&[6, 0]);
    let xs: Vec<Vec<f64>> = (0..256)
        .map(|_| (0..d).map(|_| s.uniform(0.0, 1.0)).collect())
        .collect();
    let ys: Vec<f64> = xs.iter().map(|x| kth_largest(x, k)).collect();
    let lr = 0.1;
    for _ in 0..steps {
        let mut total = lipcert::network::eval::GradientBundle::zeros(net);
        for (x, &y) in xs.iter().zip(&ys) {
            let cache = forward(net, x, &EvalOpts::exact()).unwrap();
            let err = cache.output()[0] - y;
            let g = backward(net, &cache, &[2.0 * err / xs.len() as f64], true).unwrap();
            total.accumulate(&g);
        }
        let flat: Vec<Vec<f64>> = total.flat().iter().map(|g| g.to_vec()).collect();
        for ((buf, _), g) in net.params_mut().into_iter().zip(&flat) {
            for (b, gv) in buf.iter_mut().zip(g) {
                *b -= lr * gv;
            }
        }
        net.project_weights();
    }
}

/// Criterion 6: the linear approximator attains Boolean-corner error exactly
/// 1/2 − 1/2d, trained standard nets (d = 4, k = 1) never get below that
/// floor, and trained shallow MaxMin nets (M = 2, d = 8) never get below
/// 0.375.
#[test]
fn acceptance_06_approximation_floor() {
    let mut ok = true;
    let mut detail = String::new();
    for d in 2..=8usize {
        let k = 1 + (d - 1) / 2;
        let net = tight_linear_orderstat(d, k).unwrap();
        let (_, gap) = impossibility_witness(&net, &WitnessKind::OrderStat { k }).unwrap();
        ok &= (gap - (0.5 - 0.5 / d as f64)).abs() <= 1e-12;
    }
    let affine = |rows: usize, cols: usize| Layer::Affine {
        weight: Tensor::zeros(rows, cols),
        bias: vec![0.0; rows],
        constrained: true,
    };
    // Standard nets trained to regress the max of 4 coordinates.
    let floor4 = 0.5 - 0.5 / 4.0 - 1e-6;
    for seed in 0..3u64 {
        let mut net = Network::new(
            4,
            vec![
                affine(8, 4),
                Layer::Activation {
                    kind: ActKind::Relu,
                },
                affine(1, 8),
            ],
        )
        .with_input_range(0.0, 1.0);
        ntk_init(&mut net, &RandomSource::new(40 + seed));
        fit_orderstat_regression(&mut net, 1, 60 + seed, 400);
        let (_, gap) = impossibility_witness(&net, &WitnessKind::OrderStat { k: 1 }).unwrap();
        ok &= gap >= floor4;
        detail.push_str(&format!("std s{seed}: {gap:.4}; "));
    }
    // Shallow MaxMin nets (two affine layers) trained on the d = 8 median.
    for seed in 0..3u64 {
        let mut net = Network::new(
            8,
            vec![affine(8, 8), Layer::MaxMin { group: 2 }, affine(1, 8)],
        )
        .with_input_range(0.0, 1.0);
        ntk_init(&mut net, &RandomSource::new(80 + seed));
        fit_orderstat_regression(&mut net, 4, 90 + seed, 400);
        let (_, gap) = impossibility_witness(&net, &WitnessKind::OrderStat { k: 4 }).unwrap();
        ok &= gap >= 0.375 - 1e-6;
        detail.push_str(&format!("maxmin s{seed}: {gap:.4}; "));
    }
    report(
        6,
        "approximation-floor",
        ok,
        &format!("linear floor exact; trained witnesses never beat it ({detail})"),
    );
}

/// Criterion 7: the pairwise sum inequality holds for 1000 random
/// constrained nets × random adjacent-level pair sets, with zero violations.
#[test]
fn acceptance_07_sum_inequality() {
    let src = RandomSource::new(17);
    let mut s = src.stream(&[7, 0]);
    let mut violations = 0usize;
    for _ in 0..1000 {
        let d = 3 + s.next_index(6);
        let q = s.next_index(d);
        let pairs = build_pair_set(d, q + 1, q).unwrap();
        let mut layers = Vec::new();
        let mut prev = d;
        for _ in 0..1 + s.next_index(3) {
            let w = 2 + s.next_index(6);
            let mut data = Vec::with_capacity(w * prev);
            for _ in 0..w * prev {
                data.push(s.uniform(-1.0, 1.0));
            }
            let mut weight = Tensor::from_data(w, prev, data);
            for i in 0..w {
                let norm = l1_norm(weight.row(i));
                if norm > 1.0 {
                    for v in weight.row_mut(i) {
                        *v /= norm;
                    }
                }
            }
            layers.push(Layer::Affine {
                weight,
                bias: (0..w).map(|_| s.uniform(-0.5, 0.5)).collect(),
                constrained: true,
            });
            let kind = match s.next_index(3) {
                0 => ActKind::Relu,
                1 => ActKind::Tanh,
                _ => ActKind::Abs,
            };
            layers.push(Layer::Activation { kind });
            prev = w;
        }
        let net = Network::new(d, layers).with_input_range(0.0, 1.0);
        if !verify_sum_inequality(&net, &pairs).unwrap() {
            violations += 1;
        }
    }
    report(
        7,
        "sum-inequality",
        violations == 0,
        &format!("{violations} violations over 1000 random net/pair-set draws"),
    );
}

/// Probe a network's gradients against central finite differences: random
/// parameter coordinates and input coordinates, objective = fixed random
/// linear functional of the output.
fn fd_max_rel_err(
    net: &Network,
    opts: &EvalOpts,
    s: &mut lipcert::rng::Stream,
    probes: usize,
) -> f64 {
    let d = net.input_dim;
    let out_dim = net.out_dim().unwrap();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let x: Vec<f64> = (0..d).map(|_| s.next_gaussian() * 0.7).collect();
        let dout: Vec<f64> = (0..out_dim).map(|_| s.next_gaussian()).collect();
        let cache = forward(net, &x, opts).unwrap();
        let bundle = backward(net, &cache, &dout, true).unwrap();
        let objective = |n: &Network, xv: &[f64]| -> f64 {
            forward(n, xv, opts)
                .unwrap()
                .output()
                .iter()
                .zip(&dout)
                .map(|(o, g)| o * g)
                .sum()
        };
        let h = 1e-5;
        // One random parameter coordinate per trainable buffer.
        let n_bufs = net.params().len();
        for bi in 0..n_bufs {
            let len = net.params()[bi].0.len();
            let ci = s.next_index(len);
            let analytic = bundle.flat()[bi][ci];
            let mut plus = net.clone();
            plus.params_mut()[bi].0[ci] += h;
            let mut minus = net.clone();
            minus.params_mut()[bi].0[ci] -= h;
            let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-4);
            worst = worst.max((analytic - fd).abs() / denom);
        }
        // One random input coordinate.
        let ci = s.next_index(d);
        let analytic = bundle.input[0][ci];
        let mut xp = x.clone();
        xp[ci] += h;
        let mut xm = x.clone();
        xm[ci] -= h;
        let fd = (objective(net, &xp) - objective(net, &xm)) / (2.0 * h);
        let denom = analytic.abs().max(fd.abs()).max(1e-4);
        worst = worst.max((analytic - fd).abs() / denom);
    }
    worst
}

/// Criterion 8: every layer kind and every loss passes central
/// finite-difference checks, max relative error ≤ 1e-4 over 100 probes each.
#[test]
fn acceptance_08_gradient_correctness() {
    let src = RandomSource::new(18);
    let mut s = src.stream(&[8, 0]);
    let mut worst = 0.0f64;
    let gauss = |s: &mut lipcert::rng::Stream, n: usize| -> Vec<f64> {
        (0..n).map(|_| s.next_gaussian()).collect()
    };
    // One small network per layer kind.
    let nets: Vec<(&str, Network)> = vec![
        (
            "affine",
            Network::new(
                4,
                vec![Layer::Affine {
                    weight: Tensor::from_data(3, 4, gauss(&mut s, 12)),
                    bias: gauss(&mut s, 3),
                    constrained: false,
                }],
            ),
        ),
        (
            "activation-tanh",
            Network::new(
                3,
                vec![Layer::Activation {
                    kind: ActKind::Tanh,
                }],
            ),
        ),
        (
            "activation-relu",
            Network::new(
                3,
                vec![Layer::Activation {
                    kind: ActKind::Relu,
                }],
            ),
        ),
        (
            "activation-abs",
            Network::new(3, vec![Layer::Activation { kind: ActKind::Abs }]),
        ),
        (
            "activation-piecewise-sym",
            Network::new(
                3,
                vec![Layer::Activation {
                    kind: ActKind::PiecewiseSym { g: vec![0, 1, 1] },
                }],
            ),
        ),
        (
            "mean-shift-bn",
            Network::new(
                3,
                vec![Layer::MeanShiftBn {
                    dim: 3,
                    running_mean: Some(vec![0.3, -0.2, 0.1]),
                }],
            ),
        ),
        ("maxmin", Network::new(4, vec![Layer::MaxMin { group: 2 }])),
        (
            "linf-dist",
            Network::new(
                4,
                vec![Layer::LinfDist {
                    weight: Tensor::from_data(3, 4, gauss(&mut s, 12)),
                    bias: gauss(&mut s, 3),
                }],
            ),
        ),
        (
            "sortnet-geometric",
            single_sort_neuron(5, 0.3, gauss(&mut s, 5), ActKind::Tanh),
        ),
        (
            "sortnet-explicit",
            Network::new(
                4,
                vec![Layer::SortNet {
                    weights: SortWeights::Explicit {
                        weight: Tensor::from_data(2, 4, gauss(&mut s, 8)),
                    },
                    bias: Tensor::from_data(2, 4, gauss(&mut s, 8)),
                    act: ActKind::Tanh,
                }],
            ),
        ),
    ];
    for (_, net) in &nets {
        worst = worst.max(fd_max_rel_err(net, &EvalOpts::exact(), &mut s, 100));
    }
    // Stochastic SortNet under a fixed mask, finite p and p = ∞.
    let stoch = single_sort_neuron(6, 0.3, vec![0.0; 6], ActKind::Abs);
    let plan = MaskPlan {
        masks: vec![Some(vec![true, true, false, true, true, false])],
    };
    for p in [8.0, 64.0, f64::INFINITY] {
        let opts = EvalOpts {
            mask: Some(&plan),
            p,
            k_trunc: None,
        };
        worst = worst.max(fd_max_rel_err(&stoch, &opts, &mut s, 100));
    }
    // Losses: margin, IBP hinge, ℓp-relaxed max (finite differences on the
    // function value itself).
    let h = 1e-6;
    for _ in 0..100 {
        let logits = gauss(&mut s, 4);
        let y = s.next_index(4);
        let (_, dlogits, _) = loss_margin(&logits, y, 0.5, 1.3, 0.7).unwrap();
        let margins = gauss(&mut s, 4);
        let (_, dl_ibp, dmargins, _) = loss_ibp(&logits, &margins, y, 0.5, 1.3).unwrap();
        let xs: Vec<f64> = (0..5).map(|_| s.uniform(0.1, 2.0)).collect();
        let (_, dmax) = lp_relaxed_max(&xs, 8.0).unwrap();
        for i in 0..4 {
            let mut lp = logits.clone();
            lp[i] += h;
            let mut lm = logits.clone();
            lm[i] -= h;
            let fd = (loss_margin(&lp, y, 0.5, 1.3, 0.7).unwrap().0
                - loss_margin(&lm, y, 0.5, 1.3, 0.7).unwrap().0)
                / (2.0 * h);
            let denom = dlogits[i].abs().max(fd.abs()).max(1e-4);
            worst = worst.max((dlogits[i] - fd).abs() / denom);
            let fd = (loss_ibp(&lp, &margins, y, 0.5, 1.3).unwrap().0
                - loss_ibp(&lm, &margins, y, 0.5, 1.3).unwrap().0)
                / (2.0 * h);
            let denom = dl_ibp[i].abs().max(fd.abs()).max(1e-4);
            worst = worst.max((dl_ibp[i] - fd).abs() / denom);
            let mut mp = margins.clone();
            mp[i] += h;
            let mut mm = margins.clone();
            mm[i] -= h;
            let fd = (loss_ibp(&logits, &mp, y, 0.5, 1.3).unwrap().0
                - loss_ibp(&logits, &mm, y, 0.5, 1.3).unwrap().0)
                / (2.0 * h);
            let denom = dmargins[i].abs().max(fd.abs()).max(1e-4);
            worst = worst.max((dmargins[i] - fd).abs() / denom);
        }
        for i in 0..5 {
            let mut xp = xs.clone();
            xp[i] += h;
            let mut xm = xs.clone();
            xm[i] -= h;
            let fd = (lp_relaxed_max(&xp, 8.0).unwrap().0 - lp_relaxed_max(&xm, 8.0).unwrap().0)
                / (2.0 * h);
            let denom = dmax[i].abs().max(fd.abs()).max(1e-4);
            worst = worst.max((dmax[i] - fd).abs() / denom);
        }
    }
    report(
        8,
        "gradient-correctness",
        worst <= 1e-4,
        &format!("max relative error {worst:.2e} across all layer kinds and losses"),
    );
}

/// Criterion 9: the GroupSort→SortNet and ℓ∞-net→SortNet conversions agree
/// with their sources within 1e-9 on 10⁴ in-domain inputs each.
#[test]
fn acceptance_09_conversions() {
    let src = RandomSource::new(19);
    let mut s = src.stream(&[9, 0]);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    let constrained = |s: &mut lipcert::rng::Stream, rows: usize, cols: usize| {
        let mut weight = Tensor::from_data(
            rows,
            cols,
            (0..rows * cols).map(|_| s.uniform(-1.0, 1.0)).collect(),
        );
        for i in 0..rows {
            let norm = l1_norm(weight.row(i));
            if norm > 1.0 {
                for v in weight.row_mut(i) {
                    *v /= norm;
                }
            }
        }
        Layer::Affine {
            weight,
            bias: (0..rows).map(|_| s.uniform(-0.5, 0.5)).collect(),
            constrained: true,
        }
    };
    for _ in 0..10 {
        let d = 2 + s.next_index(4);
        let hidden = 2 * (1 + s.next_index(3));
        let gs = Network::new(
            d,
            vec![
                constrained(&mut s, hidden, d),
                Layer::MaxMin { group: 2 },
                constrained(&mut s, hidden, hidden),
                Layer::MaxMin { group: 2 },
                constrained(&mut s, 2, hidden),
            ],
        )
        .with_input_range(-2.0, 2.0);
        let conv = groupsort_to_sortnet(&gs, 2.0).unwrap();
        let linf = Network::new(
            d,
            vec![
                Layer::LinfDist {
                    weight: Tensor::from_data(
                        5,
                        d,
                        (0..5 * d).map(|_| s.uniform(-1.5, 1.5)).collect(),
                    ),
                    bias: (0..5).map(|_| s.uniform(-0.5, 0.5)).collect(),
                },
                Layer::LinfDist {
                    weight: Tensor::from_data(
                        2,
                        5,
                        (0..10).map(|_| s.uniform(-1.5, 1.5)).collect(),
                    ),
                    bias: (0..2).map(|_| s.uniform(-0.5, 0.5)).collect(),
                },
            ],
        );
        let linf_conv = linfnet_to_sortnet(&linf).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..d).map(|_| s.uniform(-2.0, 2.0)).collect();
            for (a, b) in [(&gs, &conv), (&linf, &linf_conv)] {
                let oa = forward(a, &x, &EvalOpts::exact()).unwrap();
                let ob = forward(b, &x, &EvalOpts::exact()).unwrap();
                for (u, v) in oa.output().iter().zip(ob.output()) {
                    worst = worst.max((u - v).abs());
                }
                cases += 1;
            }
        }
    }
    report(
        9,
        "conversions",
        worst <= 1e-9,
        &format!("max deviation {worst:.2e} over {cases} in-domain inputs"),
    );
}

/// Criterion 10: certified ≤ PGD ≤ clean on every evaluated (model, ε), and
/// IBP output bounds contain 1000 sampled perturbed outputs per random head.
#[test]
fn acceptance_10_soundness_ordering() {
    // Trained toy model, several radii.
    let f = BooleanFunction::builtin("or", 2).unwrap();
    let ds = gen_boolean_dataset(&f, BooleanMode::Full).unwrap();
    let mut net = Network::new(
        2,
        vec![
            Layer::SortNet {
                weights: SortWeights::Geometric { rho: 0.3 },
                bias: Tensor::zeros(16, 2),
                act: ActKind::Abs,
            },
            Layer::MeanShiftBn {
                dim: 16,
                running_mean: None,
            },
            Layer::SortNet {
                weights: SortWeights::Geometric { rho: 0.3 },
                bias: Tensor::zeros(2, 16),
                act: ActKind::Abs,
            },
        ],
    )
    .with_input_range(0.0, 1.0);
    let cfg = TrainConfig {
        epochs: 600,
        batch_size: 4,
        theta: 1.0,
        lambda0: 1.0,
        sched_start: 10,
        sched_end: 550,
        eps_test: 0.0,
        warmup_end: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    ntk_init(&mut net, &RandomSource::new(cfg.seed));
    fit(&mut net, &ds, &cfg).unwrap();
    let src = RandomSource::new(23);
    let mut ordering_ok = true;
    for eps in [0.0, 0.05, 0.2, 0.35, 0.6] {
        let rep = evaluate(&net, &ds, eps, Some(&PgdConfig::default()), &src, None).unwrap();
        let pgd = rep.pgd_accuracy.unwrap();
        ordering_ok &= rep.certified_accuracy <= pgd + 1e-12 && pgd <= rep.clean_accuracy + 1e-12;
    }
    // IBP containment on random MLP heads.
    let mut s = src.stream(&[10, 0]);
    let mut containment_ok = true;
    for _ in 0..10 {
        let din = 3 + s.next_index(3);
        let hidden = 4 + s.next_index(4);
        let head = Network::new(
            din,
            vec![
                Layer::Affine {
                    weight: Tensor::from_data(
                        hidden,
                        din,
                        (0..hidden * din).map(|_| s.next_gaussian()).collect(),
                    ),
                    bias: (0..hidden).map(|_| s.next_gaussian()).collect(),
                    constrained: false,
                },
                Layer::Activation {
                    kind: ActKind::Tanh,
                },
                Layer::Affine {
                    weight: Tensor::from_data(
                        3,
                        hidden,
                        (0..3 * hidden).map(|_| s.next_gaussian()).collect(),
                    ),
                    bias: (0..3).map(|_| s.next_gaussian()).collect(),
                    constrained: false,
                },
            ],
        )
        .with_head_split(0);
        let z: Vec<f64> = (0..din).map(|_| s.next_gaussian()).collect();
        let eps = 0.15;
        let region = Interval::ball(&z, eps).unwrap();
        let bounds = ibp_forward(&head.layers, &region).unwrap();
        let trace = ibp_trace(&head, &z, 0, eps).unwrap();
        for _ in 0..1000 {
            let zp: Vec<f64> = z.iter().map(|v| v + s.uniform(-eps, eps)).collect();
            let out = forward(&head, &zp, &EvalOpts::exact())
                .unwrap()
                .output()
                .to_vec();
            containment_ok &= bounds.contains(&out);
            for (j, &m) in trace.margins.iter().enumerate() {
                if j != 0 {
                    containment_ok &= out[0] - out[j] >= m - 1e-9;
                }
            }
        }
    }
    report(
        10,
        "soundness-ordering",
        ordering_ok && containment_ok,
        "certified ≤ pgd ≤ clean at 5 radii; IBP bounds contain 10 × 1000 sampled head outputs",
    );
}

/// Criterion 11: desk-scale MNIST. A 3-layer width-512 SortNet (ρ = 0.3,
/// θ = 0.6, ε = 0.1, ≤ 50 epochs, batch 512) reaches ≥ 95% clean and
/// ≥ 80% certified accuracy at ε = 0.1 within the stated budget
/// (60 minutes on 8 commodity cores, i.e. 480 core-minutes).
///
/// Trains on the desk-scale subset shipped under `data/mnist/` (8995
/// training / 1005 test samples).
#[test]
fn acceptance_11_desk_scale_mnist() {
    let start = Instant::now();
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist");
    let epochs = 50;
    let train = load_mnist(
        format!("{root}/train-images-idx3-ubyte").as_ref(),
        format!("{root}/train-labels-idx1-ubyte").as_ref(),
    )
    .unwrap();
    let test = load_mnist(
        format!("{root}/t10k-images-idx3-ubyte").as_ref(),
        format!("{root}/t10k-labels-idx1-ubyte").as_ref(),
    )
    .unwrap();

    let sort = |w: usize, prev: usize| Layer::SortNet {
        weights: SortWeights::Geometric { rho: 0.3 },
        bias: Tensor::zeros(w, prev),
        act: ActKind::Abs,
    };
    let bn = |w: usize| Layer::MeanShiftBn {
        dim: w,
        running_mean: None,
    };
    let mut net = Network::new(
        784,
        vec![
            sort(512, 784),
            bn(512),
            sort(512, 512),
            bn(512),
            sort(10, 512),
        ],
    )
    .with_input_range(0.0, 1.0);
    // λ₀ = 0.5 keeps a usable cross-entropy weight late in training (the
    // hinge only reaches correctly classified samples); validated to clear
    // both accuracy bars at this scale.
    let cfg = TrainConfig {
        epochs,
        batch_size: 512,
        theta: 0.6,
        rho: 0.3,
        lambda0: 0.5,
        sched_start: 5,
        sched_end: 45,
        eps_test: 0.1,
        warmup_end: 12,
        seed: 1,
        ..TrainConfig::default()
    };
    ntk_init(&mut net, &RandomSource::new(cfg.seed));
    fit(&mut net, &train, &cfg).unwrap();
    // Truncated order-20 inference: the ~3.5e-9-scale deficit is charged
    // against the certification margin, keeping the radii sound.
    let rep = evaluate(
        &net,
        &test,
        0.1,
        None,
        &RandomSource::new(cfg.seed),
        Some(20),
    )
    .unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let budget_ok = minutes <= 480.0; // 60 min × 8 cores, single-core here
    let pass = rep.clean_accuracy >= 0.95 && rep.certified_accuracy >= 0.80 && budget_ok;
    report(
        11,
        "desk-scale-mnist",
        pass,
        &format!(
            "clean {:.4} (≥ 0.95), certified {:.4} at ε=0.1 (≥ 0.80), {minutes:.0} core-minutes (≤ 480); {} train samples, {epochs} epochs",
            rep.clean_accuracy,
            rep.certified_accuracy,
            train.len(),
        ),
    );
}
