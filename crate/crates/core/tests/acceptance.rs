//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p agt-core --release --test acceptance`. Lines are
//! written straight to stdout so they show without `--nocapture`.
//!
//! Two checks under criterion 6 are mathematically unattainable as stated.
//! They are evaluated and printed like the rest but do not fail the test; the
//! README explains why.

use std::io::Write;
use std::time::Instant;

use agt::bounds::example_grad_bounds;
use agt::certifier::{
    certified_fractions, certify_query, find_k_prime, smooth_bound_from_k_prime, train_bundle,
};
use agt::datasets::{make_blobs, Dataset, DatasetSpec};
use agt::interval::{iadd, ihadamard, imatmul, IntervalMat, IntervalTensor};
use agt::mechanisms::{
    lambert_w0, release_binary, release_smooth_cauchy, sample_cauchy, sample_laplace, threshold,
    tighter_epsilon, PrivacySpec,
};
use agt::oracle::{candidate_pool, micro_sensitivities, soundness_trial, MicroInstance, TrialPlan};
use agt::trainer::{train, train_nominal, train_with};
use agt::{LabeledExample, Mlp, Mode, ModelShape, ParamBox, PerturbationModel, TrainConfig};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances.
const OUT_OF_BOX_TOL: f64 = 1e-9;
const SOUNDNESS_BUDGET_SECS: f64 = 600.0;
const DEGENERACY_TOL: f64 = 1e-7;
const CONTAINMENT_SLACK: f64 = 1e-9;
const POINT_TOL: f64 = 1e-12;
const LAMBERT_RESIDUAL_REL: f64 = 1e-12;
const LAMBERT_EXACT_TOL: f64 = 1e-12;
const LAMBERT_W1_TOL: f64 = 1e-6;
const SPOT_TOL: f64 = 1e-3;
const FIXED_POINT_TOL: f64 = 1e-9;
const UTILITY_GAP: f64 = 0.10;
const HIGH_EPS_GAP: f64 = 0.02;
const MAX_OVERHEAD: f64 = 6.0;
const CALIBRATION_TOL: f64 = 0.05;

/// Checks that are evaluated and reported but cannot pass as stated.
const UNATTAINABLE: &[&str] = &["6a", "6b"];

struct Report {
    failed: Vec<String>,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, what: &str, detail: String) {
        let tag = match (pass, UNATTAINABLE.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (unattainable as stated)",
            (false, false) => "FAIL",
        };
        let mut out = std::io::stdout().lock();
        writeln!(out, "[{tag}] {id:<3} {what}: {detail}").unwrap();
        out.flush().unwrap();
        if !pass && !UNATTAINABLE.contains(&id) {
            self.failed.push(id.to_string());
        }
    }
}

fn blobs(n: usize, sep: f64, seed: u64) -> (Dataset, Dataset) {
    make_blobs(&DatasetSpec::blobs(n, 2, sep, 1.0, seed)).unwrap()
}

/// 300-point blobs with one hidden layer of width 64, trained full-batch.
fn desk_config() -> (Dataset, Dataset, ModelShape, TrainConfig) {
    let (tr, test) = blobs(300, 4.0, 0);
    let cfg = TrainConfig {
        epochs: 10,
        lr: 1.0,
        lr_decay: 0.1,
        batch_size: tr.len(),
        clip: 0.5,
        shuffle_seed: 1,
        init_seed: 2,
    };
    (tr, test, ModelShape::new(2, vec![64], 2), cfg)
}

/// 3000-point well separated blobs used for the utility and ladder checks.
fn large_config() -> (Dataset, Dataset, ModelShape, TrainConfig) {
    let (tr, test) = blobs(3000, 10.0, 0);
    let cfg = TrainConfig {
        epochs: 2,
        lr: 2.0,
        lr_decay: 0.0,
        batch_size: tr.len(),
        clip: 0.1,
        shuffle_seed: 1,
        init_seed: 2,
    };
    (tr, test, ModelShape::new(2, vec![32], 2), cfg)
}

const LARGE_KSET: &[usize] = &[1, 2, 4, 8, 16, 32, 64, 128, 192, 256, 384, 512];

fn accuracy(model: &Mlp, data: &[LabeledExample]) -> f64 {
    data.iter()
        .filter(|e| model.predict(&e.x).unwrap() == e.y)
        .count() as f64
        / data.len() as f64
}

fn soundness(r: &mut Report) {
    let (tr, test, shape, cfg) = desk_config();
    let pool = candidate_pool(&test.examples, 2, 2, 8.0);
    let plan = TrialPlan {
        random: 200,
        adversarial: 20,
        seed: 0,
    };
    let start = Instant::now();
    let mut detail = Vec::new();
    let mut violations = 0;
    let mut k1_box = None;
    for k in [1, 2, 5] {
        let pm = PerturbationModel::privacy(k);
        let pbox = train(&tr.examples, &shape, &cfg, &pm).unwrap();
        let report = soundness_trial(&tr.examples, &shape, &cfg, &pm, &pbox, &plan, &pool).unwrap();
        assert_eq!(agt::oracle::VIOLATION_TOLERANCE, OUT_OF_BOX_TOL);
        violations += report.violations();
        detail.push(format!(
            "k={k}: {} trials, {} out of box",
            report.rows.len(),
            report.violations()
        ));
        if k == 1 {
            k1_box = Some(pbox);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.line(
        "1",
        violations == 0 && secs <= SOUNDNESS_BUDGET_SECS,
        "soundness under 220 perturbed retrainings per k",
        format!("{}; {secs:.1}s", detail.join(", ")),
    );

    let pm = PerturbationModel::privacy(1);
    let shrunk = k1_box.unwrap().shrink_towards_nominal(0.5);
    let neg = soundness_trial(&tr.examples, &shape, &cfg, &pm, &shrunk, &plan, &pool).unwrap();
    r.line(
        "1n",
        neg.violations() > 0,
        "negative control: half-width k=1 box is caught",
        format!("{} out-of-box parameters", neg.violations()),
    );
}

fn degeneracy(r: &mut Report) {
    let (tr, _, shape, full) = desk_config();
    let mini = TrainConfig {
        batch_size: 20,
        epochs: 3,
        ..full.clone()
    };
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for cfg in [full, mini] {
        train_with(
            &tr.examples,
            &shape,
            &cfg,
            &PerturbationModel::privacy(0),
            |info| {
                let theta = info.pbox.nominal().flatten();
                for ((l, h), t) in info
                    .pbox
                    .lower()
                    .flatten()
                    .iter()
                    .zip(info.pbox.upper().flatten())
                    .zip(&theta)
                {
                    worst = worst.max((l - t).abs()).max((h - t).abs());
                }
                steps += 1;
            },
        )
        .unwrap();
    }
    r.line(
        "2",
        worst <= DEGENERACY_TOL,
        "k=0 run keeps lower = nominal = upper",
        format!("max gap {worst:.3e} over {steps} steps"),
    );
}

fn random_interval(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (IntervalMat, Array2<f64>) {
    let a = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-10.0..10.0));
    let b = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-10.0..10.0));
    let lo = ndarray::Zip::from(&a)
        .and(&b)
        .map_collect(|x: &f64, y: &f64| x.min(*y));
    let hi = ndarray::Zip::from(&a)
        .and(&b)
        .map_collect(|x: &f64, y: &f64| x.max(*y));
    let pt = ndarray::Zip::from(&lo)
        .and(&hi)
        .map_collect(|l, h| l + rng.random::<f64>() * (h - l));
    (IntervalTensor::new(lo, hi).unwrap(), pt)
}

fn interval_kernel(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut inside, mut total) = (0, 0);
    let mut point_err: f64 = 0.0;
    for t in 0..10_000 {
        let (n, k, m) = (
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(1..6),
        );
        let (a, pa) = random_interval(&mut rng, n, k);
        let ok = match t % 3 {
            0 => {
                let (b, pb) = random_interval(&mut rng, n, k);
                iadd(&a, &b)
                    .unwrap()
                    .contains_within(&(&pa + &pb), CONTAINMENT_SLACK)
            }
            1 => {
                let (b, pb) = random_interval(&mut rng, n, k);
                ihadamard(&a, &b)
                    .unwrap()
                    .contains_within(&(&pa * &pb), CONTAINMENT_SLACK)
            }
            _ => {
                let (b, pb) = random_interval(&mut rng, k, m);
                imatmul(&a, &b)
                    .unwrap()
                    .contains_within(&pa.dot(&pb), CONTAINMENT_SLACK)
            }
        };
        inside += usize::from(ok);
        total += 1;

        let (_, pb) = random_interval(&mut rng, k, m);
        let prod = imatmul(
            &IntervalTensor::point(pa.clone()),
            &IntervalTensor::point(pb.clone()),
        )
        .unwrap();
        let exact = pa.dot(&pb);
        for ((l, h), e) in prod.lo().iter().zip(prod.hi()).zip(&exact) {
            point_err = point_err.max((l - e).abs()).max((h - e).abs());
        }
    }
    r.line(
        "3",
        inside == total && point_err <= POINT_TOL,
        "interval kernel containment and point degeneracy",
        format!("{inside}/{total} contained, point error {point_err:.2e}"),
    );
}

fn gradient_containment(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut inside, mut total) = (0, 0);
    for _ in 0..1000 {
        let depth = rng.random_range(0..3);
        let hidden = (0..depth).map(|_| rng.random_range(1..8)).collect();
        let shape = ModelShape::new(rng.random_range(1..4), hidden, rng.random_range(2..4));
        let nominal = Mlp::init(&shape, rng.random()).unwrap();
        let theta = nominal.flatten();
        let radius: f64 = [0.0, 1e-3, 0.05, 0.5][rng.random_range(0..4)];
        let lo: Vec<f64> = theta
            .iter()
            .map(|t| t - radius * rng.random::<f64>())
            .collect();
        let hi: Vec<f64> = theta
            .iter()
            .map(|t| t + radius * rng.random::<f64>())
            .collect();
        let pbox = ParamBox::from_bounds(
            nominal,
            Mlp::from_flat(&shape, &lo).unwrap(),
            Mlp::from_flat(&shape, &hi).unwrap(),
        )
        .unwrap();
        let x: Vec<f64> = (0..shape.inputs)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let e = LabeledExample::new(x, rng.random_range(0..shape.classes));
        let clip = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let b = example_grad_bounds(&pbox, &e.x, e.y, clip).unwrap();
        let (glo, ghi) = (b.flat_lower(), b.flat_upper());
        for _ in 0..10 {
            let sample: Vec<f64> = lo
                .iter()
                .zip(&hi)
                .map(|(l, h)| l + rng.random::<f64>() * (h - l))
                .collect();
            let g = Mlp::from_flat(&shape, &sample)
                .unwrap()
                .clipped_gradient(&e, clip)
                .unwrap()
                .flatten();
            let ok = g
                .iter()
                .enumerate()
                .all(|(j, v)| glo[j] - CONTAINMENT_SLACK <= *v && *v <= ghi[j] + CONTAINMENT_SLACK);
            inside += usize::from(ok);
            total += 1;
        }
    }
    r.line(
        "4",
        inside == total,
        "clipped gradients inside interval gradient bounds",
        format!("{inside}/{total} sampled parameter vectors"),
    );
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn lambert(r: &mut Report) {
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let n = 2000;
    let grid =
        std::iter::once(0.0).chain((0..=n).map(|i| 10f64.powf(-12.0 + 18.0 * i as f64 / n as f64)));
    for x in grid {
        let w = lambert_w0(x).unwrap();
        let res = (w * w.exp() - x).abs();
        worst_abs = worst_abs.max(res);
        worst_rel = worst_rel.max(res / x.max(1.0));
    }
    let w0 = lambert_w0(0.0).unwrap();
    let we = lambert_w0(std::f64::consts::E).unwrap();
    let w1 = lambert_w0(1.0).unwrap();
    let oracle = bisect(|w| w * w.exp() - 1.0, 0.0, 1.0);
    let pass = worst_rel <= LAMBERT_RESIDUAL_REL
        && w0.abs() <= LAMBERT_EXACT_TOL
        && (we - 1.0).abs() <= LAMBERT_EXACT_TOL
        && (w1 - oracle).abs() <= LAMBERT_W1_TOL
        && (w1 - 0.567143).abs() <= LAMBERT_W1_TOL;
    r.line(
        "5",
        pass,
        "Lambert W residuals and exact values",
        format!(
            "residual/max(1,x) {worst_rel:.2e} (absolute {worst_abs:.2e}), W(0)={w0}, W(e)-1={:.1e}, W(1)={w1:.9} vs bisection {oracle:.9}",
            we - 1.0
        ),
    );
}

fn accounting(r: &mut Report) {
    let epsilons = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];
    let deltas = [1e-3, 1e-5, 1e-8];
    let (mut below, mut total) = (0, 0);
    let mut first_counterexample = None;
    let mut worst_fixed: f64 = 0.0;
    for &eps in &epsilons {
        for &delta in &deltas {
            for k in 1..=100 {
                let es = tighter_epsilon(eps, delta, k).unwrap().eps_s;
                let l = (2.0 / delta).ln();
                worst_fixed =
                    worst_fixed.max((es - 2.0 * (-(k as f64) * es / l).exp() * eps).abs());
                total += 1;
                if es < eps {
                    below += 1;
                } else if first_counterexample.is_none() {
                    first_counterexample =
                        Some(format!("eps={eps}, delta={delta:e}, k*={k} gives {es:.4}"));
                }
            }
        }
    }
    r.line(
        "6a",
        below == total,
        "eps_S < eps on the full grid",
        format!(
            "{below}/{total} grid points; first counterexample {}",
            first_counterexample.unwrap_or_else(|| "none".into())
        ),
    );

    let spot = tighter_epsilon(1.0, 1e-5, 10).unwrap().eps_s;
    let l = (2.0f64 / 1e-5).ln();
    let oracle = bisect(|e| e - 2.0 * (-10.0 * e / l).exp(), 0.0, 2.0);
    r.line(
        "6b",
        (spot - 0.9307).abs() <= SPOT_TOL,
        "spot value eps=1, delta=1e-5, k*=10 equals 0.9307",
        format!("computed {spot:.6}, bisection oracle {oracle:.6}"),
    );
    r.line(
        "6c",
        worst_fixed <= FIXED_POINT_TOL && (spot - oracle).abs() <= FIXED_POINT_TOL,
        "fixed-point identity",
        format!(
            "max residual {worst_fixed:.2e}, spot vs oracle {:.1e}",
            (spot - oracle).abs()
        ),
    );
}

fn utility(r: &mut Report) {
    let (tr, test, shape, cfg) = large_config();
    let kset: Vec<usize> = LARGE_KSET
        .iter()
        .copied()
        .filter(|&k| k < cfg.batch_size)
        .collect();
    let bundle = train_bundle(&tr.examples, &shape, &cfg, Mode::Privacy, &kset, 0.01).unwrap();
    let nominal = bundle.nominal();
    let noiseless = accuracy(nominal, &test.examples);
    let preds: Vec<usize> = test
        .examples
        .iter()
        .map(|e| nominal.predict(&e.x).unwrap())
        .collect();
    let k_primes: Vec<Option<usize>> = test
        .examples
        .iter()
        .map(|e| find_k_prime(&bundle, &e.x).unwrap())
        .collect();

    let evaluate = |eps: f64| {
        let spec = PrivacySpec::cauchy(eps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut global, mut smooth, mut n) = (0usize, 0usize, 0usize);
        for ((e, &p), &kp) in test.examples.iter().zip(&preds).zip(&k_primes) {
            let s = smooth_bound_from_k_prime(kp, spec.beta);
            for _ in 0..1000 {
                global += usize::from(release_binary(p as f64, eps, &mut rng).unwrap() == e.y);
                smooth += usize::from(
                    threshold(release_smooth_cauchy(p as f64, s, &spec, &mut rng).unwrap()) == e.y,
                );
                n += 1;
            }
        }
        (global as f64 / n as f64, smooth as f64 / n as f64)
    };
    let (g_lo, s_lo) = evaluate(0.1);
    r.line(
        "7a",
        s_lo - g_lo >= UTILITY_GAP,
        "eps=0.1: smooth Cauchy beats global Laplace by 10 points",
        format!("smooth {s_lo:.4}, global {g_lo:.4}, noiseless {noiseless:.4}"),
    );
    let (g_hi, s_hi) = evaluate(10.0);
    r.line(
        "7b",
        (noiseless - g_hi).abs() <= HIGH_EPS_GAP && (noiseless - s_hi).abs() <= HIGH_EPS_GAP,
        "eps=10: both mechanisms within 2 points of noiseless",
        format!("smooth {s_hi:.4}, global {g_hi:.4}, noiseless {noiseless:.4}"),
    );
}

fn monotone_fractions(r: &mut Report) {
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, (tr, test, shape, cfg), kset) in [
        (
            "300-point",
            desk_config(),
            vec![1, 2, 3, 4, 5, 8, 12, 16, 24, 32],
        ),
        ("3000-point", large_config(), LARGE_KSET.to_vec()),
    ] {
        let xs = test.features();
        let p = certified_fractions(
            &train_bundle(&tr.examples, &shape, &cfg, Mode::Privacy, &kset, 0.01).unwrap(),
            &xs,
        )
        .unwrap();
        let u = certified_fractions(
            &train_bundle(&tr.examples, &shape, &cfg, Mode::Unlearning, &kset, 0.01).unwrap(),
            &xs,
        )
        .unwrap();
        let non_increasing = p.windows(2).all(|w| w[1].1 <= w[0].1);
        let dominated = p.iter().zip(&u).all(|(a, b)| b.1 >= a.1);
        pass &= non_increasing && dominated;
        let show = |v: &[(usize, f64)]| {
            v.iter()
                .map(|(k, f)| format!("{k}:{f:.2}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        detail.push(format!(
            "{name} privacy [{}] unlearning [{}]",
            show(&p),
            show(&u)
        ));
    }
    r.line(
        "8",
        pass,
        "certified fractions non-increasing, unlearning >= privacy",
        detail.join("; "),
    );
}

fn micro_instance(seed: u64, mode: Mode, sep: f64) -> MicroInstance {
    let mut spec = DatasetSpec::blobs(8, 2, sep, 1.0, seed);
    spec.split_fraction = 0.75;
    let (tr, test) = make_blobs(&spec).unwrap();
    MicroInstance {
        shape: ModelShape::new(2, vec![6], 2),
        cfg: TrainConfig {
            epochs: 6,
            lr: 0.5,
            lr_decay: 0.0,
            batch_size: tr.len(),
            clip: 1.0,
            shuffle_seed: seed,
            init_seed: seed + 1,
        },
        mode,
        pool: candidate_pool(&test.examples, 2, 2, 4.0),
        data: tr.examples,
    }
}

fn micro(r: &mut Report) {
    let xs: Vec<Array1<f64>> = (-6..=6)
        .flat_map(|i| [-3, 0, 3].map(|j| Array1::from(vec![i as f64 * 0.6, j as f64 * 0.6])))
        .collect();
    let (mut dominated, mut pairs, mut tight_instances, mut instances) = (0, 0, 0, 0);
    for seed in 0..6 {
        for (mode, kset) in [
            (Mode::Unlearning, vec![1, 2, 3]),
            (Mode::Privacy, vec![1, 2]),
        ] {
            for sep in [1.0, 2.0, 4.0] {
                let inst = micro_instance(seed, mode, sep);
                let bundle =
                    train_bundle(&inst.data, &inst.shape, &inst.cfg, mode, &kset, 0.1).unwrap();
                let certs: Vec<_> = xs
                    .iter()
                    .map(|x| certify_query(&bundle, x).unwrap())
                    .collect();
                let (mut refused_with_flip, mut certified_without_flip) = (false, false);
                for &k in &kset {
                    let truth = micro_sensitivities(&inst, &xs, k).unwrap();
                    for (c, t) in certs.iter().zip(truth) {
                        let bound = c.ls_at_k[&k];
                        dominated += usize::from(bound >= t);
                        pairs += 1;
                        refused_with_flip |= bound == 1 && t == 1;
                        certified_without_flip |= bound == 0 && t == 0;
                    }
                }
                instances += 1;
                tight_instances += usize::from(refused_with_flip && certified_without_flip);
            }
        }
    }
    r.line(
        "9",
        dominated == pairs && tight_instances > 0,
        "micro instances: bounds dominate exhaustive sensitivity, some are tight",
        format!("{dominated}/{pairs} (x, k) pairs dominated; {tight_instances}/{instances} instances tight"),
    );
}

fn overhead(r: &mut Report) {
    let (tr, _, shape, cfg) = desk_config();
    let pm = PerturbationModel::privacy(1);
    let (mut nominal, mut agt) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..7 {
        let t = Instant::now();
        std::hint::black_box(train_nominal(&tr.examples, &shape, &cfg).unwrap());
        nominal = nominal.min(t.elapsed().as_secs_f64());
        let t = Instant::now();
        std::hint::black_box(train(&tr.examples, &shape, &cfg, &pm).unwrap());
        agt = agt.min(t.elapsed().as_secs_f64());
    }
    let ratio = agt / nominal;
    r.line(
        "10",
        ratio <= MAX_OVERHEAD,
        "AGT wall-clock within 6x of nominal training",
        format!(
            "{ratio:.2}x (nominal {:.1} ms, AGT {:.1} ms, best of 7)",
            nominal * 1e3,
            agt * 1e3
        ),
    );
}

fn calibration(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let scale = 2.5;
    let mad = (0..n)
        .map(|_| sample_laplace(&mut rng, scale).abs())
        .sum::<f64>()
        / n as f64;
    let mut c: Vec<f64> = (0..n).map(|_| sample_cauchy(&mut rng)).collect();
    c.sort_by(f64::total_cmp);
    let iqr = c[3 * n / 4] - c[n / 4];
    let (e_mad, e_iqr) = ((mad / scale - 1.0).abs(), (iqr / 2.0 - 1.0).abs());
    r.line(
        "11",
        e_mad <= CALIBRATION_TOL && e_iqr <= CALIBRATION_TOL,
        "noise calibration over 1e5 draws",
        format!("Laplace MAD {mad:.4} vs {scale}, Cauchy IQR {iqr:.4} vs 2"),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { failed: Vec::new() };
    writeln!(std::io::stdout().lock(), "\nacceptance criteria").unwrap();
    soundness(&mut r);
    degeneracy(&mut r);
    interval_kernel(&mut r);
    gradient_containment(&mut r);
    lambert(&mut r);
    accounting(&mut r);
    utility(&mut r);
    monotone_fractions(&mut r);
    micro(&mut r);
    overhead(&mut r);
    calibration(&mut r);
    assert!(r.failed.is_empty(), "failed criteria: {:?}", r.failed);
}
