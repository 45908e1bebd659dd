//! Acceptance criteria. Each test prints one line
//! `criterion N: PASS|FAIL  <what was measured>  [elapsed / budget]`
//! and then asserts it.
//!
//! The tests hold a shared lock so each one is timed on an otherwise idle
//! process. Criteria 6 and 8 share one set of trained runs; the training time
//! is charged to both.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::Rng as _;

use lowflow::conditioning::{kappa_e, kappa_lower_bound, mc_moments, moments_exact};
use lowflow::diagnostics::{check_prop4, check_prop5, fuzz, gd_complexity, ProbeConfig};
use lowflow::flowcore::{euler_sample, gaussian_velocity, make_batch, noise_matrix, NoisyBatch, SamplerConfig};
use lowflow::linalg::Matrix;
use lowflow::losses::{
    contrastive_loss, fm_loss, positive_inputs, split_batch, ConsDenominator, LcfConfig, LocalContrastiveFlow,
};
use lowflow::netopt::{grad, Activation, VelocityNet};
use lowflow::rng::{self, tag};
use lowflow::schedules::Schedule;
use lowflow::trainer::{Mode, TrainConfig};
use lowflow_cli::figure1::{run_figure1, Figure1, Figure1Spec};
use lowflow_cli::RunManifest;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: &str, ok: bool, detail: &str, elapsed: Duration, budget: Duration) -> bool {
    let within = elapsed <= budget;
    let pass = ok && within;
    println!(
        "criterion {id}: {}  {detail}  [{:.2}s / {:.0}s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    pass
}

fn random_schedule(r: &mut rng::Rng) -> Schedule {
    match r.random_range(0..3) {
        0 => Schedule::Rectified,
        1 => Schedule::Cosine,
        _ => Schedule::PowerLaw {
            p: r.random_range(0.5..3.0),
        },
    }
}

/// Random direction scaled to a norm drawn from `[0, max_norm]`.
fn random_x0(r: &mut rng::Rng, d: usize, max_norm: f64) -> Vec<f64> {
    let v = rng::normal_vec(r, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = r.random_range(0.0..max_norm);
    v.iter().map(|x| x * target / n).collect()
}

#[test]
fn criterion_01_rectified_identity() {
    let _g = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for t in [0.5, 0.1, 0.02, 0.001] {
        for x0 in [vec![0.0], vec![1.0, -2.0], vec![3.0; 8]] {
            let k = kappa_e(Schedule::Rectified, &x0, t, t).unwrap();
            worst = worst.max((k - 1.0 / t).abs() * t);
        }
    }
    let ok = worst <= 1e-12;
    let detail = format!("max |kappa_e - 1/t| / (1/t) = {worst:.2e} (tol 1e-12)");
    assert!(report("1", ok, &detail, start.elapsed(), Duration::from_secs(1)));
}

#[test]
fn criterion_02_monte_carlo_agreement() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng::substream(2, tag::FUZZ, 0);
    let mut agree = 0;
    for i in 0..100u64 {
        let s = random_schedule(&mut r);
        let d = [1, 2, 8][r.random_range(0..3)];
        let x0 = random_x0(&mut r, d, 3.0);
        let t = [0.5, 0.1, 0.02][r.random_range(0..3)];
        let exact = moments_exact(s, &x0, t, t).unwrap();
        let mc = mc_moments(s, &x0, t, t, 100_000, i).unwrap();
        let v_ok = (mc.dv2 - exact.dv2).abs() <= 4.0 * mc.stderr_dv2;
        let x_ok = (mc.dx2 - exact.dx2).abs() <= 4.0 * mc.stderr_dx2;
        agree += usize::from(v_ok && x_ok);
    }
    let detail = format!("{agree}/100 instances within 4 standard errors on both moments (need >= 95)");
    assert!(report("2", agree >= 95, &detail, start.elapsed(), Duration::from_secs(60)));
}

#[test]
fn criterion_03_lower_bound_dominance() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng::substream(3, tag::FUZZ, 0);
    let mut violations = 0;
    let mut worst_margin = f64::INFINITY;
    for _ in 0..10_000 {
        let s = random_schedule(&mut r);
        let d = r.random_range(1..=8);
        let x0 = random_x0(&mut r, d, 5.0);
        let t1 = r.random_range(1e-4..=1.0);
        let t2 = if r.random_bool(0.3) { t1 } else { r.random_range(1e-4..=1.0) };
        let k = kappa_e(s, &x0, t1, t2).unwrap();
        let lb = kappa_lower_bound(s, &x0, t1, t2).unwrap();
        worst_margin = worst_margin.min((k - lb) / k);
        if k < lb {
            violations += 1;
        }
    }
    let detail = format!("{violations} violations in 10000 instances, min relative slack {worst_margin:.3e}");
    assert!(report("3", violations == 0, &detail, start.elapsed(), Duration::from_secs(60)));
}

fn fd_grad(net: &VelocityNet, f: &dyn Fn(&VelocityNet) -> f64) -> Vec<f64> {
    let p0 = net.params();
    let h = 1e-6;
    let mut n = net.clone();
    (0..p0.len())
        .map(|k| {
            let mut p = p0.clone();
            p[k] = p0[k] + h;
            n.set_params(&p).unwrap();
            let up = f(&n);
            p[k] = p0[k] - h;
            n.set_params(&p).unwrap();
            (up - f(&n)) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn feature_rows(net: &VelocityNet, x: &Matrix, t: &[f64]) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..t.len()).map(|i| net.features(x.row(i), t[i]).unwrap()).collect();
    Matrix::from_rows(&rows).unwrap()
}

/// The LCF objective differentiates through anchors only; positives and the
/// bank are constants. The finite-difference reference freezes them at the
/// current parameters.
fn frozen_lcf(net: &VelocityNet, b: &NoisyBatch, cfg: &LcfConfig) -> impl Fn(&VelocityNet) -> f64 {
    let (fm_idx, lcf_idx) = split_batch(b, cfg.t_min);
    let (px, pt) = positive_inputs(b, &lcf_idx, cfg).unwrap();
    let pos = feature_rows(net, &px, &pt);
    let bank = feature_rows(net, &b.xt, &b.t);
    let sidx: Vec<Option<usize>> = lcf_idx.iter().map(|&i| Some(i)).collect();
    let at: Vec<f64> = lcf_idx.iter().map(|&i| b.t[i]).collect();
    let ax = b.xt.select_rows(&lcf_idx);
    let b = b.clone();
    let cfg = *cfg;
    move |n: &VelocityNet| {
        let cons = if lcf_idx.is_empty() {
            0.0
        } else {
            contrastive_loss(&feature_rows(n, &ax, &at), &pos, &bank, &sidx, cfg.tau, cfg.cons_denominator).unwrap()
        };
        fm_loss(n, &b, &fm_idx).unwrap() + cfg.lambda * cons
    }
}

#[test]
fn criterion_04_gradient_fidelity() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng::substream(4, tag::FUZZ, 0);
    let mut worst: f64 = 0.0;
    let mut with_anchors = 0;
    for case in 0..50u64 {
        let d = r.random_range(1..=3);
        let hidden = r.random_range(1..=3);
        let mut sizes = vec![d + 3];
        sizes.extend((0..hidden).map(|_| r.random_range(3..=8)));
        sizes.push(d);
        let activation = if case % 5 == 4 { Activation::Identity } else { Activation::Tanh };
        let feature_layer = r.random_range(1..=hidden);
        let net = VelocityNet::new(&sizes, activation, feature_layer, case).unwrap();
        let n = r.random_range(4..=12);
        let x0 = Matrix::from_vec(n, d, rng::normal_vec(&mut r, n * d)).unwrap();
        let t: Vec<f64> = (0..n)
            .map(|i| if i % 3 == 0 { r.random_range(0.001..0.02) } else { r.random_range(0.02..1.0) })
            .collect();
        let b = make_batch(random_schedule(&mut r), x0, vec![0; n], t, case).unwrap();
        let cfg = LcfConfig {
            lambda: r.random_range(0.1..2.0),
            tau: r.random_range(0.2..1.0),
            cons_denominator: [ConsDenominator::InfoNce, ConsDenominator::NegativesOnly, ConsDenominator::WholeBank]
                [case as usize % 3],
            reuse_eps_for_anchor_positive: case % 2 == 0,
            ..LcfConfig::default()
        };
        with_anchors += usize::from(!split_batch(&b, cfg.t_min).1.is_empty());
        let (_, g) = grad(&net, &b, &LocalContrastiveFlow { cfg }).unwrap();
        let fd = fd_grad(&net, &frozen_lcf(&net, &b, &cfg));
        worst = worst.max(max_rel_err(&g, &fd));
    }
    let ok = worst < 1e-4 && with_anchors == 50;
    let detail = format!("max relative error {worst:.2e} over 50 nets, {with_anchors} with contrastive anchors (tol 1e-4)");
    assert!(report("4", ok, &detail, start.elapsed(), Duration::from_secs(60)));
}

#[test]
fn criterion_05_gd_complexity_law() {
    let _g = serial();
    let start = Instant::now();
    let k10 = gd_complexity(10.0, 1e-3, 8).unwrap();
    let k100 = gd_complexity(100.0, 1e-3, 8).unwrap();
    let ratios: Vec<f64> = [10.0, 50.0, 100.0, 500.0]
        .iter()
        .map(|&kappa| gd_complexity(kappa, 1e-3, 8).unwrap() as f64 / (kappa * (1e3f64).ln()))
        .collect();
    let ok = k10 == 66 && k100 == 688 && ratios.iter().all(|r| (0.5..=1.5).contains(r));
    let detail = format!("gd(10)={k10}, gd(100)={k100}, ratios {ratios:.3?} in [0.5, 1.5]");
    assert!(report("5", ok, &detail, start.elapsed(), Duration::from_secs(10)));
}

struct SharedRuns {
    fig: Figure1,
    took: Duration,
}

const LOW_WINDOW: (f64, f64) = (0.01, 0.02);
const MID_WINDOW: (f64, f64) = (0.4, 0.5);

/// Five seeds of the default configuration in both modes, 2000 steps each.
fn shared_runs() -> &'static SharedRuns {
    static RUNS: OnceLock<SharedRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let base = TrainConfig {
            steps: Some(2000),
            ..TrainConfig::default()
        };
        let spec = Figure1Spec {
            lcf: TrainConfig {
                mode: Mode::Lcf,
                ..base.clone()
            },
            baseline: base,
            seeds: (0..5).collect(),
            probe_grid: vec![0.01, 0.05, 0.1, 0.3, 0.6, 0.9],
            windows: vec![LOW_WINDOW, MID_WINDOW],
            gn_samples: 64,
            probe: ProbeConfig::default(),
        };
        let fig = run_figure1(&spec).unwrap();
        SharedRuns {
            fig,
            took: start.elapsed(),
        }
    })
}

fn mid(w: (f64, f64)) -> f64 {
    0.5 * (w.0 + w.1)
}

#[test]
fn criterion_06_gn_conditioning_growth() {
    let _g = serial();
    let start = Instant::now();
    let runs = shared_runs();
    let conv = &runs.fig.convergence;
    let low = Figure1::cell(conv, Mode::Baseline, mid(LOW_WINDOW)).unwrap();
    let high = Figure1::cell(conv, Mode::Baseline, mid(MID_WINDOW)).unwrap();
    let ratio = low.mean / high.mean;
    let detail = format!(
        "mean kappa(G) over {} seeds: {:.3e} on (0.01, 0.02) vs {:.3e} on (0.4, 0.5), ratio {ratio:.1} (need >= 10)",
        low.n, low.mean, high.mean
    );
    let elapsed = start.elapsed().max(runs.took);
    assert!(report("6", ratio >= 10.0 && low.n == 5, &detail, elapsed, Duration::from_secs(600)));
}

#[test]
fn criterion_08_figure1_patterns() {
    let _g = serial();
    let start = Instant::now();
    let runs = shared_runs();
    let fig = &runs.fig;
    let base_loss: Vec<_> = fig.loss.iter().filter(|c| c.mode == Mode::Baseline).collect();
    let lowest = base_loss[0];
    let middle = base_loss[base_loss.len() / 2];
    let a = lowest.mean > middle.mean;
    let acc = |mode, t| Figure1::cell(&fig.probe, mode, t).unwrap().mean;
    let (b001, b03, l001) = (acc(Mode::Baseline, 0.01), acc(Mode::Baseline, 0.3), acc(Mode::Lcf, 0.01));
    let c_base = b03 > b001;
    let c_lcf = l001 >= b001;
    let verdict = |ok: bool| if ok { "ok" } else { "not met" };
    let detail = format!(
        "(a) baseline loss bin [{:.2}, {:.2}] {:.3} > bin [{:.2}, {:.2}] {:.3}: {}; \
         (c) baseline acc t=0.3 {b03:.4} > t=0.01 {b001:.4}: {}; LCF acc t=0.01 {l001:.4} >= baseline {b001:.4}: {}",
        lowest.t - 0.05,
        lowest.t + 0.05,
        lowest.mean,
        middle.t - 0.05,
        middle.t + 0.05,
        middle.mean,
        verdict(a),
        verdict(c_base),
        verdict(c_lcf),
    );
    let elapsed = start.elapsed().max(runs.took);
    assert!(report("8", a && c_base && c_lcf, &detail, elapsed, Duration::from_secs(1800)));
}

#[test]
fn criterion_07_bound_fuzzing() {
    let _g = serial();
    let start = Instant::now();
    let p4 = fuzz(check_prop4, 10_000, 7).unwrap();
    let p5 = fuzz(check_prop5, 10_000, 7).unwrap();
    let v4 = p4.iter().filter(|r| !r.holds).count();
    let v5 = p5.iter().filter(|r| !r.holds).count();
    let detail = format!("violations: Jacobian lower bound {v4}/10000, class-mean separation bound {v5}/10000");
    assert!(report("7", v4 == 0 && v5 == 0, &detail, start.elapsed(), Duration::from_secs(120)));
}

#[test]
fn criterion_09_sampler_oracle() {
    let _g = serial();
    let start = Instant::now();
    let sigma = 0.5;
    let x1 = noise_matrix(9, tag::SAMPLE, 10_000, 1);
    let schedule = Schedule::Rectified;
    let cfg = SamplerConfig {
        steps: 200,
        ..SamplerConfig::default()
    };
    let out = euler_sample(|x, t| gaussian_velocity(schedule, sigma, x, t), &x1, cfg).unwrap();
    let v: Vec<f64> = out.iter_rows().map(|r| r[0]).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    let rel = (var - 0.25).abs() / 0.25;
    let detail = format!("sample variance {var:.5} vs 0.25, relative error {:.2}% (tol 5%)", 100.0 * rel);
    assert!(report("9", rel < 0.05, &detail, start.elapsed(), Duration::from_secs(30)));
}

fn lowflow(args: &[&str], threads: usize) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_lowflow"))
        .args(args)
        .arg("--threads")
        .arg(threads.to_string())
        .env_remove("LOWFLOW_SEED")
        .output()
        .unwrap();
    assert!(out.status.success(), "lowflow {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn rel(root: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(root).unwrap().to_path_buf()
}

#[test]
fn criterion_10_cli_determinism() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cfg = a.join("small.cfg");
    std::fs::write(
        &cfg,
        "mode = lcf\nsteps = 40\nbatch_size = 64\nseed = 5\nlayer_sizes = 11, 12, 12, 8\ndataset.n = 300\n",
    )
    .unwrap();
    let ckpt = a.join("train/ckpt.txt");
    let runs: Vec<(Vec<String>, PathBuf)> = vec![
        (
            vec!["sweep-kappa", "--schedule", "cosine", "--t-grid", "0.5,0.1,0.02", "--dim", "3"]
                .into_iter()
                .map(String::from)
                .chain(["--mc-samples", "100000", "--seed", "1", "--out", &s(&a.join("sweep.csv"))].map(String::from))
                .collect(),
            a.join("sweep.csv.manifest.json"),
        ),
        (
            ["train", "--config", &s(&cfg), "--out", &s(&a.join("train"))].map(String::from).to_vec(),
            a.join("train/manifest.json"),
        ),
        (
            ["probe", "--ckpt", &s(&ckpt), "--config", &s(&cfg), "--out", &s(&a.join("probe.csv"))]
                .map(String::from)
                .to_vec(),
            a.join("probe.csv.manifest.json"),
        ),
        (
            ["sample", "--ckpt", &s(&ckpt), "--n", "200", "--out", &s(&a.join("sample.csv"))].map(String::from).to_vec(),
            a.join("sample.csv.manifest.json"),
        ),
        (
            ["sample", "--gaussian-sigma", "0.5", "--dim", "2", "--n", "300", "--out", &s(&a.join("gauss.csv"))]
                .map(String::from)
                .to_vec(),
            a.join("gauss.csv.manifest.json"),
        ),
        (
            ["diagnose", "gn", "--ckpt", &s(&ckpt), "--config", &s(&cfg), "--window", "0.01", "0.02"]
                .into_iter()
                .map(String::from)
                .chain(["--samples", "16", "--out", &s(&a.join("gn.csv"))].map(String::from))
                .collect(),
            a.join("gn.csv.manifest.json"),
        ),
        (
            ["diagnose", "probe", "--ckpt", &s(&ckpt), "--config", &s(&cfg), "--out", &s(&a.join("dprobe.csv"))]
                .map(String::from)
                .to_vec(),
            a.join("dprobe.csv.manifest.json"),
        ),
        (
            ["diagnose", "prop", "--which", "4", "--trials", "300", "--out", &s(&a.join("p4.csv"))].map(String::from).to_vec(),
            a.join("p4.csv.manifest.json"),
        ),
        (
            ["diagnose", "prop", "--which", "5", "--trials", "300", "--out", &s(&a.join("p5.csv"))].map(String::from).to_vec(),
            a.join("p5.csv.manifest.json"),
        ),
        (
            ["diagnose", "gdk", "--kappa", "10", "--eps", "1e-3", "--out", &s(&a.join("gdk.csv"))].map(String::from).to_vec(),
            a.join("gdk.csv.manifest.json"),
        ),
        (
            ["figure1", "--baseline", &s(&cfg), "--lcf", &s(&cfg), "--gn-samples", "8", "--probe-epochs", "30"]
                .into_iter()
                .map(String::from)
                .chain(["--out", &s(&a.join("fig"))].map(String::from))
                .collect(),
            a.join("fig/manifest.json"),
        ),
    ];

    let mut compared = 0;
    let mut mismatched = Vec::new();
    for (args, manifest) in &runs {
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        lowflow(&argv, 1);
        let m = RunManifest::load(manifest).unwrap();
        assert!(!m.outputs.is_empty(), "{} listed no outputs", m.subcommand);
        // replay into b/, mirroring a/'s layout
        let recorded_out = m.config.out().unwrap();
        let target = b.join(rel(&a, recorded_out));
        lowflow(&["replay", &s(manifest), "--out", &s(&target)], 4);
        for f in &m.outputs {
            let again = b.join(rel(&a, f));
            compared += 1;
            if std::fs::read(f).unwrap() != std::fs::read(&again).unwrap() {
                mismatched.push(rel(&a, f));
            }
        }
    }
    let detail = format!(
        "{} subcommand runs, {compared} output files replayed with 4 threads vs 1, {} differ {:?}",
        runs.len(),
        mismatched.len(),
        mismatched
    );
    assert!(report("10", mismatched.is_empty() && compared > 0, &detail, start.elapsed(), Duration::from_secs(600)));
}
