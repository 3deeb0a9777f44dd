//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use gyromix::evaluation::{evaluate_model, overlap_report, p_profile, RetrievalMetric};
use gyromix::geometry::{hyp_dist, mobius_add, norm};
use gyromix::grad::{grad_decomposition, loss_grad_embeddings};
use gyromix::loss::{
    cosine_matrix, hyperbolic_matrix, infonce_loss, map_rows_to_ball, mix_loss, mode_distance_matrix,
    pairwise_ce_loss, triplet_weights,
};
use gyromix::parallel::with_threads;
use gyromix::reports::{write_overlap, write_p_profile, write_recall, write_trace};
use gyromix::training::data::synth_hierarchy;
use gyromix::training::{sample_batch, train};
use gyromix::{BallConfig, LossConfig, LossMode, PairedBatch, SynthSpec, TrainConfig};
use ndarray::Axis;

const DATA_SEED: u64 = 7;
const TRAIN_SEED: u64 = 1;
const PROFILE_SEED: u64 = 99;
const PROFILE_BATCHES: usize = 32;
const RECALL_TARGET: f64 = 0.90;
const OVERLAP_M: usize = 6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = o.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" (limit {:.0}s)", l.as_secs_f64()));
    println!(
        "criterion {id} [{name}]: {} — {}; {:.2}s{budget}",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64()
    );
    pass
}

fn geometry_conformance() -> Outcome {
    let mut rng = common::rng(1001);
    let mut worst_sym = 0.0f64;
    let mut worst_tri = f64::NEG_INFINITY;
    let mut worst_self = 0.0f64;
    let mut negative = 0;
    for c in [0.1, 1.0] {
        let cfg = BallConfig::with_curvature(c).unwrap();
        let rad = 0.99 / c.sqrt();
        for _ in 0..10_000 {
            let x = common::in_ball(&mut rng, 3, rad);
            let y = common::in_ball(&mut rng, 3, rad);
            let z = common::in_ball(&mut rng, 3, rad);
            let dxy = hyp_dist(&x, &y, &cfg).unwrap();
            let dyx = hyp_dist(&y, &x, &cfg).unwrap();
            let dyz = hyp_dist(&y, &z, &cfg).unwrap();
            let dxz = hyp_dist(&x, &z, &cfg).unwrap();
            worst_sym = worst_sym.max((dxy - dyx).abs());
            worst_tri = worst_tri.max(dxz - dxy - dyz);
            worst_self = worst_self.max(hyp_dist(&x, &x, &cfg).unwrap());
            negative += [dxy, dyz, dxz].iter().filter(|&&d| d < 0.0).count();
        }
    }
    let axioms = worst_sym <= 1e-10 && worst_tri <= 1e-9 && worst_self <= 1e-12 && negative == 0;

    let tiny = BallConfig::with_curvature(1e-6).unwrap();
    let mut worst_rec = 0.0f64;
    for _ in 0..1000 {
        let x = common::in_ball(&mut rng, 4, 0.9);
        let y = common::in_ball(&mut rng, 4, 0.9);
        let e: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let want = 2.0 * norm(&e);
        worst_rec = worst_rec.max((hyp_dist(&x, &y, &tiny).unwrap() - want).abs() / want);
    }

    let unit = BallConfig::with_curvature(1.0).unwrap();
    let mut worst_closed = 0.0f64;
    for _ in 0..200 {
        let y = common::in_ball(&mut rng, 3, 0.99);
        let o = [0.0; 3];
        for (a, b) in [(mobius_add(&o, &y, &unit).unwrap(), &y), (mobius_add(&y, &o, &unit).unwrap(), &y)] {
            for (p, q) in a.iter().zip(b.iter()) {
                worst_closed = worst_closed.max((p - q).abs());
            }
        }
    }
    for (a, b) in [(0.5, 0.5), (0.3, -0.7), (0.9, 0.05), (-0.2, -0.6)] {
        let z = mobius_add(&[a, 0.0], &[b, 0.0], &unit).unwrap();
        worst_closed = worst_closed.max((z[0] - (a.atanh() + b.atanh()).tanh()).abs());
    }
    let closed = worst_closed <= 1e-12;

    outcome(
        axioms && worst_rec < 1e-3 && closed,
        format!(
            "2×10⁴ triples: max asym {worst_sym:.1e}, max triangle excess {worst_tri:.1e}, max d(x,x) {worst_self:.1e}; \
             c=1e-6 recovery max rel err {worst_rec:.1e}; closed-form max err {worst_closed:.1e}"
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let mut rng = common::rng(1002);
    let settings: Vec<(LossMode, f64, f64)> = vec![
        (LossMode::Euclidean, 0.1, 0.0),
        (LossMode::Hyperbolic, 0.1, 0.0),
        (LossMode::Hyperbolic, 1.0, 0.0),
        (LossMode::Mixed, 0.1, 1.0),
        (LossMode::Mixed, 0.1, 3.0),
        (LossMode::Mixed, 0.1, 8.0),
        (LossMode::ConvexCombo, 0.1, 0.0),
    ];
    let mut batches = 0;
    let mut worst_rel = 0.0f64;
    let mut worst_dec = 0.0f64;
    for tau in [0.05, 0.2, 0.5] {
        for &(mode, c, lambda) in &settings {
            let n = 3 + batches % 2;
            let ball = BallConfig::with_curvature(c).unwrap();
            let out = common::heads(&mut rng, 2 * n, 4, 1.2);
            let cfg = LossConfig {
                mode,
                tau,
                lambda,
                combo_weight: 0.4,
            };
            let pairing = common::pairing(n);
            let g = loss_grad_embeddings(&out, &pairing, &cfg, &ball).unwrap();
            let analytic: Vec<f64> = [g.euclid.as_ref(), g.hyper.as_ref()].into_iter().flatten().flat_map(|a| a.iter().copied()).collect();
            let numeric = common::hp::fd_gradient(&out, &pairing, &cfg, &ball, 1e-9);
            assert_eq!(analytic.len(), numeric.len());
            for (a, b) in analytic.iter().zip(&numeric) {
                worst_rel = worst_rel.max((a - b).abs() / a.abs().max(b.abs()).max(1e-8));
            }
            let (re, rh) = grad_decomposition(&out, &pairing, &cfg, &ball).unwrap().reassemble();
            for (a, b) in [(g.euclid, re), (g.hyper, rh)] {
                if let (Some(a), Some(b)) = (a, b) {
                    worst_dec = worst_dec.max((&a - &b).iter().fold(0.0, |m: f64, v| m.max(v.abs())));
                }
            }
            batches += 1;
        }
    }
    outcome(
        batches >= 20 && worst_rel < 1e-4 && worst_dec <= 1e-10,
        format!("{batches} batches: central-difference max rel err {worst_rel:.1e}, decomposition max abs diff {worst_dec:.1e}"),
    )
}

fn weight_invariants() -> Outcome {
    let mut rng = common::rng(1003);
    let taus = [0.05, 0.1, 0.2, 0.5, 1.0];
    let ball = BallConfig::with_curvature(0.1).unwrap();
    let mut worst_sum = 0.0f64;
    let mut out_of_range = 0;
    let mut sharpen_violations = 0;
    for b in 0..100 {
        let n = 2 + b % 5;
        let pairing = common::pairing(n);
        let heads = common::heads(&mut rng, 2 * n, 4, 1.0);
        let mode = [LossMode::Euclidean, LossMode::Hyperbolic, LossMode::Mixed][b % 3];
        let cfg = LossConfig {
            mode,
            ..LossConfig::default()
        };
        let d = mode_distance_matrix(&heads, &cfg, &ball).unwrap();
        let mut prev = vec![f64::INFINITY; 2 * n];
        for &tau in &taus {
            let w = triplet_weights(&d, &pairing, tau).unwrap();
            for i in 0..2 * n {
                let all: Vec<f64> = w.p_neg.row(i).iter().copied().chain([w.p_pos[i]]).collect();
                out_of_range += all.iter().filter(|p| !(0.0..=1.0).contains(*p)).count();
                worst_sum = worst_sum.max((all.iter().sum::<f64>() - 1.0).abs());
                let best = (0..2 * n)
                    .filter(|&k| k != i)
                    .min_by(|&a, &b| d.d[[i, a]].total_cmp(&d.d[[i, b]]))
                    .unwrap();
                let top = if best == pairing.pos(i) { w.p_pos[i] } else { w.p_neg[[i, best]] };
                if top > prev[i] {
                    sharpen_violations += 1;
                }
                prev[i] = top;
            }
        }
    }
    outcome(
        out_of_range == 0 && worst_sum <= 1e-9 && sharpen_violations == 0,
        format!(
            "100 batches: {out_of_range} weights outside [0,1], max |Σp − 1| {worst_sum:.1e}, \
             {sharpen_violations} sharpening violations"
        ),
    )
}

fn loss_oracles() -> Outcome {
    let mut rng = common::rng(1004);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 2..=4 {
        let pairing = common::pairing(n);
        for tau in [0.2, 0.5, 1.0] {
            let z = common::gaussian(&mut rng, 2 * n, 5, 1.0);
            let dc = cosine_matrix(z.view()).unwrap();
            let naive_dc = common::naive_matrix(&z, common::naive_cos);
            worst = worst.max(common::rel_err(
                pairwise_ce_loss(&dc, &pairing, tau).unwrap(),
                common::naive_ce(&naive_dc, &pairing, tau),
            ));
            let batch = PairedBatch::new(z.clone(), pairing.clone()).unwrap();
            worst = worst.max(common::rel_err(
                infonce_loss(&batch, tau).unwrap(),
                common::naive_infonce(&z, &pairing, tau),
            ));
            for c in [0.1, 1.0] {
                let ball = BallConfig::with_curvature(c).unwrap();
                let zh = map_rows_to_ball(common::gaussian(&mut rng, 2 * n, 5, 1.0).view(), &ball);
                let naive_dh = common::naive_matrix(&zh, |a, b| hyp_dist(a, b, &ball).unwrap());
                let dh = hyperbolic_matrix(zh.view(), &ball).unwrap();
                worst = worst.max(common::rel_err(
                    pairwise_ce_loss(&dh, &pairing, tau).unwrap(),
                    common::naive_ce(&naive_dh, &pairing, tau),
                ));
                for lambda in [1.0, 3.0, 8.0] {
                    worst = worst.max(common::rel_err(
                        mix_loss(z.view(), zh.view(), &pairing, tau, lambda, &ball).unwrap(),
                        common::naive_ce(&(&naive_dc + &(&naive_dh * lambda)), &pairing, tau),
                    ));
                    cases += 1;
                }
                cases += 1;
            }
            cases += 2;
        }
    }
    outcome(worst <= 1e-12, format!("{cases} cases with K ≤ 8: max rel err {worst:.1e}"))
}

/// Per-mode result of the desk-scale run, plus the CSV files it wrote.
struct ModeRun {
    mode: LossMode,
    recall1: f64,
    train_secs: f64,
    /// Fraction of profiled anchors whose largest negative weight is ≥ 5× uniform.
    peaked: f64,
}

struct Pipeline {
    runs: Vec<ModeRun>,
    mean_jaccard: f64,
    disagreeing: usize,
}

fn desk_configs() -> Vec<TrainConfig> {
    let make = |mode: LossMode, tau: f64| {
        let mut cfg = TrainConfig {
            steps: 500,
            seed: TRAIN_SEED,
            ..TrainConfig::default()
        };
        cfg.loss.mode = mode;
        cfg.loss.tau = tau;
        cfg.loss.lambda = 3.0;
        cfg.ball.c = 0.1;
        cfg
    };
    vec![
        make(LossMode::Euclidean, 0.05),
        make(LossMode::Hyperbolic, 0.2),
        make(LossMode::Mixed, 0.2),
    ]
}

/// Trains the three modes, evaluates them and writes every report under `dir`.
fn desk_pipeline(dir: &Path) -> Pipeline {
    let ds = synth_hierarchy(&SynthSpec::default(), &mut common::rng(DATA_SEED)).unwrap();
    let (tr, ev) = ds.split_by_class().unwrap();
    let mut runs = Vec::new();
    let mut mixed_model = None;
    for cfg in desk_configs() {
        let mode = cfg.loss.mode;
        let name = mode.as_str();
        let start = Instant::now();
        let out = train(&tr, &cfg).unwrap();
        let train_secs = start.elapsed().as_secs_f64();
        let metric = RetrievalMetric::for_mode(mode);
        let rep = evaluate_model(&out.params, &ev, metric, cfg.loss.lambda, &cfg.ball, &[1, 2, 4, 8]).unwrap();
        write_trace(&dir.join(format!("trace_{name}.csv")), &out.trace).unwrap();
        write_recall(&dir.join(format!("recall_{name}.csv")), &rep).unwrap();

        // profile on full-class batches drawn from the whole dataset
        let mut brng = common::rng(PROFILE_SEED);
        let (mut peaked, mut anchors) = (0, 0);
        for b in 0..PROFILE_BATCHES {
            let batch = sample_batch(&ds, ds.class_index().len(), &mut brng).unwrap();
            let heads = out.params.encode(ds.x.select(Axis(0), &batch.rows).view()).unwrap();
            let prof = p_profile(&heads, &batch.pairing, &cfg.loss, &cfg.ball).unwrap();
            let level = 5.0 * prof.uniform_level();
            for a in 0..batch.pairing.len() {
                anchors += 1;
                if prof.max_p(a) >= level {
                    peaked += 1;
                }
            }
            write_p_profile(&dir.join(format!("p_profile_{name}_{b}.csv")), &prof).unwrap();
        }
        runs.push(ModeRun {
            mode,
            recall1: rep.recall[0],
            train_secs,
            peaked: peaked as f64 / anchors as f64,
        });
        if mode == LossMode::Mixed {
            mixed_model = Some((out.params, cfg));
        }
    }

    let (params, cfg) = mixed_model.unwrap();
    let heads = params.encode(ev.x.view()).unwrap();
    let ze = heads.euclid.clone().unwrap();
    let zh = heads.ball_points(&cfg.ball).unwrap();
    let ov = overlap_report(&ze, &zh, &ev.y, OVERLAP_M, &cfg.ball).unwrap();
    write_overlap(&dir.join("overlap.csv"), &ov).unwrap();
    Pipeline {
        runs,
        mean_jaccard: ov.mean_jaccard,
        disagreeing: ov.anchors.iter().filter(|a| !a.only_e.is_empty() || !a.only_h.is_empty()).count(),
    }
}

fn desk_learning(p: &Pipeline) -> Outcome {
    let total: f64 = p.runs.iter().map(|r| r.train_secs).sum();
    let pass = p.runs.iter().all(|r| r.recall1 >= RECALL_TARGET) && total < 60.0;
    let parts: Vec<String> = p
        .runs
        .iter()
        .map(|r| format!("{} R@1 {:.3} ({:.1}s)", r.mode.as_str(), r.recall1, r.train_secs))
        .collect();
    outcome(pass, format!("{}; target ≥ {RECALL_TARGET}, 500 steps, 1 thread", parts.join(", ")))
}

fn diagnostics(p: &Pipeline) -> Outcome {
    let profiled = p.runs.iter().all(|r| r.peaked >= 0.5);
    let overlap = p.mean_jaccard < 1.0 && p.disagreeing > 0;
    let parts: Vec<String> = p
        .runs
        .iter()
        .map(|r| format!("{} {:.0}%", r.mode.as_str(), 100.0 * r.peaked))
        .collect();
    outcome(
        profiled && overlap,
        format!(
            "anchors with max p ≥ 5× uniform: {} (need ≥ 50%); top-{OVERLAP_M} overlap mean Jaccard {:.3}, \
             {} anchors with differing hard negatives",
            parts.join(", "),
            p.mean_jaccard,
            p.disagreeing
        ),
    )
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let mut names: Vec<String> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok())
        .collect();
    outcome(
        differing.is_empty() && !names.is_empty(),
        format!("{} CSV files compared, {} differ {:?}", names.len(), differing.len(), differing),
    )
}

// Runs without the libtest harness so the criterion lines are never captured.
fn main() {
    let mut all = true;
    all &= report(1, "geometry conformance", Some(Duration::from_secs(5)), geometry_conformance);
    all &= report(2, "gradient correctness", Some(Duration::from_secs(30)), gradient_correctness);
    all &= report(3, "weight invariants", None, weight_invariants);
    all &= report(4, "loss oracle equivalence", None, loss_oracles);

    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let pipeline = with_threads(Some(1), || desk_pipeline(first.path()));
    all &= report(5, "desk-scale learning", None, || desk_learning(&pipeline));
    all &= report(6, "diagnostic reproduction", None, || diagnostics(&pipeline));
    with_threads(Some(1), || desk_pipeline(second.path()));
    all &= report(7, "determinism", None, || determinism(first.path(), second.path()));
    if !all {
        eprintln!("at least one acceptance criterion failed");
        std::process::exit(1);
    }
}
