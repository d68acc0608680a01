//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use karcher_merge::delta::{dare_drop, della_drop, elect_signs, trim_topk, SparsifySpec};
use karcher_merge::diagnostics::{
    covariance_spectrum, effective_rank, mean_activation_variance, numerical_rank,
    participation_ratio, stable_rank, weight_norm_report, ActivationMatrix,
};
use karcher_merge::merge::{
    merge_dare, merge_della, merge_karcher, merge_lerp, merge_multislerp, merge_slerp,
    merge_task_arithmetic, merge_ties, Combine, DropMerge, MethodKind,
};
use karcher_merge::rng::{keyed_stream, tensor_stream, Stream};
use karcher_merge::sphere::{frechet_objective, karcher_mean, KarcherConfig, UnitVector};
use karcher_merge::tensor_io::{
    write_checkpoint, Checkpoint, DType, LoadOptions, Precision, TensorRecord, WriteOptions,
};
use karcher_merge_cli::commands::{cmd_diagnose, DiagnoseArgs};
use karcher_merge_cli::{cmd_merge, MergeArgs};
use nalgebra::DMatrix;
use rand::RngExt;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn gaussian(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

/// Haar-distributed orthogonal matrix from the QR factorization of a
/// Gaussian matrix.
fn orthogonal(rng: &mut Stream, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// Independent sphere log via arccos.
fn log_map(x: &[f64], u: &[f64]) -> Vec<f64> {
    let c = dot(x, u).clamp(-1.0, 1.0);
    let theta = c.acos();
    let w: Vec<f64> = u.iter().zip(x).map(|(ui, xi)| ui - c * xi).collect();
    let wn = norm(&w);
    if wn == 0.0 {
        return vec![0.0; x.len()];
    }
    w.iter().map(|v| v * theta / wn).collect()
}

fn geodesic(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos()
}

/// `m` random unit points within `max_angle` of a random pole, with random
/// positive weights.
fn cap_instance(rng: &mut Stream, d: usize, m: usize, max_angle: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let pole = unit(&gaussian(rng, d));
    let mut points = Vec::with_capacity(m);
    while points.len() < m {
        let spread = rng.random_range(0.05..1.5);
        let cand: Vec<f64> = pole
            .iter()
            .zip(gaussian(rng, d))
            .map(|(p, g)| p + spread * g / (d as f64).sqrt())
            .collect();
        let cand = unit(&cand);
        if geodesic(&cand, &pole) < max_angle {
            points.push(cand);
        }
    }
    let weights = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    (points, weights)
}

fn to_units(points: &[Vec<f64>]) -> Vec<UnitVector> {
    points
        .iter()
        .map(|p| UnitVector::new(p.clone()).unwrap())
        .collect()
}

fn slerp_reduction() -> Outcome {
    let started = Instant::now();
    let mut rng = keyed_stream(1, "acceptance/slerp", 0);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.random_range(3..=4096);
        let a: Vec<f64> = {
            let s = rng.random_range(0.1..10.0);
            unit(&gaussian(&mut rng, n)).iter().map(|v| v * s).collect()
        };
        let b: Vec<f64> = {
            let s = rng.random_range(0.1..10.0);
            unit(&gaussian(&mut rng, n)).iter().map(|v| v * s).collect()
        };
        let (k, _) = merge_karcher(&[&a, &b], &[1.0, 1.0], &KarcherConfig::default()).unwrap();
        let s = merge_slerp(&a, &b, 0.5).unwrap();
        // Relative to each element, floored at the RMS element size.
        let rms = norm(&s) / (n as f64).sqrt();
        for (x, y) in k.iter().zip(&s) {
            let rel = (x - y).abs() / y.abs().max(rms);
            worst = worst.max(rel);
            ensure!(
                rel <= 1e-6,
                "case {case} (n = {n}): karcher {x} vs slerp {y}"
            );
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2} s (limit 10 s)");
    Ok(format!("200 pairs, max rel err {worst:.1e}, {secs:.2} s"))
}

fn stationarity() -> Outcome {
    let mut rng = keyed_stream(2, "acceptance/stationarity", 0);
    let cfg = KarcherConfig::default();
    let (mut converged, mut worst) = (0, 0.0f64);
    for case in 0..500 {
        let m = rng.random_range(2..=11);
        let d = rng.random_range(2..=64);
        let (points, weights) = cap_instance(&mut rng, d, m, 0.95 * std::f64::consts::FRAC_PI_2);
        let res = karcher_mean(&to_units(&points), &weights, &cfg).unwrap();
        if !res.converged {
            continue;
        }
        converged += 1;
        let total: f64 = weights.iter().sum();
        let x = res.mean.as_slice();
        let mut g = vec![0.0; d];
        for (p, w) in points.iter().zip(&weights) {
            for (gi, li) in g.iter_mut().zip(log_map(x, p)) {
                *gi += w / total * li;
            }
        }
        let r = norm(&g);
        worst = worst.max(r);
        ensure!(
            r < cfg.tol,
            "case {case} (m = {m}, d = {d}): residual {r:.3e}"
        );
    }
    ensure!(converged > 0, "no instance converged");
    Ok(format!(
        "{converged}/500 converged, max residual {worst:.1e}"
    ))
}

fn brute_force_barycenter() -> Outcome {
    let started = Instant::now();
    let step = 0.5f64.to_radians();
    let grid: Vec<[f64; 3]> = {
        let mut g = Vec::new();
        for i in 0..=360 {
            let theta = i as f64 * step;
            for j in 0..720 {
                let phi = j as f64 * step;
                g.push([
                    theta.sin() * phi.cos(),
                    theta.sin() * phi.sin(),
                    theta.cos(),
                ]);
                if i == 0 || i == 360 {
                    break;
                }
            }
        }
        g
    };
    let slack = step * step;
    let mut rng = keyed_stream(3, "acceptance/grid", 0);
    let (mut worst_dist, mut worst_gap) = (0.0f64, f64::NEG_INFINITY);
    for case in 0..50 {
        let m = if case % 2 == 0 { 3 } else { 5 };
        let (points, weights) = cap_instance(&mut rng, 3, m, 0.95 * std::f64::consts::FRAC_PI_2);
        let total: f64 = weights.iter().sum();
        let objective = |x: &[f64]| -> f64 {
            points
                .iter()
                .zip(&weights)
                .map(|(p, w)| w / total * geodesic(x, p).powi(2))
                .sum()
        };
        let res = karcher_mean(&to_units(&points), &weights, &KarcherConfig::default()).unwrap();
        ensure!(res.converged, "case {case}: solver did not converge");
        let fixed = res.mean.as_slice();
        let (best, best_f) = grid
            .iter()
            .map(|g| (g, objective(g)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let dist = geodesic(best, fixed).to_degrees();
        let f_fixed = objective(fixed);
        let lib_f = frechet_objective(&res.mean, &to_units(&points), &weights).unwrap();
        ensure!(
            (lib_f - f_fixed).abs() < 1e-9,
            "case {case}: objective {lib_f} vs oracle {f_fixed}"
        );
        worst_dist = worst_dist.max(dist);
        worst_gap = worst_gap.max(f_fixed - best_f);
        ensure!(
            dist <= 1.0,
            "case {case}: grid minimizer {dist:.3} deg from fixed point"
        );
        ensure!(
            f_fixed <= best_f + slack,
            "case {case}: fixed-point objective {f_fixed} above grid minimum {best_f} + {slack:.2e}"
        );
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s (limit 60 s)");
    Ok(format!(
        "50 instances, max grid offset {worst_dist:.3} deg, max objective excess {worst_gap:.1e}, {secs:.1} s"
    ))
}

fn single(name: &str, data: Vec<f64>) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.insert(TensorRecord::new(name, vec![data.len()], DType::F64, data).unwrap())
        .unwrap();
    c
}

/// Shrinkage ratios of Karcher and LERP merges of `sources` with equal weights.
fn shrinkage(sources: &[Vec<f64>]) -> (f64, f64, f64, f64) {
    let refs: Vec<&[f64]> = sources.iter().map(Vec::as_slice).collect();
    let w = vec![1.0; sources.len()];
    let (k, _) = merge_karcher(&refs, &w, &KarcherConfig::default()).unwrap();
    let l = merge_lerp(&refs, &w).unwrap();
    let cks: Vec<Checkpoint> = sources.iter().map(|s| single("w", s.clone())).collect();
    let ck_refs: Vec<&Checkpoint> = cks.iter().collect();
    let kr = weight_norm_report(&ck_refs, &w, &single("w", k.clone())).unwrap()[0].shrinkage_ratio;
    let lr = weight_norm_report(&ck_refs, &w, &single("w", l.clone())).unwrap()[0].shrinkage_ratio;
    (norm(&k), norm(&l), kr, lr)
}

fn norm_preservation() -> Outcome {
    let mut rng = keyed_stream(4, "acceptance/norms", 0);
    let d = 32;
    for m in 2..=11 {
        let q = orthogonal(&mut rng, d);
        let sources: Vec<Vec<f64>> = (0..m)
            .map(|i| q.column(i).iter().copied().collect())
            .collect();
        let (kn, ln, kr, lr) = shrinkage(&sources);
        let want = 1.0 / (m as f64).sqrt();
        ensure!(
            (ln - want).abs() < 1e-9,
            "m = {m}: lerp norm {ln} vs {want}"
        );
        ensure!((kn - 1.0).abs() < 1e-6, "m = {m}: karcher norm {kn}");
        ensure!((kr - 1.0).abs() < 1e-6, "m = {m}: karcher ratio {kr}");
        ensure!(
            (lr - want).abs() < 1e-9,
            "m = {m}: lerp ratio {lr} vs {want}"
        );
    }
    Ok("m = 2..11: lerp norm 1/sqrt(m), karcher norm 1".into())
}

fn shrinkage_across_m() -> Outcome {
    let mut rng = keyed_stream(5, "acceptance/scaling", 0);
    let mut last_row = String::new();
    for trial in 0..5 {
        let pool: Vec<Vec<f64>> = (0..11).map(|_| unit(&gaussian(&mut rng, 4096))).collect();
        let mut prev = f64::INFINITY;
        let mut row = Vec::new();
        for m in 2..=11 {
            let (_, _, kr, lr) = shrinkage(&pool[..m]);
            ensure!(
                (kr - 1.0).abs() <= 1e-6,
                "trial {trial}, m = {m}: karcher ratio {kr}"
            );
            ensure!(
                lr < prev,
                "trial {trial}, m = {m}: lerp ratio {lr} not below {prev}"
            );
            prev = lr;
            row.push(format!("{lr:.3}"));
        }
        last_row = row.join(" ");
    }
    Ok(format!(
        "karcher ratio 1 for all m; lerp ratio m=2..11: {last_row}"
    ))
}

fn random_task(rng: &mut Stream) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let n = rng.random_range(1..=300);
    let m = rng.random_range(1..=5);
    let base = gaussian(rng, n);
    let experts = (0..m)
        .map(|_| {
            base.iter()
                .zip(gaussian(rng, n))
                .map(|(b, g)| b + 0.1 * g)
                .collect()
        })
        .collect();
    let weights = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
    (base, experts, weights)
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn method_reductions() -> Outcome {
    let mut rng = keyed_stream(6, "acceptance/reductions", 0);
    let mut worst_ms: f64 = 0.0;
    for case in 0..100 {
        let (base, experts, w) = random_task(&mut rng);
        let refs: Vec<&[f64]> = experts.iter().map(Vec::as_slice).collect();
        let seed = rng.random::<u64>();
        let opts = |combine, density| DropMerge {
            combine,
            density,
            seed,
            tensor: "t",
        };

        let dare0 = merge_dare(&base, &refs, &w, 0.0, opts(Combine::Lerp, None)).unwrap();
        let ta = merge_task_arithmetic(&base, &refs, &w, 1.0).unwrap();
        ensure!(
            bits(&dare0) == bits(&ta),
            "case {case}: dare(p = 0) differs from task arithmetic"
        );

        let p = rng.random_range(0.0..0.95);
        let density = rng.random_bool(0.5).then(|| rng.random_range(0.05..=1.0));
        let spec = SparsifySpec {
            drop_rate: p,
            della_window: 0.0,
            ..SparsifySpec::default()
        };
        for combine in [Combine::Lerp, Combine::Ties] {
            let a = merge_della(&base, &refs, &w, &spec, opts(combine, density)).unwrap();
            let b = merge_dare(&base, &refs, &w, p, opts(combine, density)).unwrap();
            ensure!(
                bits(&a) == bits(&b),
                "case {case}: della(window = 0) differs from dare ({combine:?})"
            );
        }

        let n = base.len().max(2);
        let x: Vec<f64> = {
            let s = rng.random_range(0.1..10.0);
            unit(&gaussian(&mut rng, n)).iter().map(|v| v * s).collect()
        };
        let y: Vec<f64> = {
            let s = rng.random_range(0.1..10.0);
            unit(&gaussian(&mut rng, n)).iter().map(|v| v * s).collect()
        };
        let ms = merge_multislerp(&[&x, &y], &[1.0, 1.0]).unwrap();
        let sl = merge_slerp(&x, &y, 0.5).unwrap();
        for (a, b) in ms.iter().zip(&sl) {
            worst_ms = worst_ms.max((a - b).abs());
            ensure!(
                (a - b).abs() <= 1e-9,
                "case {case}: multislerp {a} vs slerp {b}"
            );
        }
    }
    Ok(format!(
        "100 cases: dare(0) = task arithmetic and della(0) = dare bit for bit; multislerp vs slerp max err {worst_ms:.1e}"
    ))
}

fn unbiasedness() -> Outcome {
    const DRAWS: u64 = 10_000;
    let mut rng = keyed_stream(7, "acceptance/unbiased", 0);
    let delta = gaussian(&mut rng, 64);
    let della = SparsifySpec {
        drop_rate: 0.5,
        della_window: 0.3,
        ..SparsifySpec::default()
    };
    let (mut lines, mut failures) = (Vec::new(), Vec::new());
    for method in ["dare", "della"] {
        let mut sum = vec![0.0; 64];
        let mut sq = vec![0.0; 64];
        for seed in 0..DRAWS {
            let mut stream = tensor_stream(seed, "unbiased", 0);
            let out = match method {
                "dare" => dare_drop(&delta, 0.5, &mut stream).unwrap(),
                _ => della_drop(&delta, &della, &mut stream).unwrap(),
            };
            for j in 0..64 {
                sum[j] += out[j];
                sq[j] += out[j] * out[j];
            }
        }
        let n = DRAWS as f64;
        let z: Vec<f64> = (0..64)
            .map(|j| {
                let mean = sum[j] / n;
                let var = (sq[j] - n * mean * mean) / (n - 1.0);
                (mean - delta[j]) / (var / n).sqrt()
            })
            .collect();
        let worst = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let over: Vec<usize> = (0..64).filter(|j| z[*j].abs() > 3.0).collect();
        let chi2: f64 = z.iter().map(|v| v * v).sum();
        lines.push(format!(
            "{method} max |z| {worst:.2}, {} coordinates beyond 3 SE, sum z^2 {chi2:.1} on 64 dof",
            over.len()
        ));
        if !over.is_empty() {
            failures.push(format!("{method} coordinates {over:?} beyond 3 SE"));
        }
    }
    ensure!(
        failures.is_empty(),
        "{}; {}",
        failures.join("; "),
        lines.join("; ")
    );
    Ok(format!("64 coordinates x 10^4 seeds: {}", lines.join("; ")))
}

/// Brute-force TIES: full sort for trimming, then sign election and
/// agreeing-entry averaging by definition.
fn ties_reference(
    base: &[f64],
    experts: &[Vec<f64>],
    w: &[f64],
    k: usize,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = base.len();
    let total: f64 = w.iter().sum();
    let alpha: Vec<f64> = w.iter().map(|x| x / total).collect();
    let trimmed: Vec<Vec<f64>> = experts
        .iter()
        .map(|e| {
            let d: Vec<f64> = e.iter().zip(base).map(|(a, b)| a - b).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| d[j].abs().partial_cmp(&d[i].abs()).unwrap().then(i.cmp(&j)));
            let mut t = vec![0.0; n];
            for &i in &order[..k] {
                t[i] = d[i];
            }
            t
        })
        .collect();
    let signs: Vec<f64> = (0..n)
        .map(|j| {
            let s: f64 = trimmed.iter().zip(&alpha).map(|(t, a)| a * t[j]).sum();
            if s < 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    let out = (0..n)
        .map(|j| {
            let (mut num, mut den) = (0.0, 0.0);
            for (t, a) in trimmed.iter().zip(&alpha) {
                if t[j] != 0.0 && t[j].signum() == signs[j] {
                    num += a * t[j];
                    den += a;
                }
            }
            base[j] + if den > 0.0 { num / den } else { 0.0 }
        })
        .collect();
    (trimmed, signs, out)
}

fn ties_correctness() -> Outcome {
    let mut rng = keyed_stream(8, "acceptance/ties", 0);
    let mut kept_total = 0;
    for case in 0..100 {
        let n = rng.random_range(1..=200);
        let m = rng.random_range(1..=5);
        let base: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(-4i32..=4)) * 0.5)
            .collect();
        // Coarse deltas so magnitude ties are common.
        let experts: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                base.iter()
                    .map(|b| b + f64::from(rng.random_range(-3i32..=3)) * 0.25)
                    .collect()
            })
            .collect();
        let w: Vec<f64> = (0..m)
            .map(|_| f64::from(rng.random_range(1u32..=4)))
            .collect();
        let percent: usize = rng.random_range(1..=100);
        let density = percent as f64 / 100.0;
        let k = (percent * n).div_ceil(100);

        let (trimmed, signs, want) = ties_reference(&base, &experts, &w, k);
        for (e, t) in experts.iter().zip(&trimmed) {
            let d: Vec<f64> = e.iter().zip(&base).map(|(a, b)| a - b).collect();
            let got = trim_topk(&d, density);
            ensure!(
                got == *t,
                "case {case}: trim (n = {n}, density {density}) differs from reference"
            );
        }
        let t_refs: Vec<&[f64]> = trimmed.iter().map(Vec::as_slice).collect();
        let elected = elect_signs(&t_refs, &w).unwrap();
        ensure!(
            elected.iter().zip(&signs).all(|(a, b)| f64::from(*a) == *b),
            "case {case}: elected signs differ from reference"
        );

        let refs: Vec<&[f64]> = experts.iter().map(Vec::as_slice).collect();
        let out = merge_ties(&base, &refs, &w, density).unwrap();
        for j in 0..n {
            let moved = out[j] - base[j];
            ensure!(
                moved == 0.0 || moved.signum() == signs[j],
                "case {case}: coordinate {j} moved {moved} against elected sign {}",
                signs[j]
            );
            ensure!(
                (out[j] - want[j]).abs() <= 1e-12,
                "case {case}: coordinate {j} {} vs {}",
                out[j],
                want[j]
            );
        }
        kept_total += k;
    }
    Ok(format!(
        "100 instances, {kept_total} kept coordinates checked against brute force"
    ))
}

fn diagnostics_identities() -> Outcome {
    // Rounding in exp/ln keeps effective rank a few ulps from the integer.
    let ulps = |x: f64, want: f64| ((x - want).abs() / (want * f64::EPSILON)).round();
    let mut worst_ulps = 0.0f64;
    for d in 1..=64usize {
        for lambda in [1.0, 2.5, 1e-3, 7.3e4] {
            let flat = vec![lambda; d];
            let df = d as f64;
            ensure!(
                stable_rank(&flat) == df,
                "stable rank of flat d = {d}: {}",
                stable_rank(&flat)
            );
            ensure!(
                participation_ratio(&flat) == df,
                "participation ratio of flat d = {d}: {}",
                participation_ratio(&flat)
            );
            let er = effective_rank(&flat);
            worst_ulps = worst_ulps.max(ulps(er, df));
            ensure!(ulps(er, df) <= 4.0, "effective rank of flat d = {d}: {er}");
            let mut spike = vec![0.0; d];
            spike[0] = lambda;
            for (name, v) in [
                ("effective", effective_rank(&spike)),
                ("stable", stable_rank(&spike)),
                ("participation", participation_ratio(&spike)),
            ] {
                ensure!(v == 1.0, "{name} rank of rank-1 spectrum (d = {d}): {v}");
            }
        }
    }

    let mut rng = keyed_stream(9, "acceptance/rotation", 0);
    let (n, d) = (40, 8);
    let x = DMatrix::from_fn(n, d, |_, j| {
        rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64)
    });
    let ax = ActivationMatrix::new("x", x.clone()).unwrap();
    let sx = covariance_spectrum(&ax);
    let metrics = |s: &[f64]| {
        [
            effective_rank(s),
            stable_rank(s),
            participation_ratio(s),
            numerical_rank(s, None, Precision::F64) as f64,
        ]
    };
    let base = metrics(&sx);
    let trace: f64 = sx.iter().sum();
    let mv = mean_activation_variance(&ax);
    ensure!(
        (mv - trace / d as f64).abs() < 1e-9,
        "mean variance {mv} vs trace/d {}",
        trace / d as f64
    );
    let mut worst: f64 = 0.0;
    for r in 0..50 {
        let q = orthogonal(&mut rng, d);
        let rotated = ActivationMatrix::new("xq", &x * q).unwrap();
        let sr = covariance_spectrum(&rotated);
        for (a, b) in base.iter().zip(metrics(&sr)) {
            worst = worst.max((a - b).abs());
            ensure!((a - b).abs() < 1e-9, "rotation {r}: metric {a} vs {b}");
        }
        let mvr = mean_activation_variance(&rotated);
        let tr: f64 = sr.iter().sum();
        ensure!(
            (mvr - tr / d as f64).abs() < 1e-9,
            "rotation {r}: mean variance {mvr} vs trace/d"
        );
    }
    Ok(format!(
        "flat and rank-1 spectra (effective rank within {worst_ulps} ulp); 50 rotations, max metric drift {worst:.1e}"
    ))
}

fn save_f32(path: &Path, tensors: Vec<TensorRecord>) {
    write_checkpoint(
        path,
        &tensors,
        DType::F32,
        &BTreeMap::new(),
        WriteOptions::default(),
    )
    .unwrap();
}

fn matrix_record(name: &str, m: &DMatrix<f64>) -> TensorRecord {
    let data: Vec<f64> = m.transpose().iter().map(|v| f64::from(*v as f32)).collect();
    TensorRecord::new(name, vec![m.nrows(), m.ncols()], DType::F32, data).unwrap()
}

fn recipe_text(
    method: &str,
    models: &[PathBuf],
    base: Option<&Path>,
    output: &Path,
    params: &str,
) -> String {
    let list: Vec<String> = models
        .iter()
        .map(|p| format!("{{ path = {:?} }}", p.to_str().unwrap()))
        .collect();
    let base = base
        .map(|b| format!("base_model = {:?}\n", b.to_str().unwrap()))
        .unwrap_or_default();
    format!(
        "method = {method:?}\n{base}models = [{}]\n[parameters]\n{params}\n[output]\npath = {:?}\n",
        list.join(", "),
        output.to_str().unwrap()
    )
}

fn collapse_demo() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = keyed_stream(10, "acceptance/collapse", 0);
    let (d0, h, out) = (16, 32, 8);
    let w1 = DMatrix::from_fn(h, d0, |_, _| {
        rng.sample::<f64, _>(StandardNormal) / (d0 as f64).sqrt()
    });
    let w2 = DMatrix::from_fn(out, h, |_, _| {
        rng.sample::<f64, _>(StandardNormal) / (h as f64).sqrt()
    });
    let experts: Vec<PathBuf> = (0..5)
        .map(|i| {
            let r1 = orthogonal(&mut rng, h);
            let r2 = orthogonal(&mut rng, out);
            let p = dir.path().join(format!("expert{i}.safetensors"));
            save_f32(
                &p,
                vec![
                    matrix_record("l1.weight", &(&r1 * &w1)),
                    matrix_record("l2.weight", &(&r2 * &w2)),
                ],
            );
            p
        })
        .collect();
    let sources: Vec<Checkpoint> = experts
        .iter()
        .map(|p| Checkpoint::load(p, LoadOptions::default()).unwrap())
        .collect();
    let source_refs: Vec<&Checkpoint> = sources.iter().collect();
    let spec = dir.path().join("toy.toml");
    fs::write(
        &spec,
        "nonlinearity = \"tanh\"\nsamples = 512\ninput_seed = 1\n[[layers]]\nweight = \"l1.weight\"\n[[layers]]\nweight = \"l2.weight\"\n",
    )
    .unwrap();

    let mut details = Vec::new();
    for method in ["karcher", "lerp"] {
        let output = dir.path().join(format!("{method}.safetensors"));
        let recipe = dir.path().join(format!("{method}.toml"));
        fs::write(&recipe, recipe_text(method, &experts, None, &output, "")).unwrap();
        cmd_merge(&MergeArgs {
            recipe,
            ..MergeArgs::default()
        })
        .map_err(|e| e.to_string())?;
        let merged = Checkpoint::load(&output, LoadOptions::default()).unwrap();
        let rows = weight_norm_report(&source_refs, &[1.0; 5], &merged).unwrap();
        for r in &rows {
            if method == "karcher" {
                ensure!(
                    (r.shrinkage_ratio - 1.0).abs() <= 1e-6,
                    "karcher {}: ratio {}",
                    r.name,
                    r.shrinkage_ratio
                );
            } else {
                ensure!(
                    r.shrinkage_ratio < 0.9,
                    "lerp {}: ratio {}",
                    r.name,
                    r.shrinkage_ratio
                );
            }
        }
        let report = cmd_diagnose(&DiagnoseArgs {
            input: output,
            out: dir.path().join(format!("{method}.report.json")),
            draws: 200,
            seed: 3,
            toy_forward: Some(spec.clone()),
            csv: None,
        })
        .map_err(|e| e.to_string())?;
        let last = report.layers.last().unwrap();
        let ratios: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.4}", r.shrinkage_ratio))
            .collect();
        details.push(format!(
            "{method} ratios [{}] final-layer variance {:.4} eff rank {:.2}",
            ratios.join(", "),
            last.mean_variance.mean,
            last.eff_rank.mean
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1} s (limit 30 s)");
    Ok(format!("{}; {secs:.1} s", details.join("; ")))
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_karcher-merge"))
}

fn cli_merge(recipe: &Path, extra: &[&str]) -> Result<(), String> {
    let out = cli().arg("merge").arg(recipe).args(extra).output().unwrap();
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "merge failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn random_records(rng: &mut Stream, count: usize) -> Vec<TensorRecord> {
    (0..count)
        .map(|i| {
            let shape = if i % 3 == 0 {
                vec![1 + i % 17]
            } else {
                vec![3 + i % 11, 5 + i % 7]
            };
            let n: usize = shape.iter().product();
            let data = gaussian(rng, n)
                .into_iter()
                .map(|v| f64::from(v as f32))
                .collect();
            TensorRecord::new(format!("block{i:02}.param"), shape, DType::F32, data).unwrap()
        })
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = keyed_stream(11, "acceptance/determinism", 0);
    let base_records = random_records(&mut rng, 30);
    let base = dir.path().join("base.safetensors");
    save_f32(&base, base_records.clone());
    let experts: Vec<PathBuf> = (0..4)
        .map(|i| {
            let p = dir.path().join(format!("e{i}.safetensors"));
            let recs = base_records
                .iter()
                .map(|r| {
                    let data = r
                        .data
                        .iter()
                        .map(|v| f64::from((v + 0.2 * rng.sample::<f64, _>(StandardNormal)) as f32))
                        .collect();
                    TensorRecord::new(r.name.clone(), r.shape.clone(), DType::F32, data).unwrap()
                })
                .collect();
            save_f32(&p, recs);
            p
        })
        .collect();
    let mut checked = Vec::new();
    for method in ["karcher", "della_ties", "dare_lerp", "ties", "model_stock"] {
        let mut outputs = Vec::new();
        for (run, threads) in [(0, "1"), (1, "1"), (2, "8"), (3, "8")] {
            let output = dir.path().join(format!("{method}-{run}.safetensors"));
            let recipe = dir.path().join(format!("{method}-{run}.toml"));
            let b = (method != "karcher").then_some(base.as_path());
            fs::write(
                &recipe,
                recipe_text(method, &experts, b, &output, "seed = 42"),
            )
            .unwrap();
            cli_merge(&recipe, &["--threads", threads])?;
            let mut summary: serde_json::Value = serde_json::from_str(
                &fs::read_to_string(dir.path().join(format!("{method}-{run}.summary.json")))
                    .unwrap(),
            )
            .unwrap();
            summary.as_object_mut().unwrap().remove("wall_ms");
            outputs.push((fs::read(&output).unwrap(), summary));
        }
        for (i, o) in outputs.iter().enumerate().skip(1) {
            ensure!(
                o.0 == outputs[0].0,
                "{method}: checkpoint of run {i} differs from run 0"
            );
            ensure!(
                o.1 == outputs[0].1,
                "{method}: summary of run {i} differs from run 0"
            );
        }
        checked.push(method);
    }
    Ok(format!(
        "byte-identical across 2 runs x threads {{1, 8}}: {}",
        checked.join(", ")
    ))
}

fn round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = keyed_stream(12, "acceptance/roundtrip", 0);
    let mut records = random_records(&mut rng, 6);
    records.push(TensorRecord::new("zeros", vec![5], DType::F32, vec![0.0; 5]).unwrap());
    let src = dir.path().join("src.safetensors");
    save_f32(&src, records.clone());
    let models = vec![src.clone(), src.clone()];
    let mut count = 0;
    for kind in MethodKind::ALL {
        for dtype in [DType::F32, DType::F16, DType::BF16] {
            let output = dir.path().join(format!("{kind}-{dtype}.safetensors"));
            let recipe = dir.path().join(format!("{kind}-{dtype}.toml"));
            let base = kind.requires_base().then_some(src.as_path());
            fs::write(
                &recipe,
                recipe_text(kind.as_str(), &models, base, &output, ""),
            )
            .unwrap();
            cli_merge(&recipe, &["--set", &format!("output.dtype={dtype}")])?;
            let merged = Checkpoint::load(&output, LoadOptions::default()).unwrap();
            ensure!(
                merged.len() == records.len(),
                "{kind}: {} tensors written",
                merged.len()
            );
            for r in &records {
                let got = merged.get(&r.name).unwrap();
                for (a, b) in r.data.iter().zip(&got.data) {
                    ensure!(
                        *b == dtype.round(*a),
                        "{kind} -> {dtype}, {}: {b} vs {a}",
                        r.name
                    );
                }
            }
            count += 1;
        }
    }
    Ok(format!(
        "{count} method x dtype combinations reproduce the input"
    ))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("karcher reduces to slerp for two models", slerp_reduction),
        ("first-order stationarity of converged means", stationarity),
        ("brute-force grid barycenter oracle", brute_force_barycenter),
        ("norm preservation vs chord shrinkage", norm_preservation),
        ("shrinkage ratio stability across m", shrinkage_across_m),
        ("method reductions", method_reductions),
        ("DARE / DELLA unbiasedness", unbiasedness),
        ("TIES correctness", ties_correctness),
        ("diagnostics identities", diagnostics_identities),
        ("collapse-direction demo", collapse_demo),
        ("determinism across runs and thread counts", determinism),
        ("identical-source round trip", round_trip),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
