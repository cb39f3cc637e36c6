//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.
//!
//! The divergence scan reads `TKFMH_SCAN_POINTS` (grid points per axis,
//! default 7) and `TKFMH_SCAN_REPLICATES` (default 10). The non-negativity
//! check runs at every grid point whatever the scale.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use tkfmh::divergence::{convergence, grid_scan, ScanGrid, ScanOptions, ScanPoint};
use tkfmh::hmm::{build_pair_hmm, forward_hmm, Boundary};
use tkfmh::likelihood::{brute_l, brute_q, BruteCaps};
use tkfmh::likelihood::{forward_l, forward_q, Band, DpOptions};
use tkfmh::phylo::{make_balanced_binary, make_star};
use tkfmh::simulate::{simulate_star, simulate_tree, SimConfig, StarSampler};
use tkfmh::substitution::{emission_h_star, SubstParams};
use tkfmh::tkf91::{mean_descendants, p_h, p_i, p_n, q_h, q_n, truncation_horizon, BranchKernel, BranchTime, IndelRates};
use tkfmh::EvolParams;

const CLOSED_FORM_TOL: f64 = 1e-12;
const TRUNCATED_TOL: f64 = 1e-10;
const TAIL_EPS: f64 = 1e-13;
const MEAN_TOL: f64 = 1e-12;
const MC_SIGMAS: f64 = 3.0;
const PAIR_TOL: f64 = 1e-10;
const ORACLE_SLACK: f64 = 1e-10;
const MARGINAL_TOL: f64 = 1e-12;
const SCAN_SIGMAS: f64 = 3.0;
const CUT_STEPS: usize = 1;
const GAP_FRACTION: f64 = 0.10;
const Q_SLOPE: (f64, f64) = (3.0, 0.5);
const L_SLOPE: (f64, f64) = (1.0, 0.3);
const CONVERGENCE_SIGMAS: f64 = 2.0;

const LAMBDAS: [f64; 5] = [0.005, 0.02, 0.1, 0.5, 2.0];
const TIMES: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 5.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn bt(t: f64) -> BranchTime<f64> {
    BranchTime::new(t).unwrap()
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn kernel_normalization() -> Outcome {
    let mut closed = 0.0f64;
    let mut truncated = 0.0f64;
    let mut general = 0.0f64;
    for &l in &LAMBDAS {
        for &t in &TIMES {
            let k = BranchKernel::new(l, bt(t)).unwrap();
            // Both families are geometric in n with ratio r.
            let sum_h = q_h(1, l, bt(t)).unwrap() / (1.0 - k.r);
            let sum_n = q_n(0, l, bt(t)).unwrap() + q_n(1, l, bt(t)).unwrap() / (1.0 - k.r);
            closed = closed.max((sum_h + sum_n - 1.0).abs());

            let horizon = truncation_horizon(k.r, TAIL_EPS);
            let mut s = q_n(0, l, bt(t)).unwrap();
            for n in 1..=horizon {
                s += q_h(n, l, bt(t)).unwrap() + q_n(n, l, bt(t)).unwrap();
            }
            truncated = truncated.max((s - 1.0).abs());

            let rates = IndelRates::general(l, 1.5 * l).unwrap();
            let ratio = l * tkfmh::tkf91::beta(&rates, bt(t));
            let horizon = truncation_horizon(ratio, TAIL_EPS);
            let mut links = p_n(0, &rates, bt(t)).unwrap();
            let mut immortal = 0.0;
            for n in 1..=horizon {
                links += p_h(n, &rates, bt(t)).unwrap() + p_n(n, &rates, bt(t)).unwrap();
                immortal += p_i(n, &rates, bt(t)).unwrap();
            }
            general = general.max((links - 1.0).abs()).max((immortal - 1.0).abs());
        }
    }
    outcome(
        closed < CLOSED_FORM_TOL && truncated < TRUNCATED_TOL && general < TRUNCATED_TOL,
        format!("max defect closed {closed:.1e}, truncated {truncated:.1e}, mu = 1.5 lambda {general:.1e}"),
    )
}

fn mean_descendant_law() -> Outcome {
    let worst = LAMBDAS
        .iter()
        .flat_map(|&l| TIMES.iter().map(move |&t| (mean_descendants(l, bt(t)).unwrap() - 1.0).abs()))
        .fold(0.0, f64::max);
    outcome(worst < MEAN_TOL, format!("max |mean - 1| = {worst:.1e}"))
}

fn length_check(lengths: &[Vec<usize>], n: usize) -> (bool, f64) {
    let reps = lengths.len() as f64;
    let mut worst = 0.0f64;
    for leaf in 0..lengths[0].len() {
        let x: Vec<f64> = lengths.iter().map(|l| l[leaf] as f64 / n as f64).collect();
        let mean = x.iter().sum::<f64>() / reps;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1.0);
        let z = (mean - 1.0).abs() / (var / reps).sqrt();
        worst = worst.max(z);
    }
    (worst <= MC_SIGMAS, worst)
}

fn length_laws() -> Outcome {
    let n = 10_000;
    let reps = 100;
    let star = make_star(3, &[1.0; 3]).unwrap();
    let cfg = SimConfig::new(EvolParams::uniform(0.02, 0.1, 4).unwrap(), star, n, 31, reps).unwrap();
    let star_lengths: Vec<Vec<usize>> =
        (0..reps).map(|r| simulate_star(&cfg, r, StarSampler::Chain).unwrap().lengths()).collect();
    let tree = make_balanced_binary(3, 0.5).unwrap();
    let cfg = SimConfig::new(EvolParams::uniform(0.05, 0.1, 4).unwrap(), tree, n, 32, reps).unwrap();
    let tree_lengths: Vec<Vec<usize>> = (0..reps).map(|r| simulate_tree(&cfg, r).unwrap().lengths()).collect();
    let (a, za) = length_check(&star_lengths, n);
    let (b, zb) = length_check(&tree_lengths, n);
    outcome(
        a && b && tree_lengths[0].len() == 8,
        format!("worst |z| star {za:.2}, 8-leaf tree {zb:.2}"),
    )
}

fn random_seq(rng: &mut ChaCha20Rng, max_len: usize) -> Vec<usize> {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| rng.gen_range(0..4)).collect()
}

fn pairwise_equivalence() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let opts = DpOptions { boundary: Boundary::SurvivorStart, ..DpOptions::full() };
    let mut worst = 0.0f64;
    for &l in &[0.02, 0.3, 1.5] {
        for &t in &[0.2, 1.0, 3.0] {
            let th = EvolParams::uniform(l, 0.4, 4).unwrap();
            let pair = build_pair_hmm(l, t).unwrap();
            for _ in 0..20 {
                let t1 = t * rng.gen_range(0.05..0.95);
                let tree = make_star(2, &[t1, t - t1]).unwrap();
                let seqs = vec![random_seq(&mut rng, 6), random_seq(&mut rng, 6)];
                let star = forward_q(&th, &tree, &seqs, &opts).unwrap().value;
                let reference = forward_hmm(&pair, th.subst(), &seqs).unwrap();
                worst = worst.max((star - reference).abs() / reference.abs().max(1e-300));
            }
        }
    }
    outcome(worst < PAIR_TOL, format!("max relative discrepancy {worst:.1e} over 180 pairs"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut bad = 0;
    for _ in 0..20 {
        let times: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..1.5)).collect();
        let tree = make_star(3, &times).unwrap();
        let th = EvolParams::uniform(rng.gen_range(0.05..0.8), rng.gen_range(0.1..1.0), 4).unwrap();
        let seqs: Vec<Vec<usize>> = (0..3).map(|_| random_seq(&mut rng, 2)).collect();
        let n = rng.gen_range(1..=4);
        let q = forward_q(&th, &tree, &seqs, &DpOptions::full()).unwrap().value;
        let bq = brute_q(&th, &tree, &seqs, BruteCaps::default()).unwrap();
        let l = forward_l(&th, &tree, &seqs, n, &DpOptions::full()).unwrap().value;
        let bl = brute_l(&th, &tree, &seqs, n, BruteCaps::default()).unwrap();
        for (dp, b) in [(q, &bq), (l, &bl)] {
            let excess = (dp - b.value).abs() - (b.log_gap_bound() + ORACLE_SLACK);
            worst_excess = worst_excess.max(excess);
            bad += usize::from(excess > 0.0);
        }
    }
    let tree = make_balanced_binary(2, 0.5).unwrap();
    let th = EvolParams::uniform(0.3, 0.5, 4).unwrap();
    let mut tree_ok = true;
    for _ in 0..3 {
        let seqs: Vec<Vec<usize>> = (0..4).map(|_| random_seq(&mut rng, 1)).collect();
        let caps = BruteCaps { max_cols: None, max_ins: Some(2) };
        let b = brute_q(&th, &tree, &seqs, caps).unwrap();
        tree_ok &= b.value.is_finite() && b.tail_bound.is_finite();
    }
    outcome(
        bad == 0 && tree_ok,
        format!("{bad} of 40 star comparisons outside bound (worst excess {worst_excess:.1e}); 4-leaf tree enumerations finite: {tree_ok}"),
    )
}

fn marginal_emissions() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for k in 1..=4usize {
        for _ in 0..5 {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let nu: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let params = SubstParams::new(rng.gen_range(0.01..3.0), nu.clone()).unwrap();
            let times: Vec<BranchTime<f64>> = (0..k).map(|_| bt(rng.gen_range(0.0..4.0))).collect();
            for mask in 1usize..1 << k {
                let j: Vec<usize> = (0..k).filter(|&i| mask >> i & 1 == 1).collect();
                for keep in 0..j.len() {
                    let mut marg = [0.0; 4];
                    for code in 0..4usize.pow(j.len() as u32) {
                        let x: Vec<usize> = (0..j.len()).map(|p| code / 4usize.pow(p as u32) % 4).collect();
                        marg[x[keep]] += emission_h_star(&params, &times, &j, &x).unwrap();
                    }
                    for s in 0..4 {
                        worst = worst.max((marg[s] - nu[s]).abs());
                    }
                }
            }
        }
    }
    outcome(worst < MARGINAL_TOL, format!("max |marginal - nu| = {worst:.1e}"))
}

fn argmax_index(points: &[&ScanPoint], value: impl Fn(&ScanPoint) -> f64) -> usize {
    (0..points.len()).max_by(|&a, &b| value(points[a]).total_cmp(&value(points[b]))).unwrap()
}

fn scan_one(theta0: EvolParams, seed: u64) -> (bool, String) {
    let points = env_usize("TKFMH_SCAN_POINTS", 7);
    let reps = env_usize("TKFMH_SCAN_REPLICATES", 10);
    let tree = make_star(3, &[1.0; 3]).unwrap();
    let grid = ScanGrid::around(theta0, points, 0.25, 500, reps, seed).unwrap();
    let res = grid_scan(&grid, &tree, &ScanOptions::default()).unwrap();

    let below = |e: tkfmh::divergence::Estimate| e.mean < -SCAN_SIGMAS * e.se;
    let negatives = res.points.iter().filter(|p| below(p.d) || below(p.d_star.unwrap())).count();

    let (ci, cj) = grid.center();
    let cut_a = res.cut_alpha();
    let cut_l = res.cut_lambda();
    let offsets = [
        argmax_index(&cut_a, |p| p.w.mean).abs_diff(ci),
        argmax_index(&cut_a, |p| p.l.unwrap().mean).abs_diff(ci),
        argmax_index(&cut_l, |p| p.w.mean).abs_diff(cj),
        argmax_index(&cut_l, |p| p.l.unwrap().mean).abs_diff(cj),
    ];
    let argmax_ok = offsets.iter().all(|&o| o <= CUT_STEPS);

    let range = |f: &dyn Fn(&ScanPoint) -> f64| {
        let v: Vec<f64> = res.points.iter().map(f).collect();
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let range_w = range(&|p| p.w.mean);
    let range_l = range(&|p| p.l.unwrap().mean);
    let gap = res.points.iter().map(|p| (p.w.mean - p.l.unwrap().mean).abs()).fold(0.0, f64::max);
    let gap_ok = gap < GAP_FRACTION * range_w && gap < GAP_FRACTION * range_l;
    (
        negatives == 0 && argmax_ok && gap_ok,
        format!(
            "{}x{} grid, {reps} replicates: {negatives} points below -3 SE; cut argmax offsets {offsets:?}; max|w-l| {gap:.2e} vs ranges {range_w:.2e}/{range_l:.2e}",
            points, points
        ),
    )
}

fn divergence_scan() -> Outcome {
    let (a, da) = scan_one(EvolParams::uniform(0.02, 0.1, 4).unwrap(), 71);
    let (b, db) = scan_one(EvolParams::uniform(0.01, 0.08, 4).unwrap(), 72);
    outcome(a && b, format!("theta0 (0.02, 0.1): {da} | theta0 (0.01, 0.08): {db}"))
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn best_of(runs: usize, mut f: impl FnMut() -> Duration) -> f64 {
    (0..runs).map(|_| f().as_secs_f64()).fold(f64::INFINITY, f64::min)
}

fn complexity_scaling() -> Outcome {
    let tree = make_star(3, &[1.0; 3]).unwrap();
    let th = EvolParams::uniform(0.02, 0.1, 4).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let lens = [16usize, 32, 64, 128];
    let q_times: Vec<f64> = lens
        .iter()
        .map(|&len| {
            let seqs: Vec<Vec<usize>> = (0..3).map(|_| (0..len).map(|_| rng.gen_range(0..4)).collect()).collect();
            best_of(3, || {
                let clock = Instant::now();
                forward_q(&th, &tree, &seqs, &DpOptions::full()).unwrap();
                clock.elapsed()
            })
        })
        .collect();
    let seqs: Vec<Vec<usize>> = (0..3).map(|_| (0..20).map(|_| rng.gen_range(0..4)).collect()).collect();
    let ns = [20usize, 40, 80, 160];
    let l_times: Vec<f64> = ns
        .iter()
        .map(|&n| {
            best_of(3, || {
                let clock = Instant::now();
                forward_l(&th, &tree, &seqs, n, &DpOptions::full()).unwrap();
                clock.elapsed()
            })
        })
        .collect();
    let sq = slope(&lens.map(|x| x as f64), &q_times);
    let sl = slope(&ns.map(|x| x as f64), &l_times);
    outcome(
        (sq - Q_SLOPE.0).abs() <= Q_SLOPE.1 && (sl - L_SLOPE.0).abs() <= L_SLOPE.1,
        format!("Q slope {sq:.2} (times {q_times:.3?} s), L slope {sl:.2} (times {l_times:.3?} s)"),
    )
}

fn convergence_diagnostic() -> Outcome {
    let tree = make_star(3, &[1.0; 3]).unwrap();
    let th = EvolParams::uniform(0.02, 0.1, 4).unwrap();
    let dp = DpOptions { band: Band::Auto, tolerance: 1e-6, ..DpOptions::default() };
    let rows = convergence(&th, &tree, &[250, 500, 1000], 30, 9, &dp).unwrap();
    let sd_shrinks = rows.windows(2).all(|w| w[1].sd < w[0].sd);
    let monotone =
        rows.windows(2).all(|w| w[1].mean >= w[0].mean - CONVERGENCE_SIGMAS * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt());
    let table: Vec<String> = rows.iter().map(|r| format!("n={} mean {:.5} sd {:.5}", r.n, r.mean, r.sd)).collect();
    outcome(sd_shrinks && monotone, table.join("; "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("kernel normalization", kernel_normalization),
        ("mean-descendants law", mean_descendant_law),
        ("Monte Carlo length laws", length_laws),
        ("pairwise equivalence", pairwise_equivalence),
        ("oracle equivalence", oracle_equivalence),
        ("marginal emissions equal nu", marginal_emissions),
        ("divergence scan", divergence_scan),
        ("complexity scaling", complexity_scaling),
        ("convergence diagnostic", convergence_diagnostic),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let clock = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| outcome(false, "panicked"));
        let secs = clock.elapsed().as_secs_f64();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        failures += usize::from(!result.pass);
        println!("{tag} {}. {name} [{secs:.1} s]: {}", i + 1, result.detail);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
