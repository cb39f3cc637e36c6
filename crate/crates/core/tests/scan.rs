use tkfmh::divergence::{evaluate, grid_scan, simulate_replicates, ScanGrid, ScanOptions};
use tkfmh::hmm::{build_pair_hmm, forward_hmm, Boundary};
use tkfmh::likelihood::DpOptions;
use tkfmh::phylo::make_star;
use tkfmh::EvolParams;

#[test]
fn two_leaf_scan_matches_pair_hmm() {
    let th0 = EvolParams::uniform(0.05, 0.2, 4).unwrap();
    let th = EvolParams::uniform(0.08, 0.15, 4).unwrap();
    let tree = make_star(2, &[0.7, 0.8]).unwrap();
    let n = 30;
    let data = simulate_replicates(&th0, &tree, n, 6, 3).unwrap();
    let dp = DpOptions { boundary: Boundary::SurvivorStart, ..DpOptions::full() };
    let limits = evaluate(&th, &tree, &data, n, &ScanOptions { dp, ancestral: false }).unwrap();
    let pair = build_pair_hmm(0.08, 1.5).unwrap();
    for (set, w) in data.iter().zip(&limits.w) {
        let reference = forward_hmm(&pair, th.subst(), &set.sequences).unwrap() / n as f64;
        assert!((w - reference).abs() <= 1e-10 * reference.abs(), "{w} vs {reference}");
    }
}

#[test]
fn common_random_numbers_shrink_divergence_error() {
    let th0 = EvolParams::uniform(0.05, 0.2, 4).unwrap();
    let tree = make_star(3, &[1.0; 3]).unwrap();
    let grid = ScanGrid::around(th0, 3, 0.3, 60, 8, 21).unwrap();
    let opts = ScanOptions { dp: DpOptions::full(), ancestral: false };
    let res = grid_scan(&grid, &tree, &opts).unwrap();
    let (ci, cj) = grid.center();
    for (p, point) in res.points.iter().enumerate() {
        if p == ci * grid.alpha_values.len() + cj {
            assert_eq!(point.d.mean, 0.0);
            continue;
        }
        assert!(point.d.se < res.unpaired_se(p), "point {p}: {} vs {}", point.d.se, res.unpaired_se(p));
    }
}
