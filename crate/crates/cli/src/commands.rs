use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use tkfmh::divergence::{grid_scan, ScanGrid, ScanOptions, ScanPoint, ScanResult};
use tkfmh::hmm::{build_pair_hmm, forward_hmm, Boundary};
use tkfmh::homology::{
    assumption_check, star_expected_displacement, write_star_structure, write_tree_structure, StarLaw,
};
use tkfmh::io::{csv_field, format_g12, read_fasta, write_fasta, FastaRecord};
use tkfmh::likelihood::{brute_l, brute_q, forward_l, forward_q, Band, BruteCaps, DpOptions};
use tkfmh::phylo::{make_balanced_binary, make_star, validate_regular_binary, PhyloTree};
use tkfmh::simulate::{
    simulate_star, simulate_tree, star_displacement_sampler, tree_displacement_sampler, Provenance, SequenceSet,
    SimConfig, StarSampler,
};
use tkfmh::tkf91::{mean_descendants, q_h, q_n, BranchKernel, BranchTime};
use tkfmh::EvolParams;

use crate::config::Settings;
use crate::svg::{Heatmap, LinePlot, Series};
use crate::CliError;

/// Soft limit on the estimated lattice cells of one scan.
pub const SCAN_CELL_BUDGET: f64 = 1e11;

/// Typical per-axis extent of a banded lattice, used only for budgeting.
const BAND_EXTENT: f64 = 33.0;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn check_tree_for_simulation(tree: &PhyloTree) -> Result<(), CliError> {
    if !tree.is_star() {
        validate_regular_binary(tree)?;
    }
    Ok(())
}

pub fn simulate(s: &Settings) -> Result<(), CliError> {
    let theta = s.theta()?;
    let tree = s.tree()?;
    check_tree_for_simulation(&tree)?;
    let alphabet = s.alphabet()?;
    let n = s.positive("n")?;
    let replicates = s.positive("replicates")?;
    let seed: u64 = s.parse("seed")?;
    let out = s.out_dir()?;
    let cfg = SimConfig::new(theta, tree.clone(), n, seed, replicates)?;

    create_out(&out)?;
    for r in 0..replicates {
        let set = if tree.is_star() { simulate_star(&cfg, r, StarSampler::Chain)? } else { simulate_tree(&cfg, r)? };
        let records: Vec<FastaRecord> = set
            .sequences
            .iter()
            .enumerate()
            .map(|(i, seq)| FastaRecord { name: tree.leaf_name(i), seq: alphabet.decode(seq) })
            .collect();
        let path = out.join(format!("rep_{r:03}.fasta"));
        let mut buf = Vec::new();
        write_fasta(&mut buf, &records, 60)?;
        fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
        let structure = match &set.provenance {
            Some(Provenance::Star(h)) => write_star_structure(&tree, h),
            Some(Provenance::Tree(h)) => write_tree_structure(&tree, h),
            None => continue,
        };
        write_file(&out.join(format!("rep_{r:03}.structure")), &structure)?;
    }
    write_file(&out.join("manifest.txt"), &s.manifest())?;
    eprintln!("wrote {replicates} replicate(s) to {}", out.display());
    Ok(())
}

/// Sequences in leaf order, matched by record name when possible.
fn load_sequences(s: &Settings, tree: &PhyloTree) -> Result<Vec<Vec<usize>>, CliError> {
    let path = s.require("fasta")?;
    let file = fs::File::open(path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
    let records = read_fasta(std::io::BufReader::new(file))?;
    let alphabet = s.alphabet()?;
    let k = tree.leaf_count();
    let names: Vec<String> = (0..k).map(|i| tree.leaf_name(i)).collect();
    let by_name: Option<Vec<&FastaRecord>> =
        names.iter().map(|name| records.iter().find(|r| &r.name == name)).collect();
    let ordered = match by_name {
        Some(found) => found,
        None if records.len() == k => records.iter().collect(),
        None => {
            return Err(CliError::Validation(format!(
                "{path} has {} records, the tree has {k} leaves and the names do not match",
                records.len()
            )))
        }
    };
    ordered
        .iter()
        .map(|r| {
            alphabet.encode(&r.seq).map_err(|e| CliError::Validation(format!("record {}: {e}", r.name)))
        })
        .collect()
}

struct Row {
    mode: &'static str,
    n: Option<usize>,
    value: f64,
    tail: Option<f64>,
    cells: u64,
    seconds: f64,
}

pub fn loglik(s: &Settings) -> Result<(), CliError> {
    let theta = s.theta()?;
    let tree = s.tree()?;
    let mode = s.require("mode")?.to_string();
    let n: Option<usize> = s.parse_opt("n")?;
    if n == Some(0) {
        return Err(CliError::Validation("n must be at least 1".into()));
    }
    let dp = s.dp()?;
    let caps = BruteCaps { max_cols: s.parse_opt("max_cols")?, max_ins: s.parse_opt("max_ins")? };
    match mode.as_str() {
        "q" | "l" | "both" | "brute" => {}
        m => return Err(CliError::Validation(format!("mode = {m:?}; expected q, l, both or brute"))),
    }
    if mode != "q" && mode != "brute" && n.is_none() {
        return Err(CliError::Validation(format!("mode {mode} needs n")));
    }
    if mode != "brute" && !tree.is_star() {
        return Err(CliError::Validation("the forward recursions need a star tree; use mode=brute for tiny inputs on other trees".into()));
    }
    let seqs = load_sequences(s, &tree)?;

    let mut rows = Vec::new();
    if mode == "q" || mode == "both" {
        let r = forward_q(&theta, &tree, &seqs, &dp)?;
        rows.push(Row { mode: "q", n: None, value: r.value, tail: None, cells: r.cells, seconds: r.seconds });
    }
    if let (true, Some(n)) = (mode == "l" || mode == "both", n) {
        let r = forward_l(&theta, &tree, &seqs, n, &dp)?;
        rows.push(Row { mode: "l", n: Some(n), value: r.value, tail: None, cells: r.cells, seconds: r.seconds });
    }
    if mode == "brute" {
        let clock = std::time::Instant::now();
        let b = brute_q(&theta, &tree, &seqs, caps)?;
        let seconds = clock.elapsed().as_secs_f64();
        rows.push(Row { mode: "brute-q", n: None, value: b.value, tail: Some(b.tail_bound), cells: b.structures as u64, seconds });
        if let Some(n) = n {
            let clock = std::time::Instant::now();
            let b = brute_l(&theta, &tree, &seqs, n, caps)?;
            let seconds = clock.elapsed().as_secs_f64();
            rows.push(Row { mode: "brute-l", n: Some(n), value: b.value, tail: Some(b.tail_bound), cells: b.structures as u64, seconds });
        }
    }

    let lens: Vec<String> = (1..=seqs.len()).map(|i| format!("len_{i}")).collect();
    let mut out = std::io::stdout().lock();
    let w = |e: std::io::Error| CliError::Io(format!("stdout: {e}"));
    writeln!(out, "mode,lambda,alpha,n,{},log_value,tail_bound,cells,seconds", lens.join(",")).map_err(w)?;
    for r in rows {
        let lens: Vec<String> = seqs.iter().map(|x| x.len().to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(r.mode),
            format_g12(theta.lambda()),
            format_g12(theta.alpha()),
            r.n.map_or("-".to_string(), |n| n.to_string()),
            lens.join(","),
            format_g12(r.value),
            r.tail.map(format_g12).unwrap_or_default(),
            r.cells,
            format_g12(r.seconds)
        )
        .map_err(w)?;
    }
    Ok(())
}

fn scan_grid(s: &Settings, theta0: EvolParams) -> Result<ScanGrid, CliError> {
    let n = s.positive("n")?;
    let replicates = s.positive("replicates")?;
    let seed: u64 = s.parse("seed")?;
    let points = s.positive("grid_points")?;
    let step: f64 = s.parse("grid_step")?;
    if !(step > 0.0) || step * (points / 2) as f64 >= 1.0 {
        return Err(CliError::Validation(format!("grid_step = {step} must be positive and keep every grid value above zero")));
    }
    let around = ScanGrid::around(theta0.clone(), points, step, n, replicates, seed);
    let explicit = (s.list("lambda_values")?, s.list("alpha_values")?);
    if explicit == (None, None) {
        return Ok(around?);
    }
    let (l, a) = match around {
        Ok(g) => (g.lambda_values, g.alpha_values),
        Err(_) => (vec![theta0.lambda()], vec![theta0.alpha()]),
    };
    Ok(ScanGrid::new(explicit.0.unwrap_or(l), explicit.1.unwrap_or(a), theta0, n, replicates, seed)?)
}

/// Rough lattice-cell count of a scan, for the budget check.
pub fn estimated_cells(grid: &ScanGrid, leaves: usize, band: Band, ancestral: bool) -> f64 {
    let axis = grid.n as f64 + 1.0;
    let extent = if band == Band::Full { axis } else { axis.min(BAND_EXTENT) };
    let q = axis * extent.powi(leaves as i32 - 1);
    let per = if ancestral { q * (1.0 + extent) } else { q };
    (grid.len() + 1) as f64 * grid.replicates as f64 * per
}

pub fn scan(s: &Settings) -> Result<(), CliError> {
    let theta0 = s.theta()?;
    let tree = s.tree()?;
    if !tree.is_star() {
        return Err(CliError::Validation("scans need a star tree".into()));
    }
    let grid = scan_grid(s, theta0)?;
    let dp = s.dp()?;
    let ancestral = s.flag("ancestral")?;
    let force = s.flag("force")?;
    let out = s.out_dir()?;
    let cells = estimated_cells(&grid, tree.leaf_count(), dp.band, ancestral);
    if cells > SCAN_CELL_BUDGET && !force {
        return Err(CliError::Validation(format!(
            "scan needs about {cells:.2e} lattice cells, above the budget of {SCAN_CELL_BUDGET:.0e}; pass --force to run it anyway"
        )));
    }
    create_out(&out)?;
    let result = grid_scan(&grid, &tree, &ScanOptions { dp, ancestral })?;
    write_scan(&result, &out, ancestral)?;
    write_file(&out.join("manifest.txt"), &s.manifest())?;
    eprintln!("wrote scan of {} points to {}", grid.len(), out.display());
    Ok(())
}

fn write_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> tkfmh::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn criterion_surface(points: &[ScanPoint], ancestral_value: bool) -> String {
    let (name, d) = if ancestral_value { ("l_hat,se_l,d_star_hat,se_d_star", "") } else { ("w_hat,se_w,d_hat,se_d", "") };
    let mut s = format!("lambda,alpha,{name}{d}\n");
    for p in points {
        let (v, dv) = if ancestral_value { (p.l.unwrap(), p.d_star.unwrap()) } else { (p.w, p.d) };
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            format_g12(p.lambda),
            format_g12(p.alpha),
            format_g12(v.mean),
            format_g12(v.se),
            format_g12(dv.mean),
            format_g12(dv.se)
        ));
    }
    s
}

fn write_scan(res: &ScanResult, out: &Path, ancestral: bool) -> Result<(), CliError> {
    write_csv(&out.join("surface.csv"), |b| res.write_surface(b))?;
    write_file(&out.join("surface_w.csv"), &criterion_surface(&res.points, false))?;
    if ancestral {
        write_file(&out.join("surface_l.csv"), &criterion_surface(&res.points, true))?;
    }
    write_csv(&out.join("cut_alpha.csv"), |b| res.write_cut_alpha(b))?;
    write_csv(&out.join("cut_lambda.csv"), |b| res.write_cut_lambda(b))?;

    let g = &res.grid;
    if g.lambda_values.len() < 2 || g.alpha_values.len() < 2 {
        eprintln!("note: the grid has a single value on some axis; plots skipped, CSVs written");
        return Ok(());
    }
    let theta0 = (g.theta0.lambda(), g.theta0.alpha());
    let mut criteria: Vec<(&str, &str, Vec<f64>)> = vec![("w", "w_hat(theta)", res.points.iter().map(|p| p.w.mean).collect())];
    if ancestral {
        criteria.push(("l", "l_hat(theta)", res.points.iter().map(|p| p.l.unwrap().mean).collect()));
    }
    for (tag, title, values) in &criteria {
        let svg = Heatmap {
            title,
            x_label: "lambda",
            y_label: "alpha",
            xs: &g.lambda_values,
            ys: &g.alpha_values,
            values,
            marker: Some(theta0),
        }
        .render();
        write_file(&out.join(format!("heatmap_{tag}.svg")), &svg)?;
    }
    let cuts = [
        ("cut_alpha.svg", "cut at alpha = alpha0", "lambda", res.cut_alpha(), theta0.0, true),
        ("cut_lambda.svg", "cut at lambda = lambda0", "alpha", res.cut_lambda(), theta0.1, false),
    ];
    for (file, title, x_label, cut, marker, along_lambda) in cuts {
        let xs: Vec<f64> = cut.iter().map(|p| if along_lambda { p.lambda } else { p.alpha }).collect();
        let w: Vec<f64> = cut.iter().map(|p| p.w.mean).collect();
        let w_se: Vec<f64> = cut.iter().map(|p| p.w.se).collect();
        let l: Vec<f64> = cut.iter().map(|p| p.l.map_or(f64::NAN, |e| e.mean)).collect();
        let l_se: Vec<f64> = cut.iter().map(|p| p.l.map_or(0.0, |e| e.se)).collect();
        let mut series = vec![Series { name: "w", values: &w, band: &w_se }];
        if ancestral {
            series.push(Series { name: "l", values: &l, band: &l_se });
        }
        let svg = LinePlot { title, x_label, y_label: "criterion / n", xs: &xs, series, marker: Some(marker) }.render();
        write_file(&out.join(file), &svg)?;
    }
    Ok(())
}

struct CheckRow {
    name: String,
    statistic: f64,
    tolerance: f64,
    pass: bool,
}

fn row(name: impl Into<String>, statistic: f64, tolerance: f64) -> CheckRow {
    CheckRow { name: name.into(), statistic, tolerance, pass: statistic <= tolerance }
}

fn bt(t: f64) -> Result<BranchTime<f64>, CliError> {
    Ok(BranchTime::new(t)?)
}

/// Largest `|mean length / n − 1|` in units of its standard error.
fn length_z(sets: &[SequenceSet], n: usize) -> f64 {
    let reps = sets.len() as f64;
    let k = sets.first().map_or(0, SequenceSet::k);
    (0..k)
        .map(|i| {
            let x: Vec<f64> = sets.iter().map(|s| s.sequences[i].len() as f64 / n as f64).collect();
            let mean = x.iter().sum::<f64>() / reps;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1.0).max(1.0);
            (mean - 1.0).abs() / (var / reps).sqrt().max(1e-300)
        })
        .fold(0.0, f64::max)
}

pub fn check(s: &Settings) -> Result<bool, CliError> {
    let theta = s.theta()?;
    let star = match s.raw("tree") {
        Some(_) => None,
        None => Some(s.tree()?),
    };
    let check_tree = match s.raw("tree") {
        Some(_) => s.tree()?,
        None => make_balanced_binary(3, 0.5)?,
    };
    validate_regular_binary(&check_tree)?;
    let star = star.unwrap_or(make_star(3, &[1.0; 3])?);
    let n = s.positive("n")?;
    let replicates = s.positive("replicates")?;
    let seed: u64 = s.parse("seed")?;
    let lambda = theta.lambda();

    let mut rows = Vec::new();
    let (mut norm, mut mean) = (0.0f64, 0.0f64);
    for t in star.leaf_times() {
        let r = BranchKernel::new(lambda, bt(t)?)?.r;
        let total = q_h(1, lambda, bt(t)?)? / (1.0 - r) + q_n(0, lambda, bt(t)?)? + q_n(1, lambda, bt(t)?)? / (1.0 - r);
        norm = norm.max((total - 1.0).abs());
        mean = mean.max((mean_descendants(lambda, bt(t)?)? - 1.0).abs());
    }
    rows.push(row("kernel normalisation |sum - 1|", norm, 1e-12));
    rows.push(row("mean descendants |m - 1|", mean, 1e-12));

    let exact = star_expected_displacement(&StarLaw::new(lambda, &star)?);
    let exact_gap = exact.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    rows.push(row("star column displacement, exact |E - 1|", exact_gap, 1e-12));
    let draws = 100_000;
    let a1 = assumption_check(draws, star_displacement_sampler(&theta, &star, seed)?, 3.0);
    let z1 = a1.mean.iter().zip(&a1.se).map(|(m, se)| (m - 1.0).abs() / se.max(1e-300)).fold(0.0, f64::max);
    rows.push(row(format!("star column displacement, {draws} draws (|z|)"), z1, 3.0));
    let a2 = assumption_check(draws, tree_displacement_sampler(&theta, &check_tree, seed)?, 3.0);
    let z2 = a2.mean.iter().zip(&a2.se).map(|(m, se)| (m - 1.0).abs() / se.max(1e-300)).fold(0.0, f64::max);
    rows.push(row(format!("tree column displacement, {draws} draws (|z|)"), z2, 3.0));

    let cfg = SimConfig::new(theta.clone(), star.clone(), n, seed, replicates)?;
    let sets = (0..replicates).map(|r| simulate_star(&cfg, r, StarSampler::Chain)).collect::<Result<Vec<_>, _>>()?;
    rows.push(row(format!("star lengths / n, {replicates} replicates (|z|)"), length_z(&sets, n), 3.0));
    let cfg = SimConfig::new(theta.clone(), check_tree.clone(), n, seed, replicates)?;
    let sets = (0..replicates).map(|r| simulate_tree(&cfg, r)).collect::<Result<Vec<_>, _>>()?;
    rows.push(row(
        format!("{}-leaf tree lengths / n, {replicates} replicates (|z|)", check_tree.leaf_count()),
        length_z(&sets, n),
        3.0,
    ));

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let times = star.leaf_times();
    let pair_times = if times.len() >= 2 { [times[0], times[1]] } else { [1.0, 1.0] };
    let pair_tree = make_star(2, &pair_times)?;
    let total: f64 = pair_tree.leaf_times().iter().sum();
    let pair = build_pair_hmm(lambda, total)?;
    let opts = DpOptions { boundary: Boundary::SurvivorStart, ..DpOptions::full() };
    let size = theta.nu().len();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let seqs: Vec<Vec<usize>> =
            (0..2).map(|_| (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(0..size)).collect()).collect();
        let a = forward_q(&theta, &pair_tree, &seqs, &opts)?.value;
        let b = forward_hmm(&pair, theta.subst(), &seqs)?;
        worst = worst.max((a - b).abs() / b.abs().max(1e-300));
    }
    rows.push(row("two-leaf star vs pair HMM, relative", worst, 1e-10));

    println!("{:<52} {:>12} {:>10}  result", "check", "statistic", "tolerance");
    for r in &rows {
        println!(
            "{:<52} {:>12.3e} {:>10.1e}  {}",
            r.name,
            r.statistic,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(rows.iter().all(|r| r.pass))
}
