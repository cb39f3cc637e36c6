//! Monte Carlo estimates of the limits of `w_n(θ)/n` and `ℓ_n(θ)/n` under
//! data simulated at `θ₀`, and grid scans of the divergence rates.
//!
//! Every grid point is evaluated on the same simulated replicates, so the
//! divergence at a point is a mean of paired differences.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::format_g12;
use crate::likelihood::{auto_level, forward_l, forward_q, DpOptions};
use crate::phylo::PhyloTree;
use crate::simulate::{simulate_star, SequenceSet, SimConfig, StarSampler};
use crate::EvolParams;

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    carry: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    /// Standard error from the unbiased sample variance; zero for a single
    /// value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().copied().collect::<NeumaierSum>().value() / n;
        if values.len() < 2 {
            return Self { mean, se: 0.0 };
        }
        let ss = values.iter().map(|x| (x - mean) * (x - mean)).collect::<NeumaierSum>().value();
        Self { mean, se: (ss / (n - 1.0) / n).sqrt() }
    }

    pub fn sd(&self, count: usize) -> f64 {
        self.se * (count as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub dp: DpOptions,
    /// Also evaluate `ℓ_n`; otherwise only `w_n` is computed.
    pub ancestral: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self { dp: DpOptions { band: auto_level(1), ..DpOptions::default() }, ancestral: true }
    }
}

/// Normalised criteria at one parameter value, one entry per replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Limits {
    pub w: Vec<f64>,
    pub l: Option<Vec<f64>>,
}

impl Limits {
    pub fn w_hat(&self) -> Estimate {
        Estimate::of(&self.w)
    }

    pub fn l_hat(&self) -> Option<Estimate> {
        self.l.as_deref().map(Estimate::of)
    }
}

/// Draws the replicates shared by every evaluation of a scan.
pub fn simulate_replicates(theta0: &EvolParams, tree: &PhyloTree, n: usize, replicates: usize, seed: u64) -> Result<Vec<SequenceSet>> {
    if !tree.is_star() {
        return Err(Error::UnsupportedTree { expected: "star" });
    }
    let cfg = SimConfig::new(theta0.clone(), tree.clone(), n, seed, replicates)?;
    (0..replicates).into_par_iter().map(|r| simulate_star(&cfg, r, StarSampler::Chain)).collect()
}

/// `w_n(θ)/n` and optionally `ℓ_n(θ)/n` on each data set.
pub fn evaluate(theta: &EvolParams, tree: &PhyloTree, data: &[SequenceSet], n: usize, opts: &ScanOptions) -> Result<Limits> {
    let rows: Vec<(f64, Option<f64>)> = data
        .par_iter()
        .map(|set| eval_one(theta, tree, &set.sequences, n, opts))
        .collect::<Result<_>>()?;
    Ok(Limits {
        w: rows.iter().map(|r| r.0).collect(),
        l: opts.ancestral.then(|| rows.iter().map(|r| r.1.unwrap_or(f64::NAN)).collect()),
    })
}

fn eval_one(theta: &EvolParams, tree: &PhyloTree, seqs: &[Vec<usize>], n: usize, opts: &ScanOptions) -> Result<(f64, Option<f64>)> {
    let w = forward_q(theta, tree, seqs, &opts.dp)?.value / n as f64;
    let l = if opts.ancestral { Some(forward_l(theta, tree, seqs, n, &opts.dp)?.value / n as f64) } else { None };
    Ok((w, l))
}

/// Simulates `replicates` data sets of ancestral length `n` under `theta0`
/// and evaluates the normalised criteria at `theta`.
pub fn estimate_limits(
    theta: &EvolParams,
    theta0: &EvolParams,
    tree: &PhyloTree,
    n: usize,
    replicates: usize,
    seed: u64,
    opts: &ScanOptions,
) -> Result<Limits> {
    let data = simulate_replicates(theta0, tree, n, replicates, seed)?;
    evaluate(theta, tree, &data, n, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrid {
    pub lambda_values: Vec<f64>,
    pub alpha_values: Vec<f64>,
    pub theta0: EvolParams,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
}

impl ScanGrid {
    pub fn new(
        lambda_values: Vec<f64>,
        alpha_values: Vec<f64>,
        theta0: EvolParams,
        n: usize,
        replicates: usize,
        seed: u64,
    ) -> Result<Self> {
        for (name, v, x0) in [("lambda", &lambda_values, theta0.lambda()), ("alpha", &alpha_values, theta0.alpha())] {
            if v.is_empty() {
                return Err(Error::InvalidParameter(format!("empty {name} grid")));
            }
            if v.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
                return Err(Error::Boundary(format!("{name} grid values must be positive and finite")));
            }
            if v.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidParameter(format!("{name} grid must be strictly increasing")));
            }
            if x0 < v[0] || x0 > v[v.len() - 1] {
                return Err(Error::InvalidParameter(format!("{name}0 = {x0} lies outside the {name} grid")));
            }
        }
        if n == 0 || replicates == 0 {
            return Err(Error::InvalidParameter("n and replicates must be at least 1".into()));
        }
        Ok(Self { lambda_values, alpha_values, theta0, n, replicates, seed })
    }

    /// `points` values per axis, spaced by `step · θ₀` and centred on `θ₀`.
    pub fn around(theta0: EvolParams, points: usize, step: f64, n: usize, replicates: usize, seed: u64) -> Result<Self> {
        if points == 0 || points % 2 == 0 {
            return Err(Error::InvalidParameter("grid size must be odd".into()));
        }
        let h = (points / 2) as f64;
        let axis = |x0: f64| (0..points).map(|j| x0 * (1.0 + (j as f64 - h) * step)).collect::<Vec<_>>();
        let (l, a) = (axis(theta0.lambda()), axis(theta0.alpha()));
        Self::new(l, a, theta0, n, replicates, seed)
    }

    pub fn len(&self) -> usize {
        self.lambda_values.len() * self.alpha_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid indices of the values closest to `θ₀`.
    pub fn center(&self) -> (usize, usize) {
        (nearest(&self.lambda_values, self.theta0.lambda()), nearest(&self.alpha_values, self.theta0.alpha()))
    }
}

fn nearest(v: &[f64], x: f64) -> usize {
    (0..v.len()).min_by(|&a, &b| (v[a] - x).abs().total_cmp(&(v[b] - x).abs())).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPoint {
    pub lambda: f64,
    pub alpha: f64,
    pub w: Estimate,
    pub l: Option<Estimate>,
    /// `ŵ(θ₀) − ŵ(θ)` with the paired standard error.
    pub d: Estimate,
    pub d_star: Option<Estimate>,
}

#[derive(Debug, Clone)]
pub struct ScanResult {
    pub grid: ScanGrid,
    /// Row-major over `(lambda, alpha)`.
    pub points: Vec<ScanPoint>,
    pub values: Vec<Limits>,
    pub reference: Limits,
}

impl ScanResult {
    pub fn point(&self, i: usize, j: usize) -> &ScanPoint {
        &self.points[i * self.grid.alpha_values.len() + j]
    }

    /// Points along `α = α₀`, by increasing `λ`.
    pub fn cut_alpha(&self) -> Vec<&ScanPoint> {
        let (_, j) = self.grid.center();
        (0..self.grid.lambda_values.len()).map(|i| self.point(i, j)).collect()
    }

    /// Points along `λ = λ₀`, by increasing `α`.
    pub fn cut_lambda(&self) -> Vec<&ScanPoint> {
        let (i, _) = self.grid.center();
        (0..self.grid.alpha_values.len()).map(|j| self.point(i, j)).collect()
    }

    /// Standard error of `D̂` at point `p` had the two estimates used
    /// independent replicates.
    pub fn unpaired_se(&self, p: usize) -> f64 {
        let (a, b) = (self.reference.w_hat().se, self.points[p].w.se);
        (a * a + b * b).sqrt()
    }

    pub fn write_surface<W: Write>(&self, out: W) -> Result<()> {
        write_points(out, self.points.iter())
    }

    pub fn write_cut_alpha<W: Write>(&self, out: W) -> Result<()> {
        write_points(out, self.cut_alpha().into_iter())
    }

    pub fn write_cut_lambda<W: Write>(&self, out: W) -> Result<()> {
        write_points(out, self.cut_lambda().into_iter())
    }
}

pub const SURFACE_HEADER: &str = "lambda,alpha,w_hat,se_w,l_hat,se_l,d_hat,d_star_hat,se_d,se_d_star";

fn write_points<'a, W: Write>(mut out: W, points: impl Iterator<Item = &'a ScanPoint>) -> Result<()> {
    writeln!(out, "{SURFACE_HEADER}")?;
    let opt = |x: Option<f64>| x.map(format_g12).unwrap_or_default();
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            format_g12(p.lambda),
            format_g12(p.alpha),
            format_g12(p.w.mean),
            format_g12(p.w.se),
            opt(p.l.map(|e| e.mean)),
            opt(p.l.map(|e| e.se)),
            format_g12(p.d.mean),
            opt(p.d_star.map(|e| e.mean)),
            format_g12(p.d.se),
            opt(p.d_star.map(|e| e.se)),
        )?;
    }
    Ok(())
}

/// Evaluates both criteria over the grid on one shared set of replicates.
pub fn grid_scan(grid: &ScanGrid, tree: &PhyloTree, opts: &ScanOptions) -> Result<ScanResult> {
    let data = simulate_replicates(&grid.theta0, tree, grid.n, grid.replicates, grid.seed)?;
    let thetas = grid
        .lambda_values
        .iter()
        .flat_map(|&l| grid.alpha_values.iter().map(move |&a| (l, a)))
        .map(|(l, a)| grid.theta0.with_rates(l, a))
        .collect::<Result<Vec<_>>>()?;
    let on_grid = thetas.iter().position(|t| t.lambda() == grid.theta0.lambda() && t.alpha() == grid.theta0.alpha());

    // One task per (grid point, replicate); results land in fixed slots.
    let r = data.len();
    let extra = usize::from(on_grid.is_none());
    let rows: Vec<(f64, Option<f64>)> = (0..(thetas.len() + extra) * r)
        .into_par_iter()
        .map(|task| {
            let theta = thetas.get(task / r).unwrap_or(&grid.theta0);
            eval_one(theta, tree, &data[task % r].sequences, grid.n, opts)
        })
        .collect::<Result<_>>()?;
    let limits = |g: usize| Limits {
        w: rows[g * r..(g + 1) * r].iter().map(|x| x.0).collect(),
        l: opts.ancestral.then(|| rows[g * r..(g + 1) * r].iter().map(|x| x.1.unwrap_or(f64::NAN)).collect()),
    };
    let values: Vec<Limits> = (0..thetas.len()).map(limits).collect();
    let reference = match on_grid {
        Some(g) => values[g].clone(),
        None => limits(thetas.len()),
    };
    let diff = |a: &[f64], b: &[f64]| Estimate::of(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
    let points = thetas
        .iter()
        .zip(&values)
        .map(|(t, v)| ScanPoint {
            lambda: t.lambda(),
            alpha: t.alpha(),
            w: v.w_hat(),
            l: v.l_hat(),
            d: diff(&reference.w, &v.w),
            d_star: reference.l.as_deref().zip(v.l.as_deref()).map(|(a, b)| diff(a, b)),
        })
        .collect();
    Ok(ScanResult { grid: grid.clone(), points, values, reference })
}

/// Spread of `w_n(θ₀)/n` across replicates at one ancestral length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
}

/// `w_n(θ₀)/n` at each length in `ns`, each from fresh replicates.
pub fn convergence(
    theta0: &EvolParams,
    tree: &PhyloTree,
    ns: &[usize],
    replicates: usize,
    seed: u64,
    dp: &DpOptions,
) -> Result<Vec<ConvergenceRow>> {
    let opts = ScanOptions { dp: *dp, ancestral: false };
    ns.iter()
        .enumerate()
        .map(|(i, &n)| {
            let lim = estimate_limits(theta0, theta0, tree, n, replicates, seed.wrapping_add(i as u64), &opts)?;
            let e = lim.w_hat();
            Ok(ConvergenceRow { n, mean: e.mean, sd: e.sd(replicates), se: e.se })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phylo::make_star;
    use approx::assert_relative_eq;

    #[test]
    fn neumaier_recovers_cancellation() {
        let s: NeumaierSum = [1.0, 1e100, 1.0, -1e100].into_iter().collect();
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn estimate_matches_hand_values() {
        let e = Estimate::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(e.mean, 2.5);
        assert_relative_eq!(e.se, (5.0f64 / 3.0 / 4.0).sqrt(), max_relative = 1e-15);
        assert_eq!(Estimate::of(&[7.0]).se, 0.0);
    }

    #[test]
    fn grid_validation() {
        let t0 = EvolParams::uniform(0.02, 0.1, 4).unwrap();
        assert!(ScanGrid::new(vec![], vec![0.1], t0.clone(), 10, 1, 0).is_err());
        assert!(ScanGrid::new(vec![0.02, 0.01], vec![0.1], t0.clone(), 10, 1, 0).is_err());
        assert!(ScanGrid::new(vec![0.03, 0.04], vec![0.1], t0.clone(), 10, 1, 0).is_err());
        assert!(ScanGrid::new(vec![0.0, 0.02], vec![0.1], t0.clone(), 10, 1, 0).is_err());
        let g = ScanGrid::around(t0, 7, 0.25, 10, 2, 0).unwrap();
        assert_eq!(g.len(), 49);
        assert_eq!(g.center(), (3, 3));
        assert_relative_eq!(g.lambda_values[0], 0.005, max_relative = 1e-12);
    }

    #[test]
    fn single_point_grid_has_zero_divergence() {
        let tree = make_star(3, &[1.0; 3]).unwrap();
        let t0 = EvolParams::uniform(0.02, 0.1, 4).unwrap();
        let grid = ScanGrid::new(vec![0.02], vec![0.1], t0, 12, 3, 5).unwrap();
        let res = grid_scan(&grid, &tree, &ScanOptions::default()).unwrap();
        assert_eq!(res.points.len(), 1);
        let p = &res.points[0];
        assert_eq!(p.d.mean, 0.0);
        assert_eq!(p.d_star.unwrap().mean, 0.0);
        assert!(p.w.mean < 0.0 && p.l.unwrap().mean < 0.0);
    }

    #[test]
    fn off_grid_reference_is_evaluated() {
        let tree = make_star(2, &[1.0; 2]).unwrap();
        let t0 = EvolParams::uniform(0.02, 0.1, 4).unwrap();
        let grid = ScanGrid::new(vec![0.01, 0.03], vec![0.1], t0.clone(), 10, 2, 1).unwrap();
        let opts = ScanOptions { ancestral: false, ..ScanOptions::default() };
        let res = grid_scan(&grid, &tree, &opts).unwrap();
        let direct = estimate_limits(&t0, &t0, &tree, 10, 2, 1, &opts).unwrap();
        assert_eq!(res.reference, direct);
        assert!(res.points[0].d_star.is_none());
    }

    #[test]
    fn surface_csv_layout() {
        let tree = make_star(2, &[1.0; 2]).unwrap();
        let t0 = EvolParams::uniform(0.02, 0.1, 4).unwrap();
        let grid = ScanGrid::around(t0, 3, 0.5, 8, 2, 3).unwrap();
        let res = grid_scan(&grid, &tree, &ScanOptions::default()).unwrap();
        let mut buf = Vec::new();
        res.write_surface(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SURFACE_HEADER);
        assert_eq!(lines.len(), 10);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 10));
        assert_eq!(res.cut_alpha().len(), 3);
        assert!(res.cut_lambda().iter().all(|p| p.lambda == 0.02));
    }
}
