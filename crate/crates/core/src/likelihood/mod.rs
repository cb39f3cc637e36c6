//! Forward recursions on star trees: `log Q` summed over every homology
//! structure, and `log P` restricted to a fixed ancestral length.
//!
//! The per-column chain is factorised leaf by leaf, so a lattice cell holds
//! `3 * 2^k - 2` partial masses instead of a full transition matrix product.
//! Each cell carries its own power-of-two exponent.

mod brute;

use std::time::Instant;

pub use brute::{brute_l, brute_q, BruteCaps, BruteResult};
pub use crate::hmm::Boundary;

use crate::error::{Error, Result};
use crate::params::EvolParams;
use crate::phylo::PhyloTree;
use crate::real::Real;
use crate::tkf91::{BranchKernel, BranchTime};

/// Largest star handled by the forward recursions.
pub const MAX_LEAVES: usize = 10;

/// Lattice region visited by the recursion. Every banded value is a lower
/// bound on the full-lattice value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Band {
    Full,
    /// Box of half-width `w` around the best cell of the previous slab.
    Fixed(usize),
    /// Box over the cells scoring within `cut` nats of the previous slab's
    /// best cell, padded by `margin`. Cells are scored by their forward mass
    /// times a rough guess of the backward factor.
    Adaptive { cut: f64, margin: usize },
    /// Adaptive boxes of growing size until two successive values agree to
    /// within the tolerance.
    Auto,
}

/// Adaptive box used at refinement level `i` of [`Band::Auto`].
pub fn auto_level(i: usize) -> Band {
    Band::Adaptive { cut: 8.0 + 4.0 * i as f64, margin: 2 + 2 * i }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpOptions {
    pub boundary: Boundary,
    pub band: Band,
    /// Absolute log-value difference at which [`Band::Auto`] stops refining.
    pub tolerance: f64,
}

impl Default for DpOptions {
    fn default() -> Self {
        Self { boundary: Boundary::Structures, band: Band::Auto, tolerance: 1e-9 }
    }
}

impl DpOptions {
    pub fn full() -> Self {
        Self { band: Band::Full, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Q,
    L { n: usize },
}

#[derive(Debug, Clone)]
pub struct LikelihoodResult<T> {
    /// Natural log of the probability.
    pub value: T,
    pub mode: Mode,
    /// Lattice cells evaluated, summed over refinement runs.
    pub cells: u64,
    pub seconds: f64,
    /// Region of the accepted run.
    pub band: Band,
}

/// `log(sum(exp(values)))`, with `-inf` for an empty list.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let m = values.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() || m == T::infinity() {
        return m;
    }
    let s: T = values.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub fn log_add<T: Real>(a: T, b: T) -> T {
    log_sum_exp(&[a, b])
}

/// `log Q`: every homology structure whose walk ends at the sequence lengths,
/// of any ancestral length.
pub fn forward_q<T: Real>(
    theta: &EvolParams<T>,
    tree: &PhyloTree,
    seqs: &[Vec<usize>],
    opts: &DpOptions,
) -> Result<LikelihoodResult<T>> {
    let clock = Instant::now();
    check_inputs(theta, tree, seqs)?;
    // Slicing runs along the longest sequence; the total does not depend on leaf order.
    let k = seqs.len();
    let pivot = (0..k).max_by_key(|&i| (seqs[i].len(), std::cmp::Reverse(i))).unwrap_or(0);
    let mut order: Vec<usize> = (0..k).collect();
    order.swap(0, pivot);
    let times: Vec<f64> = tree.leaf_times();
    let ptimes: Vec<f64> = order.iter().map(|&i| times[i]).collect();
    let pseqs: Vec<&[usize]> = order.iter().map(|&i| seqs[i].as_slice()).collect();
    let eng = Engine::new(theta, &ptimes, &pseqs, opts.boundary)?;
    let (value, cells, band) = eng.with_band(opts, |w| eng.sweep(None, w))?;
    Ok(LikelihoodResult { value, mode: Mode::Q, cells, seconds: clock.elapsed().as_secs_f64(), band })
}

/// `log P`: structures with exactly `n` columns, null columns included.
pub fn forward_l<T: Real>(
    theta: &EvolParams<T>,
    tree: &PhyloTree,
    seqs: &[Vec<usize>],
    n: usize,
    opts: &DpOptions,
) -> Result<LikelihoodResult<T>> {
    let clock = Instant::now();
    if n == 0 {
        return Err(Error::InvalidParameter("ancestral length must be at least 1".into()));
    }
    check_inputs(theta, tree, seqs)?;
    let times = tree.leaf_times();
    let pseqs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let eng = Engine::new(theta, &times, &pseqs, opts.boundary)?;
    let (value, cells, band) = eng.with_band(opts, |w| eng.sweep(Some(n), w))?;
    Ok(LikelihoodResult { value, mode: Mode::L { n }, cells, seconds: clock.elapsed().as_secs_f64(), band })
}

fn check_inputs<T: Real>(theta: &EvolParams<T>, tree: &PhyloTree, seqs: &[Vec<usize>]) -> Result<()> {
    if !tree.is_star() {
        return Err(Error::UnsupportedTree { expected: "star" });
    }
    if seqs.len() != tree.leaf_count() {
        return Err(Error::InvalidParameter(format!("{} sequences for {} leaves", seqs.len(), tree.leaf_count())));
    }
    if seqs.len() > MAX_LEAVES {
        return Err(Error::InvalidParameter(format!("at most {MAX_LEAVES} leaves are supported")));
    }
    let a = theta.nu().len();
    if let Some(&bad) = seqs.iter().flatten().find(|&&x| x >= a) {
        return Err(Error::InvalidParameter(format!("symbol index {bad} outside an alphabet of size {a}")));
    }
    Ok(())
}

const EMPTY: i32 = i32::MIN;

/// Box placement for one sweep.
#[derive(Clone, Copy)]
enum Window {
    All,
    Fixed(usize),
    /// Cells within `cut` nats of the slab peak, widened by `margin`.
    Adaptive { cut: f64, margin: usize },
}

#[derive(Clone, Copy)]
struct Axis {
    base: isize,
    ok0: usize,
    ok1: usize,
    inner: usize,
    score: f64,
}

#[derive(Clone, Copy)]
enum Src {
    None,
    Prev(usize),
    Cur(usize),
}

/// One slice (Q) or layer (L) of the lattice: a box of cells. The buffers
/// are reused between slabs and may be longer than the box.
struct Slab<T> {
    lo: Vec<usize>,
    dims: Vec<usize>,
    strides: Vec<usize>,
    n: usize,
    vals: Vec<T>,
    exps: Vec<i32>,
}

impl<T: Real> Slab<T> {
    fn reset(&mut self, lo: Vec<usize>, hi: &[usize], width: usize) {
        self.dims = lo.iter().zip(hi).map(|(&l, &h)| if h >= l { h - l + 1 } else { 0 }).collect();
        self.strides = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            self.strides[i] = self.strides[i + 1] * self.dims[i + 1];
        }
        self.lo = lo;
        self.n = self.dims.iter().product();
        if self.exps.len() < self.n {
            self.exps.resize(self.n, EMPTY);
            self.vals.resize(self.n * width, T::zero());
        }
    }

    fn cells(&self) -> usize {
        self.n
    }

    /// Cell index of `y - d`, where `d` is a 0/1 offset given as a bitmask
    /// over the slab's coordinates starting at bit `shift`.
    #[inline]
    fn offset(&self, y: &[usize], d: usize, shift: usize) -> Option<usize> {
        let mut idx = 0;
        for i in 0..self.dims.len() {
            let step = d >> (i + shift) & 1;
            if y[i] < step {
                return None;
            }
            let yi = y[i] - step;
            if yi < self.lo[i] || yi >= self.lo[i] + self.dims[i] {
                return None;
            }
            idx += (yi - self.lo[i]) * self.strides[i];
        }
        Some(idx)
    }

    fn empty() -> Self {
        Self { lo: Vec::new(), dims: Vec::new(), strides: Vec::new(), n: 0, vals: Vec::new(), exps: Vec::new() }
    }
}

struct Scratch<T> {
    prod: Vec<T>,
    h: Vec<T>,
    root_f: Vec<T>,
    ins_f: Vec<T>,
}

struct Engine<T> {
    k: usize,
    a: usize,
    width: usize,
    lens: Vec<usize>,
    kern: Vec<BranchKernel<T>>,
    surv: Vec<T>,
    nu: Vec<T>,
    /// `trans[i][p * a + root]`: substitution probability from `root` to the
    /// `p`-th character of sequence `i`.
    trans: Vec<Vec<T>>,
    ins_emit: Vec<Vec<T>>,
    off_u: Vec<usize>,
    off_v: Vec<usize>,
    inv_keep_null: T,
    null_tail: Vec<T>,
    pow2: Vec<T>,
    ln2: T,
    boundary: Boundary,
    /// Running `-ln nu(x)` over each sequence, so that box centring does not
    /// favour cells that have simply emitted fewer characters.
    surprisal: Vec<Vec<f64>>,
    /// Per-column variance of the descendant count on each branch.
    spread: Vec<f64>,
    /// Cells are rescaled once their peak drifts beyond `2^±rescale`.
    rescale: usize,
}

impl<T: Real> Engine<T> {
    fn new(theta: &EvolParams<T>, times: &[f64], seqs: &[&[usize]], boundary: Boundary) -> Result<Self> {
        let k = seqs.len();
        let a = theta.nu().len();
        let kern = times
            .iter()
            .map(|&t| BranchKernel::new(theta.lambda(), BranchTime::new(T::of(t))?))
            .collect::<Result<Vec<_>>>()?;
        let surv = (0..1usize << k)
            .map(|m| {
                kern.iter()
                    .enumerate()
                    .map(|(i, kk)| if m >> i & 1 == 1 { kk.alpha } else { T::one() - kk.alpha })
                    .fold(T::one(), |x, y| x * y)
            })
            .collect();
        let nu = theta.nu().to_vec();
        let mut trans = Vec::with_capacity(k);
        let mut ins_emit = Vec::with_capacity(k);
        for (i, s) in seqs.iter().enumerate() {
            let m = theta.subst().matrix(BranchTime::new(T::of(times[i]))?);
            let mut v = Vec::with_capacity(s.len() * a);
            for &x in s.iter() {
                v.extend((0..a).map(|root| m.p(root, x)));
            }
            trans.push(v);
            ins_emit.push(s.iter().map(|&x| nu[x]).collect());
        }
        let mut off_u = vec![0; k + 1];
        let mut next = 1;
        for j in (1..=k).rev() {
            off_u[j] = next;
            next += 1 << j;
        }
        let mut off_v = vec![0; k];
        for j in (0..k).rev() {
            off_v[j] = next;
            next += 1 << j;
        }
        let pi0 = kern.iter().fold(T::one(), |x, kk| x * kk.r);
        let mut null_tail = vec![T::one(); k + 1];
        for j in (0..k).rev() {
            null_tail[j] = null_tail[j + 1] * kern[j].no_insert(false);
        }
        let mut pow2 = Vec::new();
        let mut x = T::one();
        while x > T::zero() {
            pow2.push(x);
            x = x / T::of(2.0);
        }
        let spread = kern.iter().map(|kk| 2.0 * (kk.r / kk.b).to_f64_lossy()).collect();
        Ok(Self {
            k,
            a,
            width: next,
            lens: seqs.iter().map(|s| s.len()).collect(),
            kern,
            surv,
            nu,
            trans,
            ins_emit,
            off_u,
            off_v,
            inv_keep_null: T::one() / (T::one() - pi0),
            null_tail,
            rescale: pow2.len() / 16,
            pow2,
            ln2: T::LN_2(),
            boundary,
            surprisal: seqs
                .iter()
                .map(|s| {
                    let mut acc = vec![0.0];
                    for &x in s.iter() {
                        acc.push(acc.last().unwrap() - theta.nu()[x].to_f64_lossy().ln());
                    }
                    acc
                })
                .collect(),
            spread,
        })
    }

    fn scratch(&self) -> Scratch<T> {
        Scratch {
            prod: vec![T::zero(); (1 << self.k) * self.a],
            h: vec![T::zero(); 1 << self.k],
            root_f: vec![T::zero(); 1 << self.k],
            ins_f: vec![T::zero(); self.k],
        }
    }

    fn with_band(&self, opts: &DpOptions, run: impl Fn(Window) -> (T, u64)) -> Result<(T, u64, Band)> {
        let span = self.lens.iter().copied().max().unwrap_or(0);
        let window = |band: Band| match band {
            Band::Fixed(w) if 2 * w < span + 1 => Window::Fixed(w),
            Band::Adaptive { cut, margin } if 2 * margin < span + 1 => Window::Adaptive { cut, margin },
            _ => Window::All,
        };
        let (value, cells, band) = match opts.band {
            Band::Auto => {
                let (mut last, mut total) = (None::<T>, 0);
                let mut level = 0;
                loop {
                    let band = auto_level(level);
                    let win = window(band);
                    let (v, c) = run(win);
                    total += c;
                    if matches!(win, Window::All) {
                        break (v, total, Band::Full);
                    }
                    if let Some(prev) = last {
                        if (v - prev).abs().to_f64_lossy() <= opts.tolerance || !v.is_finite() && !prev.is_finite() {
                            break (v, total, band);
                        }
                    }
                    last = Some(v);
                    level += 1;
                }
            }
            band => {
                let win = window(band);
                let (v, c) = run(win);
                (v, c, if matches!(win, Window::All) { Band::Full } else { band })
            }
        };
        if !value.is_finite() {
            return Err(Error::Domain("forward recursion found no structure with positive probability".into()));
        }
        Ok((value, cells, band))
    }

    /// Sweeps the lattice one slab at a time. In Q-mode slab `s` holds the
    /// cells whose first coordinate is `s`; in L-mode it holds every cell
    /// reached after `s` root columns. Returns the log value, the number of
    /// number of cells visited.
    /// Dispatches on the leaf count so the per-cell loops have fixed bounds.
    fn sweep(&self, ancestral: Option<usize>, w: Window) -> (T, u64) {
        match self.k {
            1 => self.sweep_k::<1>(ancestral, w),
            2 => self.sweep_k::<2>(ancestral, w),
            3 => self.sweep_k::<3>(ancestral, w),
            4 => self.sweep_k::<4>(ancestral, w),
            5 => self.sweep_k::<5>(ancestral, w),
            6 => self.sweep_k::<6>(ancestral, w),
            7 => self.sweep_k::<7>(ancestral, w),
            8 => self.sweep_k::<8>(ancestral, w),
            9 => self.sweep_k::<9>(ancestral, w),
            _ => self.sweep_k::<10>(ancestral, w),
        }
    }

    fn sweep_k<const K: usize>(&self, ancestral: Option<usize>, w: Window) -> (T, u64) {
        let k = K;
        let q_mode = ancestral.is_none();
        let free: Vec<usize> = if q_mode { (1..k).collect() } else { (0..k).collect() };
        let dk = free.len();
        let steps = ancestral.unwrap_or(self.lens[0]);
        let ends: Vec<usize> = free.iter().map(|&i| self.lens[i]).collect();
        let mut center = vec![0.0f64; dk];
        // Adaptive window: coordinate range of the cells close to the peak,
        // and the expected advance to the next slab.
        let mut span = vec![(0.0f64, 0.0f64); dk];
        let mut drift = vec![0.0f64; dk];
        let mut scores: Vec<f64> = Vec::new();
        let mut prev = Slab::empty();
        let mut cur = Slab::empty();
        let mut cells = 0u64;
        let mut sc = self.scratch();
        let mut roots = vec![Src::None; 1 << k];
        let mut ins = vec![Src::None; k];
        let mut z = vec![0usize; k];
        let full = (1usize << dk) - 1;
        // Per axis and coordinate: offset into the previous slab, the masks
        // of available steps, and the centring score.
        let mut axes: Vec<Vec<Axis>> = vec![Vec::new(); dk];
        for s in 0..=steps {
            let (lo, hi): (Vec<usize>, Vec<usize>) = match w {
                Window::All => (vec![0; dk], ends.clone()),
                Window::Fixed(w) => center
                    .iter()
                    .zip(&ends)
                    .map(|(&c, &n)| {
                        let c = (c.round().max(0.0) as usize).min(n);
                        (c.saturating_sub(w), (c + w).min(n))
                    })
                    .unzip(),
                Window::Adaptive { margin, .. } => (0..dk)
                    .map(|i| {
                        let lo = (span[i].0 + drift[i]).floor().max(0.0) as usize;
                        let hi = (span[i].1 + drift[i]).ceil().max(0.0) as usize;
                        (lo.saturating_sub(margin).min(ends[i]), (hi + margin).min(ends[i]))
                    })
                    .unzip(),
            };
            std::mem::swap(&mut prev, &mut cur);
            cur.reset(lo, &hi, self.width);
            let rest = ancestral.map(|n| n - s);
            for (i, axis) in axes.iter_mut().enumerate() {
                axis.clear();
                for y in cur.lo[i]..cur.lo[i] + cur.dims[i] {
                    let mut ax = Axis { base: 0, ok0: 0, ok1: 0, inner: usize::from(y > cur.lo[i]) << i, score: 0.0 };
                    if s > 0 {
                        let b = y as isize - prev.lo[i] as isize;
                        let d = prev.dims[i] as isize;
                        ax.ok0 = usize::from(b >= 0 && b < d) << i;
                        ax.ok1 = usize::from(b >= 1 && b <= d) << i;
                        ax.base = b * prev.strides[i] as isize;
                    }
                    ax.score = self.outlook(free[i], y, ends[i], rest);
                    axis.push(ax);
                }
            }
            let cur_sum = stride_sums(&cur.strides);
            let prev_sum = stride_sums(&prev.strides);
            let mut best: Option<(f64, usize)> = None;
            scores.clear();
            let mut y = cur.lo.clone();
            for idx in 0..cur.cells() {
                if q_mode {
                    z[0] = s;
                    z[1..].copy_from_slice(&y);
                } else {
                    z.copy_from_slice(&y);
                }
                let (mut ok0, mut ok1, mut base, mut inner, mut score) = (0, 0, 0isize, 0, 0.0);
                for i in 0..dk {
                    let ax = &axes[i][y[i] - cur.lo[i]];
                    ok0 |= ax.ok0;
                    ok1 |= ax.ok1;
                    base += ax.base;
                    inner |= ax.inner;
                    score += ax.score;
                }
                let from_prev = |d: usize| -> Src {
                    if s > 0 && d & !ok1 == 0 && (full & !d) & !ok0 == 0 {
                        Src::Prev((base - prev_sum[d] as isize) as usize)
                    } else {
                        Src::None
                    }
                };
                let from_cur = |d: usize| -> Src {
                    if d & !inner == 0 {
                        Src::Cur(idx - cur_sum[d])
                    } else {
                        Src::None
                    }
                };
                if q_mode {
                    roots[0] = Src::None;
                    for (d, slot) in roots.iter_mut().enumerate().skip(1) {
                        *slot = if d & 1 == 1 { from_prev(d >> 1) } else { from_cur(d >> 1) };
                    }
                    ins[0] = from_prev(0);
                    for j in 1..k {
                        ins[j] = from_cur(1 << (j - 1));
                    }
                } else {
                    for (d, slot) in roots.iter_mut().enumerate() {
                        *slot = from_prev(d);
                    }
                    for (j, slot) in ins.iter_mut().enumerate() {
                        *slot = from_cur(1 << j);
                    }
                }
                let origin = s == 0 && z.iter().all(|&x| x == 0);
                let (before, after) = cur.vals.split_at_mut(idx * self.width);
                let out = &mut after[..self.width];
                let e = self.cell::<K>(&z, &roots, &ins, &prev, before, &cur.exps[..idx], origin, q_mode, out, &mut sc);
                cur.exps[idx] = e;
                let mut lm = f64::NEG_INFINITY;
                if e != EMPTY {
                    lm = out[0].to_f64_lossy().ln() + f64::from(e) * std::f64::consts::LN_2 + score;
                    if best.is_none_or(|(b, _)| lm > b) {
                        best = Some((lm, idx));
                    }
                }
                scores.push(lm);
                advance(&mut y, &cur.lo, &cur.dims);
            }
            cells += cur.cells() as u64;

            // The best-scoring cell positions the next box.
            let left = (steps - s).max(1) as f64;
            if let Some((peak, at)) = best {
                for i in 0..dk {
                    let c = (cur.lo[i] + at / cur.strides[i] % cur.dims[i]) as f64;
                    drift[i] = (ends[i] as f64 - c) / left;
                    center[i] = c + drift[i];
                }
                if let Window::Adaptive { cut, .. } = w {
                    span.iter_mut().for_each(|r| *r = (f64::INFINITY, f64::NEG_INFINITY));
                    let mut y = cur.lo.clone();
                    for &lm in &scores {
                        if lm >= peak - cut {
                            for i in 0..dk {
                                span[i].0 = span[i].0.min(y[i] as f64);
                                span[i].1 = span[i].1.max(y[i] as f64);
                            }
                        }
                        advance(&mut y, &cur.lo, &cur.dims);
                    }
                }
            } else {
                for i in 0..dk {
                    drift[i] = (ends[i] as f64 - center[i]) / left;
                    center[i] += drift[i];
                    span[i] = (center[i] - drift[i], center[i] - drift[i]);
                }
            }
        }
        let value = match cur.offset(&ends, 0, 0) {
            Some(i) => self.log_of(&cur, i),
            None => T::neg_infinity(),
        };
        (value, cells)
    }

    /// Rough log of the backward factor along one axis: the characters still
    /// to be emitted, and in L-mode how plausible the remaining length is
    /// after `rest` more root columns.
    fn outlook(&self, leaf: usize, y: usize, end: usize, rest: Option<usize>) -> f64 {
        let mut score = self.surprisal[leaf][y];
        if let Some(rest) = rest {
            let gap = (end - y) as f64 - rest as f64;
            score -= gap * gap / (2.0 * self.spread[leaf] * rest.max(1) as f64);
        }
        score
    }

    fn log_of(&self, slab: &Slab<T>, i: usize) -> T {
        if slab.exps[i] == EMPTY {
            return T::neg_infinity();
        }
        slab.vals[i * self.width].ln() + T::of(f64::from(slab.exps[i])) * self.ln2
    }

    #[inline]
    fn factor(&self, reference: i32, e: i32) -> T {
        if e == EMPTY {
            return T::zero();
        }
        let d = (reference - e) as usize;
        if d < self.pow2.len() {
            self.pow2[d]
        } else {
            T::zero()
        }
    }

    /// Fills one cell and returns its exponent.
    #[allow(clippy::too_many_arguments)]
    fn cell<const K: usize>(
        &self,
        z: &[usize],
        roots: &[Src],
        ins: &[Src],
        prev: &Slab<T>,
        before: &[T],
        before_exps: &[i32],
        origin: bool,
        q_mode: bool,
        out: &mut [T],
        sc: &mut Scratch<T>,
    ) -> i32 {
        let k = K;
        let wd = self.width;
        let exp_of = |s: Src| match s {
            Src::None => EMPTY,
            Src::Prev(i) => prev.exps[i],
            Src::Cur(i) => before_exps[i],
        };
        let vals_of = |s: Src| -> &[T] {
            match s {
                Src::None => &[],
                Src::Prev(i) => &prev.vals[i * wd..(i + 1) * wd],
                Src::Cur(i) => &before[i * wd..(i + 1) * wd],
            }
        };
        let mut reference = if origin { 0 } else { EMPTY };
        for &s in roots.iter().chain(ins) {
            reference = reference.max(exp_of(s));
        }
        out.fill(T::zero());
        if reference == EMPTY {
            return EMPTY;
        }
        for (d, &s) in roots.iter().enumerate() {
            sc.root_f[d] = self.factor(reference, exp_of(s));
        }
        for (j, &s) in ins.iter().enumerate() {
            sc.ins_f[j] = self.factor(reference, exp_of(s));
        }

        // Joint emissions of every survival pattern that fits below z.
        let valid = (0..k).fold(0usize, |m, i| m | (usize::from(z[i] > 0) << i));
        let a = self.a;
        sc.prod[..a].copy_from_slice(&self.nu);
        sc.h[0] = T::one();
        for d in 1..1usize << k {
            if d & !valid != 0 {
                continue;
            }
            let i = d.trailing_zeros() as usize;
            let base = (d ^ (1 << i)) * a;
            let row = &self.trans[i][(z[i] - 1) * a..z[i] * a];
            let mut s = T::zero();
            for r in 0..a {
                let p = sc.prod[base + r] * row[r];
                sc.prod[d * a + r] = p;
                s = s + p;
            }
            sc.h[d] = s;
        }

        let uk = self.off_u[k];
        for d in 0..1usize << k {
            if let s @ (Src::Prev(_) | Src::Cur(_)) = roots[d] {
                if d == 0 && q_mode {
                    continue;
                }
                let f = sc.root_f[d];
                if f > T::zero() {
                    out[uk + d] = vals_of(s)[0] * f * self.surv[d] * sc.h[d];
                }
            }
        }
        if origin && self.boundary == Boundary::SurvivorStart {
            out[uk + (1 << k) - 1] = out[uk + (1 << k) - 1] + T::one();
        }

        let mut u0 = T::zero();
        for j in (0..k).rev() {
            let kj = &self.kern[j];
            let up = self.off_u[j + 1];
            let vj = self.off_v[j];
            let half = 1usize << j;
            if let s @ (Src::Prev(_) | Src::Cur(_)) = ins[j] {
                let f = sc.ins_f[j];
                if f > T::zero() {
                    let pv = vals_of(s);
                    let e = self.ins_emit[j][z[j] - 1] * f;
                    for m in 0..half {
                        out[vj + m] = e * ((pv[up + (m | half)] + pv[vj + m]) * kj.r + pv[up + m] * kj.kappa);
                    }
                }
            }
            let stay_dead = kj.no_insert(false);
            for m in 0..half {
                let v = (out[up + (m | half)] + out[vj + m]) * kj.b + out[up + m] * stay_dead;
                if j == 0 {
                    u0 = v;
                } else {
                    out[self.off_u[j] + m] = v;
                }
            }
        }

        let mut col_end = u0;
        if origin && self.boundary == Boundary::Structures {
            col_end = col_end + T::one();
        }
        if q_mode {
            let c = col_end * self.inv_keep_null;
            let r0 = c * self.surv[0];
            out[uk] = r0;
            for j in 1..k {
                out[self.off_u[j]] = out[self.off_u[j]] + r0 * self.null_tail[j];
            }
            out[0] = c;
        } else {
            out[0] = col_end;
        }

        let peak = out.iter().copied().fold(T::zero(), T::max);
        if peak <= T::zero() {
            out.fill(T::zero());
            return EMPTY;
        }
        if peak >= self.pow2[self.rescale] && peak <= T::one() / self.pow2[self.rescale] {
            return reference;
        }
        let shift = peak.log2().floor();
        let s = shift.to_i32().unwrap_or(0);
        let scale = T::of(2.0).powi(-s);
        for v in out.iter_mut() {
            *v = *v * scale;
        }
        reference + s
    }
}

/// `sums[d]`: total stride of the coordinates set in bitmask `d`.
fn stride_sums(strides: &[usize]) -> Vec<usize> {
    let mut sums = vec![0; 1 << strides.len()];
    for d in 1..sums.len() {
        let i = d.trailing_zeros() as usize;
        sums[d] = sums[d & (d - 1)] + strides[i];
    }
    sums
}

fn advance(y: &mut [usize], lo: &[usize], dims: &[usize]) {
    for i in (0..y.len()).rev() {
        y[i] += 1;
        if y[i] < lo[i] + dims[i] {
            return;
        }
        y[i] = lo[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{build_pair_hmm, build_star_hmm, forward_hmm};
    use crate::phylo::make_star;
    use approx::assert_relative_eq;

    fn theta(l: f64, a: f64) -> EvolParams<f64> {
        EvolParams::uniform(l, a, 4).unwrap()
    }

    #[test]
    fn lse_cases() {
        assert_relative_eq!(log_sum_exp(&[0.5f64.ln(), 0.5f64.ln()]), 0.0, epsilon = 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, -3.0]), -3.0);
        assert_relative_eq!(log_sum_exp(&[-1000.0, -1000.0]), -1000.0 + 2f64.ln(), epsilon = 1e-12);
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert_relative_eq!(log_add(-1.0f64, -2.0), ((-1f64).exp() + (-2f64).exp()).ln(), epsilon = 1e-15);
    }

    #[test]
    fn empty_sequences() {
        let tree = make_star(3, &[1.0; 3]).unwrap();
        let seqs = vec![Vec::new(); 3];
        let q = forward_q(&theta(0.02, 0.1), &tree, &seqs, &DpOptions::default()).unwrap();
        let pi0: f64 = 7.538_578_676_376_356e-6;
        assert_relative_eq!(q.value, -(1.0 - pi0).ln(), max_relative = 1e-9);
        let l = forward_l(&theta(0.02, 0.1), &tree, &seqs, 2, &DpOptions::default()).unwrap();
        assert_relative_eq!(l.value, 2.0 * pi0.ln(), max_relative = 1e-12);
    }

    #[test]
    fn agrees_with_generic_chain() {
        let tree = make_star(3, &[0.3, 1.1, 0.7]).unwrap();
        let th = theta(0.4, 0.5);
        let seqs = vec![vec![0, 2, 1], vec![3], vec![1, 1]];
        for b in [Boundary::Structures, Boundary::SurvivorStart] {
            let spec = build_star_hmm(0.4, &tree, b).unwrap();
            let want = forward_hmm(&spec, th.subst(), &seqs).unwrap();
            let opts = DpOptions { boundary: b, ..DpOptions::full() };
            let got = forward_q(&th, &tree, &seqs, &opts).unwrap().value;
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn pair_equivalence_small() {
        let tree = make_star(2, &[0.4, 0.9]).unwrap();
        let th = theta(0.7, 0.3);
        let pair = build_pair_hmm(0.7, 1.3).unwrap();
        let seqs = vec![vec![0, 1, 2], vec![2, 2]];
        let opts = DpOptions { boundary: Boundary::SurvivorStart, ..DpOptions::full() };
        let got = forward_q(&th, &tree, &seqs, &opts).unwrap().value;
        let want = forward_hmm(&pair, th.subst(), &seqs).unwrap();
        assert_relative_eq!(got, want, max_relative = 1e-12);
    }

    #[test]
    fn band_matches_full() {
        let tree = make_star(3, &[1.0; 3]).unwrap();
        let th = theta(0.05, 0.1);
        let base: Vec<usize> = (0..60).map(|i| (i * 7 + i / 3) % 4).collect();
        let mut s2 = base.clone();
        s2.remove(10);
        let mut s3 = base.clone();
        s3.insert(30, 2);
        let seqs = vec![base, s2, s3];
        let full = forward_q(&th, &tree, &seqs, &DpOptions::full()).unwrap();
        let auto = forward_q(&th, &tree, &seqs, &DpOptions::default()).unwrap();
        assert!(matches!(auto.band, Band::Adaptive { .. }));
        assert!(auto.cells < full.cells);
        assert!((auto.value - full.value).abs() < 1e-9);
        let lf = forward_l(&th, &tree, &seqs, 60, &DpOptions::full()).unwrap();
        let la = forward_l(&th, &tree, &seqs, 60, &DpOptions::default()).unwrap();
        assert!((la.value - lf.value).abs() < 1e-9);
        assert!(lf.value <= full.value);
        for w in [1, 2, 4] {
            let fixed = forward_l(&th, &tree, &seqs, 60, &DpOptions { band: Band::Fixed(w), ..DpOptions::default() });
            assert!(fixed.unwrap().value <= lf.value + 1e-12);
        }
    }

    #[test]
    fn single_precision_runs() {
        let tree = make_star(2, &[0.5, 0.5]).unwrap();
        let th32 = EvolParams::<f32>::uniform(0.1, 0.2, 4).unwrap();
        let th64 = theta(0.1, 0.2);
        let seqs = vec![vec![0, 1, 2, 3], vec![0, 1, 3]];
        let a = forward_q(&th32, &tree, &seqs, &DpOptions::full()).unwrap().value;
        let b = forward_q(&th64, &tree, &seqs, &DpOptions::full()).unwrap().value;
        assert!((f64::from(a) - b).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_input() {
        let tree = make_star(2, &[0.5, 0.5]).unwrap();
        let th = theta(0.1, 0.2);
        assert!(forward_q(&th, &tree, &[vec![4], vec![0]], &DpOptions::default()).is_err());
        assert!(forward_q(&th, &tree, &[vec![0]], &DpOptions::default()).is_err());
        assert!(forward_l(&th, &tree, &[vec![0], vec![0]], 0, &DpOptions::default()).is_err());
    }
}
