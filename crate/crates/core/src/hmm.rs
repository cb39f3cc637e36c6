//! Multiple-HMM equivalent of the star-tree column law, the three-state
//! pair-HMM, and a plain log-space forward algorithm over either.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::homology::StarLaw;
use crate::phylo::PhyloTree;
use crate::real::Real;
use crate::substitution::{SubstParams, F81};
use crate::tkf91::{BranchKernel, BranchTime};

/// How a structure starts before its first root column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Plain column sequences: no insertions before the first root column,
    /// and the empty structure counts once.
    #[default]
    Structures,
    /// The chain starts as if a root character had just survived on every
    /// branch, so leading insertions are allowed.
    SurvivorStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    /// Fate of a root character; bit `i` of `mask` is set when leaf `i` keeps it.
    RootFate { mask: usize },
    /// Insertion on `leaf`; `memory` holds the fates of leaves below it.
    Insert { leaf: usize, memory: usize },
    /// Pair-HMM states.
    Match,
    InsertFirst,
    InsertSecond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emission {
    /// Joint emission of one character on the leaves in `mask`.
    Joint { mask: usize },
    /// Independent emission on one leaf.
    Single { leaf: usize },
    Silent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDescriptor {
    pub kind: StateKind,
    pub emission: Emission,
    pub advance: Vec<usize>,
}

impl StateDescriptor {
    pub fn label(&self) -> String {
        match self.kind {
            StateKind::RootFate { mask } => format!("R{}", bits(mask, self.advance.len())),
            StateKind::Insert { leaf, memory } => {
                if leaf == 0 {
                    format!("I{}", leaf + 1)
                } else {
                    format!("I{}[{}]", leaf + 1, bits(memory, leaf))
                }
            }
            StateKind::Match => "D".into(),
            StateKind::InsertFirst => "H".into(),
            StateKind::InsertSecond => "V".into(),
        }
    }
}

fn bits(mask: usize, n: usize) -> String {
    (0..n).map(|i| if mask >> i & 1 == 1 { '1' } else { '0' }).collect()
}

/// State machine with log-space transitions, start and end weights.
#[derive(Debug, Clone)]
pub struct HmmSpec<T> {
    pub states: Vec<StateDescriptor>,
    /// Row-major `states x states` log transition matrix.
    pub log_trans: Vec<T>,
    pub log_start: Vec<T>,
    /// Weight of stopping in each state once every sequence is consumed.
    pub log_end: Vec<T>,
    /// Weight of generating nothing at all, not counting silent loops.
    pub log_empty: T,
    /// Branch times used by the joint emissions, one per sequence.
    pub times: Vec<T>,
}

impl<T: Real> HmmSpec<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn log_t(&self, from: usize, to: usize) -> T {
        self.log_trans[from * self.states.len() + to]
    }

    pub fn silent_states(&self) -> Vec<usize> {
        (0..self.len()).filter(|&s| self.states[s].emission == Emission::Silent).collect()
    }

    /// Largest deviation of a transition row sum from one.
    pub fn max_row_defect(&self) -> T {
        (0..self.len())
            .map(|s| {
                let sum: T = (0..self.len()).map(|t| self.log_t(s, t).exp()).sum();
                (sum - T::one()).abs()
            })
            .fold(T::zero(), T::max)
    }

    /// Tab-separated dump: one line per state, then one per nonzero transition.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("state\tindex\tadvance\temission\tstart\tend\n");
        for (i, s) in self.states.iter().enumerate() {
            let adv: Vec<String> = s.advance.iter().map(usize::to_string).collect();
            let em = match s.emission {
                Emission::Joint { mask } => format!("joint:{}", bits(mask, self.dims())),
                Emission::Single { leaf } => format!("single:{}", leaf + 1),
                Emission::Silent => "silent".into(),
            };
            let _ = writeln!(
                out,
                "{}\t{i}\t{}\t{em}\t{}\t{}",
                s.label(),
                adv.join(","),
                self.log_start[i].exp(),
                self.log_end[i].exp()
            );
        }
        out.push_str("from\tto\tprobability\n");
        for a in 0..self.len() {
            for b in 0..self.len() {
                let p = self.log_t(a, b).exp();
                if p > T::zero() {
                    let _ = writeln!(out, "{}\t{}\t{}", self.states[a].label(), self.states[b].label(), p);
                }
            }
        }
        out
    }
}

/// Index of the insertion state on `leaf` with lower-leaf memory `memory`.
pub fn insert_state_index(k: usize, leaf: usize, memory: usize) -> usize {
    (1 << k) + (1 << leaf) - 1 + memory
}

fn survival_law<T: Real>(kernels: &[BranchKernel<T>], mask: usize) -> T {
    kernels
        .iter()
        .enumerate()
        .map(|(i, k)| if mask >> i & 1 == 1 { k.alpha } else { T::one() - k.alpha })
        .fold(T::one(), |a, b| a * b)
}

/// Out-transitions once leaves `>= top` are done: insertions on a lower leaf
/// or a fresh root column, plus the weight of stopping.
fn cascade<T: Real>(kernels: &[BranchKernel<T>], top: usize, fates: usize, w: T, row: &mut [T]) -> T {
    let k = kernels.len();
    let mut acc = w;
    for j in (0..top).rev() {
        let surv = fates >> j & 1 == 1;
        row[insert_state_index(k, j, fates & ((1 << j) - 1))] =
            row[insert_state_index(k, j, fates & ((1 << j) - 1))] + acc * kernels[j].start_insert(surv);
        acc = acc * kernels[j].no_insert(surv);
    }
    for m in 0..1usize << k {
        row[m] = row[m] + acc * survival_law(kernels, m);
    }
    acc
}

/// Multiple-HMM of a star tree with `2^(k+1) - 1` states.
pub fn build_star_hmm<T: Real>(lambda: T, tree: &PhyloTree, boundary: Boundary) -> Result<HmmSpec<T>> {
    let law = StarLaw::new(lambda, tree)?;
    let kernels = law.kernels();
    let k = kernels.len();
    let n = (1 << (k + 1)) - 1;
    let mut states = Vec::with_capacity(n);
    for mask in 0..1usize << k {
        states.push(StateDescriptor {
            kind: StateKind::RootFate { mask },
            emission: if mask == 0 { Emission::Silent } else { Emission::Joint { mask } },
            advance: (0..k).map(|i| mask >> i & 1).collect(),
        });
    }
    for leaf in 0..k {
        for memory in 0..1usize << leaf {
            states.push(StateDescriptor {
                kind: StateKind::Insert { leaf, memory },
                emission: Emission::Single { leaf },
                advance: (0..k).map(|i| usize::from(i == leaf)).collect(),
            });
        }
    }
    let mut trans = vec![T::zero(); n * n];
    let mut end = vec![T::zero(); n];
    for (s, st) in states.iter().enumerate() {
        let row = &mut trans[s * n..(s + 1) * n];
        end[s] = match st.kind {
            StateKind::RootFate { mask } => cascade(kernels, k, mask, T::one(), row),
            StateKind::Insert { leaf, memory } => {
                row[s] = kernels[leaf].r;
                cascade(kernels, leaf, memory, kernels[leaf].b, row)
            }
            _ => unreachable!("star chains only hold root-fate and insertion states"),
        };
    }
    let mut start = vec![T::zero(); n];
    let empty = match boundary {
        Boundary::Structures => {
            for (m, p) in start.iter_mut().take(1 << k).enumerate() {
                *p = survival_law(kernels, m);
            }
            T::one()
        }
        Boundary::SurvivorStart => cascade(kernels, k, (1 << k) - 1, T::one(), &mut start),
    };
    Ok(HmmSpec {
        states,
        log_trans: trans.into_iter().map(T::ln).collect(),
        log_start: start.into_iter().map(T::ln).collect(),
        log_end: end.into_iter().map(T::ln).collect(),
        log_empty: empty.ln(),
        times: tree.leaf_times().into_iter().map(T::of).collect(),
    })
}

/// Three-state pair-HMM for two sequences separated by `t_total`.
///
/// The chain starts as if leaving a match state; stopping weights are the
/// probabilities of not opening a second-sequence insertion.
pub fn build_pair_hmm<T: Real>(lambda: T, t_total: T) -> Result<HmmSpec<T>> {
    if t_total <= T::zero() {
        return Err(Error::Domain("pair-HMM needs a positive total branch length".into()));
    }
    let kern = BranchKernel::new(lambda, BranchTime::new(t_total)?)?;
    let one = T::one();
    let (a, b, kap, r) = (kern.alpha, kern.b, kern.kappa, kern.r);
    let dv = [a * b, (one - a) * b, r];
    let h = [(one - kap) * a, (one - kap) * (one - a), kap];
    let trans: Vec<T> = dv.iter().chain(&h).chain(&dv).copied().collect();
    let states = vec![
        StateDescriptor { kind: StateKind::Match, emission: Emission::Joint { mask: 0b11 }, advance: vec![1, 1] },
        StateDescriptor { kind: StateKind::InsertFirst, emission: Emission::Single { leaf: 0 }, advance: vec![1, 0] },
        StateDescriptor { kind: StateKind::InsertSecond, emission: Emission::Single { leaf: 1 }, advance: vec![0, 1] },
    ];
    Ok(HmmSpec {
        states,
        log_trans: trans.into_iter().map(T::ln).collect(),
        log_start: dv.iter().map(|p| p.ln()).collect(),
        log_end: vec![b.ln(), (one - kap).ln(), b.ln()],
        log_empty: b.ln(),
        times: vec![T::zero(), t_total],
    })
}

/// Stationary law of a pair chain, with the insertion probabilities of
/// either sequence.
#[derive(Debug, Clone)]
pub struct Stationary<T> {
    pub distribution: Vec<T>,
    pub p: T,
    pub q: T,
}

pub fn stationary_check<T: Real>(spec: &HmmSpec<T>) -> Result<Stationary<T>> {
    if spec.len() != 3 {
        return Err(Error::InvalidParameter("stationary check expects a 3-state pair chain".into()));
    }
    let m: Vec<T> = spec.log_trans.iter().map(|x| x.exp()).collect();
    let distribution = stationary_distribution(&m, 3)?;
    let p = distribution[1];
    let q = distribution[2];
    if (p - q).abs() > T::of(1e-12) {
        return Err(Error::Domain(format!("insertion and deletion stationary probabilities differ: {p} vs {q}")));
    }
    Ok(Stationary { distribution, p, q })
}

/// Solves `pi P = pi`, `sum pi = 1` by Gaussian elimination.
pub fn stationary_distribution<T: Real>(p: &[T], n: usize) -> Result<Vec<T>> {
    // Rows of (P^T - I) with the last equation replaced by normalisation.
    let mut a = vec![T::zero(); n * (n + 1)];
    for i in 0..n {
        for j in 0..n {
            a[i * (n + 1) + j] = p[j * n + i] - if i == j { T::one() } else { T::zero() };
        }
    }
    for j in 0..n {
        a[(n - 1) * (n + 1) + j] = T::one();
    }
    a[(n - 1) * (n + 1) + n] = T::one();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x * (n + 1) + col].abs().partial_cmp(&a[y * (n + 1) + col].abs()).unwrap())
            .expect("non-empty pivot range");
        if a[piv * (n + 1) + col].abs() < T::of(1e-14) {
            return Err(Error::NonErgodic("transition matrix has no unique stationary law".into()));
        }
        for j in 0..=n {
            a.swap(col * (n + 1) + j, piv * (n + 1) + j);
        }
        for r in 0..n {
            if r != col {
                let f = a[r * (n + 1) + col] / a[col * (n + 1) + col];
                for j in col..=n {
                    let v = a[col * (n + 1) + j];
                    a[r * (n + 1) + j] = a[r * (n + 1) + j] - f * v;
                }
            }
        }
    }
    Ok((0..n).map(|i| a[i * (n + 1) + n] / a[i * (n + 1) + i]).collect())
}

/// Emission law of a chain: F81 matrices for each sequence's branch.
#[derive(Debug, Clone)]
pub struct Emitter<T> {
    nu: Vec<T>,
    mats: Vec<F81<T>>,
}

impl<T: Real> Emitter<T> {
    pub fn new(subst: &SubstParams<T>, times: &[T]) -> Result<Self> {
        let mats = times.iter().map(|&t| Ok(subst.matrix(BranchTime::new(t)?))).collect::<Result<Vec<_>>>()?;
        Ok(Self { nu: subst.nu().to_vec(), mats })
    }

    /// Probability of the characters at `pos` (1-based) for the given emission.
    pub fn emit(&self, e: Emission, seqs: &[Vec<usize>], pos: &[usize]) -> T {
        match e {
            Emission::Silent => T::one(),
            Emission::Single { leaf } => self.nu[seqs[leaf][pos[leaf] - 1]],
            Emission::Joint { mask } => (0..self.nu.len())
                .map(|root| {
                    (0..self.mats.len())
                        .filter(|i| mask >> i & 1 == 1)
                        .fold(self.nu[root], |acc, i| acc * self.mats[i].p(root, seqs[i][pos[i] - 1]))
                })
                .sum(),
        }
    }
}

/// Log of the total probability of `seqs` under `spec`, summing over every
/// state path that ends with all sequences consumed.
///
/// The single silent state, if any, is eliminated through its self-loop.
pub fn forward_hmm<T: Real>(spec: &HmmSpec<T>, subst: &SubstParams<T>, seqs: &[Vec<usize>]) -> Result<T> {
    let k = spec.dims();
    if seqs.len() != k {
        return Err(Error::InvalidParameter(format!("{} sequences for a {k}-sequence chain", seqs.len())));
    }
    let emitter = Emitter::new(subst, &spec.times)?;
    let silent = spec.silent_states();
    if silent.len() > 1 {
        return Err(Error::InvalidParameter("at most one silent state is supported".into()));
    }
    let dims: Vec<usize> = seqs.iter().map(|s| s.len() + 1).collect();
    let cells: usize = dims.iter().product();
    let ns = spec.len();
    let neg = T::neg_infinity();
    let mut f = vec![neg; cells * ns];
    let index = |z: &[usize]| z.iter().zip(&dims).fold(0, |acc, (&x, &d)| acc * d + x);
    let mut z = vec![0usize; k];
    let mut terms = Vec::with_capacity(ns + 1);
    for c in 0..cells {
        let mut rem = c;
        for i in (0..k).rev() {
            z[i] = rem % dims[i];
            rem /= dims[i];
        }
        let origin = z.iter().all(|&x| x == 0);
        for s in 0..ns {
            let st = &spec.states[s];
            if st.emission == Emission::Silent {
                continue;
            }
            if z.iter().zip(&st.advance).any(|(&x, &a)| x < a) {
                continue;
            }
            let prev: Vec<usize> = z.iter().zip(&st.advance).map(|(&x, &a)| x - a).collect();
            let pi = index(&prev);
            terms.clear();
            if prev.iter().all(|&x| x == 0) {
                terms.push(spec.log_start[s]);
            }
            for sp in 0..ns {
                terms.push(f[pi * ns + sp] + spec.log_t(sp, s));
            }
            f[c * ns + s] = crate::likelihood::log_sum_exp(&terms) + emitter.emit(st.emission, seqs, &z).ln();
        }
        if let Some(&q) = silent.first() {
            terms.clear();
            if origin {
                terms.push(spec.log_start[q]);
            }
            for sp in 0..ns {
                if sp != q {
                    terms.push(f[c * ns + sp] + spec.log_t(sp, q));
                }
            }
            let stay = spec.log_t(q, q).exp();
            f[c * ns + q] = crate::likelihood::log_sum_exp(&terms) - (T::one() - stay).ln();
        }
    }
    let last = cells - 1;
    terms.clear();
    if dims.iter().all(|&d| d == 1) {
        terms.push(spec.log_empty);
    }
    for s in 0..ns {
        terms.push(f[last * ns + s] + spec.log_end[s]);
    }
    Ok(crate::likelihood::log_sum_exp(&terms))
}
