//! Felsenstein81 substitution kernel and the joint emission laws built on it.

use crate::error::{Error, Result};
use crate::phylo::PhyloTree;
use crate::real::Real;
use crate::tkf91::BranchTime;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        Self { symbols: vec!['A', 'C', 'G', 'T'] }
    }
}

impl Alphabet {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        if symbols.is_empty() {
            return Err(Error::InvalidParameter("empty alphabet".into()));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::InvalidParameter(format!("duplicate symbol {c:?}")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Dense index of `c`; lowercase input matches uppercase symbols.
    pub fn index(&self, c: char) -> Result<usize> {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .or_else(|| self.symbols.iter().position(|&s| s == c.to_ascii_uppercase()))
            .ok_or(Error::UnknownSymbol(c))
    }

    pub fn symbol(&self, i: usize) -> char {
        self.symbols[i]
    }

    pub fn encode(&self, s: &str) -> Result<Vec<usize>> {
        s.chars().map(|c| self.index(c)).collect()
    }

    pub fn decode(&self, xs: &[usize]) -> String {
        xs.iter().map(|&i| self.symbols[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstParams<T> {
    alpha: T,
    nu: Vec<T>,
}

impl<T: Real> SubstParams<T> {
    pub fn new(alpha: T, nu: Vec<T>) -> Result<Self> {
        if !alpha.is_finite() || alpha < T::zero() {
            return Err(Error::InvalidParameter(format!("substitution rate {alpha} must be > 0")));
        }
        if alpha == T::zero() {
            return Err(Error::Boundary("alpha = 0".into()));
        }
        if nu.is_empty() || nu.iter().any(|&p| !(p >= T::zero()) || !p.is_finite()) {
            return Err(Error::InvalidParameter("nu must be a non-empty vector of probabilities".into()));
        }
        let total: T = nu.iter().copied().sum();
        if (total - T::one()).abs() > T::of(1e-12).max(T::epsilon() * T::of(8.0)) {
            return Err(Error::InvalidParameter(format!("nu sums to {total}, not 1")));
        }
        Ok(Self { alpha, nu })
    }

    pub fn uniform(alpha: T, size: usize) -> Result<Self> {
        let p = T::one() / T::of_usize(size);
        Self::new(alpha, vec![p; size])
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn nu(&self) -> &[T] {
        &self.nu
    }

    pub fn alphabet_size(&self) -> usize {
        self.nu.len()
    }

    pub fn matrix(&self, t: BranchTime<T>) -> F81<T> {
        F81::new(self, t)
    }
}

/// Transition matrix of the F81 model for one branch.
#[derive(Debug, Clone)]
pub struct F81<T> {
    keep: T,
    p: Vec<T>,
    size: usize,
}

impl<T: Real> F81<T> {
    pub fn new(params: &SubstParams<T>, t: BranchTime<T>) -> Self {
        let keep = (-params.alpha * t.get()).exp();
        let size = params.alphabet_size();
        let mut p = vec![T::zero(); size * size];
        for x in 0..size {
            for y in 0..size {
                let mut v = (T::one() - keep) * params.nu[y];
                if x == y {
                    v = v + keep;
                }
                p[x * size + y] = v;
            }
        }
        Self { keep, p, size }
    }

    #[inline]
    pub fn p(&self, x: usize, y: usize) -> T {
        self.p[x * self.size + y]
    }

    /// Probability `exp(-alpha t)` that no substitution event occurred.
    pub fn keep(&self) -> T {
        self.keep
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

pub fn f81_transition<T: Real>(params: &SubstParams<T>, t: BranchTime<T>, x: usize, y: usize) -> Result<T> {
    let n = params.alphabet_size();
    if x >= n || y >= n {
        return Err(Error::InvalidParameter(format!("symbol index out of range for alphabet of {n}")));
    }
    let keep = (-params.alpha * t.get()).exp();
    let mut v = (T::one() - keep) * params.nu[y];
    if x == y {
        v = v + keep;
    }
    Ok(v)
}

/// Law of an inserted character.
pub fn emission_f<T: Real>(params: &SubstParams<T>) -> Vec<T> {
    params.nu.clone()
}

/// Joint law of the descendants of one root character on the star leaves `j`.
pub fn emission_h_star<T: Real>(
    params: &SubstParams<T>,
    times: &[BranchTime<T>],
    j: &[usize],
    x: &[usize],
) -> Result<T> {
    if j.is_empty() {
        return Err(Error::InvalidParameter("emission over an empty leaf set".into()));
    }
    if j.len() != x.len() {
        return Err(Error::InvalidParameter("one symbol per leaf in J is required".into()));
    }
    let n = params.alphabet_size();
    if let Some(&bad) = x.iter().find(|&&s| s >= n) {
        return Err(Error::InvalidParameter(format!("symbol index {bad} out of range")));
    }
    let mats = j
        .iter()
        .map(|&i| {
            times
                .get(i)
                .map(|&t| params.matrix(t))
                .ok_or_else(|| Error::InvalidParameter(format!("leaf {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = T::zero();
    for root in 0..n {
        let mut p = params.nu[root];
        for (m, &s) in mats.iter().zip(x) {
            p = p * m.p(root, s);
        }
        total = total + p;
    }
    Ok(total)
}

/// Joint law of the leaf descendants of one character born at the topmost
/// surviving node, obtained by pruning along the surviving lineages.
///
/// `survival` has one flag per node in breadth-first order, `leaf_symbols`
/// one entry per leaf in leaf order; surviving leaves must carry a symbol.
pub fn emission_h_tree<T: Real>(
    params: &SubstParams<T>,
    tree: &PhyloTree,
    survival: &[bool],
    leaf_symbols: &[Option<usize>],
) -> Result<T> {
    let top = surviving_top(tree, survival)?;
    if leaf_symbols.len() != tree.leaf_count() {
        return Err(Error::Column("one symbol slot per leaf is required".into()));
    }
    let partial = prune(params, tree, survival, top, leaf_symbols)?;
    Ok(partial.iter().zip(params.nu()).map(|(&l, &p)| l * p).sum())
}

fn surviving_top(tree: &PhyloTree, survival: &[bool]) -> Result<usize> {
    if survival.len() != tree.node_count() {
        return Err(Error::Column("one survival flag per node is required".into()));
    }
    let mut top = None;
    for v in 0..tree.node_count() {
        if !survival[v] {
            continue;
        }
        let parent_alive = tree.parent(v).is_some_and(|p| survival[p]);
        if !parent_alive {
            if top.is_some() {
                return Err(Error::Column("surviving nodes do not form a single lineage".into()));
            }
            top = Some(v);
        }
    }
    top.ok_or_else(|| Error::Column("no surviving node".into()))
}

fn prune<T: Real>(
    params: &SubstParams<T>,
    tree: &PhyloTree,
    survival: &[bool],
    v: usize,
    leaf_symbols: &[Option<usize>],
) -> Result<Vec<T>> {
    let n = params.alphabet_size();
    if let Some(pos) = tree.leaf_position(v) {
        let s = leaf_symbols[pos].ok_or_else(|| Error::Column(format!("surviving leaf {pos} has no symbol")))?;
        if s >= n {
            return Err(Error::InvalidParameter(format!("symbol index {s} out of range")));
        }
        let mut l = vec![T::zero(); n];
        l[s] = T::one();
        return Ok(l);
    }
    let mut l = vec![T::one(); n];
    for &u in tree.children(v) {
        if !survival[u] {
            continue;
        }
        let child = prune(params, tree, survival, u, leaf_symbols)?;
        let m = params.matrix(BranchTime::new(T::of(tree.branch_length(u)))?);
        for (x, lx) in l.iter_mut().enumerate() {
            let s: T = (0..n).map(|y| m.p(x, y) * child[y]).sum();
            *lx = *lx * s;
        }
    }
    Ok(l)
}
