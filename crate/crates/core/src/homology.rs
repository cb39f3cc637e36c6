//! Homology structures: i.i.d. columns on star and binary trees, their law
//! under TKF91, the induced walk of observed lengths, and bare alignments.

use std::fmt;

use crate::error::{Error, Result};
use crate::phylo::{validate_regular_binary, PhyloTree};
use crate::real::Real;
use crate::tkf91::{BranchKernel, BranchTime};

/// Fate of one root character on a star tree: survival flag and number of
/// insertions to its right, per leaf.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StarColumn {
    pub delta: Vec<bool>,
    pub ins: Vec<usize>,
}

impl StarColumn {
    pub fn new(delta: Vec<bool>, ins: Vec<usize>) -> Result<Self> {
        if delta.len() != ins.len() {
            return Err(Error::Column("delta and ins lengths differ".into()));
        }
        Ok(Self { delta, ins })
    }

    pub fn null(k: usize) -> Self {
        Self { delta: vec![false; k], ins: vec![0; k] }
    }

    pub fn k(&self) -> usize {
        self.delta.len()
    }

    pub fn is_null(&self) -> bool {
        self.delta.iter().all(|d| !d) && self.ins.iter().all(|&a| a == 0)
    }

    /// Survival mask with bit `i` set when leaf `i` keeps the root character.
    pub fn mask(&self) -> usize {
        self.delta.iter().enumerate().fold(0, |m, (i, &d)| m | (usize::from(d) << i))
    }
}

/// One `(flag, count)` row per tree node, breadth-first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Block {
    pub flags: Vec<bool>,
    pub ins: Vec<usize>,
}

impl Block {
    pub fn empty(nodes: usize) -> Self {
        Self { flags: vec![false; nodes], ins: vec![0; nodes] }
    }

    fn norm(&self, v: usize) -> usize {
        usize::from(self.flags[v]) + self.ins[v]
    }
}

/// Fate of a root character and of everything inserted below it on a binary
/// tree, as a list of node-by-2 blocks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TreeColumn {
    pub blocks: Vec<Block>,
}

/// Shared behaviour of star and tree columns.
pub trait Column: Clone {
    /// Observed characters added to each leaf.
    fn increments(&self, tree: &PhyloTree) -> Vec<usize>;
}

impl Column for StarColumn {
    fn increments(&self, _tree: &PhyloTree) -> Vec<usize> {
        self.delta.iter().zip(&self.ins).map(|(&d, &a)| usize::from(d) + a).collect()
    }
}

impl Column for TreeColumn {
    fn increments(&self, tree: &PhyloTree) -> Vec<usize> {
        tree.leaves().iter().map(|&v| self.blocks.iter().map(|b| b.norm(v)).sum()).collect()
    }
}

impl TreeColumn {
    pub fn validate(&self, tree: &PhyloTree) -> Result<()> {
        let n = tree.node_count();
        let first = self.blocks.first().ok_or_else(|| Error::Column("column without blocks".into()))?;
        for (p, b) in self.blocks.iter().enumerate() {
            if b.flags.len() != n || b.ins.len() != n {
                return Err(Error::Column(format!("block {p} does not have {n} rows")));
            }
            if b.ins[0] != 0 || b.flags[0] != (p == 0) {
                return Err(Error::Column(format!("root row of block {p} must be {}", if p == 0 { "(1,0)" } else { "(0,0)" })));
            }
        }
        if !first.flags[0] {
            return Err(Error::Column("root character missing from the first block".into()));
        }
        for v in 1..n {
            let a = tree.parent(v).expect("non-root node has a parent");
            let leaf = tree.is_leaf(v);
            let mut parent_seen = false;
            for (p, b) in self.blocks.iter().enumerate() {
                if !leaf && b.ins[v] != 0 {
                    return Err(Error::Column(format!("internal node {v} has an insertion count in block {p}")));
                }
                if b.flags[a] {
                    parent_seen = true;
                    continue;
                }
                if b.norm(v) == 0 {
                    continue;
                }
                if leaf {
                    return Err(Error::Column(format!("leaf row {v} is set in block {p} while its parent is inactive")));
                }
                if !parent_seen {
                    return Err(Error::Column(format!("node {v} is born in block {p} before any parent character")));
                }
            }
        }
        Ok(())
    }

    fn is_null(&self, tree: &PhyloTree) -> bool {
        self.increments(tree).iter().all(|&x| x == 0)
    }
}

/// Ordered list of columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HomologyStructure<C> {
    pub columns: Vec<C>,
}

impl<C: Column> HomologyStructure<C> {
    pub fn new(columns: Vec<C>) -> Self {
        Self { columns }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn walk(&self, tree: &PhyloTree) -> Walk {
        let k = tree.leaf_count();
        let mut z = vec![vec![0; k]];
        for c in &self.columns {
            let mut next = z.last().expect("walk starts at the origin").clone();
            for (zi, d) in next.iter_mut().zip(c.increments(tree)) {
                *zi += d;
            }
            z.push(next);
        }
        Walk { z }
    }
}

/// Cumulative observed lengths `Z_0 = 0, Z_1, ..., Z_n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Walk {
    pub z: Vec<Vec<usize>>,
}

impl Walk {
    pub fn end(&self) -> &[usize] {
        self.z.last().expect("walk is never empty")
    }
}

/// Column law on a star tree.
#[derive(Debug, Clone)]
pub struct StarLaw<T> {
    kernels: Vec<BranchKernel<T>>,
}

impl<T: Real> StarLaw<T> {
    pub fn new(lambda: T, tree: &PhyloTree) -> Result<Self> {
        if !tree.is_star() {
            return Err(Error::UnsupportedTree { expected: "star" });
        }
        let kernels = tree
            .leaf_times()
            .into_iter()
            .map(|t| BranchKernel::new(lambda, BranchTime::new(T::of(t))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kernels })
    }

    pub fn kernels(&self) -> &[BranchKernel<T>] {
        &self.kernels
    }

    pub fn ln_pi(&self, col: &StarColumn) -> Result<T> {
        if col.k() != self.kernels.len() {
            return Err(Error::Column(format!("column has {} rows for {} leaves", col.k(), self.kernels.len())));
        }
        Ok(self
            .kernels
            .iter()
            .zip(col.delta.iter().zip(&col.ins))
            .map(|(k, (&d, &a))| k.ln_fate(d, a as u64))
            .fold(T::zero(), |acc, x| acc + x))
    }

    pub fn pi(&self, col: &StarColumn) -> Result<T> {
        self.ln_pi(col).map(T::exp)
    }

    /// Probability of the null column.
    pub fn null_probability(&self) -> T {
        self.kernels.iter().fold(T::one(), |acc, k| acc * k.r)
    }
}

pub fn pi_star<T: Real>(lambda: T, tree: &PhyloTree, col: &StarColumn) -> Result<T> {
    StarLaw::new(lambda, tree)?.pi(col)
}

pub fn ln_pi_star<T: Real>(lambda: T, tree: &PhyloTree, col: &StarColumn) -> Result<T> {
    StarLaw::new(lambda, tree)?.ln_pi(col)
}

/// Column law on a regular binary tree.
#[derive(Debug, Clone)]
pub struct TreeLaw<T> {
    tree: PhyloTree,
    kernels: Vec<BranchKernel<T>>,
}

impl<T: Real> TreeLaw<T> {
    pub fn new(lambda: T, tree: &PhyloTree) -> Result<Self> {
        validate_regular_binary(tree)?;
        let kernels = (0..tree.node_count())
            .map(|v| BranchKernel::new(lambda, BranchTime::new(T::of(tree.branch_length(v)))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tree: tree.clone(), kernels })
    }

    pub fn tree(&self) -> &PhyloTree {
        &self.tree
    }

    /// Kernel of the branch above node `v` (the root entry is unused).
    pub fn kernel(&self, v: usize) -> &BranchKernel<T> {
        &self.kernels[v]
    }

    pub fn ln_pi(&self, col: &TreeColumn) -> Result<T> {
        col.validate(&self.tree)?;
        let tree = &self.tree;
        let mut ln = T::zero();
        for v in 1..tree.node_count() {
            let a = tree.parent(v).expect("non-root node has a parent");
            let active: Vec<usize> = (0..col.blocks.len()).filter(|&p| col.blocks[p].flags[a]).collect();
            for (j, &p) in active.iter().enumerate() {
                let end = active.get(j + 1).copied().unwrap_or(col.blocks.len());
                let total: usize = (p..end).map(|r| col.blocks[r].norm(v)).sum();
                ln = ln + self.kernels[v].ln_fate_total(col.blocks[p].flags[v], total as u64);
            }
        }
        Ok(ln)
    }

    pub fn pi(&self, col: &TreeColumn) -> Result<T> {
        self.ln_pi(col).map(T::exp)
    }

    /// Probability that a root character leaves no observed descendant.
    pub fn null_probability(&self) -> T {
        self.extinction(0)
    }

    fn extinction(&self, v: usize) -> T {
        if self.tree.is_leaf(v) {
            return T::zero();
        }
        self.tree
            .children(v)
            .iter()
            .map(|&u| self.kernels[u].descendant_pgf(self.extinction(u)))
            .fold(T::one(), |a, b| a * b)
    }
}

pub fn pi_tree<T: Real>(lambda: T, tree: &PhyloTree, col: &TreeColumn) -> Result<T> {
    TreeLaw::new(lambda, tree)?.pi(col)
}

pub fn ln_pi_tree<T: Real>(lambda: T, tree: &PhyloTree, col: &TreeColumn) -> Result<T> {
    TreeLaw::new(lambda, tree)?.ln_pi(col)
}

/// Gap pattern of an alignment: `true` where a row carries a character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BareAlignment {
    pub rows: Vec<Vec<bool>>,
}

impl BareAlignment {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn push_column(&mut self, present: impl Fn(usize) -> bool) {
        for (i, row) in self.rows.iter_mut().enumerate() {
            row.push(present(i));
        }
    }
}

impl fmt::Display for BareAlignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.rows {
            let s: String = row.iter().map(|&b| if b { 'B' } else { '-' }).collect();
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

/// Lays out a star structure: the homologous column, then each leaf's
/// insertions in ascending leaf order.
pub fn star_bare_alignment(k: usize, s: &HomologyStructure<StarColumn>) -> BareAlignment {
    let mut out = BareAlignment { rows: vec![Vec::new(); k] };
    for c in &s.columns {
        if c.delta.iter().any(|&d| d) {
            out.push_column(|i| c.delta[i]);
        }
        for i in 0..k {
            for _ in 0..c.ins[i] {
                out.push_column(|r| r == i);
            }
        }
    }
    out
}

/// Tree version: within each block, one column per emitting lineage followed
/// by leaf insertions in ascending leaf order.
pub fn tree_bare_alignment(tree: &PhyloTree, s: &HomologyStructure<TreeColumn>) -> BareAlignment {
    let k = tree.leaf_count();
    let mut out = BareAlignment { rows: vec![Vec::new(); k] };
    for c in &s.columns {
        for b in &c.blocks {
            let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
            for (i, &v) in tree.leaves().iter().enumerate() {
                if !b.flags[v] {
                    continue;
                }
                let top = lineage_top(tree, b, v);
                match groups.iter_mut().find(|(t, _)| *t == top) {
                    Some((_, members)) => members.push(i),
                    None => groups.push((top, vec![i])),
                }
            }
            groups.sort_by_key(|(t, _)| *t);
            for (_, members) in &groups {
                out.push_column(|i| members.contains(&i));
            }
            for (i, &v) in tree.leaves().iter().enumerate() {
                for _ in 0..b.ins[v] {
                    out.push_column(|r| r == i);
                }
            }
        }
    }
    out
}

pub(crate) fn lineage_top(tree: &PhyloTree, b: &Block, v: usize) -> usize {
    let mut u = v;
    while let Some(p) = tree.parent(u) {
        if !b.flags[p] {
            break;
        }
        u = p;
    }
    u
}

/// Structures reaching a target together with a bound on the probability
/// mass left out by the caps.
#[derive(Debug, Clone)]
pub struct Enumeration<C> {
    pub structures: Vec<HomologyStructure<C>>,
    pub omitted_bound: f64,
}

impl<C> Enumeration<C> {
    pub fn iter(&self) -> impl Iterator<Item = &HomologyStructure<C>> {
        self.structures.iter()
    }
}

/// Every star column whose increments fit inside `budget`, with insertion counts at most `max_ins`.
pub fn star_columns_within(budget: &[usize], max_ins: usize) -> Vec<StarColumn> {
    let k = budget.len();
    let mut out = Vec::new();
    let mut delta = vec![false; k];
    let mut ins = vec![0; k];
    fn rec(i: usize, budget: &[usize], max_ins: usize, delta: &mut Vec<bool>, ins: &mut Vec<usize>, out: &mut Vec<StarColumn>) {
        if i == budget.len() {
            out.push(StarColumn { delta: delta.clone(), ins: ins.clone() });
            return;
        }
        for d in [false, true] {
            let used = usize::from(d);
            if used > budget[i] {
                continue;
            }
            for a in 0..=max_ins.min(budget[i] - used) {
                delta[i] = d;
                ins[i] = a;
                rec(i + 1, budget, max_ins, delta, ins, out);
            }
        }
    }
    rec(0, budget, max_ins, &mut delta, &mut ins, &mut out);
    out
}

/// Every canonical tree column whose leaf increments fit inside `budget`,
/// with each branch's insertion count at most `max_ins`.
///
/// Canonical layout: the root block first, then one block per character
/// inserted at an internal node, in depth-first order of the event tree.
pub fn tree_columns_within(tree: &PhyloTree, budget: &[usize], max_ins: usize) -> Vec<TreeColumn> {
    #[derive(Clone, Copy)]
    enum Task {
        Child { v: usize, block: usize, idx: usize },
        Birth { u: usize },
    }
    struct State {
        col: TreeColumn,
        left: Vec<usize>,
        tasks: Vec<Task>,
    }
    fn rec(tree: &PhyloTree, max_ins: usize, mut st: State, out: &mut Vec<TreeColumn>) {
        let Some(task) = st.tasks.pop() else {
            out.push(st.col);
            return;
        };
        match task {
            Task::Birth { u } => {
                let mut b = Block::empty(tree.node_count());
                b.flags[u] = true;
                st.col.blocks.push(b);
                let block = st.col.blocks.len() - 1;
                st.tasks.push(Task::Child { v: u, block, idx: 0 });
                rec(tree, max_ins, st, out);
            }
            Task::Child { v, block, idx } => {
                let children = tree.children(v);
                if idx >= children.len() {
                    rec(tree, max_ins, st, out);
                    return;
                }
                let u = children[idx];
                for flag in [false, true] {
                    let pos = tree.leaf_position(u);
                    let room = pos.map_or(usize::MAX, |i| st.left[i]);
                    if usize::from(flag) > room {
                        continue;
                    }
                    let cap = max_ins.min(room - usize::from(flag));
                    for a in 0..=cap {
                        let mut next = State { col: st.col.clone(), left: st.left.clone(), tasks: st.tasks.clone() };
                        next.col.blocks[block].flags[u] = flag;
                        next.tasks.push(Task::Child { v, block, idx: idx + 1 });
                        match pos {
                            Some(i) => {
                                next.col.blocks[block].ins[u] = a;
                                next.left[i] -= usize::from(flag) + a;
                            }
                            None => {
                                for _ in 0..a {
                                    next.tasks.push(Task::Birth { u });
                                }
                                if flag {
                                    next.tasks.push(Task::Child { v: u, block, idx: 0 });
                                }
                            }
                        }
                        rec(tree, max_ins, next, out);
                    }
                }
            }
        }
    }
    let mut root = Block::empty(tree.node_count());
    root.flags[0] = true;
    let st = State {
        col: TreeColumn { blocks: vec![root] },
        left: budget.to_vec(),
        tasks: vec![Task::Child { v: 0, block: 0, idx: 0 }],
    };
    let mut out = Vec::new();
    rec(tree, max_ins, st, &mut out);
    out
}

/// All star structures with at most `max_cols` columns whose walk ends at `target`.
pub fn enumerate_star_structures<T: Real>(
    law: &StarLaw<T>,
    target: &[usize],
    max_cols: usize,
    max_ins: usize,
) -> Result<Enumeration<StarColumn>> {
    let k = law.kernels().len();
    if target.len() != k {
        return Err(Error::Column(format!("target has {} entries for {k} leaves", target.len())));
    }
    let gen = |budget: &[usize]| star_columns_within(budget, max_ins);
    let inc = |c: &StarColumn| c.delta.iter().zip(&c.ins).map(|(&d, &a)| usize::from(d) + a).collect();
    let structures = enumerate_with(target, max_cols, &gen, &inc);
    let rho: f64 = law
        .kernels()
        .iter()
        .zip(target)
        .filter(|(_, &n)| n > max_ins)
        .map(|(k, _)| k.b.to_f64_lossy() * k.r.to_f64_lossy().powi(max_ins as i32))
        .sum();
    let n_total: usize = target.iter().sum();
    let bound = omitted_bound(law.null_probability().to_f64_lossy(), n_total, max_cols, rho);
    Ok(Enumeration { structures, omitted_bound: bound })
}

/// Tree counterpart of [`enumerate_star_structures`], over canonical columns.
pub fn enumerate_tree_structures<T: Real>(
    law: &TreeLaw<T>,
    target: &[usize],
    max_cols: usize,
    max_ins: usize,
) -> Result<Enumeration<TreeColumn>> {
    let tree = law.tree();
    if target.len() != tree.leaf_count() {
        return Err(Error::Column("target length differs from the leaf count".into()));
    }
    let gen = |budget: &[usize]| tree_columns_within(tree, budget, max_ins);
    let inc = |c: &TreeColumn| c.increments(tree);
    let structures = enumerate_with(target, max_cols, &gen, &inc);
    let rho = tree_cap_excess(law, max_ins);
    let n_total: usize = target.iter().sum();
    let bound = omitted_bound(law.null_probability().to_f64_lossy(), n_total, max_cols, rho);
    Ok(Enumeration { structures, omitted_bound: bound })
}

/// Bound on the expected number of (character, branch) pairs in one column
/// whose insertion count exceeds `max_ins`. Every node carries one character
/// in expectation, and a branch exceeds the cap with probability at most
/// `b r^max_ins`.
pub fn tree_cap_excess<T: Real>(law: &TreeLaw<T>, max_ins: usize) -> f64 {
    (1..law.tree().node_count())
        .map(|v| {
            let k = law.kernel(v);
            k.b.to_f64_lossy() * k.r.to_f64_lossy().powi(max_ins as i32)
        })
        .sum()
}

fn enumerate_with<C: Column>(
    target: &[usize],
    max_cols: usize,
    columns_within: &dyn Fn(&[usize]) -> Vec<C>,
    inc: &dyn Fn(&C) -> Vec<usize>,
) -> Vec<HomologyStructure<C>> {
    fn rec<C: Column>(
        left: &[usize],
        cols_left: usize,
        prefix: &mut Vec<C>,
        columns_within: &dyn Fn(&[usize]) -> Vec<C>,
        inc: &dyn Fn(&C) -> Vec<usize>,
        out: &mut Vec<HomologyStructure<C>>,
    ) {
        if left.iter().all(|&x| x == 0) {
            out.push(HomologyStructure { columns: prefix.clone() });
        }
        if cols_left == 0 {
            return;
        }
        for c in columns_within(left) {
            let d = inc(&c);
            let next: Vec<usize> = left.iter().zip(&d).map(|(&l, &x)| l - x).collect();
            prefix.push(c);
            rec(&next, cols_left - 1, prefix, columns_within, inc, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(target, max_cols, &mut Vec::new(), columns_within, inc, &mut out);
    out
}

/// Omitted mass of a capped enumeration: structures longer than `max_cols`
/// need at least `len - n_total` null columns, and each enumerated length can
/// lose at most `len * rho` to the insertion cap.
fn omitted_bound(pi0: f64, n_total: usize, max_cols: usize, rho: f64) -> f64 {
    let mut long = 0.0;
    let mut len = max_cols + 1;
    loop {
        let term = binomial(len, n_total) * pi0.powi((len - n_total.min(len)) as i32);
        long += term;
        if term < 1e-300 || (len > n_total + 10 && term < long * 1e-17) {
            break;
        }
        len += 1;
        if len > max_cols + 100_000 {
            break;
        }
    }
    let capped: f64 = (1..=max_cols).map(|n| n as f64 * rho).sum();
    long + capped
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Result of checking that a column law moves every leaf by one position on average.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub satisfied: bool,
}

/// Exact expected displacement for the star law (one per leaf).
pub fn star_expected_displacement<T: Real>(law: &StarLaw<T>) -> Vec<T> {
    law.kernels().iter().map(|k| k.alpha / k.b + (k.b - k.alpha) / k.b).collect()
}

/// Exact expected displacement for the tree law: the product of per-branch
/// mean descendant counts along each root-to-leaf path.
pub fn tree_expected_displacement<T: Real>(law: &TreeLaw<T>) -> Vec<T> {
    let tree = law.tree();
    tree.leaves()
        .iter()
        .map(|&v| {
            let mut m = T::one();
            let mut u = v;
            while let Some(p) = tree.parent(u) {
                let k = law.kernel(u);
                m = m * (k.alpha / k.b + (k.b - k.alpha) / k.b);
                u = p;
            }
            m
        })
        .collect()
}

/// Monte Carlo check of the unit-displacement property from sampled columns.
///
/// `sample` returns the per-leaf increments of one column. The check fails
/// when any leaf mean is further than `z` standard errors from 1 or when a
/// leaf never moves.
pub fn assumption_check<F: FnMut() -> Vec<usize>>(draws: usize, mut sample: F, z: f64) -> AssumptionReport {
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    for _ in 0..draws {
        let x = sample();
        if sum.is_empty() {
            sum = vec![0.0; x.len()];
            sq = vec![0.0; x.len()];
        }
        for (i, &v) in x.iter().enumerate() {
            sum[i] += v as f64;
            sq[i] += (v * v) as f64;
        }
    }
    let n = draws.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / n - m * m).max(0.0) * n / (n - 1.0).max(1.0) / n).sqrt())
        .collect();
    let satisfied = mean.iter().zip(&se).all(|(m, s)| *m > 0.0 && (m - 1.0).abs() <= z * s.max(1e-12));
    AssumptionReport { mean, se, satisfied }
}

/// Plain-text form: one row per leaf (star) or per node (tree), one
/// tab-separated field per root position; tree fields list blocks as
/// `flag count` pairs separated by `|`.
pub fn write_star_structure(tree: &PhyloTree, s: &HomologyStructure<StarColumn>) -> String {
    let mut out = String::from("#homology star\n");
    for i in 0..tree.leaf_count() {
        out.push_str(&tree.leaf_name(i));
        for c in &s.columns {
            out.push_str(&format!("\t{} {}", u8::from(c.delta[i]), c.ins[i]));
        }
        out.push('\n');
    }
    out
}

pub fn write_tree_structure(tree: &PhyloTree, s: &HomologyStructure<TreeColumn>) -> String {
    let mut out = String::from("#homology tree\n");
    for v in 0..tree.node_count() {
        out.push_str(&tree.node_label(v));
        for c in &s.columns {
            out.push('\t');
            let cells: Vec<String> = c.blocks.iter().map(|b| format!("{} {}", u8::from(b.flags[v]), b.ins[v])).collect();
            out.push_str(&cells.join("|"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedStructure {
    Star(HomologyStructure<StarColumn>),
    Tree(HomologyStructure<TreeColumn>),
}

pub fn parse_structure(text: &str, tree: &PhyloTree) -> Result<ParsedStructure> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::StructureFormat { line: 1, msg: "empty input".into() })?;
    let tree_mode = match header.trim() {
        "#homology star" => false,
        "#homology tree" => true,
        other => return Err(Error::StructureFormat { line: 1, msg: format!("unknown header {other:?}") }),
    };
    let rows: Vec<(usize, Vec<Vec<(bool, usize)>>)> = lines
        .map(|(no, line)| {
            let mut fields = line.split('\t');
            fields.next();
            let cols = fields
                .map(|f| f.split('|').map(|cell| parse_cell(cell, no + 1)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            Ok((no + 1, cols))
        })
        .collect::<Result<Vec<_>>>()?;
    let expected = if tree_mode { tree.node_count() } else { tree.leaf_count() };
    if rows.len() != expected {
        return Err(Error::StructureFormat { line: 1, msg: format!("expected {expected} rows, found {}", rows.len()) });
    }
    let width = rows[0].1.len();
    if let Some((line, _)) = rows.iter().find(|(_, r)| r.len() != width) {
        return Err(Error::StructureFormat { line: *line, msg: "ragged row".into() });
    }
    if !tree_mode {
        let columns = (0..width)
            .map(|c| {
                let mut delta = Vec::new();
                let mut ins = Vec::new();
                for (line, row) in &rows {
                    let [(d, a)] = row[c][..] else {
                        return Err(Error::StructureFormat { line: *line, msg: "star cells hold one block".into() });
                    };
                    delta.push(d);
                    ins.push(a);
                }
                Ok(StarColumn { delta, ins })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(ParsedStructure::Star(HomologyStructure { columns }));
    }
    let mut columns = Vec::with_capacity(width);
    for c in 0..width {
        let nb = rows[0].1[c].len();
        let mut blocks = vec![Block::empty(tree.node_count()); nb];
        for (v, (line, row)) in rows.iter().enumerate() {
            if row[c].len() != nb {
                return Err(Error::StructureFormat { line: *line, msg: format!("column {} has a different block count", c + 1) });
            }
            for (p, &(d, a)) in row[c].iter().enumerate() {
                blocks[p].flags[v] = d;
                blocks[p].ins[v] = a;
            }
        }
        let col = TreeColumn { blocks };
        col.validate(tree)?;
        columns.push(col);
    }
    Ok(ParsedStructure::Tree(HomologyStructure { columns }))
}

fn parse_cell(cell: &str, line: usize) -> Result<(bool, usize)> {
    let mut it = cell.split_whitespace();
    let err = || Error::StructureFormat { line, msg: format!("bad cell {cell:?}") };
    let d = match it.next().ok_or_else(err)? {
        "0" => false,
        "1" => true,
        _ => return Err(err()),
    };
    let a = it.next().ok_or_else(err)?.parse().map_err(|_| err())?;
    if it.next().is_some() {
        return Err(err());
    }
    Ok((d, a))
}

impl<C: Column> HomologyStructure<C> {
    /// Checks the walk against realised sequence lengths.
    pub fn matches_lengths(&self, tree: &PhyloTree, lengths: &[usize]) -> bool {
        self.walk(tree).end() == lengths
    }
}

impl HomologyStructure<TreeColumn> {
    pub fn validate(&self, tree: &PhyloTree) -> Result<()> {
        self.columns.iter().try_for_each(|c| c.validate(tree))
    }

    pub fn null_columns(&self, tree: &PhyloTree) -> usize {
        self.columns.iter().filter(|c| c.is_null(tree)).count()
    }
}
