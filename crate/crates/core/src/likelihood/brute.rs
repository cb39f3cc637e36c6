//! Direct sums over enumerated homology structures, for tiny inputs.

use crate::error::{Error, Result};
use std::collections::HashMap;

use crate::homology::{
    lineage_top, star_columns_within, tree_cap_excess, tree_columns_within, Column, StarColumn, StarLaw, TreeColumn,
    TreeLaw,
};
use crate::params::EvolParams;
use crate::phylo::PhyloTree;
use crate::real::Real;
use crate::substitution::{emission_h_star, emission_h_tree};
use crate::tkf91::BranchTime;

use super::log_sum_exp;

/// Enumeration limits. `None` picks the smallest value that loses nothing
/// on a star tree.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BruteCaps {
    pub max_cols: Option<usize>,
    pub max_ins: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BruteResult<T> {
    pub value: T,
    /// Bound on the probability mass left out by the caps.
    pub tail_bound: f64,
    pub structures: usize,
}

impl<T: Real> BruteResult<T> {
    /// Bound on `log(true) - value`.
    pub fn log_gap_bound(&self) -> f64 {
        (self.tail_bound / self.value.to_f64_lossy().exp()).ln_1p()
    }
}

/// Brute-force `log Q`.
pub fn brute_q<T: Real>(
    theta: &EvolParams<T>,
    tree: &PhyloTree,
    seqs: &[Vec<usize>],
    caps: BruteCaps,
) -> Result<BruteResult<T>> {
    let total: usize = seqs.iter().map(Vec::len).sum();
    let max_cols = caps.max_cols.unwrap_or(total);
    let terms = sum_structures(theta, tree, seqs, max_cols, caps)?;
    let keep = 1.0 - terms.pi0;
    let logs: Vec<T> = (0..terms.by_cols.len())
        .map(|j| terms.by_cols[j].ln() - T::of(keep.ln() * (j + 1) as f64))
        .collect();
    // Capped insertion runs, plus structures longer than the column cap.
    let mut bound: f64 = (1..=max_cols).map(|j| j as f64 * terms.rho * keep.powi(-(j as i32 + 1))).sum();
    if max_cols < total {
        bound += (total - max_cols) as f64 / keep;
    }
    Ok(BruteResult { value: log_sum_exp(&logs), tail_bound: bound, structures: terms.count })
}

/// Brute-force `log P` at ancestral length `n`.
pub fn brute_l<T: Real>(
    theta: &EvolParams<T>,
    tree: &PhyloTree,
    seqs: &[Vec<usize>],
    n: usize,
    caps: BruteCaps,
) -> Result<BruteResult<T>> {
    if n == 0 {
        return Err(Error::InvalidParameter("ancestral length must be at least 1".into()));
    }
    let total: usize = seqs.iter().map(Vec::len).sum();
    let max_cols = caps.max_cols.unwrap_or(total).min(n);
    let terms = sum_structures(theta, tree, seqs, max_cols, caps)?;
    let logs: Vec<T> = (0..terms.by_cols.len())
        .map(|j| terms.by_cols[j].ln() + T::of(ln_binomial(n, j) + (n - j) as f64 * terms.pi0.ln()))
        .collect();
    let mut bound = n as f64 * terms.rho;
    if max_cols < total.min(n) {
        bound += (max_cols + 1..=total.min(n))
            .map(|j| (ln_binomial(n, j) + (n - j) as f64 * terms.pi0.ln() + j as f64 * (1.0 - terms.pi0).ln()).exp())
            .sum::<f64>();
    }
    Ok(BruteResult { value: log_sum_exp(&logs), tail_bound: bound, structures: terms.count })
}

struct Terms<T> {
    /// Summed joint probability of the structures with `j` non-null columns.
    by_cols: Vec<T>,
    count: usize,
    pi0: f64,
    rho: f64,
}

/// Every non-null column sequence reaching the sequence lengths, summed by
/// column count. Sequences sharing a prefix budget share their suffix sums.
fn sum_structures<T: Real>(
    theta: &EvolParams<T>,
    tree: &PhyloTree,
    seqs: &[Vec<usize>],
    max_cols: usize,
    caps: BruteCaps,
) -> Result<Terms<T>> {
    if seqs.len() != tree.leaf_count() {
        return Err(Error::InvalidParameter(format!("{} sequences for {} leaves", seqs.len(), tree.leaf_count())));
    }
    let a = theta.nu().len();
    if let Some(&bad) = seqs.iter().flatten().find(|&&x| x >= a) {
        return Err(Error::InvalidParameter(format!("symbol index {bad} outside an alphabet of size {a}")));
    }
    let target: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let max_ins = caps.max_ins.unwrap_or_else(|| target.iter().copied().max().unwrap_or(0));
    if tree.is_star() {
        let law = StarLaw::new(theta.lambda(), tree)?;
        let times = tree
            .leaf_times()
            .into_iter()
            .map(|t| BranchTime::new(T::of(t)))
            .collect::<Result<Vec<_>>>()?;
        let rho = law
            .kernels()
            .iter()
            .zip(&target)
            .filter(|(_, &n)| n > max_ins)
            .map(|(k, _)| k.b.to_f64_lossy() * k.r.to_f64_lossy().powi(max_ins as i32))
            .sum();
        let mut memo = HashMap::new();
        let (by_cols, count) = suffix_sums(
            &target,
            &target,
            max_cols,
            &|b: &[usize]| star_columns_within(b, max_ins),
            &|c: &StarColumn| c.increments(tree),
            &|c: &StarColumn, pos: &[usize]| star_joint(theta, &law, &times, c, pos, seqs),
            &mut memo,
        )?;
        Ok(Terms { by_cols, count, pi0: law.null_probability().to_f64_lossy(), rho })
    } else {
        let law = TreeLaw::new(theta.lambda(), tree)?;
        let rho = tree_cap_excess(&law, max_ins);
        let mut memo = HashMap::new();
        let (by_cols, count) = suffix_sums(
            &target,
            &target,
            max_cols,
            &|b: &[usize]| tree_columns_within(tree, b, max_ins),
            &|c: &TreeColumn| c.increments(tree),
            &|c: &TreeColumn, pos: &[usize]| tree_joint(theta, &law, c, pos, seqs),
            &mut memo,
        )?;
        Ok(Terms { by_cols, count, pi0: law.null_probability().to_f64_lossy(), rho })
    }
}

type Memo<T> = HashMap<(Vec<usize>, usize), (Vec<T>, usize)>;

#[allow(clippy::type_complexity)]
fn suffix_sums<T: Real, C>(
    target: &[usize],
    left: &[usize],
    cols_left: usize,
    columns_within: &dyn Fn(&[usize]) -> Vec<C>,
    inc: &dyn Fn(&C) -> Vec<usize>,
    weight: &dyn Fn(&C, &[usize]) -> Result<T>,
    memo: &mut Memo<T>,
) -> Result<(Vec<T>, usize)> {
    if let Some(hit) = memo.get(&(left.to_vec(), cols_left)) {
        return Ok(hit.clone());
    }
    let mut sums = vec![T::zero(); cols_left + 1];
    let mut count = 0;
    if left.iter().all(|&x| x == 0) {
        sums[0] = T::one();
        count = 1;
    } else if cols_left > 0 {
        let pos: Vec<usize> = target.iter().zip(left).map(|(&t, &l)| t - l).collect();
        for c in columns_within(left) {
            let d = inc(&c);
            if d.iter().all(|&x| x == 0) {
                continue;
            }
            let w = weight(&c, &pos)?;
            let next: Vec<usize> = left.iter().zip(d).map(|(&l, x)| l - x).collect();
            let (sub, n) = suffix_sums(target, &next, cols_left - 1, columns_within, inc, weight, memo)?;
            for (j, &s) in sub.iter().enumerate() {
                sums[j + 1] = sums[j + 1] + w * s;
            }
            count += n;
        }
    }
    memo.insert((left.to_vec(), cols_left), (sums.clone(), count));
    Ok((sums, count))
}

fn star_joint<T: Real>(
    theta: &EvolParams<T>,
    law: &StarLaw<T>,
    times: &[BranchTime<T>],
    c: &StarColumn,
    pos: &[usize],
    seqs: &[Vec<usize>],
) -> Result<T> {
    let nu = theta.nu();
    let mut p = law.pi(c)?;
    let j: Vec<usize> = (0..c.k()).filter(|&i| c.delta[i]).collect();
    let mut at = pos.to_vec();
    if !j.is_empty() {
        let x: Vec<usize> = j.iter().map(|&i| seqs[i][at[i]]).collect();
        p = p * emission_h_star(theta.subst(), times, &j, &x)?;
        for &i in &j {
            at[i] += 1;
        }
    }
    for (i, &n) in c.ins.iter().enumerate() {
        for _ in 0..n {
            p = p * nu[seqs[i][at[i]]];
            at[i] += 1;
        }
    }
    Ok(p)
}

fn tree_joint<T: Real>(
    theta: &EvolParams<T>,
    law: &TreeLaw<T>,
    c: &TreeColumn,
    pos: &[usize],
    seqs: &[Vec<usize>],
) -> Result<T> {
    let tree = law.tree();
    let nu = theta.nu();
    let leaves = tree.leaves();
    let mut at = pos.to_vec();
    let mut p = law.pi(c)?;
    for b in &c.blocks {
        let mut tops: Vec<usize> = Vec::new();
        for &v in leaves {
            if b.flags[v] {
                let t = lineage_top(tree, b, v);
                if !tops.contains(&t) {
                    tops.push(t);
                }
            }
        }
        for &t in &tops {
            let survival: Vec<bool> = (0..tree.node_count()).map(|u| b.flags[u] && lineage_top(tree, b, u) == t).collect();
            let symbols: Vec<Option<usize>> =
                leaves.iter().enumerate().map(|(i, &v)| survival[v].then(|| seqs[i][at[i]])).collect();
            p = p * emission_h_tree(theta.subst(), tree, &survival, &symbols)?;
        }
        for (i, &v) in leaves.iter().enumerate() {
            if b.flags[v] {
                at[i] += 1;
            }
            for _ in 0..b.ins[v] {
                p = p * nu[seqs[i][at[i]]];
                at[i] += 1;
            }
        }
    }
    Ok(p)
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    (0..k).map(|i| ((n - i) as f64 / (i + 1) as f64).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phylo::{make_balanced_binary, make_star};
    use approx::assert_relative_eq;

    #[test]
    fn one_column_hand_value() {
        let tree = make_star(2, &[0.5, 0.8]).unwrap();
        let th = EvolParams::uniform(0.3, 0.4, 4).unwrap();
        let seqs = vec![vec![1], vec![2]];
        let got = brute_q(&th, &tree, &seqs, BruteCaps { max_cols: Some(1), max_ins: Some(0) }).unwrap();
        let law = StarLaw::new(0.3, &tree).unwrap();
        let col = StarColumn::new(vec![true, true], vec![0, 0]).unwrap();
        let times: Vec<BranchTime<f64>> = [0.5, 0.8].iter().map(|&t| BranchTime::new(t).unwrap()).collect();
        let h = emission_h_star(th.subst(), &times, &[0, 1], &[1, 2]).unwrap();
        let pi0 = law.null_probability();
        let want = law.pi(&col).unwrap() * h / (1.0 - pi0).powi(2);
        assert_relative_eq!(got.value.exp(), want, max_relative = 1e-13);
        assert!(got.tail_bound > 0.0);
        let fuller = brute_q(&th, &tree, &seqs, BruteCaps::default()).unwrap();
        assert!(fuller.value > got.value);
        assert_eq!(fuller.tail_bound, 0.0);
    }

    #[test]
    fn binary_four_leaves_positive() {
        let tree = make_balanced_binary(2, 0.5).unwrap();
        let th = EvolParams::uniform(0.1, 0.3, 4).unwrap();
        let seqs = vec![vec![0], vec![0], vec![1], vec![3]];
        let r: BruteResult<f64> = brute_q(&th, &tree, &seqs, BruteCaps { max_cols: None, max_ins: Some(1) }).unwrap();
        assert!(r.value.is_finite() && r.value < 0.0);
        assert!(r.tail_bound.is_finite());
    }
}
