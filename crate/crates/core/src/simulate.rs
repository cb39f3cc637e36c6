//! Forward simulation of homology structures and sequences on star and
//! regular binary trees.
//!
//! Replicate `i` of a run with seed `s` draws from a ChaCha20 generator
//! seeded with `s` on stream `i`, so replicates can run in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::hmm::{build_star_hmm, Boundary, HmmSpec, StateKind};
use crate::homology::{Block, HomologyStructure, StarColumn, StarLaw, TreeColumn, TreeLaw};
use crate::params::EvolParams;
use crate::phylo::{validate_regular_binary, PhyloTree};
use crate::real::Real;
use crate::tkf91::{BranchKernel, BranchTime};

#[derive(Debug, Clone)]
pub struct SimConfig<T> {
    pub theta: EvolParams<T>,
    pub tree: PhyloTree,
    /// Ancestral (root) sequence length.
    pub n: usize,
    pub seed: u64,
    pub replicates: usize,
}

impl<T: Real> SimConfig<T> {
    pub fn new(theta: EvolParams<T>, tree: PhyloTree, n: usize, seed: u64, replicates: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("ancestral length must be at least 1".into()));
        }
        if replicates == 0 {
            return Err(Error::InvalidParameter("at least one replicate is required".into()));
        }
        Ok(Self { theta, tree, n, seed, replicates })
    }
}

/// True structure behind a simulated data set.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Star(HomologyStructure<StarColumn>),
    Tree(HomologyStructure<TreeColumn>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    /// Symbol indices, one sequence per leaf in leaf order.
    pub sequences: Vec<Vec<usize>>,
    pub provenance: Option<Provenance>,
}

impl SequenceSet {
    pub fn new(sequences: Vec<Vec<usize>>) -> Self {
        Self { sequences, provenance: None }
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(Vec::len).collect()
    }

    pub fn k(&self) -> usize {
        self.sequences.len()
    }
}

/// How star columns are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StarSampler {
    /// Walk the multiple-HMM chain.
    #[default]
    Chain,
    /// Draw each column independently from the column law.
    Columns,
}

pub fn replicate_rng(seed: u64, replicate: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// Number of extra draws `N` with `P(N >= c) = r^c`.
pub fn geometric<R: Rng + ?Sized>(rng: &mut R, r: f64) -> usize {
    if r <= 0.0 {
        return 0;
    }
    let u: f64 = 1.0 - rng.gen::<f64>();
    (u.ln() / r.ln()).floor() as usize
}

/// Survival flag and insertion count on one branch.
pub fn sample_fate<R: Rng + ?Sized>(rng: &mut R, k: &BranchKernel<f64>) -> (bool, usize) {
    if rng.gen::<f64>() < k.alpha {
        (true, geometric(rng, k.r))
    } else if rng.gen::<f64>() < k.kappa {
        (false, 1 + geometric(rng, k.r))
    } else {
        (false, 0)
    }
}

pub fn sample_star_column<R: Rng + ?Sized>(rng: &mut R, kernels: &[BranchKernel<f64>]) -> StarColumn {
    let (delta, ins) = kernels.iter().map(|k| sample_fate(rng, k)).unzip();
    StarColumn { delta, ins }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Symbol at the far end of a branch under F81.
fn mutate<R: Rng + ?Sized>(rng: &mut R, x: usize, keep: f64, nu: &[f64]) -> usize {
    if rng.gen::<f64>() < keep {
        x
    } else {
        draw(rng, nu)
    }
}

struct Branches {
    kernels: Vec<BranchKernel<f64>>,
    keep: Vec<f64>,
    nu: Vec<f64>,
}

impl Branches {
    fn new<T: Real>(theta: &EvolParams<T>, times: &[f64]) -> Result<Self> {
        let lambda = theta.lambda().to_f64_lossy();
        let alpha = theta.alpha().to_f64_lossy();
        let kernels = times
            .iter()
            .map(|&t| BranchKernel::new(lambda, BranchTime::new(t)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kernels,
            keep: times.iter().map(|&t| (-alpha * t).exp()).collect(),
            nu: theta.nu().iter().map(|x| x.to_f64_lossy()).collect(),
        })
    }
}

fn emit_star<R: Rng + ?Sized>(rng: &mut R, br: &Branches, s: &HomologyStructure<StarColumn>) -> Vec<Vec<usize>> {
    let k = br.kernels.len();
    let mut seqs = vec![Vec::new(); k];
    for c in &s.columns {
        if c.delta.iter().any(|&d| d) {
            let root = draw(rng, &br.nu);
            for i in 0..k {
                if c.delta[i] {
                    seqs[i].push(mutate(rng, root, br.keep[i], &br.nu));
                }
            }
        }
        for i in 0..k {
            for _ in 0..c.ins[i] {
                seqs[i].push(draw(rng, &br.nu));
            }
        }
    }
    seqs
}

/// Star columns read off a walk of the multiple-HMM chain over `n` root columns.
fn chain_columns<R: Rng + ?Sized>(rng: &mut R, spec: &HmmSpec<f64>, k: usize, n: usize) -> Vec<StarColumn> {
    let ns = spec.len();
    let rows: Vec<Vec<f64>> = (0..ns).map(|s| (0..ns).map(|t| spec.log_t(s, t).exp()).collect()).collect();
    let start: Vec<f64> = spec.log_start.iter().map(|x| x.exp()).collect();
    let mut cols = Vec::with_capacity(n);
    let mut state = draw(rng, &start);
    loop {
        match spec.states[state].kind {
            StateKind::RootFate { mask } => {
                if cols.len() == n {
                    break;
                }
                cols.push(StarColumn { delta: (0..k).map(|i| mask >> i & 1 == 1).collect(), ins: vec![0; k] });
            }
            StateKind::Insert { leaf, .. } => cols.last_mut().expect("chain starts in a root column").ins[leaf] += 1,
            _ => unreachable!("star chains only hold root-fate and insertion states"),
        }
        state = draw(rng, &rows[state]);
    }
    cols
}

/// One replicate on a star tree.
pub fn simulate_star<T: Real>(config: &SimConfig<T>, replicate: usize, sampler: StarSampler) -> Result<SequenceSet> {
    let tree = &config.tree;
    StarLaw::new(config.theta.lambda(), tree)?;
    let br = Branches::new(&config.theta, &tree.leaf_times())?;
    let mut rng = replicate_rng(config.seed, replicate);
    let k = tree.leaf_count();
    let columns = match sampler {
        StarSampler::Chain => {
            let lambda = config.theta.lambda().to_f64_lossy();
            let spec = build_star_hmm(lambda, tree, Boundary::Structures)?;
            chain_columns(&mut rng, &spec, k, config.n)
        }
        StarSampler::Columns => (0..config.n).map(|_| sample_star_column(&mut rng, &br.kernels)).collect(),
    };
    let structure = HomologyStructure::new(columns);
    let sequences = emit_star(&mut rng, &br, &structure);
    Ok(SequenceSet { sequences, provenance: Some(Provenance::Star(structure)) })
}

/// One replicate on a regular binary tree, level by level from the root.
pub fn simulate_tree<T: Real>(config: &SimConfig<T>, replicate: usize) -> Result<SequenceSet> {
    let tree = &config.tree;
    validate_regular_binary(tree)?;
    let times: Vec<f64> = (0..tree.node_count()).map(|v| tree.branch_length(v)).collect();
    let br = Branches::new(&config.theta, &times)?;
    let mut rng = replicate_rng(config.seed, replicate);
    let mut seqs = vec![Vec::new(); tree.leaf_count()];
    let mut columns = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        columns.push(sample_tree_column(&mut rng, tree, &br, Some(&mut seqs)));
    }
    Ok(SequenceSet { sequences: seqs, provenance: Some(Provenance::Tree(HomologyStructure::new(columns))) })
}

/// Draws the column of one root character; with `seqs`, also appends the
/// symbols it leaves at the leaves.
fn sample_tree_column<R: Rng + ?Sized>(
    rng: &mut R,
    tree: &PhyloTree,
    br: &Branches,
    mut seqs: Option<&mut Vec<Vec<usize>>>,
) -> TreeColumn {
    let nodes = tree.node_count();
    let mut blocks = vec![Block::empty(nodes)];
    blocks[0].flags[0] = true;
    let root = draw(rng, &br.nu);
    descend(rng, tree, br, 0, root, 0, &mut blocks, &mut seqs);
    TreeColumn { blocks }
}

#[allow(clippy::too_many_arguments)]
fn descend<R: Rng + ?Sized>(
    rng: &mut R,
    tree: &PhyloTree,
    br: &Branches,
    v: usize,
    symbol: usize,
    block: usize,
    blocks: &mut Vec<Block>,
    seqs: &mut Option<&mut Vec<Vec<usize>>>,
) {
    for &u in tree.children(v) {
        let (survived, inserted) = sample_fate(rng, &br.kernels[u]);
        if let Some(pos) = tree.leaf_position(u) {
            blocks[block].flags[u] = survived;
            blocks[block].ins[u] = inserted;
            if let Some(s) = seqs.as_deref_mut() {
                if survived {
                    s[pos].push(mutate(rng, symbol, br.keep[u], &br.nu));
                }
                for _ in 0..inserted {
                    s[pos].push(draw(rng, &br.nu));
                }
            }
            continue;
        }
        if survived {
            blocks[block].flags[u] = true;
            let child = mutate(rng, symbol, br.keep[u], &br.nu);
            descend(rng, tree, br, u, child, block, blocks, seqs);
        }
        for _ in 0..inserted {
            let mut b = Block::empty(tree.node_count());
            b.flags[u] = true;
            blocks.push(b);
            let at = blocks.len() - 1;
            let child = draw(rng, &br.nu);
            descend(rng, tree, br, u, child, at, blocks, seqs);
        }
    }
}

/// Leaf displacements of independent columns, for checking that every leaf
/// moves by one position per root character on average.
pub fn star_displacement_sampler<T: Real>(
    theta: &EvolParams<T>,
    tree: &PhyloTree,
    seed: u64,
) -> Result<impl FnMut() -> Vec<usize>> {
    StarLaw::new(theta.lambda(), tree)?;
    let br = Branches::new(theta, &tree.leaf_times())?;
    let mut rng = replicate_rng(seed, 0);
    Ok(move || {
        let c = sample_star_column(&mut rng, &br.kernels);
        c.delta.iter().zip(&c.ins).map(|(&d, &a)| usize::from(d) + a).collect()
    })
}

pub fn tree_displacement_sampler<T: Real>(
    theta: &EvolParams<T>,
    tree: &PhyloTree,
    seed: u64,
) -> Result<impl FnMut() -> Vec<usize>> {
    TreeLaw::new(theta.lambda(), tree)?;
    let times: Vec<f64> = (0..tree.node_count()).map(|v| tree.branch_length(v)).collect();
    let br = Branches::new(theta, &times)?;
    let tree = tree.clone();
    let mut rng = replicate_rng(seed, 0);
    Ok(move || {
        let c = sample_tree_column(&mut rng, &tree, &br, None);
        tree.leaves().iter().map(|&v| c.blocks.iter().map(|b| usize::from(b.flags[v]) + b.ins[v]).sum()).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homology::assumption_check;
    use crate::phylo::{make_balanced_binary, make_star};

    fn cfg(tree: PhyloTree, lambda: f64, n: usize, seed: u64) -> SimConfig<f64> {
        SimConfig::new(EvolParams::uniform(lambda, 0.1, 4).unwrap(), tree, n, seed, 1).unwrap()
    }

    #[test]
    fn deterministic_per_seed_and_stream() {
        let c = cfg(make_star(3, &[1.0; 3]).unwrap(), 0.02, 300, 7);
        let a = simulate_star(&c, 0, StarSampler::Chain).unwrap();
        assert_eq!(a, simulate_star(&c, 0, StarSampler::Chain).unwrap());
        assert_ne!(a, simulate_star(&c, 1, StarSampler::Chain).unwrap());
        let t = cfg(make_balanced_binary(3, 0.5).unwrap(), 0.05, 200, 7);
        assert_eq!(simulate_tree(&t, 3).unwrap(), simulate_tree(&t, 3).unwrap());
    }

    #[test]
    fn provenance_walk_matches_lengths() {
        let c = cfg(make_star(3, &[0.5, 1.0, 2.0]).unwrap(), 0.3, 200, 1);
        for s in [StarSampler::Chain, StarSampler::Columns] {
            let set = simulate_star(&c, 0, s).unwrap();
            let Some(Provenance::Star(st)) = &set.provenance else { panic!("missing provenance") };
            assert_eq!(st.len(), 200);
            assert!(st.matches_lengths(&c.tree, &set.lengths()));
        }
        let t = cfg(make_balanced_binary(3, 0.4).unwrap(), 0.3, 100, 2);
        let set = simulate_tree(&t, 0).unwrap();
        let Some(Provenance::Tree(st)) = &set.provenance else { panic!("missing provenance") };
        st.validate(&t.tree).unwrap();
        assert!(st.matches_lengths(&t.tree, &set.lengths()));
    }

    #[test]
    fn tiny_rate_gives_gapless_copies() {
        let c = cfg(make_star(3, &[1.0; 3]).unwrap(), 1e-12, 100, 3);
        let set = simulate_star(&c, 0, StarSampler::Chain).unwrap();
        assert_eq!(set.lengths(), vec![100; 3]);
    }

    #[test]
    fn geometric_tail() {
        let mut rng = replicate_rng(5, 0);
        let n = 200_000;
        let r = 0.3;
        let hits = (0..n).filter(|_| geometric(&mut rng, r) >= 2).count() as f64 / n as f64;
        assert!((hits - r * r).abs() < 4.0 * (r * r * (1.0 - r * r) / n as f64).sqrt());
    }

    #[test]
    fn displacement_means_are_one() {
        let th = EvolParams::uniform(0.4, 0.1, 4).unwrap();
        let star = make_star(3, &[0.5, 1.0, 2.0]).unwrap();
        let rep = assumption_check(20_000, star_displacement_sampler(&th, &star, 9).unwrap(), 4.0);
        assert!(rep.satisfied, "{rep:?}");
        let tree = make_balanced_binary(2, 0.7).unwrap();
        let rep = assumption_check(20_000, tree_displacement_sampler(&th, &tree, 9).unwrap(), 4.0);
        assert!(rep.satisfied, "{rep:?}");
    }
}
