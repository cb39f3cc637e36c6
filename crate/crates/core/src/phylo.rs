//! Rooted phylogenetic trees: star and binary shapes, node relations and Newick I/O.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::io::format_g12;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Distance to the parent; zero for the root.
    pub branch_length: f64,
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeKind {
    Star,
    Binary,
    Other,
}

/// Rooted tree with nodes indexed breadth-first from the root (index 0).
#[derive(Debug, Clone, PartialEq)]
pub struct PhyloTree {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
    leaf_pos: Vec<Option<usize>>,
    kind: TreeKind,
}

struct Draft {
    children: Vec<usize>,
    length: Option<f64>,
    name: Option<String>,
}

impl PhyloTree {
    fn from_draft(draft: Vec<Draft>, root: usize) -> Result<Self> {
        let mut order = Vec::with_capacity(draft.len());
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            queue.extend(draft[v].children.iter().copied());
        }
        let mut new_index = vec![usize::MAX; draft.len()];
        for (i, &v) in order.iter().enumerate() {
            new_index[v] = i;
        }
        let mut nodes: Vec<Node> = order
            .iter()
            .map(|&v| Node {
                parent: None,
                children: draft[v].children.iter().map(|&c| new_index[c]).collect(),
                branch_length: if v == root { 0.0 } else { draft[v].length.unwrap_or(0.0) },
                name: draft[v].name.clone(),
            })
            .collect();
        for v in 0..nodes.len() {
            for c in nodes[v].children.clone() {
                nodes[c].parent = Some(v);
            }
        }
        Self::from_nodes(nodes)
    }

    fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        for (v, n) in nodes.iter().enumerate().skip(1) {
            if !n.branch_length.is_finite() || n.branch_length < 0.0 {
                return Err(Error::Tree(format!("node {v} has invalid branch length {}", n.branch_length)));
            }
        }
        let leaves: Vec<usize> = (0..nodes.len()).filter(|&v| nodes[v].children.is_empty()).collect();
        if leaves.len() < 2 {
            return Err(Error::Tree(format!("a tree needs at least 2 leaves, found {}", leaves.len())));
        }
        let mut leaf_pos = vec![None; nodes.len()];
        for (i, &v) in leaves.iter().enumerate() {
            leaf_pos[v] = Some(i);
        }
        let star = nodes[0].children.iter().all(|&c| nodes[c].children.is_empty());
        let binary = nodes.iter().all(|n| n.children.is_empty() || n.children.len() == 2);
        let kind = if star {
            TreeKind::Star
        } else if binary {
            TreeKind::Binary
        } else {
            TreeKind::Other
        };
        Ok(Self { nodes, leaves, leaf_pos, kind })
    }

    pub fn kind(&self) -> TreeKind {
        self.kind
    }

    pub fn is_star(&self) -> bool {
        self.kind == TreeKind::Star
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, v: usize) -> &Node {
        &self.nodes[v]
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Leaf node indices in leaf order.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn leaf_position(&self, v: usize) -> Option<usize> {
        self.leaf_pos[v]
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        self.leaf_pos[v].is_some()
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.nodes[v].parent
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.nodes[v].children
    }

    pub fn branch_length(&self, v: usize) -> f64 {
        self.nodes[v].branch_length
    }

    /// Name of the leaf at position `i`, falling back to `X{i+1}`.
    pub fn leaf_name(&self, i: usize) -> String {
        self.nodes[self.leaves[i]].name.clone().unwrap_or_else(|| format!("X{}", i + 1))
    }

    pub fn node_label(&self, v: usize) -> String {
        match (&self.nodes[v].name, self.leaf_pos[v]) {
            (Some(n), _) => n.clone(),
            (None, Some(i)) => format!("X{}", i + 1),
            (None, None) if v == 0 => "R".to_string(),
            (None, None) => format!("N{v}"),
        }
    }

    /// Branch lengths of the leaves in leaf order.
    pub fn leaf_times(&self) -> Vec<f64> {
        self.leaves.iter().map(|&v| self.nodes[v].branch_length).collect()
    }

    pub fn direct_ancestor(&self, v: usize) -> Option<usize> {
        self.parent(v)
    }

    pub fn direct_descendants(&self, v: usize) -> &[usize] {
        self.children(v)
    }

    /// Leaf positions below (or equal to) node `v`.
    pub fn observed_descendants(&self, v: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![v];
        while let Some(u) = stack.pop() {
            if let Some(i) = self.leaf_pos[u] {
                out.push(i);
            }
            stack.extend(self.nodes[u].children.iter().rev());
        }
        out.sort_unstable();
        out
    }

    pub fn siblings(&self, a: usize, b: usize) -> bool {
        a != b && self.parent(a).is_some() && self.parent(a) == self.parent(b)
    }

    /// The `l`-th ancestor of `v` (`l = 1` is the parent).
    pub fn ancestor(&self, v: usize, l: usize) -> Option<usize> {
        let mut u = v;
        for _ in 0..l {
            u = self.parent(u)?;
        }
        Some(u)
    }

    pub fn depth(&self, v: usize) -> usize {
        let mut d = 0;
        let mut u = v;
        while let Some(p) = self.parent(u) {
            d += 1;
            u = p;
        }
        d
    }

    /// Depth-first pre-order of the nodes, children in stored order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0];
        while let Some(v) = stack.pop() {
            out.push(v);
            stack.extend(self.nodes[v].children.iter().rev());
        }
        out
    }

    pub fn to_newick(&self) -> String {
        let mut s = String::new();
        self.write_newick(0, &mut s);
        s.push(';');
        s
    }

    fn write_newick(&self, v: usize, out: &mut String) {
        let n = &self.nodes[v];
        if !n.children.is_empty() {
            out.push('(');
            for (i, &c) in n.children.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                self.write_newick(c, out);
            }
            out.push(')');
        }
        if let Some(name) = &n.name {
            if name.chars().any(|c| "(),:;'".contains(c) || c.is_whitespace()) {
                out.push('\'');
                out.push_str(name);
                out.push('\'');
            } else {
                out.push_str(name);
            }
        }
        if v != 0 {
            out.push(':');
            out.push_str(&format_g12(n.branch_length));
        }
    }
}

/// Star tree with `k` leaves named `X1..Xk`.
pub fn make_star(k: usize, times: &[f64]) -> Result<PhyloTree> {
    if k < 2 {
        return Err(Error::Tree(format!("a star tree needs k >= 2 leaves, got {k}")));
    }
    if times.len() != k {
        return Err(Error::Tree(format!("{k} leaves but {} branch lengths", times.len())));
    }
    let mut nodes = vec![Node { parent: None, children: (1..=k).collect(), branch_length: 0.0, name: None }];
    for (i, &t) in times.iter().enumerate() {
        nodes.push(Node { parent: Some(0), children: vec![], branch_length: t, name: Some(format!("X{}", i + 1)) });
    }
    PhyloTree::from_nodes(nodes)
}

/// Balanced binary tree with `2^levels` leaves and a common branch length.
pub fn make_balanced_binary(levels: usize, t: f64) -> Result<PhyloTree> {
    if levels == 0 {
        return Err(Error::Tree("a binary tree needs at least one level".into()));
    }
    let count = (1usize << (levels + 1)) - 1;
    let first_leaf = (1usize << levels) - 1;
    let nodes = (0..count)
        .map(|v| Node {
            parent: if v == 0 { None } else { Some((v - 1) / 2) },
            children: if v < first_leaf { vec![2 * v + 1, 2 * v + 2] } else { vec![] },
            branch_length: if v == 0 { 0.0 } else { t },
            name: (v >= first_leaf).then(|| format!("X{}", v - first_leaf + 1)),
        })
        .collect();
    PhyloTree::from_nodes(nodes)
}

/// Number of levels `L` of a binary tree whose leaves all sit at depth `L`.
pub fn validate_regular_binary(tree: &PhyloTree) -> Result<usize> {
    for v in 0..tree.node_count() {
        let c = tree.children(v).len();
        if c != 0 && c != 2 {
            return Err(Error::UnsupportedTree { expected: "binary" });
        }
    }
    let depths: Vec<usize> = tree.leaves().iter().map(|&v| tree.depth(v)).collect();
    let l = depths[0];
    if depths.iter().any(|&d| d != l) {
        return Err(Error::Tree("leaves sit at unequal depths".into()));
    }
    Ok(l)
}

pub fn parse_newick(text: &str) -> Result<PhyloTree> {
    let mut p = Parser { s: text.as_bytes(), pos: 0, nodes: Vec::new() };
    p.skip_ws();
    let root = p.subtree()?;
    p.skip_ws();
    p.expect(b';')?;
    p.skip_ws();
    if p.pos != p.s.len() {
        return Err(p.err("trailing characters after ';'"));
    }
    for (v, n) in p.nodes.iter().enumerate() {
        if v != root && n.length.is_none() {
            return Err(Error::Tree(format!(
                "missing branch length for node {}",
                n.name.clone().unwrap_or_else(|| "(unnamed)".into())
            )));
        }
    }
    PhyloTree::from_draft(p.nodes, root)
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    nodes: Vec<Draft>,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Newick { pos: self.pos, msg: msg.to_string() }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        match self.peek() {
            Some(x) if x == c => {
                self.pos += 1;
                Ok(())
            }
            Some(x) => Err(self.err(&format!("expected '{}', found '{}'", c as char, x as char))),
            None => Err(self.err(&format!("expected '{}', found end of input", c as char))),
        }
    }

    fn subtree(&mut self) -> Result<usize> {
        let mut children = Vec::new();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                self.skip_ws();
                children.push(self.subtree()?);
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => return Err(self.err(&format!("unexpected '{}'", c as char))),
                    None => return Err(self.err("unexpected end of input")),
                }
            }
        }
        self.skip_ws();
        let name = self.label()?;
        if children.is_empty() && name.is_none() && self.peek() != Some(b':') {
            return Err(match self.peek() {
                None => self.err("unexpected end of input"),
                Some(c) => self.err(&format!("unexpected '{}'", c as char)),
            });
        }
        self.skip_ws();
        let mut length = None;
        if self.peek() == Some(b':') {
            self.pos += 1;
            self.skip_ws();
            length = Some(self.number()?);
        }
        self.nodes.push(Draft { children, length, name });
        Ok(self.nodes.len() - 1)
    }

    fn label(&mut self) -> Result<Option<String>> {
        if self.peek() == Some(b'\'') {
            self.pos += 1;
            let start = self.pos;
            while self.peek().is_some_and(|c| c != b'\'') {
                self.pos += 1;
            }
            let name = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
            self.expect(b'\'')?;
            return Ok(Some(name));
        }
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| !matches!(c, b'(' | b')' | b',' | b':' | b';' | b'\'') && !c.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        Ok((self.pos > start).then(|| String::from_utf8_lossy(&self.s[start..self.pos]).into_owned()))
    }

    fn number(&mut self) -> Result<f64> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit() || matches!(c, b'.' | b'-' | b'+' | b'e' | b'E')) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a branch length"));
        }
        let txt = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
        txt.parse::<f64>().map_err(|_| Error::Newick { pos: start, msg: format!("invalid number {txt:?}") })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_star_and_binary() {
        let s = parse_newick("(A:1,B:1,C:1);").unwrap();
        assert_eq!(s.kind(), TreeKind::Star);
        assert_eq!(s.leaf_count(), 3);
        assert_eq!(s.leaf_times(), vec![1.0, 1.0, 1.0]);
        let b = parse_newick("((A:1,B:1):1,(C:1,D:1):1);").unwrap();
        assert_eq!(b.kind(), TreeKind::Binary);
        assert_eq!(b.leaf_count(), 4);
        assert_eq!(validate_regular_binary(&b).unwrap(), 2);
        assert_eq!(b.leaf_name(2), "C");
    }

    #[test]
    fn reports_syntax_errors() {
        match parse_newick("(A:1") {
            Err(Error::Newick { pos, .. }) => assert_eq!(pos, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_newick("(A,B:1);").is_err());
        assert!(parse_newick("(A:1);").is_err());
        assert!(parse_newick("(A:1,B:1) x").is_err());
    }

    #[test]
    fn breadth_first_indexing() {
        let t = parse_newick("((A:1,B:2):3,C:4);").unwrap();
        assert_eq!(t.children(0), &[1, 2]);
        assert_eq!(t.leaves(), &[2, 3, 4]);
        assert_eq!(t.leaf_name(0), "C");
        assert_eq!(t.branch_length(1), 3.0);
        assert!(validate_regular_binary(&t).is_err());
        for v in 1..t.node_count() {
            let p = t.parent(v).unwrap();
            assert!(t.direct_descendants(p).contains(&v));
        }
    }

    #[test]
    fn round_trip() {
        let text = "((A:0.1,B:0.123456789012345):1e-07,(C:3,'D x':1.5):2);";
        let t = parse_newick(text).unwrap();
        let back = parse_newick(&t.to_newick()).unwrap();
        assert_eq!(back.node_count(), t.node_count());
        for v in 0..t.node_count() {
            assert!((t.branch_length(v) - back.branch_length(v)).abs() < 1e-12);
            assert_eq!(t.node(v).name, back.node(v).name);
        }
    }

    #[test]
    fn relations_on_balanced_tree() {
        let t = make_balanced_binary(3, 0.5).unwrap();
        assert_eq!(t.node_count(), 15);
        assert_eq!(t.leaf_count(), 8);
        assert_eq!(validate_regular_binary(&t).unwrap(), 3);
        assert_eq!(t.observed_descendants(1), vec![0, 1, 2, 3]);
        assert!(t.siblings(7, 8));
        assert!(!t.siblings(8, 9));
        assert_eq!(t.ancestor(7, 3), Some(0));
        assert!(validate_regular_binary(&make_star(3, &[1.0; 3]).unwrap()).is_err());
        assert!(make_star(1, &[1.0]).is_err());
    }
}
