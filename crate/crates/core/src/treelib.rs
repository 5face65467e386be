//! Sentence-level trees, the adjacency-vector codec and top-down greedy
//! parsing.
//!
//! Node indices are hierarchical: a parent always has a smaller index than
//! its children. Trees built by this module (from the parser or from
//! canonical text) are indexed breadth-first with siblings left to right.
//! Trees decoded from an [`AdjacencyVector`] keep the indexing the vector
//! encodes, which only guarantees parent-before-child.
//!
//! Canonical text: a leaf is its 0-based sentence index, an internal node is
//! its children in parentheses separated by single spaces, e.g.
//! `(0 ((1 2) 3))`.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MAX_SENTENCES;
use crate::tensor::Tensor;

/// Upper bound on nodes of a tree over at most 19 sentences (2·19 − 1).
pub const MAX_NODES: usize = 2 * MAX_SENTENCES - 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("empty score vector")]
    EmptyScores,
    #[error("non-finite split score at position {0}")]
    NonFiniteScore(usize),
    #[error("adjacency vector is not tree-valid at block {block}: expected exactly one parent link, found {found}")]
    NotTreeValid { block: usize, found: usize },
    #[error("flattened adjacency length {0} is not n(n-1)/2 for any n")]
    BadLength(usize),
    #[error("block {block} has length {found}, expected {block}")]
    BadBlock { block: usize, found: usize },
    #[error("invalid tree: {0}")]
    Invalid(String),
    #[error("cannot parse tree text: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Sentence index carried by a leaf.
    pub leaf: Option<usize>,
}

/// Nested form used to build trees; leaves hold sentence indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    Leaf(usize),
    Node(Vec<Shape>),
}

impl Shape {
    pub fn node(children: impl IntoIterator<Item = Shape>) -> Shape {
        Shape::Node(children.into_iter().collect())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Leaf(i) => write!(f, "{i}"),
            Shape::Node(cs) => {
                f.write_str("(")?;
                for (k, c) in cs.iter().enumerate() {
                    if k > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceTree {
    nodes: Vec<TreeNode>,
}

impl SentenceTree {
    pub fn single_leaf() -> Self {
        Self {
            nodes: vec![TreeNode {
                parent: None,
                children: vec![],
                leaf: Some(0),
            }],
        }
    }

    /// Breadth-first indexing of a nested shape.
    pub fn from_shape(shape: &Shape) -> Self {
        let mut nodes = Vec::new();
        let mut queue: VecDeque<(&Shape, Option<usize>)> = VecDeque::new();
        queue.push_back((shape, None));
        while let Some((s, parent)) = queue.pop_front() {
            let idx = nodes.len();
            nodes.push(TreeNode {
                parent,
                children: vec![],
                leaf: match s {
                    Shape::Leaf(i) => Some(*i),
                    Shape::Node(_) => None,
                },
            });
            if let Some(p) = parent {
                nodes[p].children.push(idx);
            }
            if let Shape::Node(cs) = s {
                for c in cs {
                    queue.push_back((c, Some(idx)));
                }
            }
        }
        Self { nodes }
    }

    /// Builds a tree from `parents[i - 1]` = parent of node `i`; leaf
    /// sentence indices are assigned in depth-first order.
    pub fn from_parents(parents: &[usize]) -> Result<Self, TreeError> {
        let n = parents.len() + 1;
        let mut nodes = vec![
            TreeNode {
                parent: None,
                children: vec![],
                leaf: None,
            };
            n
        ];
        for (k, &p) in parents.iter().enumerate() {
            let i = k + 1;
            if p >= i {
                return Err(TreeError::Invalid(format!(
                    "parent {p} of node {i} does not precede it"
                )));
            }
            nodes[i].parent = Some(p);
            nodes[p].children.push(i);
        }
        let mut tree = Self { nodes };
        tree.label_leaves();
        Ok(tree)
    }

    fn label_leaves(&mut self) {
        let mut next = 0;
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if self.nodes[i].children.is_empty() {
                self.nodes[i].leaf = Some(next);
                next += 1;
            } else {
                self.nodes[i].leaf = None;
                stack.extend(self.nodes[i].children.iter().rev());
            }
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Parent of every non-root node, in node order.
    pub fn parents(&self) -> Vec<usize> {
        self.nodes[1..]
            .iter()
            .map(|n| n.parent.expect("non-root node has a parent"))
            .collect()
    }

    /// Leaf node indices in left-to-right order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if self.nodes[i].children.is_empty() {
                out.push(i);
            } else {
                stack.extend(self.nodes[i].children.iter().rev());
            }
        }
        out
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.children.is_empty()).count()
    }

    pub fn is_binary(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.children.is_empty() || n.children.len() == 2)
    }

    pub fn to_shape(&self) -> Shape {
        fn go(t: &SentenceTree, i: usize) -> Shape {
            let n = &t.nodes[i];
            if n.children.is_empty() {
                Shape::Leaf(n.leaf.unwrap_or(0))
            } else {
                Shape::Node(n.children.iter().map(|&c| go(t, c)).collect())
            }
        }
        go(self, 0)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |m: String| Err(TreeError::Invalid(m));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        if self.nodes[0].parent.is_some() {
            return bad("root has a parent".into());
        }
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            match n.parent {
                None => return bad(format!("node {i} has no parent")),
                Some(p) if p >= i => {
                    return bad(format!("parent {p} of node {i} does not precede it"))
                }
                Some(p) if !self.nodes[p].children.contains(&i) => {
                    return bad(format!("node {i} missing from children of {p}"))
                }
                _ => {}
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.children.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("children of node {i} are not in index order"));
            }
            if n.children.iter().any(|&c| self.nodes.get(c).and_then(|x| x.parent) != Some(i)) {
                return bad(format!("child list of node {i} disagrees with parents"));
            }
            if n.children.is_empty() != n.leaf.is_some() {
                return bad(format!("node {i}: leaf payload iff no children violated"));
            }
        }
        for (k, leaf) in self.leaves().into_iter().enumerate() {
            if self.nodes[leaf].leaf != Some(k) {
                return bad(format!(
                    "leaf {leaf} carries sentence {:?}, expected {k}",
                    self.nodes[leaf].leaf
                ));
            }
        }
        Ok(())
    }
}

impl fmt::Display for SentenceTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_shape())
    }
}

impl FromStr for SentenceTree {
    type Err = TreeError;

    /// Parses canonical text; the result is BFS-indexed and validated.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let chars: Vec<char> = s.chars().collect();
        let mut pos = 0;
        let shape = parse_shape(&chars, &mut pos)?;
        skip_ws(&chars, &mut pos);
        if pos != chars.len() {
            return Err(TreeError::Parse(format!("trailing input at {pos}")));
        }
        let tree = SentenceTree::from_shape(&shape);
        tree.validate()?;
        Ok(tree)
    }
}

fn skip_ws(c: &[char], pos: &mut usize) {
    while *pos < c.len() && c[*pos].is_whitespace() {
        *pos += 1;
    }
}

fn parse_shape(c: &[char], pos: &mut usize) -> Result<Shape, TreeError> {
    skip_ws(c, pos);
    match c.get(*pos) {
        Some('(') => {
            *pos += 1;
            let mut children = Vec::new();
            loop {
                skip_ws(c, pos);
                match c.get(*pos) {
                    Some(')') => {
                        *pos += 1;
                        break;
                    }
                    Some(_) => children.push(parse_shape(c, pos)?),
                    None => return Err(TreeError::Parse("unclosed parenthesis".into())),
                }
            }
            if children.is_empty() {
                return Err(TreeError::Parse("empty internal node".into()));
            }
            Ok(Shape::Node(children))
        }
        Some(ch) if ch.is_ascii_digit() => {
            let start = *pos;
            while *pos < c.len() && c[*pos].is_ascii_digit() {
                *pos += 1;
            }
            let s: String = c[start..*pos].iter().collect();
            s.parse()
                .map(Shape::Leaf)
                .map_err(|e| TreeError::Parse(e.to_string()))
        }
        Some(ch) => Err(TreeError::Parse(format!("unexpected {ch:?} at {}", *pos))),
        None => Err(TreeError::Parse("unexpected end of input".into())),
    }
}

/// Expected split depth per sentence position; entry 0 is never used as a
/// split point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub values: Vec<f64>,
}

impl SplitScores {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Top-down greedy parsing: a span `[l, r]` splits at the position
/// `t ∈ (l, r]` with the largest score (ties to the smallest `t`) into
/// `[l, t-1]` and `[t, r]`, recursively.
pub fn parse_from_scores(scores: &SplitScores) -> Result<SentenceTree, TreeError> {
    let d = &scores.values;
    if d.is_empty() {
        return Err(TreeError::EmptyScores);
    }
    if let Some(i) = d.iter().position(|x| !x.is_finite()) {
        return Err(TreeError::NonFiniteScore(i));
    }
    fn split(d: &[f64], l: usize, r: usize) -> Shape {
        if l == r {
            return Shape::Leaf(l);
        }
        let mut best = l + 1;
        for t in l + 2..=r {
            if d[t] > d[best] {
                best = t;
            }
        }
        Shape::node([split(d, l, best - 1), split(d, best, r)])
    }
    Ok(SentenceTree::from_shape(&split(d, 0, d.len() - 1)))
}

/// Lower-triangular adjacency serialization: block `i` (for node `i ≥ 1`)
/// has length `i` and marks the links from node `i` to nodes `0..i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyVector {
    blocks: Vec<Vec<u8>>,
}

impl AdjacencyVector {
    /// Blocks for nodes `1..n`; lengths are checked, tree-validity is not.
    pub fn from_blocks(blocks: Vec<Vec<u8>>) -> Result<Self, TreeError> {
        for (k, b) in blocks.iter().enumerate() {
            if b.len() != k + 1 {
                return Err(TreeError::BadBlock {
                    block: k + 1,
                    found: b.len(),
                });
            }
        }
        Ok(Self { blocks })
    }

    pub fn from_flat(flat: &[u8]) -> Result<Self, TreeError> {
        let mut blocks = Vec::new();
        let mut off = 0;
        let mut i = 1;
        while off < flat.len() {
            if off + i > flat.len() {
                return Err(TreeError::BadLength(flat.len()));
            }
            blocks.push(flat[off..off + i].to_vec());
            off += i;
            i += 1;
        }
        Ok(Self { blocks })
    }

    /// One-hot blocks from a parent list.
    pub fn from_parents(parents: &[usize]) -> Result<Self, TreeError> {
        let blocks = parents
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let i = k + 1;
                if p >= i {
                    return Err(TreeError::Invalid(format!(
                        "parent {p} of node {i} does not precede it"
                    )));
                }
                let mut b = vec![0u8; i];
                b[p] = 1;
                Ok(b)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[Vec<u8>] {
        &self.blocks
    }

    pub fn num_nodes(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn flatten(&self) -> Vec<u8> {
        self.blocks.iter().flatten().copied().collect()
    }

    /// Every block has exactly one set entry.
    pub fn check_tree_valid(&self) -> Result<(), TreeError> {
        for (k, b) in self.blocks.iter().enumerate() {
            let found = b.iter().filter(|&&x| x != 0).count();
            if found != 1 {
                return Err(TreeError::NotTreeValid {
                    block: k + 1,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn is_tree_valid(&self) -> bool {
        self.check_tree_valid().is_ok()
    }

    /// Parent of each non-root node; requires tree-validity.
    pub fn parents(&self) -> Result<Vec<usize>, TreeError> {
        self.check_tree_valid()?;
        Ok(self
            .blocks
            .iter()
            .map(|b| b.iter().position(|&x| x != 0).expect("validated"))
            .collect())
    }
}

pub fn tree_to_adjacency_vector(tree: &SentenceTree) -> AdjacencyVector {
    AdjacencyVector::from_parents(&tree.parents()).expect("valid tree has preceding parents")
}

pub fn adjacency_vector_to_tree(v: &AdjacencyVector) -> Result<SentenceTree, TreeError> {
    SentenceTree::from_parents(&v.parents()?)
}

/// Symmetric 0/1 adjacency matrix without self-loops.
pub fn tree_to_adjacency_matrix(tree: &SentenceTree) -> Tensor {
    let n = tree.num_nodes();
    let mut a = Tensor::zeros(n, n);
    for (i, node) in tree.nodes().iter().enumerate() {
        if let Some(p) = node.parent {
            a.set(i, p, 1.0);
            a.set(p, i, 1.0);
        }
    }
    a
}

/// Depth of every node; the root has depth 0.
pub fn node_depths(tree: &SentenceTree) -> Vec<usize> {
    let mut depths = vec![0; tree.num_nodes()];
    for (i, node) in tree.nodes().iter().enumerate().skip(1) {
        depths[i] = depths[node.parent.expect("non-root")] + 1;
    }
    depths
}

/// Recipe id → tree, in insertion order.
///
/// Text form: one `<id>\t<canonical tree>` line per entry.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TreeMap {
    entries: Vec<(String, SentenceTree)>,
    index: HashMap<String, usize>,
}

impl TreeMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, tree: SentenceTree) {
        let id = id.into();
        match self.index.get(&id) {
            Some(&i) => self.entries[i].1 = tree,
            None => {
                self.index.insert(id.clone(), self.entries.len());
                self.entries.push((id, tree));
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<&SentenceTree> {
        self.index.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SentenceTree)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, t) in &self.entries {
            out.push_str(id);
            out.push('\t');
            out.push_str(&t.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TreeError> {
        let mut map = TreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, tree) = line
                .split_once('\t')
                .ok_or_else(|| TreeError::Parse(format!("line {}: missing tab", i + 1)))?;
            let tree: SentenceTree = tree
                .parse()
                .map_err(|e| TreeError::Parse(format!("line {}: {e}", i + 1)))?;
            map.insert(id, tree);
        }
        Ok(map)
    }
}

/// Uniformly random parent list for an `n`-node hierarchical tree.
pub fn random_parents<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    (1..n).map(|i| rng.gen_range(0..i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leaf(i: usize) -> Shape {
        Shape::Leaf(i)
    }

    #[test]
    fn single_score_parses_to_single_leaf() {
        let t = parse_from_scores(&SplitScores::new(vec![0.3])).unwrap();
        assert_eq!(t, SentenceTree::single_leaf());
        assert_eq!(t.to_string(), "0");
    }

    #[test]
    fn worked_example_from_hand_recursion() {
        // Top split at position 2 (0.9); right span splits at 4 (0.5), then 3.
        let t = parse_from_scores(&SplitScores::new(vec![0.0, 0.9, 0.1, 0.5])).unwrap();
        let expected = Shape::node([leaf(0), Shape::node([Shape::node([leaf(1), leaf(2)]), leaf(3)])]);
        assert_eq!(t.to_shape(), expected);
        assert_eq!(t.to_string(), "(0 ((1 2) 3))");
    }

    #[test]
    fn equal_scores_give_right_branching_comb() {
        let t = parse_from_scores(&SplitScores::new(vec![1.0; 4])).unwrap();
        assert_eq!(t.to_string(), "(0 (1 (2 3)))");
    }

    #[test]
    fn empty_or_non_finite_scores_are_errors() {
        assert_eq!(
            parse_from_scores(&SplitScores::new(vec![])),
            Err(TreeError::EmptyScores)
        );
        assert_eq!(
            parse_from_scores(&SplitScores::new(vec![0.0, f64::NAN])),
            Err(TreeError::NonFiniteScore(1))
        );
    }

    #[test]
    fn three_leaf_tree_encodes_to_known_vector() {
        let t = SentenceTree::from_shape(&Shape::node([leaf(0), Shape::node([leaf(1), leaf(2)])]));
        assert_eq!(t.leaves(), vec![1, 3, 4]);
        let v = tree_to_adjacency_vector(&t);
        assert_eq!(v.flatten(), vec![1, 1, 0, 0, 0, 1, 0, 0, 1, 0]);
        assert_eq!(node_depths(&t), vec![0, 1, 1, 2, 2]);
    }

    #[test]
    fn two_node_tree() {
        let t = SentenceTree::from_shape(&Shape::node([leaf(0)]));
        let v = tree_to_adjacency_vector(&t);
        assert_eq!(v.flatten(), vec![1]);
        assert_eq!(adjacency_vector_to_tree(&AdjacencyVector::from_flat(&[1]).unwrap()).unwrap(), t);
        let a = tree_to_adjacency_matrix(&t);
        assert_eq!(a.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn missing_parent_is_reported_at_its_block() {
        let v = AdjacencyVector::from_flat(&[1, 0, 0]).unwrap();
        assert_eq!(
            adjacency_vector_to_tree(&v),
            Err(TreeError::NotTreeValid { block: 2, found: 0 })
        );
        let v = AdjacencyVector::from_flat(&[1, 1, 1]).unwrap();
        assert_eq!(
            v.check_tree_valid(),
            Err(TreeError::NotTreeValid { block: 2, found: 2 })
        );
        assert_eq!(AdjacencyVector::from_flat(&[1, 0]), Err(TreeError::BadLength(2)));
    }

    #[test]
    fn single_leaf_depths_and_text_roundtrip() {
        let t = SentenceTree::single_leaf();
        assert_eq!(node_depths(&t), vec![0]);
        let parsed: SentenceTree = "(0 ((1 2) 3))".parse().unwrap();
        assert_eq!(parsed.to_string(), "(0 ((1 2) 3))");
        assert!("(0 (1)".parse::<SentenceTree>().is_err());
        assert!("(1 0)".parse::<SentenceTree>().is_err());
        assert!("()".parse::<SentenceTree>().is_err());
    }

    #[test]
    fn tree_map_text_roundtrip() {
        let mut m = TreeMap::new();
        m.insert("b", "(0 1)".parse().unwrap());
        m.insert("a", SentenceTree::single_leaf());
        let text = m.to_text();
        assert_eq!(text, "b\t(0 1)\na\t0\n");
        assert_eq!(TreeMap::from_text(&text).unwrap(), m);
        assert!(TreeMap::from_text("x (0 1)").is_err());
    }

    proptest! {
        #[test]
        fn codec_roundtrips(parents in (1usize..=MAX_NODES).prop_flat_map(|n| {
            (1..n).map(|i| 0..i).collect::<Vec<_>>()
        })) {
            let v = AdjacencyVector::from_parents(&parents).unwrap();
            let t = adjacency_vector_to_tree(&v).unwrap();
            prop_assert!(t.validate().is_ok());
            prop_assert_eq!(&tree_to_adjacency_vector(&t), &v);
            let again = adjacency_vector_to_tree(&tree_to_adjacency_vector(&t)).unwrap();
            prop_assert_eq!(&again, &t);
            let a = tree_to_adjacency_matrix(&t);
            prop_assert_eq!(&a.transpose(), &a);
            for (i, node) in t.nodes().iter().enumerate() {
                let deg = node.children.len() + usize::from(node.parent.is_some());
                prop_assert_eq!(a.row(i).iter().sum::<f64>() as usize, deg);
            }
            let d = node_depths(&t);
            prop_assert!(d.iter().all(|&x| x < t.num_nodes()));
        }

        #[test]
        fn parser_is_sound(scores in prop::collection::vec(-5.0f64..5.0, 1..=MAX_SENTENCES),
                           shift in -10.0f64..10.0, scale in 0.01f64..100.0) {
            let n = scores.len();
            let t = parse_from_scores(&SplitScores::new(scores.clone())).unwrap();
            prop_assert!(t.validate().is_ok());
            prop_assert!(t.is_binary());
            prop_assert_eq!(t.num_leaves(), n);
            prop_assert_eq!(t.num_nodes(), 2 * n - 1);
            let moved: Vec<f64> = scores.iter().map(|x| x * scale + shift).collect();
            let t2 = parse_from_scores(&SplitScores::new(moved)).unwrap();
            prop_assert_eq!(t2, t.clone());
            let text: SentenceTree = t.to_string().parse().unwrap();
            prop_assert_eq!(text, t);
        }
    }
}
