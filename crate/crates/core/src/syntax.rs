//! Constituency parses as graphs.
//!
//! A Penn-bracketed parse is read into a [`ParseTree`], its word leaves are
//! removed so part-of-speech nodes become the leaves, and the remaining
//! tree is turned into an undirected [`SyntaxGraph`] for message passing.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Phrase or part-of-speech label.
    Constituent,
    /// Surface word.
    Word,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub label: String,
    pub kind: NodeKind,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
}

/// Rooted ordered tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    nodes: Vec<TreeNode>,
}

impl ParseTree {
    pub fn new(root_label: &str) -> Self {
        ParseTree {
            nodes: vec![TreeNode {
                label: root_label.to_string(),
                kind: NodeKind::Constituent,
                children: Vec::new(),
                parent: None,
            }],
        }
    }

    pub fn add_child(&mut self, parent: usize, label: &str, kind: NodeKind) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            label: label.to_string(),
            kind,
            children: Vec::new(),
            parent: Some(parent),
        });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn words(&self) -> Vec<&str> {
        self.preorder()
            .into_iter()
            .filter(|&i| self.nodes[i].kind == NodeKind::Word)
            .map(|i| self.nodes[i].label.as_str())
            .collect()
    }

    pub fn word_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Word).count()
    }

    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.nodes[n].children.iter().rev());
        }
        out
    }

    /// Longest root-to-leaf path, in edges.
    pub fn height(&self) -> usize {
        fn go(t: &ParseTree, n: usize) -> usize {
            t.nodes[n]
                .children
                .iter()
                .map(|&c| 1 + go(t, c))
                .max()
                .unwrap_or(0)
        }
        go(self, 0)
    }

    /// Bracketed form, e.g. `(S (NP (DT the)) (VP (VBD sat)))`.
    pub fn to_penn(&self) -> String {
        fn go(t: &ParseTree, n: usize, out: &mut String) {
            let node = &t.nodes[n];
            if node.kind == NodeKind::Word {
                out.push_str(&node.label);
                return;
            }
            out.push('(');
            out.push_str(&node.label);
            for &c in &node.children {
                out.push(' ');
                go(t, c, out);
            }
            out.push(')');
        }
        let mut s = String::new();
        go(self, 0, &mut s);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn tokenize(text: &str) -> Vec<(usize, Token<'_>)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                out.push((i, Token::Open));
                i += 1;
            }
            b')' => {
                out.push((i, Token::Close));
                i += 1;
            }
            b if b.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len()
                    && !matches!(bytes[i], b'(' | b')')
                    && !bytes[i].is_ascii_whitespace()
                {
                    i += 1;
                }
                out.push((start, Token::Atom(&text[start..i])));
            }
        }
    }
    out
}

/// Read a Penn-bracketed parse. A label-less outer wrapper around a single
/// tree, as in treebank files (`( (S ...) )`), is dropped.
pub fn parse_penn(text: &str) -> Result<ParseTree> {
    let tokens = tokenize(text);
    let end = text.len();
    let err = |offset: usize, message: &str| Error::Parse {
        offset,
        message: message.to_string(),
    };
    if tokens.is_empty() {
        return Err(err(0, "empty input"));
    }

    // Bracket nesting is read into a nested intermediate first so that the
    // label-less wrapper can be unwrapped before building the arena.
    enum Raw<'a> {
        Word(&'a str),
        Node {
            label: Option<&'a str>,
            children: Vec<Raw<'a>>,
        },
    }

    fn read<'a>(
        tokens: &[(usize, Token<'a>)],
        pos: &mut usize,
        end: usize,
    ) -> Result<Raw<'a>> {
        let (off, tok) = tokens.get(*pos).cloned().ok_or(Error::Parse {
            offset: end,
            message: "unexpected end of input".into(),
        })?;
        if tok != Token::Open {
            return Err(Error::Parse {
                offset: off,
                message: "expected `(`".into(),
            });
        }
        *pos += 1;
        let label = match tokens.get(*pos) {
            Some((_, Token::Atom(a))) => {
                *pos += 1;
                Some(*a)
            }
            _ => None,
        };
        let mut children = Vec::new();
        loop {
            match tokens.get(*pos).cloned() {
                None => {
                    return Err(Error::Parse {
                        offset: end,
                        message: "unexpected end of input".into(),
                    })
                }
                Some((_, Token::Close)) => {
                    *pos += 1;
                    break;
                }
                Some((_, Token::Atom(a))) => {
                    *pos += 1;
                    children.push(Raw::Word(a));
                }
                Some((_, Token::Open)) => children.push(read(tokens, pos, end)?),
            }
        }
        Ok(Raw::Node { label, children })
    }

    let mut pos = 0;
    let mut raw = read(&tokens, &mut pos, end)?;
    if let Some((off, _)) = tokens.get(pos) {
        return Err(err(*off, "trailing input after tree"));
    }

    if let Raw::Node {
        label: None,
        children,
    } = &mut raw
    {
        if children.len() == 1 && matches!(children[0], Raw::Node { label: Some(_), .. }) {
            raw = children.pop().expect("one child");
        } else {
            return Err(err(tokens[0].0, "missing label"));
        }
    }

    fn build(raw: &Raw<'_>, tree: &mut ParseTree, parent: usize, open: usize) -> Result<()> {
        match raw {
            Raw::Word(w) => {
                tree.add_child(parent, w, NodeKind::Word);
            }
            Raw::Node { label, children } => {
                let label = label.ok_or(Error::Parse {
                    offset: open,
                    message: "missing label".into(),
                })?;
                let id = tree.add_child(parent, label, NodeKind::Constituent);
                for c in children {
                    build(c, tree, id, open)?;
                }
            }
        }
        Ok(())
    }

    let Raw::Node {
        label: Some(root_label),
        children,
    } = &raw
    else {
        return Err(err(0, "missing label"));
    };
    let mut tree = ParseTree::new(root_label);
    for c in children {
        build(c, &mut tree, 0, tokens[0].0)?;
    }
    Ok(tree)
}

/// Drop word leaves; their part-of-speech parents become leaves.
pub fn strip_words(tree: &ParseTree) -> ParseTree {
    fn copy(src: &ParseTree, n: usize, dst: &mut ParseTree, parent: usize) {
        for &c in &src.nodes[n].children {
            let child = &src.nodes[c];
            if child.kind == NodeKind::Word {
                continue;
            }
            let id = dst.add_child(parent, &child.label, NodeKind::Constituent);
            copy(src, c, dst, id);
        }
    }
    let mut out = ParseTree::new(&tree.nodes[0].label);
    copy(tree, 0, &mut out, 0);
    out
}

/// Undirected tree graph with the ordering information of its source tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxGraph {
    labels: Vec<String>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    adjacency: Vec<Vec<usize>>,
    root: usize,
    leaf_order: Vec<usize>,
}

impl SyntaxGraph {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, n: usize) -> &str {
        &self.labels[n]
    }

    /// Neighbours of `n`: parent first (if any), then children in order.
    pub fn neighbors(&self, n: usize) -> &[usize] {
        &self.adjacency[n]
    }

    pub fn children(&self, n: usize) -> &[usize] {
        &self.children[n]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_leaf(&self, n: usize) -> bool {
        self.children[n].is_empty()
    }

    /// Leaf indices in depth-first order, as recorded at construction.
    pub fn leaf_order(&self) -> &[usize] {
        &self.leaf_order
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency
            .iter()
            .enumerate()
            .all(|(i, ns)| ns.iter().all(|&j| self.adjacency[j].contains(&i)))
    }

    /// Relabel node `i` as `perm[i]`, keeping every neighbour list in its
    /// original order.
    pub fn permuted(&self, perm: &[usize]) -> Result<SyntaxGraph> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Structure("not a permutation of the node ids".into()));
        }
        let mut labels = vec![String::new(); n];
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut adjacency = vec![Vec::new(); n];
        for old in 0..n {
            let new = perm[old];
            labels[new] = self.labels[old].clone();
            parent[new] = self.parent[old].map(|p| perm[p]);
            children[new] = self.children[old].iter().map(|&c| perm[c]).collect();
            adjacency[new] = self.adjacency[old].iter().map(|&c| perm[c]).collect();
        }
        Ok(SyntaxGraph {
            labels,
            parent,
            children,
            adjacency,
            root: perm[self.root],
            leaf_order: self.leaf_order.iter().map(|&l| perm[l]).collect(),
        })
    }
}

/// One node per tree node (preorder ids, root = 0), one undirected edge per
/// parent–child link.
pub fn tree_to_graph(tree: &ParseTree) -> SyntaxGraph {
    let order = tree.preorder();
    let mut id = vec![0; tree.len()];
    for (new, &old) in order.iter().enumerate() {
        id[old] = new;
    }
    let n = tree.len();
    let mut labels = vec![String::new(); n];
    let mut parent = vec![None; n];
    let mut children = vec![Vec::new(); n];
    for &old in &order {
        let node = tree.node(old);
        let new = id[old];
        labels[new] = node.label.clone();
        parent[new] = node.parent.map(|p| id[p]);
        children[new] = node.children.iter().map(|&c| id[c]).collect();
    }
    let adjacency = (0..n)
        .map(|i| parent[i].into_iter().chain(children[i].iter().copied()).collect())
        .collect();
    let mut graph = SyntaxGraph {
        labels,
        parent,
        children,
        adjacency,
        root: 0,
        leaf_order: Vec::new(),
    };
    graph.leaf_order = dfs_leaf_order(&graph);
    graph
}

/// Leaves in depth-first, left-to-right order from the root.
pub fn dfs_leaf_order(graph: &SyntaxGraph) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![graph.root];
    while let Some(n) = stack.pop() {
        if graph.children[n].is_empty() {
            out.push(n);
        }
        stack.extend(graph.children[n].iter().rev());
    }
    out
}

fn bfs_eccentricity(graph: &SyntaxGraph, start: usize) -> Result<usize> {
    let mut dist = vec![usize::MAX; graph.len()];
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    let mut far = 0;
    let mut reached = 1;
    while let Some(n) = queue.pop_front() {
        for &m in graph.neighbors(n) {
            if dist[m] == usize::MAX {
                dist[m] = dist[n] + 1;
                far = far.max(dist[m]);
                reached += 1;
                queue.push_back(m);
            }
        }
    }
    if reached != graph.len() {
        return Err(Error::Structure(format!(
            "graph is disconnected: {reached} of {} nodes reachable",
            graph.len()
        )));
    }
    Ok(far)
}

/// Longest shortest path over all node pairs (BFS from every node).
pub fn graph_diameter(graph: &SyntaxGraph) -> Result<usize> {
    let mut best = 0;
    for n in 0..graph.len() {
        best = best.max(bfs_eccentricity(graph, n)?);
    }
    Ok(best)
}

/// Nearest-rank 75th percentile of the diameters, at least 1.
pub fn message_pass_count(diameters: &[usize]) -> Result<usize> {
    if diameters.is_empty() {
        return Err(Error::Config(
            "message pass count needs at least one diameter".into(),
        ));
    }
    let mut sorted = diameters.to_vec();
    sorted.sort_unstable();
    let rank = (3 * sorted.len()).div_ceil(4);
    Ok(sorted[rank.max(1) - 1].max(1))
}

/// Constituent/part-of-speech label ids; id 0 is reserved for unseen labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelVocab {
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for LabelVocab {
    fn from(labels: Vec<String>) -> Self {
        LabelVocab::from_labels(labels)
    }
}

impl From<LabelVocab> for Vec<String> {
    fn from(vocab: LabelVocab) -> Self {
        vocab.labels
    }
}

pub const UNK_LABEL: &str = "<unk>";

impl LabelVocab {
    pub fn build<'a>(graphs: impl IntoIterator<Item = &'a SyntaxGraph>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for g in graphs {
            set.extend(g.labels().iter().cloned());
        }
        let labels = std::iter::once(UNK_LABEL.to_string()).chain(set).collect();
        Self::from_labels(labels)
    }

    pub fn from_labels(labels: Vec<String>) -> Self {
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        LabelVocab { labels, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, label: &str) -> usize {
        self.index.get(label).copied().unwrap_or(0)
    }

    pub fn ids(&self, graph: &SyntaxGraph) -> Vec<usize> {
        graph.labels().iter().map(|l| self.id(l)).collect()
    }
}

/// Parse, strip and convert in one go.
pub fn graph_from_penn(text: &str) -> Result<SyntaxGraph> {
    Ok(tree_to_graph(&strip_words(&parse_penn(text)?)))
}
