//! Bit-level CKY over first-order (or zero-order) span scores.
//!
//! Every node of a binary tree carries a `K`-bit code. The score of bit `k`
//! being `+1` at a node is `g_k(node)` and the score of `-1` is zero, so the
//! total code mass of a node factorizes into `Σ_k log(1 + exp g_k)`. The chart
//! sums that mass over all trees (inside), distributes it back (outside), and
//! yields split marginals `μ(l, r, m)` and bit marginals
//! `μ_k(l, r, m, ±1) = μ(l, r, m) · σ(±g_k)`.
//!
//! Complexity is `O(n³ K)` time for the node scores and `O(n³)` for the
//! recursions themselves.

mod brute;
mod tape;

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

pub use brute::{brute_force_log_z, brute_force_marginal, brute_force_max, count_trees, BRUTE_FORCE_MAX_LEN};
pub use tape::{marginals_tape, ChartVars};

use crate::encoder::ScoreTable;
use crate::numeric::{log1p_exp, log_add_exp, log_sum_exp, logistic};
use crate::span::{Span, SpanLayout, Triple};
use crate::tensor::Tensor;

/// Whether a split's score depends on the split position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Order {
    /// `g_k(l, r, m) = s[k][l][r]`, blind to `m`.
    Zero,
    /// `g_k(l, r, m)` = mean of `s[k][i][j]` over `l <= i <= m < j <= r`.
    First,
}

/// A node of a binary tree: a leaf `(l, l)` or a split `(l, r, m)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Leaf(usize),
    Split(Triple),
}

impl Node {
    pub fn span(&self) -> Span {
        match *self {
            Node::Leaf(l) => Span::new(l, l),
            Node::Split(t) => t.span(),
        }
    }

    /// Row in per-node tables.
    pub fn row(&self, layout: &SpanLayout) -> usize {
        match *self {
            Node::Leaf(l) => layout.leaf_row(l),
            Node::Split(t) => layout.triple_row(t.l, t.r, t.m),
        }
    }
}

/// Per-node bit scores `g_k(node, +1)` in [`SpanLayout`] node order.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeScores {
    layout: SpanLayout,
    /// `(n + T) x K`
    g: Tensor,
}

impl NodeScores {
    pub fn new(n: usize, g: Tensor) -> Self {
        let layout = SpanLayout::new(n);
        assert_eq!(g.rows(), layout.num_nodes(), "node score rows do not match n = {n}");
        Self { layout, g }
    }

    pub fn from_table(table: &ScoreTable, order: Order) -> Self {
        let n = table.len();
        let bits = table.bits();
        let layout = SpanLayout::new(n);
        let mut g = Tensor::zeros(layout.num_nodes(), bits);
        for k in 0..bits {
            for l in 0..n {
                g.set(l, k, table.leaf_score(k, l));
            }
            for (t, tr) in layout.triples().iter().enumerate() {
                let v = match order {
                    Order::First => table.first_order_score(k, tr.l, tr.r, tr.m),
                    Order::Zero => table.zero_order_score(k, tr.l, tr.r),
                };
                g.set(n + t, k, v);
            }
        }
        Self { layout, g }
    }

    pub fn first_order(table: &ScoreTable) -> Self {
        Self::from_table(table, Order::First)
    }

    pub fn zero_order(table: &ScoreTable) -> Self {
        Self::from_table(table, Order::Zero)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.g.cols()
    }

    #[inline]
    pub fn layout(&self) -> &SpanLayout {
        &self.layout
    }

    pub fn tensor(&self) -> &Tensor {
        &self.g
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.g
    }

    #[inline]
    pub fn node(&self, node: Node) -> &[f64] {
        self.g.row(node.row(&self.layout))
    }

    #[inline]
    pub fn leaf(&self, l: usize) -> &[f64] {
        self.g.row(l)
    }

    #[inline]
    pub fn split(&self, l: usize, r: usize, m: usize) -> &[f64] {
        self.g.row(self.layout.triple_row(l, r, m))
    }

    /// `Σ_k log(1 + exp g_k)` of one row: the log code mass of a node.
    #[inline]
    pub fn code_mass(&self, row: usize) -> f64 {
        self.g.row(row).iter().map(|&v| log1p_exp(v)).sum()
    }

    /// `Σ_k max(g_k, 0)`: the best code score of a node.
    #[inline]
    pub fn best_code_score(&self, row: usize) -> f64 {
        self.g.row(row).iter().map(|&v| v.max(0.0)).sum()
    }
}

/// Inside values, and optionally outside-derived marginals, of one sentence.
#[derive(Clone, Debug)]
pub struct Chart {
    scores: NodeScores,
    /// `inside[l * n + r]`, `-inf` below the diagonal.
    inside: Vec<f64>,
    log_z: f64,
    marginals: Option<Marginals>,
}

#[derive(Clone, Debug)]
struct Marginals {
    outside: Vec<f64>,
    /// per triple
    split: Vec<f64>,
    /// per leaf: total marginal of the leaf node (1 up to rounding)
    leaf: Vec<f64>,
}

/// Sign of a code bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bit {
    Pos,
    Neg,
}

impl Bit {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Bit::Pos
        } else {
            Bit::Neg
        }
    }
}

impl Chart {
    /// Inside pass only.
    pub fn inside(scores: &NodeScores) -> Chart {
        let n = scores.len();
        assert!(n >= 1, "empty sentence");
        let layout = scores.layout();
        let mut inside = vec![f64::NEG_INFINITY; n * n];
        for l in 0..n {
            inside[l * n + l] = scores.code_mass(l);
        }
        let mut buf = Vec::with_capacity(n);
        for w in 2..=n {
            for l in 0..=n - w {
                let r = l + w - 1;
                let base = layout.span_offset(l, r);
                buf.clear();
                buf.extend(
                    (l..r).map(|m| inside[l * n + m] + inside[(m + 1) * n + r] + scores.code_mass(n + base + m - l)),
                );
                inside[l * n + r] = log_sum_exp(&buf);
            }
        }
        let log_z = inside[n - 1];
        Chart {
            scores: scores.clone(),
            inside,
            log_z,
            marginals: None,
        }
    }

    /// Inside and outside passes; fills every marginal.
    pub fn with_marginals(scores: &NodeScores) -> Chart {
        let mut chart = Chart::inside(scores);
        let n = scores.len();
        let layout = scores.layout();
        let mut outside = vec![f64::NEG_INFINITY; n * n];
        outside[n - 1] = 0.0;
        let mut split = vec![0.0; layout.num_triples()];
        for w in (2..=n).rev() {
            for l in 0..=n - w {
                let r = l + w - 1;
                let beta = outside[l * n + r];
                let base = layout.span_offset(l, r);
                for m in l..r {
                    let t = base + m - l;
                    let term = beta + scores.code_mass(n + t);
                    let left = chart.inside[l * n + m];
                    let right = chart.inside[(m + 1) * n + r];
                    outside[l * n + m] = log_add_exp(outside[l * n + m], term + right);
                    outside[(m + 1) * n + r] = log_add_exp(outside[(m + 1) * n + r], term + left);
                    split[t] = (term + left + right - chart.log_z).exp();
                }
            }
        }
        let leaf = (0..n)
            .map(|l| (outside[l * n + l] + chart.inside[l * n + l] - chart.log_z).exp())
            .collect();
        chart.marginals = Some(Marginals { outside, split, leaf });
        chart
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.scores.bits()
    }

    pub fn scores(&self) -> &NodeScores {
        &self.scores
    }

    pub fn layout(&self) -> &SpanLayout {
        self.scores.layout()
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// `G(l, r)`: log of the total mass of all subtrees over `(l, r)`.
    pub fn inside_value(&self, l: usize, r: usize) -> f64 {
        self.inside[l * self.len() + r]
    }

    fn marg(&self) -> &Marginals {
        self.marginals
            .as_ref()
            .expect("marginals requested from an inside-only chart")
    }

    pub fn has_marginals(&self) -> bool {
        self.marginals.is_some()
    }

    pub fn outside_value(&self, l: usize, r: usize) -> f64 {
        self.marg().outside[l * self.len() + r]
    }

    /// `μ(l, r, m)`: probability that a tree contains this split.
    pub fn split_marginal(&self, l: usize, r: usize, m: usize) -> f64 {
        self.marg().split[self.layout().triple_index(l, r, m)]
    }

    pub fn split_marginals(&self) -> &[f64] {
        &self.marg().split
    }

    /// Total marginal of the leaf `(l, l)`.
    pub fn leaf_marginal(&self, l: usize) -> f64 {
        self.marg().leaf[l]
    }

    /// Marginal of the whole node (not yet split by bit value).
    pub fn node_marginal(&self, node: Node) -> f64 {
        match node {
            Node::Leaf(l) => self.leaf_marginal(l),
            Node::Split(t) => self.split_marginal(t.l, t.r, t.m),
        }
    }

    /// `μ_k(node, ±1) = μ(node) · σ(±g_k(node))`.
    pub fn bit_marginal(&self, node: Node, k: usize, bit: Bit) -> f64 {
        let g = self.scores.node(node)[k];
        let p = match bit {
            Bit::Pos => logistic(g),
            Bit::Neg => logistic(-g),
        };
        self.node_marginal(node) * p
    }

    /// All split triples in layout order.
    pub fn triples(&self) -> &[Triple] {
        self.layout().triples()
    }

    /// Plain-text dump: inside values, then the ten largest split marginals of
    /// each span.
    pub fn dump(&self, words: &[&str]) -> String {
        let n = self.len();
        let mut out = String::new();
        let _ = writeln!(out, "n = {n}  K = {}  logZ = {:.6}", self.bits(), self.log_z);
        let _ = writeln!(out, "inside:");
        for l in 0..n {
            let _ = write!(out, "{:>12}", words.get(l).copied().unwrap_or(""));
            for r in 0..n {
                if r < l {
                    let _ = write!(out, " {:>10}", ".");
                } else {
                    let _ = write!(out, " {:>10.4}", self.inside_value(l, r));
                }
            }
            out.push('\n');
        }
        if self.has_marginals() && n >= 2 {
            let _ = writeln!(out, "split marginals:");
            for w in 2..=n {
                for l in 0..=n - w {
                    let r = l + w - 1;
                    let mut splits: Vec<(usize, f64)> = (l..r).map(|m| (m, self.split_marginal(l, r, m))).collect();
                    splits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    let _ = write!(out, "  ({l},{r})");
                    for (m, p) in splits.into_iter().take(10) {
                        let _ = write!(out, " m={m}:{p:.4}");
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Inside pass over first-order scores.
pub fn inside_first(table: &ScoreTable) -> Chart {
    Chart::inside(&NodeScores::first_order(table))
}

/// Inside pass over zero-order scores.
pub fn inside_zero(table: &ScoreTable) -> Chart {
    Chart::inside(&NodeScores::zero_order(table))
}

/// Inside and outside passes.
pub fn marginals(table: &ScoreTable, order: Order) -> Chart {
    Chart::with_marginals(&NodeScores::from_table(table, order))
}

// ---------------------------------------------------------------------------
// trees

/// `K`-bit code; `true` is `+1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Code(pub Vec<bool>);

impl Code {
    pub fn from_signs(signs: &[i8]) -> Self {
        Code(signs.iter().map(|&s| s > 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `+1.0` or `-1.0`
    pub fn sign(&self, k: usize) -> f64 {
        if self.0[k] {
            1.0
        } else {
            -1.0
        }
    }

    pub fn negated(&self) -> Code {
        Code(self.0.iter().map(|b| !b).collect())
    }

    /// Uppercase hexadecimal with bit 0 as the most significant bit,
    /// left-padded to `⌈K/4⌉` digits.
    pub fn to_hex(&self) -> String {
        let k = self.0.len();
        let digits = k.div_ceil(4);
        let pad = digits * 4 - k;
        let bits: Vec<bool> = std::iter::repeat_n(false, pad).chain(self.0.iter().copied()).collect();
        bits.chunks(4)
            .map(|nib| {
                let v = nib.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
                char::from_digit(v, 16).unwrap().to_ascii_uppercase()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub l: usize,
    pub r: usize,
    /// `None` for leaves.
    pub split: Option<usize>,
    pub code: Code,
}

impl TreeNode {
    pub fn span(&self) -> Span {
        Span::new(self.l, self.r)
    }

    pub fn node(&self) -> Node {
        match self.split {
            None => Node::Leaf(self.l),
            Some(m) => Node::Split(Triple::new(self.l, self.r, m)),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }
}

/// Full binary bracketing with `2n - 1` nodes in pre-order (root first).
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryTree {
    pub n: usize,
    pub nodes: Vec<TreeNode>,
    pub score: f64,
}

/// Output rendering for [`BinaryTree::render`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TreeFormat {
    /// `(T (T (X w1) (X w2)) (X w3))`-style placeholder-labeled brackets.
    Brackets,
    /// Every node labeled with its hexadecimal code.
    Codes,
}

impl BinaryTree {
    /// Builds a tree from a split chooser `split(l, r) -> m`; codes are empty.
    pub fn from_splits(n: usize, mut split: impl FnMut(usize, usize) -> usize) -> Self {
        assert!(n >= 1);
        let mut nodes = Vec::with_capacity(2 * n - 1);
        let mut stack = vec![(0, n - 1)];
        while let Some((l, r)) = stack.pop() {
            if l == r {
                nodes.push(TreeNode {
                    l,
                    r,
                    split: None,
                    code: Code::default(),
                });
            } else {
                let m = split(l, r);
                nodes.push(TreeNode {
                    l,
                    r,
                    split: Some(m),
                    code: Code::default(),
                });
                stack.push((m + 1, r));
                stack.push((l, m));
            }
        }
        BinaryTree { n, nodes, score: 0.0 }
    }

    /// `((w1 w2) w3) ...`
    pub fn left_branching(n: usize) -> Self {
        Self::from_splits(n, |_, r| r - 1)
    }

    /// `w1 (w2 (w3 ...))`
    pub fn right_branching(n: usize) -> Self {
        Self::from_splits(n, |l, _| l)
    }

    /// Every node's span, leaves included.
    pub fn spans(&self) -> BTreeSet<Span> {
        self.nodes.iter().map(TreeNode::span).collect()
    }

    pub fn is_right_branching(&self) -> bool {
        self.nodes.iter().all(|nd| nd.split.is_none_or(|m| m == nd.l))
    }

    pub fn render(&self, words: &[&str], format: TreeFormat) -> String {
        let mut out = String::new();
        let mut i = 0;
        self.render_node(words, format, &mut i, &mut out);
        out
    }

    fn render_node(&self, words: &[&str], format: TreeFormat, i: &mut usize, out: &mut String) {
        let node = &self.nodes[*i];
        *i += 1;
        let label = match format {
            TreeFormat::Brackets => "T".to_string(),
            TreeFormat::Codes => node.code.to_hex(),
        };
        match node.split {
            None => match format {
                TreeFormat::Brackets => {
                    let _ = write!(out, "({label} (X {}))", words[node.l]);
                }
                TreeFormat::Codes => {
                    let _ = write!(out, "({label} {})", words[node.l]);
                }
            },
            Some(_) => {
                let _ = write!(out, "({label} ");
                self.render_node(words, format, i, out);
                out.push(' ');
                self.render_node(words, format, i, out);
                out.push(')');
            }
        }
    }
}

impl fmt::Display for BinaryTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<String> = (0..self.n).map(|i| format!("w{i}")).collect();
        let words: Vec<&str> = words.iter().map(String::as_str).collect();
        f.write_str(&self.render(&words, TreeFormat::Codes))
    }
}

/// Max-sum decoding. Each node contributes `Σ_k max(g_k, 0)` and takes code
/// bit `+1` iff `g_k > 0`; split ties go to the smallest `m`.
pub fn viterbi_nodes(scores: &NodeScores) -> BinaryTree {
    let n = scores.len();
    assert!(n >= 1, "empty sentence");
    let layout = scores.layout();
    let mut best = vec![f64::NEG_INFINITY; n * n];
    let mut arg = vec![usize::MAX; n * n];
    for l in 0..n {
        best[l * n + l] = scores.best_code_score(l);
    }
    for w in 2..=n {
        for l in 0..=n - w {
            let r = l + w - 1;
            let base = layout.span_offset(l, r);
            for m in l..r {
                let v = best[l * n + m] + best[(m + 1) * n + r] + scores.best_code_score(n + base + m - l);
                if v > best[l * n + r] {
                    best[l * n + r] = v;
                    arg[l * n + r] = m;
                }
            }
        }
    }
    let mut tree = BinaryTree::from_splits(n, |l, r| arg[l * n + r]);
    for node in &mut tree.nodes {
        let g = scores.node(node.node());
        node.code = Code(g.iter().map(|&v| v > 0.0).collect());
    }
    tree.score = best[n - 1];
    tree
}

pub fn viterbi(table: &ScoreTable, order: Order) -> BinaryTree {
    viterbi_nodes(&NodeScores::from_table(table, order))
}

/// Sum of the parts of a decoded tree: `Σ_nodes Σ_k [c_k = +1] g_k`.
pub fn tree_score(scores: &NodeScores, tree: &BinaryTree) -> f64 {
    tree.nodes
        .iter()
        .map(|nd| {
            scores
                .node(nd.node())
                .iter()
                .zip(&nd.code.0)
                .map(|(&g, &b)| if b { g } else { 0.0 })
                .sum::<f64>()
        })
        .sum()
}

#[cfg(test)]
mod tests;
