//! Unlabeled sentence-level F1 and the left, right, and oracle baselines.
//!
//! Single-word spans and the whole-sentence span are removed from both sides
//! before scoring; a sentence whose filtered sets are both empty scores 1.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::chart::{viterbi, BinaryTree, Order};
use crate::encoder::{encode, zero_order_scores, EncoderParams};
use crate::span::Span;
use crate::treebank::{Corpus, GoldTree};

/// Reference corpus-mean F1 (percent) of the baselines on the English Penn
/// Treebank test set.
pub const PTB_LEFT_BRANCHING: f64 = 8.7;
pub const PTB_RIGHT_BRANCHING: f64 = 39.5;
pub const PTB_ORACLE: f64 = 84.3;

/// Sentences up to this length get the exact oracle dynamic program.
pub const ORACLE_DP_MAX_LEN: usize = 40;

fn nontrivial(spans: &BTreeSet<Span>, n: usize) -> BTreeSet<Span> {
    spans
        .iter()
        .filter(|s| s.width() > 1 && !(s.l == 0 && s.r + 1 == n))
        .copied()
        .collect()
}

/// F1 between predicted and gold span sets of a length-`n` sentence.
pub fn sentence_f1(pred: &BTreeSet<Span>, gold: &BTreeSet<Span>, n: usize) -> f64 {
    let p = nontrivial(pred, n);
    let g = nontrivial(gold, n);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hits = p.intersection(&g).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let precision = hits / p.len() as f64;
    let recall = hits / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Per-sentence F1 scores of one system over one corpus split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct F1Report {
    pub scores: Vec<f64>,
}

impl F1Report {
    pub fn new(scores: Vec<f64>) -> Self {
        Self { scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Arithmetic mean over sentences; 0 for an empty report.
    pub fn mean(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    pub fn median(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        let mut sorted = self.scores.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        if sorted.len().is_multiple_of(2) {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        } else {
            sorted[mid]
        }
    }

    /// Max of several runs' corpus means (the multi-seed "max" figure).
    pub fn max_over_runs(reports: &[F1Report]) -> f64 {
        reports.iter().map(F1Report::mean).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Tab-separated per-sentence rows followed by a summary block.
    pub fn to_tsv(&self, baselines: Option<&Baselines>) -> String {
        let mut out = String::from("sentence\tf1\n");
        for (i, f1) in self.scores.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{f1:.6}");
        }
        let _ = writeln!(out, "# mean\t{:.2}", self.mean() * 100.0);
        let _ = writeln!(out, "# median\t{:.2}", self.median() * 100.0);
        if let Some(b) = baselines {
            for (name, report) in b.named() {
                let _ = writeln!(
                    out,
                    "# {name}\t{:.2}\tdelta\t{:+.2}",
                    report.mean() * 100.0,
                    (self.mean() - report.mean()) * 100.0
                );
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Baselines {
    pub left: F1Report,
    pub right: F1Report,
    pub oracle: F1Report,
}

impl Baselines {
    pub fn named(&self) -> [(&'static str, &F1Report); 3] {
        [
            ("left_branching", &self.left),
            ("right_branching", &self.right),
            ("oracle", &self.oracle),
        ]
    }
}

/// Best F1 any binary tree can reach against `gold`.
pub fn oracle_f1(gold: &GoldTree) -> f64 {
    let tree = oracle_tree(gold);
    sentence_f1(&tree.spans(), &gold.spans, gold.n)
}

/// A binary tree of maximal F1 against `gold`: exact dynamic programming over
/// gold-compatible brackets for short sentences, right-factored binarization of
/// the gold tree otherwise.
pub fn oracle_tree(gold: &GoldTree) -> BinaryTree {
    let n = gold.n;
    if n <= ORACLE_DP_MAX_LEN {
        // A binary tree always has n - 2 non-trivial spans, so F1 is maximized
        // by maximizing the number of gold spans it contains.
        let hit = |l: usize, r: usize| -> usize {
            let s = Span::new(l, r);
            (s.width() > 1 && !(l == 0 && r + 1 == n) && gold.spans.contains(&s)) as usize
        };
        let mut best = vec![0usize; n * n];
        let mut arg = vec![0usize; n * n];
        for w in 2..=n {
            for l in 0..=n - w {
                let r = l + w - 1;
                let (m, v) = (l..r)
                    .map(|m| (m, best[l * n + m] + best[(m + 1) * n + r]))
                    .fold((l, 0), |acc, x| if x.1 > acc.1 { x } else { acc });
                best[l * n + r] = v + hit(l, r);
                arg[l * n + r] = m;
            }
        }
        BinaryTree::from_splits(n, |l, r| arg[l * n + r])
    } else {
        right_factored(gold)
    }
}

/// Binarizes a well-nested gold tree by attaching each node's children from
/// the right: `(c1 (c2 (... ck)))`.
pub fn right_factored(gold: &GoldTree) -> BinaryTree {
    BinaryTree::from_splits(gold.n, |l, r| {
        gold.spans
            .range(Span::new(l, l)..Span::new(l, r))
            .map(|s| s.r)
            .max()
            .unwrap_or(l)
    })
}

/// Left-branching, right-branching and oracle F1 over every sentence.
pub fn baselines(corpus: &Corpus) -> Baselines {
    let score = |tree: &dyn Fn(&GoldTree) -> BinaryTree| {
        F1Report::new(
            corpus
                .sentences
                .iter()
                .map(|s| sentence_f1(&tree(&s.gold).spans(), &s.gold.spans, s.len()))
                .collect(),
        )
    };
    Baselines {
        left: score(&|g| BinaryTree::left_branching(g.n)),
        right: score(&|g| BinaryTree::right_branching(g.n)),
        oracle: F1Report::new(corpus.sentences.iter().map(|s| oracle_f1(&s.gold)).collect()),
    }
}

/// First-order Viterbi tree without masking or dropout.
pub fn decode(params: &EncoderParams, ids: &[u32]) -> BinaryTree {
    let mut clean = params.clone();
    clean.dropout = 0.0;
    decode_clean(&clean, ids)
}

fn decode_clean(params: &EncoderParams, ids: &[u32]) -> BinaryTree {
    let h = encode(ids, params, 0).expect("parameters checked finite");
    viterbi(&zero_order_scores(&h.h, params), Order::First)
}

/// Decodes every sentence (in parallel) and scores it against gold.
pub fn evaluate(params: &EncoderParams, corpus: &Corpus) -> F1Report {
    let mut clean = params.clone();
    clean.dropout = 0.0;
    if clean.check_finite().is_err() {
        return F1Report::new(vec![0.0; corpus.len()]);
    }
    let scores = corpus
        .sentences
        .par_iter()
        .map(|s| {
            let tree = decode_clean(&clean, &s.ids());
            sentence_f1(&tree.spans(), &s.gold.spans, s.len())
        })
        .collect();
    F1Report::new(scores)
}
