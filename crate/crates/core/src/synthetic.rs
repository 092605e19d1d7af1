//! Probabilistic context-free grammar sampler used to build synthetic
//! treebanks with known constituency structure.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::treebank::{parse_sexpr, Sentence};

/// The committed grammar behind the synthetic fixtures.
pub const DEFAULT_GRAMMAR: &str = include_str!("../tests/fixtures/synthetic.grammar");

/// Nesting depth beyond which a derivation is abandoned and resampled.
pub const MAX_DEPTH: usize = 12;

#[derive(Clone, Debug)]
struct Rules {
    rhs: Vec<Vec<String>>,
    dist: WeightedIndex<f64>,
}

#[derive(Clone, Debug)]
pub struct Grammar {
    start: String,
    rules: BTreeMap<String, Rules>,
}

impl Grammar {
    /// Parses `LHS -> SYM... weight` lines; `#` starts a comment. The first
    /// left-hand side is the start symbol. A symbol with no rules of its own is
    /// a word.
    pub fn parse(text: &str) -> Result<Self> {
        let mut start = None;
        let mut raw: BTreeMap<String, (Vec<Vec<String>>, Vec<f64>)> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Config(format!("grammar line {}: {msg}", i + 1));
            let (lhs, rest) = line.split_once("->").ok_or_else(|| bad("expected `->`"))?;
            let lhs = lhs.trim().to_string();
            let mut symbols: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
            let weight: f64 = symbols
                .pop()
                .and_then(|w| w.parse().ok())
                .filter(|w: &f64| *w > 0.0 && w.is_finite())
                .ok_or_else(|| bad("missing positive weight"))?;
            if lhs.is_empty() || symbols.is_empty() {
                return Err(bad("empty rule"));
            }
            start.get_or_insert_with(|| lhs.clone());
            let entry = raw.entry(lhs).or_default();
            entry.0.push(symbols);
            entry.1.push(weight);
        }
        let start = start.ok_or_else(|| Error::Config("empty grammar".into()))?;
        let rules = raw
            .into_iter()
            .map(|(lhs, (rhs, weights))| {
                let dist = WeightedIndex::new(weights).expect("weights validated");
                (lhs, Rules { rhs, dist })
            })
            .collect();
        Ok(Self { start, rules })
    }

    /// Symbols whose rules all rewrite to single words.
    pub fn preterminals(&self) -> Vec<&str> {
        self.rules
            .iter()
            .filter(|(_, r)| {
                r.rhs
                    .iter()
                    .all(|rhs| rhs.len() == 1 && !self.rules.contains_key(&rhs[0]))
            })
            .map(|(lhs, _)| lhs.as_str())
            .collect()
    }

    /// Phrase categories: symbols with rules that are not preterminals.
    pub fn nonterminals(&self) -> Vec<&str> {
        let pre = self.preterminals();
        self.rules
            .keys()
            .map(String::as_str)
            .filter(|s| !pre.contains(s))
            .collect()
    }

    fn expand(&self, symbol: &str, depth: usize, rng: &mut ChaCha8Rng, out: &mut String, words: &mut usize) -> bool {
        let Some(rules) = self.rules.get(symbol) else {
            out.push_str(symbol);
            *words += 1;
            return true;
        };
        if depth > MAX_DEPTH {
            return false;
        }
        let rhs = &rules.rhs[rules.dist.sample(rng)];
        let _ = write!(out, "({symbol}");
        for child in rhs {
            out.push(' ');
            if !self.expand(child, depth + 1, rng, out, words) {
                return false;
            }
        }
        out.push(')');
        true
    }

    /// One bracketed derivation with `min_len..=max_len` words.
    pub fn sample_sexpr(&self, min_len: usize, max_len: usize, rng: &mut ChaCha8Rng) -> String {
        loop {
            let mut out = String::new();
            let mut words = 0;
            if self.expand(&self.start, 0, rng, &mut out, &mut words) && (min_len..=max_len).contains(&words) {
                return out;
            }
        }
    }

    /// `count` derivations, one per line.
    pub fn sample_text(&self, count: usize, min_len: usize, max_len: usize, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| self.sample_sexpr(min_len, max_len, &mut rng) + "\n")
            .collect()
    }

    pub fn sample_corpus(&self, count: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<Sentence> {
        parse_sexpr(&self.sample_text(count, min_len, max_len, seed)).expect("sampled trees are well formed")
    }
}

/// One split of the committed synthetic treebank.
#[derive(Clone, Copy, Debug)]
pub struct Split {
    pub name: &'static str,
    pub count: usize,
    pub seed: u64,
}

/// Splits of the committed synthetic treebank, all with 2 to 20 words.
pub const SPLITS: [Split; 3] = [
    Split {
        name: "train",
        count: 800,
        seed: 101,
    },
    Split {
        name: "dev",
        count: 100,
        seed: 202,
    },
    Split {
        name: "test",
        count: 200,
        seed: 303,
    },
];
pub const MIN_LEN: usize = 2;
pub const MAX_LEN: usize = 20;
