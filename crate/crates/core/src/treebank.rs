//! Bracketed treebank ingest, punctuation stripping, masking, and batching.
//!
//! Gold spans are stored 0-based and inclusive, like everything else in the
//! crate. Preterminal brackets `(TAG word)` become tokens; every other bracket
//! becomes an unlabeled span, so unary chains collapse to a single span.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::span::Span;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    /// Gold part-of-speech tag, empty if absent.
    pub pos: String,
    pub id: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldTree {
    pub n: usize,
    pub spans: BTreeSet<Span>,
}

impl GoldTree {
    /// True when no two spans partially overlap and all lie inside the sentence.
    pub fn is_well_nested(&self) -> bool {
        if self.spans.iter().any(|s| s.r >= self.n) {
            return false;
        }
        let spans: Vec<_> = self.spans.iter().collect();
        for (i, a) in spans.iter().enumerate() {
            for b in &spans[i + 1..] {
                let crossing = (a.l < b.l && b.l <= a.r && a.r < b.r) || (b.l < a.l && a.l <= b.r && b.r < a.r);
                if crossing {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub gold: GoldTree,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn words(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }
}

/// Word-level vocabulary with reserved `[MASK]` and `[UNK]` entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const MASK: u32 = 0;
    pub const UNK: u32 = 1;

    pub fn new() -> Self {
        Self::from_words(Vec::new())
    }

    /// Builds from a word list that does not include the reserved entries.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut vocab = Vocab {
            words: vec!["[MASK]".to_string(), "[UNK]".to_string()],
            index: HashMap::new(),
        };
        for w in words {
            vocab.insert(&w);
        }
        vocab
    }

    /// Collects words in order of first occurrence.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let mut vocab = Vocab::new();
        for s in sentences {
            for t in &s.tokens {
                vocab.insert(&t.surface);
            }
        }
        vocab
    }

    fn insert(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(Self::UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Entries after the reserved ones.
    pub fn user_words(&self) -> &[String] {
        &self.words[2..]
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub vocab: Vocab,
}

impl Corpus {
    /// Assigns ids from `vocab`; unknown words map to `[UNK]`.
    pub fn new(mut sentences: Vec<Sentence>, vocab: Vocab) -> Self {
        for s in &mut sentences {
            for t in &mut s.tokens {
                t.id = vocab.id(&t.surface);
            }
        }
        Self { sentences, vocab }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sentences.iter().map(Sentence::len).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IngestConfig {
    pub punctuation: BTreeSet<String>,
    pub strip_punctuation: bool,
}

/// Tags removed before training and evaluation.
pub const DEFAULT_PUNCTUATION: &[&str] = &["``", "''", ".", ",", ":", "-LRB-", "-RRB-", "#", "$", "-NONE-"];

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            punctuation: DEFAULT_PUNCTUATION.iter().map(|s| s.to_string()).collect(),
            strip_punctuation: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub splits: Vec<(String, usize)>,
    pub discarded: usize,
    pub vocab_size: usize,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, count) in &self.splits {
            writeln!(f, "{name}: {count} sentences")?;
        }
        writeln!(f, "discarded: {}", self.discarded)?;
        write!(f, "vocabulary: {}", self.vocab_size)
    }
}

/// Parses and preprocesses one split. Returns the kept sentences (ids not yet
/// assigned) and the number of discarded ones.
pub fn ingest_text(text: &str, config: &IngestConfig) -> Result<(Vec<Sentence>, usize)> {
    let mut kept = Vec::new();
    let mut discarded = 0;
    for sent in parse_sexpr(text)? {
        let sent = if config.strip_punctuation {
            strip_punctuation(&sent, &config.punctuation)
        } else {
            Some(sent)
        };
        match sent {
            Some(s) => kept.push(s),
            None => discarded += 1,
        }
    }
    Ok((kept, discarded))
}

// ---------------------------------------------------------------------------
// s-expressions

#[derive(Debug)]
enum SExpr {
    Atom(String),
    List {
        items: Vec<SExpr>,
        line: usize,
        column: usize,
    },
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    column: usize,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            chars: text.chars().peekable(),
            line: 1,
            column: 1,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.chars.peek().is_some_and(|c| c.is_whitespace()) {
            self.bump();
        }
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            column: self.column,
            message: message.into(),
        }
    }

    fn parse_list(&mut self) -> Result<SExpr> {
        let (line, column) = (self.line, self.column);
        self.bump(); // '('
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            match self.chars.peek() {
                None => {
                    return Err(Error::Parse {
                        line,
                        column,
                        message: "unbalanced '(' (missing ')')".into(),
                    })
                }
                Some(')') => {
                    self.bump();
                    return Ok(SExpr::List { items, line, column });
                }
                Some('(') => items.push(self.parse_list()?),
                Some(_) => {
                    let mut atom = String::new();
                    while let Some(&c) = self.chars.peek() {
                        if c.is_whitespace() || c == '(' || c == ')' {
                            break;
                        }
                        atom.push(c);
                        self.bump();
                    }
                    items.push(SExpr::Atom(atom));
                }
            }
        }
    }
}

/// Reads every top-level bracketed tree in `text`.
pub fn parse_sexpr(text: &str) -> Result<Vec<Sentence>> {
    let mut lexer = Lexer::new(text);
    let mut out = Vec::new();
    loop {
        lexer.skip_ws();
        match lexer.chars.peek() {
            None => break,
            Some('(') => {
                let expr = lexer.parse_list()?;
                out.push(tree_from_sexpr(&expr)?);
            }
            Some(')') => return Err(lexer.error("unbalanced ')'")),
            Some(_) => return Err(lexer.error("expected '(' at top level")),
        }
    }
    Ok(out)
}

fn tree_from_sexpr(expr: &SExpr) -> Result<Sentence> {
    let mut tokens = Vec::new();
    let mut spans = BTreeSet::new();
    collect(expr, &mut tokens, &mut spans)?;
    if tokens.is_empty() {
        let (line, column) = match expr {
            SExpr::List { line, column, .. } => (*line, *column),
            SExpr::Atom(_) => (0, 0),
        };
        return Err(Error::EmptyTree { line, column });
    }
    let n = tokens.len();
    spans.insert(Span::new(0, n - 1));
    Ok(Sentence {
        tokens,
        gold: GoldTree { n, spans },
    })
}

fn collect(expr: &SExpr, tokens: &mut Vec<Token>, spans: &mut BTreeSet<Span>) -> Result<()> {
    let SExpr::List { items, line, column } = expr else {
        unreachable!("atoms are handled by their parent list")
    };
    // (TAG word) is a preterminal.
    if let [SExpr::Atom(tag), SExpr::Atom(word)] = items.as_slice() {
        tokens.push(Token {
            surface: word.clone(),
            pos: tag.clone(),
            id: crate::treebank::Vocab::UNK,
        });
        return Ok(());
    }
    let start = tokens.len();
    let children = match items.first() {
        Some(SExpr::Atom(_)) => &items[1..],
        _ => &items[..],
    };
    for child in children {
        match child {
            SExpr::Atom(word) => tokens.push(Token {
                surface: word.clone(),
                pos: String::new(),
                id: Vocab::UNK,
            }),
            list => collect(list, tokens, spans)?,
        }
    }
    if tokens.len() == start {
        return Err(Error::EmptyTree {
            line: *line,
            column: *column,
        });
    }
    spans.insert(Span::new(start, tokens.len() - 1));
    Ok(())
}

/// Renders a sentence as a bracketed tree with placeholder labels. Leaves use
/// their POS tag, or `X` when absent.
pub fn print_sexpr(sent: &Sentence) -> String {
    let spans: Vec<Span> = {
        let mut v: Vec<_> = sent.gold.spans.iter().copied().collect();
        // outer spans before the spans they contain
        v.sort_by_key(|s| (s.l, std::cmp::Reverse(s.r)));
        v
    };
    let mut out = String::new();
    let mut i = 0;
    print_children(sent, &spans, &mut i, 0, sent.len(), &mut out);
    out.trim_end().to_string()
}

fn print_children(sent: &Sentence, spans: &[Span], next: &mut usize, from: usize, to: usize, out: &mut String) {
    let mut pos = from;
    while pos < to {
        if *next < spans.len() && spans[*next].l == pos && spans[*next].r < to {
            let span = spans[*next];
            *next += 1;
            out.push_str("(X ");
            print_children(sent, spans, next, span.l, span.r + 1, out);
            if out.ends_with(' ') {
                out.pop();
            }
            out.push_str(") ");
            pos = span.r + 1;
        } else {
            let t = &sent.tokens[pos];
            let tag = if t.pos.is_empty() { "X" } else { &t.pos };
            out.push_str(&format!("({tag} {}) ", t.surface));
            pos += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// preprocessing

/// Removes tokens whose tag is in `punctuation` and re-indexes gold spans.
/// Returns `None` when nothing survives.
pub fn strip_punctuation(sent: &Sentence, punctuation: &BTreeSet<String>) -> Option<Sentence> {
    let keep: Vec<bool> = sent.tokens.iter().map(|t| !punctuation.contains(&t.pos)).collect();
    // new_index[i] = number of kept tokens before i
    let mut new_index = Vec::with_capacity(keep.len() + 1);
    let mut count = 0;
    for &k in &keep {
        new_index.push(count);
        count += k as usize;
    }
    new_index.push(count);
    if count == 0 {
        return None;
    }
    let tokens: Vec<Token> = sent
        .tokens
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| t.clone())
        .collect();
    let spans = sent
        .gold
        .spans
        .iter()
        .filter_map(|s| {
            let l = new_index[s.l];
            let end = new_index[s.r + 1];
            (end > l).then(|| Span::new(l, end - 1))
        })
        .collect();
    Some(Sentence {
        tokens,
        gold: GoldTree { n: count, spans },
    })
}

/// Replaces each position with `[MASK]` independently with probability `p_mask`.
pub fn mask_augment(ids: &[u32], p_mask: f64, seed: u64) -> Vec<u32> {
    assert!((0.0..1.0).contains(&p_mask), "p_mask must lie in [0, 1)");
    if p_mask == 0.0 {
        return ids.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.iter()
        .map(|&id| if rng.gen::<f64>() < p_mask { Vocab::MASK } else { id })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<usize>,
    pub total_spans: usize,
}

/// Shuffles sentence indices by `seed` and greedily groups them until each
/// batch holds at least `span_budget` spans (`2n - 1` per sentence). The last
/// batch may fall short.
pub fn collate(lengths: &[usize], span_budget: usize, seed: u64) -> Vec<Batch> {
    assert!(span_budget >= 1);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut current = Batch {
        items: Vec::new(),
        total_spans: 0,
    };
    for i in order {
        current.items.push(i);
        current.total_spans += 2 * lengths[i] - 1;
        if current.total_spans >= span_budget {
            batches.push(std::mem::replace(
                &mut current,
                Batch {
                    items: Vec::new(),
                    total_spans: 0,
                },
            ));
        }
    }
    if !current.items.is_empty() {
        batches.push(current);
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(v: &[(usize, usize)]) -> BTreeSet<Span> {
        v.iter().map(|&(l, r)| Span::new(l, r)).collect()
    }

    #[test]
    fn reads_brackets() {
        let trees = parse_sexpr("(S (NP (DT the) (NN dog)) (VBZ runs))").unwrap();
        assert_eq!(trees.len(), 1);
        let t = &trees[0];
        assert_eq!(t.words(), vec!["the", "dog", "runs"]);
        assert_eq!(t.tokens[1].pos, "NN");
        assert_eq!(t.gold.spans, spans(&[(0, 2), (0, 1)]));
    }

    #[test]
    fn single_leaf_tree() {
        let t = &parse_sexpr("(X (A a))").unwrap()[0];
        assert_eq!(t.words(), vec!["a"]);
        assert_eq!(t.tokens[0].pos, "A");
        assert_eq!(t.gold.spans, spans(&[(0, 0)]));
    }

    #[test]
    fn unbalanced_input_is_rejected_with_position() {
        match parse_sexpr("((A a) (B b") {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (1, 8)),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_sexpr("(A a))\n") {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (1, 6)),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_sexpr("()"), Err(Error::EmptyTree { .. })));
    }

    #[test]
    fn ptb_wrapper_and_unary_chains_collapse() {
        let t = &parse_sexpr("( (S (NP (NP (PRP it))) (VP (VBZ works))) )").unwrap()[0];
        assert_eq!(t.gold.spans, spans(&[(0, 1), (0, 0), (1, 1)]));
        let multi = parse_sexpr("(A (B b))\n\n(C (D d) (E e))").unwrap();
        assert_eq!(multi.len(), 2);
    }

    #[test]
    fn strips_punctuation_and_reindexes() {
        let mut s = parse_sexpr("(S (NP (DT the) (NN dog)) (VBZ runs) (. .))")
            .unwrap()
            .remove(0);
        s.gold.spans = spans(&[(0, 3), (0, 1)]);
        let out = strip_punctuation(&s, &IngestConfig::default().punctuation).unwrap();
        assert_eq!(out.words(), vec!["the", "dog", "runs"]);
        assert_eq!(out.gold.spans, spans(&[(0, 2), (0, 1)]));
        assert_eq!(out.gold.n, 3);
    }

    #[test]
    fn strip_without_punctuation_is_identity() {
        let s = parse_sexpr("(S (NP (DT the) (NN dog)) (VBZ runs))").unwrap().remove(0);
        assert_eq!(strip_punctuation(&s, &IngestConfig::default().punctuation), Some(s));
    }

    #[test]
    fn all_punctuation_sentence_is_discarded() {
        let s = parse_sexpr("(S (. !) (. ?))").unwrap().remove(0);
        assert_eq!(strip_punctuation(&s, &IngestConfig::default().punctuation), None);
        let (kept, discarded) = ingest_text("(S (. !) (. ?)) (S (A a))", &IngestConfig::default()).unwrap();
        assert_eq!((kept.len(), discarded), (1, 1));
    }

    #[test]
    fn emptied_constituents_are_dropped() {
        let s = parse_sexpr("(S (NP (DT a) (NN b)) (PU (, ,) (. .)) (VB c))")
            .unwrap()
            .remove(0);
        let out = strip_punctuation(&s, &IngestConfig::default().punctuation).unwrap();
        assert_eq!(out.gold.spans, spans(&[(0, 2), (0, 1)]));
    }

    #[test]
    fn print_round_trips() {
        let src = "(S (NP (DT the) (NN dog)) (VP (VBZ runs) (ADVP (RB very) (RB fast))))";
        let s = parse_sexpr(src).unwrap().remove(0);
        let again = parse_sexpr(&print_sexpr(&s)).unwrap().remove(0);
        assert_eq!(again, s);
        let leaf = parse_sexpr("(X (A a))").unwrap().remove(0);
        assert_eq!(parse_sexpr(&print_sexpr(&leaf)).unwrap().remove(0), leaf);
    }

    #[test]
    fn vocab_reserves_mask_and_unk() {
        let s = parse_sexpr("(S (A a) (B b) (A a))").unwrap();
        let vocab = Vocab::build(&s);
        assert_eq!(vocab.len(), 4);
        assert_eq!(vocab.id("a"), 2);
        assert_eq!(vocab.id("zzz"), Vocab::UNK);
        let corpus = Corpus::new(s, vocab);
        assert_eq!(corpus.sentences[0].ids(), vec![2, 3, 2]);
    }

    #[test]
    fn masking_is_deterministic() {
        let ids: Vec<u32> = (2..40).collect();
        assert_eq!(mask_augment(&ids, 0.0, 1), ids);
        assert_eq!(mask_augment(&ids, 0.3, 9), mask_augment(&ids, 0.3, 9));
    }

    #[test]
    fn masking_rate_concentrates() {
        let ids = vec![5u32; 10_000];
        let masked = mask_augment(&ids, 0.15, 42);
        let frac = masked.iter().filter(|&&i| i == Vocab::MASK).count() as f64 / 1e4;
        assert!((frac - 0.15).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn collate_examples() {
        let b = collate(&[5, 7], 1024, 0);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].total_spans, 22);
        let b = collate(&[513], 1024, 0);
        assert_eq!(
            b,
            vec![Batch {
                items: vec![0],
                total_spans: 1025
            }]
        );
        let b = collate(&[3, 4, 5, 6], 1, 7);
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|x| x.items.len() == 1));
    }
}
