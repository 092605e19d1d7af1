//! Span and split-point indexing shared by the encoder, chart and loss code.
//!
//! Positions are 0-based and spans are inclusive on both ends. A *triple*
//! `(l, r, m)` with `l <= m < r` is an internal node whose children are
//! `(l, m)` and `(m + 1, r)`. Per-node tables are laid out with the `n` leaves
//! first, followed by the triples ordered by width, then `l`, then `m`.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub l: usize,
    pub r: usize,
}

impl Span {
    pub fn new(l: usize, r: usize) -> Self {
        debug_assert!(l <= r);
        Self { l, r }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.r - self.l + 1
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.l, self.r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub l: usize,
    pub r: usize,
    pub m: usize,
}

impl Triple {
    pub fn new(l: usize, r: usize, m: usize) -> Self {
        debug_assert!(l <= m && m < r);
        Self { l, r, m }
    }

    pub fn span(&self) -> Span {
        Span::new(self.l, self.r)
    }

    pub fn left(&self) -> Span {
        Span::new(self.l, self.m)
    }

    pub fn right(&self) -> Span {
        Span::new(self.m + 1, self.r)
    }
}

/// Enumerates every split triple of a length-`n` sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanLayout {
    n: usize,
    triples: Vec<Triple>,
    /// `offsets[l * n + r]` is the index of the first triple of span `(l, r)`.
    offsets: Vec<usize>,
}

impl SpanLayout {
    pub fn new(n: usize) -> Self {
        let mut triples = Vec::with_capacity(n * (n * n).saturating_sub(1) / 6);
        let mut offsets = vec![usize::MAX; n * n];
        for w in 2..=n {
            for l in 0..=n - w {
                let r = l + w - 1;
                offsets[l * n + r] = triples.len();
                triples.extend((l..r).map(|m| Triple::new(l, r, m)));
            }
        }
        Self { n, triples, offsets }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    /// Leaves plus triples.
    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.n + self.triples.len()
    }

    #[inline]
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    #[inline]
    pub fn triple(&self, idx: usize) -> Triple {
        self.triples[idx]
    }

    #[inline]
    pub fn triple_index(&self, l: usize, r: usize, m: usize) -> usize {
        debug_assert!(l <= m && m < r && r < self.n);
        self.offsets[l * self.n + r] + (m - l)
    }

    /// Index of the first triple of span `(l, r)`; its splits are contiguous.
    #[inline]
    pub fn span_offset(&self, l: usize, r: usize) -> usize {
        debug_assert!(l < r && r < self.n);
        self.offsets[l * self.n + r]
    }

    /// Row of a leaf in per-node tables.
    #[inline]
    pub fn leaf_row(&self, l: usize) -> usize {
        l
    }

    /// Row of a triple in per-node tables.
    #[inline]
    pub fn triple_row(&self, l: usize, r: usize, m: usize) -> usize {
        self.n + self.triple_index(l, r, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triple_count_is_tetrahedral() {
        for n in 0..12 {
            let layout = SpanLayout::new(n);
            assert_eq!(layout.num_triples(), n * (n * n).saturating_sub(1) / 6);
        }
    }

    #[test]
    fn index_round_trips() {
        let layout = SpanLayout::new(7);
        for (i, t) in layout.triples().iter().enumerate() {
            assert_eq!(layout.triple_index(t.l, t.r, t.m), i);
        }
    }
}
