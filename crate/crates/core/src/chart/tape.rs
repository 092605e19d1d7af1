//! The inside and outside recursions recorded on a [`Tape`], one span width
//! per group of operations, so that split marginals are themselves
//! differentiable outputs.

use crate::grad::{Tape, Var};
use crate::span::SpanLayout;
use crate::tensor::Tensor;

/// Tape handles produced by [`marginals_tape`].
#[derive(Clone, Copy, Debug)]
pub struct ChartVars {
    /// `1 x 1`
    pub log_z: Var,
    /// `T x 1` split marginals in layout order.
    pub split: Var,
}

/// Records `log Z` and every split marginal for node scores `g`
/// (`(n + T) x K`, [`SpanLayout`] node order).
pub fn marginals_tape(tape: &mut Tape, g: Var, n: usize) -> ChartVars {
    assert!(n >= 1);
    let layout = SpanLayout::new(n);
    assert_eq!(tape.value(g).rows(), layout.num_nodes());

    let soft = tape.log1p_exp(g);
    let mass = tape.row_sum(soft);

    // alpha[w - 1]: inside values of all spans of width w, ordered by l.
    let mut alpha: Vec<Var> = Vec::with_capacity(n);
    alpha.push(tape.gather(mass, (0..n as u32).collect(), n, 1));
    for w in 2..=n {
        let spans = n - w + 1;
        let first = layout.span_offset(0, w - 1);
        let count = spans * (w - 1);
        let mut left = Vec::with_capacity(count);
        let mut right = Vec::with_capacity(count);
        for l in 0..spans {
            let r = l + w - 1;
            for m in l..r {
                left.push(((m - l) as u32, l as u32));
                right.push(((r - m - 1) as u32, (m + 1) as u32));
            }
        }
        let lv = tape.gather_rows(&alpha, left);
        let rv = tape.gather_rows(&alpha, right);
        let cv = tape.gather(
            mass,
            ((n + first) as u32..(n + first + count) as u32).collect(),
            count,
            1,
        );
        let sum = tape.add(lv, rv);
        let sum = tape.add(sum, cv);
        let offsets = (0..=spans).map(|s| s * (w - 1)).collect();
        alpha.push(tape.segment_lse(sum, offsets));
    }
    let log_z = alpha[n - 1];

    if n == 1 {
        let split = tape.constant(Tensor::zeros(0, 1));
        return ChartVars { log_z, split };
    }

    // beta[w - 1]: outside values of spans of width w; the root's is 0.
    let mut beta: Vec<Option<Var>> = vec![None; n];
    beta[n - 1] = Some(tape.constant(Tensor::scalar(0.0)));
    for w in (1..n).rev() {
        // sources: beta of widths w+1..=n, indexed by width - (w + 1)
        let sources: Vec<Var> = (w + 1..=n).map(|v| beta[v - 1].unwrap()).collect();
        let mut b_idx = Vec::new();
        let mut a_idx = Vec::new();
        let mut c_idx = Vec::new();
        let mut offsets = vec![0];
        for a in 0..=n - w {
            let b = a + w - 1;
            // (a, b) as the left child of (a, r)
            for r in b + 1..n {
                b_idx.push(((r - a + 1 - (w + 1)) as u32, a as u32));
                a_idx.push(((r - b - 1) as u32, (b + 1) as u32));
                c_idx.push((n + layout.triple_index(a, r, b)) as u32);
            }
            // (a, b) as the right child of (l, b)
            for l in 0..a {
                b_idx.push(((b - l + 1 - (w + 1)) as u32, l as u32));
                a_idx.push(((a - 1 - l) as u32, l as u32));
                c_idx.push((n + layout.triple_index(l, b, a - 1)) as u32);
            }
            offsets.push(b_idx.len());
        }
        let total = c_idx.len();
        let bv = tape.gather_rows(&sources, b_idx);
        let av = tape.gather_rows(&alpha, a_idx);
        let cv = tape.gather(mass, c_idx, total, 1);
        let sum = tape.add(bv, av);
        let sum = tape.add(sum, cv);
        beta[w - 1] = Some(tape.segment_lse(sum, offsets));
    }

    // log μ(l, r, m) = β(l, r) + mass(l, r, m) + α(l, m) + α(m + 1, r) − log Z
    let t = layout.num_triples();
    let beta_sources: Vec<Var> = (2..=n).map(|w| beta[w - 1].unwrap()).collect();
    let mut b_idx = Vec::with_capacity(t);
    let mut l_idx = Vec::with_capacity(t);
    let mut r_idx = Vec::with_capacity(t);
    for tr in layout.triples() {
        b_idx.push(((tr.r - tr.l + 1 - 2) as u32, tr.l as u32));
        l_idx.push(((tr.m - tr.l) as u32, tr.l as u32));
        r_idx.push(((tr.r - tr.m - 1) as u32, (tr.m + 1) as u32));
    }
    let bv = tape.gather_rows(&beta_sources, b_idx);
    let lv = tape.gather_rows(&alpha, l_idx);
    let rv = tape.gather_rows(&alpha, r_idx);
    let cv = tape.gather(mass, (n as u32..(n + t) as u32).collect(), t, 1);
    let zv = tape.gather(log_z, vec![0; t], t, 1);
    let sum = tape.add(bv, lv);
    let sum = tape.add(sum, rv);
    let sum = tape.add(sum, cv);
    let log_mu = tape.sub(sum, zv);
    let split = tape.exp(log_mu);
    ChartVars { log_z, split }
}
