//! Randomized oracle suites for the chart and its gradients, run by the
//! `selfcheck` command.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chart::{
    brute_force_log_z, brute_force_marginal, brute_force_max, marginals_tape, tree_score, viterbi_nodes, Bit, Chart,
    NodeScores, Order, BRUTE_FORCE_MAX_LEN,
};
use crate::encoder::ScoreTable;
use crate::grad::Tape;
use crate::hashing::binarize;
use crate::span::SpanLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelfCheckConfig {
    /// Longest sentence drawn; capped at the brute-force limit.
    pub max_n: usize,
    pub max_bits: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SelfCheckConfig {
    fn default() -> Self {
        Self {
            max_n: 5,
            max_bits: 2,
            trials: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<22} trials={:<5} max_err={:.3e} tol={:.0e}",
            if self.passed() { "ok" } else { "FAIL" },
            self.name,
            self.trials,
            self.max_error,
            self.tolerance
        )
    }
}

/// Uniform `[-2, 2)` score table.
pub fn random_table(bits: usize, n: usize, rng: &mut impl Rng) -> ScoreTable {
    ScoreTable::from_scores(bits, n, (0..bits * n * n).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

struct Acc {
    name: &'static str,
    tolerance: f64,
    trials: usize,
    max_error: f64,
}

impl Acc {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            trials: 0,
            max_error: 0.0,
        }
    }

    fn record(&mut self, err: f64) {
        // NaN must fail the check
        self.max_error = if err.is_nan() {
            f64::INFINITY
        } else {
            self.max_error.max(err)
        };
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name,
            trials: self.trials,
            max_error: self.max_error,
            tolerance: self.tolerance,
        }
    }
}

/// Runs every suite and returns one result per suite.
pub fn run(config: &SelfCheckConfig) -> Vec<CheckResult> {
    let max_n = config.max_n.clamp(1, BRUTE_FORCE_MAX_LEN);
    let max_bits = config.max_bits.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut first = Acc::new("partition/first", 1e-9);
    let mut zero = Acc::new("partition/zero", 1e-9);
    let mut marg = Acc::new("marginals/enumeration", 1e-9);
    let mut fd = Acc::new("marginals/finite-diff", 1e-5);
    let mut cons = Acc::new("marginals/conservation", 1e-9);
    let mut vit = Acc::new("viterbi/optimality", 1e-9);
    let mut sign = Acc::new("viterbi/binarization", 0.0);
    let mut tape = Acc::new("tape/log-partition", 1e-9);

    for _ in 0..config.trials {
        let n = rng.gen_range(1..=max_n);
        let bits = rng.gen_range(1..=max_bits);
        let table = random_table(bits, n, &mut rng);
        for (order, acc) in [(Order::First, &mut first), (Order::Zero, &mut zero)] {
            let scores = NodeScores::from_table(&table, order);
            let brute = brute_force_log_z(&scores).expect("n capped");
            acc.record(relative(Chart::inside(&scores).log_z(), brute));
            acc.trials += 1;
        }

        let scores = NodeScores::first_order(&table);
        let chart = Chart::with_marginals(&scores);
        let layout = SpanLayout::new(n);
        for t in layout.triples() {
            let brute = brute_force_marginal(&scores, t.l, t.r, t.m).expect("n capped");
            marg.record((chart.split_marginal(t.l, t.r, t.m) - brute).abs());
        }
        marg.trials += 1;

        let total: f64 = chart.split_marginals().iter().sum();
        cons.record((total - (n - 1) as f64).abs());
        for l in 0..n {
            cons.record((chart.leaf_marginal(l) - 1.0).abs());
        }
        for &p in chart.split_marginals() {
            if !(0.0..=1.0 + 1e-12).contains(&p) {
                cons.record(f64::INFINITY);
            }
        }
        cons.trials += 1;

        // d logZ / d g_k(node) = μ_k(node, +1)
        let h = 1e-4;
        for row in 0..layout.num_nodes() {
            for k in 0..bits {
                let bump = |delta: f64| {
                    let mut s = scores.clone();
                    let v = s.tensor().get(row, k);
                    s.tensor_mut().set(row, k, v + delta);
                    Chart::inside(&s).log_z()
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let node = node_of_row(&layout, row);
                fd.record((numeric - chart.bit_marginal(node, k, Bit::Pos)).abs());
            }
        }
        fd.trials += 1;

        let tree = viterbi_nodes(&scores);
        let brute = brute_force_max(&scores).expect("n capped");
        vit.record(
            (tree.score - brute)
                .abs()
                .max((tree_score(&scores, &tree) - brute).abs()),
        );
        vit.trials += 1;
        for nd in &tree.nodes {
            let node = nd.node();
            if chart.node_marginal(node) > 0.0 && binarize(&chart, node) != nd.code {
                sign.record(1.0);
            }
        }
        sign.trials += 1;

        let mut tp = Tape::new();
        let g = tp.input(scores.tensor().clone());
        let out = marginals_tape(&mut tp, g, n);
        tape.record(relative(tp.value(out.log_z).item(), chart.log_z()));
        if let Ok(grads) = tp.backward(out.log_z) {
            let grad = grads.wrt(g).expect("input gradient");
            for row in 0..layout.num_nodes() {
                let node = node_of_row(&layout, row);
                for k in 0..bits {
                    tape.record((grad.get(row, k) - chart.bit_marginal(node, k, Bit::Pos)).abs());
                }
            }
        } else {
            tape.record(f64::INFINITY);
        }
        tape.trials += 1;
    }
    [first, zero, marg, fd, cons, vit, sign, tape]
        .into_iter()
        .map(Acc::finish)
        .collect()
}

fn node_of_row(layout: &SpanLayout, row: usize) -> crate::chart::Node {
    if row < layout.len() {
        crate::chart::Node::Leaf(row)
    } else {
        crate::chart::Node::Split(layout.triple(row - layout.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let results = run(&SelfCheckConfig {
            trials: 20,
            ..SelfCheckConfig::default()
        });
        assert_eq!(results.len(), 8);
        for r in &results {
            assert!(r.passed(), "{r}");
            assert!(r.to_string().starts_with("ok"));
        }
    }
}
