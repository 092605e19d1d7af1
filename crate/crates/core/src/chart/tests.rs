use super::*;
use crate::grad::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn random_table(rng: &mut ChaCha8Rng, bits: usize, n: usize, scale: f64) -> ScoreTable {
    let s = (0..bits * n * n).map(|_| rng.gen_range(-scale..scale)).collect();
    ScoreTable::from_scores(bits, n, s)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn three_tokens_zero_scores() {
    let table = ScoreTable::constant(1, 3, 0.0);
    let chart = inside_first(&table);
    assert!((chart.log_z() - 6.0 * LN2).abs() < 1e-12);
    assert!((chart.log_z() - 4.158883).abs() < 1e-6);
    assert!((inside_zero(&table).log_z() - 6.0 * LN2).abs() < 1e-12);
}

#[test]
fn single_token_code_mass_only() {
    let chart = inside_first(&ScoreTable::constant(2, 1, 0.0));
    assert!((chart.log_z() - 2.0 * LN2).abs() < 1e-15);
    let t = ScoreTable::from_scores(2, 1, vec![0.3, -1.4]);
    assert_eq!(inside_first(&t).log_z(), inside_zero(&t).log_z());
}

#[test]
fn two_tokens_closed_form() {
    let a = 1.7;
    let layout = SpanLayout::new(2);
    let mut g = Tensor::zeros(layout.num_nodes(), 1);
    g.set(layout.triple_row(0, 1, 0), 0, a);
    let chart = Chart::inside(&NodeScores::new(2, g));
    let want = 2.0 * LN2 + (1.0 + a.exp()).ln();
    assert!((chart.log_z() - want).abs() < 1e-12);
}

#[test]
fn three_tokens_zero_scores_marginals() {
    let chart = marginals(&ScoreTable::constant(1, 3, 0.0), Order::First);
    for m in 0..2 {
        assert!((chart.split_marginal(0, 2, m) - 0.5).abs() < 1e-12);
        let node = Node::Split(Triple::new(0, 2, m));
        assert!((chart.bit_marginal(node, 0, Bit::Pos) - 0.25).abs() < 1e-12);
        assert!((chart.bit_marginal(node, 0, Bit::Neg) - 0.25).abs() < 1e-12);
    }
    for l in 0..3 {
        let leaf = Node::Leaf(l);
        let total = chart.bit_marginal(leaf, 0, Bit::Pos) + chart.bit_marginal(leaf, 0, Bit::Neg);
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn brute_force_counts_and_values() {
    let table = ScoreTable::constant(1, 3, 0.0);
    let scores = NodeScores::first_order(&table);
    assert!((brute_force_log_z(&scores).unwrap() - 64f64.ln()).abs() < 1e-12);
    assert!((brute_force_marginal(&scores, 0, 2, 0).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(count_trees(4).unwrap(), 5);
    assert_eq!(count_trees(1).unwrap(), 1);
    let long = NodeScores::first_order(&ScoreTable::constant(1, 11, 0.0));
    assert!(matches!(brute_force_log_z(&long), Err(crate::Error::TooLong { .. })));
}

#[test]
fn inside_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.gen_range(1..=6);
        let bits = rng.gen_range(1..=3);
        let table = random_table(&mut rng, bits, n, 3.0);
        for order in [Order::First, Order::Zero] {
            let scores = NodeScores::from_table(&table, order);
            let fast = Chart::inside(&scores).log_z();
            let slow = brute_force_log_z(&scores).unwrap();
            assert!(rel_close(fast, slow, 1e-9), "{order:?} n={n}: {fast} vs {slow}");
        }
    }
}

#[test]
fn marginals_match_enumeration_and_conserve_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let n = rng.gen_range(2..=6);
        let bits = rng.gen_range(1..=3);
        let scores = NodeScores::first_order(&random_table(&mut rng, bits, n, 2.0));
        let chart = Chart::with_marginals(&scores);
        let mut total = 0.0;
        for tr in chart.triples() {
            let fast = chart.split_marginal(tr.l, tr.r, tr.m);
            let slow = brute_force_marginal(&scores, tr.l, tr.r, tr.m).unwrap();
            assert!((fast - slow).abs() < 1e-9);
            total += fast;
        }
        assert!((total - (n as f64 - 1.0)).abs() < 1e-9);
        let root: f64 = (0..n - 1).map(|m| chart.split_marginal(0, n - 1, m)).sum();
        assert!((root - 1.0).abs() < 1e-9);
        for l in 0..n {
            assert!((chart.leaf_marginal(l) - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn marginals_are_derivatives_of_log_z() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-4;
    for _ in 0..10 {
        let n = rng.gen_range(2..=5);
        let bits = rng.gen_range(1..=2);
        let scores = NodeScores::first_order(&random_table(&mut rng, bits, n, 2.0));
        let chart = Chart::with_marginals(&scores);
        let layout = scores.layout().clone();
        for row in 0..layout.num_nodes() {
            for k in 0..bits {
                let bump = |delta: f64| {
                    let mut s = scores.clone();
                    let v = s.tensor().get(row, k);
                    s.tensor_mut().set(row, k, v + delta);
                    Chart::inside(&s).log_z()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let node = if row < n {
                    Node::Leaf(row)
                } else {
                    Node::Split(layout.triple(row - n))
                };
                let mu = chart.bit_marginal(node, k, Bit::Pos);
                assert!((fd - mu).abs() < 1e-5, "{fd} vs {mu}");
            }
        }
    }
}

#[test]
fn viterbi_ties_take_smallest_split_and_negative_codes() {
    let tree = viterbi(&ScoreTable::constant(2, 3, 0.0), Order::First);
    assert_eq!(tree.spans(), BinaryTree::right_branching(3).spans());
    assert!(tree.nodes.iter().all(|nd| nd.code.0.iter().all(|&b| !b)));
    assert_eq!(tree.nodes.len(), 5);
    let single = viterbi(&ScoreTable::constant(1, 1, 0.4), Order::First);
    assert_eq!(single.nodes.len(), 1);
    assert!(single.nodes[0].is_leaf());
    assert!(single.nodes[0].code.0[0]);
}

#[test]
fn viterbi_is_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..60 {
        let n = rng.gen_range(1..=6);
        let bits = rng.gen_range(1..=3);
        let scores = NodeScores::first_order(&random_table(&mut rng, bits, n, 2.0));
        let tree = viterbi_nodes(&scores);
        let best = brute_force_max(&scores).unwrap();
        assert!((tree.score - best).abs() < 1e-9);
        assert!((tree_score(&scores, &tree) - tree.score).abs() < 1e-9);
        assert_eq!(tree.nodes.len(), 2 * n - 1);
    }
}

#[test]
fn zero_order_blind_to_interior_cells() {
    // Perturb s[k][1][2] for n = 4: strictly inside the span (0, 3).
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = random_table(&mut rng, 1, 4, 1.0);
    let mut s = base.scores().to_vec();
    s[4 + 2] += 1.5;
    let bumped = ScoreTable::from_scores(1, 4, s);
    let zero_a = NodeScores::zero_order(&base);
    let zero_b = NodeScores::zero_order(&bumped);
    for m in 0..3 {
        assert_eq!(zero_a.split(0, 3, m), zero_b.split(0, 3, m));
    }
    assert_ne!(
        NodeScores::first_order(&base).split(0, 3, 1),
        NodeScores::first_order(&bumped).split(0, 3, 1)
    );
    assert!((inside_first(&base).log_z() - inside_first(&bumped).log_z()).abs() > 1e-6);
}

#[test]
fn tape_chart_matches_direct_chart() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in 1..=7 {
        let bits = 1 + n % 3;
        let scores = NodeScores::first_order(&random_table(&mut rng, bits, n, 2.0));
        let chart = Chart::with_marginals(&scores);
        let mut tape = Tape::new();
        let g = tape.input(scores.tensor().clone());
        let vars = marginals_tape(&mut tape, g, n);
        assert!((tape.value(vars.log_z).item() - chart.log_z()).abs() < 1e-12);
        for (a, b) in tape.value(vars.split).data().iter().zip(chart.split_marginals()) {
            assert!((a - b).abs() < 1e-12);
        }
        // d log Z / d g_k(node) is the positive bit marginal
        let grads = tape.backward(vars.log_z).unwrap();
        let dg = grads.wrt(g).unwrap();
        let layout = scores.layout();
        for row in 0..layout.num_nodes() {
            let node = if row < n {
                Node::Leaf(row)
            } else {
                Node::Split(layout.triple(row - n))
            };
            for k in 0..bits {
                assert!((dg.get(row, k) - chart.bit_marginal(node, k, Bit::Pos)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn tape_marginals_are_differentiable() {
    // d/dg of Σ w · μ against central differences of the direct chart
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 4;
    let scores = NodeScores::first_order(&random_table(&mut rng, 2, n, 1.5));
    let layout = scores.layout().clone();
    let weights: Vec<f64> = (0..layout.num_triples()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objective = |s: &NodeScores| -> f64 {
        let c = Chart::with_marginals(s);
        c.split_marginals().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let g = tape.input(scores.tensor().clone());
    let vars = marginals_tape(&mut tape, g, n);
    let w = tape.constant(Tensor::column(weights.clone()));
    let prod = tape.mul(vars.split, w);
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let dg = grads.wrt(g).unwrap();
    let h = 1e-5;
    for row in 0..layout.num_nodes() {
        for k in 0..2 {
            let mut plus = scores.clone();
            plus.tensor_mut().set(row, k, scores.tensor().get(row, k) + h);
            let mut minus = scores.clone();
            minus.tensor_mut().set(row, k, scores.tensor().get(row, k) - h);
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!((fd - dg.get(row, k)).abs() < 1e-7, "{fd} vs {}", dg.get(row, k));
        }
    }
}

#[test]
fn hex_rendering() {
    assert_eq!(Code::from_signs(&[1, -1, 1, 1]).to_hex(), "B");
    assert_eq!(Code::from_signs(&[1, 0, 0, 0, 0]).to_hex(), "10");
    assert_eq!(Code::from_signs(&[-1; 8]).to_hex(), "00");
    assert_eq!(Code(vec![true; 16]).to_hex(), "FFFF");
}

#[test]
fn rendered_brackets_reparse_to_tree_spans() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 1..=7 {
        let tree = viterbi(&random_table(&mut rng, 3, n, 1.0), Order::First);
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let words: Vec<&str> = words.iter().map(String::as_str).collect();
        let text = tree.render(&words, TreeFormat::Brackets);
        let sent = crate::treebank::parse_sexpr(&text).unwrap().remove(0);
        assert_eq!(sent.words(), words);
        assert_eq!(sent.gold.spans, tree.spans());
    }
    let one = viterbi(&ScoreTable::constant(8, 1, 0.0), Order::First);
    assert_eq!(one.render(&["word"], TreeFormat::Codes), "(00 word)");
}

#[test]
fn baseline_tree_shapes() {
    let right = BinaryTree::right_branching(4);
    assert!(right.is_right_branching());
    assert!(right.spans().contains(&Span::new(1, 3)));
    let left = BinaryTree::left_branching(4);
    assert!(!left.is_right_branching());
    assert!(left.spans().contains(&Span::new(0, 2)));
    assert!(BinaryTree::right_branching(1).is_right_branching());
}

#[test]
fn dump_lists_inside_and_marginals() {
    let chart = marginals(&ScoreTable::constant(1, 3, 0.0), Order::First);
    let text = chart.dump(&["a", "b", "c"]);
    assert!(text.contains("logZ = 4.158883"));
    let line = text.lines().find(|l| l.trim_start().starts_with("(0,2)")).unwrap();
    assert!(line.contains("m=0:0.5000") && line.contains("m=1:0.5000"), "{line}");
}
