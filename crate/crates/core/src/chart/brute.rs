//! Exhaustive enumeration oracles for short sentences.

use super::{Node, NodeScores};
use crate::error::{Error, Result};
use crate::numeric::{log1p_exp, log_sum_exp};
use crate::span::Triple;

/// Catalan growth makes anything longer impractical.
pub const BRUTE_FORCE_MAX_LEN: usize = 10;

fn check_len(n: usize) -> Result<()> {
    if n > BRUTE_FORCE_MAX_LEN {
        return Err(Error::TooLong {
            n,
            max: BRUTE_FORCE_MAX_LEN,
        });
    }
    Ok(())
}

/// Every binary tree over `l..=r`, each as its node list.
fn enumerate(l: usize, r: usize) -> Vec<Vec<Node>> {
    if l == r {
        return vec![vec![Node::Leaf(l)]];
    }
    let mut out = Vec::new();
    for m in l..r {
        let lefts = enumerate(l, m);
        let rights = enumerate(m + 1, r);
        for a in &lefts {
            for b in &rights {
                let mut nodes = Vec::with_capacity(a.len() + b.len() + 1);
                nodes.push(Node::Split(Triple::new(l, r, m)));
                nodes.extend_from_slice(a);
                nodes.extend_from_slice(b);
                out.push(nodes);
            }
        }
    }
    out
}

pub fn count_trees(n: usize) -> Result<usize> {
    check_len(n)?;
    Ok(enumerate(0, n - 1).len())
}

/// Log of the summed mass of all `2^K` codes at one node, by explicit
/// enumeration of the codes for small `K`.
fn node_log_mass(g: &[f64]) -> f64 {
    if g.len() > 12 {
        return g.iter().map(|&v| log1p_exp(v)).sum();
    }
    let terms: Vec<f64> = (0..1usize << g.len())
        .map(|code| {
            g.iter()
                .enumerate()
                .filter(|(k, _)| code >> k & 1 == 1)
                .map(|(_, &v)| v)
                .sum()
        })
        .collect();
    log_sum_exp(&terms)
}

fn node_best(g: &[f64]) -> f64 {
    if g.len() > 12 {
        return g.iter().map(|&v| v.max(0.0)).sum();
    }
    (0..1usize << g.len())
        .map(|code| {
            g.iter()
                .enumerate()
                .filter(|(k, _)| code >> k & 1 == 1)
                .map(|(_, &v)| v)
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn tree_log_masses(scores: &NodeScores) -> Result<(Vec<Vec<Node>>, Vec<f64>)> {
    let n = scores.len();
    check_len(n)?;
    let trees = enumerate(0, n - 1);
    let masses = trees
        .iter()
        .map(|t| t.iter().map(|&nd| node_log_mass(scores.node(nd))).sum())
        .collect();
    Ok((trees, masses))
}

/// `log Z` by enumerating all trees and all codes.
pub fn brute_force_log_z(scores: &NodeScores) -> Result<f64> {
    let (_, masses) = tree_log_masses(scores)?;
    Ok(log_sum_exp(&masses))
}

/// Probability mass of the trees containing split `(l, r, m)`.
pub fn brute_force_marginal(scores: &NodeScores, l: usize, r: usize, m: usize) -> Result<f64> {
    let (trees, masses) = tree_log_masses(scores)?;
    let log_z = log_sum_exp(&masses);
    let target = Node::Split(Triple::new(l, r, m));
    Ok(trees
        .iter()
        .zip(&masses)
        .filter(|(t, _)| t.contains(&target))
        .map(|(_, &mass)| (mass - log_z).exp())
        .sum())
}

/// Highest score over all trees and codes.
pub fn brute_force_max(scores: &NodeScores) -> Result<f64> {
    let n = scores.len();
    check_len(n)?;
    Ok(enumerate(0, n - 1)
        .iter()
        .map(|t| t.iter().map(|&nd| node_best(scores.node(nd))).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max))
}
