//! Toy contextual encoder, attention hash layer, and per-bit score tables.
//!
//! The encoder is an embedding lookup followed by `L` residual mixing layers.
//! Each layer is a width-3 convolution over positions (previous, current and
//! next token concatenated, zero-padded at the edges) followed by `tanh`. The hash layer holds one query and one key projection of shape
//! `⌈d/K⌉ x d` per bit, stacked into two `K·⌈d/K⌉ x d` matrices.
//!
//! A [`ScoreTable`] stores the zero-order score `s[k][i][j]` of every ordered
//! position pair together with its 2-D prefix sums, so the first-order score
//! of a split `(l, r, m)`, the mean of `s[k][i][j]` over `l <= i <= m < j <= r`,
//! is read in constant time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::{prefix_sum_2d, ParamId, Tape, Var};
use crate::numeric::derive_seed;
use crate::tensor::{dot, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MixingLayer {
    /// `3d x d`, applied as `[x_{i-1}; x_i; x_{i+1}] · W`.
    pub weight: Tensor,
    /// `1 x d`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `vocab_size x d`
    pub embedding: Tensor,
    pub layers: Vec<MixingLayer>,
    /// `K·⌈d/K⌉ x d`; rows `k·dk .. (k+1)·dk` are the query matrix of bit `k`.
    pub hash_q: Tensor,
    /// Same layout as `hash_q`.
    pub hash_k: Tensor,
    pub bits: usize,
    pub dropout: f64,
}

impl EncoderParams {
    /// Randomly initialised parameters.
    pub fn init(vocab_size: usize, dim: usize, layers: usize, bits: usize, dropout: f64, seed: u64) -> Self {
        assert!(dim >= bits && bits >= 1, "need d >= K >= 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, scale: f64| {
            Tensor::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
            )
        };
        let scale = (3.0 / dim as f64).sqrt();
        let dk = dim.div_ceil(bits);
        let embedding = uniform(vocab_size, dim, 1.0);
        let layers = (0..layers)
            .map(|_| MixingLayer {
                weight: uniform(3 * dim, dim, scale / 3f64.sqrt()),
                bias: Tensor::zeros(1, dim),
            })
            .collect();
        let hash_q = uniform(bits * dk, dim, scale);
        let hash_k = uniform(bits * dk, dim, scale);
        Self {
            embedding,
            layers,
            hash_q,
            hash_k,
            bits,
            dropout,
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    /// `⌈d/K⌉`
    pub fn head_dim(&self) -> usize {
        self.dim().div_ceil(self.bits)
    }

    /// Parameter tensors in a fixed order; the position is the [`ParamId`].
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), &layer.weight));
            out.push((format!("layers.{i}.bias"), &layer.bias));
        }
        out.push(("hash_q".to_string(), &self.hash_q));
        out.push(("hash_k".to_string(), &self.hash_k));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.hash_q);
        out.push(&mut self.hash_k);
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if !t.is_finite() {
                return Err(Error::NonFiniteParam(name));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(id, (_, t))| tape.param(t.clone(), id as ParamId))
            .collect();
        ParamVars {
            vars,
            layers: self.layers.len(),
            bits: self.bits,
            dropout: self.dropout,
        }
    }

    /// Bilinear score of bit `k` between two arbitrary vectors:
    /// `(W_Q,k · left)ᵀ (W_K,k · right) / √dk`.
    pub fn bit_score(&self, k: usize, left: &[f64], right: &[f64]) -> f64 {
        let dk = self.head_dim();
        let q: Vec<f64> = (k * dk..(k + 1) * dk)
            .map(|row| dot(self.hash_q.row(row), left))
            .collect();
        let kk: Vec<f64> = (k * dk..(k + 1) * dk)
            .map(|row| dot(self.hash_k.row(row), right))
            .collect();
        dot(&q, &kk) / (dk as f64).sqrt()
    }
}

/// Tape handles for an [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    layers: usize,
    bits: usize,
    dropout: f64,
}

impl ParamVars {
    fn embedding(&self) -> Var {
        self.vars[0]
    }

    fn layer(&self, i: usize) -> (Var, Var) {
        (self.vars[1 + 2 * i], self.vars[2 + 2 * i])
    }

    fn hash(&self) -> (Var, Var) {
        (self.vars[1 + 2 * self.layers], self.vars[2 + 2 * self.layers])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    /// `n x d`
    pub h: Tensor,
    pub view_seed: u64,
}

/// `n x n` matrix whose product with `x` moves row `i + offset` to row `i`,
/// with zero rows past the edges.
pub fn shift_matrix(n: usize, offset: isize) -> Tensor {
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        let j = i as isize + offset;
        if (0..n as isize).contains(&j) {
            a.set(i, j as usize, 1.0);
        }
    }
    a
}

/// `n x 3d` rows `[x_{i-1}; x_i; x_{i+1}]`.
fn window(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(n, 3 * d);
    for i in 0..n {
        let row = out.row_mut(i);
        if i > 0 {
            row[..d].copy_from_slice(x.row(i - 1));
        }
        row[d..2 * d].copy_from_slice(x.row(i));
        if i + 1 < n {
            row[2 * d..].copy_from_slice(x.row(i + 1));
        }
    }
    out
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
fn dropout_mask(rows: usize, cols: usize, p: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect(),
    )
}

fn apply_dropout(x: &mut Tensor, p: f64, seed: u64) {
    if p > 0.0 {
        let mask = dropout_mask(x.rows(), x.cols(), p, seed);
        for (v, m) in x.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
    }
}

/// Hidden states for an id sequence. `dropout = 0` makes the result
/// independent of `view_seed`.
pub fn encode(ids: &[u32], params: &EncoderParams, view_seed: u64) -> Result<HiddenStates> {
    params.check_finite()?;
    let n = ids.len();
    let d = params.dim();
    let mut x = Tensor::zeros(n, d);
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= params.vocab_size() {
            return Err(Error::Dimension {
                expected: params.vocab_size(),
                actual: id as usize + 1,
            });
        }
        x.row_mut(i).copy_from_slice(params.embedding.row(id as usize));
    }
    apply_dropout(&mut x, params.dropout, derive_seed(&[view_seed, 0]));
    if n > 0 {
        for (li, layer) in params.layers.iter().enumerate() {
            let mut u = window(&x).matmul(&layer.weight);
            for i in 0..n {
                for (v, b) in u.row_mut(i).iter_mut().zip(layer.bias.data()) {
                    *v = (*v + b).tanh();
                }
            }
            x.add_assign(&u);
            apply_dropout(&mut x, params.dropout, derive_seed(&[view_seed, li as u64 + 1]));
        }
    }
    Ok(HiddenStates { h: x, view_seed })
}

/// Differentiable twin of [`encode`] recorded on `tape`.
pub fn encode_tape(tape: &mut Tape, vars: &ParamVars, ids: &[u32], view_seed: u64) -> Var {
    let n = ids.len();
    let index = ids.iter().map(|&id| (0, id)).collect();
    let mut x = tape.gather_rows(&[vars.embedding()], index);
    let dim = tape.value(x).cols();
    let dropout = |tape: &mut Tape, x: Var, slot: u64| {
        if vars.dropout > 0.0 {
            let mask = tape.constant(dropout_mask(n, dim, vars.dropout, derive_seed(&[view_seed, slot])));
            tape.mul(x, mask)
        } else {
            x
        }
    };
    x = dropout(tape, x, 0);
    let prev = tape.constant(shift_matrix(n, -1));
    let next = tape.constant(shift_matrix(n, 1));
    for li in 0..vars.layers {
        let (w, b) = vars.layer(li);
        let xp = tape.matmul(prev, x);
        let xn = tape.matmul(next, x);
        let cat = tape.hcat(xp, x);
        let cat = tape.hcat(cat, xn);
        let u = tape.matmul(cat, w);
        let u = tape.add_row(u, b);
        let u = tape.tanh(u);
        x = tape.add(x, u);
        x = dropout(tape, x, li as u64 + 1);
    }
    x
}

/// First-order node scores `(n + T) x K` for hidden states on the tape,
/// in [`crate::span::SpanLayout`] node order.
pub fn first_order_scores_tape(tape: &mut Tape, vars: &ParamVars, h: Var) -> Var {
    let n = tape.value(h).rows();
    let (wq, wk) = vars.hash();
    let q = tape.matmul_nt(h, wq);
    let k = tape.matmul_nt(h, wk);
    let s = tape.bit_scores(q, k, vars.bits);
    tape.rect_mean(s, n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    bits: usize,
    n: usize,
    /// `K x n x n`
    s: Vec<f64>,
    /// `K x (n+1) x (n+1)`, `p[k][a][b] = Σ_{i<a, j<b} s[k][i][j]`
    p: Vec<f64>,
}

impl ScoreTable {
    /// Builds the prefix table for `scores` laid out `K x n x n`.
    pub fn from_scores(bits: usize, n: usize, scores: Vec<f64>) -> Self {
        assert_eq!(scores.len(), bits * n * n);
        let stride = n + 1;
        let mut p = vec![0.0; bits * stride * stride];
        for k in 0..bits {
            prefix_sum_2d(
                &scores[k * n * n..(k + 1) * n * n],
                n,
                &mut p[k * stride * stride..(k + 1) * stride * stride],
            );
        }
        Self { bits, n, s: scores, p }
    }

    /// Every cell equal to `value`.
    pub fn constant(bits: usize, n: usize, value: f64) -> Self {
        Self::from_scores(bits, n, vec![value; bits * n * n])
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn scores(&self) -> &[f64] {
        &self.s
    }

    #[inline]
    pub fn s(&self, k: usize, i: usize, j: usize) -> f64 {
        self.s[(k * self.n + i) * self.n + j]
    }

    /// `Σ_{i<a, j<b} s[k][i][j]`
    #[inline]
    pub fn prefix(&self, k: usize, a: usize, b: usize) -> f64 {
        let stride = self.n + 1;
        self.p[k * stride * stride + a * stride + b]
    }

    /// Sum of `s[k][i][j]` over `i0 <= i <= i1`, `j0 <= j <= j1`.
    pub fn rect_sum(&self, k: usize, i0: usize, i1: usize, j0: usize, j1: usize) -> f64 {
        self.prefix(k, i1 + 1, j1 + 1) - self.prefix(k, i0, j1 + 1) - self.prefix(k, i1 + 1, j0)
            + self.prefix(k, i0, j0)
    }

    /// Mean of `s[k][i][j]` over `l <= i <= m < j <= r`.
    ///
    /// # Panics
    /// If `l <= m < r < n` does not hold.
    pub fn first_order_score(&self, k: usize, l: usize, r: usize, m: usize) -> f64 {
        assert!(
            l <= m && m < r && r < self.n,
            "first_order_score requires l <= m < r < n, got l={l} m={m} r={r} n={}",
            self.n
        );
        let count = ((m - l + 1) * (r - m)) as f64;
        self.rect_sum(k, l, m, m + 1, r) / count
    }

    /// Score of a single token against itself, `s[k][l][l]`.
    pub fn leaf_score(&self, k: usize, l: usize) -> f64 {
        self.s(k, l, l)
    }

    /// Zero-order score of span `(l, r)`, `s[k][l][r]`.
    pub fn zero_order_score(&self, k: usize, l: usize, r: usize) -> f64 {
        self.s(k, l, r)
    }
}

/// Per-bit zero-order scores for every ordered position pair.
pub fn zero_order_scores(h: &Tensor, params: &EncoderParams) -> ScoreTable {
    let n = h.rows();
    let bits = params.bits;
    let dk = params.head_dim();
    let q = h.matmul_nt(&params.hash_q);
    let k = h.matmul_nt(&params.hash_k);
    let norm = (dk as f64).sqrt().recip();
    let mut s = vec![0.0; bits * n * n];
    for b in 0..bits {
        for i in 0..n {
            let qi = &q.row(i)[b * dk..(b + 1) * dk];
            for j in 0..n {
                let kj = &k.row(j)[b * dk..(b + 1) * dk];
                s[(b * n + i) * n + j] = dot(qi, kj) * norm;
            }
        }
    }
    ScoreTable::from_scores(bits, n, s)
}

// ---------------------------------------------------------------------------
// external vectors

const VECTOR_MAGIC: &[u8; 8] = b"HPVEC\0\0\0";
const VECTOR_VERSION: u32 = 1;

/// Writes one record per sentence: magic, version, `n`, `d`, then `n·d`
/// little-endian `f64`s in row-major order.
pub fn write_external_vectors(path: &Path, states: &[Tensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    for h in states {
        write(VECTOR_MAGIC)?;
        write(&VECTOR_VERSION.to_le_bytes())?;
        write(&(h.rows() as u64).to_le_bytes())?;
        write(&(h.cols() as u64).to_le_bytes())?;
        for v in h.data() {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads every record written by [`write_external_vectors`], requiring
/// dimension `expected_dim`.
pub fn load_external_vectors(path: &Path, expected_dim: usize) -> Result<Vec<HiddenStates>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut reader = ByteReader::new(&bytes);
    let mut out = Vec::new();
    while !reader.is_done() {
        if reader.take(8)? != VECTOR_MAGIC {
            return Err(Error::Format("bad vector file magic".into()));
        }
        let version = reader.u32()?;
        if version != VECTOR_VERSION {
            return Err(Error::Format(format!("unsupported vector file version {version}")));
        }
        let n = reader.u64()? as usize;
        let d = reader.u64()? as usize;
        if d != expected_dim {
            return Err(Error::Dimension {
                expected: expected_dim,
                actual: d,
            });
        }
        let raw = reader.take(n * d * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(HiddenStates {
            h: Tensor::from_vec(n, d, data),
            view_seed: 0,
        });
    }
    Ok(out)
}

/// Bounds-checked little-endian reader over a byte buffer.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let chunk = self
            .pos
            .checked_add(len)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        self.pos += len;
        Ok(chunk)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
