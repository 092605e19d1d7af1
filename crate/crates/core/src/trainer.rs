//! Two-view contrastive training: configuration, the differentiable batch
//! loss, AdamW with a warmup schedule, the training loop, and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::chart::{marginals_tape, viterbi_nodes, BinaryTree, NodeScores};
use crate::encoder::{encode_tape, first_order_scores_tape, ByteReader, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::grad::Tape;
use crate::hashing::{batch_loss_tape, LossSpec, LossStats, ViewSentence, ViewTape};
use crate::numeric::derive_seed;
use crate::tensor::Tensor;
use crate::treebank::{collate, mask_augment, Corpus, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub bits: usize,
    pub dim: usize,
    pub layers: usize,
    pub p_mask: f64,
    pub dropout: f64,
    pub span_budget: usize,
    pub warmup_steps: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossSpec,
    pub tau: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Dev evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bits: 16,
            dim: 64,
            layers: 2,
            p_mask: 0.15,
            dropout: 0.1,
            span_budget: 1024,
            warmup_steps: 4000,
            train_steps: 20000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            loss: LossSpec::BALANCED_MIN,
            tau: 0.1,
            grad_clip: 0.0,
            eval_every: 1000,
        }
    }
}

/// Keys excluded from the config hash: they change how a run is driven, not
/// what model it produces a checkpoint for.
const UNHASHED_KEYS: &[&str] = &["seed", "eval_every"];

impl TrainConfig {
    /// Parses flat `key = value` text. `#` starts a comment; unknown keys are
    /// rejected. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.parse().map_err(|_| format!("bad value `{value}` for `{key}`"))
        }
        match key {
            "bits" => self.bits = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "p_mask" => self.p_mask = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "span_budget" => self.span_budget = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "train_steps" => self.train_steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "loss" => self.loss = value.parse().map_err(|e: Error| e.to_string())?,
            "tau" => self.tau = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.bits == 0 || self.dim < self.bits {
            return bad("need dim >= bits >= 1");
        }
        if self.warmup_steps > self.train_steps {
            return bad("warmup_steps exceeds train_steps");
        }
        if !(0.0..1.0).contains(&self.p_mask) || !(0.0..1.0).contains(&self.dropout) {
            return bad("p_mask and dropout must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.tau > 0.0 && self.eps > 0.0) || self.span_budget == 0 {
            return bad("lr, tau, eps and span_budget must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative");
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("bits", self.bits.to_string()),
            ("dim", self.dim.to_string()),
            ("layers", self.layers.to_string()),
            ("p_mask", format!("{:?}", self.p_mask)),
            ("dropout", format!("{:?}", self.dropout)),
            ("span_budget", self.span_budget.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("train_steps", self.train_steps.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("eps", format!("{:?}", self.eps)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("seed", self.seed.to_string()),
            ("loss", self.loss.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("grad_clip", format!("{:?}", self.grad_clip)),
            ("eval_every", self.eval_every.to_string()),
        ]
    }

    /// Canonical `key = value` text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 8 bytes of the SHA-256 of the canonical text, run-driving keys
    /// (`seed`, `eval_every`) excluded.
    pub fn hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        for (k, v) in self.entries() {
            if !UNHASHED_KEYS.contains(&k) {
                hasher.update(format!("{k}={v}\n").as_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn init_params(&self, vocab_size: usize) -> EncoderParams {
        EncoderParams::init(
            vocab_size,
            self.dim,
            self.layers,
            self.bits,
            self.dropout,
            derive_seed(&[self.seed, 0x1417]),
        )
    }
}

/// Linear warmup from 0 to the peak over `warmup_steps`, then linear decay to
/// 0 at `train_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let peak = config.lr;
    if step <= config.warmup_steps {
        if config.warmup_steps == 0 {
            return peak;
        }
        return peak * step as f64 / config.warmup_steps as f64;
    }
    if step >= config.train_steps {
        return 0.0;
    }
    peak * (config.train_steps - step) as f64 / (config.train_steps - config.warmup_steps) as f64
}

// ---------------------------------------------------------------------------
// optimizer

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update with decoupled weight decay. A pure function of its inputs.
pub fn adam_update(params: &mut EncoderParams, state: &mut AdamState, grads: &[Tensor], lr: f64, config: &TrainConfig) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, p) in params.tensors_mut().into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
        }
        let v = state.v[i].data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let step = (mi / c1) / ((vi / c2).sqrt() + config.eps) + config.weight_decay * *pi;
            *pi -= lr * step;
        }
    }
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// forward / backward

/// Seed of view `v` (1 or 2) at `step`.
pub fn view_seed(run_seed: u64, step: u64, view: u64) -> u64 {
    derive_seed(&[run_seed, step, view])
}

/// Outcome of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub stats: LossStats,
    /// Fraction of decoded trees (both views, `n >= 3`) that are right-branching.
    pub collapse: f64,
    /// `None` when no anchor had the sets its objective needs.
    pub grads: Option<Vec<Tensor>>,
}

/// Encodes both augmented views of `batch`, decodes trees, and evaluates the
/// two-direction contrastive loss and its parameter gradients.
pub fn loss_and_grads(params: &EncoderParams, batch: &[&[u32]], step: u64, config: &TrainConfig) -> Result<LossEval> {
    params.check_finite()?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let mut views: Vec<(Vec<ViewSentence>, Vec<BinaryTree>)> = Vec::with_capacity(2);
    let mut right = 0;
    let mut eligible = 0;
    for v in 1..=2u64 {
        let seed = view_seed(config.seed, step, v);
        let mut sentences = Vec::with_capacity(batch.len());
        let mut trees = Vec::with_capacity(batch.len());
        for (i, ids) in batch.iter().enumerate() {
            let n = ids.len();
            let sent_seed = derive_seed(&[seed, i as u64]);
            let masked = mask_augment(ids, config.p_mask, sent_seed);
            let h = encode_tape(&mut tape, &vars, &masked, derive_seed(&[sent_seed, 1]));
            let g = first_order_scores_tape(&mut tape, &vars, h);
            let chart = marginals_tape(&mut tape, g, n);
            let tree = viterbi_nodes(&NodeScores::new(n, tape.value(g).clone()));
            if n >= 3 {
                eligible += 1;
                right += tree.is_right_branching() as usize;
            }
            sentences.push(ViewSentence {
                n,
                g,
                split: chart.split,
            });
            trees.push(tree);
        }
        views.push((sentences, trees));
    }
    let a = ViewTape {
        sentences: &views[0].0,
        trees: &views[0].1,
    };
    let b = ViewTape {
        sentences: &views[1].0,
        trees: &views[1].1,
    };
    let (loss, stats) = batch_loss_tape(&mut tape, [&a, &b], batch, config.loss, config.tau);
    let collapse = if eligible == 0 {
        0.0
    } else {
        right as f64 / eligible as f64
    };
    let Some(loss) = loss else {
        return Ok(LossEval {
            loss: 0.0,
            stats,
            collapse,
            grads: None,
        });
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(step as usize));
    }
    let grads = tape.backward(loss)?;
    let grads = params
        .tensors()
        .iter()
        .enumerate()
        .map(|(id, (_, t))| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();
    Ok(LossEval {
        loss: value,
        stats,
        collapse,
        grads: Some(grads),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub collapse: f64,
    pub stats: LossStats,
}

/// Forward, backward, and one AdamW update at the 1-based `step`. On a
/// non-finite loss or gradient the parameters and optimizer are untouched.
pub fn train_step(
    params: &mut EncoderParams,
    opt: &mut AdamState,
    batch: &[&[u32]],
    step: u64,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    assert!(!batch.is_empty(), "empty batch");
    let lr = lr_at(step as usize, config);
    let eval = loss_and_grads(params, batch, step, config)?;
    if let Some(mut grads) = eval.grads {
        if config.grad_clip > 0.0 {
            clip_gradients(&mut grads, config.grad_clip);
        }
        adam_update(params, opt, &grads, lr, config);
    }
    Ok(StepMetrics {
        step,
        lr,
        loss: eval.loss,
        collapse: eval.collapse,
        stats: eval.stats,
    })
}

// ---------------------------------------------------------------------------
// checkpoints

const CHECKPOINT_MAGIC: &[u8; 8] = b"HPCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: u64,
    pub vocab: Vocab,
    pub step: u64,
    pub params: EncoderParams,
    pub opt: AdamState,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, vocab: Vocab, step: u64, params: EncoderParams, opt: AdamState) -> Self {
        Self {
            config_hash: config.hash(),
            config,
            vocab,
            step,
            params,
            opt,
        }
    }

    /// Fails with a hash error unless `requested` describes the same model.
    pub fn check_config(&self, requested: &TrainConfig) -> Result<()> {
        let requested = requested.hash();
        if requested != self.config_hash {
            return Err(Error::ConfigHash {
                checkpoint: self.config_hash,
                requested,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(b);
        }
        fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        put_bytes(&mut out, self.config.to_text().as_bytes());
        let words = self.vocab.user_words();
        out.extend_from_slice(&(words.len() as u64).to_le_bytes());
        for w in words {
            put_bytes(&mut out, w.as_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in &tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            put_tensor(&mut out, t);
        }
        out.extend_from_slice(&self.opt.t.to_le_bytes());
        for (m, v) in self.opt.m.iter().zip(&self.opt.v) {
            put_tensor(&mut out, m);
            put_tensor(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let stored_hash = r.u64()?;
        let string = |r: &mut ByteReader| -> Result<String> {
            let len = r.u64()? as usize;
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
        };
        let config = TrainConfig::parse(&string(&mut r)?)?;
        if config.hash() != stored_hash {
            return Err(Error::ConfigHash {
                checkpoint: stored_hash,
                requested: config.hash(),
            });
        }
        let nwords = r.u64()? as usize;
        let words = (0..nwords).map(|_| string(&mut r)).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_words(words);
        let step = r.u64()?;
        let mut params = config.init_params(vocab.len());
        let count = r.u64()? as usize;
        let expected: Vec<(String, usize, usize)> = params
            .tensors()
            .iter()
            .map(|(name, t)| (name.clone(), t.rows(), t.cols()))
            .collect();
        if count != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, config implies {}",
                expected.len()
            )));
        }
        let read_tensor = |r: &mut ByteReader, rows: usize, cols: usize| -> Result<Tensor> {
            let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::from_vec(rows, cols, data))
        };
        for ((name, rows, cols), slot) in expected.iter().zip(params.tensors_mut()) {
            let stored = string(&mut r)?;
            let (sr, sc) = (r.u64()? as usize, r.u64()? as usize);
            if &stored != name || (sr, sc) != (*rows, *cols) {
                return Err(Error::Format(format!(
                    "tensor `{stored}` {sr}x{sc} does not match `{name}` {rows}x{cols}"
                )));
            }
            *slot = read_tensor(&mut r, sr, sc)?;
        }
        let t = r.u64()?;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for (_, rows, cols) in &expected {
            m.push(read_tensor(&mut r, *rows, *cols)?);
            v.push(read_tensor(&mut r, *rows, *cols)?);
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config,
            config_hash: stored_hash,
            vocab,
            step,
            params,
            opt: AdamState { t, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// training loop

/// Steps the right-branching fraction must stay above [`COLLAPSE_THRESHOLD`]
/// before a warning is emitted.
pub const COLLAPSE_WINDOW: usize = 100;
pub const COLLAPSE_THRESHOLD: f64 = 0.98;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-dev checkpoint, or the final one without a dev set.
    pub best: Checkpoint,
    pub best_dev_f1: Option<f64>,
    pub final_step: u64,
    pub dev_history: Vec<(u64, f64)>,
    pub faults: usize,
    pub collapse_warnings: usize,
}

/// Header row of the metrics log.
pub const METRICS_HEADER: &str = "step\tlr\tloss\tcollapse_fraction";

/// Runs `train_steps` steps over collated batches of `corpus`, evaluating on
/// `dev` every `eval_every` steps and at the end. Writes one metrics row per
/// step and one `dev` row per evaluation to `metrics`.
pub fn train(
    corpus: &Corpus,
    dev: Option<&Corpus>,
    config: &TrainConfig,
    metrics: &mut dyn Write,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let io = |e| Error::io("<metrics>", e);
    writeln!(metrics, "{METRICS_HEADER}").map_err(io)?;
    let ids: Vec<Vec<u32>> = corpus.sentences.iter().map(|s| s.ids()).collect();
    let lengths = corpus.lengths();
    let mut params = config.init_params(corpus.vocab.len());
    let mut opt = AdamState::new(&params);
    let snapshot = |params: &EncoderParams, opt: &AdamState, step: u64| {
        Checkpoint::new(config.clone(), corpus.vocab.clone(), step, params.clone(), opt.clone())
    };
    let mut best = snapshot(&params, &opt, 0);
    let mut best_dev_f1 = None;
    let mut dev_history = Vec::new();
    let mut faults = 0;
    let mut collapse_warnings = 0;
    let mut collapsed_run = 0;

    let mut epoch = 0u64;
    let mut batches = collate(&lengths, config.span_budget, derive_seed(&[config.seed, epoch, 0xBA7C])).into_iter();
    for step in 1..=config.train_steps as u64 {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = collate(&lengths, config.span_budget, derive_seed(&[config.seed, epoch, 0xBA7C])).into_iter();
                batches.next().expect("non-empty corpus")
            }
        };
        let batch_ids: Vec<&[u32]> = batch.items.iter().map(|&i| ids[i].as_slice()).collect();
        match train_step(&mut params, &mut opt, &batch_ids, step, config) {
            Ok(m) => {
                writeln!(metrics, "{}\t{:.6e}\t{:.9}\t{:.4}", m.step, m.lr, m.loss, m.collapse).map_err(io)?;
                if m.collapse > COLLAPSE_THRESHOLD {
                    collapsed_run += 1;
                    if collapsed_run == COLLAPSE_WINDOW {
                        collapse_warnings += 1;
                        log::warn!(
                            "step {step}: over {:.0}% of decoded trees right-branching for {COLLAPSE_WINDOW} steps",
                            COLLAPSE_THRESHOLD * 100.0
                        );
                        collapsed_run = 0;
                    }
                } else {
                    collapsed_run = 0;
                }
            }
            Err(e @ (Error::NonFiniteLoss(_) | Error::Grad(_))) => {
                faults += 1;
                log::error!("step {step} aborted: {e}");
                writeln!(metrics, "{step}\t{:.6e}\tNaN\tNaN", lr_at(step as usize, config)).map_err(io)?;
            }
            Err(e) => return Err(e),
        }
        let due = config.eval_every > 0 && step % config.eval_every as u64 == 0;
        if let (Some(dev), true) = (dev, due || step == config.train_steps as u64) {
            let f1 = evaluate(&params, dev).mean();
            writeln!(metrics, "dev\t{step}\t{f1:.6}").map_err(io)?;
            log::info!("step {step}: dev F1 {:.2}", f1 * 100.0);
            dev_history.push((step, f1));
            if best_dev_f1.is_none_or(|b| f1 > b) {
                best_dev_f1 = Some(f1);
                best = snapshot(&params, &opt, step);
            }
        }
    }
    if dev.is_none() || config.train_steps == 0 {
        best = snapshot(&params, &opt, config.train_steps as u64);
    }
    Ok(TrainOutcome {
        best,
        best_dev_f1,
        final_step: config.train_steps as u64,
        dev_history,
        faults,
        collapse_warnings,
    })
}

/// Run-summary lines for several seeds: per-seed F1, mean, and max.
pub fn summarize_runs(runs: &[(u64, f64)]) -> String {
    let mut out = String::new();
    for (seed, f1) in runs {
        let _ = writeln!(out, "seed\t{seed}\t{:.2}", f1 * 100.0);
    }
    if !runs.is_empty() {
        let mean = runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64;
        let max = runs.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(out, "mean\t{:.2}", mean * 100.0);
        let _ = writeln!(out, "max\t{:.2}", max * 100.0);
    }
    out
}

/// Key-value view of a config, for display.
pub fn config_table(config: &TrainConfig) -> BTreeMap<&'static str, String> {
    config.entries().into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{Grammar, DEFAULT_GRAMMAR};

    fn small_config() -> TrainConfig {
        TrainConfig {
            bits: 4,
            dim: 8,
            layers: 1,
            span_budget: 40,
            warmup_steps: 2,
            train_steps: 10,
            lr: 5e-3,
            seed: 3,
            eval_every: 0,
            ..TrainConfig::default()
        }
    }

    fn small_corpus(count: usize) -> Corpus {
        let grammar = Grammar::parse(DEFAULT_GRAMMAR).unwrap();
        let sentences = grammar.sample_corpus(count, 2, 8, 11);
        let vocab = Vocab::build(&sentences);
        Corpus::new(sentences, vocab)
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(4000, &cfg), 1e-3);
        assert!((lr_at(12000, &cfg) - 5e-4).abs() < 1e-15);
        assert_eq!(lr_at(20000, &cfg), 0.0);
        assert!((lr_at(2000, &cfg) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn config_text_round_trip_and_hash() {
        let cfg = TrainConfig {
            loss: "ns:maxp".parse().unwrap(),
            tau: 0.07,
            ..TrainConfig::default()
        };
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seed = 99;
        assert_eq!(other.hash(), cfg.hash());
        other.bits = 8;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn config_parser_rejects_bad_input() {
        let parsed = TrainConfig::parse("# comment\nbits = 8  # trailing\n\nloss = max\n").unwrap();
        assert_eq!(parsed.bits, 8);
        assert_eq!(parsed.loss, LossSpec::MAX);
        for bad in [
            "bogus = 1",
            "bits 8",
            "bits = x",
            "warmup_steps = 5\ntrain_steps = 4",
            "lr = 0",
        ] {
            assert!(matches!(TrainConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise() {
        let corpus = small_corpus(6);
        let mut cfg = small_config();
        cfg.lr = 0.0;
        let mut params = cfg.init_params(corpus.vocab.len());
        let before = params.clone();
        let mut opt = AdamState::new(&params);
        let ids: Vec<Vec<u32>> = corpus.sentences.iter().map(|s| s.ids()).collect();
        let batch: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
        for step in 1..=3 {
            train_step(&mut params, &mut opt, &batch, step, &cfg).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn tape_loss_matches_direct_loss_on_identical_views() {
        let corpus = small_corpus(4);
        let mut cfg = small_config();
        cfg.p_mask = 0.0;
        cfg.dropout = 0.0;
        let params = cfg.init_params(corpus.vocab.len());
        let ids: Vec<Vec<u32>> = corpus.sentences.iter().map(|s| s.ids()).collect();
        let batch: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
        let eval = loss_and_grads(&params, &batch, 1, &cfg).unwrap();

        let charts: Vec<_> = batch
            .iter()
            .map(|ids| {
                let h = crate::encoder::encode(ids, &params, 0).unwrap();
                let table = crate::encoder::zero_order_scores(&h.h, &params);
                crate::chart::marginals(&table, crate::chart::Order::First)
            })
            .collect();
        let trees: Vec<_> = charts.iter().map(|c| viterbi_nodes(c.scores())).collect();
        let view = crate::hashing::ViewCharts {
            charts: &charts,
            trees: &trees,
        };
        let direct = crate::hashing::batch_loss([&view, &view], &batch, cfg.loss, cfg.tau);
        assert!(
            (eval.loss - direct.loss).abs() < 1e-9,
            "{} vs {}",
            eval.loss,
            direct.loss
        );
    }

    #[test]
    fn replay_is_deterministic() {
        let corpus = small_corpus(12);
        let cfg = small_config();
        let run = || {
            let mut log = Vec::new();
            let out = train(&corpus, None, &cfg, &mut log).unwrap();
            (out.best.params, log)
        };
        let (a, log_a) = run();
        let (b, log_b) = run();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        let text = String::from_utf8(log_a).unwrap();
        assert_eq!(text.lines().count(), 11);
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let corpus = small_corpus(3);
        let mut cfg = small_config();
        cfg.train_steps = 0;
        cfg.warmup_steps = 0;
        let out = train(&corpus, Some(&corpus), &cfg, &mut Vec::new()).unwrap();
        assert_eq!(out.best.params, cfg.init_params(corpus.vocab.len()));
        assert_eq!(out.best.step, 0);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let corpus = Corpus::new(Vec::new(), Vocab::new());
        assert!(matches!(
            train(&corpus, None, &small_config(), &mut Vec::new()),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let corpus = small_corpus(8);
        let cfg = small_config();
        let out = train(&corpus, None, &cfg, &mut Vec::new()).unwrap();
        let bytes = out.best.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, out.best);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut other = cfg.clone();
        other.bits = 2;
        assert!(matches!(back.check_config(&other), Err(Error::ConfigHash { .. })));
        back.check_config(&cfg).unwrap();
    }

    #[test]
    fn checkpointed_params_reproduce_the_step_loss() {
        let corpus = small_corpus(6);
        let cfg = small_config();
        let out = train(&corpus, None, &cfg, &mut Vec::new()).unwrap();
        let back = Checkpoint::from_bytes(&out.best.to_bytes()).unwrap();
        let ids: Vec<Vec<u32>> = corpus.sentences.iter().map(|s| s.ids()).collect();
        let batch: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
        let a = loss_and_grads(&out.best.params, &batch, 7, &cfg).unwrap();
        let b = loss_and_grads(&back.params, &batch, 7, &cfg).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
}
