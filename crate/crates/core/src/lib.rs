//! Unsupervised constituency parsing by contrastive hashing over first-order
//! bit-level CKY charts.
//!
//! A small encoder produces hidden states, an attention hash layer turns them
//! into one score table per bit, and a first-order CKY chart turns the tables
//! into tree marginals and Viterbi trees whose nodes carry `K`-bit codes.
//! Training pulls together spans with identical surface text and pushes the
//! rest apart, using marginals of one augmented view selected by the decoded
//! tree of another.

pub mod chart;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grad;
pub mod hashing;
pub mod numeric;
pub mod selfcheck;
pub mod span;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod treebank;

pub use chart::{BinaryTree, Chart, NodeScores, Order, TreeNode};
pub use encoder::{EncoderParams, HiddenStates, ScoreTable};
pub use error::{Error, Result};
pub use eval::F1Report;
pub use hashing::{LossSpec, NegativeTerm, PositiveTerm};
pub use span::{Span, SpanLayout, Triple};
pub use tensor::Tensor;
pub use trainer::{Checkpoint, TrainConfig};
pub use treebank::{Corpus, GoldTree, Sentence, Token, Vocab};
