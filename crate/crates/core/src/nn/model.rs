//! A small bidirectional transformer denoiser.
//!
//! Pre-norm blocks: `h += Attn(LN(h))`, `h += MLP(LN(h))`, then a final
//! layer norm and an untied output projection to vocabulary log-probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Bound, Graph, Segment, Shape, Var};
use super::params::{truncated_normal, ParameterSet};
use crate::error::{domain, Error, Result};
use crate::vocab::{Token, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Includes the reserved pad and mask symbols.
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Hidden width of the feed-forward block.
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    /// Learned absolute position embeddings.
    #[serde(default = "yes")]
    pub positional: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_mlp_hidden() -> usize {
    0
}
fn yes() -> bool {
    true
}
fn default_init_std() -> f64 {
    0.02
}

impl DenoiserConfig {
    pub fn new(vocab_size: usize, width: usize, layers: usize, heads: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            width,
            layers,
            heads,
            max_len,
            mlp_hidden: 2 * width,
            positional: true,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config(
                "vocabulary must hold pad, mask and at least one symbol".into(),
            ));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        if self.mlp_hidden == 0 {
            2 * self.width
        } else {
            self.mlp_hidden
        }
    }
}

/// A batch of token sequences laid out back to back.
#[derive(Debug, Clone, Default)]
pub struct TokenBatch {
    pub tokens: Vec<Token>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl TokenBatch {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one sequence with positions `0..len`; returns its first row.
    pub fn push(&mut self, tokens: &[Token]) -> usize {
        let pos: Vec<usize> = (0..tokens.len()).collect();
        self.push_with_positions(tokens, &pos)
    }

    pub fn push_with_positions(&mut self, tokens: &[Token], positions: &[usize]) -> usize {
        assert_eq!(tokens.len(), positions.len());
        let start = self.tokens.len();
        self.tokens.extend_from_slice(tokens);
        self.positions.extend_from_slice(positions);
        self.segments.push(Segment {
            start,
            len: tokens.len(),
        });
        start
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    /// Fresh parameters: truncated normal for matrices, zeros for biases,
    /// unit gains for layer norms.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let c = &self.cfg;
        let (v, d, hdn) = (c.vocab_size, c.width, c.hidden());
        let std = c.init_std;
        let mut p = ParameterSet::new();
        let add = |p: &mut ParameterSet, name: &str, shape: &[usize], data: Vec<f64>| {
            p.insert(name, shape, data).expect("fresh names");
        };
        add(&mut p, "tok_emb", &[v, d], truncated_normal(rng, std, v * d));
        if c.positional {
            add(
                &mut p,
                "pos_emb",
                &[c.max_len, d],
                truncated_normal(rng, std, c.max_len * d),
            );
        }
        for l in 0..c.layers {
            add(&mut p, &format!("l{l}.ln1.g"), &[d], vec![1.0; d]);
            add(&mut p, &format!("l{l}.ln1.b"), &[d], vec![0.0; d]);
            for w in ["wq", "wk", "wv", "wo"] {
                add(
                    &mut p,
                    &format!("l{l}.attn.{w}"),
                    &[d, d],
                    truncated_normal(rng, std, d * d),
                );
                let b = format!("l{l}.attn.b{}", &w[1..]);
                add(&mut p, &b, &[d], vec![0.0; d]);
            }
            add(&mut p, &format!("l{l}.ln2.g"), &[d], vec![1.0; d]);
            add(&mut p, &format!("l{l}.ln2.b"), &[d], vec![0.0; d]);
            add(
                &mut p,
                &format!("l{l}.mlp.w1"),
                &[d, hdn],
                truncated_normal(rng, std, d * hdn),
            );
            add(&mut p, &format!("l{l}.mlp.b1"), &[hdn], vec![0.0; hdn]);
            add(
                &mut p,
                &format!("l{l}.mlp.w2"),
                &[hdn, d],
                truncated_normal(rng, std, hdn * d),
            );
            add(&mut p, &format!("l{l}.mlp.b2"), &[d], vec![0.0; d]);
        }
        add(&mut p, "ln_f.g", &[d], vec![1.0; d]);
        add(&mut p, "ln_f.b", &[d], vec![0.0; d]);
        add(&mut p, "head.w", &[d, v], truncated_normal(rng, std, d * v));
        add(&mut p, "head.b", &[v], vec![0.0; v]);
        p
    }

    pub fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        for sg in &batch.segments {
            if sg.len > self.cfg.max_len {
                return Err(domain(format!(
                    "sequence length {} exceeds maximum {}",
                    sg.len, self.cfg.max_len
                )));
            }
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(domain(format!(
                "token id {t} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        if let Some(&p) = batch.positions.iter().find(|&&p| p >= self.cfg.max_len) {
            return Err(domain(format!("position {p} exceeds maximum {}", self.cfg.max_len)));
        }
        Ok(())
    }

    /// Appends the forward pass to `g`; returns per-row log-probabilities `[rows, vocab]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &TokenBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let c = &self.cfg;
        let w = |name: &str| p.by_name(name).unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let mut h = g.embed(w("tok_emb"), &batch.tokens);
        if c.positional {
            let pos: Vec<u32> = batch.positions.iter().map(|&x| x as u32).collect();
            let pe = g.embed(w("pos_emb"), &pos);
            h = g.add(h, pe);
        }
        let key_valid: Vec<bool> = batch.tokens.iter().map(|&t| t != PAD).collect();
        for l in 0..c.layers {
            let a = g.layer_norm(h, w(&format!("l{l}.ln1.g")), w(&format!("l{l}.ln1.b")));
            let proj = |g: &mut Graph, x: Var, name: &str| {
                let m = g.matmul(x, w(&format!("l{l}.attn.w{name}")));
                g.add_row(m, w(&format!("l{l}.attn.b{name}")))
            };
            let q = proj(g, a, "q");
            let k = proj(g, a, "k");
            let v = proj(g, a, "v");
            let att = g.attention(q, k, v, c.heads, &batch.segments, &key_valid);
            let o = proj(g, att, "o");
            h = g.add(h, o);
            let m = g.layer_norm(h, w(&format!("l{l}.ln2.g")), w(&format!("l{l}.ln2.b")));
            let m = g.matmul(m, w(&format!("l{l}.mlp.w1")));
            let m = g.add_row(m, w(&format!("l{l}.mlp.b1")));
            let m = g.gelu(m);
            let m = g.matmul(m, w(&format!("l{l}.mlp.w2")));
            let m = g.add_row(m, w(&format!("l{l}.mlp.b2")));
            h = g.add(h, m);
        }
        let h = g.layer_norm(h, w("ln_f.g"), w("ln_f.b"));
        let logits = g.matmul(h, w("head.w"));
        let logits = g.add_row(logits, w("head.b"));
        let out = g.log_softmax(logits);
        Ok(g.name(out, "log_probs"))
    }
}

/// Per-position log-probabilities over the vocabulary for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbTable {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl LogProbTable {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.vocab..(r + 1) * self.vocab]
    }
}

/// Evaluates the denoiser on one (possibly masked) sequence.
///
/// `prompt_len` marks the conditioning prefix; the denoiser attends over the
/// whole sequence in both directions regardless.
pub fn forward_logits(
    model: &Denoiser,
    params: &ParameterSet,
    tokens: &[Token],
    prompt_len: usize,
) -> Result<LogProbTable> {
    if prompt_len > tokens.len() {
        return Err(domain("prompt length exceeds sequence length"));
    }
    let mut batch = TokenBatch::new();
    batch.push(tokens);
    let shape = eval_batch(model, params, &batch)?;
    Ok(LogProbTable {
        rows: tokens.len(),
        vocab: model.vocab_size(),
        data: shape,
    })
}

/// Forward pass over a whole batch without keeping the tape; `[rows * vocab]`.
pub fn eval_batch(model: &Denoiser, params: &ParameterSet, batch: &TokenBatch) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = g.bind(params);
    let out = model.forward(&mut g, &b, batch)?;
    debug_assert_eq!(g.shape(out), Shape::new(batch.rows(), model.vocab_size()));
    Ok(g.value(out).to_vec())
}
