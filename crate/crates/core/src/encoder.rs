//! Small pre-norm transformer encoder.
//!
//! The building blocks here ([`AttentionParams`], [`FeedForwardParams`],
//! [`LayerNormParams`]) are shared with the generator's decoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, SoftmaxMask, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::vocab::{TokenId, CLS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    /// Feed-forward width as a multiple of `d_model`.
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_ffn_mult() -> usize {
    4
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            dropout_rate: 0.0,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.max_seq_len == 0
            || self.ffn_mult == 0
        {
            return Err(Error::InvalidConfig("encoder sizes must all be at least 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self { gain: store.ones(format!("{prefix}.g"), 1, d), bias: store.zeros(format!("{prefix}.b"), 1, d) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.uniform(format!("{prefix}.w"), d_in, d_out, d_in, rng),
            bias: store.zeros(format!("{prefix}.b"), 1, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{prefix}.q"), d, d, rng),
            k: Linear::new(store, &format!("{prefix}.k"), d, d, rng),
            v: Linear::new(store, &format!("{prefix}.v"), d, d, rng),
            out: Linear::new(store, &format!("{prefix}.o"), d, d, rng),
            n_heads,
        }
    }

    /// Multi-head scaled dot-product attention of `queries` over `keys`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        mask: &SoftmaxMask<'_>,
    ) -> Var {
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, keys);
        let v = self.v.forward(g, store, keys);
        let d = g.value(q).cols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.n_heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, scale);
                let weights = g.softmax_rows(scores, mask);
                g.matmul(weights, vh)
            })
            .collect();
        let joined = if heads.len() == 1 { heads[0] } else { g.hcat(&heads) };
        self.out.forward(g, store, joined)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForwardParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{prefix}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{prefix}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        let h = g.dropout(h, dropout);
        self.down.forward(g, store, h)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: LayerNormParams,
    attn: AttentionParams,
    ln_ffn: LayerNormParams,
    ffn: FeedForwardParams,
}

/// Token states `h_1..h_n` with the mask that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStates {
    pub states: Matrix,
    pub mask: Vec<bool>,
}

impl TokenStates {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    prefix: String,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<EncoderLayer>,
    ln_final: LayerNormParams,
}

impl Encoder {
    /// Registers a fresh encoder under `prefix` with its own token embedding.
    pub fn new(store: &mut ParamStore, prefix: &str, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let tok_emb =
            store.uniform(format!("{prefix}.tok_emb"), config.vocab_size, config.d_model, config.d_model, rng);
        Self::with_embedding(store, prefix, config, tok_emb, rng)
    }

    /// Registers an encoder that reads tokens through an existing embedding table.
    pub fn with_embedding(
        store: &mut ParamStore,
        prefix: &str,
        config: &EncoderConfig,
        tok_emb: ParamId,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let pos_emb = store.uniform(format!("{prefix}.pos_emb"), config.max_seq_len, d, d, rng);
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                EncoderLayer {
                    ln_attn: LayerNormParams::new(store, &format!("{p}.ln_attn"), d),
                    attn: AttentionParams::new(store, &format!("{p}.attn"), d, config.n_heads, rng),
                    ln_ffn: LayerNormParams::new(store, &format!("{p}.ln_ffn"), d),
                    ffn: FeedForwardParams::new(store, &format!("{p}.ffn"), d, d * config.ffn_mult, rng),
                }
            })
            .collect();
        let ln_final = LayerNormParams::new(store, &format!("{prefix}.ln_final"), d);
        Ok(Self { config: config.clone(), prefix: prefix.to_string(), tok_emb, pos_emb, layers, ln_final })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    /// Encodes `tokens`; returns the `n x d_model` state matrix.
    /// Positions with `mask[i] == false` are never attended to.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: &[TokenId], mask: Option<&[bool]>) -> Result<Var> {
        let n = tokens.len();
        if n > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: n, max: self.config.max_seq_len });
        }
        if n == 0 {
            return Err(Error::EmptyCandidate);
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::ShapeMismatch(format!("mask of {} for {n} tokens", m.len())));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::AllMasked);
            }
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.config.vocab_size });
        }
        let table = g.param(store, self.tok_emb);
        let tok = g.gather_rows(table, &ids);
        let pos_table = g.param(store, self.pos_emb);
        let pos = g.slice_rows(pos_table, 0, n);
        let mut x = g.add(tok, pos);
        x = g.dropout(x, self.config.dropout_rate);
        let mask = SoftmaxMask { keys: mask, causal: false };
        for layer in &self.layers {
            let h = layer.ln_attn.forward(g, store, x);
            let a = layer.attn.forward(g, store, h, h, &mask);
            let a = g.dropout(a, self.config.dropout_rate);
            x = g.add(x, a);
            let h = layer.ln_ffn.forward(g, store, x);
            let f = layer.ffn.forward(g, store, h, self.config.dropout_rate);
            let f = g.dropout(f, self.config.dropout_rate);
            x = g.add(x, f);
        }
        Ok(self.ln_final.forward(g, store, x))
    }

    /// `[CLS] + tokens`, truncated to `max_seq_len`.
    pub fn with_cls(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        let keep = tokens.len().min(self.config.max_seq_len - 1);
        std::iter::once(CLS).chain(tokens[..keep].iter().copied()).collect()
    }

    /// Position-0 state of `[CLS] + tokens` as a `1 x d_model` node.
    pub fn pooled(&self, g: &mut Graph, store: &ParamStore, tokens: &[TokenId]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptyCandidate);
        }
        let seq = self.with_cls(tokens);
        let states = self.forward(g, store, &seq, None)?;
        Ok(g.slice_rows(states, 0, 1))
    }
}

/// Keeps the leading token and as much of the tail as fits in `max`.
pub fn keep_first_and_tail(tokens: &[TokenId], max: usize) -> Vec<TokenId> {
    if tokens.len() <= max || max == 0 {
        return tokens[..tokens.len().min(max)].to_vec();
    }
    let tail = max - 1;
    std::iter::once(tokens[0]).chain(tokens[tokens.len() - tail..].iter().copied()).collect()
}

/// Context encoding of an input sequence (inference mode).
pub fn encode_context(encoder: &Encoder, store: &ParamStore, tokens: &[TokenId]) -> Result<TokenStates> {
    let mut g = Graph::inference();
    let states = encoder.forward(&mut g, store, tokens, None)?;
    Ok(TokenStates { states: g.value(states).clone(), mask: vec![true; tokens.len()] })
}

/// Candidate embedding: the CLS-slot state of `[CLS] + candidate`.
pub fn encode_candidate(encoder: &Encoder, store: &ParamStore, candidate: &[TokenId]) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let pooled = encoder.pooled(&mut g, store, candidate)?;
    Ok(g.value(pooled).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (ParamStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { vocab_size: 20, d_model: 8, n_layers: 2, n_heads: 2, max_seq_len: 12, ..Default::default() };
        let enc = Encoder::new(&mut store, "enc", &cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn length_one_input_gives_one_state() {
        let (store, enc) = setup();
        let s = encode_context(&enc, &store, &[CLS]).unwrap();
        assert_eq!(s.states.shape(), (1, 8));
    }

    #[test]
    fn inference_is_deterministic() {
        let (store, enc) = setup();
        let a = encode_context(&enc, &store, &[1, 7, 9, 2, 12]).unwrap();
        let b = encode_context(&enc, &store, &[1, 7, 9, 2, 12]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn positional_encoding_breaks_permutation_symmetry() {
        let (store, enc) = setup();
        let a = encode_context(&enc, &store, &[1, 7, 9, 2, 12]).unwrap();
        let b = encode_context(&enc, &store, &[1, 9, 7, 2, 12]).unwrap();
        assert!(a.states.max_abs_diff(&b.states) > 1e-6);
    }

    #[test]
    fn candidate_embedding_is_row_zero() {
        let (store, enc) = setup();
        let cand = [7, 8, 9];
        let emb = encode_candidate(&enc, &store, &cand).unwrap();
        assert_eq!(emb.len(), 8);
        let full = encode_context(&enc, &store, &[CLS, 7, 8, 9]).unwrap();
        assert_eq!(emb.as_slice(), full.states.row(0));
        assert!(matches!(encode_candidate(&enc, &store, &[]), Err(Error::EmptyCandidate)));
    }

    #[test]
    fn distinct_candidates_embed_differently() {
        let (store, enc) = setup();
        let a = encode_candidate(&enc, &store, &[7, 8]).unwrap();
        let b = encode_candidate(&enc, &store, &[9, 10]).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn head_and_tail_truncation() {
        assert_eq!(keep_first_and_tail(&[1, 2, 3, 4, 5], 3), vec![1, 4, 5]);
        assert_eq!(keep_first_and_tail(&[1, 2], 3), vec![1, 2]);
    }

    #[test]
    fn too_long_is_rejected() {
        let (store, enc) = setup();
        let long = vec![7; 13];
        assert!(matches!(encode_context(&enc, &store, &long), Err(Error::SequenceTooLong { len: 13, max: 12 })));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = EncoderConfig { d_model: 10, n_heads: 4, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn padding_leaves_unmasked_states_unchanged() {
        let (store, enc) = setup();
        let toks = [1, 7, 9, 2, 12];
        let mut g = Graph::inference();
        let plain = enc.forward(&mut g, &store, &toks, None).unwrap();
        let plain = g.value(plain).clone();
        let padded: Vec<TokenId> = toks.iter().copied().chain([crate::vocab::PAD; 4]).collect();
        let mask: Vec<bool> = (0..padded.len()).map(|i| i < toks.len()).collect();
        let mut g = Graph::inference();
        let out = enc.forward(&mut g, &store, &padded, Some(&mask)).unwrap();
        let head = g.value(out).slice_rows(0, toks.len());
        assert!(head.max_abs_diff(&plain) < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { vocab_size: 10, d_model: 8, n_layers: 1, n_heads: 2, max_seq_len: 6, ..Default::default() };
        let enc = Encoder::new(&mut store, "enc", &cfg, &mut rng).unwrap();
        let probe = Matrix::new(5, 8, (0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect());
        let checks = crate::gradcheck::check_gradients(&store, 1e-4, |g, s| {
            let h = enc.forward(g, s, &[1, 6, 7, 8, 2], None).unwrap();
            let w = g.constant(probe.clone());
            let m = g.mul(h, w);
            g.sum(m)
        });
        assert!(!checks.is_empty());
        for c in &checks {
            assert!(c.relative_error < 1e-4, "{} {}", c.name, c.relative_error);
        }
    }
}
