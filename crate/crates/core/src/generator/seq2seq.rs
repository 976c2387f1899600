//! Encoder-decoder transformer conditioned on `[document SEP kpeq]`.

use rand_chacha::ChaCha8Rng;

use super::DocConditional;
use crate::encoder::{AttentionParams, Encoder, EncoderConfig, FeedForwardParams, LayerNormParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, SoftmaxMask, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{log_softmax, Matrix};
use crate::vocab::{TokenId, Vocab, BOS, EOS, SEP};

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: LayerNormParams,
    self_attn: AttentionParams,
    ln_cross: LayerNormParams,
    cross_attn: AttentionParams,
    ln_ffn: LayerNormParams,
    ffn: FeedForwardParams,
}

/// Token embeddings are shared by the encoder, the decoder input and the
/// output projection.
#[derive(Debug, Clone)]
pub struct Generator {
    config: EncoderConfig,
    encoder: Encoder,
    dec_pos: ParamId,
    layers: Vec<DecoderLayer>,
    ln_final: LayerNormParams,
}

impl Generator {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::new(store, &format!("{prefix}.enc"), config, rng)?;
        let d = config.d_model;
        let dec_pos = store.uniform(format!("{prefix}.dec.pos_emb"), config.max_seq_len, d, d, rng);
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("{prefix}.dec.l{l}");
                DecoderLayer {
                    ln_self: LayerNormParams::new(store, &format!("{p}.ln_self"), d),
                    self_attn: AttentionParams::new(store, &format!("{p}.self"), d, config.n_heads, rng),
                    ln_cross: LayerNormParams::new(store, &format!("{p}.ln_cross"), d),
                    cross_attn: AttentionParams::new(store, &format!("{p}.cross"), d, config.n_heads, rng),
                    ln_ffn: LayerNormParams::new(store, &format!("{p}.ln_ffn"), d),
                    ffn: FeedForwardParams::new(store, &format!("{p}.ffn"), d, d * config.ffn_mult, rng),
                }
            })
            .collect();
        let ln_final = LayerNormParams::new(store, &format!("{prefix}.dec.ln_final"), d);
        Ok(Self { config: config.clone(), encoder, dec_pos, layers, ln_final })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Longest target (including EOS) the decoder can score.
    pub fn max_target_len(&self) -> usize {
        self.config.max_seq_len
    }

    /// `doc [SEP] kpeq`. When too long, the oldest part of the query is
    /// dropped first, then the document tail.
    pub fn source_tokens(&self, doc: &[TokenId], kpeq: &[TokenId]) -> Vec<TokenId> {
        let max = self.config.max_seq_len;
        let doc_keep = doc.len().min(max.saturating_sub(1));
        let q_keep = kpeq.len().min(max - doc_keep - 1);
        let mut out = Vec::with_capacity(doc_keep + 1 + q_keep);
        out.extend_from_slice(&doc[..doc_keep]);
        out.push(SEP);
        out.extend_from_slice(&kpeq[kpeq.len() - q_keep..]);
        out
    }

    pub fn encode_graph(&self, g: &mut Graph, store: &ParamStore, source: &[TokenId]) -> Result<Var> {
        self.encoder.forward(g, store, source, None)
    }

    pub fn memory(&self, store: &ParamStore, source: &[TokenId]) -> Result<Matrix> {
        let mut g = Graph::inference();
        let m = self.encode_graph(&mut g, store, source)?;
        Ok(g.value(m).clone())
    }

    fn decode_states(&self, g: &mut Graph, store: &ParamStore, memory: Var, input: &[TokenId]) -> Result<Var> {
        let n = input.len();
        if n == 0 {
            return Err(Error::EmptyCandidate);
        }
        if n > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: n, max: self.config.max_seq_len });
        }
        let ids: Vec<usize> = input.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.config.vocab_size });
        }
        let rate = self.config.dropout_rate;
        let table = g.param(store, self.encoder.token_embedding());
        let tok = g.gather_rows(table, &ids);
        let pos_table = g.param(store, self.dec_pos);
        let pos = g.slice_rows(pos_table, 0, n);
        let mut x = g.add(tok, pos);
        x = g.dropout(x, rate);
        let causal = SoftmaxMask { keys: None, causal: true };
        let open = SoftmaxMask::default();
        for layer in &self.layers {
            let h = layer.ln_self.forward(g, store, x);
            let a = layer.self_attn.forward(g, store, h, h, &causal);
            let a = g.dropout(a, rate);
            x = g.add(x, a);
            let h = layer.ln_cross.forward(g, store, x);
            let c = layer.cross_attn.forward(g, store, h, memory, &open);
            let c = g.dropout(c, rate);
            x = g.add(x, c);
            let h = layer.ln_ffn.forward(g, store, x);
            let f = layer.ffn.forward(g, store, h, rate);
            let f = g.dropout(f, rate);
            x = g.add(x, f);
        }
        Ok(self.ln_final.forward(g, store, x))
    }

    /// `L x V` next-token logits for decoder input `input`.
    pub fn logits_graph(&self, g: &mut Graph, store: &ParamStore, memory: Var, input: &[TokenId]) -> Result<Var> {
        let h = self.decode_states(g, store, memory, input)?;
        let table = g.param(store, self.encoder.token_embedding());
        Ok(g.matmul_t(h, table))
    }

    /// `L x 1` log `g(y_i | source, y_<i)` under teacher forcing.
    pub fn target_log_probs_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        source: &[TokenId],
        target: &[TokenId],
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::EmptyCandidate);
        }
        let memory = self.encode_graph(g, store, source)?;
        let input = teacher_input(target);
        let logits = self.logits_graph(g, store, memory, &input)?;
        let ls = g.log_softmax_rows(logits);
        let idx: Vec<(usize, usize)> = target.iter().enumerate().map(|(i, &t)| (i, t as usize)).collect();
        Ok(g.pick(ls, &idx))
    }

    /// Per-document conditionals for inference, with encoder memories cached.
    pub fn conditional<'a>(
        &'a self,
        store: &'a ParamStore,
        sources: &[Vec<TokenId>],
    ) -> Result<GeneratorConditional<'a>> {
        let memories = sources.iter().map(|s| self.memory(store, s)).collect::<Result<Vec<_>>>()?;
        Ok(GeneratorConditional { generator: self, store, memories })
    }
}

/// `[BOS] + target[..L-1]`.
pub fn teacher_input(target: &[TokenId]) -> Vec<TokenId> {
    std::iter::once(BOS).chain(target[..target.len().saturating_sub(1)].iter().copied()).collect()
}

/// Reply tokens followed by EOS, cut to at most `max_len` tokens in total.
pub fn target_tokens(vocab: &Vocab, text: &str, max_len: usize) -> Vec<TokenId> {
    let mut t = vocab.encode(text);
    t.truncate(max_len.saturating_sub(1));
    t.push(EOS);
    t
}

pub struct GeneratorConditional<'a> {
    generator: &'a Generator,
    store: &'a ParamStore,
    memories: Vec<Matrix>,
}

impl DocConditional for GeneratorConditional<'_> {
    fn vocab_size(&self) -> usize {
        self.generator.config.vocab_size
    }

    fn num_docs(&self) -> usize {
        self.memories.len()
    }

    fn max_len(&self) -> usize {
        self.generator.max_target_len()
    }

    fn next_log_probs(&self, doc: usize, prefix: &[TokenId]) -> Vec<f64> {
        let mut g = Graph::inference();
        let memory = g.constant(self.memories[doc].clone());
        let input: Vec<TokenId> = std::iter::once(BOS).chain(prefix.iter().copied()).collect();
        let h = self
            .generator
            .decode_states(&mut g, self.store, memory, &input)
            .expect("prefix fits the decoder");
        let last = g.slice_rows(h, input.len() - 1, 1);
        let table = g.param(self.store, self.generator.encoder.token_embedding());
        let logits = g.matmul_t(last, table);
        log_softmax(g.value(logits).data())
    }

    fn sequence_log_prob(&self, doc: usize, y: &[TokenId]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let mut g = Graph::inference();
        let memory = g.constant(self.memories[doc].clone());
        let input = teacher_input(y);
        let logits = self
            .generator
            .logits_graph(&mut g, self.store, memory, &input)
            .expect("target fits the decoder");
        let ls = g.log_softmax_rows(logits);
        y.iter().enumerate().map(|(i, &t)| g.value(ls).get(i, t as usize)).sum()
    }
}
