//! Query construction and retrieval-augmented decoding.
//!
//! Everything that marginalizes over documents is written against
//! [`DocConditional`], so the same code drives the trained decoder and
//! hand-set toy distributions.

mod seq2seq;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use seq2seq::{target_tokens, teacher_input, Generator, GeneratorConditional};

use crate::corpus::{DialogueEpisode, InputSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grounding::PersonaDecision;
use crate::tensor::{log_sum_exp, Matrix};
use crate::vocab::{TokenId, Vocab, EOS, SEP};

/// Which selections are replaced by the gold labels when building the query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GtInjection {
    pub knowledge: bool,
    pub persona: bool,
}

impl GtInjection {
    pub const NONE: GtInjection = GtInjection { knowledge: false, persona: false };
    pub const BOTH: GtInjection = GtInjection { knowledge: true, persona: true };

    pub fn label(self) -> &'static str {
        match (self.knowledge, self.persona) {
            (false, false) => "none",
            (true, false) => "gt_k",
            (false, true) => "gt_p",
            (true, true) => "gt_k+gt_p",
        }
    }
}

impl std::str::FromStr for GtInjection {
    type Err = Error;

    /// `none`, `gt_k`, `gt_p`, or `both` (also `gt_k+gt_p`).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GtInjection::NONE),
            "gt_k" => Ok(GtInjection { knowledge: true, persona: false }),
            "gt_p" => Ok(GtInjection { knowledge: false, persona: true }),
            "both" | "gt_k+gt_p" => Ok(GtInjection::BOTH),
            other => Err(Error::InvalidConfig(format!("unknown injection {other:?}"))),
        }
    }
}

/// `[U; SEP; selected personas (ascending); SEP; selected knowledge]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kpeq {
    pub tokens: Vec<TokenId>,
    pub personas: Vec<usize>,
    pub knowledge: usize,
}

pub fn build_kpeq(
    input: &InputSequence,
    decision: &PersonaDecision,
    knowledge: usize,
    episode: &DialogueEpisode,
    round: usize,
    vocab: &Vocab,
    inject: GtInjection,
) -> Result<Kpeq> {
    if round >= episode.num_rounds() {
        return Err(Error::RoundOutOfRange { round, rounds: episode.num_rounds() });
    }
    let personas = if inject.persona { episode.gt_persona_indices(round) } else { decision.selected.clone() };
    let knowledge = if inject.knowledge { episode.gt_knowledge_index[round] } else { knowledge };
    if personas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::SelectionInvalid(format!("persona indices {personas:?} are not strictly ascending")));
    }
    if let Some(&bad) = personas.iter().find(|&&p| p >= episode.personas.len()) {
        return Err(Error::SelectionInvalid(format!(
            "persona {bad} out of range for {} personas",
            episode.personas.len()
        )));
    }
    let cands = &episode.knowledge_candidates[round];
    if knowledge >= cands.len() {
        return Err(Error::SelectionInvalid(format!(
            "knowledge {knowledge} out of range for {} candidates",
            cands.len()
        )));
    }
    let mut tokens = input.tokens.clone();
    tokens.push(SEP);
    for &p in &personas {
        tokens.extend(vocab.encode(&episode.personas[p]));
    }
    tokens.push(SEP);
    tokens.extend(vocab.encode(&cands[knowledge]));
    Ok(Kpeq { tokens, personas, knowledge })
}

/// Next-token distributions of a decoder conditioned on each retrieved document.
pub trait DocConditional {
    fn vocab_size(&self) -> usize;

    fn num_docs(&self) -> usize;

    /// Longest prefix plus one the conditional accepts.
    fn max_len(&self) -> usize {
        usize::MAX
    }

    /// `log g(. | z = doc, prefix)` over the vocabulary.
    fn next_log_probs(&self, doc: usize, prefix: &[TokenId]) -> Vec<f64>;

    /// `sum_i log g(y_i | z = doc, y_<i)`.
    fn sequence_log_prob(&self, doc: usize, y: &[TokenId]) -> f64 {
        (0..y.len()).map(|i| self.next_log_probs(doc, &y[..i])[y[i] as usize]).sum()
    }

    fn eos(&self) -> TokenId {
        EOS
    }
}

/// Explicit per-document log-probability tables, handy for toy decoders.
pub struct TableConditional<F: Fn(usize, &[TokenId]) -> Vec<f64>> {
    pub vocab_size: usize,
    pub num_docs: usize,
    pub eos: TokenId,
    pub log_probs: F,
}

impl<F: Fn(usize, &[TokenId]) -> Vec<f64>> DocConditional for TableConditional<F> {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn num_docs(&self) -> usize {
        self.num_docs
    }

    fn next_log_probs(&self, doc: usize, prefix: &[TokenId]) -> Vec<f64> {
        (self.log_probs)(doc, prefix)
    }

    fn eos(&self) -> TokenId {
        self.eos
    }
}

fn check_docs(cond: &dyn DocConditional, log_r: &[f64]) -> Result<()> {
    if log_r.is_empty() {
        return Err(Error::InvalidConfig("retrieval must return at least one document".into()));
    }
    if log_r.len() != cond.num_docs() {
        return Err(Error::ShapeMismatch(format!(
            "{} retrieval weights for {} documents",
            log_r.len(),
            cond.num_docs()
        )));
    }
    Ok(())
}

/// `log sum_z r(z) g(. | z, prefix)`.
pub fn rag_token_next_log_dist(cond: &dyn DocConditional, log_r: &[f64], prefix: &[TokenId]) -> Result<Vec<f64>> {
    check_docs(cond, log_r)?;
    let per_doc: Vec<Vec<f64>> = (0..log_r.len()).map(|z| cond.next_log_probs(z, prefix)).collect();
    Ok(marginal_log(&per_doc, log_r, cond.vocab_size()))
}

fn marginal_log(per_doc: &[Vec<f64>], log_r: &[f64], vocab: usize) -> Vec<f64> {
    let mut terms = vec![0.0; per_doc.len()];
    (0..vocab)
        .map(|y| {
            for (z, lp) in per_doc.iter().enumerate() {
                terms[z] = log_r[z] + lp[y];
            }
            log_sum_exp(&terms)
        })
        .collect()
}

/// Marginal next-token distribution `sum_z r(z) g(. | z, prefix)`.
pub fn rag_token_next_dist(cond: &dyn DocConditional, log_r: &[f64], prefix: &[TokenId]) -> Result<Vec<f64>> {
    let probs: Vec<f64> = rag_token_next_log_dist(cond, log_r, prefix)?.into_iter().map(f64::exp).collect();
    crate::audit::record_distribution(&probs);
    Ok(probs)
}

/// `log sum_z r(z) prod_i g(y_i | z, y_<i)`.
pub fn rag_sequence_logprob(cond: &dyn DocConditional, log_r: &[f64], y: &[TokenId]) -> Result<f64> {
    check_docs(cond, log_r)?;
    let per_doc: Vec<f64> = (0..log_r.len()).map(|z| log_r[z] + cond.sequence_log_prob(z, y)).collect();
    Ok(log_sum_exp(&per_doc))
}

/// `sum_i log sum_z r(z) g(y_i | z, y_<i)`.
pub fn rag_token_logprob(cond: &dyn DocConditional, log_r: &[f64], y: &[TokenId]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..y.len() {
        total += rag_token_next_log_dist(cond, log_r, &y[..i])?[y[i] as usize];
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    RagToken,
    RagSequence,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 2] = [DecodeMode::RagToken, DecodeMode::RagSequence];

    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::RagToken => "rag_token",
            DecodeMode::RagSequence => "rag_sequence",
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rag_token" | "token" => Ok(DecodeMode::RagToken),
            "rag_sequence" | "sequence" => Ok(DecodeMode::RagSequence),
            other => Err(Error::InvalidConfig(format!("unknown decode mode {other:?}"))),
        }
    }
}

/// Negative marginal log-likelihood of `y` (no autodiff).
pub fn sequence_loss(cond: &dyn DocConditional, log_r: &[f64], y: &[TokenId], mode: DecodeMode) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyCandidate);
    }
    Ok(-match mode {
        DecodeMode::RagToken => rag_token_logprob(cond, log_r, y)?,
        DecodeMode::RagSequence => rag_sequence_logprob(cond, log_r, y)?,
    })
}

/// Graph form of [`sequence_loss`]. `per_doc[z]` is the `L x 1` column of
/// `log g(y_i | z, y_<i)` and `log_r` is a `1 x k` row.
pub fn sequence_loss_graph(g: &mut Graph, per_doc: &[Var], log_r: Var, mode: DecodeMode) -> Result<Var> {
    if per_doc.is_empty() || g.value(log_r).shape() != (1, per_doc.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{} document columns against log_r {:?}",
            per_doc.len(),
            g.value(log_r).shape()
        )));
    }
    let joint = match mode {
        DecodeMode::RagToken => {
            let cols = if per_doc.len() == 1 { per_doc[0] } else { g.hcat(per_doc) };
            let mixed = g.add_row(cols, log_r);
            let per_token = g.log_sum_exp_rows(mixed);
            g.sum(per_token)
        }
        DecodeMode::RagSequence => {
            let sums: Vec<Var> = per_doc.iter().map(|&c| g.sum(c)).collect();
            let row = if sums.len() == 1 { sums[0] } else { g.hcat(&sums) };
            let mixed = g.add(row, log_r);
            g.log_sum_exp_rows(mixed)
        }
    };
    Ok(g.scale(joint, -1.0))
}

/// Constant `1 x k` row of log retrieval probabilities.
pub fn log_r_constant(g: &mut Graph, log_r: &[f64]) -> Var {
    g.constant(Matrix::row_vector(log_r.to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_len: usize,
    pub mode: DecodeMode,
    /// Hypotheses are ranked by `log_prob / len^length_penalty`; 0 disables it.
    #[serde(default)]
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_width: 4, max_len: 24, mode: DecodeMode::RagToken, length_penalty: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub prefix: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 || self.prefix.is_empty() {
            self.log_prob
        } else {
            self.log_prob / (self.prefix.len() as f64).powf(alpha)
        }
    }
}

fn rank(hyps: &mut [Hypothesis], alpha: f64) {
    hyps.sort_by(|a, b| b.score(alpha).total_cmp(&a.score(alpha)).then_with(|| a.prefix.cmp(&b.prefix)));
}

fn beam_core(
    next: &dyn Fn(&[TokenId]) -> Vec<f64>,
    eos: TokenId,
    width: usize,
    max_len: usize,
    alpha: f64,
) -> Vec<Hypothesis> {
    let mut beam = vec![Hypothesis { prefix: Vec::new(), log_prob: 0.0, finished: max_len == 0 }];
    while beam.iter().any(|h| !h.finished) {
        let mut pool = Vec::new();
        for h in beam {
            if h.finished {
                pool.push(h);
                continue;
            }
            for (t, lp) in next(&h.prefix).into_iter().enumerate() {
                let mut prefix = h.prefix.clone();
                prefix.push(t as TokenId);
                let finished = t as TokenId == eos || prefix.len() >= max_len;
                pool.push(Hypothesis { prefix, log_prob: h.log_prob + lp, finished });
            }
        }
        rank(&mut pool, alpha);
        pool.truncate(width);
        beam = pool;
    }
    beam
}

/// Beam search over the document mixture.
///
/// `RagToken` runs one beam on the marginal next-token distribution.
/// `RagSequence` runs one beam per document on its own conditional, pools
/// the distinct finished prefixes and rescores them with
/// [`rag_sequence_logprob`]. Ties resolve to the lexicographically smaller prefix.
pub fn beam_search(cond: &dyn DocConditional, log_r: &[f64], config: &BeamConfig) -> Result<Vec<Hypothesis>> {
    check_docs(cond, log_r)?;
    if config.beam_width == 0 {
        return Err(Error::InvalidConfig("beam_width must be at least 1".into()));
    }
    let max_len = config.max_len.min(cond.max_len());
    let alpha = config.length_penalty;
    match config.mode {
        DecodeMode::RagToken => {
            let next = |p: &[TokenId]| rag_token_next_log_dist(cond, log_r, p).expect("checked above");
            Ok(beam_core(&next, cond.eos(), config.beam_width, max_len, alpha))
        }
        DecodeMode::RagSequence => {
            let mut prefixes = BTreeSet::new();
            for z in 0..log_r.len() {
                let next = |p: &[TokenId]| cond.next_log_probs(z, p);
                for h in beam_core(&next, cond.eos(), config.beam_width, max_len, alpha) {
                    prefixes.insert(h.prefix);
                }
            }
            let mut pooled = prefixes
                .into_iter()
                .map(|prefix| {
                    let log_prob = rag_sequence_logprob(cond, log_r, &prefix)?;
                    let finished = prefix.last() == Some(&cond.eos()) || prefix.len() >= max_len;
                    Ok(Hypothesis { prefix, log_prob, finished })
                })
                .collect::<Result<Vec<_>>>()?;
            rank(&mut pooled, alpha);
            pooled.truncate(config.beam_width);
            Ok(pooled)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCandidate {
    pub token: TokenId,
    pub word: String,
    /// Marginal probability.
    pub prob: f64,
    /// `g(token | z, prefix)` for each retrieved document, in retrieval order.
    pub per_doc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub position: usize,
    pub chosen: TokenId,
    pub chosen_word: String,
    pub top: Vec<TraceCandidate>,
}

/// Per-step view of how the documents shaped `output`.
pub fn decode_trace(
    cond: &dyn DocConditional,
    log_r: &[f64],
    output: &[TokenId],
    vocab: &Vocab,
    top_n: usize,
) -> Result<Vec<TraceStep>> {
    check_docs(cond, log_r)?;
    let mut steps = Vec::with_capacity(output.len());
    for (i, &chosen) in output.iter().enumerate() {
        let prefix = &output[..i];
        let per_doc: Vec<Vec<f64>> = (0..log_r.len()).map(|z| cond.next_log_probs(z, prefix)).collect();
        let marginal = marginal_log(&per_doc, log_r, cond.vocab_size());
        let top = crate::retrieval::top_k(&marginal, top_n.min(marginal.len()))
            .into_iter()
            .map(|t| TraceCandidate {
                token: t as TokenId,
                word: vocab.word(t as TokenId).to_string(),
                prob: marginal[t].exp(),
                per_doc: per_doc.iter().map(|lp| lp[t].exp()).collect(),
            })
            .collect();
        steps.push(TraceStep { position: i, chosen, chosen_word: vocab.word(chosen).to_string(), top });
    }
    Ok(steps)
}
