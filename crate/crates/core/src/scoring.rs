//! Bi-, cross- and poly-encoder candidate scoring.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, Linear, TokenStates};
use crate::error::{Error, Result};
use crate::graph::{Graph, SoftmaxMask, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::vocab::{TokenId, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMethod {
    Bi,
    Cross,
    Poly,
}

impl ScoringMethod {
    pub const ALL: [ScoringMethod; 3] = [ScoringMethod::Bi, ScoringMethod::Cross, ScoringMethod::Poly];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMethod::Bi => "bi",
            ScoringMethod::Cross => "cross",
            ScoringMethod::Poly => "poly",
        }
    }
}

impl std::str::FromStr for ScoringMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi" => Ok(ScoringMethod::Bi),
            "cross" => Ok(ScoringMethod::Cross),
            "poly" => Ok(ScoringMethod::Poly),
            other => Err(Error::InvalidConfig(format!("unknown scoring method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingScores {
    pub scores: Vec<f64>,
    pub method: ScoringMethod,
}

/// Row `m` is `sum_j softmax_j(c_m . h_j) h_j` over unmasked positions.
pub fn poly_attend(codes: &Matrix, states: &TokenStates) -> Result<Matrix> {
    check_states(codes, states)?;
    let mut g = Graph::inference();
    let c = g.constant(codes.clone());
    let h = g.constant(states.states.clone());
    let out = poly_attend_graph(&mut g, c, h, Some(&states.mask));
    Ok(g.value(out).clone())
}

/// `sum_m softmax_m(a . U^m) U^m` for one candidate embedding `a`.
pub fn poly_combine(ctx_feats: &Matrix, cand: &[f64]) -> Result<Vec<f64>> {
    if ctx_feats.rows() == 0 || ctx_feats.cols() != cand.len() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} against candidate of length {}",
            ctx_feats.shape(),
            cand.len()
        )));
    }
    let mut g = Graph::inference();
    let f = g.constant(ctx_feats.clone());
    let a = g.constant(Matrix::row_vector(cand.to_vec()));
    let out = poly_combine_graph(&mut g, f, a);
    Ok(g.value(out).data().to_vec())
}

fn check_states(codes: &Matrix, states: &TokenStates) -> Result<()> {
    if states.is_empty() || !states.mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    if states.mask.len() != states.len() || codes.cols() != states.states.cols() || codes.rows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "codes {:?}, states {:?}, mask {}",
            codes.shape(),
            states.states.shape(),
            states.mask.len()
        )));
    }
    Ok(())
}

/// `M x d` codes over `n x d` states.
pub fn poly_attend_graph(g: &mut Graph, codes: Var, states: Var, mask: Option<&[bool]>) -> Var {
    let logits = g.matmul_t(codes, states);
    let w = g.softmax_rows(logits, &SoftmaxMask { keys: mask, causal: false });
    g.matmul(w, states)
}

/// Candidate-dependent combination for each row of `cands` (`T x d`);
/// returns the `T x d` matrix of combined context vectors.
pub fn poly_combine_graph(g: &mut Graph, feats: Var, cands: Var) -> Var {
    let logits = g.matmul_t(cands, feats);
    let w = g.softmax_rows(logits, &SoftmaxMask::default());
    g.matmul(w, feats)
}

/// Row-wise dot products of two `T x d` matrices as a `T x 1` column.
pub fn row_dots(g: &mut Graph, a: Var, b: Var) -> Var {
    let p = g.mul(a, b);
    g.sum_cols(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Knowledge,
    Persona,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub encoder: EncoderConfig,
    /// Number of poly-encoder context codes (M).
    pub n_codes: usize,
    /// Persona sentences per episode (P); the level classifier has P + 1 classes.
    pub personas: usize,
    /// Use one encoder for contexts and candidates.
    #[serde(default)]
    pub share_encoders: bool,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), n_codes: 16, personas: 5, share_encoders: false }
    }
}

#[derive(Debug, Clone)]
struct HeadParams {
    codes: ParamId,
    cross: Linear,
}

/// Knowledge and persona selectors. Both heads read the same context and
/// candidate encoders; each has its own poly codes and cross-encoder head.
#[derive(Debug, Clone)]
pub struct Selector {
    config: SelectorConfig,
    context: Encoder,
    candidate: Option<Encoder>,
    knowledge: HeadParams,
    persona: HeadParams,
    level: Linear,
}

impl Selector {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &SelectorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.n_codes == 0 {
            return Err(Error::InvalidConfig("n_codes must be at least 1".into()));
        }
        let d = config.encoder.d_model;
        let context = Encoder::new(store, &format!("{prefix}.ctx"), &config.encoder, rng)?;
        let candidate = if config.share_encoders {
            None
        } else {
            Some(Encoder::new(store, &format!("{prefix}.cand"), &config.encoder, rng)?)
        };
        let mut head = |name: &str, store: &mut ParamStore| HeadParams {
            codes: store.uniform(format!("{prefix}.{name}.codes"), config.n_codes, d, d, rng),
            cross: Linear::new(store, &format!("{prefix}.{name}.cross"), d, 1, rng),
        };
        let knowledge = head("know", store);
        let persona = head("pers", store);
        let level = Linear::new(store, &format!("{prefix}.level"), d, config.personas + 1, rng);
        Ok(Self { config: config.clone(), context, candidate, knowledge, persona, level })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn context_encoder(&self) -> &Encoder {
        &self.context
    }

    pub fn candidate_encoder(&self) -> &Encoder {
        self.candidate.as_ref().unwrap_or(&self.context)
    }

    pub fn codes(&self, head: Head) -> ParamId {
        self.head(head).codes
    }

    pub fn level_params(&self) -> (ParamId, ParamId) {
        (self.level.weight, self.level.bias)
    }

    fn head(&self, head: Head) -> &HeadParams {
        match head {
            Head::Knowledge => &self.knowledge,
            Head::Persona => &self.persona,
        }
    }

    /// `n x d` context token states of `U`.
    pub fn context_states(&self, g: &mut Graph, store: &ParamStore, input: &[TokenId]) -> Result<Var> {
        self.context.forward(g, store, input, None)
    }

    /// `T x d` candidate embeddings.
    pub fn candidate_embeddings(&self, g: &mut Graph, store: &ParamStore, cands: &[Vec<TokenId>]) -> Result<Var> {
        if cands.is_empty() {
            return Err(Error::EmptyCandidateSet);
        }
        let enc = self.candidate_encoder();
        let rows = cands.iter().map(|c| enc.pooled(g, store, c)).collect::<Result<Vec<_>>>()?;
        Ok(if rows.len() == 1 { rows[0] } else { g.vcat(&rows) })
    }

    /// `1 x (P + 1)` persona-level logits from the CLS state of `U`.
    pub fn level_logits(&self, g: &mut Graph, store: &ParamStore, ctx_states: Var) -> Var {
        let cls = g.slice_rows(ctx_states, 0, 1);
        self.level.forward(g, store, cls)
    }

    /// `T x 1` scores for `cands` against the context `input`.
    pub fn score_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        head: Head,
        method: ScoringMethod,
        input: &[TokenId],
        ctx_states: Var,
        cands: &[Vec<TokenId>],
    ) -> Result<Var> {
        if cands.is_empty() {
            return Err(Error::EmptyCandidateSet);
        }
        if cands.iter().any(Vec::is_empty) {
            return Err(Error::EmptyCandidate);
        }
        match method {
            ScoringMethod::Bi => {
                let a = self.candidate_embeddings(g, store, cands)?;
                let cls = g.slice_rows(ctx_states, 0, 1);
                Ok(g.matmul_t(a, cls))
            }
            ScoringMethod::Poly => {
                let a = self.candidate_embeddings(g, store, cands)?;
                let codes = g.param(store, self.head(head).codes);
                let feats = poly_attend_graph(g, codes, ctx_states, None);
                let combined = poly_combine_graph(g, feats, a);
                Ok(row_dots(g, combined, a))
            }
            ScoringMethod::Cross => {
                let max = self.context.config().max_seq_len;
                let rows = cands
                    .iter()
                    .map(|c| {
                        let seq = cross_tokens(input, c, max);
                        let h = self.context.forward(g, store, &seq, None)?;
                        let cls = g.slice_rows(h, 0, 1);
                        Ok(self.head(head).cross.forward(g, store, cls))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(if rows.len() == 1 { rows[0] } else { g.vcat(&rows) })
            }
        }
    }
}

/// `[U SEP cand]` cut to `max` tokens. The candidate is trimmed first; the
/// context keeps its leading CLS and at least one token.
pub fn cross_tokens(input: &[TokenId], cand: &[TokenId], max: usize) -> Vec<TokenId> {
    let ctx_keep = input.len().min(max.saturating_sub(2).max(1));
    let cand_keep = cand.len().min(max.saturating_sub(ctx_keep + 1));
    let mut out = Vec::with_capacity(ctx_keep + 1 + cand_keep);
    out.extend_from_slice(&input[..ctx_keep]);
    if out.len() < max {
        out.push(SEP);
    }
    out.extend_from_slice(&cand[..cand_keep]);
    out
}

/// Scores every candidate for one head in inference mode.
pub fn score_candidates(
    selector: &Selector,
    store: &ParamStore,
    head: Head,
    input: &[TokenId],
    candidates: &[Vec<TokenId>],
    method: ScoringMethod,
) -> Result<GroundingScores> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    let mut g = Graph::inference();
    let h = selector.context_states(&mut g, store, input)?;
    let s = selector.score_graph(&mut g, store, head, method, input, h, candidates)?;
    Ok(GroundingScores { scores: g.value(s).data().to_vec(), method })
}
