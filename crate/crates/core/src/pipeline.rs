//! One dialogue turn end to end: grounding, query construction, retrieval
//! and decoding.

use serde::{Deserialize, Serialize};

use crate::corpus::{build_input, DialogueEpisode};
use crate::error::{Error, Result};
use crate::generator::{beam_search, build_kpeq, decode_trace, BeamConfig, GtInjection, Hypothesis, Kpeq, TraceStep};
use crate::graph::Graph;
use crate::grounding::{select_knowledge, select_personas, PersonaDecision};
use crate::model::Model;
use crate::retrieval::{retrieve, tfidf_retrieve, KnowledgeIndex, QueryEncoderKind, RetrievalResult};
use crate::scoring::{GroundingScores, Head, ScoringMethod};
use crate::tensor::argmax;
use crate::vocab::{TokenId, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    /// Sparse ltc TF-IDF cosine.
    Tfidf,
    /// Dense retrieval with the query encoder as it was before joint training.
    Dpr,
    /// Dense retrieval with the jointly trained query encoder.
    Dense,
}

impl RetrieverKind {
    pub const ALL: [RetrieverKind; 3] = [RetrieverKind::Tfidf, RetrieverKind::Dpr, RetrieverKind::Dense];

    pub fn as_str(self) -> &'static str {
        match self {
            RetrieverKind::Tfidf => "tfidf",
            RetrieverKind::Dpr => "dpr",
            RetrieverKind::Dense => "dense",
        }
    }
}

impl std::str::FromStr for RetrieverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfidf" => Ok(RetrieverKind::Tfidf),
            "dpr" => Ok(RetrieverKind::Dpr),
            "dense" => Ok(RetrieverKind::Dense),
            other => Err(Error::InvalidConfig(format!("unknown retriever {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceOptions {
    pub scoring: ScoringMethod,
    pub retriever: RetrieverKind,
    pub inject: GtInjection,
    pub k: usize,
    pub history_window: usize,
    pub beam: BeamConfig,
    pub trace: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            scoring: ScoringMethod::Poly,
            retriever: RetrieverKind::Dense,
            inject: GtInjection::NONE,
            k: 3,
            history_window: 1,
            beam: BeamConfig::default(),
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub input: Vec<TokenId>,
    pub knowledge_scores: GroundingScores,
    pub knowledge: usize,
    pub persona_scores: GroundingScores,
    pub level_logits: Vec<f64>,
    pub persona: PersonaDecision,
}

/// Knowledge and persona selection for one round.
pub fn ground(model: &Model, episode: &DialogueEpisode, round: usize, opts: &InferenceOptions) -> Result<Grounding> {
    let enc = model.selector.context_encoder().config();
    let input = build_input(episode, round, opts.history_window, &model.vocab, enc.max_seq_len)?.tokens;
    let vocab = &model.vocab;
    let kcands: Vec<Vec<TokenId>> = episode.knowledge_candidates[round].iter().map(|c| nonempty(vocab.encode(c))).collect();
    let pcands: Vec<Vec<TokenId>> = episode.personas.iter().map(|p| nonempty(vocab.encode(p))).collect();

    let mut g = Graph::inference();
    let sel = &model.selector;
    let h = sel.context_states(&mut g, &model.store, &input)?;
    let ks = sel.score_graph(&mut g, &model.store, Head::Knowledge, opts.scoring, &input, h, &kcands)?;
    let knowledge_scores = GroundingScores { scores: g.value(ks).data().to_vec(), method: opts.scoring };
    let persona_scores = if pcands.is_empty() {
        GroundingScores { scores: Vec::new(), method: opts.scoring }
    } else {
        let ps = sel.score_graph(&mut g, &model.store, Head::Persona, opts.scoring, &input, h, &pcands)?;
        GroundingScores { scores: g.value(ps).data().to_vec(), method: opts.scoring }
    };
    let ll = sel.level_logits(&mut g, &model.store, h);
    let level_logits = g.value(ll).data().to_vec();
    let level = argmax(&level_logits).unwrap_or(0).min(pcands.len());
    let persona = select_personas(&persona_scores.scores, level)?;
    let knowledge = select_knowledge(&knowledge_scores.scores)?;
    Ok(Grounding { input, knowledge_scores, knowledge, persona_scores, level_logits, persona })
}

/// Empty texts encode to a lone UNK so every candidate can be scored.
pub(crate) fn nonempty(tokens: Vec<TokenId>) -> Vec<TokenId> {
    if tokens.is_empty() {
        vec![crate::vocab::UNK]
    } else {
        tokens
    }
}

pub fn retrieve_for(
    model: &Model,
    index: &KnowledgeIndex,
    query: &[TokenId],
    retriever: RetrieverKind,
    k: usize,
) -> Result<RetrievalResult> {
    let k = k.min(index.len());
    match retriever {
        RetrieverKind::Tfidf => tfidf_retrieve(index, query, k),
        RetrieverKind::Dpr => retrieve(index, &model.retriever, &model.store, query, k, QueryEncoderKind::Base),
        RetrieverKind::Dense => retrieve(index, &model.retriever, &model.store, query, k, QueryEncoderKind::Trained),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutput {
    pub grounding: Grounding,
    pub kpeq: Kpeq,
    pub retrieval: RetrievalResult,
    pub hypotheses: Vec<Hypothesis>,
    /// Best hypothesis without its EOS.
    pub reply_tokens: Vec<TokenId>,
    pub reply: String,
    pub trace: Option<Vec<TraceStep>>,
}

pub fn run_turn(
    model: &Model,
    index: &KnowledgeIndex,
    episode: &DialogueEpisode,
    round: usize,
    opts: &InferenceOptions,
) -> Result<TurnOutput> {
    let grounding = ground(model, episode, round, opts)?;
    let input = crate::corpus::InputSequence { tokens: grounding.input.clone(), segments: Vec::new() };
    let kpeq = build_kpeq(&input, &grounding.persona, grounding.knowledge, episode, round, &model.vocab, opts.inject)?;
    if (!opts.inject.persona && kpeq.personas != grounding.persona.selected)
        || (!opts.inject.knowledge && kpeq.knowledge != grounding.knowledge)
    {
        return Err(Error::SelectionInvalid("query does not carry the selectors' output".into()));
    }
    let retrieval = retrieve_for(model, index, &kpeq.tokens, opts.retriever, opts.k)?;
    let log_r = retrieval.log_probs();
    let sources: Vec<Vec<TokenId>> = retrieval
        .entries
        .iter()
        .map(|e| model.generator.source_tokens(&index.document(e.doc).tokens, &kpeq.tokens))
        .collect();
    let cond = model.generator.conditional(&model.store, &sources)?;
    let hypotheses = beam_search(&cond, &log_r, &opts.beam)?;
    let best = hypotheses.first().map(|h| h.prefix.clone()).unwrap_or_default();
    let reply_tokens: Vec<TokenId> = best.iter().copied().take_while(|&t| t != EOS).collect();
    let reply = model.vocab.decode(&reply_tokens);
    let trace = if opts.trace { Some(decode_trace(&cond, &log_r, &best, &model.vocab, 5)?) } else { None };
    Ok(TurnOutput { grounding, kpeq, retrieval, hypotheses, reply_tokens, reply, trace })
}
