//! Chat sessions over a loaded checkpoint and the per-turn trace the
//! service returns.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kpeq_core::corpus::{DialogueEpisode, Round};
use kpeq_core::generator::{DecodeMode, TraceStep};
use kpeq_core::model::{Model, INDEX_DIR};
use kpeq_core::pipeline::{retrieve_for, run_turn, InferenceOptions, RetrieverKind, TurnOutput};
use kpeq_core::retrieval::KnowledgeIndex;
use kpeq_core::scoring::ScoringMethod;
use kpeq_core::training::load_checkpoint;
use kpeq_core::vocab::{EOS, UNK};
use serde::{Deserialize, Serialize};

/// Knowledge candidates offered to the selector in every session turn.
pub const SESSION_CANDIDATES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaTrace {
    pub scores: Vec<f64>,
    /// `sigmoid(score)` per persona sentence.
    pub probs: Vec<f64>,
    pub level_logits: Vec<f64>,
    pub level: usize,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTrace {
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedTrace {
    pub doc: usize,
    pub title: String,
    pub text: String,
    pub score: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisTrace {
    pub text: String,
    pub log_prob: f64,
    pub finished: bool,
}

/// Everything computed for one turn, copied from the library output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub turn: usize,
    pub utterance: String,
    pub scoring: ScoringMethod,
    pub persona: PersonaTrace,
    pub knowledge: KnowledgeTrace,
    /// The decoded knowledge-persona enhanced query.
    pub query: String,
    pub retriever: RetrieverKind,
    pub retrieval: Vec<RetrievedTrace>,
    pub reply: String,
    pub decode_mode: DecodeMode,
    pub hypotheses: Vec<HypothesisTrace>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<TraceStep>>,
}

impl TurnTrace {
    pub fn from_output(
        turn: usize,
        utterance: &str,
        out: &TurnOutput,
        candidates: &[String],
        model: &Model,
        index: &KnowledgeIndex,
        opts: &InferenceOptions,
    ) -> Self {
        let g = &out.grounding;
        let vocab = &model.vocab;
        TurnTrace {
            turn,
            utterance: utterance.to_string(),
            scoring: opts.scoring,
            persona: PersonaTrace {
                scores: g.persona_scores.scores.clone(),
                probs: g.persona.per_candidate_prob.clone(),
                level_logits: g.level_logits.clone(),
                level: g.persona.level,
                selected: g.persona.selected.clone(),
            },
            knowledge: KnowledgeTrace {
                candidates: candidates.to_vec(),
                scores: g.knowledge_scores.scores.clone(),
                selected: g.knowledge,
            },
            query: vocab.decode(&out.kpeq.tokens),
            retriever: opts.retriever,
            retrieval: out
                .retrieval
                .entries
                .iter()
                .map(|e| {
                    let d = index.document(e.doc);
                    RetrievedTrace { doc: e.doc, title: d.title.clone(), text: d.text.clone(), score: e.score, prob: e.prob }
                })
                .collect(),
            reply: out.reply.clone(),
            decode_mode: opts.beam.mode,
            hypotheses: out
                .hypotheses
                .iter()
                .map(|h| {
                    let toks: Vec<_> = h.prefix.iter().copied().take_while(|&t| t != EOS).collect();
                    HypothesisTrace { text: vocab.decode(&toks), log_prob: h.log_prob, finished: h.finished }
                })
                .collect(),
            trace: out.trace.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub id: String,
    pub personas: Vec<String>,
    pub landmark: String,
    /// Knowledge candidates for every turn, fixed when the session opens.
    pub candidates: Vec<String>,
    #[serde(default)]
    pub turns: Vec<TurnTrace>,
}

impl ChatSession {
    /// The conversation so far plus `utterance` as an unanswered last round.
    pub fn episode(&self, utterance: &str) -> DialogueEpisode {
        let mut rounds: Vec<Round> =
            self.turns.iter().map(|t| Round { human: t.utterance.clone(), machine: t.reply.clone() }).collect();
        rounds.push(Round { human: utterance.to_string(), machine: String::new() });
        let n = rounds.len();
        DialogueEpisode {
            id: self.id.clone(),
            rounds,
            personas: self.personas.clone(),
            knowledge_candidates: vec![self.candidates.clone(); n],
            gt_knowledge_index: vec![0; n],
            gt_persona_labels: vec![vec![0; self.personas.len()]; n],
            landmark: self.landmark.clone(),
        }
    }

    pub fn push(&mut self, trace: TurnTrace) -> Result<()> {
        if trace.turn != self.turns.len() {
            bail!("turn {} out of order for session {} at {} turns", trace.turn, self.id, self.turns.len());
        }
        self.turns.push(trace);
        Ok(())
    }
}

/// A checkpoint, its index and the inference options used for every turn.
#[derive(Debug)]
pub struct Engine {
    pub model: Model,
    pub index: KnowledgeIndex,
    pub options: InferenceOptions,
}

impl Engine {
    /// Loads `checkpoint`, and the index from `index` or `checkpoint/index`.
    pub fn load(checkpoint: &Path, index: Option<&Path>, options: InferenceOptions) -> Result<Self> {
        let (model, index) = match index {
            None => load_checkpoint(checkpoint)?,
            Some(dir) => (Model::load(checkpoint)?, KnowledgeIndex::load(dir)?),
        };
        Ok(Self { model, index, options })
    }

    pub fn default_index_dir(checkpoint: &Path) -> PathBuf {
        checkpoint.join(INDEX_DIR)
    }

    /// Index paragraphs titled `landmark`, else the dense top matches for it.
    pub fn candidates(&self, landmark: &str) -> Result<Vec<String>> {
        let mut out: Vec<String> = Vec::new();
        for i in self.index.by_title(landmark.trim()) {
            let text = &self.index.document(i).text;
            if !out.contains(text) {
                out.push(text.clone());
            }
        }
        if out.is_empty() {
            let mut q = self.model.vocab.encode(landmark);
            if q.is_empty() {
                q.push(UNK);
            }
            let r = retrieve_for(&self.model, &self.index, &q, RetrieverKind::Dense, SESSION_CANDIDATES)?;
            out = r.entries.iter().map(|e| self.index.document(e.doc).text.clone()).collect();
        }
        out.truncate(SESSION_CANDIDATES);
        Ok(out)
    }

    pub fn open_session(&self, id: String, personas: Vec<String>, landmark: String) -> Result<ChatSession> {
        if landmark.trim().is_empty() {
            bail!("landmark must not be empty");
        }
        let candidates = self.candidates(&landmark)?;
        Ok(ChatSession { id, personas, landmark, candidates, turns: Vec::new() })
    }

    /// Runs the next turn of `session` without modifying it.
    pub fn turn(&self, session: &ChatSession, utterance: &str) -> Result<TurnTrace> {
        if utterance.trim().is_empty() {
            bail!("utterance must not be empty");
        }
        let episode = session.episode(utterance);
        let round = episode.num_rounds() - 1;
        let out = run_turn(&self.model, &self.index, &episode, round, &self.options)?;
        Ok(TurnTrace::from_output(round, utterance, &out, &session.candidates, &self.model, &self.index, &self.options))
    }
}

/// Appends one JSON line to `dir/<id>.jsonl`: the session header first,
/// then one line per turn.
pub fn append_record<T: Serialize>(dir: &Path, id: &str, record: &T) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{id}.jsonl"));
    let mut f = OpenOptions::new().create(true).append(true).open(&path).with_context(|| format!("opening {}", path.display()))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads every session persisted by [`append_record`] under `dir`.
pub fn load_sessions(dir: &Path) -> Result<Vec<ChatSession>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    for path in paths {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let Some(head) = lines.next() else { continue };
        let mut session: ChatSession =
            serde_json::from_str(head).with_context(|| format!("session header in {}", path.display()))?;
        for line in lines {
            let trace: TurnTrace = serde_json::from_str(line).with_context(|| format!("turn in {}", path.display()))?;
            session.push(trace)?;
        }
        out.push(session);
    }
    Ok(out)
}
