//! Generation metrics, grounding metrics and the ablation harness.
//!
//! chrF++ follows the sacreBLEU defaults (character 6-grams with whitespace
//! removed, word 1- and 2-grams, beta 2, corpus-level statistics). BLEU is
//! corpus BLEU-4 over whitespace tokens. ROUGE scores are the mean of
//! per-pair F1 values over lowercased alphanumeric tokens.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::DialogueEpisode;
use crate::error::{Error, Result};
use crate::generator::{DecodeMode, GtInjection};
use crate::model::Model;
use crate::pipeline::{ground, run_turn, InferenceOptions, RetrieverKind};
use crate::retrieval::KnowledgeIndex;
use crate::scoring::ScoringMethod;

pub const CHRF_CHAR_ORDER: usize = 6;
pub const CHRF_WORD_ORDER: usize = 2;
pub const CHRF_BETA: f64 = 2.0;
pub const BLEU_MAX_ORDER: usize = 4;

/// How `persona_acc` is computed, printed with every report.
pub const PERSONA_ACC_DEFINITION: &str =
    "persona_acc: per-candidate binary accuracy over all persona decisions (P per turn)";

fn check_lengths(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::LengthMismatch { hyps, refs });
    }
    Ok(())
}

fn counts<T: Eq + Hash>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

fn clipped_matches<T: Eq + Hash>(hyp: &HashMap<T, usize>, reference: &HashMap<T, usize>) -> usize {
    hyp.iter().map(|(k, &c)| c.min(reference.get(k).copied().unwrap_or(0))).sum()
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    counts(chars.windows(n))
}

fn word_ngrams(words: &[&str], n: usize) -> HashMap<String, usize> {
    counts(words.windows(n).map(|w| w.join(" ")))
}

const CHRF_PUNCT: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

/// Splits a leading or trailing punctuation mark off each word.
fn chrf_words(sent: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for w in sent.split_whitespace() {
        let mut chars = w.chars();
        let first = chars.next().unwrap();
        let last = w.chars().next_back().unwrap();
        if w.chars().count() == 1 {
            out.push(w);
        } else if CHRF_PUNCT.contains(last) {
            let cut = w.len() - last.len_utf8();
            out.push(&w[..cut]);
            out.push(&w[cut..]);
        } else if CHRF_PUNCT.contains(first) {
            let cut = first.len_utf8();
            out.push(&w[..cut]);
            out.push(&w[cut..]);
        } else {
            out.push(w);
        }
    }
    out
}

/// Corpus chrF++ in [0, 100].
pub fn chrf_pp<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    check_lengths(hyps.len(), refs.len())?;
    let orders = CHRF_CHAR_ORDER + CHRF_WORD_ORDER;
    let mut stats = vec![[0usize; 3]; orders];
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        let hc: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let rc: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=CHRF_CHAR_ORDER {
            let (hn, rn) = (char_ngrams(&hc, n), char_ngrams(&rc, n));
            let s = &mut stats[n - 1];
            s[0] += hn.values().sum::<usize>();
            s[1] += rn.values().sum::<usize>();
            s[2] += clipped_matches(&hn, &rn);
        }
        let (hw, rw) = (chrf_words(h), chrf_words(r));
        for n in 1..=CHRF_WORD_ORDER {
            let (hn, rn) = (word_ngrams(&hw, n), word_ngrams(&rw, n));
            let s = &mut stats[CHRF_CHAR_ORDER + n - 1];
            s[0] += hn.values().sum::<usize>();
            s[1] += rn.values().sum::<usize>();
            s[2] += clipped_matches(&hn, &rn);
        }
    }
    let (mut prec, mut rec, mut effective) = (0.0, 0.0, 0usize);
    for [n_hyp, n_ref, n_match] in stats {
        if n_hyp > 0 && n_ref > 0 {
            prec += n_match as f64 / n_hyp as f64;
            rec += n_match as f64 / n_ref as f64;
            effective += 1;
        }
    }
    if effective == 0 {
        return Ok(0.0);
    }
    prec /= effective as f64;
    rec /= effective as f64;
    let b2 = CHRF_BETA * CHRF_BETA;
    if prec + rec == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 + b2) * prec * rec / (b2 * prec + rec))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BleuSmoothing {
    None,
    /// Adds `k` to matches and totals of orders 2 and up.
    AddK(f64),
    /// Halves the credit of each successive zero-match order.
    Exp,
}

/// Corpus BLEU-4 with exponential smoothing.
pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    bleu_with(hyps, refs, BleuSmoothing::Exp)
}

pub fn bleu_with<S: AsRef<str>>(hyps: &[S], refs: &[S], smoothing: BleuSmoothing) -> Result<f64> {
    check_lengths(hyps.len(), refs.len())?;
    let mut correct = [0.0f64; BLEU_MAX_ORDER];
    let mut total = [0.0f64; BLEU_MAX_ORDER];
    let (mut sys_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let hw: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rw: Vec<&str> = r.as_ref().split_whitespace().collect();
        sys_len += hw.len();
        ref_len += rw.len();
        for n in 1..=BLEU_MAX_ORDER {
            let (hn, rn) = (counts(hw.windows(n)), counts(rw.windows(n)));
            correct[n - 1] += clipped_matches(&hn, &rn) as f64;
            total[n - 1] += hw.len().saturating_sub(n - 1) as f64;
        }
    }
    let bp = if sys_len < ref_len {
        if sys_len > 0 {
            (1.0 - ref_len as f64 / sys_len as f64).exp()
        } else {
            0.0
        }
    } else {
        1.0
    };
    if correct.iter().all(|&c| c == 0.0) {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut exp_credit = 1.0;
    for n in 0..BLEU_MAX_ORDER {
        if let BleuSmoothing::AddK(k) = smoothing {
            if n > 0 {
                correct[n] += k;
                total[n] += k;
            }
        }
        if total[n] == 0.0 {
            return Ok(0.0);
        }
        let p = if correct[n] > 0.0 {
            correct[n] / total[n]
        } else if smoothing == BleuSmoothing::Exp {
            exp_credit *= 2.0;
            1.0 / (exp_credit * total[n])
        } else {
            return Ok(0.0);
        };
        log_sum += p.ln();
    }
    Ok(100.0 * bp * (log_sum / BLEU_MAX_ORDER as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RougeVariant {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "L")]
    L,
}

/// Lowercased `[a-z0-9]+` runs.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit()))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F1 for one pair, in [0, 1].
pub fn rouge_pair(hyp: &str, reference: &str, variant: RougeVariant) -> f64 {
    let (h, r) = (rouge_tokens(hyp), rouge_tokens(reference));
    match variant {
        RougeVariant::L => {
            if h.is_empty() || r.is_empty() {
                return 0.0;
            }
            let l = lcs_len(&r, &h) as f64;
            f1(l / h.len() as f64, l / r.len() as f64)
        }
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let (hn, rn) = (counts(h.windows(n)), counts(r.windows(n)));
            let m = clipped_matches(&rn, &hn) as f64;
            let hc: usize = hn.values().sum();
            let rc: usize = rn.values().sum();
            f1(m / hc.max(1) as f64, m / rc.max(1) as f64)
        }
    }
}

/// Mean per-pair F1, scaled to [0, 100].
pub fn rouge<S: AsRef<str>>(hyps: &[S], refs: &[S], variant: RougeVariant) -> Result<f64> {
    check_lengths(hyps.len(), refs.len())?;
    if hyps.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = hyps.iter().zip(refs).map(|(h, r)| rouge_pair(h.as_ref(), r.as_ref(), variant)).sum();
    Ok(100.0 * sum / hyps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingPrediction {
    pub knowledge: usize,
    /// One flag per persona sentence.
    pub personas: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingGold {
    pub knowledge: usize,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    pub knowledge_acc: f64,
    pub persona_acc: f64,
    pub persona_f1: f64,
}

pub fn grounding_metrics(predictions: &[GroundingPrediction], gold: &[GroundingGold]) -> Result<GroundingMetrics> {
    if predictions.len() != gold.len() {
        return Err(Error::Misalignment(format!("{} predictions for {} gold turns", predictions.len(), gold.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Misalignment("no turns to score".into()));
    }
    let (mut k_hits, mut p_hits, mut p_total) = (0usize, 0usize, 0usize);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (i, (p, g)) in predictions.iter().zip(gold).enumerate() {
        if p.personas.len() != g.labels.len() {
            return Err(Error::Misalignment(format!(
                "turn {i}: {} persona predictions for {} labels",
                p.personas.len(),
                g.labels.len()
            )));
        }
        k_hits += usize::from(p.knowledge == g.knowledge);
        for (&pred, &label) in p.personas.iter().zip(&g.labels) {
            let gold = label == 1;
            p_total += 1;
            p_hits += usize::from(pred == gold);
            match (pred, gold) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let n = predictions.len() as f64;
    let persona_acc = if p_total == 0 { 1.0 } else { p_hits as f64 / p_total as f64 };
    let persona_f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    Ok(GroundingMetrics { knowledge_acc: k_hits as f64 / n, persona_acc, persona_f1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub chrf_pp: f64,
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub knowledge_acc: f64,
    pub persona_acc: f64,
    pub persona_f1: f64,
    pub turns: usize,
    /// SHA-256 over the model configuration, parameters, options and
    /// evaluated episode ids.
    pub fingerprint: String,
}

impl MetricReport {
    pub fn from_outputs(hyps: &[String], refs: &[String], grounding: GroundingMetrics, fingerprint: String) -> Result<Self> {
        Ok(Self {
            chrf_pp: chrf_pp(hyps, refs)?,
            bleu: bleu(hyps, refs)?,
            rouge1: rouge(hyps, refs, RougeVariant::One)?,
            rouge2: rouge(hyps, refs, RougeVariant::Two)?,
            rouge_l: rouge(hyps, refs, RougeVariant::L)?,
            knowledge_acc: grounding.knowledge_acc,
            persona_acc: grounding.persona_acc,
            persona_f1: grounding.persona_f1,
            turns: hyps.len(),
            fingerprint,
        })
    }

    /// Human-readable summary, headed by the persona accuracy definition.
    pub fn render(&self) -> String {
        format!(
            "{PERSONA_ACC_DEFINITION}\n\
             chrF++ {:.2}  BLEU {:.2}  ROUGE-1 {:.2}  ROUGE-2 {:.2}  ROUGE-L {:.2}\n\
             knowledge_acc {:.4}  persona_acc {:.4}  persona_f1 {:.4}  turns {}\n\
             fingerprint {}",
            self.chrf_pp,
            self.bleu,
            self.rouge1,
            self.rouge2,
            self.rouge_l,
            self.knowledge_acc,
            self.persona_acc,
            self.persona_f1,
            self.turns,
            self.fingerprint
        )
    }
}

pub fn fingerprint(model: &Model, opts: &InferenceOptions, episodes: &[DialogueEpisode]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.config).unwrap_or_default());
    h.update(serde_json::to_vec(opts).unwrap_or_default());
    for e in model.store.entries() {
        h.update(e.name.as_bytes());
        for v in e.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    for ep in episodes {
        h.update(ep.id.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub episode: String,
    pub round: usize,
    pub hypothesis: String,
    pub reference: String,
    pub knowledge: usize,
    pub personas: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub turns: Vec<TurnRecord>,
}

/// Grounding metrics alone, without retrieval or decoding.
pub fn evaluate_grounding(model: &Model, episodes: &[DialogueEpisode], opts: &InferenceOptions) -> Result<GroundingMetrics> {
    let mut preds = Vec::new();
    let mut gold = Vec::new();
    for ep in episodes {
        for round in 0..ep.num_rounds() {
            let g = ground(model, ep, round, opts)?;
            preds.push(GroundingPrediction {
                knowledge: g.knowledge,
                personas: (0..ep.personas.len()).map(|p| g.persona.selected.contains(&p)).collect(),
            });
            gold.push(GroundingGold { knowledge: ep.gt_knowledge_index[round], labels: ep.gt_persona_labels[round].clone() });
        }
    }
    grounding_metrics(&preds, &gold)
}

/// Runs every round of every episode through the full pipeline.
pub fn evaluate(
    model: &Model,
    index: &KnowledgeIndex,
    episodes: &[DialogueEpisode],
    opts: &InferenceOptions,
) -> Result<EvalOutput> {
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut preds = Vec::new();
    let mut gold = Vec::new();
    let mut turns = Vec::new();
    for ep in episodes {
        for round in 0..ep.num_rounds() {
            let out = run_turn(model, index, ep, round, opts)?;
            let g = &out.grounding;
            let reference = ep.rounds[round].machine.clone();
            preds.push(GroundingPrediction {
                knowledge: g.knowledge,
                personas: (0..ep.personas.len()).map(|p| g.persona.selected.contains(&p)).collect(),
            });
            gold.push(GroundingGold { knowledge: ep.gt_knowledge_index[round], labels: ep.gt_persona_labels[round].clone() });
            turns.push(TurnRecord {
                episode: ep.id.clone(),
                round,
                hypothesis: out.reply.clone(),
                reference: reference.clone(),
                knowledge: g.knowledge,
                personas: g.persona.selected.clone(),
            });
            hyps.push(out.reply);
            refs.push(reference);
        }
    }
    let grounding = grounding_metrics(&preds, &gold)?;
    let report = MetricReport::from_outputs(&hyps, &refs, grounding, fingerprint(model, opts, episodes))?;
    Ok(EvalOutput { report, turns })
}

/// Axes of an ablation; every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub scoring: Vec<ScoringMethod>,
    pub retriever: Vec<RetrieverKind>,
    pub inject: Vec<GtInjection>,
    pub decode: Vec<DecodeMode>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            scoring: vec![ScoringMethod::Poly],
            retriever: vec![RetrieverKind::Dense],
            inject: vec![GtInjection::NONE],
            decode: vec![DecodeMode::RagToken],
        }
    }
}

pub const GRID_PRESETS: [&str; 5] = ["scoring", "retriever", "query", "decode", "full"];

impl AblationGrid {
    /// `scoring`, `retriever`, `query` (ground-truth injection),
    /// `decode`, or `full` (scoring by retriever).
    pub fn preset(name: &str) -> Result<Self> {
        let all_inject =
            vec![GtInjection::NONE, GtInjection { knowledge: true, persona: false }, GtInjection { knowledge: false, persona: true }, GtInjection::BOTH];
        Ok(match name {
            "scoring" => Self { scoring: ScoringMethod::ALL.to_vec(), ..Self::default() },
            "retriever" => Self { retriever: RetrieverKind::ALL.to_vec(), ..Self::default() },
            "query" => Self { inject: all_inject, ..Self::default() },
            "decode" => Self { decode: DecodeMode::ALL.to_vec(), ..Self::default() },
            "full" => Self { scoring: ScoringMethod::ALL.to_vec(), retriever: RetrieverKind::ALL.to_vec(), ..Self::default() },
            other => return Err(Error::InvalidConfig(format!("unknown grid preset {other:?}"))),
        })
    }

    /// A preset name or a path to a JSON grid.
    pub fn resolve(spec: &str) -> Result<Self> {
        if GRID_PRESETS.contains(&spec) {
            return Self::preset(spec);
        }
        let path = Path::new(spec);
        if !path.exists() {
            return Err(Error::InvalidConfig(format!("{spec:?} is neither a grid preset nor a file")));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(spec, e))
    }

    pub fn cells(&self, base: &InferenceOptions) -> Vec<InferenceOptions> {
        let mut out = Vec::new();
        for &scoring in &self.scoring {
            for &retriever in &self.retriever {
                for &inject in &self.inject {
                    for &mode in &self.decode {
                        let mut o = *base;
                        o.scoring = scoring;
                        o.retriever = retriever;
                        o.inject = inject;
                        o.beam.mode = mode;
                        out.push(o);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scoring: ScoringMethod,
    pub retriever: RetrieverKind,
    pub inject: String,
    pub decode: DecodeMode,
    pub report: MetricReport,
}

pub fn run_ablation(
    model: &Model,
    index: &KnowledgeIndex,
    episodes: &[DialogueEpisode],
    grid: &AblationGrid,
    base: &InferenceOptions,
) -> Result<Vec<AblationRow>> {
    grid.cells(base)
        .into_iter()
        .map(|o| {
            let report = evaluate(model, index, episodes, &o)?.report;
            Ok(AblationRow {
                scoring: o.scoring,
                retriever: o.retriever,
                inject: o.inject.label().to_string(),
                decode: o.beam.mode,
                report,
            })
        })
        .collect()
}

/// Plot-ready CSV, one row per cell.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "scoring", "retriever", "inject", "decode", "chrf_pp", "bleu", "rouge1", "rouge2", "rougeL", "knowledge_acc",
        "persona_acc", "persona_f1", "turns",
    ];
    let csv_err = |e: csv::Error| Error::InvalidConfig(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        let m = &r.report;
        w.write_record([
            r.scoring.as_str().to_string(),
            r.retriever.as_str().to_string(),
            r.inject.clone(),
            r.decode.as_str().to_string(),
            format!("{:.4}", m.chrf_pp),
            format!("{:.4}", m.bleu),
            format!("{:.4}", m.rouge1),
            format!("{:.4}", m.rouge2),
            format!("{:.4}", m.rouge_l),
            format!("{:.4}", m.knowledge_acc),
            format!("{:.4}", m.persona_acc),
            format!("{:.4}", m.persona_f1),
            m.turns.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidConfig(format!("csv: {e}")))
}
