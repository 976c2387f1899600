//! Dialogue episodes, the normalized corpus format, and model input
//! construction.

mod focus;
mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab, CLS, SEP};

pub use focus::{load_focus, load_focus_data, load_focus_str, FocusData, SchemaMap};
pub use synth::{generate_synthetic, generate_synthetic_with_paragraphs, SynthConfig, SyntheticCorpus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Machine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Utterance<'a> {
    pub speaker: Speaker,
    pub text: &'a str,
}

impl Utterance<'_> {
    pub fn tokens(&self, vocab: &Vocab) -> Vec<TokenId> {
        vocab.encode(self.text)
    }
}

/// One human turn and the machine reply that follows it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub human: String,
    pub machine: String,
}

impl Round {
    pub fn human(&self) -> Utterance<'_> {
        Utterance { speaker: Speaker::Human, text: &self.human }
    }

    pub fn machine(&self) -> Utterance<'_> {
        Utterance { speaker: Speaker::Machine, text: &self.machine }
    }
}

/// One conversation in the normalized corpus format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueEpisode {
    pub id: String,
    pub rounds: Vec<Round>,
    pub personas: Vec<String>,
    pub knowledge_candidates: Vec<Vec<String>>,
    pub gt_knowledge_index: Vec<usize>,
    pub gt_persona_labels: Vec<Vec<u8>>,
    pub landmark: String,
}

impl DialogueEpisode {
    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn gt_persona_indices(&self, round: usize) -> Vec<usize> {
        self.gt_persona_labels[round]
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks the per-round label invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.rounds.len();
        let missing = |key: &str| Error::MissingField { episode: self.id.clone(), key: key.to_string() };
        if self.knowledge_candidates.len() != n {
            return Err(missing("knowledge_candidates"));
        }
        if self.gt_knowledge_index.len() != n {
            return Err(missing("gt_knowledge_index"));
        }
        if self.gt_persona_labels.len() != n {
            return Err(missing("gt_persona_labels"));
        }
        for r in 0..n {
            let count = self.knowledge_candidates[r].len();
            let label = self.gt_knowledge_index[r];
            if label >= count {
                return Err(Error::LabelOutOfRange { episode: self.id.clone(), round: r, label, count });
            }
            let labels = &self.gt_persona_labels[r];
            if labels.len() != self.personas.len() {
                return Err(Error::LabelOutOfRange {
                    episode: self.id.clone(),
                    round: r,
                    label: labels.len(),
                    count: self.personas.len(),
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
                return Err(Error::NonBinaryLabel(bad as f64));
            }
        }
        Ok(())
    }
}

/// A knowledge-index paragraph, titled with the landmark it describes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    History,
    Snippet,
}

/// Model input `U`: `[CLS] history [SEP] landmark`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub tokens: Vec<TokenId>,
    pub segments: Vec<Segment>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cls_position(&self) -> usize {
        0
    }
}

/// Builds `U` for `round`: the last `history_window` rounds up to and
/// including the human turn of `round` (its machine reply excluded),
/// followed by `[SEP]` and the landmark.
///
/// When the result exceeds `max_seq_len`, the oldest history tokens are
/// dropped first. Snippet tokens are only cut when no history is left.
pub fn build_input(
    episode: &DialogueEpisode,
    round: usize,
    history_window: usize,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<InputSequence> {
    if round >= episode.rounds.len() {
        return Err(Error::RoundOutOfRange { round, rounds: episode.rounds.len() });
    }
    if history_window == 0 {
        return Err(Error::InvalidConfig("history_window must be at least 1".into()));
    }
    if max_seq_len < 2 {
        return Err(Error::InvalidConfig("max_seq_len must be at least 2".into()));
    }
    let first = (round + 1).saturating_sub(history_window);
    let mut history = Vec::new();
    for r in first..=round {
        let rd = &episode.rounds[r];
        history.extend(rd.human().tokens(vocab));
        if r < round {
            history.extend(rd.machine().tokens(vocab));
        }
    }
    let mut snippet = vec![SEP];
    snippet.extend(vocab.encode(&episode.landmark));

    let budget = max_seq_len - 1;
    if history.len() + snippet.len() > budget {
        let keep_snippet = snippet.len().min(budget);
        snippet.truncate(keep_snippet);
        let keep_history = budget - keep_snippet;
        history.drain(..history.len() - keep_history.min(history.len()));
    }
    let mut tokens = Vec::with_capacity(1 + history.len() + snippet.len());
    let mut segments = Vec::with_capacity(tokens.capacity());
    tokens.push(CLS);
    segments.push(Segment::History);
    segments.extend(std::iter::repeat(Segment::History).take(history.len()));
    tokens.extend(history);
    segments.extend(std::iter::repeat(Segment::Snippet).take(snippet.len()));
    tokens.extend(snippet);
    Ok(InputSequence { tokens, segments })
}

/// Reference to one (episode, round) training or evaluation example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExampleRef {
    pub episode: usize,
    pub round: usize,
}

pub fn example_refs(episodes: &[DialogueEpisode]) -> Vec<ExampleRef> {
    episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.rounds.len()).map(move |r| ExampleRef { episode: e, round: r }))
        .collect()
}

/// Deterministic split: the last `ceil(fraction * n)` episodes are held out.
pub fn split_heldout(episodes: Vec<DialogueEpisode>, fraction: f64) -> (Vec<DialogueEpisode>, Vec<DialogueEpisode>) {
    let n = episodes.len();
    let held = ((n as f64) * fraction.clamp(0.0, 1.0)).ceil() as usize;
    let mut train = episodes;
    let heldout = train.split_off(n - held.min(n));
    (train, heldout)
}

/// Every text an episode contributes to the vocabulary.
pub fn episode_texts(ep: &DialogueEpisode) -> impl Iterator<Item = &str> {
    ep.rounds
        .iter()
        .flat_map(|r| [r.human.as_str(), r.machine.as_str()])
        .chain(ep.personas.iter().map(String::as_str))
        .chain(ep.knowledge_candidates.iter().flatten().map(String::as_str))
        .chain(std::iter::once(ep.landmark.as_str()))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads and validates a normalized corpus file.
pub fn load_corpus(path: &Path) -> Result<Vec<DialogueEpisode>> {
    let episodes: Vec<DialogueEpisode> = read_jsonl(path)?;
    for ep in &episodes {
        ep.validate()?;
    }
    Ok(episodes)
}

pub fn save_corpus(path: &Path, episodes: &[DialogueEpisode]) -> Result<()> {
    write_jsonl(path, episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocab;

    fn episode(rounds: usize) -> DialogueEpisode {
        DialogueEpisode {
            id: "e0".into(),
            rounds: (1..=rounds)
                .map(|i| Round { human: format!("h{i} a"), machine: format!("m{i} b") })
                .collect(),
            personas: vec!["p one".into(), "p two".into()],
            knowledge_candidates: vec![vec!["k one".into(), "k two".into()]; rounds],
            gt_knowledge_index: vec![1; rounds],
            gt_persona_labels: vec![vec![0, 1]; rounds],
            landmark: "big tower".into(),
        }
    }

    fn vocab_for(ep: &DialogueEpisode) -> Vocab {
        Vocab::build(episode_texts(ep), 1000)
    }

    #[test]
    fn one_round_window_one() {
        let ep = episode(1);
        let v = vocab_for(&ep);
        let u = build_input(&ep, 0, 1, &v, 64).unwrap();
        let expected: Vec<TokenId> = [vec![CLS], v.encode("h1 a"), vec![SEP], v.encode("big tower")].concat();
        assert_eq!(u.tokens, expected);
        assert_eq!(u.segments.last(), Some(&Segment::Snippet));
        assert_eq!(u.cls_position(), 0);
    }

    #[test]
    fn window_one_sees_only_current_human_turn() {
        let ep = episode(3);
        let v = vocab_for(&ep);
        let u = build_input(&ep, 2, 1, &v, 64).unwrap();
        let expected: Vec<TokenId> = [vec![CLS], v.encode("h3 a"), vec![SEP], v.encode("big tower")].concat();
        assert_eq!(u.tokens, expected);
        for earlier in ["h1", "m1", "h2", "m2", "m3"] {
            assert!(!u.tokens.contains(&v.id(earlier)));
        }
    }

    #[test]
    fn window_two_hand_concatenation() {
        let ep = episode(3);
        let v = vocab_for(&ep);
        let u = build_input(&ep, 2, 2, &v, 64).unwrap();
        let expected: Vec<TokenId> = [
            vec![CLS],
            v.encode("h2 a"),
            v.encode("m2 b"),
            v.encode("h3 a"),
            vec![SEP],
            v.encode("big tower"),
        ]
        .concat();
        assert_eq!(u.tokens, expected);
    }

    #[test]
    fn round_out_of_range() {
        let ep = episode(2);
        let v = vocab_for(&ep);
        assert!(matches!(build_input(&ep, 2, 1, &v, 64), Err(Error::RoundOutOfRange { round: 2, rounds: 2 })));
    }

    #[test]
    fn truncation_drops_oldest_history_first() {
        let ep = episode(3);
        let v = vocab_for(&ep);
        // CLS + 2 history + SEP + 2 landmark
        let u = build_input(&ep, 2, 3, &v, 6).unwrap();
        let expected: Vec<TokenId> = [vec![CLS], v.encode("h3 a"), vec![SEP], v.encode("big tower")].concat();
        assert_eq!(u.tokens, expected);
        let tiny = build_input(&ep, 2, 3, &v, 3).unwrap();
        assert_eq!(tiny.tokens, vec![CLS, SEP, v.id("big")]);
    }

    #[test]
    fn validate_rejects_bad_labels() {
        let mut ep = episode(1);
        ep.gt_knowledge_index[0] = 2;
        assert!(matches!(ep.validate(), Err(Error::LabelOutOfRange { .. })));
        let mut ep = episode(1);
        ep.gt_persona_labels[0][0] = 2;
        assert!(matches!(ep.validate(), Err(Error::NonBinaryLabel(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let eps = vec![episode(2), episode(1)];
        save_corpus(&path, &eps).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), eps);
    }

    #[test]
    fn heldout_split_takes_the_tail() {
        let eps: Vec<_> = (0..10).map(|i| DialogueEpisode { id: i.to_string(), ..episode(1) }).collect();
        let (train, held) = split_heldout(eps, 0.2);
        assert_eq!(train.len(), 8);
        assert_eq!(held.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["8", "9"]);
    }
}
