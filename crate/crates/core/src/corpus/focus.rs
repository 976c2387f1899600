//! Loader for FoCus-style JSON dialogue files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DialogueEpisode, Paragraph, Round};
use crate::error::{Error, Result};

/// Field names used to read a FoCus-style file. Every key can be overridden
/// from JSON; missing keys keep their defaults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaMap {
    /// Top-level key holding the episode list. A root array is also accepted.
    pub data: String,
    pub id: String,
    pub personas: String,
    /// Landmark name, or a URL whose last path segment names it.
    pub landmark: String,
    pub utterances: String,
    /// Per-round dialogue list key prefix (`dialogue1`, `dialogue2`, ...).
    pub dialogue_prefix: String,
    pub persona_grounding: String,
    pub knowledge_candidates: String,
    pub knowledge_answer_index: String,
    /// Episode-level Wikipedia paragraphs.
    pub knowledge_paragraphs: String,
}

impl Default for SchemaMap {
    fn default() -> Self {
        Self {
            data: "data".into(),
            id: "dialogID".into(),
            personas: "persona".into(),
            landmark: "landmark_link".into(),
            utterances: "utterance".into(),
            dialogue_prefix: "dialogue".into(),
            persona_grounding: "persona_grounding".into(),
            knowledge_candidates: "knowledge_candidates".into(),
            knowledge_answer_index: "knowledge_answer_index".into(),
            knowledge_paragraphs: "knowledge".into(),
        }
    }
}

/// Episodes plus the episode-level knowledge paragraphs, titled by landmark.
#[derive(Debug, Clone, Default)]
pub struct FocusData {
    pub episodes: Vec<DialogueEpisode>,
    pub paragraphs: Vec<Paragraph>,
}

pub fn load_focus(path: &Path, schema: &SchemaMap) -> Result<Vec<DialogueEpisode>> {
    Ok(load_focus_data(path, schema)?.episodes)
}

pub fn load_focus_data(path: &Path, schema: &SchemaMap) -> Result<FocusData> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_focus(&text, schema, &path.display().to_string())
}

pub fn load_focus_str(text: &str, schema: &SchemaMap) -> Result<Vec<DialogueEpisode>> {
    Ok(parse_focus(text, schema, "<string>")?.episodes)
}

fn parse_focus(text: &str, schema: &SchemaMap, context: &str) -> Result<FocusData> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::json(context, e))?;
    let list = match &root {
        Value::Array(items) => items.as_slice(),
        Value::Object(map) => match map.get(&schema.data) {
            Some(Value::Array(items)) => items.as_slice(),
            _ => return Err(Error::MissingField { episode: "<root>".into(), key: schema.data.clone() }),
        },
        _ => return Err(Error::MissingField { episode: "<root>".into(), key: schema.data.clone() }),
    };
    let mut out = FocusData::default();
    for (i, raw) in list.iter().enumerate() {
        let (ep, paragraphs) = parse_episode(raw, i, schema)?;
        out.episodes.push(ep);
        out.paragraphs.extend(paragraphs);
    }
    Ok(out)
}

fn parse_episode(raw: &Value, position: usize, s: &SchemaMap) -> Result<(DialogueEpisode, Vec<Paragraph>)> {
    let id = match raw.get(&s.id) {
        Some(Value::String(v)) => v.clone(),
        Some(v) => v.to_string(),
        None => format!("#{position}"),
    };
    let missing = |key: &str| Error::MissingField { episode: id.clone(), key: key.to_string() };

    let personas = string_list(raw.get(&s.personas).ok_or_else(|| missing(&s.personas))?)
        .ok_or_else(|| missing(&s.personas))?;
    let landmark_raw = raw
        .get(&s.landmark)
        .and_then(Value::as_str)
        .ok_or_else(|| missing(&s.landmark))?;
    let landmark = landmark_name(landmark_raw);
    let turns = raw
        .get(&s.utterances)
        .and_then(Value::as_array)
        .ok_or_else(|| missing(&s.utterances))?;

    let mut ep = DialogueEpisode {
        id: id.clone(),
        rounds: Vec::with_capacity(turns.len()),
        personas,
        knowledge_candidates: Vec::with_capacity(turns.len()),
        gt_knowledge_index: Vec::with_capacity(turns.len()),
        gt_persona_labels: Vec::with_capacity(turns.len()),
        landmark: landmark.clone(),
    };

    for (r, turn) in turns.iter().enumerate() {
        let obj = turn.as_object().ok_or_else(|| missing(&s.utterances))?;
        let dialogue = obj
            .iter()
            .find(|(k, _)| k.starts_with(&s.dialogue_prefix))
            .and_then(|(_, v)| string_list(v))
            .ok_or_else(|| missing(&format!("{}{}", s.dialogue_prefix, r + 1)))?;
        if dialogue.len() < 2 {
            return Err(missing(&format!("{}{}", s.dialogue_prefix, r + 1)));
        }
        ep.rounds.push(Round {
            human: dialogue[dialogue.len() - 2].clone(),
            machine: dialogue[dialogue.len() - 1].clone(),
        });

        let grounding = obj
            .get(&s.persona_grounding)
            .and_then(Value::as_array)
            .ok_or_else(|| missing(&s.persona_grounding))?;
        let labels = grounding
            .iter()
            .map(|v| match v {
                Value::Bool(b) => Ok(u8::from(*b)),
                Value::Number(n) => match n.as_f64() {
                    Some(x) if x == 0.0 || x == 1.0 => Ok(x as u8),
                    Some(x) => Err(Error::NonBinaryLabel(x)),
                    None => Err(missing(&s.persona_grounding)),
                },
                _ => Err(missing(&s.persona_grounding)),
            })
            .collect::<Result<Vec<u8>>>()?;
        ep.gt_persona_labels.push(labels);

        let cands = obj
            .get(&s.knowledge_candidates)
            .and_then(string_list)
            .ok_or_else(|| missing(&s.knowledge_candidates))?;
        let answer = obj
            .get(&s.knowledge_answer_index)
            .and_then(Value::as_u64)
            .ok_or_else(|| missing(&s.knowledge_answer_index))? as usize;
        if answer >= cands.len() {
            return Err(Error::LabelOutOfRange { episode: id.clone(), round: r, label: answer, count: cands.len() });
        }
        ep.knowledge_candidates.push(cands);
        ep.gt_knowledge_index.push(answer);
    }
    ep.validate()?;

    let paragraphs = raw
        .get(&s.knowledge_paragraphs)
        .and_then(string_list)
        .unwrap_or_default()
        .into_iter()
        .map(|text| Paragraph { title: landmark.clone(), text })
        .collect();
    Ok((ep, paragraphs))
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    v.as_array()?
        .iter()
        .map(|x| x.as_str().map(str::to_string))
        .collect()
}

/// `https://en.wikipedia.org/wiki/Finding_Nemo_Submarine_Voyage` becomes
/// `Finding Nemo Submarine Voyage`; plain names pass through.
fn landmark_name(raw: &str) -> String {
    let tail = if raw.contains("://") {
        raw.trim_end_matches('/').rsplit('/').next().unwrap_or(raw)
    } else {
        raw
    };
    tail.replace('_', " ")
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{"data": [{
        "dialogID": "d1",
        "landmark_link": "https://en.wikipedia.org/wiki/Big_Ben",
        "persona": ["I like clocks.", "I live in Paris."],
        "knowledge": ["Big Ben is a clock tower."],
        "utterance": [
            {"dialogue1": ["Where is this?", "It is in London."],
             "persona_grounding": [false, true],
             "knowledge_candidates": ["a", "b", "c"],
             "knowledge_answer_index": 2},
            {"dialogue2": ["Where is this?", "It is in London.", "How tall?", "Very tall."],
             "persona_grounding": [1, 0],
             "knowledge_candidates": ["d", "e"],
             "knowledge_answer_index": 0}
        ]}]}"#;

    #[test]
    fn parses_rounds_and_labels() {
        let eps = load_focus_str(ONE, &SchemaMap::default()).unwrap();
        assert_eq!(eps.len(), 1);
        let ep = &eps[0];
        assert_eq!(ep.landmark, "Big Ben");
        assert_eq!(ep.rounds[1].human, "How tall?");
        assert_eq!(ep.rounds[1].machine, "Very tall.");
        assert_eq!(ep.gt_persona_labels, vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(ep.gt_knowledge_index, vec![2, 0]);
    }

    #[test]
    fn empty_list_is_not_an_error() {
        assert!(load_focus_str(r#"{"data": []}"#, &SchemaMap::default()).unwrap().is_empty());
        assert!(load_focus_str("[]", &SchemaMap::default()).unwrap().is_empty());
    }

    #[test]
    fn renamed_keys_resolve_through_schema_map() {
        let renamed = ONE.replace("\"persona\"", "\"persona_profile\"").replace("landmark_link", "topic");
        let schema: SchemaMap =
            serde_json::from_str(r#"{"personas": "persona_profile", "landmark": "topic"}"#).unwrap();
        let eps = load_focus_str(&renamed, &schema).unwrap();
        assert_eq!(eps[0].personas.len(), 2);
        assert!(load_focus_str(&renamed, &SchemaMap::default()).is_err());
    }

    #[test]
    fn missing_field_names_episode_and_key() {
        let broken = ONE.replace("\"knowledge_answer_index\": 0", "\"other\": 0");
        match load_focus_str(&broken, &SchemaMap::default()) {
            Err(Error::MissingField { episode, key }) => {
                assert_eq!(episode, "d1");
                assert_eq!(key, "knowledge_answer_index");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn answer_index_out_of_range() {
        let broken = ONE.replace("\"knowledge_answer_index\": 2", "\"knowledge_answer_index\": 3");
        assert!(matches!(
            load_focus_str(&broken, &SchemaMap::default()),
            Err(Error::LabelOutOfRange { label: 3, count: 3, .. })
        ));
    }
}
