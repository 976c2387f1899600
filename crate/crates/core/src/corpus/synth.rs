//! Seeded synthetic persona/knowledge dialogue corpora.
//!
//! Each corpus is drawn from a small world of landmarks. A landmark has one
//! fact per attribute, and each fact has a value and a detail. The human
//! turn names an attribute and may drop cue words tied to persona
//! sentences. The machine reply states the value, the detail (only present
//! in the index paragraph), and the hobby of every cued persona (only
//! present in the persona sentence). The grounding labels are therefore
//! recoverable from lexical overlap with the human turn.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DialogueEpisode, Paragraph, Round};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub episodes: usize,
    pub rounds: usize,
    /// Persona sentences per episode (P).
    pub personas: usize,
    /// Knowledge candidates per round (T); also the number of attributes.
    pub knowledge_candidates: usize,
    pub landmarks: usize,
    pub values: usize,
    pub details: usize,
    pub hobbies: usize,
    pub fillers: usize,
    /// Relative weight of a human turn cueing 0, 1, 2, ... personas.
    pub persona_mention_weights: Vec<u32>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            episodes: 400,
            rounds: 2,
            personas: 5,
            knowledge_candidates: 10,
            landmarks: 24,
            values: 30,
            details: 30,
            hobbies: 20,
            fillers: 12,
            persona_mention_weights: vec![5, 4, 1],
        }
    }
}

const TEMPLATE_WORDS: [&str; 14] =
    ["the", "of", "is", "has", "and", "famous", "for", "i", "love", "you", "what", "tell", "about", "so"];
const QUESTION_WORDS: [&str; 2] = ["what", "tell"];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.rounds == 0 || self.personas == 0 || self.knowledge_candidates == 0 {
            return bad("rounds, personas and knowledge_candidates must be at least 1");
        }
        if self.landmarks == 0 || self.values == 0 || self.details == 0 || self.fillers == 0 {
            return bad("landmarks, values, details and fillers must be at least 1");
        }
        if self.hobbies < self.personas {
            return bad("hobbies must be at least personas");
        }
        if self.persona_mention_weights.is_empty()
            || self.persona_mention_weights.len() > self.personas + 1
            || self.persona_mention_weights.iter().all(|&w| w == 0)
        {
            return bad("persona_mention_weights needs 1..=personas+1 entries with a positive weight");
        }
        Ok(())
    }

    /// Distinct word types the generator can emit, reserved tokens excluded.
    pub fn vocab_size(&self) -> usize {
        TEMPLATE_WORDS.len()
            + self.knowledge_candidates
            + 2 * self.landmarks
            + self.values
            + self.details
            + 2 * self.hobbies
            + self.fillers
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub episodes: Vec<DialogueEpisode>,
    /// One paragraph per (landmark, attribute) fact.
    pub paragraphs: Vec<Paragraph>,
}

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<DialogueEpisode>> {
    Ok(generate_synthetic_with_paragraphs(config, seed)?.episodes)
}

struct Landmark {
    name: String,
    values: Vec<String>,
    details: Vec<String>,
}

struct Hobby {
    word: String,
    cue: String,
}

pub fn generate_synthetic_with_paragraphs(config: &SynthConfig, seed: u64) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = WordPool::new();

    let attributes = words.take(&mut rng, config.knowledge_candidates);
    let landmark_words = words.take(&mut rng, 2 * config.landmarks);
    let value_words = words.take(&mut rng, config.values);
    let detail_words = words.take(&mut rng, config.details);
    let hobby_words = words.take(&mut rng, config.hobbies);
    let cue_words = words.take(&mut rng, config.hobbies);
    let filler_words = words.take(&mut rng, config.fillers);

    let landmarks: Vec<Landmark> = (0..config.landmarks)
        .map(|l| Landmark {
            name: format!("{} {}", landmark_words[2 * l], landmark_words[2 * l + 1]),
            values: (0..attributes.len()).map(|_| value_words.choose(&mut rng).unwrap().clone()).collect(),
            details: (0..attributes.len()).map(|_| detail_words.choose(&mut rng).unwrap().clone()).collect(),
        })
        .collect();
    let hobbies: Vec<Hobby> = hobby_words
        .into_iter()
        .zip(cue_words)
        .map(|(word, cue)| Hobby { word, cue })
        .collect();

    let paragraphs = landmarks
        .iter()
        .flat_map(|lm| {
            attributes.iter().enumerate().map(move |(a, attr)| Paragraph {
                title: lm.name.clone(),
                text: format!("{} has {} {} and is famous for {}", lm.name, attr, lm.values[a], lm.details[a]),
            })
        })
        .collect();

    let mention_total: u32 = config.persona_mention_weights.iter().sum();
    let mut episodes = Vec::with_capacity(config.episodes);
    for e in 0..config.episodes {
        let lm = &landmarks[rng.gen_range(0..landmarks.len())];
        let chosen: Vec<&Hobby> = hobbies.choose_multiple(&mut rng, config.personas).collect();
        let personas = chosen.iter().map(|h| format!("i love {} and {}", h.word, h.cue)).collect();
        let mut ep = DialogueEpisode {
            id: format!("synth-{seed}-{e:05}"),
            rounds: Vec::with_capacity(config.rounds),
            personas,
            knowledge_candidates: Vec::with_capacity(config.rounds),
            gt_knowledge_index: Vec::with_capacity(config.rounds),
            gt_persona_labels: Vec::with_capacity(config.rounds),
            landmark: lm.name.clone(),
        };
        for _ in 0..config.rounds {
            let attr = rng.gen_range(0..attributes.len());
            let mentions = {
                let mut pick = rng.gen_range(0..mention_total);
                let mut count = 0;
                for (c, &w) in config.persona_mention_weights.iter().enumerate() {
                    if pick < w {
                        count = c;
                        break;
                    }
                    pick -= w;
                }
                count
            };
            let mut cued: Vec<usize> = (0..config.personas).collect::<Vec<_>>();
            cued.shuffle(&mut rng);
            cued.truncate(mentions);

            let q = QUESTION_WORDS.choose(&mut rng).unwrap();
            let mut human = format!("{q} the {} of {}", attributes[attr], lm.name);
            for &p in &cued {
                let filler = filler_words.choose(&mut rng).unwrap();
                human.push_str(&format!(" {filler} {}", chosen[p].cue));
            }
            if rng.gen_bool(0.5) {
                human.push_str(&format!(" {}", filler_words.choose(&mut rng).unwrap()));
            }

            let mut sorted = cued.clone();
            sorted.sort_unstable();
            let mut machine =
                format!("the {} is {} famous for {}", attributes[attr], lm.values[attr], lm.details[attr]);
            for &p in &sorted {
                machine.push_str(&format!(" so you love {}", chosen[p].word));
            }

            let mut order: Vec<usize> = (0..attributes.len()).collect();
            order.shuffle(&mut rng);
            let candidates = order
                .iter()
                .map(|&a| format!("the {} of {} is {}", attributes[a], lm.name, lm.values[a]))
                .collect();
            let gt = order.iter().position(|&a| a == attr).unwrap();

            let mut labels = vec![0u8; config.personas];
            for &p in &cued {
                labels[p] = 1;
            }
            ep.rounds.push(Round { human, machine });
            ep.knowledge_candidates.push(candidates);
            ep.gt_knowledge_index.push(gt);
            ep.gt_persona_labels.push(labels);
        }
        episodes.push(ep);
    }
    Ok(SyntheticCorpus { episodes, paragraphs })
}

/// Unique pronounceable pseudo-words that never collide with template words.
struct WordPool {
    used: HashSet<String>,
}

impl WordPool {
    fn new() -> Self {
        Self { used: TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect() }
    }

    fn take(&mut self, rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
        const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
        const VOWELS: &[u8] = b"aeiou";
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::with_capacity(syllables * 2);
            for _ in 0..syllables {
                w.push(*CONSONANTS.choose(rng).unwrap() as char);
                w.push(*VOWELS.choose(rng).unwrap() as char);
            }
            if self.used.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    }
}
