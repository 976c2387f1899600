//! Multi-task training: knowledge grounding, persona grounding and the
//! retrieval-augmented generation loss, optimized jointly with AdamW.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_input, example_refs, DialogueEpisode, ExampleRef, Paragraph};
use crate::error::{Error, Result};
use crate::generator::{build_kpeq, sequence_loss_graph, target_tokens, DecodeMode, GtInjection, Kpeq};
use crate::graph::{Graph, Var};
use crate::grounding::{
    cross_entropy_graph, labels_f64, persona_grounding_loss_graph, select_knowledge, select_personas,
};
use crate::model::{build_vocab, Model, ModelConfig, INDEX_DIR};
use crate::params::{Gradients, ParamStore};
use crate::pipeline::nonempty;
use crate::retrieval::{build_index, retrieval_log_probs_graph, retrieve_by_embedding, KnowledgeIndex, QueryEncoderKind};
use crate::scoring::{Head, ScoringMethod};
use crate::tensor::{argmax, Matrix};
use crate::vocab::{normalize, TokenId};

pub const PAPER_LEARNING_RATE: f64 = 6.25e-6;
pub const PAPER_BATCH_SIZE: usize = 32;
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lambda_kg: f64,
    pub lambda_pg: f64,
    pub lambda_s: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Dialogue rounds of history in `U`.
    pub history_window: usize,
    pub beam_width: usize,
    pub k_retrieve: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Scoring method whose selections build the query during training.
    pub scoring: ScoringMethod,
    /// Also train the other scoring methods' grounding losses.
    pub auxiliary_scorers: bool,
    pub loss_mode: DecodeMode,
    pub train_query_encoder: bool,
    /// Contrastive query/document encoder epochs before the index is built.
    pub retriever_warmup_epochs: usize,
    pub retriever_learning_rate: f64,
    pub vocab_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lambda_kg: 1.0,
            lambda_pg: 1.0,
            lambda_s: 5.0,
            learning_rate: 3e-4,
            batch_size: 2,
            epochs: 6,
            seed: 7,
            history_window: 1,
            beam_width: 4,
            k_retrieve: 3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            scoring: ScoringMethod::Poly,
            auxiliary_scorers: false,
            loss_mode: DecodeMode::RagToken,
            train_query_encoder: true,
            retriever_warmup_epochs: 1,
            retriever_learning_rate: 1e-3,
            vocab_size: 4000,
        }
    }
}

impl TrainConfig {
    /// Learning rate, batch size and epoch count reported for the
    /// pretrained-backbone setting.
    pub fn paper_preset() -> Self {
        Self { learning_rate: PAPER_LEARNING_RATE, batch_size: PAPER_BATCH_SIZE, epochs: 3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let lambdas = [self.lambda_kg, self.lambda_pg, self.lambda_s];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("lambda weights must be finite and nonnegative");
        }
        let rates = [self.learning_rate, self.beta1, self.beta2, self.epsilon];
        if rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return bad("learning_rate, beta1, beta2 and epsilon must be positive");
        }
        if self.retriever_warmup_epochs > 0 && !(self.retriever_learning_rate > 0.0) {
            return bad("retriever_learning_rate must be positive");
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return bad("beta1 and beta2 must be below 1");
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("weight_decay and clip_norm must be nonnegative");
        }
        if self.batch_size == 0 || self.history_window == 0 || self.beam_width == 0 || self.k_retrieve == 0 {
            return bad("batch_size, history_window, beam_width and k_retrieve must be at least 1");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lambda_kg * l_kg + lambda_pg * l_pg + lambda_s * l_s`.
pub fn total_loss(l_kg: f64, l_pg: f64, l_s: f64, config: &TrainConfig) -> Result<f64> {
    for (name, v) in [("l_kg", l_kg), ("l_pg", l_pg), ("l_s", l_s)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(config.lambda_kg * l_kg + config.lambda_pg * l_pg + config.lambda_s * l_s)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, weight_decay: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| Matrix::zeros(e.value.rows(), e.value.cols())).collect();
        Self { learning_rate, beta1, beta2, epsilon, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * p[j]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_kg: f64,
    pub l_pg: f64,
    pub l_s: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub index: KnowledgeIndex,
    pub warmup_log: Vec<WarmupRecord>,
    pub log: Vec<StepRecord>,
    /// Per-epoch checkpoint directories, oldest first.
    pub checkpoints: Vec<PathBuf>,
}

/// Per-example component losses as graph nodes.
pub struct ExampleLosses {
    pub l_kg: Var,
    pub l_pg: Var,
    pub l_s: Var,
    pub kpeq: Kpeq,
}

/// Builds all three losses for one (episode, round) on `g`. The query fed
/// to the retriever and generator carries the selectors' current choices.
pub fn example_losses(
    g: &mut Graph,
    model: &Model,
    index: &KnowledgeIndex,
    ep: &DialogueEpisode,
    round: usize,
    cfg: &TrainConfig,
) -> Result<ExampleLosses> {
    let store = &model.store;
    let vocab = &model.vocab;
    let sel = &model.selector;
    let input = build_input(ep, round, cfg.history_window, vocab, sel.context_encoder().config().max_seq_len)?;
    let kcands: Vec<Vec<TokenId>> = ep.knowledge_candidates[round].iter().map(|c| nonempty(vocab.encode(c))).collect();
    let pcands: Vec<Vec<TokenId>> = ep.personas.iter().map(|p| nonempty(vocab.encode(p))).collect();
    let labels = labels_f64(&ep.gt_persona_labels[round]);
    let gt_k = ep.gt_knowledge_index[round];

    let h = sel.context_states(g, store, &input.tokens)?;
    let ll = sel.level_logits(g, store, h);
    let mut l_kg = None;
    let mut l_pg = None;
    let mut chosen = None;
    let methods: Vec<ScoringMethod> = if cfg.auxiliary_scorers {
        std::iter::once(cfg.scoring).chain(ScoringMethod::ALL.into_iter().filter(|&m| m != cfg.scoring)).collect()
    } else {
        vec![cfg.scoring]
    };
    for method in methods {
        let ks = sel.score_graph(g, store, Head::Knowledge, method, &input.tokens, h, &kcands)?;
        let ps = sel.score_graph(g, store, Head::Persona, method, &input.tokens, h, &pcands)?;
        let kg = cross_entropy_graph(g, ks, gt_k)?;
        let pg = persona_grounding_loss_graph(g, ps, &labels, ll)?;
        if chosen.is_none() {
            chosen = Some((g.value(ks).data().to_vec(), g.value(ps).data().to_vec()));
        }
        l_kg = Some(match l_kg {
            None => kg,
            Some(acc) => g.add(acc, kg),
        });
        l_pg = Some(match l_pg {
            None => pg,
            Some(acc) => g.add(acc, pg),
        });
    }
    let (kscores, pscores) = chosen.expect("at least one scoring method");
    let level = argmax(g.value(ll).data()).unwrap_or(0).min(pcands.len());
    let decision = select_personas(&pscores, level)?;
    let knowledge = select_knowledge(&kscores)?;
    let kpeq = build_kpeq(&input, &decision, knowledge, ep, round, vocab, GtInjection::NONE)?;
    if kpeq.personas != decision.selected || kpeq.knowledge != knowledge {
        return Err(Error::SelectionInvalid("query does not carry the selectors' output".into()));
    }

    let gen = &model.generator;
    let target = target_tokens(vocab, &ep.rounds[round].machine, gen.max_target_len());
    let q = if cfg.train_query_encoder {
        model.retriever.query_graph(g, store, &kpeq.tokens, QueryEncoderKind::Trained)?
    } else {
        let e = model.retriever.query_embedding(store, &kpeq.tokens, QueryEncoderKind::Trained)?;
        g.constant(Matrix::row_vector(e))
    };
    let k = cfg.k_retrieve.min(index.len());
    let docs = retrieve_by_embedding(index, g.value(q).data(), k)?.docs();
    let log_r = retrieval_log_probs_graph(g, index, &docs, q);
    let per_doc = docs
        .iter()
        .map(|&d| {
            let source = gen.source_tokens(&index.document(d).tokens, &kpeq.tokens);
            gen.target_log_probs_graph(g, store, &source, &target)
        })
        .collect::<Result<Vec<_>>>()?;
    let l_s = sequence_loss_graph(g, &per_doc, log_r, cfg.loss_mode)?;
    Ok(ExampleLosses { l_kg: l_kg.unwrap(), l_pg: l_pg.unwrap(), l_s, kpeq })
}

/// Index paragraph sharing the landmark title with the most word overlap
/// with the ground-truth knowledge sentence; falls back to all paragraphs.
pub fn positive_document(index: &KnowledgeIndex, ep: &DialogueEpisode, round: usize) -> usize {
    let gold: std::collections::HashSet<String> =
        normalize(&ep.knowledge_candidates[round][ep.gt_knowledge_index[round]]).into_iter().collect();
    let same_title = index.by_title(&ep.landmark);
    let pool: Vec<usize> = if same_title.is_empty() { (0..index.len()).collect() } else { same_title };
    let overlap = |d: usize| normalize(&index.document(d).text).iter().filter(|w| gold.contains(*w)).count();
    let mut best = pool[0];
    let mut best_overlap = overlap(best);
    for &d in &pool[1..] {
        let o = overlap(d);
        if o > best_overlap {
            best = d;
            best_overlap = o;
        }
    }
    best
}

fn gold_query(model: &Model, ep: &DialogueEpisode, round: usize, history_window: usize) -> Result<Vec<TokenId>> {
    let max = model.selector.context_encoder().config().max_seq_len;
    let input = build_input(ep, round, history_window, &model.vocab, max)?;
    let decision = crate::grounding::PersonaDecision {
        level: 0,
        selected: Vec::new(),
        per_candidate_prob: Vec::new(),
    };
    Ok(build_kpeq(&input, &decision, 0, ep, round, &model.vocab, GtInjection::BOTH)?.tokens)
}

/// Contrastive pre-training of the query and document towers on gold
/// queries. Each query is scored against every positive in the batch plus
/// one hard negative from the same landmark.
fn warm_up_retriever(
    model: &mut Model,
    probe: &KnowledgeIndex,
    episodes: &[DialogueEpisode],
    refs: &[ExampleRef],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<WarmupRecord>> {
    let mut opt = AdamW::new(&model.store, cfg.retriever_learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, 0.0);
    let mut log = Vec::new();
    let mut order = refs.to_vec();
    let mut step = 0;
    for epoch in 0..cfg.retriever_warmup_epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut queries = Vec::with_capacity(batch.len());
            let mut docs: Vec<usize> = Vec::new();
            let mut positives = Vec::with_capacity(batch.len());
            for r in batch {
                let ep = &episodes[r.episode];
                queries.push(gold_query(model, ep, r.round, cfg.history_window)?);
                let pos = positive_document(probe, ep, r.round);
                let same = probe.by_title(&ep.landmark);
                let negs: Vec<usize> = same.into_iter().filter(|&d| d != pos).collect();
                let hard = negs.choose(rng).copied();
                for d in std::iter::once(pos).chain(hard) {
                    if !docs.contains(&d) {
                        docs.push(d);
                    }
                }
                positives.push(docs.iter().position(|&d| d == pos).unwrap());
            }
            let mut g = Graph::new();
            let rows = docs
                .iter()
                .map(|&d| model.retriever.doc_graph(&mut g, &model.store, &probe.document(d).tokens))
                .collect::<Result<Vec<_>>>()?;
            let dmat = if rows.len() == 1 { rows[0] } else { g.vcat(&rows) };
            let mut total = None;
            for (q, &pos) in queries.iter().zip(&positives) {
                let qv = model.retriever.query_graph(&mut g, &model.store, q, QueryEncoderKind::Trained)?;
                let s = g.matmul_t(qv, dmat);
                let l = cross_entropy_graph(&mut g, s, pos)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l),
                });
            }
            let loss = g.scale(total.unwrap(), 1.0 / batch.len() as f64);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::DivergenceDetected { step, checkpoint: None });
            }
            let mut grads = Gradients::zeros_like(&model.store);
            g.backward(loss, 1.0).accumulate_into(&mut grads);
            if cfg.clip_norm > 0.0 {
                grads.clip_global_norm(cfg.clip_norm);
            }
            opt.step(&mut model.store, &grads);
            log.push(WarmupRecord { epoch, step, loss: value });
            step += 1;
        }
    }
    Ok(log)
}

/// Builds the vocabulary and model from `cfg.seed`, warms up the retriever,
/// builds the frozen index and runs joint training. With `out_dir`, writes
/// the step log and one checkpoint (with its index) per epoch.
pub fn train(
    episodes: &[DialogueEpisode],
    paragraphs: &[Paragraph],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if episodes.is_empty() || paragraphs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for ep in episodes {
        ep.validate()?;
    }
    let vocab = build_vocab(episodes, paragraphs, cfg.vocab_size);
    let mut model = Model::new(&cfg.model, vocab, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let refs = example_refs(episodes);

    let warmup_log = if cfg.retriever_warmup_epochs > 0 {
        let probe = build_index(paragraphs, &model.retriever, &model.store, &model.vocab)?;
        warm_up_retriever(&mut model, &probe, episodes, &refs, cfg, &mut rng)?
    } else {
        Vec::new()
    };
    model.retriever.snapshot_base(&mut model.store);
    let index = build_index(paragraphs, &model.retriever, &model.store, &model.vocab)?;
    let doc_prefix = format!("{}.", model.retriever.doc_encoder().prefix());
    model.store.set_trainable_prefix(&doc_prefix, false);
    if !cfg.train_query_encoder {
        let q_prefix = format!("{}.", model.retriever.query_encoder(QueryEncoderKind::Trained).prefix());
        model.store.set_trainable_prefix(&q_prefix, false);
    }

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut opt = AdamW::from_config(&model.store, cfg);
    let mut log = Vec::new();
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let mut order = refs.clone();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Gradients::zeros_like(&model.store);
            let (mut kg, mut pg, mut s) = (0.0, 0.0, 0.0);
            for r in batch {
                let mut g = Graph::new();
                if cfg.model.dropout_rate > 0.0 {
                    let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add((step * 4096 + r.episode * 16 + r.round) as u64);
                    g = g.with_dropout(ChaCha8Rng::seed_from_u64(seed));
                }
                let ex = example_losses(&mut g, &model, &index, &episodes[r.episode], r.round, cfg)?;
                let a = g.scale(ex.l_kg, cfg.lambda_kg);
                let b = g.scale(ex.l_pg, cfg.lambda_pg);
                let c = g.scale(ex.l_s, cfg.lambda_s);
                let ab = g.add(a, b);
                let loss = g.add(ab, c);
                kg += g.scalar(ex.l_kg) * scale;
                pg += g.scalar(ex.l_pg) * scale;
                s += g.scalar(ex.l_s) * scale;
                if !g.scalar(loss).is_finite() {
                    return Err(Error::DivergenceDetected { step, checkpoint: checkpoints.last().cloned() });
                }
                g.backward(loss, scale).accumulate_into(&mut grads);
            }
            let loss = total_loss(kg, pg, s, cfg)
                .map_err(|_| Error::DivergenceDetected { step, checkpoint: checkpoints.last().cloned() })?;
            if !grads.is_finite() {
                return Err(Error::DivergenceDetected { step, checkpoint: checkpoints.last().cloned() });
            }
            let grad_norm = if cfg.clip_norm > 0.0 { grads.clip_global_norm(cfg.clip_norm) } else { grads.global_norm() };
            opt.step(&mut model.store, &grads);
            let record = StepRecord { epoch, step, l_kg: kg, l_pg: pg, l_s: s, loss, grad_norm };
            if let Some((file, path)) = log_file.as_mut() {
                let line = serde_json::to_string(&record).map_err(|e| Error::json("step record", e))?;
                writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            log.push(record);
            step += 1;
        }
        if let Some(dir) = out_dir {
            let ckpt = dir.join(format!("epoch-{}", epoch + 1));
            save_checkpoint(&model, &index, &ckpt)?;
            checkpoints.push(ckpt);
        }
    }
    Ok(TrainOutcome { model, index, warmup_log, log, checkpoints })
}

/// Writes the model and its index (under `index/`) into `dir`.
pub fn save_checkpoint(model: &Model, index: &KnowledgeIndex, dir: &Path) -> Result<()> {
    model.save(dir)?;
    index.save(&dir.join(INDEX_DIR))
}

/// Loads a model and its index written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Model, KnowledgeIndex)> {
    let model = Model::load(dir)?;
    let index = KnowledgeIndex::load(&dir.join(INDEX_DIR))?;
    Ok((model, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_with_paragraphs, SynthConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                ffn_mult: 2,
                n_codes: 2,
                max_input_len: 48,
                max_source_len: 80,
                ..Default::default()
            },
            batch_size: 2,
            epochs: 1,
            k_retrieve: 2,
            ..Default::default()
        }
    }

    #[test]
    fn total_loss_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &cfg).unwrap(), 7.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg).unwrap(), 0.0);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn doubling_lambda_s_doubles_only_its_term() {
        let cfg = TrainConfig::default();
        let doubled = TrainConfig { lambda_s: 2.0 * cfg.lambda_s, ..cfg.clone() };
        let (a, b, c) = (0.3, 1.7, 0.9);
        let base = total_loss(a, b, c, &cfg).unwrap();
        let more = total_loss(a, b, c, &doubled).unwrap();
        assert!((more - base - cfg.lambda_s * c).abs() < 1e-12);
        assert_eq!(total_loss(a, b, 0.0, &cfg).unwrap(), total_loss(a, b, 0.0, &doubled).unwrap());
    }

    #[test]
    fn adamw_matches_hand_stepped_reference() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::row_vector(vec![1.0, -2.0]));
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.01);
        let mut opt = AdamW::new(&store, lr, b1, b2, eps, wd);
        let grad_seq = [[0.5, -1.0], [0.25, 2.0], [-0.75, 0.5]];

        let mut p = [1.0f64, -2.0];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        for (t, gs) in grad_seq.iter().enumerate() {
            let mut grads = Gradients::zeros_like(&store);
            grads.accumulate(id, &Matrix::row_vector(gs.to_vec()));
            opt.step(&mut store, &grads);
            let t = (t + 1) as i32;
            for j in 0..2 {
                m[j] = b1 * m[j] + (1.0 - b1) * gs[j];
                v[j] = b2 * v[j] + (1.0 - b2) * gs[j] * gs[j];
                let mh = m[j] / (1.0 - b1.powi(t));
                let vh = v[j] / (1.0 - b2.powi(t));
                p[j] = p[j] - lr * wd * p[j] - lr * mh / (vh.sqrt() + eps);
            }
            for j in 0..2 {
                assert!((store.get(id).data()[j] - p[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adamw_skips_frozen_parameters() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::scalar(1.0));
        store.set_trainable(id, false);
        let mut opt = AdamW::new(&store, 0.1, 0.9, 0.999, 1e-8, 0.1);
        let mut grads = Gradients::zeros_like(&store);
        grads.accumulate(id, &Matrix::scalar(3.0));
        opt.step(&mut store, &grads);
        assert_eq!(store.get(id).item(), 1.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TrainConfig { lambda_s: -1.0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { beta2: 1.0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        }
        assert_eq!(TrainConfig::paper_preset().learning_rate, PAPER_LEARNING_RATE);
    }

    #[test]
    fn one_step_one_record_and_checkpoint_round_trip() {
        let synth = SynthConfig { episodes: 1, rounds: 1, landmarks: 2, ..Default::default() };
        let corpus = generate_synthetic_with_paragraphs(&synth, 3).unwrap();
        let cfg = TrainConfig { retriever_warmup_epochs: 0, ..tiny_config() };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&corpus.episodes, &corpus.paragraphs, &cfg, Some(dir.path())).unwrap();
        assert_eq!(out.log.len(), 1);
        let lines = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 1);
        assert_eq!(out.checkpoints.len(), 1);
        let (model, index) = load_checkpoint(&out.checkpoints[0]).unwrap();
        let mut rounded = out.model.store.clone();
        rounded.round_to_f32();
        assert_eq!(model.store, rounded);
        assert_eq!(index.documents(), out.index.documents());

        let again = Model::load(&out.checkpoints[0]).unwrap();
        let opts = crate::pipeline::InferenceOptions { k: 2, ..Default::default() };
        let a = crate::pipeline::run_turn(&model, &index, &corpus.episodes[0], 0, &opts).unwrap();
        let b = crate::pipeline::run_turn(&again, &index, &corpus.episodes[0], 0, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_loss_trace() {
        let synth = SynthConfig { episodes: 4, rounds: 1, landmarks: 2, ..Default::default() };
        let corpus = generate_synthetic_with_paragraphs(&synth, 5).unwrap();
        let cfg = tiny_config();
        let a = train(&corpus.episodes, &corpus.paragraphs, &cfg, None).unwrap();
        let b = train(&corpus.episodes, &corpus.paragraphs, &cfg, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.warmup_log, b.warmup_log);
        assert_eq!(a.model.store, b.model.store);
    }

    #[test]
    fn doc_tower_frozen_and_base_snapshot_unchanged_by_joint_training() {
        let synth = SynthConfig { episodes: 4, rounds: 1, landmarks: 2, ..Default::default() };
        let corpus = generate_synthetic_with_paragraphs(&synth, 6).unwrap();
        let cfg = TrainConfig { epochs: 2, ..tiny_config() };
        let out = train(&corpus.episodes, &corpus.paragraphs, &cfg, None).unwrap();
        let rebuilt = build_index(&corpus.paragraphs, &out.model.retriever, &out.model.store, &out.model.vocab).unwrap();
        assert_eq!(rebuilt.embeddings(), out.index.embeddings());
        let store = &out.model.store;
        assert!(store.entries().iter().filter(|e| e.name.starts_with("ret.doc.")).all(|e| !e.trainable));
        assert!(store.entries().iter().filter(|e| e.name.starts_with("ret.query_base.")).all(|e| !e.trainable));
    }

    #[test]
    fn positive_document_matches_gold_fact() {
        let synth = SynthConfig { episodes: 5, ..Default::default() };
        let corpus = generate_synthetic_with_paragraphs(&synth, 2).unwrap();
        let vocab = build_vocab(&corpus.episodes, &corpus.paragraphs, 2000);
        let model = Model::new(&tiny_config().model, vocab, 1).unwrap();
        let index = build_index(&corpus.paragraphs, &model.retriever, &model.store, &model.vocab).unwrap();
        for ep in &corpus.episodes {
            for r in 0..ep.num_rounds() {
                let d = positive_document(&index, ep, r);
                let doc = index.document(d);
                assert_eq!(doc.title, ep.landmark);
                let gold = &ep.knowledge_candidates[r][ep.gt_knowledge_index[r]];
                let attr = gold.split_whitespace().nth(1).unwrap();
                assert!(doc.text.contains(&format!(" {attr} ")));
            }
        }
    }
}
