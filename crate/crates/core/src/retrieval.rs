//! Dense and TF-IDF retrieval over a frozen paragraph index.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::corpus::{read_jsonl, write_jsonl, Paragraph};
use crate::encoder::{keep_first_and_tail, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{dot, softmax, Matrix};
use crate::vocab::{is_reserved, TokenId, Vocab, SEP};

/// Query plus document tokens allowed in one TF-IDF comparison.
pub const TFIDF_TOKEN_BUDGET: usize = 512;

const PARAGRAPHS_FILE: &str = "paragraphs.jsonl";
const EMBEDDINGS: &str = "embeddings";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
    /// `title [SEP] text`.
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeIndex {
    documents: Vec<Document>,
    embeddings: Matrix,
    tfidf: TfIdf,
}

impl KnowledgeIndex {
    /// Index over precomputed embeddings, one row per document.
    pub fn from_parts(documents: Vec<Document>, embeddings: Matrix) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if documents.len() != embeddings.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} documents but {} embeddings",
                documents.len(),
                embeddings.rows()
            )));
        }
        let tfidf = TfIdf::new(&documents);
        Ok(Self { documents, embeddings, tfidf })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn d_retr(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn document(&self, i: usize) -> &Document {
        &self.documents[i]
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// Always true: an index cannot be modified after it is built.
    pub fn is_frozen(&self) -> bool {
        true
    }

    /// Indices of documents whose title equals `title` (case-insensitive).
    pub fn by_title(&self, title: &str) -> Vec<usize> {
        let t = title.to_lowercase();
        (0..self.len()).filter(|&i| self.documents[i].title.to_lowercase() == t).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        archive::save_tensors(dir, [(EMBEDDINGS, &self.embeddings)])?;
        write_jsonl(&dir.join(PARAGRAPHS_FILE), &self.documents)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let tensors = archive::load_tensors(dir)?;
        let embeddings = tensors
            .into_iter()
            .find(|(n, _)| n == EMBEDDINGS)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Corrupt(format!("{} has no {EMBEDDINGS} tensor", dir.display())))?;
        let documents: Vec<Document> = read_jsonl(&dir.join(PARAGRAPHS_FILE))?;
        Self::from_parts(documents, embeddings).map_err(|e| Error::Corrupt(format!("{}: {e}", dir.display())))
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(PARAGRAPHS_FILE).is_file() && fs::metadata(dir.join(archive::MANIFEST_FILE)).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryEncoderKind {
    /// The query encoder as trained with the generator.
    Trained,
    /// The snapshot taken after retriever pre-training, before joint training.
    Base,
}

/// Query and document towers. The document tower is only used to build the
/// index and is never updated afterwards.
#[derive(Debug, Clone)]
pub struct Retriever {
    query: Encoder,
    query_base: Encoder,
    doc: Encoder,
}

impl Retriever {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let query = Encoder::new(store, &format!("{prefix}.query"), config, rng)?;
        let query_base = Encoder::new(store, &format!("{prefix}.query_base"), config, rng)?;
        let doc = Encoder::new(store, &format!("{prefix}.doc"), config, rng)?;
        store.set_trainable_prefix(&format!("{prefix}.query_base."), false);
        Ok(Self { query, query_base, doc })
    }

    pub fn query_encoder(&self, kind: QueryEncoderKind) -> &Encoder {
        match kind {
            QueryEncoderKind::Trained => &self.query,
            QueryEncoderKind::Base => &self.query_base,
        }
    }

    pub fn doc_encoder(&self) -> &Encoder {
        &self.doc
    }

    /// Copies the current query encoder into the base snapshot.
    pub fn snapshot_base(&self, store: &mut ParamStore) {
        store.copy_prefix(&format!("{}.", self.query.prefix()), &format!("{}.", self.query_base.prefix()));
    }

    /// `1 x d` query embedding: the state at position 0 of the query tokens,
    /// which start with CLS. Over-long queries keep CLS and their tail.
    pub fn query_graph(&self, g: &mut Graph, store: &ParamStore, tokens: &[TokenId], kind: QueryEncoderKind) -> Result<Var> {
        let enc = self.query_encoder(kind);
        if tokens.is_empty() {
            return Err(Error::EmptyCandidate);
        }
        let seq = keep_first_and_tail(tokens, enc.config().max_seq_len);
        let h = enc.forward(g, store, &seq, None)?;
        Ok(g.slice_rows(h, 0, 1))
    }

    pub fn query_embedding(&self, store: &ParamStore, tokens: &[TokenId], kind: QueryEncoderKind) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let q = self.query_graph(&mut g, store, tokens, kind)?;
        Ok(g.value(q).data().to_vec())
    }

    /// `1 x d` document embedding of `[CLS] + tokens`.
    pub fn doc_graph(&self, g: &mut Graph, store: &ParamStore, tokens: &[TokenId]) -> Result<Var> {
        self.doc.pooled(g, store, tokens)
    }

    pub fn doc_embedding(&self, store: &ParamStore, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let d = self.doc_graph(&mut g, store, tokens)?;
        Ok(g.value(d).data().to_vec())
    }
}

/// `title [SEP] text` as token ids.
pub fn document_tokens(vocab: &Vocab, title: &str, text: &str) -> Vec<TokenId> {
    let mut t = vocab.encode(title);
    t.push(SEP);
    t.extend(vocab.encode(text));
    t
}

/// Embeds every distinct paragraph once with the document encoder.
/// Exact duplicates (same title and text) are kept once, in first-seen order.
pub fn build_index(
    paragraphs: &[Paragraph],
    retriever: &Retriever,
    store: &ParamStore,
    vocab: &Vocab,
) -> Result<KnowledgeIndex> {
    let mut seen = HashSet::new();
    let mut documents = Vec::new();
    for p in paragraphs {
        if seen.insert((p.title.as_str(), p.text.as_str())) {
            documents.push(Document {
                id: format!("doc-{}", documents.len()),
                title: p.title.clone(),
                text: p.text.clone(),
                tokens: document_tokens(vocab, &p.title, &p.text),
            });
        }
    }
    if documents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let d = retriever.doc_encoder().config().d_model;
    let mut embeddings = Matrix::zeros(documents.len(), d);
    for (i, doc) in documents.iter().enumerate() {
        let e = retriever.doc_embedding(store, &doc.tokens)?;
        embeddings.row_mut(i).copy_from_slice(&e);
    }
    let tfidf = TfIdf::new(&documents);
    Ok(KnowledgeIndex { documents, embeddings, tfidf })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEntry {
    /// Position of the document in the index.
    pub doc: usize,
    /// Raw similarity: inner product for dense retrieval, cosine for TF-IDF.
    pub score: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Sorted by score, highest first; ties by lower document position.
    pub entries: Vec<RetrievalEntry>,
    pub k: usize,
}

impl RetrievalResult {
    pub fn docs(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.doc).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.prob).collect()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let scores: Vec<f64> = self.entries.iter().map(|e| e.score).collect();
        crate::tensor::log_softmax(&scores)
    }
}

/// Positions of the `k` largest scores, highest first, ties to the lower position.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn check_k(k: usize, size: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if k > size {
        return Err(Error::KTooLarge { k, size });
    }
    Ok(())
}

fn result_from_scores(scores: &[f64], k: usize) -> RetrievalResult {
    let top = top_k(scores, k);
    let raw: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
    let probs = softmax(&raw);
    RetrievalResult {
        entries: top
            .into_iter()
            .zip(raw)
            .zip(probs)
            .map(|((doc, score), prob)| RetrievalEntry { doc, score, prob })
            .collect(),
        k,
    }
}

/// Exact top-k by `d(z) . q`, probabilities normalized over the top k.
pub fn retrieve_by_embedding(index: &KnowledgeIndex, q: &[f64], k: usize) -> Result<RetrievalResult> {
    check_k(k, index.len())?;
    if q.len() != index.d_retr() {
        return Err(Error::ShapeMismatch(format!("query of {} against d_retr {}", q.len(), index.d_retr())));
    }
    let scores: Vec<f64> = (0..index.len()).map(|i| dot(index.embedding(i), q)).collect();
    Ok(result_from_scores(&scores, k))
}

pub fn retrieve(
    index: &KnowledgeIndex,
    retriever: &Retriever,
    store: &ParamStore,
    query_tokens: &[TokenId],
    k: usize,
    kind: QueryEncoderKind,
) -> Result<RetrievalResult> {
    check_k(k, index.len())?;
    let q = retriever.query_embedding(store, query_tokens, kind)?;
    retrieve_by_embedding(index, &q, k)
}

/// `1 x k` log retrieval probabilities of `docs` given a `1 x d` query node,
/// normalized over `docs` only.
pub fn retrieval_log_probs_graph(g: &mut Graph, index: &KnowledgeIndex, docs: &[usize], q: Var) -> Var {
    let rows: Vec<&[f64]> = docs.iter().map(|&i| index.embedding(i)).collect();
    let d = g.constant(Matrix::from_rows(&rows));
    let s = g.matmul_t(q, d);
    g.log_softmax_rows(s)
}

/// ltc-weighted TF-IDF statistics over the (budget-truncated) documents.
#[derive(Debug, Clone, PartialEq)]
struct TfIdf {
    idf: HashMap<TokenId, f64>,
    /// Unit-length document vectors.
    docs: Vec<BTreeMap<TokenId, f64>>,
    doc_lens: Vec<usize>,
}

fn term_counts(tokens: &[TokenId]) -> BTreeMap<TokenId, usize> {
    let mut tf = BTreeMap::new();
    for &t in tokens.iter().filter(|&&t| !is_reserved(t)) {
        *tf.entry(t).or_insert(0) += 1;
    }
    tf
}

fn ltc(tf: &BTreeMap<TokenId, usize>, idf: &HashMap<TokenId, f64>) -> BTreeMap<TokenId, f64> {
    let mut v: BTreeMap<TokenId, f64> = tf
        .iter()
        .filter_map(|(&t, &c)| idf.get(&t).map(|&w| (t, (1.0 + (c as f64).ln()) * w)))
        .filter(|&(_, w)| w != 0.0)
        .collect();
    let norm = v.values().map(|w| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.values_mut().for_each(|w| *w /= norm);
    }
    v
}

impl TfIdf {
    fn new(documents: &[Document]) -> Self {
        let truncated: Vec<&[TokenId]> =
            documents.iter().map(|d| &d.tokens[..d.tokens.len().min(TFIDF_TOKEN_BUDGET)]).collect();
        let counts: Vec<BTreeMap<TokenId, usize>> = truncated.iter().map(|t| term_counts(t)).collect();
        let mut df: HashMap<TokenId, usize> = HashMap::new();
        for c in &counts {
            for &t in c.keys() {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let n = documents.len() as f64;
        let idf: HashMap<TokenId, f64> = df.into_iter().map(|(t, d)| (t, (n / d as f64).ln())).collect();
        let docs = counts.iter().map(|c| ltc(c, &idf)).collect();
        Self { idf, docs, doc_lens: truncated.iter().map(|t| t.len()).collect() }
    }

    fn similarities(&self, query: &[TokenId]) -> Vec<f64> {
        let mut cache: HashMap<usize, BTreeMap<TokenId, f64>> = HashMap::new();
        (0..self.docs.len())
            .map(|i| {
                let q_len = query.len().min(TFIDF_TOKEN_BUDGET - self.doc_lens[i]);
                let qv = cache.entry(q_len).or_insert_with(|| ltc(&term_counts(&query[..q_len]), &self.idf));
                qv.iter().map(|(t, w)| w * self.docs[i].get(t).copied().unwrap_or(0.0)).sum()
            })
            .collect()
    }
}

/// Cosine similarity of ltc vectors, probabilities as a softmax over the
/// top-k similarities. Each comparison uses at most [`TFIDF_TOKEN_BUDGET`]
/// tokens: the document keeps up to the whole budget and the query gets the rest.
pub fn tfidf_retrieve(index: &KnowledgeIndex, query_tokens: &[TokenId], k: usize) -> Result<RetrievalResult> {
    check_k(k, index.len())?;
    let scores = index.tfidf.similarities(query_tokens);
    Ok(result_from_scores(&scores, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup(paragraphs: &[Paragraph]) -> (ParamStore, Retriever, Vocab, KnowledgeIndex) {
        let vocab = Vocab::build(paragraphs.iter().flat_map(|p| [p.title.as_str(), p.text.as_str()]), 500);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 32,
            ..Default::default()
        };
        let r = Retriever::new(&mut store, "ret", &cfg, &mut rng).unwrap();
        let index = build_index(paragraphs, &r, &store, &vocab).unwrap();
        (store, r, vocab, index)
    }

    fn paras(n: usize) -> Vec<Paragraph> {
        (0..n)
            .map(|i| Paragraph { title: format!("place{}", i % 7), text: format!("word{} and word{} near w{}", i, i * 3 % 11, i % 5) })
            .collect()
    }

    #[test]
    fn single_paragraph_index() {
        let (_, _, _, index) = setup(&paras(1));
        assert_eq!(index.len(), 1);
        assert!(index.is_frozen());
        assert!(matches!(build_index(&[], &setup(&paras(1)).1, &ParamStore::new(), &Vocab::build([""], 10)), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn rebuild_is_identical_and_matches_one_by_one() {
        let ps = paras(50);
        let (store, r, vocab, index) = setup(&ps);
        let again = build_index(&ps, &r, &store, &vocab).unwrap();
        assert_eq!(index, again);
        for (i, doc) in index.documents().iter().enumerate() {
            assert_eq!(index.embedding(i), r.doc_embedding(&store, &doc.tokens).unwrap().as_slice());
        }
    }

    #[test]
    fn exact_match_ranks_first_and_full_k_is_full_softmax() {
        let ps = paras(12);
        let (_, _, _, index) = setup(&ps);
        let q = index.embedding(4).to_vec();
        let scaled: Vec<f64> = q.iter().map(|v| v * 1.0).collect();
        let res = retrieve_by_embedding(&index, &scaled, 3).unwrap();
        let norms: Vec<f64> = (0..index.len()).map(|i| dot(index.embedding(i), index.embedding(i))).collect();
        if norms.iter().all(|&n| (n - norms[4]).abs() < 1e-9) {
            assert_eq!(res.entries[0].doc, 4);
        }
        let full = retrieve_by_embedding(&index, &q, index.len()).unwrap();
        let scores: Vec<f64> = (0..index.len()).map(|i| dot(index.embedding(i), &q)).collect();
        let sm = softmax(&scores);
        for e in &full.entries {
            assert!((e.prob - sm[e.doc]).abs() < 1e-12);
        }
        assert!(matches!(retrieve_by_embedding(&index, &q, 13), Err(Error::KTooLarge { k: 13, size: 12 })));
    }

    fn synthetic(embeddings: Matrix) -> KnowledgeIndex {
        let docs = (0..embeddings.rows())
            .map(|i| Document { id: format!("d{i}"), title: String::new(), text: String::new(), tokens: vec![] })
            .collect();
        KnowledgeIndex::from_parts(docs, embeddings).unwrap()
    }

    #[test]
    fn equal_norm_embedding_wins() {
        let index = synthetic(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]));
        let res = retrieve_by_embedding(&index, &[0.6, 0.8], 3).unwrap();
        assert_eq!(res.entries[0].doc, 2);
    }

    #[test]
    fn dense_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let n = 100;
            let d = 6;
            let index = synthetic(Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()));
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let res = retrieve_by_embedding(&index, &q, 5).unwrap();
            let mut scan: Vec<(f64, usize)> = (0..n).map(|i| (dot(index.embedding(i), &q), i)).collect();
            scan.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = scan[..5].iter().map(|p| p.1).collect();
            assert_eq!(res.docs(), want);
            assert!((res.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let scaled: Vec<f64> = q.iter().map(|v| v * 3.5).collect();
            assert_eq!(retrieve_by_embedding(&index, &scaled, 5).unwrap().docs(), want);
        }
    }

    #[test]
    fn tfidf_identical_query_ranks_first_and_disjoint_is_uniform() {
        let ps = paras(20);
        let (_, _, vocab, index) = setup(&ps);
        let res = tfidf_retrieve(&index, &index.document(6).tokens, 3).unwrap();
        assert_eq!(res.entries[0].doc, 6);
        let res = tfidf_retrieve(&index, &vocab.encode("zzz qqq"), 4).unwrap();
        assert!(res.entries.iter().all(|e| e.score == 0.0 && (e.prob - 0.25).abs() < 1e-12));
        assert_eq!(res.docs(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn index_disk_round_trip() {
        let ps = paras(10);
        let (_, _, _, index) = setup(&ps);
        let dir = tempfile::tempdir().unwrap();
        index.save(dir.path()).unwrap();
        let back = KnowledgeIndex::load(dir.path()).unwrap();
        assert_eq!(back.documents(), index.documents());
        assert!(back.embeddings().max_abs_diff(index.embeddings()) < 1e-6);
    }

    #[test]
    fn query_gradient_flows_through_retrieval_probs() {
        let ps = paras(8);
        let (store, r, vocab, index) = setup(&ps);
        let q = vocab.encode("word3 near w2");
        let mut query = vec![crate::vocab::CLS];
        query.extend(q);
        let docs = [0, 3, 5];
        let checks = crate::gradcheck::check_gradients(&store, 1e-4, |g, s| {
            let qv = r.query_graph(g, s, &query, QueryEncoderKind::Trained).unwrap();
            let lp = retrieval_log_probs_graph(g, &index, &docs, qv);
            let picked = g.pick(lp, &[(0, 1)]);
            g.scale(picked, -1.0)
        });
        assert!(crate::gradcheck::worst(&checks) < 1e-4);
        assert!(checks.iter().any(|c| c.name.starts_with("ret.query.") && c.analytic_norm > 0.0));
        assert!(checks.iter().all(|c| !c.name.starts_with("ret.query_base.")));
    }
}
