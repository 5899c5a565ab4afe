//! Topic-modeling coder: embed every message, cluster with average linkage
//! under cosine distance, pick class-based TF-IDF keywords per cluster and
//! ask the model for one label per cluster.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::RawCodeInstance;
use crate::corpus::{Dataset, Message, MessageId};
use crate::gateway::template::{topic_template, DOCUMENTS, KEYWORDS};
use crate::gateway::{render_prompt, Gateway, GatewayError, RemoteEmbedder};
use crate::grammar::{parse_topic_response, TopicLabelResponse};
use crate::pipelines::{base_bindings, PipelineError};

pub const TFIDF_SOURCE: &str = "tfidf-fallback";

#[derive(Debug, Error)]
pub enum TopicError {
    #[error("nothing to embed")]
    Empty,
    #[error("embedding row {row} has dimension {got}, expected {expected}")]
    Dimension { row: usize, got: usize, expected: usize },
    #[error("embedding row {0} has a non-finite entry")]
    NonFinite(usize),
    #[error("distance threshold must lie in (0, 2), got {0}")]
    Threshold(f64),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub ids: Vec<MessageId>,
    pub rows: Vec<Vec<f64>>,
    pub dim: usize,
    pub source: String,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<MessageId>, rows: Vec<Vec<f64>>, source: impl Into<String>) -> Result<Self, TopicError> {
        if rows.is_empty() || rows.len() != ids.len() {
            return Err(TopicError::Empty);
        }
        let dim = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(TopicError::Dimension { row: i, got: row.len(), expected: dim });
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(TopicError::NonFinite(i));
            }
        }
        Ok(Self { ids, rows, dim, source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Lowercase, split on non-alphanumerics, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Tokens of one document. A message with no alphanumeric token (a bare
/// emoticon, say) stands for itself so it still gets a non-zero vector.
pub fn document_tokens(text: &str) -> Vec<String> {
    let tokens = tokenize(text);
    if !tokens.is_empty() {
        return tokens;
    }
    let stripped = text.trim();
    vec![if stripped.is_empty() { "<empty>".to_string() } else { stripped.to_string() }]
}

/// Smooth-idf TF-IDF with L2-normalized rows, over a sorted vocabulary.
pub fn tfidf_vectors(texts: &[String]) -> Vec<Vec<f64>> {
    let docs: Vec<Vec<String>> = texts.iter().map(|t| document_tokens(t)).collect();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in &docs {
        let mut seen: Vec<&str> = doc.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    let index: HashMap<&str, usize> = df.keys().enumerate().map(|(i, t)| (*t, i)).collect();
    let n = docs.len() as f64;
    let idf: Vec<f64> = df.values().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();

    docs.iter()
        .map(|doc| {
            let mut row = vec![0.0; idf.len()];
            for t in doc {
                row[index[t.as_str()]] += 1.0;
            }
            for (x, w) in row.iter_mut().zip(&idf) {
                *x *= w;
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
            row
        })
        .collect()
}

pub enum Embedder {
    Tfidf,
    Remote(RemoteEmbedder),
}

pub fn embed(messages: &[&Message], embedder: &Embedder) -> Result<EmbeddingMatrix, TopicError> {
    if messages.is_empty() {
        return Err(TopicError::Empty);
    }
    let ids = messages.iter().map(|m| m.id).collect();
    let texts: Vec<String> = messages.iter().map(|m| m.content.clone()).collect();
    match embedder {
        Embedder::Tfidf => EmbeddingMatrix::new(ids, tfidf_vectors(&texts), TFIDF_SOURCE),
        Embedder::Remote(remote) => {
            let rows = remote.embed(&texts)?;
            EmbeddingMatrix::new(ids, rows, remote.model())
        }
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// One merge of the dendrogram. `a` and `b` are leaf indices standing for
/// the two clusters joined (any member works as a representative).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

/// Average-linkage dendrogram via the nearest-neighbour chain algorithm with
/// Lance-Williams updates. Average linkage is reducible, so the chain finds
/// the same merges as the naive closest-pair loop, just not in height order.
pub fn average_linkage(dist: &[Vec<f64>]) -> Vec<Merge> {
    let n = dist.len();
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::new();

    while merges.len() + 1 < n {
        if chain.is_empty() {
            chain.push((0..n).find(|&i| active[i]).expect("an active cluster"));
        }
        loop {
            let x = *chain.last().unwrap();
            let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
            // nearest neighbour, preferring the chain predecessor on ties
            let mut best = prev;
            let mut best_d = prev.map_or(f64::INFINITY, |p| d[x][p]);
            for y in 0..n {
                if y != x && active[y] && d[x][y] < best_d {
                    best = Some(y);
                    best_d = d[x][y];
                }
            }
            let y = best.expect("at least two active clusters");
            if Some(y) != prev {
                chain.push(y);
                continue;
            }
            chain.truncate(chain.len() - 2);
            let (keep, gone) = (x.min(y), x.max(y));
            let (nk, ng) = (size[keep] as f64, size[gone] as f64);
            for k in 0..n {
                if active[k] && k != keep && k != gone {
                    let v = (nk * d[keep][k] + ng * d[gone][k]) / (nk + ng);
                    d[keep][k] = v;
                    d[k][keep] = v;
                }
            }
            active[gone] = false;
            size[keep] += size[gone];
            merges.push(Merge { a: keep, b: gone, height: best_d, size: size[keep] });
            break;
        }
    }
    merges.sort_by(|p, q| p.height.total_cmp(&q.height));
    merges
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Flat clusters from applying every merge strictly below `threshold`.
/// Groups are lists of row indices, ordered by their first row.
pub fn cut(n: usize, merges: &[Merge], threshold: f64) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    for m in merges.iter().filter(|m| m.height < threshold) {
        let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

pub fn distance_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = cosine_distance(&rows[i], &rows[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub term: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicCluster {
    pub index: usize,
    pub member_ids: Vec<MessageId>,
    pub keywords: Vec<Keyword>,
    #[serde(default)]
    pub thought: String,
    #[serde(default)]
    pub label: String,
    pub oversize_flag: bool,
}

pub const DEFAULT_OVERSIZE_RATIO: f64 = 0.25;
pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.9;

pub fn is_oversize(members: usize, corpus: usize, ratio: f64) -> bool {
    corpus > 0 && members as f64 / corpus as f64 > ratio
}

/// Unlabeled clusters in order of their earliest member.
pub fn cluster(
    embeddings: &EmbeddingMatrix,
    distance_threshold: f64,
    oversize_ratio: f64,
) -> Result<Vec<TopicCluster>, TopicError> {
    if !(distance_threshold > 0.0 && distance_threshold < 2.0) {
        return Err(TopicError::Threshold(distance_threshold));
    }
    let n = embeddings.len();
    let merges = average_linkage(&distance_matrix(&embeddings.rows));
    Ok(cut(n, &merges, distance_threshold)
        .into_iter()
        .enumerate()
        .map(|(index, group)| TopicCluster {
            index,
            oversize_flag: is_oversize(group.len(), n, oversize_ratio),
            member_ids: group.into_iter().map(|i| embeddings.ids[i]).collect(),
            keywords: Vec::new(),
            thought: String::new(),
            label: String::new(),
        })
        .collect())
}

/// Class-based TF-IDF: weight(t, c) = tf(t, c) * ln(1 + A / f(t)), with f(t)
/// the frequency of t over all clusters and A the mean token count per
/// cluster. Keeps `top_k` terms, ties broken by term ascending.
pub fn ctfidf_keywords(clusters: &mut [TopicCluster], dataset: &Dataset, top_k: usize) {
    let counts: Vec<BTreeMap<String, usize>> = clusters
        .iter()
        .map(|c| {
            let mut tf = BTreeMap::new();
            for id in &c.member_ids {
                let text = dataset.get(*id).map(|m| m.content.as_str()).unwrap_or("");
                for t in document_tokens(text) {
                    *tf.entry(t).or_insert(0) += 1;
                }
            }
            tf
        })
        .collect();
    let mut total: BTreeMap<&str, usize> = BTreeMap::new();
    for tf in &counts {
        for (t, n) in tf {
            *total.entry(t.as_str()).or_default() += n;
        }
    }
    let tokens: usize = total.values().sum();
    let a = if clusters.is_empty() { 0.0 } else { tokens as f64 / clusters.len() as f64 };
    for (cluster, tf) in clusters.iter_mut().zip(&counts) {
        let mut weighted: Vec<Keyword> = tf
            .iter()
            .map(|(t, &n)| Keyword { term: t.clone(), weight: n as f64 * (1.0 + a / total[t.as_str()] as f64).ln() })
            .collect();
        weighted.sort_by(|x, y| y.weight.total_cmp(&x.weight).then_with(|| x.term.cmp(&y.term)));
        weighted.truncate(top_k);
        cluster.keywords = weighted;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicLabelResult {
    pub cluster: usize,
    pub fixture_key: String,
    pub raw_response: String,
    pub parsed: TopicLabelResponse,
}

pub fn render_documents(cluster: &TopicCluster, dataset: &Dataset) -> String {
    cluster
        .member_ids
        .iter()
        .filter_map(|id| dataset.get(*id))
        .map(|m| format!("\n- \"{}\"", m.content.replace(['\n', '\r'], " ")))
        .collect()
}

pub fn render_keywords(cluster: &TopicCluster) -> String {
    cluster.keywords.iter().map(|k| k.term.as_str()).collect::<Vec<_>>().join(", ")
}

/// Fills in thought and label; membership and keywords are left alone.
pub fn label_topic(
    cluster: &TopicCluster,
    dataset: &Dataset,
    gateway: &Gateway,
) -> Result<(TopicCluster, TopicLabelResult), TopicError> {
    let bindings = base_bindings(dataset)?
        .with(DOCUMENTS, render_documents(cluster, dataset))
        .with(KEYWORDS, render_keywords(cluster));
    let (prompt, _) = render_prompt(&topic_template(), &bindings).map_err(PipelineError::from)?;
    let exchange = gateway.complete(&prompt)?;
    let parsed = parse_topic_response(&exchange.response).map_err(|source| PipelineError::Parse {
        unit: cluster.index,
        source,
        raw: exchange.response.clone(),
    })?;
    let mut labeled = cluster.clone();
    labeled.thought = parsed.thought.clone();
    labeled.label = parsed.label.clone();
    Ok((
        labeled,
        TopicLabelResult {
            cluster: cluster.index,
            fixture_key: exchange.fixture_key,
            raw_response: exchange.response,
            parsed,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicConfig {
    pub distance_threshold: f64,
    pub top_k: usize,
    pub oversize_ratio: f64,
}

impl Default for TopicConfig {
    fn default() -> Self {
        Self { distance_threshold: DEFAULT_THRESHOLD, top_k: DEFAULT_TOP_K, oversize_ratio: DEFAULT_OVERSIZE_RATIO }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicRun {
    pub embedding_source: String,
    pub clusters: Vec<TopicCluster>,
    pub results: Vec<TopicLabelResult>,
    pub instances: Vec<RawCodeInstance>,
}

/// Whole approach over every message. Labeling fans out across clusters;
/// results come back in cluster order.
pub fn run_topic(
    dataset: &Dataset,
    embedder: &Embedder,
    config: &TopicConfig,
    gateway: &Gateway,
) -> Result<TopicRun, TopicError> {
    let messages: Vec<&Message> = dataset.messages().iter().collect();
    let matrix = embed(&messages, embedder)?;
    let mut clusters = cluster(&matrix, config.distance_threshold, config.oversize_ratio)?;
    ctfidf_keywords(&mut clusters, dataset, config.top_k);
    let labeled: Vec<(TopicCluster, TopicLabelResult)> = clusters
        .par_iter()
        .map(|c| label_topic(c, dataset, gateway))
        .collect::<Result<_, _>>()?;
    let instances = labeled
        .iter()
        .map(|(c, _)| RawCodeInstance {
            raw_label: c.label.clone(),
            chunk: c.index,
            ordinal: 0,
            message_ids: c.member_ids.clone(),
            definition: None,
        })
        .collect();
    let (clusters, results) = labeled.into_iter().unzip();
    Ok(TopicRun { embedding_source: matrix.source, clusters, results, instances })
}
