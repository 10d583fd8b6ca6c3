//! Cross-modality retrieval: rank a gallery of one modality for every query
//! of the other, then score the rankings with CMC and mAP.

#[cfg(test)]
mod tests;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{NfsError, Result};
use crate::modality::Modality;
use crate::net::{EmbeddingBatch, TwoStreamNet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    /// Negated Euclidean distance, so larger still means closer.
    Euclidean,
}

/// Which modality queries and which is searched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub query: Modality,
    pub gallery: Modality,
}

impl EvalProtocol {
    pub fn new(query: Modality) -> Self {
        Self {
            query,
            gallery: query.other(),
        }
    }

    pub fn visible_to_infrared() -> Self {
        Self::new(Modality::Rgb)
    }

    pub fn infrared_to_visible() -> Self {
        Self::new(Modality::Ir)
    }

    pub fn name(&self) -> &'static str {
        match self.query {
            Modality::Rgb => "visible-to-infrared",
            Modality::Ir => "infrared-to-visible",
        }
    }
}

impl std::str::FromStr for EvalProtocol {
    type Err = NfsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visible-to-infrared" | "v2i" => Ok(Self::visible_to_infrared()),
            "infrared-to-visible" | "i2v" => Ok(Self::infrared_to_visible()),
            other => Err(NfsError::Config(format!("unknown protocol {other}"))),
        }
    }
}

/// Gallery indices for one query, best first, with their scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub seed: u64,
    pub queries: usize,
    pub gallery: usize,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        format!(
            "{:<22} {:>8} {:>8} {:>8} {:>8}\n{:<22} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            "protocol",
            "rank-1",
            "rank-5",
            "rank-10",
            "mAP",
            self.protocol,
            100.0 * self.rank1,
            100.0 * self.rank5,
            100.0 * self.rank10,
            100.0 * self.map
        )
    }
}

/// Eval-mode embeddings for the given samples (all of one modality or
/// mixed), processed `chunk` images per forward pass.
pub fn extract_embeddings<T: Scalar>(
    net: &mut TwoStreamNet<T>,
    dataset: &Dataset,
    indices: &[usize],
    chunk: usize,
) -> Result<EmbeddingBatch<T>> {
    let mut values = Vec::with_capacity(indices.len() * net.embedding_dim());
    let mut identities = Vec::with_capacity(indices.len());
    let mut modalities = Vec::with_capacity(indices.len());
    for m in Modality::ALL {
        let rows: Vec<usize> = indices.iter().copied().filter(|&i| dataset.spec(i).modality == m).collect();
        for part in rows.chunks(chunk.max(1)) {
            let out = net.embed(&dataset.batch::<T>(part)?)?;
            values.extend_from_slice(out.vectors.values());
            identities.extend(out.identities);
            modalities.extend(out.modalities);
        }
    }
    if identities.is_empty() {
        return Err(NfsError::Insufficient("no samples to embed".into()));
    }
    Ok(EmbeddingBatch {
        vectors: Tensor::from_vec(&[identities.len(), net.embedding_dim()], values)?,
        identities,
        modalities,
    })
}

fn score(q: &[f64], g: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Cosine => {
            let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
            let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ng = g.iter().map(|b| b * b).sum::<f64>().sqrt();
            if nq == 0.0 || ng == 0.0 {
                0.0
            } else {
                dot / (nq * ng)
            }
        }
        Metric::Euclidean => -q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
    }
}

/// Orders the gallery for every query by descending score, breaking ties
/// by gallery index. Both inputs are row-major with `dim` columns.
pub fn rank<T: Scalar>(queries: &[T], gallery: &[T], dim: usize, metric: Metric) -> Result<Vec<Ranking>> {
    if dim == 0 || !queries.len().is_multiple_of(dim) || !gallery.len().is_multiple_of(dim) {
        return Err(NfsError::shape("rank", "embedding width", dim, queries.len()));
    }
    let to64 = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
    let (q, g) = (to64(queries), to64(gallery));
    Ok(q.chunks(dim)
        .map(|qrow| {
            // `+ 0.0` folds -0.0 into 0.0 so the two tie under total_cmp
            let scores: Vec<f64> = g.chunks(dim).map(|grow| score(qrow, grow, metric) + 0.0).collect();
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let sorted = order.iter().map(|&i| scores[i]).collect();
            Ranking { order, scores: sorted }
        })
        .collect())
}

fn check_relevant(ranking: &Ranking, query_id: u32, gallery_ids: &[u32]) -> Result<Vec<bool>> {
    let relevance: Vec<bool> = ranking.order.iter().map(|&g| gallery_ids[g] == query_id).collect();
    if !relevance.contains(&true) {
        return Err(NfsError::MissingIdentity(query_id));
    }
    Ok(relevance)
}

/// `cmc[r]` is the fraction of queries whose first correct match sits at
/// rank `r + 1` or better.
pub fn cmc_curve(rankings: &[Ranking], query_ids: &[u32], gallery_ids: &[u32], max_rank: usize) -> Result<Vec<f64>> {
    if rankings.len() != query_ids.len() {
        return Err(NfsError::shape("cmc_curve", "queries", query_ids.len(), rankings.len()));
    }
    let mut hits = vec![0usize; max_rank];
    for (ranking, &qid) in rankings.iter().zip(query_ids) {
        let first = check_relevant(ranking, qid, gallery_ids)?
            .iter()
            .position(|&r| r)
            .expect("checked non-empty");
        if first < max_rank {
            hits[first] += 1;
        }
    }
    let n = rankings.len().max(1) as f64;
    let mut acc = 0;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect())
}

/// Mean over relevant positions of the precision at that depth.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut found = 0usize;
    let mut total = 0.0;
    for (k, &r) in relevance.iter().enumerate() {
        if r {
            found += 1;
            total += found as f64 / (k + 1) as f64;
        }
    }
    (found > 0).then(|| total / found as f64)
}

pub fn mean_ap(rankings: &[Ranking], query_ids: &[u32], gallery_ids: &[u32]) -> Result<f64> {
    if rankings.len() != query_ids.len() {
        return Err(NfsError::shape("mean_ap", "queries", query_ids.len(), rankings.len()));
    }
    let mut sum = 0.0;
    for (q, (ranking, &qid)) in rankings.iter().zip(query_ids).enumerate() {
        let relevance: Vec<bool> = ranking.order.iter().map(|&g| gallery_ids[g] == qid).collect();
        sum += average_precision(&relevance).ok_or(NfsError::NoRelevant(q))?;
    }
    Ok(sum / rankings.len().max(1) as f64)
}

/// Report, per-query rankings, and the query and gallery embeddings.
pub type Evaluation<T> = (EvalReport, Vec<Ranking>, EmbeddingBatch<T>, EmbeddingBatch<T>);

/// Scores the test split of `dataset` under `protocol`.
pub fn evaluate<T: Scalar>(
    net: &mut TwoStreamNet<T>,
    dataset: &Dataset,
    protocol: EvalProtocol,
    metric: Metric,
    seed: u64,
) -> Result<Evaluation<T>> {
    let test = dataset.manifest.test_indices();
    let pick = |m: Modality| -> Vec<usize> { test.iter().copied().filter(|&i| dataset.spec(i).modality == m).collect() };
    let query = extract_embeddings(net, dataset, &pick(protocol.query), 64)?;
    let gallery = extract_embeddings(net, dataset, &pick(protocol.gallery), 64)?;
    let dim = net.embedding_dim();
    let rankings = rank(query.vectors.values(), gallery.vectors.values(), dim, metric)?;
    let cmc = cmc_curve(&rankings, &query.identities, &gallery.identities, 20.min(gallery.identities.len()))?;
    let at = |r: usize| cmc.get(r - 1).or(cmc.last()).copied().unwrap_or(0.0);
    let map = mean_ap(&rankings, &query.identities, &gallery.identities)?;
    let report = EvalReport {
        protocol: protocol.name().to_string(),
        seed,
        queries: query.identities.len(),
        gallery: gallery.identities.len(),
        rank1: at(1),
        rank5: at(5),
        rank10: at(10),
        map,
        cmc,
    };
    Ok((report, rankings, query, gallery))
}

/// One line per query: identity, then the top `depth` gallery identities
/// with their scores.
pub fn write_rankings_csv(
    path: &Path,
    rankings: &[Ranking],
    query_ids: &[u32],
    gallery_ids: &[u32],
    depth: usize,
) -> Result<()> {
    let mut out = String::from("query,query_id,rank,gallery,gallery_id,score\n");
    for (q, (ranking, qid)) in rankings.iter().zip(query_ids).enumerate() {
        for (r, (&g, s)) in ranking.order.iter().zip(&ranking.scores).take(depth).enumerate() {
            writeln!(out, "{q},{qid},{},{g},{},{s}", r + 1, gallery_ids[g]).expect("string write");
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| NfsError::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| NfsError::io(path, e))
}
