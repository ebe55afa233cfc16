//! Retrieval evaluation: pairwise Euclidean distances, CMC Rank-k and mAP
//! under the standard cross-camera protocol (gallery entries sharing both
//! the query's identity and camera are excluded before ranking).

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::DeepMiner;
use crate::tensor::Tensor;

/// Distance matrix plus the derived ranking metrics.
pub struct EvalResult {
    /// Query x gallery distances.
    pub dist: Tensor,
    /// CMC curve, index k-1 holds Rank-k, for k = 1..=k_max.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Average precision per query; `None` marks a query skipped because the
    /// filtered gallery held no correct match.
    pub per_query_ap: Vec<Option<f64>>,
}

impl EvalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k - 1]
    }

    /// The line format consumed by the CLI: `mAP` then `Rank-k` per k, six
    /// decimals each.
    pub fn format_report(&self) -> String {
        let mut out = format!("mAP {:.6}\n", self.map);
        for (i, v) in self.cmc.iter().enumerate() {
            out.push_str(&format!("Rank-{} {:.6}\n", i + 1, v));
        }
        out
    }
}

/// Euclidean distances between two sets of row vectors.
pub fn pairwise_dist(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    let ([nq, dq], [ng, dg]) = (queries.shape(), gallery.shape()) else {
        return Err(Error::ShapeMismatch(format!(
            "pairwise_dist expects rank-2 inputs, got {:?} and {:?}",
            queries.shape(),
            gallery.shape()
        )));
    };
    if dq != dg {
        return Err(Error::ShapeMismatch(format!(
            "pairwise_dist dims {dq} vs {dg}"
        )));
    }
    let (nq, ng, d) = (*nq, *ng, *dq);
    let qd = queries.data();
    let gd = gallery.data();
    let mut out = vec![0.0; nq * ng];
    for i in 0..nq {
        let qrow = &qd[i * d..(i + 1) * d];
        for j in 0..ng {
            let grow = &gd[j * d..(j + 1) * d];
            let mut s = 0.0;
            for (a, b) in qrow.iter().zip(grow) {
                let diff = a - b;
                s += diff * diff;
            }
            out[i * ng + j] = s.sqrt();
        }
    }
    drop(qd);
    drop(gd);
    Ok(Tensor::from_parts(vec![nq, ng], out, false))
}

/// Ranks the filtered gallery per query (ascending distance, ties broken by
/// gallery index) and accumulates CMC and mean average precision.
pub fn evaluate(
    dist: &Tensor,
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
    k_max: usize,
) -> Result<EvalResult> {
    let [nq, ng] = *dist.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "evaluate expects a [Nq,Ng] distance matrix, got {:?}",
            dist.shape()
        )));
    };
    if q_ids.len() != nq || q_cams.len() != nq || g_ids.len() != ng || g_cams.len() != ng {
        return Err(Error::ShapeMismatch(format!(
            "id/camera lists ({}, {}, {}, {}) inconsistent with dist {nq}x{ng}",
            q_ids.len(),
            q_cams.len(),
            g_ids.len(),
            g_cams.len()
        )));
    }
    if ng == 0 {
        return Err(Error::EmptyGallery("gallery holds no entries".into()));
    }
    if k_max == 0 {
        return Err(Error::InvalidHyperparam("k_max must be >= 1".into()));
    }

    let dd = dist.data();
    let mut per_query_ap: Vec<Option<f64>> = Vec::with_capacity(nq);
    let mut first_hits: Vec<usize> = Vec::new(); // rank of first correct match
    for q in 0..nq {
        let row = &dd[q * ng..(q + 1) * ng];
        let mut kept: Vec<usize> = (0..ng)
            .filter(|&j| !(g_ids[j] == q_ids[q] && g_cams[j] == q_cams[q]))
            .collect();
        let total_correct = kept.iter().filter(|&&j| g_ids[j] == q_ids[q]).count();
        if total_correct == 0 {
            per_query_ap.push(None);
            continue;
        }
        kept.sort_by(|&a, &b| {
            row[a]
                .partial_cmp(&row[b])
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first: Option<usize> = None;
        for (rank0, &j) in kept.iter().enumerate() {
            if g_ids[j] == q_ids[q] {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
                if first.is_none() {
                    first = Some(rank0 + 1);
                }
            }
        }
        per_query_ap.push(Some(ap / total_correct as f64));
        first_hits.push(first.expect("total_correct > 0"));
    }
    drop(dd);

    let valid = first_hits.len();
    if valid == 0 {
        return Err(Error::EmptyGallery(
            "every query was filtered out (no cross-camera correct match)".into(),
        ));
    }
    let mut cmc = vec![0.0; k_max];
    for &rank in &first_hits {
        if rank <= k_max {
            cmc[rank - 1] += 1.0;
        }
    }
    let mut acc = 0.0;
    for v in &mut cmc {
        acc += *v;
        *v = acc / valid as f64;
    }
    let map = per_query_ap.iter().flatten().sum::<f64>() / valid as f64;
    Ok(EvalResult {
        dist: dist.clone(),
        cmc,
        map,
        per_query_ap,
    })
}

/// Embeds both sets with the model and evaluates retrieval.
pub fn evaluate_model(
    model: &DeepMiner,
    query: &Dataset,
    gallery: &Dataset,
    k_max: usize,
) -> Result<EvalResult> {
    let q_emb = embed_dataset(model, query)?;
    let g_emb = embed_dataset(model, gallery)?;
    let dist = pairwise_dist(&q_emb, &g_emb)?;
    let q_ids: Vec<usize> = query.samples.iter().map(|s| s.identity).collect();
    let g_ids: Vec<usize> = gallery.samples.iter().map(|s| s.identity).collect();
    let q_cams: Vec<usize> = query.samples.iter().map(|s| s.camera).collect();
    let g_cams: Vec<usize> = gallery.samples.iter().map(|s| s.camera).collect();
    evaluate(&dist, &q_ids, &g_ids, &q_cams, &g_cams, k_max)
}

/// Eval-mode embeddings of a whole dataset, in sample order. Batched for
/// speed; embeddings are batch-invariant so the chunking cannot change them.
pub fn embed_dataset(model: &DeepMiner, ds: &Dataset) -> Result<Tensor> {
    if ds.samples.is_empty() {
        return Err(Error::EmptyGallery("dataset holds no samples".into()));
    }
    let dim = model.cfg().embedding_dim();
    let n = ds.samples.len();
    let mut out = vec![0.0; n * dim];
    for (start, chunk) in ds.samples.chunks(16).enumerate().map(|(i, c)| (i * 16, c)) {
        let images = crate::data::stack_images(chunk.iter().map(|s| &s.image))?;
        let emb = model.embed(&images)?;
        let ed = emb.data();
        out[start * dim..(start + chunk.len()) * dim].copy_from_slice(&ed);
    }
    Ok(Tensor::from_parts(vec![n, dim], out, false))
}
