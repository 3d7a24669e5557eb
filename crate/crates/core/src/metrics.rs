//! Retrieval evaluation: distances, average precision and CMC with
//! same-camera and junk filtering.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::market::JUNK_ID;
use crate::error::{HatError, Result};

pub fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// `(Q, G)` Euclidean distances, optionally between L2-normalized rows.
pub fn distance_matrix(query: &Array2<f64>, gallery: &Array2<f64>, normalize: bool) -> Result<Array2<f64>> {
    if query.ncols() != gallery.ncols() {
        return Err(HatError::Shape(format!(
            "query width {} differs from gallery width {}",
            query.ncols(),
            gallery.ncols()
        )));
    }
    let (q, g) = if normalize {
        (l2_normalize_rows(query), l2_normalize_rows(gallery))
    } else {
        (query.clone(), gallery.clone())
    };
    Ok(Array2::from_shape_fn((q.nrows(), g.nrows()), |(i, j)| {
        q.row(i)
            .iter()
            .zip(g.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }))
}

/// Mean of the precision at each relevant position; `None` without any
/// relevant entry.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    /// `cmc[k - 1]` is the Rank-k rate.
    pub cmc: Vec<f64>,
    /// `None` for queries without a valid match.
    pub per_query_ap: Vec<Option<f64>>,
    pub num_valid_queries: usize,
}

impl EvalResult {
    /// Rank-k rate (1-based); ranks beyond the curve use its last value.
    pub fn rank(&self, k: usize) -> f64 {
        let i = k.clamp(1, self.cmc.len().max(1)) - 1;
        self.cmc.get(i).copied().unwrap_or(0.0)
    }
}

/// Per query, ranks the gallery by `(distance, index)`, drops junk
/// identities and same-identity entries from the query's camera, and
/// scores the remaining relevance list.
pub fn evaluate(
    dist: &Array2<f64>,
    query_meta: &[(i64, usize)],
    gallery_meta: &[(i64, usize)],
    max_rank: usize,
) -> Result<EvalResult> {
    if dist.dim() != (query_meta.len(), gallery_meta.len()) {
        return Err(HatError::Shape(format!(
            "distance matrix {:?} does not match {} queries x {} gallery",
            dist.dim(),
            query_meta.len(),
            gallery_meta.len()
        )));
    }
    if max_rank == 0 {
        return Err(HatError::Input("max_rank must be positive".into()));
    }
    let mut cmc = vec![0.0; max_rank];
    let mut per_query_ap = Vec::with_capacity(query_meta.len());
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    for (qi, &(qid, qcam)) in query_meta.iter().enumerate() {
        if qid == JUNK_ID {
            per_query_ap.push(None);
            continue;
        }
        let row = dist.row(qi);
        let mut order: Vec<usize> = (0..gallery_meta.len()).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let relevance: Vec<bool> = order
            .iter()
            .map(|&g| gallery_meta[g])
            .filter(|&(gid, gcam)| gid != JUNK_ID && !(gid == qid && gcam == qcam))
            .map(|(gid, _)| gid == qid)
            .collect();
        let ap = average_precision(&relevance);
        if let Some(ap) = ap {
            valid += 1;
            ap_sum += ap;
            let first = relevance.iter().position(|&r| r).expect("has a match");
            for c in cmc.iter_mut().skip(first) {
                *c += 1.0;
            }
        }
        per_query_ap.push(ap);
    }
    if valid == 0 {
        return Err(HatError::EmptyEvaluation);
    }
    let n = valid as f64;
    Ok(EvalResult {
        map: ap_sum / n,
        cmc: cmc.into_iter().map(|c| c / n).collect(),
        per_query_ap,
        num_valid_queries: valid,
    })
}
