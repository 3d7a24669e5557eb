//! Label-smoothed identity loss, batch-hard triplet loss and their
//! weighted combination over main and per-level heads.

use std::collections::BTreeMap;

use autograd::Var;
use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{HatError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Label smoothing.
    pub epsilon: f64,
    pub margin: f64,
    /// Weight of the summed per-level terms.
    pub lambda: f64,
    /// Mine triplets on L2-normalized embeddings.
    pub normalize_triplet: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            margin: 0.3,
            lambda: 0.5,
            normalize_triplet: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..1.0).contains(&self.epsilon) {
            errs.push(format!("loss.epsilon: must be in [0, 1), got {}", self.epsilon));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            errs.push(format!("loss.margin: must be non-negative, got {}", self.margin));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errs.push(format!("loss.lambda: must be non-negative, got {}", self.lambda));
        }
        errs
    }
}

/// Smoothed targets: `1 - eps + eps / n` on the true class, `eps / n` elsewhere.
pub fn smoothed_targets(labels: &[usize], num_classes: usize, epsilon: f64) -> Array2<f64> {
    let off = epsilon / num_classes as f64;
    let mut q = Array2::from_elem((labels.len(), num_classes), off);
    for (i, &l) in labels.iter().enumerate() {
        q[[i, l]] = 1.0 - epsilon + off;
    }
    q
}

/// Cross-entropy against smoothed targets, summed over classes and averaged
/// over the batch. `logits` is `(B, N)`.
pub fn id_loss<'t>(logits: Var<'t>, labels: &[usize], epsilon: f64) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(HatError::Input(format!(
            "logits {:?} do not match {} labels",
            s,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(HatError::Input(format!(
            "label {bad} outside 0..{}",
            s[1]
        )));
    }
    // with z = x - max(x): -sum_j q_j log p_j = ln sum_j e^z_j - sum_j q_j z_j,
    // since sum_j q_j = 1; equal logits give z = 0 and ln N without rounding
    let tape = logits.tape();
    let q = smoothed_targets(labels, s[1], epsilon).into_dyn();
    let x = logits.value();
    let row_max = x
        .map_axis(ndarray::Axis(1), |r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .insert_axis(ndarray::Axis(1))
        .into_dyn();
    let z = logits.sub(tape.constant(row_max));
    let lse = z.exp().sum_axis(1, true).ln();
    let target = z.mul(tape.constant(q)).sum_axis(1, true);
    // mean taken around the first row so identical rows average exactly
    let rows = lse.sub(target);
    let first = rows.narrow(0, 0, 1);
    Ok(first.add(rows.sub(first).mean_all()).reshape(&[]))
}

/// Checks that every label occurs at least twice and at least two labels
/// are present.
pub fn check_pk_structure(labels: &[usize]) -> Result<()> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(HatError::Sampling(format!(
            "batch needs at least two identities, got {}",
            counts.len()
        )));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(HatError::Sampling(format!(
            "identity {l} has a single sample in the batch"
        )));
    }
    Ok(())
}

/// Per anchor, the farthest same-label sample (self excluded) and the
/// nearest other-label sample; ties go to the lowest index.
pub fn hardest_pairs(dist: &ArrayD<f64>, labels: &[usize]) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let n = labels.len();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let mut best_p: Option<usize> = None;
        let mut best_n: Option<usize> = None;
        for j in 0..n {
            let d = dist[[i, j]];
            if labels[j] == labels[i] {
                if j != i && best_p.is_none_or(|b| d > dist[[i, b]]) {
                    best_p = Some(j);
                }
            } else if best_n.is_none_or(|b| d < dist[[i, b]]) {
                best_n = Some(j);
            }
        }
        pos.push((i, best_p.expect("structure checked")));
        neg.push((i, best_n.expect("structure checked")));
    }
    (pos, neg)
}

/// Row-wise L2 normalization of `(B, D)` embeddings.
pub fn l2_normalize_rows<'t>(x: Var<'t>) -> Var<'t> {
    x.div(x.square().sum_axis(1, true).add_scalar(1e-12).sqrt())
}

/// Batch-hard triplet loss: mean over anchors of
/// `max(0, d_pos - d_neg + margin)` with Euclidean distances.
pub fn triplet_loss<'t>(embeddings: Var<'t>, labels: &[usize], margin: f64) -> Result<Var<'t>> {
    let s = embeddings.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(HatError::Input(format!(
            "embeddings {:?} do not match {} labels",
            s,
            labels.len()
        )));
    }
    check_pk_structure(labels)?;
    let dist = embeddings.pairwise_euclidean();
    let (pos, neg) = hardest_pairs(&dist.value(), labels);
    let d_pos = dist.gather2(&pos);
    let d_neg = dist.gather2(&neg);
    Ok(d_pos.sub(d_neg).add_scalar(margin).relu().mean_all())
}

/// Logits and triplet embedding of one supervised head.
#[derive(Debug, Clone, Copy)]
pub struct HeadTerms<'t> {
    pub logits: Var<'t>,
    pub embedding: Var<'t>,
}

/// Scalar breakdown of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Summed identity loss of the main heads.
    pub id_loss: f64,
    /// Summed triplet loss of the main heads.
    pub triplet_loss: f64,
    /// `id + triplet` of each per-level head.
    pub aux_losses: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn aux_total(&self) -> f64 {
        self.aux_losses.iter().sum()
    }
}

/// Differentiable total together with its report.
#[derive(Debug, Clone)]
pub struct TotalLoss<'t> {
    pub total: Var<'t>,
    pub report: LossReport,
}

fn head_loss<'t>(
    head: &HeadTerms<'t>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(Var<'t>, Var<'t>)> {
    let emb = if cfg.normalize_triplet {
        l2_normalize_rows(head.embedding)
    } else {
        head.embedding
    };
    Ok((
        id_loss(head.logits, labels, cfg.epsilon)?,
        triplet_loss(emb, labels, cfg.margin)?,
    ))
}

/// `id + triplet + lambda * sum(aux)`, where main terms are summed over
/// `main` heads and each aux term is that head's own `id + triplet`.
pub fn total_loss<'t>(
    main: &[HeadTerms<'t>],
    aux: &[HeadTerms<'t>],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<TotalLoss<'t>> {
    if main.is_empty() {
        return Err(HatError::Input("no main head to supervise".into()));
    }
    let mut id: Option<Var<'t>> = None;
    let mut tri: Option<Var<'t>> = None;
    for head in main {
        let (i, t) = head_loss(head, labels, cfg)?;
        id = Some(id.map_or(i, |a| a.add(i)));
        tri = Some(tri.map_or(t, |a| a.add(t)));
    }
    let (id, tri) = (id.unwrap(), tri.unwrap());
    let mut total = id.add(tri);
    let mut aux_losses = Vec::with_capacity(aux.len());
    let mut aux_sum: Option<Var<'t>> = None;
    for head in aux {
        let (i, t) = head_loss(head, labels, cfg)?;
        let a = i.add(t);
        aux_losses.push(a.item());
        aux_sum = Some(aux_sum.map_or(a, |s| s.add(a)));
    }
    if let Some(s) = aux_sum {
        total = total.add(s.scale(cfg.lambda));
    }
    Ok(TotalLoss {
        report: LossReport {
            id_loss: id.item(),
            triplet_loss: tri.item(),
            aux_losses,
            lambda: cfg.lambda,
            total: total.item(),
        },
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::Tape;
    use ndarray::{arr2, IxDyn};

    #[test]
    fn uniform_logits_give_log_n() {
        let tape = Tape::new();
        for eps in [0.0, 0.1, 0.5] {
            for n in 2..=10 {
                for b in 1..=7 {
                    let labels: Vec<usize> = (0..b).map(|i| i % n).collect();
                    let l = id_loss(tape.constant(ArrayD::zeros(IxDyn(&[b, n]))), &labels, eps).unwrap();
                    assert_eq!(l.item(), (n as f64).ln(), "n={n} b={b} eps={eps}");
                }
            }
        }
    }

    #[test]
    fn two_class_smoothed_value() {
        let tape = Tape::new();
        let logits = arr2(&[[0.9f64.ln(), 0.1f64.ln()]]).into_dyn();
        let l = id_loss(tape.constant(logits), &[0], 0.1).unwrap().item();
        let oracle = -(0.95 * 0.9f64.ln() + 0.05 * 0.1f64.ln());
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.21522).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_label_is_input_error() {
        let tape = Tape::new();
        let r = id_loss(tape.constant(ArrayD::zeros(IxDyn(&[1, 2]))), &[2], 0.1);
        assert!(matches!(r, Err(HatError::Input(_))));
    }

    #[test]
    fn one_dimensional_triplet_example() {
        let tape = Tape::new();
        let e = arr2(&[[0.0], [1.0], [10.0], [12.0]]).into_dyn();
        let l = triplet_loss(tape.constant(e), &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn hinge_arithmetic() {
        let tape = Tape::new();
        // anchor distances: positive 2.0, negative 1.5 for every anchor
        let e = arr2(&[[0.0, 0.0], [2.0, 0.0], [1.0, 1.118033988749895], [1.0, -1.118033988749895]])
            .into_dyn();
        let d = autograd::pairwise_euclidean_plain(&e.clone().into_dimensionality().unwrap());
        assert!((d[[0, 2]] - 1.5).abs() < 1e-12);
        let l = triplet_loss(tape.constant(e), &[0, 0, 1, 1], 0.3).unwrap();
        // anchors 0 and 1: 2.0 - 1.5 + 0.3; anchors 2 and 3: 2.236 - 1.5 + 0.3
        let a = 2.0 - 1.5 + 0.3;
        let b = d[[2, 3]] - 1.5 + 0.3;
        assert!((l.item() - (a + a + b + b) / 4.0).abs() < 1e-12);
        assert!((a - 0.8f64).abs() < 1e-12);
    }

    #[test]
    fn broken_pk_structure_is_sampling_error() {
        let tape = Tape::new();
        let e = tape.constant(ArrayD::zeros(IxDyn(&[3, 2])));
        assert!(matches!(
            triplet_loss(e, &[0, 0, 1], 0.3),
            Err(HatError::Sampling(_))
        ));
        let e = tape.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        assert!(matches!(triplet_loss(e, &[0, 0], 0.3), Err(HatError::Sampling(_))));
    }
}
