//! Demonstration sampling over classification-token embeddings: top-K
//! similar for few-shot prompts, plus intra-class dissimilar and inter-class
//! similar selections.

use maemi_core::tensor::{Scalar, Tensor};
use maemi_core::vision::cosine_similarities;

use crate::error::{Error, Result};

/// Indices sorted by similarity; `descending` picks most-similar first.
/// Ties break toward the lower index.
fn ranked_by_similarity(sims: &[f64], candidates: &[usize], descending: bool) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| {
        let cmp = sims[a].partial_cmp(&sims[b]).expect("finite similarity");
        let cmp = if descending { cmp.reverse() } else { cmp };
        cmp.then(a.cmp(&b))
    });
    order
}

fn take_k(order: Vec<usize>, k: usize) -> Result<Vec<usize>> {
    if k > order.len() {
        return Err(Error::Core(maemi_core::Error::KTooLarge {
            k,
            m: order.len(),
        }));
    }
    Ok(order.into_iter().take(k).collect())
}

/// Rows of `corpus` bitwise-identical to the target embedding; these are the
/// target itself and are excluded from few-shot selection.
fn self_rows<T: Scalar>(target: &[T], corpus: &Tensor<T>) -> Vec<bool> {
    (0..corpus.rows()).map(|i| corpus.row(i) == target).collect()
}

/// Top-K most similar corpus images for few-shot demonstrations. The target
/// is excluded when present in the corpus.
pub fn select_few_shot<T: Scalar>(
    target: &[T],
    corpus: &Tensor<T>,
    k: usize,
) -> Result<Vec<usize>> {
    let sims = cosine_similarities(target, corpus)?;
    let own = self_rows(target, corpus);
    let candidates: Vec<usize> = (0..corpus.rows()).filter(|&i| !own[i]).collect();
    take_k(ranked_by_similarity(&sims, &candidates, true), k)
}

/// K most dissimilar images within the target's own class.
pub fn select_intra_dissimilar<T: Scalar, L: PartialEq>(
    target: &[T],
    corpus: &Tensor<T>,
    labels: &[L],
    target_label: &L,
    k: usize,
) -> Result<Vec<usize>> {
    if labels.len() != corpus.rows() {
        return Err(Error::Core(maemi_core::Error::MissingLabels));
    }
    let sims = cosine_similarities(target, corpus)?;
    let own = self_rows(target, corpus);
    let candidates: Vec<usize> = (0..corpus.rows())
        .filter(|&i| !own[i] && labels[i] == *target_label)
        .collect();
    take_k(ranked_by_similarity(&sims, &candidates, false), k)
}

/// K most similar images drawn from classes other than the target's.
pub fn select_inter_similar<T: Scalar, L: PartialEq>(
    target: &[T],
    corpus: &Tensor<T>,
    labels: &[L],
    target_label: &L,
    k: usize,
) -> Result<Vec<usize>> {
    if labels.len() != corpus.rows() {
        return Err(Error::Core(maemi_core::Error::MissingLabels));
    }
    let sims = cosine_similarities(target, corpus)?;
    let candidates: Vec<usize> = (0..corpus.rows())
        .filter(|&i| labels[i] != *target_label)
        .collect();
    take_k(ranked_by_similarity(&sims, &candidates, true), k)
}
