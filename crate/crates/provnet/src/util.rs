//! Small shared helpers: row argmax, top-k selection, majority vote.

use crate::tensor::Tensor;

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.dim(0);
    (0..n).map(|i| argmax(logits.row(i))).collect()
}

/// Indices of the k largest values, in descending value order.
/// Ties resolve to the lower index first.
pub fn top_k_indices(row: &[f32], k: usize) -> Vec<usize> {
    let k = k.min(row.len());
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Majority label among ranked labels; ties break toward the label of
/// the highest-ranked member among the tied.
pub fn majority_label(ranked_labels: &[usize]) -> usize {
    let mut counts: Vec<(usize, usize, usize)> = Vec::new(); // (label, count, first_rank)
    for (rank, &l) in ranked_labels.iter().enumerate() {
        match counts.iter_mut().find(|(label, _, _)| *label == l) {
            Some(entry) => entry.1 += 1,
            None => counts.push((l, 1, rank)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .map(|(label, _, _)| label)
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_ordering() {
        let row = [0.1f32, 0.9, 0.5, 0.9, 0.2];
        assert_eq!(top_k_indices(&row, 3), vec![1, 3, 2]);
        assert_eq!(top_k_indices(&row, 10).len(), 5);
    }

    #[test]
    fn majority_basic() {
        // labels [3,3,7,1,0] → 3
        assert_eq!(majority_label(&[3, 3, 7, 1, 0]), 3);
    }

    #[test]
    fn majority_tie_breaks_to_highest_ranked() {
        // tie [3,3,7,7,1] with a 3 ranked first → 3
        assert_eq!(majority_label(&[3, 3, 7, 7, 1]), 3);
        // and the mirror case
        assert_eq!(majority_label(&[7, 7, 3, 3, 1]), 7);
    }
}
