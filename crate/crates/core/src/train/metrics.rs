/// Threshold on averaged sigmoid probabilities for multi-label predictions.
pub const MULTI_LABEL_THRESHOLD: f64 = 0.5;

/// Micro-averaged F1 over all instance-label pairs.
///
/// `2·TP / (2·TP + FP + FN)`, with 0 when the denominator is 0. Label sets
/// are treated as sets, so duplicates are ignored.
pub fn micro_f1(pred: &[Vec<usize>], truth: &[Vec<usize>]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction and truth lengths differ");
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let mut p = p.clone();
        p.sort_unstable();
        p.dedup();
        let mut t = t.clone();
        t.sort_unstable();
        t.dedup();
        let hits = p.iter().filter(|l| t.binary_search(l).is_ok()).count();
        tp += hits;
        fp += p.len() - hits;
        fn_ += t.len() - hits;
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Index of the largest probability, first index on ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Labels predicted from one row of class probabilities.
pub fn predict(probs: &[f64], multi_label: bool) -> Vec<usize> {
    if multi_label {
        probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= MULTI_LABEL_THRESHOLD)
            .map(|(i, _)| i)
            .collect()
    } else {
        vec![argmax(probs)]
    }
}
