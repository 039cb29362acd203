//! Exhaustive reference searches.

/// Indices of `scores` ordered by descending score, ties by ascending index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // insertion sort: quadratic on purpose, independent of slice::sort
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (idx[j - 1], idx[j]);
            let swap = scores[b] > scores[a] || (scores[b] == scores[a] && b < a);
            if !swap {
                break;
            }
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx
}

/// First index attaining the maximum.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// First index attaining the minimum.
pub fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}
