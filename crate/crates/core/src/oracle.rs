//! Slow reference implementations used to cross-check the fast paths.

/// Mann-Whitney statistic by comparing every positive with every negative.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0usize);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                credit += 1.0;
            } else if si == sj {
                credit += 0.5;
            }
        }
    }
    credit / pairs as f64
}

/// Average precision by walking every positive and counting everything ranked at or above it.
pub fn rank_walk_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let mut total = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        let at_or_above = scores.iter().filter(|&&s| s >= si).count();
        let hits = scores.iter().zip(labels).filter(|(&s, &l)| s >= si && l == 1).count();
        total += hits as f64 / at_or_above as f64;
    }
    total / positives as f64
}

/// Top-k by fully sorting `(value desc, index asc)` pairs.
pub fn sorted_topk(values: &[f64], k: usize) -> (Vec<usize>, f64) {
    let mut order: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite values").then(a.1.cmp(&b.1)));
    let idx: Vec<usize> = order[..k].iter().map(|&(_, i)| i).collect();
    let mean = idx.iter().map(|&i| values[i]).sum::<f64>() / k as f64;
    (idx, mean)
}

/// Gaussian KL against N(0, 1), per coordinate and averaged over all entries.
pub fn gaussian_kl(mu: &[f64], sigma: &[f64]) -> f64 {
    let sum: f64 = mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .sum();
    sum / mu.len() as f64
}

/// BCE of a scalar probability against a 0/1 target with the model's clamping.
pub fn scalar_bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(crate::nn::PROB_CLAMP, 1.0 - crate::nn::PROB_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}
