//! Deterministic top-k selection.

use crate::error::{Error, Result};

/// Number of elements every top-k in the model keeps for a pool of `pool` items.
pub fn topk_count(pool: usize) -> usize {
    pool / 16 + 1
}

/// Indices of the `k` largest entries of `values` (ranked, ties to the lower index) and their mean.
pub fn topk_rows(values: &[f64], k: usize) -> Result<(Vec<usize>, f64)> {
    if k == 0 || k > values.len() {
        return Err(Error::contract(
            "topk",
            format!("k = {k} outside 1..={}", values.len()),
        ));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    let mean = order.iter().map(|&i| values[i]).sum::<f64>() / k as f64;
    Ok((order, mean))
}
