use super::VideoFeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps a `T×F` sequence onto exactly `n` snippets.
///
/// For `T >= n` output row `i` is the mean of input rows
/// `floor(i·T/n) .. floor((i+1)·T/n)`; for `T < n` it is input row `floor(i·T/n)`.
pub fn resample_to_n(seq: &VideoFeatureSequence, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::contract("resample_to_n", "n must be >= 1"));
    }
    let x = &seq.features;
    let (t, f) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(n * f);
    for i in 0..n {
        if t >= n {
            let (lo, hi) = (i * t / n, (i + 1) * t / n);
            let mut acc = vec![0.0; f];
            for r in lo..hi {
                acc.iter_mut().zip(x.row(r)).for_each(|(a, v)| *a += v);
            }
            let len = (hi - lo) as f64;
            out.extend(acc.into_iter().map(|v| v / len));
        } else {
            out.extend_from_slice(x.row(i * t / n));
        }
    }
    Tensor::matrix(n, f, out)
}
