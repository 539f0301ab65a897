use std::cmp::Ordering;

/// Largest value first; equal values keep the lower index first.
fn rank_order(pre: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| pre[b].total_cmp(&pre[a]).then(a.cmp(&b))
}

/// TopK selection returning the retained support as `(index, value)` pairs in
/// increasing index order.
///
/// The `k` largest entries are kept (ties at the boundary go to the lower
/// index), then any retained entry that is not strictly positive is dropped,
/// which is the same as clamping it to zero. `scratch` is reused between calls
/// to avoid reallocating.
pub fn topk_sparse(pre: &[f64], k: usize, scratch: &mut Vec<usize>) -> Vec<(usize, f64)> {
    let k = k.min(pre.len());
    if k == 0 {
        return Vec::new();
    }
    scratch.clear();
    scratch.extend(0..pre.len());
    if k < pre.len() {
        scratch.select_nth_unstable_by(k - 1, rank_order(pre));
    }
    let mut support: Vec<(usize, f64)> = scratch[..k]
        .iter()
        .filter(|&&i| pre[i] > 0.0)
        .map(|&i| (i, pre[i]))
        .collect();
    support.sort_unstable_by_key(|&(i, _)| i);
    support
}

/// Dense form of [`topk_sparse`].
pub fn topk_select(pre: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; pre.len()];
    for (i, v) in topk_sparse(pre, k, &mut Vec::new()) {
        out[i] = v;
    }
    out
}
