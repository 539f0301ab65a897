/// Per-token sparse latent codes in compressed-row form.
///
/// Row `t` holds at most `K` `(feature, value)` pairs with strictly increasing
/// feature indices and strictly positive values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentActivations {
    width: usize,
    row_ptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl LatentActivations {
    pub fn with_capacity(num_tokens: usize, width: usize, per_row: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(num_tokens + 1);
        row_ptr.push(0);
        Self {
            width,
            row_ptr,
            indices: Vec::with_capacity(num_tokens * per_row),
            values: Vec::with_capacity(num_tokens * per_row),
        }
    }

    /// Append one token's code. Entries must come in increasing index order.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (u32, f32)>) {
        for (k, v) in entries {
            debug_assert!((k as usize) < self.width);
            debug_assert!(self.indices.len() == *self.row_ptr.last().unwrap()
                || *self.indices.last().unwrap() < k);
            self.indices.push(k);
            self.values.push(v);
        }
        self.row_ptr.push(self.indices.len());
    }

    pub fn num_tokens(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, t: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.row_ptr[t], self.row_ptr[t + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// The series `z^k` of one feature over all tokens.
    pub fn feature_series(&self, k: usize) -> Vec<f32> {
        (0..self.num_tokens())
            .map(|t| {
                let (idx, vals) = self.row(t);
                idx.binary_search(&(k as u32)).map_or(0.0, |p| vals[p])
            })
            .collect()
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.num_tokens() * self.width];
        for t in 0..self.num_tokens() {
            let (idx, vals) = self.row(t);
            for (&k, &v) in idx.iter().zip(vals) {
                out[t * self.width + k as usize] = v;
            }
        }
        out
    }
}
