//! TopK sparse autoencoder.
//!
//! ```text
//! z     = TopK(W_enc x + b_enc)     (retained negatives clamped to 0)
//! x_hat = W_dec z
//! loss  = sum_t |x_t - x_hat_t|^2
//! ```
//!
//! Parameters are stored as f32. Pre-activations, reconstructions and
//! gradients are accumulated in f64.

mod adam;
mod checkpoint;
mod latent;
mod topk;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::store::{ActivationTensor, StoreError};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use latent::LatentActivations;
pub use topk::{topk_select, topk_sparse};
pub use train::{train, train_rows, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("dimension mismatch: expected width {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("store contains no tokens")]
    EmptyStore,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: bad magic, expected \"ARDS\"")]
    MagicMismatch,
    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint: truncated payload ({actual} bytes, expected {expected})")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("checkpoint: non-finite parameter")]
    NonFiniteParameter,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SaeError> = std::result::Result<T, E>;

/// TopK SAE parameters.
///
/// The decoder is held as `d_z` atoms of width `d_x`: `dec_atoms[k * d_x + j]`
/// is `W_dec[j][k]`, so atom `k` is the k-th column of `W_dec`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    d_x: usize,
    d_z: usize,
    topk: usize,
    /// `d_z x d_x`, row-major.
    pub(crate) w_enc: Vec<f32>,
    pub(crate) b_enc: Vec<f32>,
    pub(crate) dec_atoms: Vec<f32>,
}

fn check_dims(d_x: usize, d_z: usize, topk: usize) -> Result<()> {
    if d_x == 0 || d_z == 0 {
        return Err(SaeError::InvalidDimensions(format!(
            "d_x={d_x}, d_z={d_z} must be positive"
        )));
    }
    if d_z % d_x != 0 {
        return Err(SaeError::InvalidDimensions(format!(
            "d_z={d_z} is not a multiple of d_x={d_x}"
        )));
    }
    if topk == 0 || topk > d_z {
        return Err(SaeError::InvalidDimensions(format!(
            "topk={topk} must be in 1..={d_z}"
        )));
    }
    Ok(())
}

impl SaeModel {
    /// Random initialization: encoder rows ~ N(0, 1/d_x), zero bias, and each
    /// decoder atom the unit-normalized corresponding encoder row.
    pub fn init(d_x: usize, expansion: usize, topk: usize, seed: u64) -> Result<Self> {
        if expansion == 0 {
            return Err(SaeError::InvalidDimensions("expansion must be >= 1".into()));
        }
        let d_z = d_x * expansion;
        check_dims(d_x, d_z, topk)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0 / (d_x as f64).sqrt()).unwrap();
        let w_enc: Vec<f32> = (0..d_z * d_x)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        let mut dec_atoms = w_enc.clone();
        for atom in dec_atoms.chunks_exact_mut(d_x) {
            let norm = atom.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in atom.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
        Ok(Self {
            d_x,
            d_z,
            topk,
            w_enc,
            b_enc: vec![0.0; d_z],
            dec_atoms,
        })
    }

    /// Build a model from explicit parameters. `w_dec` is `d_x x d_z`
    /// row-major, as in the checkpoint format.
    pub fn from_parts(
        d_x: usize,
        d_z: usize,
        topk: usize,
        w_enc: Vec<f32>,
        b_enc: Vec<f32>,
        w_dec: Vec<f32>,
    ) -> Result<Self> {
        check_dims(d_x, d_z, topk)?;
        if w_enc.len() != d_z * d_x || b_enc.len() != d_z || w_dec.len() != d_x * d_z {
            return Err(SaeError::InvalidDimensions(
                "parameter lengths do not match d_x/d_z".into(),
            ));
        }
        if !w_enc.iter().chain(&b_enc).chain(&w_dec).all(|v| v.is_finite()) {
            return Err(SaeError::NonFiniteParameter);
        }
        let mut dec_atoms = vec![0.0; d_z * d_x];
        for j in 0..d_x {
            for k in 0..d_z {
                dec_atoms[k * d_x + j] = w_dec[j * d_z + k];
            }
        }
        Ok(Self {
            d_x,
            d_z,
            topk,
            w_enc,
            b_enc,
            dec_atoms,
        })
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn topk(&self) -> usize {
        self.topk
    }

    pub fn expansion(&self) -> usize {
        self.d_z / self.d_x
    }

    /// Encoder weights, `d_z x d_x` row-major.
    pub fn w_enc(&self) -> &[f32] {
        &self.w_enc
    }

    pub fn b_enc(&self) -> &[f32] {
        &self.b_enc
    }

    pub fn w_enc_mut(&mut self) -> &mut [f32] {
        &mut self.w_enc
    }

    pub fn b_enc_mut(&mut self) -> &mut [f32] {
        &mut self.b_enc
    }

    /// Decoder atoms, `d_z x d_x` row-major (the transpose of `W_dec`).
    pub fn decoder_atoms(&self) -> &[f32] {
        &self.dec_atoms
    }

    pub fn decoder_atoms_mut(&mut self) -> &mut [f32] {
        &mut self.dec_atoms
    }

    /// Column `k` of `W_dec`.
    pub fn decoder_column(&self, k: usize) -> &[f32] {
        &self.dec_atoms[k * self.d_x..(k + 1) * self.d_x]
    }

    /// `W_dec[j][k]`.
    pub fn w_dec(&self, j: usize, k: usize) -> f32 {
        self.dec_atoms[k * self.d_x + j]
    }

    /// `W_dec` as `d_x x d_z` row-major.
    pub fn w_dec_row_major(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.d_x * self.d_z];
        for k in 0..self.d_z {
            for j in 0..self.d_x {
                out[j * self.d_z + k] = self.dec_atoms[k * self.d_x + j];
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.w_enc.len() + self.b_enc.len() + self.dec_atoms.len()
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.d_x {
            return Err(SaeError::DimensionMismatch {
                expected: self.d_x,
                actual: width,
            });
        }
        Ok(())
    }

    /// `W_enc x + b_enc` for one token, written into `out` (length `d_z`).
    pub fn preactivations_into(&self, x: &[f32], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.d_x);
        out.clear();
        out.extend(
            self.w_enc
                .chunks_exact(self.d_x)
                .zip(&self.b_enc)
                .map(|(row, &b)| {
                    b as f64
                        + row
                            .iter()
                            .zip(x)
                            .map(|(&w, &xi)| w as f64 * xi as f64)
                            .sum::<f64>()
                }),
        );
    }

    pub fn preactivations(&self, x: &[f32]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d_z);
        self.preactivations_into(x, &mut out);
        out
    }

    /// Accumulate `W_dec z` for a sparse `z` into `out` (length `d_x`).
    pub(crate) fn decode_sparse_into<V: Copy + Into<f64>>(
        &self,
        support: impl IntoIterator<Item = (usize, V)>,
        out: &mut [f64],
    ) {
        for (k, v) in support {
            let v: f64 = v.into();
            for (o, &w) in out.iter_mut().zip(self.decoder_column(k)) {
                *o += w as f64 * v;
            }
        }
    }

    pub fn encode(&self, x: &ActivationTensor) -> Result<LatentActivations> {
        self.check_width(x.width)?;
        let mut latent = LatentActivations::with_capacity(x.num_tokens, self.d_z, self.topk);
        let mut pre = Vec::with_capacity(self.d_z);
        let mut scratch = Vec::with_capacity(self.d_z);
        for row in x.rows() {
            self.preactivations_into(row, &mut pre);
            let support = topk_sparse(&pre, self.topk, &mut scratch);
            latent.push_row(support.into_iter().map(|(k, v)| (k as u32, v as f32)));
        }
        Ok(latent)
    }

    pub fn decode(&self, z: &LatentActivations) -> Result<ActivationTensor> {
        if z.width() != self.d_z {
            return Err(SaeError::DimensionMismatch {
                expected: self.d_z,
                actual: z.width(),
            });
        }
        let mut values = Vec::with_capacity(z.num_tokens() * self.d_x);
        let mut acc = vec![0.0f64; self.d_x];
        for t in 0..z.num_tokens() {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let (idx, vals) = z.row(t);
            self.decode_sparse_into(
                idx.iter().zip(vals).map(|(&k, &v)| (k as usize, v)),
                &mut acc,
            );
            values.extend(acc.iter().map(|&v| v as f32));
        }
        Ok(ActivationTensor {
            clip_id: String::new(),
            num_tokens: z.num_tokens(),
            width: self.d_x,
            values,
        })
    }

    /// Encode then decode.
    pub fn reconstruct(&self, x: &ActivationTensor) -> Result<ActivationTensor> {
        let mut out = self.decode(&self.encode(x)?)?;
        out.clip_id = x.clip_id.clone();
        Ok(out)
    }

    /// Squared reconstruction error of a block of token rows, and the gradient
    /// contribution if `grads` is given. Everything in f64.
    pub(crate) fn forward_backward(
        &self,
        rows: &[f32],
        mut grads: Option<&mut Gradients>,
    ) -> f64 {
        let d_x = self.d_x;
        let mut pre = Vec::with_capacity(self.d_z);
        let mut scratch = Vec::with_capacity(self.d_z);
        let mut resid = vec![0.0f64; d_x];
        let mut loss = 0.0;
        for x in rows.chunks_exact(d_x) {
            self.preactivations_into(x, &mut pre);
            let support = topk_sparse(&pre, self.topk, &mut scratch);
            resid.iter_mut().for_each(|r| *r = 0.0);
            self.decode_sparse_into(support.iter().copied(), &mut resid);
            for (r, &xi) in resid.iter_mut().zip(x) {
                *r -= xi as f64;
            }
            loss += resid.iter().map(|r| r * r).sum::<f64>();

            let Some(g) = grads.as_deref_mut() else {
                continue;
            };
            for &(k, zk) in &support {
                let atom = self.decoder_column(k);
                let g_atom = &mut g.dec_atoms[k * d_x..(k + 1) * d_x];
                let mut dz = 0.0;
                for ((ga, &a), &r) in g_atom.iter_mut().zip(atom).zip(&resid) {
                    *ga += 2.0 * zk * r;
                    dz += a as f64 * r;
                }
                let dz = 2.0 * dz;
                g.b_enc[k] += dz;
                for (gw, &xi) in g.w_enc[k * d_x..(k + 1) * d_x].iter_mut().zip(x) {
                    *gw += dz * xi as f64;
                }
            }
        }
        loss
    }

    /// Gradients of the summed reconstruction loss over all tokens of `x`.
    /// The TopK selection and negative clamp act as fixed masks.
    pub fn loss_gradients(&self, x: &ActivationTensor) -> Result<Gradients> {
        self.check_width(x.width)?;
        let mut grads = Gradients::zeros(self);
        self.forward_backward(&x.values, Some(&mut grads));
        Ok(grads)
    }

    /// Summed squared reconstruction error of `x` under this model.
    pub fn loss(&self, x: &ActivationTensor) -> Result<f64> {
        self.check_width(x.width)?;
        Ok(self.forward_backward(&x.values, None))
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.w_enc
            .iter()
            .chain(&self.b_enc)
            .chain(&self.dec_atoms)
            .all(|v| v.is_finite())
    }
}

/// Gradients with the same layouts as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `d_z x d_x` row-major.
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    /// Decoder atoms, `d_z x d_x` row-major (`dec_atoms[k * d_x + j]` is the
    /// gradient for `W_dec[j][k]`).
    pub dec_atoms: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &SaeModel) -> Self {
        Self {
            w_enc: vec![0.0; model.w_enc.len()],
            b_enc: vec![0.0; model.b_enc.len()],
            dec_atoms: vec![0.0; model.dec_atoms.len()],
        }
    }

    pub(crate) fn clear(&mut self) {
        for v in [&mut self.w_enc, &mut self.b_enc, &mut self.dec_atoms] {
            v.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn scale(&mut self, factor: f64) {
        for v in [&mut self.w_enc, &mut self.b_enc, &mut self.dec_atoms] {
            v.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

/// `sum_t sum_j (x_tj - x_hat_tj)^2`.
pub fn reconstruction_loss(x: &ActivationTensor, x_hat: &ActivationTensor) -> Result<f64> {
    if x.width != x_hat.width || x.num_tokens != x_hat.num_tokens {
        return Err(SaeError::DimensionMismatch {
            expected: x.width,
            actual: x_hat.width,
        });
    }
    Ok(x.values
        .iter()
        .zip(&x_hat.values)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum())
}

/// Per-token mean of [`reconstruction_loss`].
pub fn mean_token_loss(x: &ActivationTensor, x_hat: &ActivationTensor) -> Result<f64> {
    Ok(reconstruction_loss(x, x_hat)? / x.num_tokens.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn identity_model(d: usize, topk: usize) -> SaeModel {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        SaeModel::from_parts(d, d, topk, eye.clone(), vec![0.0; d], eye).unwrap()
    }

    fn random_tensor(rng: &mut impl Rng, t: usize, d: usize) -> ActivationTensor {
        let values = (0..t * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        ActivationTensor::new("r", t, d, values).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = SaeModel::init(8, 4, 4, 7).unwrap();
        let b = SaeModel::init(8, 4, 4, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, SaeModel::init(8, 4, 4, 8).unwrap());
        assert!(a.b_enc.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_decoder_columns_unit_norm() {
        let m = SaeModel::init(8, 4, 4, 7).unwrap();
        for k in 0..m.d_z() {
            let n: f64 = m.decoder_column(k).iter().map(|&v| (v as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(
            SaeModel::init(4, 2, 9, 0),
            Err(SaeError::InvalidDimensions(_))
        ));
        assert!(SaeModel::init(0, 2, 1, 0).is_err());
        assert!(SaeModel::init(4, 0, 1, 0).is_err());
        assert!(SaeModel::init(4, 2, 0, 0).is_err());
    }

    #[test]
    fn encode_identity() {
        let x = ActivationTensor::new("a", 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let z = identity_model(3, 3).encode(&x).unwrap();
        assert_eq!(z.row(0), (&[0u32, 1, 2][..], &[1.0f32, 2.0, 3.0][..]));
        let z = identity_model(3, 1).encode(&x).unwrap();
        assert_eq!(z.row(0), (&[2u32][..], &[3.0f32][..]));
    }

    #[test]
    fn encode_width_mismatch() {
        let x = ActivationTensor::new("a", 1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            identity_model(3, 1).encode(&x),
            Err(SaeError::DimensionMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn decode_zero_and_basis() {
        let m = SaeModel::init(4, 2, 2, 3).unwrap();
        let mut z = LatentActivations::with_capacity(2, 8, 2);
        z.push_row(std::iter::empty());
        z.push_row([(5u32, 1.0f32)]);
        let x = m.decode(&z).unwrap();
        assert!(x.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(x.row(1), m.decoder_column(5));
    }

    #[test]
    fn loss_cases() {
        let x = ActivationTensor::new("a", 1, 2, vec![1.0, 0.0]).unwrap();
        let zero = ActivationTensor::new("a", 1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&x, &zero).unwrap(), 1.0);
        let other = ActivationTensor::new("a", 1, 3, vec![0.0; 3]).unwrap();
        assert!(reconstruction_loss(&x, &other).is_err());
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&mut rng, 3, 4);
        let b = random_tensor(&mut rng, 3, 4);
        let mut oracle = 0.0f64;
        for t in 0..3 {
            for j in 0..4 {
                let d = a.values[t * 4 + j] as f64 - b.values[t * 4 + j] as f64;
                oracle += d * d;
            }
        }
        assert!((reconstruction_loss(&a, &b).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn perfect_reconstruction_has_zero_gradient() {
        let m = identity_model(3, 3);
        let x = ActivationTensor::new("a", 2, 3, vec![1.0, 2.0, 3.0, 0.5, 0.25, 4.0]).unwrap();
        let g = m.loss_gradients(&x).unwrap();
        assert!(g.w_enc.iter().chain(&g.b_enc).chain(&g.dec_atoms).all(|&v| v == 0.0));
    }

    #[test]
    fn unselected_units_get_no_encoder_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = SaeModel::init(6, 4, 3, 9).unwrap();
        let x = random_tensor(&mut rng, 4, 6);
        let z = m.encode(&x).unwrap();
        let mut used = vec![false; m.d_z()];
        for t in 0..z.num_tokens() {
            for &k in z.row(t).0 {
                used[k as usize] = true;
            }
        }
        assert!(used.iter().any(|u| !u));
        let g = m.loss_gradients(&x).unwrap();
        for k in (0..m.d_z()).filter(|&k| !used[k]) {
            assert_eq!(g.b_enc[k], 0.0);
            assert!(g.w_enc[k * 6..(k + 1) * 6].iter().all(|&v| v == 0.0));
            assert!(g.dec_atoms[k * 6..(k + 1) * 6].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn full_k_reduces_to_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = SaeModel::init(4, 3, 12, 2).unwrap();
        let x = random_tensor(&mut rng, 5, 4);
        let x_hat = m.decode(&m.encode(&x).unwrap()).unwrap();
        for t in 0..5 {
            let pre = m.preactivations(x.row(t));
            let mut acc = vec![0.0f64; 4];
            m.decode_sparse_into(
                pre.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(k, &v)| (k, v as f32)),
                &mut acc,
            );
            let relu: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
            assert_eq!(x_hat.row(t), &relu[..]);
        }
    }
}
