//! Synthetic sparse-dictionary data with known ground truth.
//!
//! Activations are `x = D s` with unit-norm Gaussian atoms and a few
//! positive coefficients per sample. Stores built from it group clips into
//! themes; each theme draws most of its atoms from its own block, and clip
//! embeddings sit near a per-theme direction, so retrieval and scoring
//! have something real to find.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::sae::SaeModel;
use crate::store::{
    ActivationStore, ActivationTensor, ClipEntry, Result as StoreResult, SemanticEmbedding,
    StoreManifest,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn unit_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `direction + noise·g`, g standard Gaussian, as f32.
pub fn jitter(rng: &mut impl Rng, direction: &[f64], noise: f64) -> Vec<f32> {
    direction
        .iter()
        .map(|&d| (d + noise * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

/// `d_x × atoms` dictionary with unit-norm Gaussian columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDictionary {
    d_x: usize,
    atoms: usize,
    /// Atom-major: atom k is `columns[k*d_x..(k+1)*d_x]`.
    columns: Vec<f64>,
}

impl SyntheticDictionary {
    pub fn generate(d_x: usize, atoms: usize, seed: u64) -> Self {
        let mut rng = rng(seed);
        let columns = (0..atoms).flat_map(|_| unit_vec(&mut rng, d_x)).collect();
        Self { d_x, atoms, columns }
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        &self.columns[k * self.d_x..(k + 1) * self.d_x]
    }

    /// `Σ coeff · D[:, atom]`.
    pub fn combine(&self, terms: &[(usize, f64)]) -> Vec<f32> {
        let mut x = vec![0.0f64; self.d_x];
        for &(k, c) in terms {
            for (xi, di) in x.iter_mut().zip(self.atom(k)) {
                *xi += c * di;
            }
        }
        x.into_iter().map(|v| v as f32).collect()
    }

    /// One sample with `active` distinct atoms drawn from `pool` (all atoms
    /// when `None`) and coefficients uniform in [0.5, 1.5].
    pub fn sample(&self, rng: &mut impl Rng, active: usize, pool: Option<&[usize]>) -> Vec<f32> {
        let terms: Vec<(usize, f64)> = match pool {
            None => index::sample(rng, self.atoms, active.min(self.atoms))
                .into_iter()
                .collect::<Vec<_>>(),
            Some(p) => index::sample(rng, p.len(), active.min(p.len()))
                .into_iter()
                .map(|i| p[i])
                .collect(),
        }
        .into_iter()
        .map(|k| (k, rng.random_range(0.5..1.5)))
        .collect();
        self.combine(&terms)
    }

    /// `n` samples, row-major `n × d_x`.
    pub fn samples(&self, n: usize, active: usize, seed: u64) -> Vec<f32> {
        let mut rng = rng(seed);
        (0..n).flat_map(|_| self.sample(&mut rng, active, None)).collect()
    }

    /// Mean over atoms of the best cosine to any decoder column of `model`.
    pub fn mean_max_cosine(&self, model: &SaeModel) -> f64 {
        assert_eq!(model.d_x(), self.d_x, "dictionary and model widths differ");
        let cols: Vec<(Vec<f64>, f64)> = (0..model.d_z())
            .map(|k| {
                let c: Vec<f64> = model.decoder_column(k).iter().map(|&v| v as f64).collect();
                let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                (c, n)
            })
            .collect();
        let total: f64 = (0..self.atoms)
            .map(|a| {
                let atom = self.atom(a);
                cols.iter()
                    .filter(|(_, n)| *n > 0.0)
                    .map(|(c, n)| c.iter().zip(atom).map(|(x, y)| x * y).sum::<f64>() / n)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum();
        total / self.atoms as f64
    }
}

/// Layout of a themed synthetic store.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStoreSpec {
    pub clips: usize,
    pub tokens_per_clip: usize,
    pub d_x: usize,
    pub atoms: usize,
    pub themes: usize,
    /// Atoms per token: `active - 1` from the clip's theme block plus one
    /// drawn from the whole dictionary.
    pub active: usize,
    pub d_e: usize,
    /// Noise added to a theme direction to form a clip embedding.
    pub embedding_noise: f64,
    pub with_audio: bool,
    pub seed: u64,
}

impl Default for SyntheticStoreSpec {
    fn default() -> Self {
        Self {
            clips: 24,
            tokens_per_clip: 16,
            d_x: 16,
            atoms: 32,
            themes: 4,
            active: 3,
            d_e: 16,
            embedding_noise: 0.1,
            with_audio: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStore {
    pub dictionary: SyntheticDictionary,
    /// Theme of clip i.
    pub clip_themes: Vec<usize>,
    /// Unit direction of each theme in embedding space.
    pub theme_directions: Vec<Vec<f64>>,
}

pub fn clip_id(i: usize) -> String {
    format!("clip{i:04}")
}

/// Write a themed synthetic store at `root`: activations, a clip embedding
/// per clip, a `label_theme<t>` embedding per theme, and optional silent
/// WAV files.
pub fn write_synthetic_store(
    root: impl AsRef<Path>,
    spec: &SyntheticStoreSpec,
) -> StoreResult<(ActivationStore, SyntheticStore)> {
    let root = root.as_ref();
    let dictionary = SyntheticDictionary::generate(spec.d_x, spec.atoms, spec.seed);
    let mut rng = rng(spec.seed ^ 0x5eed_0f_c11b5);
    let themes = spec.themes.max(1);
    let block = (spec.atoms / themes).max(1);
    let theme_directions: Vec<Vec<f64>> = (0..themes).map(|_| unit_vec(&mut rng, spec.d_e)).collect();

    let mut manifest = StoreManifest::new("synthetic", spec.d_x as u32, spec.d_e as u32);
    let clip_themes: Vec<usize> = (0..spec.clips).map(|i| i % themes).collect();
    for i in 0..spec.clips {
        manifest.clips.push(ClipEntry {
            id: clip_id(i),
            num_tokens: spec.tokens_per_clip as u32,
            audio_path: spec.with_audio.then(|| format!("audio/{}.wav", clip_id(i))),
        });
    }
    let store = ActivationStore::create(root, manifest)?;
    if spec.with_audio {
        fs::create_dir_all(root.join("audio")).map_err(|e| crate::store::StoreError::IoFailure {
            path: root.join("audio"),
            source: e,
        })?;
    }

    for (i, &theme) in clip_themes.iter().enumerate() {
        let start = (theme * block).min(spec.atoms - 1);
        let pool: Vec<usize> = (start..(start + block).min(spec.atoms)).collect();
        let mut values = Vec::with_capacity(spec.tokens_per_clip * spec.d_x);
        for _ in 0..spec.tokens_per_clip {
            let themed = spec.active.saturating_sub(1).min(pool.len());
            let mut terms: Vec<(usize, f64)> = index::sample(&mut rng, pool.len(), themed)
                .into_iter()
                .map(|j| (pool[j], rng.random_range(0.5..1.5)))
                .collect();
            if spec.active > 0 {
                terms.push((rng.random_range(0..spec.atoms), rng.random_range(0.5..1.5)));
            }
            values.extend(dictionary.combine(&terms));
        }
        let id = clip_id(i);
        store.write_activation(&ActivationTensor::new(&id, spec.tokens_per_clip, spec.d_x, values)?)?;
        let emb = jitter(&mut rng, &theme_directions[theme], spec.embedding_noise);
        store.write_embedding(&SemanticEmbedding::new(&id, emb))?;
        if spec.with_audio {
            let path = root.join("audio").join(format!("{id}.wav"));
            fs::write(&path, silent_wav(160, 16_000))
                .map_err(|e| crate::store::StoreError::IoFailure { path, source: e })?;
        }
    }
    for (t, dir) in theme_directions.iter().enumerate() {
        let emb = jitter(&mut rng, dir, spec.embedding_noise / 2.0);
        store.write_embedding(&SemanticEmbedding::new(
            crate::store::label_embedding_id(&format!("theme{t}")),
            emb,
        ))?;
    }
    Ok((
        store,
        SyntheticStore {
            dictionary,
            clip_themes,
            theme_directions,
        },
    ))
}

/// A mono 16-bit PCM WAV of `samples` zeros.
pub fn silent_wav(samples: u32, sample_rate: u32) -> Vec<u8> {
    let data_len = samples * 2;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.resize(44 + data_len as usize, 0);
    out
}
