//! Sparse autoencoder weights, encoding, decoding and initialization.
//!
//! The encoder maps a dense embedding `z` to `ReLU(W_e (z - b_pre))` and the
//! decoder maps a latent `h` back to `W_d h + b_pre`. Weights are held in
//! `f64`; everything this crate constructs is rounded to `f32` precision so
//! the binary weight file round-trips bit-exactly.

use std::cmp::Ordering;
use std::ops::Deref;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_finite, ensure_len, Result, SemError};

/// Dense embedding in the encoder's input space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

/// Activation vector in the sparse latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(Vec<f64>);

macro_rules! vector_newtype {
    ($name:ident, $what:literal) => {
        impl $name {
            pub fn new(values: Vec<f64>) -> Result<Self> {
                ensure_finite($what, &values)?;
                Ok(Self(values))
            }

            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl TryFrom<Vec<f64>> for $name {
            type Error = SemError;
            fn try_from(v: Vec<f64>) -> Result<Self> {
                Self::new(v)
            }
        }
    };
}

vector_newtype!(Embedding, "embedding");
vector_newtype!(LatentVector, "latent vector");

impl LatentVector {
    pub(crate) fn from_vec_unchecked(v: Vec<f64>) -> Self {
        LatentVector(v)
    }
}

impl Embedding {
    pub(crate) fn from_vec_unchecked(v: Vec<f64>) -> Self {
        Embedding(v)
    }
}

/// How the centering bias is initialized from the training embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterInit {
    #[default]
    GeometricMedian,
    ArithmeticMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeWeights {
    encoder: Array2<f64>,
    decoder: Array2<f64>,
    centering_bias: Array1<f64>,
}

impl SaeWeights {
    /// `encoder` is `s x d`, `decoder` is `d x s`, `centering_bias` has length `d`.
    pub fn new(encoder: Array2<f64>, decoder: Array2<f64>, centering_bias: Array1<f64>) -> Result<Self> {
        let (s, d) = encoder.dim();
        if s == 0 || d == 0 {
            return Err(SemError::InvalidArgument("SAE dimensions must be positive".into()));
        }
        if decoder.dim() != (d, s) {
            return Err(SemError::InvalidArgument(format!(
                "decoder shape {:?} does not match encoder {}x{}",
                decoder.dim(),
                s,
                d
            )));
        }
        ensure_len("centering bias", d, centering_bias.len())?;
        if !(encoder.iter().chain(decoder.iter()).chain(centering_bias.iter())).all(|v| v.is_finite()) {
            return Err(SemError::NonFinite("SAE weights"));
        }
        Ok(Self {
            encoder,
            decoder,
            centering_bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.nrows()
    }

    pub fn encoder(&self) -> &Array2<f64> {
        &self.encoder
    }

    pub fn decoder(&self) -> &Array2<f64> {
        &self.decoder
    }

    pub fn centering_bias(&self) -> &Array1<f64> {
        &self.centering_bias
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Array2<f64>, &mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.encoder, &mut self.decoder, &mut self.centering_bias)
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(mut self) -> Self {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        self.encoder.iter_mut().for_each(r);
        self.decoder.iter_mut().for_each(r);
        self.centering_bias.iter_mut().for_each(r);
        self
    }

    pub fn encode(&self, z: &[f64]) -> Result<LatentVector> {
        sae_encode(z, self)
    }

    pub fn decode(&self, h: &[f64]) -> Result<Embedding> {
        sae_decode(h, self)
    }
}

/// `h = max(0, W_e (z - b_pre))`.
pub fn sae_encode(z: &[f64], w: &SaeWeights) -> Result<LatentVector> {
    ensure_len("sae_encode input", w.input_dim(), z.len())?;
    ensure_finite("sae_encode input", z)?;
    let centered = ArrayView1::from(z).to_owned() - &w.centering_bias;
    let pre = w.encoder.dot(&centered);
    Ok(LatentVector(pre.iter().map(|v| v.max(0.0)).collect()))
}

/// `z_hat = W_d h + b_pre`.
pub fn sae_decode(h: &[f64], w: &SaeWeights) -> Result<Embedding> {
    ensure_len("sae_decode input", w.latent_dim(), h.len())?;
    ensure_finite("sae_decode input", h)?;
    let out = w.decoder.dot(&ArrayView1::from(h)) + &w.centering_bias;
    Ok(Embedding(out.to_vec()))
}

/// Indices of the `k` largest entries, larger values first, ties to the lower index.
pub(crate) fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        values[*b]
            .partial_cmp(&values[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// ReLU followed by keeping the `k` largest entries; ties go to the lower index.
pub fn topk_relu(h: &[f64], k: usize) -> Result<LatentVector> {
    if k == 0 || k > h.len() {
        return Err(SemError::InvalidArgument(format!(
            "top-k count {} outside 1..={}",
            k,
            h.len()
        )));
    }
    ensure_finite("topk_relu input", h)?;
    let relu: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
    let mut out = vec![0.0; h.len()];
    for i in topk_indices(&relu, k) {
        out[i] = relu[i];
    }
    Ok(LatentVector(out))
}

/// Weiszfeld iteration for the geometric median, starting from the centroid.
pub fn geometric_median(points: &[Vec<f64>], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let first = points.first().ok_or(SemError::EmptyInput("geometric median points"))?;
    let d = first.len();
    for p in points {
        ensure_len("geometric median point", d, p.len())?;
    }
    let mut y = crate::linalg::mean_rows(points);
    for _ in 0..max_iter {
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        let mut coincident = false;
        for p in points {
            let dist = p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist < 1e-12 {
                coincident = true;
                continue;
            }
            den += 1.0 / dist;
            num.iter_mut().zip(p).for_each(|(n, v)| *n += v / dist);
        }
        if den == 0.0 {
            // Every point coincides with the estimate.
            return Ok(y);
        }
        let next: Vec<f64> = num.iter().map(|n| n / den).collect();
        let step = next.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if coincident && step < tol {
            return Ok(y);
        }
        y = next;
        if step < tol {
            break;
        }
    }
    Ok(y)
}

/// Kaiming-uniform decoder with columns rescaled to norm 0.1, encoder set to
/// the decoder transpose, centering bias from the training embeddings.
pub fn init_sae(
    input_dim: usize,
    latent_dim: usize,
    seed: u64,
    training_embeddings: &[Vec<f64>],
    center: CenterInit,
) -> Result<SaeWeights> {
    if input_dim == 0 || latent_dim <= input_dim {
        return Err(SemError::InvalidArgument(format!(
            "latent_dim ({latent_dim}) must exceed input_dim ({input_dim}) > 0"
        )));
    }
    if training_embeddings.is_empty() {
        return Err(SemError::EmptyInput("training embeddings"));
    }
    for e in training_embeddings {
        ensure_len("training embedding", input_dim, e.len())?;
        ensure_finite("training embedding", e)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / latent_dim as f64).sqrt();
    let mut decoder = Array2::from_shape_fn((input_dim, latent_dim), |_| rng.gen_range(-bound..bound));
    for mut col in decoder.columns_mut() {
        let n = col.dot(&col).sqrt();
        if n > 0.0 {
            col.mapv_inplace(|v| 0.1 * v / n);
        }
    }
    let encoder = decoder.t().to_owned();
    let bias = match center {
        CenterInit::GeometricMedian => geometric_median(training_embeddings, 1e-8, 1000)?,
        CenterInit::ArithmeticMean => crate::linalg::mean_rows(training_embeddings),
    };
    Ok(SaeWeights::new(encoder, decoder, Array1::from(bias))?.round_to_f32())
}
