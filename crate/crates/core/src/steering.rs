//! Modulation, latent steering and reconstruction of debiased embeddings,
//! plus an orthogonal-projection comparison baseline.

use std::ops::Deref;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Result, SemError};
use crate::linalg::{dot, mean_rows, norm, normalized, top_eigenpairs};
use crate::sae::{Embedding, LatentVector, SaeWeights};
use crate::scoring::{bias_scores, content_score, median_activation, BiasScores, BiasSpec, NeuronScores, PromptActivations};

/// Per-neuron multiplier applied during steering. Entries are nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationVector(Vec<f64>);

impl ModulationVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SemError::InvalidArgument("modulation entries must be finite and >= 0".into()));
        }
        Ok(Self(values))
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for ModulationVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_unit_interval(name: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        Some(x) => Err(SemError::InvalidArgument(format!("{name} score {x} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// `M(j) = s_concept(j)^2`.
pub fn modulation_agnostic(s_concept: &[f64]) -> Result<ModulationVector> {
    check_unit_interval("content", s_concept)?;
    Ok(ModulationVector(s_concept.iter().map(|s| s * s).collect()))
}

/// `M(j) = (1 + s_concept(j) - s_bias(j))^2`, no clipping.
pub fn modulation_aware(s_concept: &[f64], s_bias: &[f64]) -> Result<ModulationVector> {
    ensure_len("bias scores", s_concept.len(), s_bias.len())?;
    check_unit_interval("content", s_concept)?;
    check_unit_interval("bias", s_bias)?;
    Ok(ModulationVector(
        s_concept
            .iter()
            .zip(s_bias)
            .map(|(c, b)| {
                // Difference first: its sign is exact, so M > 1 exactly when c > b.
                let t = 1.0 + (c - b);
                t * t
            })
            .collect(),
    ))
}

/// `h_debias = h_base * M + (1 - M) * m_div`.
pub fn steer(h_base: &[f64], modulation: &ModulationVector, m_div: &[f64]) -> Result<LatentVector> {
    ensure_len("steering modulation", h_base.len(), modulation.len())?;
    ensure_len("neutral activation", h_base.len(), m_div.len())?;
    LatentVector::new(
        h_base
            .iter()
            .zip(modulation.iter())
            .zip(m_div)
            .map(|((h, m), n)| h * m + (1.0 - m) * n)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Bias-agnostic: augmented content score, squared modulation, steer `m_q`.
    SemI,
    /// Bias-aware with the plain content score of the original query.
    SemB,
    /// Bias-aware with the augmented content score.
    SemBi,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SemI => "sem_i",
            Variant::SemB => "sem_b",
            Variant::SemBi => "sem_bi",
        }
    }

    pub fn needs_bias(self) -> bool {
        !matches!(self, Variant::SemI)
    }

    pub fn needs_paraphrases(self) -> bool {
        !matches!(self, Variant::SemB)
    }
}

impl FromStr for Variant {
    type Err = SemError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sem_i" => Ok(Variant::SemI),
            "sem_b" => Ok(Variant::SemB),
            "sem_bi" => Ok(Variant::SemBi),
            other => Err(SemError::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

/// Latents for one query: the original query and any paraphrases.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryLatents {
    pub original: Option<LatentVector>,
    pub paraphrases: Vec<LatentVector>,
}

/// Everything shared across queries for one variant: the neutral activation
/// vector, the diverse pool and, for bias-aware variants, the bias scores.
#[derive(Debug, Clone)]
pub struct SteeringContext {
    variant: Variant,
    diverse: PromptActivations,
    m_div: LatentVector,
    bias: Option<BiasScores>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebiasOutput {
    pub embedding: Embedding,
    pub latent: LatentVector,
    pub modulation: ModulationVector,
    pub scores: NeuronScores,
}

impl SteeringContext {
    pub fn new(variant: Variant, diverse: PromptActivations, spec: Option<&BiasSpec>) -> Result<Self> {
        let bias = match (variant.needs_bias(), spec) {
            (true, None) => {
                return Err(SemError::InvalidArgument(format!(
                    "variant {} requires a bias spec",
                    variant.as_str()
                )))
            }
            (true, Some(spec)) => Some(bias_scores(spec, &diverse)?),
            (false, _) => None,
        };
        let m_div = median_activation(diverse.latents())?;
        Ok(Self {
            variant,
            diverse,
            m_div,
            bias,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn neutral_activation(&self) -> &LatentVector {
        &self.m_div
    }

    pub fn bias_scores(&self) -> Option<&BiasScores> {
        self.bias.as_ref()
    }

    /// Steered latent, modulation and scores for one query, before decoding.
    pub fn steer_query(&self, query: &QueryLatents) -> Result<(LatentVector, ModulationVector, NeuronScores)> {
        let s = self.m_div.len();
        for l in query.original.iter().chain(&query.paraphrases) {
            ensure_len("query latent", s, l.len())?;
        }
        let original = || {
            query.original.as_ref().ok_or_else(|| {
                SemError::InvalidArgument(format!("variant {} requires the original query latent", self.variant.as_str()))
            })
        };
        if self.variant.needs_paraphrases() && query.paraphrases.is_empty() {
            return Err(SemError::InvalidArgument(format!(
                "variant {} requires query paraphrases",
                self.variant.as_str()
            )));
        }
        let (s_concept, base) = match self.variant {
            Variant::SemI => {
                let m_q = median_activation(&query.paraphrases)?;
                (content_score(&query.paraphrases, &self.diverse, true)?, m_q)
            }
            Variant::SemB => {
                let h_q = original()?;
                (content_score(std::slice::from_ref(h_q), &self.diverse, false)?, h_q.clone())
            }
            Variant::SemBi => {
                let h_q = original()?;
                (content_score(&query.paraphrases, &self.diverse, true)?, h_q.clone())
            }
        };
        let modulation = match &self.bias {
            None => modulation_agnostic(&s_concept)?,
            Some(b) => modulation_aware(&s_concept, &b.s_bias)?,
        };
        let latent = steer(&base, &modulation, &self.m_div)?;
        let scores = NeuronScores {
            s_concept,
            bias: self.bias.clone(),
        };
        Ok((latent, modulation, scores))
    }

    /// Steers and decodes one query. The result is L2-normalized unless `raw`.
    pub fn debias(&self, query: &QueryLatents, sae: &SaeWeights, raw: bool) -> Result<DebiasOutput> {
        let (latent, modulation, scores) = self.steer_query(query)?;
        let decoded = sae.decode(&latent)?;
        let embedding = if raw {
            decoded
        } else {
            Embedding::from_vec_unchecked(normalized(&decoded)?)
        };
        Ok(DebiasOutput {
            embedding,
            latent,
            modulation,
            scores,
        })
    }
}

/// One-shot version of [`SteeringContext::debias`].
pub fn debias_embedding(
    query: &QueryLatents,
    diverse: &PromptActivations,
    spec: Option<&BiasSpec>,
    variant: Variant,
    sae: &SaeWeights,
) -> Result<Embedding> {
    SteeringContext::new(variant, diverse.clone(), spec)?
        .debias(query, sae, false)
        .map(|o| o.embedding)
}

/// Orthonormal basis of the bias subspace spanned by the mean-centered class
/// means (rank at most `classes - 1`). Empty when all class means coincide.
pub fn bias_subspace(class_embeddings: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    if class_embeddings.len() < 2 {
        return Err(SemError::InvalidArgument("orthogonal projection needs at least 2 bias classes".into()));
    }
    let mut means = Vec::with_capacity(class_embeddings.len());
    for class in class_embeddings {
        if class.is_empty() {
            return Err(SemError::EmptyInput("bias class embeddings"));
        }
        means.push(mean_rows(class));
    }
    let d = means[0].len();
    for m in &means {
        ensure_len("bias class embedding", d, m.len())?;
    }
    let center = mean_rows(&means);
    let diffs: Vec<Vec<f64>> = means
        .iter()
        .map(|m| m.iter().zip(&center).map(|(a, b)| a - b).collect())
        .collect();
    let mut scatter = vec![vec![0.0; d]; d];
    for row in &diffs {
        for i in 0..d {
            for j in 0..d {
                scatter[i][j] += row[i] * row[j];
            }
        }
    }
    let pairs = top_eigenpairs(&scatter, class_embeddings.len() - 1, 1e-12, 10_000);
    let top = pairs.first().map_or(0.0, |p| p.0);
    let scale = diffs.iter().map(|r| dot(r, r)).sum::<f64>();
    if !(scale > 1e-24) {
        return Ok(Vec::new());
    }
    Ok(pairs
        .into_iter()
        .filter(|(l, _)| *l > top * 1e-10)
        .map(|(_, v)| v)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthProjOutput {
    pub embedding: Vec<f64>,
    pub warning: Option<String>,
}

/// Removes the component of `z` in `basis`; the rejection is renormalized
/// when `renormalize` is set.
pub fn project_out(z: &[f64], basis: &[Vec<f64>], renormalize: bool) -> Result<Vec<f64>> {
    let mut out = z.to_vec();
    for u in basis {
        ensure_len("projection basis", z.len(), u.len())?;
        let p = dot(&out, u);
        out.iter_mut().zip(u).for_each(|(o, b)| *o -= p * b);
    }
    if norm(&out) <= 1e-12 * norm(z).max(f64::MIN_POSITIVE) {
        return Err(SemError::Degenerate("embedding lies inside the bias subspace".into()));
    }
    if renormalize {
        normalized(&out)
    } else {
        Ok(out)
    }
}

/// Comparison baseline: project `z` onto the orthogonal complement of the
/// bias subspace built from per-class bias prompt embeddings.
pub fn orth_proj_baseline(z: &[f64], class_embeddings: &[Vec<Vec<f64>>]) -> Result<OrthProjOutput> {
    let basis = bias_subspace(class_embeddings)?;
    if basis.is_empty() {
        return Ok(OrthProjOutput {
            embedding: z.to_vec(),
            warning: Some("bias class means coincide; embedding returned unchanged".into()),
        });
    }
    Ok(OrthProjOutput {
        embedding: project_out(z, &basis, true)?,
        warning: None,
    })
}
