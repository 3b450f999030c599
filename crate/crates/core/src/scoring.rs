//! Percentile-rank neuron scoring.
//!
//! Every score is a fraction of reference activations that a probe activation
//! strictly exceeds, computed independently per neuron.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Result, SemError};
use crate::sae::LatentVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Diverse,
    QueryParaphrases,
    BiasClass,
}

/// Latent activations of a prompt set, one row per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptActivations {
    name: String,
    role: PromptRole,
    latents: Vec<LatentVector>,
}

impl PromptActivations {
    pub fn new(name: impl Into<String>, role: PromptRole, latents: Vec<LatentVector>) -> Result<Self> {
        let first = latents.first().ok_or(SemError::EmptyInput("prompt activations"))?;
        let s = first.len();
        for l in &latents {
            ensure_len("prompt activation", s, l.len())?;
        }
        Ok(Self {
            name: name.into(),
            role,
            latents,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> PromptRole {
        self.role
    }

    pub fn latents(&self) -> &[LatentVector] {
        &self.latents
    }

    pub fn latent_dim(&self) -> usize {
        self.latents[0].len()
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// A bias attribute with one prompt-activation set per class.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSpec {
    attribute: String,
    classes: Vec<(String, PromptActivations)>,
}

impl BiasSpec {
    pub fn new(attribute: impl Into<String>, classes: Vec<(String, PromptActivations)>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(SemError::InvalidArgument(format!(
                "a bias attribute needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let s = classes[0].1.latent_dim();
        for (_, acts) in &classes {
            ensure_len("bias class activation", s, acts.latent_dim())?;
        }
        Ok(Self {
            attribute: attribute.into(),
            classes,
        })
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn classes(&self) -> &[(String, PromptActivations)] {
        &self.classes
    }

    pub fn latent_dim(&self) -> usize {
        self.classes[0].1.latent_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasScores {
    /// Per class, in the spec's class order.
    pub s_gen: Vec<Vec<f64>>,
    pub s_spec: Vec<Vec<f64>>,
    pub s_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScores {
    pub s_concept: Vec<f64>,
    pub bias: Option<BiasScores>,
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Element-wise median; even counts average the middle pair.
pub fn median_activation(latents: &[LatentVector]) -> Result<LatentVector> {
    let first = latents.first().ok_or(SemError::EmptyInput("median of latents"))?;
    let s = first.len();
    for l in latents {
        ensure_len("median input", s, l.len())?;
    }
    let mut column = Vec::with_capacity(latents.len());
    let out = (0..s)
        .map(|j| {
            column.clear();
            column.extend(latents.iter().map(|l| l[j]));
            column.sort_by(f64::total_cmp);
            median_sorted(&column)
        })
        .collect();
    Ok(LatentVector::from_vec_unchecked(out))
}

fn percentile_against(probe: &[f64], reference: &[&LatentVector]) -> Result<Vec<f64>> {
    if reference.is_empty() {
        return Err(SemError::EmptyInput("percentile reference"));
    }
    for r in reference {
        ensure_len("percentile reference", probe.len(), r.len())?;
    }
    let denom = reference.len() as f64;
    Ok((0..probe.len())
        .map(|j| reference.iter().filter(|r| probe[j] > r[j]).count() as f64 / denom)
        .collect())
}

/// `score(j) = |{p : probe(j) > ref_p(j)}| / |ref|`.
pub fn percentile_score(probe: &[f64], reference: &PromptActivations) -> Result<Vec<f64>> {
    let refs: Vec<&LatentVector> = reference.latents().iter().collect();
    percentile_against(probe, &refs)
}

/// Content relevance of a query against the diverse prompt pool. With
/// `augmented`, the probe is the element-wise median of all paraphrase
/// latents; otherwise `query_latents` must hold exactly one latent.
pub fn content_score(query_latents: &[LatentVector], diverse: &PromptActivations, augmented: bool) -> Result<Vec<f64>> {
    let probe = match (query_latents, augmented) {
        ([], _) => return Err(SemError::EmptyInput("query latents")),
        (_, true) => median_activation(query_latents)?,
        ([single], false) => single.clone(),
        (many, false) => {
            return Err(SemError::InvalidArgument(format!(
                "non-augmented content score takes one query latent, got {}",
                many.len()
            )))
        }
    };
    percentile_score(&probe, diverse)
}

/// General, specific and combined bias scores per neuron.
pub fn bias_scores(spec: &BiasSpec, diverse: &PromptActivations) -> Result<BiasScores> {
    ensure_len("bias spec vs diverse", diverse.latent_dim(), spec.latent_dim())?;
    let s = spec.latent_dim();
    let mut s_gen = Vec::with_capacity(spec.classes.len());
    let mut s_spec = Vec::with_capacity(spec.classes.len());
    for (c, (_, acts)) in spec.classes.iter().enumerate() {
        let signature = median_activation(acts.latents())?;
        s_gen.push(percentile_score(&signature, diverse)?);
        let others: Vec<&LatentVector> = spec
            .classes
            .iter()
            .enumerate()
            .filter(|(o, _)| *o != c)
            .flat_map(|(_, (_, a))| a.latents().iter())
            .collect();
        s_spec.push(percentile_against(&signature, &others)?);
    }
    let s_bias = (0..s)
        .map(|j| {
            s_gen
                .iter()
                .zip(&s_spec)
                .map(|(g, sp)| g[j].min(sp[j]))
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(BiasScores { s_gen, s_spec, s_bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lv(v: &[f64]) -> LatentVector {
        LatentVector::new(v.to_vec()).unwrap()
    }

    fn acts(rows: &[&[f64]], role: PromptRole) -> PromptActivations {
        PromptActivations::new("t", role, rows.iter().map(|r| lv(r)).collect()).unwrap()
    }

    fn random_acts(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Vec<LatentVector> {
        // Quantized values so ties occur.
        (0..n)
            .map(|_| lv(&(0..s).map(|_| (rng.gen_range(0..6) as f64) * 0.5).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_activation(&[lv(&[1.0, 2.0])]).unwrap().as_slice(), &[1.0, 2.0]);
        let odd = median_activation(&[lv(&[3.0]), lv(&[1.0]), lv(&[2.0])]).unwrap();
        assert_eq!(odd.as_slice(), &[2.0]);
        let even = median_activation(&[lv(&[4.0]), lv(&[1.0]), lv(&[3.0]), lv(&[2.0])]).unwrap();
        assert_eq!(even.as_slice(), &[2.5]);
        assert!(median_activation(&[]).is_err());
    }

    #[test]
    fn median_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<LatentVector> = (0..7)
            .map(|_| lv(&(0..5).map(|_| rng.gen_range(0.0..3.0)).collect::<Vec<_>>()))
            .collect();
        let m = median_activation(&rows).unwrap();
        for j in 0..5 {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(m[j], col[3]);
        }
    }

    #[test]
    fn percentile_examples() {
        let reference = acts(&[&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0], &[3.0, 3.0, 3.0], &[4.0, 4.0, 4.0]], PromptRole::Diverse);
        assert_eq!(percentile_score(&[5.0, 0.0, 2.5], &reference).unwrap(), vec![1.0, 0.0, 0.5]);
        assert!(percentile_score(&[1.0], &reference).is_err());
    }

    #[test]
    fn content_score_variants() {
        let diverse = acts(&[&[0.0, 1.0], &[2.0, 1.0], &[1.0, 3.0]], PromptRole::Diverse);
        let q = lv(&[1.5, 1.0]);
        let plain = content_score(std::slice::from_ref(&q), &diverse, false).unwrap();
        let aug = content_score(std::slice::from_ref(&q), &diverse, true).unwrap();
        assert_eq!(plain, aug);
        // Equal to a diverse row: ties contribute nothing.
        let tie = content_score(&[lv(&[2.0, 3.0])], &diverse, false).unwrap();
        assert_eq!(tie[1], 2.0 / 3.0);
        assert!(content_score(&[], &diverse, true).is_err());
        assert!(content_score(&[q.clone(), q], &diverse, false).is_err());
    }

    #[test]
    fn content_score_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let paraphrases = random_acts(&mut rng, 10, 12);
        let diverse = PromptActivations::new("d", PromptRole::Diverse, random_acts(&mut rng, 50, 12)).unwrap();
        let got = content_score(&paraphrases, &diverse, true).unwrap();
        for j in 0..12 {
            let mut col: Vec<f64> = paraphrases.iter().map(|p| p[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = (col[4] + col[5]) / 2.0;
            let mut count = 0;
            for p in diverse.latents() {
                if med > p[j] {
                    count += 1;
                }
            }
            assert_eq!(got[j], count as f64 / 50.0);
        }
    }

    #[test]
    fn identical_classes_have_no_specificity() {
        let rows: &[&[f64]] = &[&[1.0, 0.0, 5.0], &[1.0, 0.0, 5.0]];
        let spec = BiasSpec::new(
            "gender",
            vec![("a".into(), acts(rows, PromptRole::BiasClass)), ("b".into(), acts(rows, PromptRole::BiasClass))],
        )
        .unwrap();
        let diverse = acts(&[&[0.0, 0.0, 0.0]], PromptRole::Diverse);
        let out = bias_scores(&spec, &diverse).unwrap();
        assert!(out.s_spec.iter().flatten().all(|&v| v == 0.0));
        assert!(out.s_bias.iter().all(|&v| v == 0.0));

        // With spread-out prompts the median beats some raw latents of the
        // other (identical) class, so specificity is not zero.
        let spread: &[&[f64]] = &[&[1.0], &[2.0]];
        let spec = BiasSpec::new(
            "gender",
            vec![("a".into(), acts(spread, PromptRole::BiasClass)), ("b".into(), acts(spread, PromptRole::BiasClass))],
        )
        .unwrap();
        let out = bias_scores(&spec, &acts(&[&[0.0]], PromptRole::Diverse)).unwrap();
        assert_eq!(out.s_spec[0][0], 0.5);
    }

    #[test]
    fn perfectly_specific_neuron() {
        let spec = BiasSpec::new(
            "gender",
            vec![
                ("male".into(), acts(&[&[9.0, 1.0], &[9.0, 1.0]], PromptRole::BiasClass)),
                ("female".into(), acts(&[&[0.0, 1.0], &[0.0, 1.0]], PromptRole::BiasClass)),
            ],
        )
        .unwrap();
        let diverse = acts(&[&[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]], PromptRole::Diverse);
        let out = bias_scores(&spec, &diverse).unwrap();
        assert_eq!(out.s_gen[0][0], 1.0);
        assert_eq!(out.s_spec[0][0], 1.0);
        assert_eq!(out.s_bias, vec![1.0, 0.0]);
    }

    #[test]
    fn bias_spec_needs_two_classes() {
        let one = acts(&[&[1.0]], PromptRole::BiasClass);
        assert!(BiasSpec::new("a", vec![("x".into(), one)]).is_err());
        assert!(PromptActivations::new("e", PromptRole::BiasClass, vec![]).is_err());
    }

    #[test]
    fn bias_scores_match_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let s = 16;
        let classes: Vec<Vec<LatentVector>> = (0..3).map(|_| random_acts(&mut rng, 5, s)).collect();
        let diverse = random_acts(&mut rng, 20, s);
        let spec = BiasSpec::new(
            "attr",
            classes
                .iter()
                .enumerate()
                .map(|(i, c)| (format!("c{i}"), PromptActivations::new("c", PromptRole::BiasClass, c.clone()).unwrap()))
                .collect(),
        )
        .unwrap();
        let dv = PromptActivations::new("d", PromptRole::Diverse, diverse.clone()).unwrap();
        let got = bias_scores(&spec, &dv).unwrap();
        for j in 0..s {
            let mut best = 0.0f64;
            for c in 0..3 {
                let mut col: Vec<f64> = classes[c].iter().map(|p| p[j]).collect();
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let m = col[2];
                let mut gen = 0usize;
                for p in &diverse {
                    gen += usize::from(m > p[j]);
                }
                let mut spc = 0usize;
                let mut total = 0usize;
                for (o, other) in classes.iter().enumerate() {
                    if o == c {
                        continue;
                    }
                    for p in other {
                        spc += usize::from(m > p[j]);
                        total += 1;
                    }
                }
                let (g, sp) = (gen as f64 / 20.0, spc as f64 / total as f64);
                assert_eq!(got.s_gen[c][j], g);
                assert_eq!(got.s_spec[c][j], sp);
                best = best.max(g.min(sp));
            }
            assert_eq!(got.s_bias[j], best);
        }
    }

    proptest! {
        #[test]
        fn percentile_is_invariant_under_monotone_maps_and_permutation(
            seed in 0u64..1000, shift in -3.0f64..3.0, scale in 0.1f64..5.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs = random_acts(&mut rng, 9, 6);
            let probe: Vec<f64> = (0..6).map(|_| (rng.gen_range(0..6) as f64) * 0.5).collect();
            let base = percentile_score(&probe, &PromptActivations::new("r", PromptRole::Diverse, refs.clone()).unwrap()).unwrap();
            let f = |x: f64| (scale * x + shift).exp();
            let mapped_refs: Vec<LatentVector> = refs.iter().map(|r| lv(&r.iter().map(|&x| f(x)).collect::<Vec<_>>())).collect();
            let mapped_probe: Vec<f64> = probe.iter().map(|&x| f(x)).collect();
            let mapped = percentile_score(&mapped_probe, &PromptActivations::new("r", PromptRole::Diverse, mapped_refs).unwrap()).unwrap();
            prop_assert_eq!(&base, &mapped);
            let mut shuffled = refs;
            shuffled.reverse();
            shuffled.rotate_left(seed as usize % 9);
            let perm = percentile_score(&probe, &PromptActivations::new("r", PromptRole::Diverse, shuffled).unwrap()).unwrap();
            prop_assert_eq!(&base, &perm);
            for v in &base {
                prop_assert!((0.0..=1.0).contains(v));
                prop_assert!(((v * 9.0).round() - v * 9.0).abs() < 1e-12);
            }
        }

        #[test]
        fn bias_score_bounded_by_components(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = BiasSpec::new("a", (0..3).map(|i| (format!("{i}"), PromptActivations::new("c", PromptRole::BiasClass, random_acts(&mut rng, 4, 8)).unwrap())).collect()).unwrap();
            let dv = PromptActivations::new("d", PromptRole::Diverse, random_acts(&mut rng, 11, 8)).unwrap();
            let out = bias_scores(&spec, &dv).unwrap();
            for j in 0..8 {
                let max_gen = out.s_gen.iter().map(|g| g[j]).fold(0.0, f64::max);
                let max_spec = out.s_spec.iter().map(|g| g[j]).fold(0.0, f64::max);
                prop_assert!(out.s_bias[j] <= max_gen && out.s_bias[j] <= max_spec);
            }
        }
    }
}
