//! Synthetic entangled-embedding corpora with planted content and bias
//! directions, plus the prompt sets needed to run the debiasing pipeline.
//!
//! A corpus sample of content `c` and bias class `k` is
//! `cs * u_c + bs * v_k + rho * u_{t(k)} + noise`, where `t(k) = k mod n_contents`
//! is the content stereotypically tied to class `k`. Neutral queries lean
//! towards class `s(c) = c mod n_bias_classes` with strength `lean * rho * bs`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use crate::format::{write_atomic, write_embedding_matrix, write_labels, EmbeddingMatrix, LabelRow, LabelTable};
use crate::linalg::{dot, norm};
use crate::manifest::{Manifest, Role};

pub const SYNTH_ATTRIBUTE: &str = "synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// Signed coordinate axes in a random order.
    #[default]
    Axis,
    /// Gram-Schmidt orthonormalized Gaussian directions.
    Rotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub n_contents: usize,
    pub n_bias_classes: usize,
    pub content_strength: f64,
    pub bias_strength: f64,
    /// Entanglement coefficient rho in [0, 1].
    pub entanglement: f64,
    pub noise_std: f64,
    pub samples_per_cell: usize,
    pub seed: u64,
    pub basis: Basis,
    pub n_diverse: usize,
    /// Rows of the SAE pretraining set.
    pub n_pretrain: usize,
    /// Planted directions active in each diverse or pretraining mixture.
    pub mixture_active: usize,
    /// Scale of mixture coefficients, drawn from `U(0.5, 1.5) * scale * strength`.
    pub mixture_scale: f64,
    pub prompts_per_class: usize,
    pub paraphrases_per_query: usize,
    pub prompt_noise_std: f64,
    /// Lean of neutral queries towards their stereotype class, as a fraction
    /// of `rho * bias_strength`.
    pub query_lean: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_contents: 8,
            n_bias_classes: 2,
            content_strength: 1.0,
            bias_strength: 1.0,
            entanglement: 0.5,
            noise_std: 0.1,
            samples_per_cell: 40,
            seed: 0,
            basis: Basis::Axis,
            n_diverse: 200,
            n_pretrain: 2000,
            mixture_active: 3,
            mixture_scale: 1.0,
            prompts_per_class: 10,
            paraphrases_per_query: 8,
            prompt_noise_std: 0.05,
            query_lean: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SemError::InvalidConfig(m));
        if self.n_contents < 1 || self.n_bias_classes < 2 {
            return bad("need at least 1 content and 2 bias classes".into());
        }
        if self.d < self.n_contents + self.n_bias_classes {
            return bad(format!(
                "d={} cannot hold {} orthogonal directions",
                self.d,
                self.n_contents + self.n_bias_classes
            ));
        }
        if !(self.content_strength > 0.0) || !(self.bias_strength >= 0.0) {
            return bad("content strength must be positive and bias strength nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.entanglement) {
            return bad(format!("entanglement {} outside [0, 1]", self.entanglement));
        }
        if !(self.noise_std >= 0.0) || !(self.prompt_noise_std >= 0.0) || !(self.mixture_scale >= 0.0) || !(self.query_lean >= 0.0) {
            return bad("noise scales must be nonnegative".into());
        }
        if self.samples_per_cell == 0 || self.prompts_per_class == 0 || self.paraphrases_per_query == 0 || self.n_diverse < 2 {
            return bad("sample counts must be positive (at least 2 diverse prompts)".into());
        }
        if self.mixture_active == 0 || self.mixture_active > self.n_contents + self.n_bias_classes {
            return bad(format!("mixture_active {} outside 1..=number of planted directions", self.mixture_active));
        }
        Ok(())
    }

    pub fn content_name(&self, c: usize) -> String {
        format!("c{:0w$}", c, w = digits(self.n_contents))
    }

    pub fn bias_name(&self, k: usize) -> String {
        format!("b{:0w$}", k, w = digits(self.n_bias_classes))
    }

    pub fn stereotype_content(&self, k: usize) -> usize {
        k % self.n_contents
    }

    pub fn lean_class(&self, c: usize) -> usize {
        c % self.n_bias_classes
    }

    pub fn lean_strength(&self) -> f64 {
        self.query_lean * self.entanglement * self.bias_strength
    }

    pub fn recipe(&self) -> String {
        format!(
            "x(c,k) = {cs}*u_c + {bs}*v_k + {rho}*u_(k mod {nc}) + N(0, {sn}^2 I); \
             query(c) = {cs}*u_c + {lean}*v_(c mod {nb}) + N(0, {pn}^2 I)",
            cs = self.content_strength,
            bs = self.bias_strength,
            rho = self.entanglement,
            nc = self.n_contents,
            sn = self.noise_std,
            lean = self.lean_strength(),
            nb = self.n_bias_classes,
            pn = self.prompt_noise_std,
        )
    }
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub recipe: String,
    pub content_dirs: Vec<Vec<f64>>,
    pub bias_dirs: Vec<Vec<f64>>,
    /// Cell-major samples: content, then bias class, then replicate.
    pub embeddings: Vec<Vec<f64>>,
    pub content_labels: Vec<usize>,
    pub bias_labels: Vec<usize>,
    /// One neutral query per content.
    pub queries: Vec<Vec<f64>>,
    pub paraphrases: Vec<Vec<f64>>,
    pub paraphrase_query: Vec<usize>,
    /// `gendered[k][c]`: query of content `c` explicitly marked with class `k`.
    pub gendered: Vec<Vec<Vec<f64>>>,
    pub bias_prompts: Vec<Vec<Vec<f64>>>,
    pub diverse: Vec<Vec<f64>>,
    /// Sparse nonnegative mixtures of planted directions for SAE training.
    pub pretrain: Vec<Vec<f64>>,
    /// Zero-shot class prompts, one per content.
    pub class_prompts: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn planted_directions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = cfg.n_contents + cfg.n_bias_classes;
    match cfg.basis {
        Basis::Axis => {
            let mut axes: Vec<usize> = (0..cfg.d).collect();
            axes.shuffle(rng);
            axes.iter()
                .take(n)
                .map(|&a| {
                    let mut v = vec![0.0; cfg.d];
                    v[a] = if gaussian(rng) < 0.0 { -1.0 } else { 1.0 };
                    v
                })
                .collect()
        }
        Basis::Rotated => {
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
            while basis.len() < n {
                let mut v: Vec<f64> = (0..cfg.d).map(|_| gaussian(rng)).collect();
                for b in &basis {
                    let p = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
                let nv = norm(&v);
                if nv > 1e-8 {
                    basis.push(v.iter().map(|x| x / nv).collect());
                }
            }
            basis
        }
    }
}

fn combine(terms: &[(f64, &[f64])], noise: f64, rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut x = vec![0.0; d];
    for (w, dir) in terms {
        x.iter_mut().zip(dir.iter()).for_each(|(a, b)| *a += w * b);
    }
    if noise > 0.0 {
        x.iter_mut().for_each(|a| *a += noise * gaussian(rng));
    }
    x
}

/// A few random planted directions with positive weights, plus noise.
fn mixture(cfg: &SynthConfig, dirs: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let picked = rand::seq::index::sample(rng, dirs.len(), cfg.mixture_active).into_vec();
    let terms: Vec<(f64, &[f64])> = picked
        .iter()
        .map(|&i| {
            let strength = if i < cfg.n_contents { cfg.content_strength } else { cfg.bias_strength };
            let w = rng.gen_range(0.5..1.5) * cfg.mixture_scale * strength;
            (w, dirs[i].as_slice())
        })
        .collect();
    combine(&terms, cfg.noise_std, rng, cfg.d)
}

/// Generates a corpus; bit-identical for a fixed configuration.
pub fn gen_synthetic_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d;
    let dirs = planted_directions(cfg, &mut rng);
    let (u, v) = dirs.split_at(cfg.n_contents);
    let (cs, bs, rho) = (cfg.content_strength, cfg.bias_strength, cfg.entanglement);

    let mut embeddings = Vec::new();
    let mut content_labels = Vec::new();
    let mut bias_labels = Vec::new();
    for c in 0..cfg.n_contents {
        for k in 0..cfg.n_bias_classes {
            let t = cfg.stereotype_content(k);
            for _ in 0..cfg.samples_per_cell {
                embeddings.push(combine(&[(cs, &u[c]), (bs, &v[k]), (rho, &u[t])], cfg.noise_std, &mut rng, d));
                content_labels.push(c);
                bias_labels.push(k);
            }
        }
    }

    let pn = cfg.prompt_noise_std;
    let query_terms = |c: usize| [(cs, u[c].as_slice()), (cfg.lean_strength(), v[cfg.lean_class(c)].as_slice())];
    let queries: Vec<Vec<f64>> = (0..cfg.n_contents)
        .map(|c| combine(&query_terms(c), pn, &mut rng, d))
        .collect();
    let mut paraphrases = Vec::new();
    let mut paraphrase_query = Vec::new();
    for c in 0..cfg.n_contents {
        for _ in 0..cfg.paraphrases_per_query {
            paraphrases.push(combine(&query_terms(c), pn, &mut rng, d));
            paraphrase_query.push(c);
        }
    }
    let gendered = (0..cfg.n_bias_classes)
        .map(|k| {
            (0..cfg.n_contents)
                .map(|c| combine(&[(cs, &u[c]), (bs, &v[k])], pn, &mut rng, d))
                .collect()
        })
        .collect();
    let bias_prompts = (0..cfg.n_bias_classes)
        .map(|k| {
            (0..cfg.prompts_per_class)
                .map(|_| combine(&[(bs, &v[k])], pn, &mut rng, d))
                .collect()
        })
        .collect();
    let diverse = (0..cfg.n_diverse).map(|_| mixture(cfg, &dirs, &mut rng)).collect();
    let pretrain = (0..cfg.n_pretrain).map(|_| mixture(cfg, &dirs, &mut rng)).collect();
    let class_prompts = (0..cfg.n_contents)
        .map(|c| combine(&[(cs, &u[c])], pn, &mut rng, d))
        .collect();

    Ok(SynthCorpus {
        config: cfg.clone(),
        recipe: cfg.recipe(),
        content_dirs: u.to_vec(),
        bias_dirs: v.to_vec(),
        embeddings,
        content_labels,
        bias_labels,
        queries,
        paraphrases,
        paraphrase_query,
        gendered,
        bias_prompts,
        diverse,
        pretrain,
        class_prompts,
    })
}

impl SynthCorpus {
    /// Noise-free cosine between a sample of cell `(c, k)` and `u_c`.
    pub fn analytic_content_cosine(&self, c: usize, k: usize) -> f64 {
        let cfg = &self.config;
        let (cs, bs, rho) = (cfg.content_strength, cfg.bias_strength, cfg.entanglement);
        let on_content = cfg.stereotype_content(k) == c;
        let along = cs + if on_content { rho } else { 0.0 };
        let off = if on_content { 0.0 } else { rho * rho };
        along / (along * along + bs * bs + off).sqrt()
    }

    /// Rows used to train an SAE.
    pub fn training_rows(&self) -> Vec<Vec<f64>> {
        self.pretrain.clone()
    }

    /// Writes every set with a manifest; returns the manifest.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| SemError::io(dir, e))?;
        let cfg = &self.config;
        let d = cfg.d;
        let save = |name: &str, rows: &[Vec<f64>]| write_embedding_matrix(&EmbeddingMatrix::from_rows(rows, d)?, dir.join(name));
        let table = |rows: Vec<(String, String)>| LabelTable {
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(index, (label, group))| LabelRow { index, label, group })
                .collect(),
        };
        let mut m = Manifest::new(dir);

        save("images.seme", &self.embeddings)?;
        write_labels(
            &table(
                self.content_labels
                    .iter()
                    .zip(&self.bias_labels)
                    .map(|(&c, &k)| (cfg.content_name(c), cfg.bias_name(k)))
                    .collect(),
            ),
            dir.join("images.csv"),
        )?;
        m.push(Role::Images, "images.seme", Some("images.csv"));

        save("queries.seme", &self.queries)?;
        write_labels(
            &table((0..cfg.n_contents).map(|c| (cfg.content_name(c), cfg.bias_name(cfg.lean_class(c)))).collect()),
            dir.join("queries.csv"),
        )?;
        m.push(Role::Queries, "queries.seme", Some("queries.csv"));

        save("paraphrases.seme", &self.paraphrases)?;
        write_labels(
            &table(self.paraphrase_query.iter().map(|&q| (q.to_string(), cfg.content_name(q))).collect()),
            dir.join("paraphrases.csv"),
        )?;
        m.push(Role::Paraphrases, "paraphrases.seme", Some("paraphrases.csv"));

        save("diverse.seme", &self.diverse)?;
        m.push(Role::Diverse, "diverse.seme", None);

        for k in 0..cfg.n_bias_classes {
            let name = cfg.bias_name(k);
            let file = format!("bias_{name}.seme");
            save(&file, &self.bias_prompts[k])?;
            m.push(Role::Bias { attribute: SYNTH_ATTRIBUTE.into(), class: name.clone() }, &file, None);
        }
        for k in 0..cfg.n_bias_classes {
            let name = cfg.bias_name(k);
            let file = format!("gendered_{name}.seme");
            save(&file, &self.gendered[k])?;
            m.push(Role::Gendered { attribute: SYNTH_ATTRIBUTE.into(), class: name }, &file, None);
        }

        save("classes.seme", &self.class_prompts)?;
        write_labels(
            &table((0..cfg.n_contents).map(|c| (cfg.content_name(c), String::new())).collect()),
            dir.join("classes.csv"),
        )?;
        m.push(Role::Classes, "classes.seme", Some("classes.csv"));

        save("train.seme", &self.training_rows())?;
        m.push(Role::Train, "train.seme", None);

        m.params.insert("k".into(), cfg.samples_per_cell.into());
        m.params.insert("seed".into(), cfg.seed.into());
        m.save(dir.join("manifest.json"))?;

        let truth = serde_json::json!({
            "config": cfg,
            "recipe": self.recipe,
            "content_dirs": self.content_dirs,
            "bias_dirs": self.bias_dirs,
        });
        write_atomic(
            &dir.join("ground_truth.json"),
            (serde_json::to_string_pretty(&truth).expect("ground truth serializes") + "\n").as_bytes(),
        )?;
        Ok(m)
    }
}

/// Random unit atoms and nonnegative sparse combinations of them.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDictionary {
    pub atoms: Vec<Vec<f64>>,
    pub samples: Vec<Vec<f64>>,
    /// `(atom, coefficient)` pairs behind each sample.
    pub codes: Vec<Vec<(usize, f64)>>,
}

/// `n` samples in `R^d`, each a sum of `active` distinct atoms (out of
/// `n_atoms` Gaussian-random unit vectors) with coefficients from `U(0.5, 1.5)`.
pub fn planted_dictionary(n: usize, d: usize, n_atoms: usize, active: usize, seed: u64) -> Result<PlantedDictionary> {
    if n == 0 || d == 0 || n_atoms == 0 {
        return Err(SemError::InvalidConfig("planted dictionary sizes must be positive".into()));
    }
    if active == 0 || active > n_atoms {
        return Err(SemError::InvalidConfig(format!("active atoms {active} outside 1..={n_atoms}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms: Vec<Vec<f64>> = (0..n_atoms)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
            let nv = norm(&v);
            if nv > 1e-8 {
                break v.iter().map(|x| x / nv).collect();
            }
        })
        .collect();
    let mut samples = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n);
    for _ in 0..n {
        let picked = rand::seq::index::sample(&mut rng, n_atoms, active).into_vec();
        let code: Vec<(usize, f64)> = picked.into_iter().map(|a| (a, rng.gen_range(0.5..1.5))).collect();
        let terms: Vec<(f64, &[f64])> = code.iter().map(|&(a, c)| (c, atoms[a].as_slice())).collect();
        samples.push(combine(&terms, 0.0, &mut rng, d));
        codes.push(code);
    }
    Ok(PlantedDictionary { atoms, samples, codes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cosine;

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = SynthConfig { seed: 17, ..SynthConfig::default() };
        assert_eq!(gen_synthetic_corpus(&cfg).unwrap(), gen_synthetic_corpus(&cfg).unwrap());
        let other = SynthConfig { seed: 18, ..cfg.clone() };
        assert_ne!(gen_synthetic_corpus(&cfg).unwrap().embeddings, gen_synthetic_corpus(&other).unwrap().embeddings);
    }

    #[test]
    fn cells_are_balanced_and_directions_orthonormal() {
        for basis in [Basis::Axis, Basis::Rotated] {
            let cfg = SynthConfig { n_bias_classes: 3, basis, ..SynthConfig::default() };
            let s = gen_synthetic_corpus(&cfg).unwrap();
            let mut counts = vec![vec![0; 3]; 8];
            for (&c, &k) in s.content_labels.iter().zip(&s.bias_labels) {
                counts[c][k] += 1;
            }
            assert!(counts.iter().flatten().all(|&n| n == 40));
            let dirs: Vec<&Vec<f64>> = s.content_dirs.iter().chain(&s.bias_dirs).collect();
            for (i, a) in dirs.iter().enumerate() {
                for (j, b) in dirs.iter().enumerate() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot(a, b) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn noise_free_samples_match_analytic_cosine() {
        for basis in [Basis::Axis, Basis::Rotated] {
            let cfg = SynthConfig {
                noise_std: 0.0,
                entanglement: 0.7,
                bias_strength: 0.6,
                basis,
                n_bias_classes: 3,
                ..SynthConfig::default()
            };
            let s = gen_synthetic_corpus(&cfg).unwrap();
            for (i, x) in s.embeddings.iter().enumerate() {
                let (c, k) = (s.content_labels[i], s.bias_labels[i]);
                let got = cosine(x, &s.content_dirs[c]).unwrap();
                assert!((got - s.analytic_content_cosine(c, k)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SynthConfig::default();
        for cfg in [
            SynthConfig { d: 9, ..base.clone() },
            SynthConfig { entanglement: 1.5, ..base.clone() },
            SynthConfig { content_strength: 0.0, ..base.clone() },
            SynthConfig { n_bias_classes: 1, ..base.clone() },
            SynthConfig { samples_per_cell: 0, ..base.clone() },
        ] {
            assert!(matches!(gen_synthetic_corpus(&cfg), Err(SemError::InvalidConfig(_))));
        }
    }

    #[test]
    fn writes_a_loadable_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { d: 16, n_contents: 3, samples_per_cell: 4, n_diverse: 10, ..SynthConfig::default() };
        let s = gen_synthetic_corpus(&cfg).unwrap();
        s.write_to_dir(dir.path()).unwrap();
        let m = Manifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.matrix(&Role::Images).unwrap().rows(), 24);
        let (attr, classes) = m.bias_classes(None).unwrap();
        assert_eq!(attr, SYNTH_ATTRIBUTE);
        assert_eq!(classes.len(), 2);
        assert_eq!(m.labels(&Role::Paraphrases).unwrap().len(), 3 * cfg.paraphrases_per_query);
    }

    #[test]
    fn planted_dictionary_samples_match_codes() {
        let pd = planted_dictionary(50, 8, 12, 3, 5).unwrap();
        assert!(pd.atoms.iter().all(|a| (norm(a) - 1.0).abs() < 1e-12));
        for (x, code) in pd.samples.iter().zip(&pd.codes) {
            assert_eq!(code.len(), 3);
            let mut y = vec![0.0; 8];
            for &(a, c) in code {
                assert!((0.5..1.5).contains(&c));
                y.iter_mut().zip(&pd.atoms[a]).for_each(|(v, u)| *v += c * u);
            }
            assert!(x.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-12));
        }
        assert_eq!(pd, planted_dictionary(50, 8, 12, 3, 5).unwrap());
        assert!(planted_dictionary(5, 8, 2, 3, 0).is_err());
    }
}

