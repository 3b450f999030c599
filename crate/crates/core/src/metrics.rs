//! Retrieval fairness metrics, zero-shot group metrics and the
//! content-preservation / bias-neutralization similarities.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Result, SemError};
use crate::linalg::{cosine, dot, normalized};

/// Additive smoothing for empty groups in KL and MaxSkew.
pub const SMOOTHING_EPS: f64 = 1e-10;

/// Embeddings with task labels and bias-group labels. Embeddings are stored
/// L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedEvalSet {
    embeddings: Vec<Vec<f64>>,
    task_labels: Vec<usize>,
    group_labels: Vec<usize>,
    task_names: Vec<String>,
    group_names: Vec<String>,
}

impl GroupedEvalSet {
    pub fn new(
        embeddings: Vec<Vec<f64>>,
        task_labels: Vec<usize>,
        group_labels: Vec<usize>,
        task_names: Vec<String>,
        group_names: Vec<String>,
    ) -> Result<Self> {
        let n = embeddings.len();
        ensure_len("task labels", n, task_labels.len())?;
        ensure_len("group labels", n, group_labels.len())?;
        if let Some(t) = task_labels.iter().find(|&&t| t >= task_names.len()) {
            return Err(SemError::InvalidArgument(format!("task label {t} out of range")));
        }
        if let Some(g) = group_labels.iter().find(|&&g| g >= group_names.len()) {
            return Err(SemError::InvalidArgument(format!("group label {g} out of range")));
        }
        let d = embeddings.first().map_or(0, Vec::len);
        let embeddings = embeddings
            .iter()
            .map(|e| {
                ensure_len("eval embedding", d, e.len())?;
                normalized(e)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embeddings,
            task_labels,
            group_labels,
            task_names,
            group_names,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn task_labels(&self) -> &[usize] {
        &self.task_labels
    }

    pub fn group_labels(&self) -> &[usize] {
        &self.group_labels
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    /// Group proportions over the whole set.
    pub fn group_proportions(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_groups()];
        for &g in &self.group_labels {
            counts[g] += 1.0;
        }
        let n = self.len().max(1) as f64;
        counts.iter().map(|c| c / n).collect()
    }
}

/// Indices of the `k` highest cosine similarities, ties to the lower index.
pub fn topk_retrieve(query: &[f64], set: &GroupedEvalSet, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > set.len() {
        return Err(SemError::InvalidArgument(format!("k={k} outside 1..={}", set.len())));
    }
    let q = normalized(query)?;
    let scores: Vec<f64> = set
        .embeddings
        .iter()
        .map(|e| {
            ensure_len("retrieval query", e.len(), q.len())?;
            Ok(dot(&q, e))
        })
        .collect::<Result<_>>()?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "proportions")]
pub enum Desired {
    Uniform,
    Pool(Vec<f64>),
}

impl Desired {
    pub fn mode(&self) -> &'static str {
        match self {
            Desired::Uniform => "uniform",
            Desired::Pool(_) => "pool",
        }
    }

    fn resolve(&self, n_groups: usize) -> Result<Vec<f64>> {
        match self {
            Desired::Uniform => Ok(vec![1.0 / n_groups as f64; n_groups]),
            Desired::Pool(p) => {
                ensure_len("desired distribution", n_groups, p.len())?;
                if p.iter().any(|&x| !(x > 0.0)) {
                    return Err(SemError::InvalidArgument("desired proportions must be positive".into()));
                }
                Ok(p.clone())
            }
        }
    }
}

fn group_proportions(groups: &[usize], n_groups: usize, desired: &Desired) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_groups < 2 {
        return Err(SemError::InvalidArgument("fairness metrics need at least 2 groups".into()));
    }
    if groups.is_empty() {
        return Err(SemError::EmptyInput("retrieved labels"));
    }
    let mut counts = vec![0usize; n_groups];
    for &g in groups {
        *counts
            .get_mut(g)
            .ok_or_else(|| SemError::InvalidArgument(format!("group {g} out of range")))? += 1;
    }
    let k = groups.len() as f64;
    let p = counts.iter().map(|&c| c as f64 / k + SMOOTHING_EPS).collect();
    Ok((p, desired.resolve(n_groups)?))
}

/// `KL(p || q)` between the (smoothed) top-k group proportions and the desired distribution.
pub fn kl_at_k(groups: &[usize], n_groups: usize, desired: &Desired) -> Result<f64> {
    let (p, q) = group_proportions(groups, n_groups, desired)?;
    Ok(p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum::<f64>().max(0.0))
}

/// `max_c ln(p_c / q_c)` with the same smoothing.
pub fn maxskew_at_k(groups: &[usize], n_groups: usize, desired: &Desired) -> Result<f64> {
    let (p, q) = group_proportions(groups, n_groups, desired)?;
    Ok(p.iter()
        .zip(&q)
        .map(|(pi, qi)| (pi / qi).ln())
        .fold(f64::NEG_INFINITY, f64::max))
}

pub fn precision_at_k(labels: &[usize], target: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(SemError::EmptyInput("retrieved labels"));
    }
    Ok(labels.iter().filter(|&&l| l == target).count() as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub desired: Desired,
    pub kl_at_k: f64,
    pub maxskew_at_k: f64,
    pub precision_at_k: Option<f64>,
}

/// Retrieval metrics for one query. Precision is computed when `target_task` is given.
pub fn evaluate_retrieval(
    query: &[f64],
    set: &GroupedEvalSet,
    k: usize,
    desired: &Desired,
    target_task: Option<usize>,
) -> Result<RetrievalReport> {
    let idx = topk_retrieve(query, set, k)?;
    let groups: Vec<usize> = idx.iter().map(|&i| set.group_labels[i]).collect();
    let precision = match target_task {
        Some(t) => Some(precision_at_k(
            &idx.iter().map(|&i| set.task_labels[i]).collect::<Vec<_>>(),
            t,
        )?),
        None => None,
    };
    Ok(RetrievalReport {
        k,
        desired: desired.clone(),
        kl_at_k: kl_at_k(&groups, set.n_groups(), desired)?,
        maxskew_at_k: maxskew_at_k(&groups, set.n_groups(), desired)?,
        precision_at_k: precision,
    })
}

/// Argmax cosine over class embeddings per image; ties to the lower class index.
pub fn zeroshot_classify(set: &GroupedEvalSet, class_embeddings: &[Vec<f64>]) -> Result<Vec<usize>> {
    if class_embeddings.len() < 2 {
        return Err(SemError::InvalidArgument("zero-shot classification needs at least 2 classes".into()));
    }
    let classes = class_embeddings
        .iter()
        .map(|c| normalized(c))
        .collect::<Result<Vec<_>>>()?;
    set.embeddings
        .iter()
        .map(|e| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (c, emb) in classes.iter().enumerate() {
                ensure_len("class embedding", e.len(), emb.len())?;
                let s = dot(e, emb);
                if s > best.1 {
                    best = (c, s);
                }
            }
            Ok(best.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    pub task: usize,
    pub group: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetricsReport {
    pub accuracy: f64,
    pub worst_group_accuracy: f64,
    pub gap: f64,
    pub cells: Vec<CellAccuracy>,
    /// (task, group) pairs with no samples; excluded from the worst group.
    pub empty_cells: Vec<(usize, usize)>,
}

/// Overall accuracy, worst (task x group) cell accuracy and their gap.
pub fn group_metrics(predictions: &[usize], tasks: &[usize], groups: &[usize], n_tasks: usize, n_groups: usize) -> Result<GroupMetricsReport> {
    ensure_len("predictions", tasks.len(), predictions.len())?;
    ensure_len("group labels", tasks.len(), groups.len())?;
    if predictions.is_empty() {
        return Err(SemError::EmptyInput("predictions"));
    }
    let mut count = vec![vec![0usize; n_groups]; n_tasks];
    let mut correct = vec![vec![0usize; n_groups]; n_tasks];
    for ((&p, &t), &g) in predictions.iter().zip(tasks).zip(groups) {
        if t >= n_tasks || g >= n_groups {
            return Err(SemError::InvalidArgument(format!("label ({t}, {g}) out of range")));
        }
        count[t][g] += 1;
        correct[t][g] += usize::from(p == t);
    }
    let total_correct: usize = correct.iter().flatten().sum();
    let accuracy = total_correct as f64 / predictions.len() as f64;
    let mut cells = Vec::new();
    let mut empty_cells = Vec::new();
    for t in 0..n_tasks {
        for g in 0..n_groups {
            if count[t][g] == 0 {
                empty_cells.push((t, g));
            } else {
                cells.push(CellAccuracy {
                    task: t,
                    group: g,
                    count: count[t][g],
                    correct: correct[t][g],
                    accuracy: correct[t][g] as f64 / count[t][g] as f64,
                });
            }
        }
    }
    let worst = cells.iter().map(|c| c.accuracy).fold(f64::INFINITY, f64::min);
    Ok(GroupMetricsReport {
        accuracy,
        worst_group_accuracy: worst,
        gap: accuracy - worst,
        cells,
        empty_cells,
    })
}

pub fn group_metrics_for_set(predictions: &[usize], set: &GroupedEvalSet) -> Result<GroupMetricsReport> {
    group_metrics(predictions, &set.task_labels, &set.group_labels, set.task_names.len(), set.n_groups())
}

/// Mean cosine between each gendered embedding and the neutral embedding of
/// the same concept. `gendered[g][p]` pairs with `neutral[p]`.
pub fn content_preservation(gendered: &[Vec<Vec<f64>>], neutral: &[Vec<f64>]) -> Result<f64> {
    if gendered.is_empty() || neutral.is_empty() {
        return Err(SemError::EmptyInput("content preservation inputs"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for group in gendered {
        ensure_len("gendered embeddings", neutral.len(), group.len())?;
        for (g, z) in group.iter().zip(neutral) {
            total += cosine(g, z)?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Mean cosine between paired embeddings of two opposite bias classes.
pub fn bias_neutralization(first: &[Vec<f64>], second: &[Vec<f64>]) -> Result<f64> {
    ensure_len("paired embeddings", first.len(), second.len())?;
    if first.is_empty() {
        return Err(SemError::EmptyInput("bias neutralization inputs"));
    }
    let mut total = 0.0;
    for (a, b) in first.iter().zip(second) {
        total += cosine(a, b)?;
    }
    Ok(total / first.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_from(embs: Vec<Vec<f64>>, groups: Vec<usize>) -> GroupedEvalSet {
        let n = embs.len();
        GroupedEvalSet::new(embs, vec![0; n], groups, vec!["t".into()], vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn kl_and_maxskew_examples() {
        let u = Desired::Uniform;
        assert!(kl_at_k(&[0, 1, 0, 1], 2, &u).unwrap() < 1e-9);
        assert!((kl_at_k(&[1, 1, 1], 2, &u).unwrap() - 2f64.ln()).abs() < 1e-6);
        assert!((maxskew_at_k(&[1, 1, 1], 2, &u).unwrap() - 2f64.ln()).abs() < 1e-6);
        assert!(maxskew_at_k(&[0, 1], 2, &u).unwrap() < 1e-9);
        assert!(kl_at_k(&[0, 0], 1, &u).is_err());
        let pool = Desired::Pool(vec![0.75, 0.25]);
        assert!(kl_at_k(&[0, 0, 0, 1], 2, &pool).unwrap() < 1e-9);
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&[1, 1], 1).unwrap(), 1.0);
        assert_eq!(precision_at_k(&[0, 2], 1).unwrap(), 0.0);
        assert_eq!(precision_at_k(&[1, 1, 0, 1, 2], 1).unwrap(), 0.6);
    }

    #[test]
    fn retrieval_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let embs: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let set = set_from(embs.clone(), vec![0; 20]);
        let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = topk_retrieve(&q, &set, 5).unwrap();
        let mut scored: Vec<(f64, usize)> = embs.iter().enumerate().map(|(i, e)| (cosine(&q, e).unwrap(), i)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(got, scored.iter().take(5).map(|s| s.1).collect::<Vec<_>>());
        assert_eq!(topk_retrieve(&q, &set, 20).unwrap(), scored.iter().map(|s| s.1).collect::<Vec<_>>());
        assert_eq!(topk_retrieve(&embs[7], &set, 1).unwrap(), vec![7]);
        assert!(topk_retrieve(&[0.0; 4], &set, 1).is_err());
    }

    #[test]
    fn zeroshot_examples() {
        let classes = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let set = set_from(vec![vec![0.0, 2.0], vec![1.0, 1.0], vec![3.0, 0.1]], vec![0, 1, 0]);
        assert_eq!(zeroshot_classify(&set, &classes).unwrap(), vec![1, 0, 0]);
        assert!(zeroshot_classify(&set, &classes[..1]).is_err());
    }

    #[test]
    fn zeroshot_matches_similarity_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let embs: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let classes: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let set = set_from(embs.clone(), vec![0; 10]);
        let got = zeroshot_classify(&set, &classes).unwrap();
        for (i, e) in embs.iter().enumerate() {
            let s0 = cosine(e, &classes[0]).unwrap();
            let s1 = cosine(e, &classes[1]).unwrap();
            assert_eq!(got[i], if s1 > s0 { 1 } else { 0 });
        }
    }

    #[test]
    fn group_metrics_all_correct_and_empty_cells() {
        let r = group_metrics(&[0, 1, 0], &[0, 1, 0], &[0, 0, 1], 2, 2).unwrap();
        assert_eq!((r.accuracy, r.worst_group_accuracy, r.gap), (1.0, 1.0, 0.0));
        assert_eq!(r.empty_cells, vec![(1, 1)]);
        let r = group_metrics(&[0, 0, 0, 1], &[0, 1, 0, 1], &[0, 0, 1, 1], 2, 2).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.worst_group_accuracy, 0.0);
        assert_eq!(r.gap, 0.75);
    }

    #[test]
    fn similarity_metrics() {
        let neutral = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((content_preservation(&[neutral.clone(), neutral.clone()], &neutral).unwrap() - 1.0).abs() < 1e-12);
        let ortho = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(content_preservation(std::slice::from_ref(&ortho), &neutral).unwrap(), 0.0);
        assert!((bias_neutralization(&neutral, &neutral).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bias_neutralization(&neutral, &ortho).unwrap(), 0.0);
    }
}
