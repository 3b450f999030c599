//! Linear probes (multinomial logistic regression) and the two-stage
//! disentanglement study.

use std::collections::VecDeque;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Result, SemError};

/// Assigns each item to one of `k` folds so that every class is spread as
/// evenly as possible. Classes are visited in ascending label order and each
/// continues the round-robin where the previous one stopped.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(SemError::InvalidArgument(format!("fold count must be at least 2, got {k}")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0usize; labels.len()];
    let mut offset = 0usize;
    for (class, m) in members.iter_mut().enumerate() {
        if m.is_empty() {
            continue;
        }
        if m.len() < k {
            return Err(SemError::InvalidArgument(format!(
                "class {class} has {} members, fewer than {k} folds",
                m.len()
            )));
        }
        m.shuffle(&mut rng);
        for (j, &i) in m.iter().enumerate() {
            folds[i] = (offset + j) % k;
        }
        offset += m.len();
    }
    Ok(folds)
}

/// Per-feature mean and standard deviation. Zero-variance features get std 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(SemError::EmptyInput("probe features"));
        }
        let f = features[0].len();
        let mut mean = vec![0.0; f];
        for x in features {
            ensure_len("probe features", f, x.len())?;
            ensure_finite("probe features", x)?;
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for x in features {
            for j in 0..f {
                var[j] += (x[j] - mean[j]).powi(2);
            }
        }
        let mut constant = vec![false; f];
        let std = var
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 * (1.0 + mean[j].abs()) {
                    s
                } else {
                    constant[j] = true;
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std, constant })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .zip(&self.constant)
            .map(|(((v, m), s), &c)| if c { 0.0 } else { (v - m) / s })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// L2 penalty on weights (not on the intercept); 0 disables it.
    pub l2: f64,
    pub memory: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            grad_tol: 1e-6,
            l2: 0.0,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// classes x features, in standardized feature space.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub standardizer: Standardizer,
    pub iterations: usize,
    pub final_loss: f64,
    pub grad_norm: f64,
}

impl ProbeModel {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let xs = self.standardizer.apply(x);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(&xs).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    /// Argmax class, ties to the lower index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let correct = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / labels.len().max(1) as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Standardized design matrix with a trailing column of ones.
pub(crate) struct Design {
    x: Array2<f64>,
    onehot: Array2<f64>,
    n_classes: usize,
    l2: f64,
}

impl Design {
    fn new(xs: &[Vec<f64>], labels: &[usize], n_classes: usize, l2: f64) -> Self {
        let n = xs.len();
        let f = xs[0].len();
        let mut x = Array2::<f64>::ones((n, f + 1));
        for (i, row) in xs.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                x[[i, j]] = *v;
            }
        }
        let mut onehot = Array2::<f64>::zeros((n, n_classes));
        for (i, &y) in labels.iter().enumerate() {
            onehot[[i, y]] = 1.0;
        }
        Self { x, onehot, n_classes, l2 }
    }

    fn n_params(&self) -> usize {
        self.n_classes * self.x.ncols()
    }

    /// Mean cross-entropy (+ L2) and its gradient; `theta` is classes x (features + 1).
    pub(crate) fn loss_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let cols = self.x.ncols();
        let w = Array2::from_shape_vec((self.n_classes, cols), theta.to_vec()).expect("theta shape");
        let logits = self.x.dot(&w.t());
        let n = self.x.nrows() as f64;
        let mut loss = 0.0;
        let mut resid = Array2::<f64>::zeros(logits.raw_dim());
        for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|l| (l - m).exp()).sum();
            let lse = m + z.ln();
            for c in 0..self.n_classes {
                let p = (row[c] - lse).exp();
                let y = self.onehot[[i, c]];
                resid[[i, c]] = p - y;
                if y > 0.0 {
                    loss += lse - row[c];
                }
            }
        }
        loss /= n;
        let mut grad = resid.t().dot(&self.x) / n;
        if self.l2 > 0.0 {
            for c in 0..self.n_classes {
                for j in 0..cols - 1 {
                    loss += 0.5 * self.l2 * w[[c, j]].powi(2);
                    grad[[c, j]] += self.l2 * w[[c, j]];
                }
            }
        }
        (loss, grad.into_raw_vec_and_offset().0)
    }
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct LbfgsResult {
    theta: Vec<f64>,
    loss: f64,
    grad_norm: f64,
    iterations: usize,
}

/// Limited-memory BFGS with a backtracking Armijo line search.
fn lbfgs(design: &Design, cfg: &ProbeConfig) -> LbfgsResult {
    let mut theta = vec![0.0; design.n_params()];
    let (mut loss, mut grad) = design.loss_grad(&theta);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let gnorm = dotv(&grad, &grad).sqrt();
        if gnorm <= cfg.grad_tol {
            break;
        }
        // Two-loop recursion.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dotv(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dotv(s, y) / dotv(y, y),
            None => 1.0 / gnorm.max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dotv(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dotv(&grad, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = grad.iter().map(|g| -g / gnorm.max(1.0)).collect();
            slope = dotv(&grad, &dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let (l, g) = design.loss_grad(&cand);
            if l.is_finite() && l <= loss + 1e-4 * step * slope {
                accepted = Some((cand, l, g));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((cand, l, g)) = accepted else { break };
        let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dotv(&s, &y);
        if sy > 1e-12 * dotv(&y, &y).sqrt() * dotv(&s, &s).sqrt() {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > cfg.memory {
                history.pop_front();
            }
        }
        let improvement = loss - l;
        theta = cand;
        loss = l;
        grad = g;
        if improvement <= f64::EPSILON * loss.abs().max(1e-300) && improvement >= 0.0 && step < 1e-12 {
            break;
        }
    }
    let grad_norm = dotv(&grad, &grad).sqrt();
    LbfgsResult {
        theta,
        loss,
        grad_norm,
        iterations,
    }
}

fn check_probe_inputs(features: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if features.is_empty() {
        return Err(SemError::EmptyInput("probe features"));
    }
    ensure_len("probe labels", features.len(), labels.len())?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(SemError::InvalidArgument("probe training needs at least 2 classes".into()));
    }
    Ok(n_classes)
}

/// Fits a multinomial logistic regression on internally standardized features.
pub fn train_logistic_probe(features: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeModel> {
    let n_classes = check_probe_inputs(features, labels)?;
    let standardizer = Standardizer::fit(features)?;
    let xs: Vec<Vec<f64>> = features.iter().map(|x| standardizer.apply(x)).collect();
    let design = Design::new(&xs, labels, n_classes, cfg.l2);
    let res = lbfgs(&design, cfg);
    if !res.loss.is_finite() {
        return Err(SemError::Numeric("probe loss became non-finite".into()));
    }
    let cols = xs[0].len() + 1;
    let mut weights = Vec::with_capacity(n_classes);
    let mut bias = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let row = &res.theta[c * cols..(c + 1) * cols];
        let mut w = row[..cols - 1].to_vec();
        for (wj, &constant) in w.iter_mut().zip(&standardizer.constant) {
            if constant {
                *wj = 0.0;
            }
        }
        weights.push(w);
        bias.push(row[cols - 1]);
    }
    Ok(ProbeModel {
        weights,
        bias,
        standardizer,
        iterations: res.iterations,
        final_loss: res.loss,
        grad_norm: res.grad_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementScore {
    pub raw: f64,
    pub clamped: f64,
}

/// `D = 1 - (acc_bp - chance) / (acc_b - chance)`. Undefined when the bias
/// probe does not beat chance.
pub fn disentanglement_score(acc_bp: f64, acc_b: f64, chance_b: f64) -> Result<DisentanglementScore> {
    for (name, v) in [("acc_bp", acc_bp), ("acc_b", acc_b), ("chance_b", chance_b)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(SemError::InvalidArgument(format!("{name}={v} outside [0, 1]")));
        }
    }
    if acc_b <= chance_b {
        return Err(SemError::Degenerate(format!(
            "bias probe accuracy {acc_b} does not exceed chance {chance_b}; D undefined"
        )));
    }
    let raw = 1.0 - (acc_bp - chance_b) / (acc_b - chance_b);
    Ok(DisentanglementScore {
        raw,
        clamped: raw.clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StageTwoProtocol {
    /// Fit the logit probe on training-fold logits, evaluate on test-fold logits.
    #[default]
    TrainFold,
    /// Fit and evaluate the logit probe on test-fold logits with inner
    /// stratified cross-validation.
    TestFold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stratification {
    /// Stratify by the joint (task, bias) cell.
    #[default]
    Joint,
    /// Stratify by task label only.
    Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub folds: usize,
    pub seed: u64,
    pub protocol: StageTwoProtocol,
    pub stratification: Stratification,
    /// Largest tolerated relative spread of bias-class counts within a task class.
    pub balance_tolerance: f64,
    pub probe: ProbeConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            protocol: StageTwoProtocol::default(),
            stratification: Stratification::default(),
            balance_tolerance: 0.05,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub balanced: bool,
    pub max_relative_spread: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_test: usize,
    pub acc_p: f64,
    pub acc_b: f64,
    pub acc_bp: f64,
    pub d: Option<DisentanglementScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub config: StudyConfig,
    pub n_samples: usize,
    pub n_task_classes: usize,
    pub n_bias_classes: usize,
    pub chance_b: f64,
    pub acc_p: f64,
    pub acc_b: f64,
    pub acc_bp: f64,
    pub d: Option<DisentanglementScore>,
    pub d_undefined_reason: Option<String>,
    pub balance: BalanceReport,
    pub folds: Vec<FoldReport>,
}

/// Checks that every task class holds the same number of samples per bias class.
pub fn balance_check(task: &[usize], bias: &[usize], tolerance: f64) -> BalanceReport {
    let nt = task.iter().max().map_or(0, |m| m + 1);
    let nb = bias.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; nb]; nt];
    for (&t, &b) in task.iter().zip(bias) {
        counts[t][b] += 1;
    }
    let mut spread: f64 = 0.0;
    for row in counts.iter().filter(|r| r.iter().any(|&c| c > 0)) {
        let max = *row.iter().max().unwrap_or(&0) as f64;
        let min = *row.iter().min().unwrap_or(&0) as f64;
        spread = spread.max((max - min) / max);
    }
    let balanced = spread <= tolerance;
    BalanceReport {
        balanced,
        max_relative_spread: spread,
        warning: (!balanced).then(|| {
            format!("bias classes are unbalanced within task classes (relative spread {spread:.3} > {tolerance})")
        }),
    }
}

fn subset<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

fn count_correct(model: &ProbeModel, xs: &[Vec<f64>], ys: &[usize]) -> usize {
    xs.iter().zip(ys).filter(|(x, &y)| model.predict(x) == y).count()
}

struct FoldCounts {
    n: usize,
    p: usize,
    b: usize,
    bp: usize,
}

fn run_fold(
    features: &[Vec<f64>],
    task: &[usize],
    bias: &[usize],
    folds: &[usize],
    fold: usize,
    cfg: &StudyConfig,
) -> Result<FoldCounts> {
    let (test, train): (Vec<usize>, Vec<usize>) = (0..features.len()).partition(|&i| folds[i] == fold);
    let x_train = subset(features, &train);
    let x_test = subset(features, &test);
    let (t_train, t_test) = (subset(task, &train), subset(task, &test));
    let (b_train, b_test) = (subset(bias, &train), subset(bias, &test));

    let p_task = train_logistic_probe(&x_train, &t_train, &cfg.probe)?;
    let p_bias = train_logistic_probe(&x_train, &b_train, &cfg.probe)?;
    let logits_test: Vec<Vec<f64>> = x_test.iter().map(|x| p_task.logits(x)).collect();

    let bp = match cfg.protocol {
        StageTwoProtocol::TrainFold => {
            let logits_train: Vec<Vec<f64>> = x_train.iter().map(|x| p_task.logits(x)).collect();
            let p_bp = train_logistic_probe(&logits_train, &b_train, &cfg.probe)?;
            count_correct(&p_bp, &logits_test, &b_test)
        }
        StageTwoProtocol::TestFold => {
            let inner = stratified_kfold(&b_test, cfg.folds, cfg.seed.wrapping_add(fold as u64 + 1))?;
            let mut correct = 0;
            for f in 0..cfg.folds {
                let (te, tr): (Vec<usize>, Vec<usize>) = (0..b_test.len()).partition(|&i| inner[i] == f);
                let p_bp = train_logistic_probe(&subset(&logits_test, &tr), &subset(&b_test, &tr), &cfg.probe)?;
                correct += count_correct(&p_bp, &subset(&logits_test, &te), &subset(&b_test, &te));
            }
            correct
        }
    };
    Ok(FoldCounts {
        n: test.len(),
        p: count_correct(&p_task, &x_test, &t_test),
        b: count_correct(&p_bias, &x_test, &b_test),
        bp,
    })
}

/// Two-stage probing study: task probe, bias probe, and a bias probe on the
/// task probe's logits, all under stratified k-fold cross-validation.
pub fn run_disentanglement_study(
    features: &[Vec<f64>],
    task_labels: &[usize],
    bias_labels: &[usize],
    cfg: &StudyConfig,
) -> Result<DisentanglementReport> {
    check_probe_inputs(features, task_labels)?;
    let n_bias = check_probe_inputs(features, bias_labels)?;
    let n_task = task_labels.iter().max().map_or(0, |m| m + 1);
    let balance = balance_check(task_labels, bias_labels, cfg.balance_tolerance);
    if let Some(w) = &balance.warning {
        log::warn!("{w}");
    }
    let strata: Vec<usize> = match cfg.stratification {
        Stratification::Joint => task_labels.iter().zip(bias_labels).map(|(&t, &b)| t * n_bias + b).collect(),
        Stratification::Task => task_labels.to_vec(),
    };
    let folds = stratified_kfold(&strata, cfg.folds, cfg.seed)?;
    let chance_b = 1.0 / n_bias as f64;

    let counts = (0..cfg.folds)
        .into_par_iter()
        .map(|f| run_fold(features, task_labels, bias_labels, &folds, f, cfg))
        .collect::<Result<Vec<_>>>()?;

    let fold_reports = counts
        .iter()
        .enumerate()
        .map(|(f, c)| {
            let n = c.n as f64;
            let (acc_p, acc_b, acc_bp) = (c.p as f64 / n, c.b as f64 / n, c.bp as f64 / n);
            FoldReport {
                fold: f,
                n_test: c.n,
                acc_p,
                acc_b,
                acc_bp,
                d: disentanglement_score(acc_bp, acc_b, chance_b).ok(),
            }
        })
        .collect();
    let n = features.len() as f64;
    let total = |get: fn(&FoldCounts) -> usize| counts.iter().map(get).sum::<usize>() as f64 / n;
    let (acc_p, acc_b, acc_bp) = (total(|c| c.p), total(|c| c.b), total(|c| c.bp));
    let (d, d_undefined_reason) = match disentanglement_score(acc_bp, acc_b, chance_b) {
        Ok(d) => (Some(d), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(DisentanglementReport {
        config: cfg.clone(),
        n_samples: features.len(),
        n_task_classes: n_task,
        n_bias_classes: n_bias,
        chance_b,
        acc_p,
        acc_b,
        acc_bp,
        d,
        d_undefined_reason,
        balance,
        folds: fold_reports,
    })
}
