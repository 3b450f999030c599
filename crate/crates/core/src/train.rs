//! Matryoshka SAE trainer: reverse-weighted reconstruction loss at nested
//! TopK granularities, AdamW updates and a constant-then-linear-decay schedule.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Result, SemError};
use crate::sae::{init_sae, topk_indices, CenterInit, SaeWeights};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    /// Strictly increasing TopK counts.
    pub granularities: Vec<usize>,
    /// One positive weight per granularity, summing to 1.
    pub reverse_weights: Vec<f64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Fraction of steps held at the base learning rate before linear decay.
    pub warm_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub center_init: CenterInit,
    /// Validation MSE is logged every this many steps (and at the last step).
    pub eval_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: granularities `{s/4, s/2}` with `1/g` reverse weights.
    pub fn desk(latent_dim: usize, total_steps: usize, seed: u64) -> Self {
        let granularities = vec![(latent_dim / 4).max(1), (latent_dim / 2).max(2)];
        Self {
            latent_dim,
            reverse_weights: reverse_weights(&granularities),
            granularities,
            learning_rate: 1e-4,
            batch_size: 2048,
            total_steps,
            warm_fraction: 0.8,
            weight_decay: 0.0,
            seed,
            center_init: CenterInit::GeometricMedian,
            eval_every: 100,
        }
    }

    pub fn with_granularities(mut self, granularities: Vec<usize>) -> Self {
        self.reverse_weights = reverse_weights(&granularities);
        self.granularities = granularities;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SemError::InvalidConfig(m));
        if self.granularities.is_empty() {
            return bad("at least one granularity is required".into());
        }
        if self.granularities.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("granularities must be strictly increasing: {:?}", self.granularities));
        }
        if self.granularities[0] == 0 || *self.granularities.last().unwrap() > self.latent_dim {
            return bad(format!(
                "granularities {:?} must lie in 1..={}",
                self.granularities, self.latent_dim
            ));
        }
        if self.reverse_weights.len() != self.granularities.len() {
            return bad("one reverse weight per granularity is required".into());
        }
        let sum: f64 = self.reverse_weights.iter().sum();
        if self.reverse_weights.iter().any(|w| !(*w > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("reverse weights must be positive and sum to 1 (sum {sum})"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.warm_fraction) {
            return bad("warm_fraction must lie in [0, 1]".into());
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.eval_every == 0 {
            return bad("batch_size, total_steps and eval_every must be positive".into());
        }
        Ok(())
    }
}

/// `w_i ∝ 1/g_i`, normalized to sum to 1.
pub fn reverse_weights(granularities: &[usize]) -> Vec<f64> {
    let inv: Vec<f64> = granularities.iter().map(|&g| 1.0 / g as f64).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeGradients {
    pub encoder: Array2<f64>,
    pub decoder: Array2<f64>,
    pub centering_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub mse_per_granularity: Vec<f64>,
    /// Largest nonzero count over the batch rows, per granularity.
    pub max_active: Vec<usize>,
    pub gradients: SaeGradients,
}

fn batch_matrix(batch: &[Vec<f64>], d: usize) -> Result<Array2<f64>> {
    if batch.is_empty() {
        return Err(SemError::EmptyInput("training batch"));
    }
    let mut z = Array2::zeros((batch.len(), d));
    for (mut row, e) in z.rows_mut().into_iter().zip(batch) {
        ensure_len("training embedding", d, e.len())?;
        row.assign(&ndarray::ArrayView1::from(e.as_slice()));
    }
    Ok(z)
}

/// Reconstruction MSE averaged over batch rows and coordinates, summed over
/// granularities with the given weights. Gradients flow through the fixed
/// TopK support of each granularity.
pub fn matryoshka_loss(
    batch: &[Vec<f64>],
    w: &SaeWeights,
    granularities: &[usize],
    weights: &[f64],
) -> Result<LossOutput> {
    let (d, s) = (w.input_dim(), w.latent_dim());
    ensure_len("reverse weights", granularities.len(), weights.len())?;
    if let Some(&g) = granularities.iter().find(|&&g| g == 0 || g > s) {
        return Err(SemError::InvalidArgument(format!("granularity {g} outside 1..={s}")));
    }
    let z = batch_matrix(batch, d)?;
    let n = z.nrows();
    let x = &z - &w.centering_bias().view().insert_axis(Axis(0));
    let pre = x.dot(&w.encoder().t());
    let act = pre.mapv(|v| v.max(0.0));

    let scale = 1.0 / (n * d) as f64;
    let mut loss = 0.0;
    let mut mses = Vec::with_capacity(granularities.len());
    let mut max_active = Vec::with_capacity(granularities.len());
    let mut g_dec = Array2::<f64>::zeros((d, s));
    let mut g_bias = Array1::<f64>::zeros(d);
    let mut d_pre = Array2::<f64>::zeros((n, s));

    for (&g, &rw) in granularities.iter().zip(weights) {
        let mut h = Array2::<f64>::zeros((n, s));
        let mut most = 0;
        for (row_act, mut row_h) in act.rows().into_iter().zip(h.rows_mut()) {
            let vals = row_act.to_vec();
            let mut count = 0;
            for i in topk_indices(&vals, g) {
                if vals[i] > 0.0 {
                    row_h[i] = vals[i];
                    count += 1;
                }
            }
            most = most.max(count);
        }
        let recon = h.dot(&w.decoder().t()) + w.centering_bias().view().insert_axis(Axis(0));
        let err = recon - &z;
        let mse = err.iter().map(|e| e * e).sum::<f64>() * scale;
        loss += rw * mse;
        mses.push(mse);
        max_active.push(most);

        let g_recon = err * (2.0 * rw * scale);
        g_dec = g_dec + g_recon.t().dot(&h);
        g_bias = g_bias + g_recon.sum_axis(Axis(0));
        let mut d_h = g_recon.dot(w.decoder());
        ndarray::Zip::from(&mut d_h).and(&h).for_each(|dh, &hv| {
            if hv == 0.0 {
                *dh = 0.0;
            }
        });
        d_pre = d_pre + d_h;
    }
    let g_enc = d_pre.t().dot(&x);
    g_bias = g_bias - d_pre.dot(w.encoder()).sum_axis(Axis(0));

    Ok(LossOutput {
        loss,
        mse_per_granularity: mses,
        max_active,
        gradients: SaeGradients {
            encoder: g_enc,
            decoder: g_dec,
            centering_bias: g_bias,
        },
    })
}

/// Per-granularity reconstruction MSE without gradients.
pub fn reconstruction_mse(data: &[Vec<f64>], w: &SaeWeights, granularities: &[usize]) -> Result<Vec<f64>> {
    let ones = vec![1.0; granularities.len()];
    Ok(matryoshka_loss(data, w, granularities, &ones)?.mse_per_granularity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One AdamW update over a flat parameter slice. `step` is the 1-based
/// step number after incrementing.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    weight_decay: f64,
    hyper: &AdamHyper,
) {
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= lr * weight_decay * params[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: [Vec<f64>; 3],
    v: [Vec<f64>; 3],
    step: u64,
}

impl OptimizerState {
    pub fn new(w: &SaeWeights) -> Self {
        let sizes = [w.encoder().len(), w.decoder().len(), w.centering_bias().len()];
        Self {
            m: sizes.map(|n| vec![0.0; n]),
            v: sizes.map(|n| vec![0.0; n]),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn write_back(a: &mut Array2<f64>, vals: &[f64]) {
    a.iter_mut().zip(vals).for_each(|(x, v)| *x = *v);
}

/// AdamW with decoupled weight decay on the encoder and decoder matrices.
/// The centering bias is not decayed.
pub fn adamw_step(
    w: &mut SaeWeights,
    grads: &SaeGradients,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(SemError::InvalidArgument(format!("learning rate {lr} must be >= 0")));
    }
    ensure_len("encoder gradient", w.encoder().len(), grads.encoder.len())?;
    ensure_len("decoder gradient", w.decoder().len(), grads.decoder.len())?;
    ensure_len("bias gradient", w.centering_bias().len(), grads.centering_bias.len())?;
    let all_finite = grads
        .encoder
        .iter()
        .chain(grads.decoder.iter())
        .chain(grads.centering_bias.iter())
        .all(|g| g.is_finite());
    if !all_finite {
        return Err(SemError::NonFinite("gradients"));
    }
    state.step += 1;
    let hyper = AdamHyper::default();
    let (enc, dec, bias) = w.parts_mut();

    let mut p = flat(enc);
    adamw_update(&mut p, &flat(&grads.encoder), &mut state.m[0], &mut state.v[0], state.step, lr, weight_decay, &hyper);
    write_back(enc, &p);

    let mut p = flat(dec);
    adamw_update(&mut p, &flat(&grads.decoder), &mut state.m[1], &mut state.v[1], state.step, lr, weight_decay, &hyper);
    write_back(dec, &p);

    let mut p = bias.to_vec();
    adamw_update(&mut p, &grads.centering_bias.to_vec(), &mut state.m[2], &mut state.v[2], state.step, lr, 0.0, &hyper);
    bias.iter_mut().zip(&p).for_each(|(x, v)| *x = *v);
    Ok(())
}

/// Base rate for `step < warm_fraction * total_steps`, then linear to 0 at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps as f64;
    let warm_end = cfg.warm_fraction * total;
    let s = step.min(cfg.total_steps) as f64;
    if s < warm_end {
        cfg.learning_rate
    } else if total > warm_end {
        cfg.learning_rate * (total - s) / (total - warm_end)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub max_active_per_granularity: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_mse_per_granularity: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub train_size: usize,
    pub validation_size: usize,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn final_validation_mse(&self) -> Option<&[f64]> {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.val_mse_per_granularity.as_deref())
    }
}

/// Trains an SAE on `corpus` with a fixed-seed 90/10 train/validation split.
pub fn train_msae(corpus: &[Vec<f64>], cfg: &TrainConfig) -> Result<(SaeWeights, TrainLog)> {
    cfg.validate()?;
    let d = corpus.first().ok_or(SemError::EmptyInput("training corpus"))?.len();
    if cfg.latent_dim <= d {
        return Err(SemError::InvalidConfig(format!(
            "latent_dim {} must exceed input dimension {d}",
            cfg.latent_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if corpus.len() >= 2 { (corpus.len() / 10).max(1) } else { 0 };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<Vec<f64>> = train_idx.iter().map(|&i| corpus[i].clone()).collect();
    let val: Vec<Vec<f64>> = val_idx.iter().map(|&i| corpus[i].clone()).collect();

    let mut w = init_sae(d, cfg.latent_dim, cfg.seed, &train, cfg.center_init)?;
    let mut state = OptimizerState::new(&w);
    let batch = cfg.batch_size.min(train.len());
    let mut log = TrainLog {
        records: Vec::with_capacity(cfg.total_steps),
        train_size: train.len(),
        validation_size: val.len(),
    };

    let mut perm: Vec<usize> = (0..train.len()).collect();
    let mut cursor = perm.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(batch);
    for step in 0..cfg.total_steps {
        rows.clear();
        while rows.len() < batch {
            if cursor == perm.len() {
                perm.shuffle(&mut rng);
                cursor = 0;
            }
            rows.push(train[perm[cursor]].clone());
            cursor += 1;
        }
        let lr = lr_schedule(step, cfg);
        let out = matryoshka_loss(&rows, &w, &cfg.granularities, &cfg.reverse_weights)?;
        if !out.loss.is_finite() {
            return Err(SemError::Numeric(format!("non-finite loss at step {step}")));
        }
        adamw_step(&mut w, &out.gradients, &mut state, lr, cfg.weight_decay)
            .map_err(|e| SemError::Numeric(format!("step {step}: {e}")))?;

        let last = step + 1 == cfg.total_steps;
        let val_mse = if !val.is_empty() && ((step + 1) % cfg.eval_every == 0 || last) {
            Some(reconstruction_mse(&val, &w, &cfg.granularities)?)
        } else {
            None
        };
        log.records.push(TrainRecord {
            step,
            lr,
            loss: out.loss,
            max_active_per_granularity: out.max_active,
            val_mse_per_granularity: val_mse,
        });
    }
    Ok((w.round_to_f32(), log))
}
