//! Trains united experts to stand in for groups of original experts.
//!
//! A united expert is a single FFN fitted so its output is close to *every*
//! group member's output on the same inputs — the training target is the
//! average of the per-member squared errors, so the best any united expert
//! can do is the per-token variance of the member outputs around their mean.
//! Training is plain full- or mini-batch gradient descent with a fixed
//! learning rate; the returned expert is the best checkpoint seen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::moe::{expert_forward, ExpertFfn, HiddenVector, MoeError, MoeLayer};

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("distillation group is empty")]
    EmptyGroup,
    #[error("no training tokens supplied")]
    EmptyTokens,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Moe(#[from] MoeError),
}

/// Gradient-descent settings. `batch_size` of zero means full batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 1000,
            batch_size: 0,
            seed: 0,
        }
    }
}

/// Outcome of training one group's united expert.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillReport {
    pub group_id: usize,
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Variance floor: no united expert can score below this on these tokens.
    pub lower_bound: f64,
    /// `(epoch, loss)` pairs; epoch 0 is the untrained copy.
    pub loss_curve: Vec<(usize, f64)>,
}

fn validate_inputs(
    members: &[&ExpertFfn],
    tokens: &[HiddenVector],
) -> Result<(usize, usize), DistillError> {
    let first = *members.first().ok_or(DistillError::EmptyGroup)?;
    if tokens.is_empty() {
        return Err(DistillError::EmptyTokens);
    }
    for m in members {
        if m.d != first.d || m.h != first.h {
            return Err(DistillError::Parameter(
                "group members must share dimensions".into(),
            ));
        }
    }
    for x in tokens {
        if x.len() != first.d {
            return Err(DistillError::Parameter(format!(
                "token dim {} does not match expert dim {}",
                x.len(),
                first.d
            )));
        }
    }
    Ok((first.d, first.h))
}

/// Mean over members of the per-token mean squared error between the united
/// expert's outputs and that member's outputs.
pub fn group_loss(
    united: &ExpertFfn,
    members: &[&ExpertFfn],
    tokens: &[HiddenVector],
) -> Result<f64, DistillError> {
    validate_inputs(members, tokens)?;
    if united.d != members[0].d || united.h != members[0].h {
        return Err(DistillError::Parameter(
            "united expert dims must match the group".into(),
        ));
    }
    let k = members.len() as f64;
    let n = tokens.len() as f64;
    let mut total = 0.0;
    for x in tokens {
        let y = expert_forward(united, x)?;
        for m in members {
            let t = expert_forward(m, x)?;
            total += y
                .iter()
                .zip(&t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(total / (k * n))
}

/// The floor for [`group_loss`]: per-token variance of member outputs around
/// their mean, averaged over tokens. Independent of the united expert.
pub fn group_loss_lower_bound(
    members: &[&ExpertFfn],
    tokens: &[HiddenVector],
) -> Result<f64, DistillError> {
    let (d, _) = validate_inputs(members, tokens)?;
    let k = members.len() as f64;
    let n = tokens.len() as f64;
    let mut total = 0.0;
    for x in tokens {
        let outs: Vec<HiddenVector> = members
            .iter()
            .map(|m| expert_forward(m, x))
            .collect::<Result<_, _>>()?;
        let mut mean = vec![0.0; d];
        for o in &outs {
            for (acc, v) in mean.iter_mut().zip(o) {
                *acc += v / k;
            }
        }
        for o in &outs {
            total += mean
                .iter()
                .zip(o)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(total / (k * n))
}

/// Analytic gradient of [`group_loss`] with respect to the united expert's
/// up and down weights, returned as flat row-major arrays.
pub fn group_loss_gradient(
    united: &ExpertFfn,
    members: &[&ExpertFfn],
    tokens: &[HiddenVector],
) -> Result<(Vec<f64>, Vec<f64>), DistillError> {
    let (d, h) = validate_inputs(members, tokens)?;
    let k = members.len() as f64;
    let n = tokens.len() as f64;
    let mut grad_up = vec![0.0; d * h];
    let mut grad_down = vec![0.0; h * d];
    for x in tokens {
        // Forward with the pre-activation kept for the backward pass.
        let a = united.preactivation(x)?;
        let z: Vec<f64> = a.iter().map(|&v| united.activation.apply(v)).collect();
        let mut y = vec![0.0; d];
        for (j, &zj) in z.iter().enumerate() {
            for (c, &w) in united.down[j * d..(j + 1) * d].iter().enumerate() {
                y[c] += zj * w;
            }
        }
        // d(loss)/dy only sees the mean teacher: errors against each member
        // average into a single pull toward the member mean.
        let mut g_y = vec![0.0; d];
        for m in members {
            let t = expert_forward(m, x)?;
            for (g, (yc, tc)) in g_y.iter_mut().zip(y.iter().zip(&t)) {
                *g += 2.0 * (yc - tc) / (k * n);
            }
        }
        for (j, &zj) in z.iter().enumerate() {
            for (c, &g) in g_y.iter().enumerate() {
                grad_down[j * d + c] += zj * g;
            }
        }
        let mut g_a = vec![0.0; h];
        for (j, ga) in g_a.iter_mut().enumerate() {
            let mut g_z = 0.0;
            for (c, &g) in g_y.iter().enumerate() {
                g_z += g * united.down[j * d + c];
            }
            *ga = g_z * united.activation.derivative(a[j]);
        }
        for (i, &xi) in x.iter().enumerate() {
            for (j, &ga) in g_a.iter().enumerate() {
                grad_up[i * h + j] += xi * ga;
            }
        }
    }
    Ok((grad_up, grad_down))
}

/// Trains a united expert for one group, starting from a copy of the first
/// member. Returns the best checkpoint and the training report.
pub fn distill_group(
    group_id: usize,
    members: &[&ExpertFfn],
    tokens: &[HiddenVector],
    cfg: &DistillConfig,
) -> Result<(ExpertFfn, DistillReport), DistillError> {
    validate_inputs(members, tokens)?;
    if !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(DistillError::Parameter(format!("lr {} must be > 0", cfg.lr)));
    }
    let n = tokens.len();
    let chunk = if cfg.batch_size == 0 {
        n
    } else {
        cfg.batch_size.min(n)
    };

    let mut united = members[0].clone();
    let initial_loss = group_loss(&united, members, tokens)?;
    let lower_bound = group_loss_lower_bound(members, tokens)?;
    let mut best = united.clone();
    let mut best_loss = initial_loss;
    let mut curve = vec![(0usize, initial_loss)];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch_ids in order.chunks(chunk) {
            let batch: Vec<HiddenVector> =
                batch_ids.iter().map(|&i| tokens[i].clone()).collect();
            let (g_up, g_down) = group_loss_gradient(&united, members, &batch)?;
            for (w, g) in united.up.iter_mut().zip(&g_up) {
                *w -= cfg.lr * g;
            }
            for (w, g) in united.down.iter_mut().zip(&g_down) {
                *w -= cfg.lr * g;
            }
        }
        let loss = group_loss(&united, members, tokens)?;
        if !loss.is_finite() {
            return Err(DistillError::Diverged { epoch });
        }
        curve.push((epoch + 1, loss));
        if loss < best_loss {
            best_loss = loss;
            best = united.clone();
        }
    }

    Ok((
        best,
        DistillReport {
            group_id,
            epochs_run: cfg.epochs,
            initial_loss,
            final_loss: best_loss,
            lower_bound,
            loss_curve: curve,
        },
    ))
}

/// Distills every united group of `layer` on the same token set and returns
/// the layer with its united bank replaced.
pub fn distill_layer(
    layer: &MoeLayer,
    tokens: &[HiddenVector],
    cfg: &DistillConfig,
) -> Result<(MoeLayer, Vec<DistillReport>), DistillError> {
    let mut united = Vec::with_capacity(layer.united_group_count());
    let mut reports = Vec::with_capacity(layer.united_group_count());
    for g in 0..layer.united_group_count() {
        let members: Vec<&ExpertFfn> = layer.experts[layer.group_members(g)].iter().collect();
        let (expert, report) = distill_group(g, &members, tokens, cfg)?;
        united.push(expert);
        reports.push(report);
    }
    let mut out = layer.clone();
    out.united = united;
    out.validate()?;
    Ok((out, reports))
}

/// Standard-normal training tokens, reproducible from a seed.
pub fn synthetic_tokens(count: usize, d: usize, seed: u64) -> Vec<HiddenVector> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..d)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f64>>()
        })
        .collect()
}
