//! Multi-objective loss and its exact reverse-mode gradient.

use crate::dataset::{Observation, MAX_INTERFERERS};
use crate::linalg::{axpy, dot, Matrix};
use crate::model::{sorted, Parameters, RuntimeModel};

use super::loss::{pinball, proportional, squared, LossConfig, MeanLoss};

/// Observations grouped by interference mode; index `m` holds runs with
/// exactly `m` interferers.
pub type ModeBatches<'a> = [Vec<&'a Observation>; MAX_INTERFERERS + 1];

pub(crate) fn head_loss(model: &RuntimeModel, loss: &LossConfig, head: usize, d: f64) -> (f64, f64) {
    if model.config.mean_mode {
        match loss.mean_loss {
            MeanLoss::Squared => squared(d),
            MeanLoss::Proportional => proportional(d),
        }
    } else {
        pinball(d, model.config.quantiles[head])
    }
}

/// Residual regression target `ln t - (w_bar + p_bar)`.
fn target(model: &RuntimeModel, obs: &Observation) -> f64 {
    obs.runtime.ln() - model.baseline.w_bar[obs.workload] - model.baseline.p_bar[obs.platform]
}

/// Weighted loss: per mode, the mean over observations of the mean over heads.
/// Empty modes contribute nothing.
pub fn total_loss(model: &RuntimeModel, batches: &ModeBatches<'_>, loss: &LossConfig) -> f64 {
    let emb = model.embeddings();
    let heads = model.heads();
    let mut total = 0.0;
    for (mode, batch) in batches.iter().enumerate() {
        if batch.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for obs in batch {
            let k = sorted(&obs.interference);
            let y = target(model, obs);
            for h in 0..heads {
                let pred = emb.interaction(&model.config, obs.workload, obs.platform, &k, h);
                sum += head_loss(model, loss, h, pred - y).0;
            }
        }
        total += loss.mode_weight(mode) * sum / (batch.len() * heads) as f64;
    }
    total
}

/// Loss and gradient with respect to every trainable parameter, including the
/// learned input features. The baseline is held fixed.
pub fn loss_and_gradient(model: &RuntimeModel, batches: &ModeBatches<'_>, loss: &LossConfig) -> (f64, Parameters) {
    let cfg = &model.config;
    let params = &model.params;
    let (r, s, heads) = (cfg.embed_dim, cfg.interference_types, model.heads());

    let (w_out, w_trace) = params.workload_net.forward_traced(&model.workload_net_input());
    let (p_out, p_trace) = params.platform_net.forward_traced(&model.platform_net_input());
    let mut dw = Matrix::zeros(w_out.rows(), w_out.cols());
    let mut dp = Matrix::zeros(p_out.rows(), p_out.cols());

    let mut total = 0.0;
    let mut sus = vec![0.0; s];
    let mut mag = vec![0.0; s];
    let mut act = vec![0.0; s];
    let mut k_sum = vec![0.0; r];
    let mut dwi = vec![0.0; r];
    for (mode, batch) in batches.iter().enumerate() {
        if batch.is_empty() {
            continue;
        }
        let scale = loss.mode_weight(mode) / (batch.len() * heads) as f64;
        let mut sum = 0.0;
        for obs in batch {
            let (i, j) = (obs.workload, obs.platform);
            let k = sorted(&obs.interference);
            let y = target(model, obs);
            let prow = p_out.row(j);
            let p = &prow[..r];
            for h in 0..heads {
                let block = h * r..(h + 1) * r;
                let wi = &w_out.row(i)[block.clone()];
                let mut pred = dot(wi, p);
                if !k.is_empty() {
                    for t in 0..s {
                        let vs = &prow[(1 + t) * r..(2 + t) * r];
                        let vg = &prow[(1 + s + t) * r..(2 + s + t) * r];
                        sus[t] = dot(wi, vs);
                        mag[t] = k.iter().map(|&kk| dot(&w_out.row(kk)[block.clone()], vg)).sum();
                        act[t] = cfg.activate(mag[t]);
                        pred += sus[t] * act[t];
                    }
                }
                let (l, dl) = head_loss(model, loss, h, pred - y);
                sum += l;
                let g = scale * dl;
                if g == 0.0 {
                    continue;
                }

                // d/dw_i = p + sum_t act_t vs_t
                dwi.copy_from_slice(p);
                {
                    let dprow = dp.row_mut(j);
                    axpy(g, wi, &mut dprow[..r]);
                }
                if !k.is_empty() {
                    k_sum.fill(0.0);
                    for &kk in &k {
                        axpy(1.0, &w_out.row(kk)[block.clone()], &mut k_sum);
                    }
                    for t in 0..s {
                        let vs = &prow[(1 + t) * r..(2 + t) * r];
                        let vg = &prow[(1 + s + t) * r..(2 + s + t) * r];
                        axpy(act[t], vs, &mut dwi);
                        let c = g * sus[t] * cfg.activate_grad(mag[t]);
                        let dprow = dp.row_mut(j);
                        axpy(g * act[t], wi, &mut dprow[(1 + t) * r..(2 + t) * r]);
                        axpy(c, &k_sum, &mut dprow[(1 + s + t) * r..(2 + s + t) * r]);
                        for &kk in &k {
                            axpy(c, vg, &mut dw.row_mut(kk)[block.clone()]);
                        }
                    }
                }
                axpy(g, &dwi, &mut dw.row_mut(i)[block]);
            }
        }
        total += scale * sum;
    }

    let mut grad = Parameters::zeros_like(params);
    let dxw = params.workload_net.backward(&w_trace, dw, &mut grad.workload_net);
    let dxp = params.platform_net.backward(&p_trace, dp, &mut grad.platform_net);
    let q = cfg.learned_features;
    if q > 0 {
        let dw_in = model.workload_inputs.cols();
        grad.workload_latent = dxw.columns(dw_in, dw_in + q);
        let dp_in = model.platform_inputs.cols();
        grad.platform_latent = dxp.columns(dp_in, dp_in + q);
    }
    (total, grad)
}
