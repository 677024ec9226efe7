use rayon::prelude::*;

use super::forward::{decoder_backward, encode_traced, encoder_backward, EncoderTrace, Forward};
use super::params::{Mode, ModelParams};
use super::{mix_seed, Sample};
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, cosine_sim_backward, l2_norm, matvec, matvec_transposed, Tensor};
use crate::scalar::Scalar;

/// Samples per gradient-accumulation chunk. Chunk sums are reduced in index
/// order, so results do not depend on the rayon pool size.
const GRAD_CHUNK: usize = 8;

fn check_lengths(op: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            op,
            expected: vec![expected],
            actual: vec![actual],
        });
    }
    Ok(())
}

/// `‖r‖^e` and its gradient factor `e‖r‖^(e−2)` (zero at `r = 0`).
fn norm_power<T: Scalar>(r: &Tensor<T>, exponent: T) -> (T, T) {
    let norm = l2_norm(r);
    if norm == T::zero() {
        return (T::zero(), T::zero());
    }
    (norm.powf(exponent), exponent * norm.powf(exponent - T::lit(2.0)))
}

#[derive(Clone, Debug)]
pub struct ReconGrad<T> {
    pub value: T,
    /// Gradient w.r.t. each reconstruction (zero outside the mask).
    pub recons: Vec<Tensor<T>>,
}

/// `Σ_{t ∈ mask} ‖x_t − x̃_t‖₂^p` with gradients w.r.t. the reconstructions.
/// An empty mask gives 0.
pub fn loss_recon_grad<T: Scalar>(
    p: f64,
    xs: &[Tensor<T>],
    recons: &[Tensor<T>],
    mask: &[bool],
) -> Result<ReconGrad<T>> {
    if !(p > 0.0) {
        return Err(Error::invalid("p", format!("{p} must be positive")));
    }
    check_lengths("loss_recon", xs.len(), recons.len())?;
    check_lengths("loss_recon mask", xs.len(), mask.len())?;
    let exponent = T::lit(p);
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(xs.len());
    for ((x, xr), &m) in xs.iter().zip(recons).zip(mask) {
        if x.len() != xr.len() {
            return Err(Error::Shape {
                op: "loss_recon",
                expected: x.shape().to_vec(),
                actual: xr.shape().to_vec(),
            });
        }
        if !m {
            grads.push(xr.zeros_like());
            continue;
        }
        let residual = xr.sub(x);
        let (v, factor) = norm_power(&residual, exponent);
        value += v;
        grads.push(residual.scale(factor));
    }
    Ok(ReconGrad { value, recons: grads })
}

pub fn loss_recon<T: Scalar>(p: f64, xs: &[Tensor<T>], recons: &[Tensor<T>], mask: &[bool]) -> Result<T> {
    Ok(loss_recon_grad(p, xs, recons, mask)?.value)
}

#[derive(Clone, Debug)]
pub struct DsrGrad<T> {
    pub value: T,
    /// `Σ ‖d − AᵀA d‖^q` before weighting.
    pub residual: T,
    /// `‖AAᵀ − I‖_F²` before weighting.
    pub orthogonality: T,
    pub projection: Tensor<T>,
    /// Gradient w.r.t. each latent (zero outside the mask).
    pub latents: Vec<Tensor<T>>,
}

fn add_outer<T: Scalar>(dst: &mut Tensor<T>, alpha: T, u: &Tensor<T>, v: &Tensor<T>) {
    let cols = v.len();
    let data = dst.data_mut();
    for (i, &ui) in u.data().iter().enumerate() {
        let s = alpha * ui;
        for (d, &vj) in data[i * cols..(i + 1) * cols].iter_mut().zip(v.data()) {
            *d += s * vj;
        }
    }
}

/// Subspace loss of one projection `A` (`d×D`):
/// `λ1 Σ_{t ∈ mask} ‖d_t − Aᵀ(A d_t)‖^q + λ2 ‖AAᵀ − I_d‖_F²`.
pub fn loss_dsr_grad<T: Scalar>(
    a: &Tensor<T>,
    latents: &[Tensor<T>],
    q: f64,
    lambda1: f64,
    lambda2: f64,
    mask: &[bool],
) -> Result<DsrGrad<T>> {
    if !(q > 0.0) {
        return Err(Error::invalid("q", format!("{q} must be positive")));
    }
    check_lengths("loss_dsr mask", latents.len(), mask.len())?;
    if a.shape().len() != 2 {
        return Err(Error::Shape {
            op: "loss_dsr projection",
            expected: vec![0, 0],
            actual: a.shape().to_vec(),
        });
    }
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    let (l1, l2) = (T::lit(lambda1), T::lit(lambda2));
    let exponent = T::lit(q);
    let mut grad_a = a.zeros_like();
    let mut residual_sum = T::zero();
    let mut grad_latents = Vec::with_capacity(latents.len());
    for (d, &m) in latents.iter().zip(mask) {
        if !m {
            grad_latents.push(Tensor::zeros(&[cols]));
            continue;
        }
        let code = matvec(a, d)?;
        let residual = d.sub(&matvec_transposed(a, &code)?);
        let (v, factor) = norm_power(&residual, exponent);
        residual_sum += v;
        // g = ∂‖r‖^q/∂r;  ∂/∂d = (I − AᵀA) g;  ∂/∂A = −(A d) gᵀ − (A g) dᵀ
        let g = residual.scale(factor);
        let ag = matvec(a, &g)?;
        let mut gd = g.clone();
        gd.axpy(-T::one(), &matvec_transposed(a, &ag)?);
        grad_latents.push(gd.scale(l1));
        add_outer(&mut grad_a, -l1, &code, &g);
        add_outer(&mut grad_a, -l1, &ag, d);
    }
    // ‖M‖_F² with M = AAᵀ − I; gradient 4·M·A.
    let mut gram_defect = vec![T::zero(); rows * rows];
    let ad = a.data();
    for i in 0..rows {
        for j in 0..rows {
            let dot = (0..cols).fold(T::zero(), |acc, k| acc + ad[i * cols + k] * ad[j * cols + k]);
            gram_defect[i * rows + j] = dot - if i == j { T::one() } else { T::zero() };
        }
    }
    let orthogonality: T = gram_defect.iter().map(|&m| m * m).sum();
    let gd = grad_a.data_mut();
    let four_l2 = T::lit(4.0) * l2;
    for i in 0..rows {
        for j in 0..rows {
            let m = gram_defect[i * rows + j];
            for k in 0..cols {
                gd[i * cols + k] += four_l2 * m * ad[j * cols + k];
            }
        }
    }
    Ok(DsrGrad {
        value: l1 * residual_sum + l2 * orthogonality,
        residual: residual_sum,
        orthogonality,
        projection: grad_a,
        latents: grad_latents,
    })
}

pub fn loss_dsr<T: Scalar>(
    a: &Tensor<T>,
    latents: &[Tensor<T>],
    q: f64,
    lambda1: f64,
    lambda2: f64,
    mask: &[bool],
) -> Result<T> {
    Ok(loss_dsr_grad(a, latents, q, lambda1, lambda2, mask)?.value)
}

#[derive(Clone, Debug)]
pub struct MarginGrad<T> {
    pub value: T,
    pub view1: Vec<Tensor<T>>,
    pub view2: Vec<Tensor<T>>,
}

/// Supervised contrastive margin loss over two views.
///
/// Anchor `i` is `view1[i]`; its candidates are every `view2[j]`. Same-class
/// candidates (including `j = i`) are positives, the rest negatives:
/// `L = −mean_i log(Σ_pos e^{s_ij} / Σ_all e^{s_ij})` with `s = cos/τ`.
pub fn loss_margin_grad<T: Scalar>(
    view1: &[Tensor<T>],
    view2: &[Tensor<T>],
    labels: &[bool],
    tau: f64,
) -> Result<MarginGrad<T>> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", format!("{tau} must be positive")));
    }
    let n = view1.len();
    check_lengths("loss_margin views", n, view2.len())?;
    check_lengths("loss_margin labels", n, labels.len())?;
    if !(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)) {
        return Err(Error::SingleClassBatch);
    }
    let inv_tau = T::lit(1.0 / tau);
    let mut sims = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            sims[i * n + j] = cosine_sim(&view1[i], &view2[j])? * inv_tau;
        }
    }
    let mut value = T::zero();
    let mut g1: Vec<Tensor<T>> = view1.iter().map(Tensor::zeros_like).collect();
    let mut g2: Vec<Tensor<T>> = view2.iter().map(Tensor::zeros_like).collect();
    let inv_n = T::one() / T::from_count(n);
    for i in 0..n {
        let row = &sims[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let weights: Vec<T> = row.iter().map(|&s| (s - max).exp()).collect();
        let all: T = weights.iter().copied().sum();
        let pos: T = (0..n).filter(|&j| labels[j] == labels[i]).map(|j| weights[j]).sum();
        value += (all.ln() - pos.ln()) * inv_n;
        for j in 0..n {
            let own = if labels[j] == labels[i] { weights[j] / pos } else { T::zero() };
            let d_sim = (weights[j] / all - own) * inv_n * inv_tau;
            if d_sim == T::zero() {
                continue;
            }
            let (gu, gv) = cosine_sim_backward(&view1[i], &view2[j], d_sim)?;
            g1[i].add_assign(&gu);
            g2[j].add_assign(&gv);
        }
    }
    Ok(MarginGrad {
        value,
        view1: g1,
        view2: g2,
    })
}

pub fn loss_margin<T: Scalar>(view1: &[Tensor<T>], view2: &[Tensor<T>], labels: &[bool], tau: f64) -> Result<T> {
    Ok(loss_margin_grad(view1, view2, labels, tau)?.value)
}

/// Per-term values of one batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub recon_reg: f64,
    pub recon_det: f64,
    pub dsr_reg: f64,
    pub dsr_det: f64,
    /// Unweighted margin loss.
    pub margin: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub value: T,
    pub terms: LossTerms,
    pub grads: ModelParams<T>,
}

struct Views<T> {
    traces: Vec<(EncoderTrace<T>, EncoderTrace<T>)>,
    grad: MarginGrad<T>,
}

fn concat_codes<T: Scalar>(params: &ModelParams<T>, latent: &Tensor<T>) -> Result<Tensor<T>> {
    let reg = matvec(&params.regular.projection, latent)?;
    let det = matvec(&params.detention_branch()?.projection, latent)?;
    Ok(Tensor::concat(&[&reg, &det]))
}

/// Batch objective and its gradient:
/// `L_reg + L_det + DSR(A_reg; regulars) + DSR(A_det; detained) + λ3·L_margin`.
/// RSR mode keeps only the two regular-branch terms.
///
/// `seed` fixes the dropout masks of the two contrastive views.
pub fn total_loss<T: Scalar>(params: &ModelParams<T>, batch: &[Sample<T>], seed: u64) -> Result<LossOutput<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    let h = &params.hyper;
    let dsr_mode = params.mode == Mode::Dsr;
    let use_margin = dsr_mode && h.lambda3 > 0.0;

    let forwards: Vec<Forward<T>> = batch
        .par_iter()
        .map(|s| Forward::run(params, &s.grid))
        .collect::<Result<_>>()?;
    let xs: Vec<Tensor<T>> = batch.iter().map(|s| s.grid.clone()).collect();
    let latents: Vec<Tensor<T>> = forwards.iter().map(|f| f.latent().clone()).collect();
    let labels: Vec<bool> = batch.iter().map(|s| s.detained).collect();
    let regular_mask: Vec<bool> = labels.iter().map(|&l| !l).collect();

    let recons_reg: Vec<Tensor<T>> = forwards.iter().map(|f| f.recon_reg().clone()).collect();
    let recon_reg = loss_recon_grad(h.p, &xs, &recons_reg, &regular_mask)?;
    let dsr_reg = loss_dsr_grad(&params.regular.projection, &latents, h.q, h.lambda1, h.lambda2, &regular_mask)?;

    let det_terms = if dsr_mode {
        let branch = params.detention_branch()?;
        let recons_det: Vec<Tensor<T>> = forwards
            .iter()
            .map(|f| f.recon_det().cloned().ok_or(Error::BranchAbsent))
            .collect::<Result<_>>()?;
        let recon = loss_recon_grad(h.p, &xs, &recons_det, &labels)?;
        let dsr = loss_dsr_grad(&branch.projection, &latents, h.q, h.lambda1, h.lambda2, &labels)?;
        Some((recon, dsr))
    } else {
        None
    };

    let views = if use_margin {
        let traces: Vec<(EncoderTrace<T>, EncoderTrace<T>)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                Ok((
                    encode_traced(params, &s.grid, Some(mix_seed(seed, i as u64, 1)))?,
                    encode_traced(params, &s.grid, Some(mix_seed(seed, i as u64, 2)))?,
                ))
            })
            .collect::<Result<_>>()?;
        let (c1, c2): (Vec<_>, Vec<_>) = traces
            .iter()
            .map(|(a, b)| Ok((concat_codes(params, &a.latent)?, concat_codes(params, &b.latent)?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let grad = loss_margin_grad(&c1, &c2, &labels, h.tau)?;
        Some(Views { traces, grad })
    } else {
        None
    };

    let lambda3 = T::lit(h.lambda3);
    let backward_sample = |i: usize, grads: &mut ModelParams<T>| -> Result<()> {
        let f = &forwards[i];
        let mut g_latent = Tensor::zeros(&[params.arch.latent_dim]);
        if !labels[i] {
            let g_code = decoder_backward(
                &params.regular.decoder,
                &f.dec_reg,
                &recon_reg.recons[i],
                &mut grads.regular.decoder,
            )?;
            add_outer(&mut grads.regular.projection, T::one(), &g_code, f.latent());
            g_latent.add_assign(&matvec_transposed(&params.regular.projection, &g_code)?);
            g_latent.add_assign(&dsr_reg.latents[i]);
        } else if let Some((recon_det, dsr_det)) = &det_terms {
            let branch = params.detention_branch()?;
            let dec_trace = f.dec_det.as_ref().ok_or(Error::BranchAbsent)?;
            let grad_branch = grads.detention.as_mut().ok_or(Error::BranchAbsent)?;
            let g_code = decoder_backward(&branch.decoder, dec_trace, &recon_det.recons[i], &mut grad_branch.decoder)?;
            add_outer(&mut grad_branch.projection, T::one(), &g_code, f.latent());
            g_latent.add_assign(&matvec_transposed(&branch.projection, &g_code)?);
            g_latent.add_assign(&dsr_det.latents[i]);
        }
        encoder_backward(params, &f.encoder, &g_latent, grads)?;

        if let Some(v) = &views {
            let d = params.arch.dsr_dim;
            let branch = params.detention_branch()?;
            let (t1, t2) = &v.traces[i];
            for (trace, g_code) in [(t1, &v.grad.view1[i]), (t2, &v.grad.view2[i])] {
                let g_reg = Tensor::vector(&g_code.data()[..d])?.scale(lambda3);
                let g_det = Tensor::vector(&g_code.data()[d..])?.scale(lambda3);
                add_outer(&mut grads.regular.projection, T::one(), &g_reg, &trace.latent);
                let grad_branch = grads.detention.as_mut().ok_or(Error::BranchAbsent)?;
                add_outer(&mut grad_branch.projection, T::one(), &g_det, &trace.latent);
                let mut g_h = matvec_transposed(&params.regular.projection, &g_reg)?;
                g_h.add_assign(&matvec_transposed(&branch.projection, &g_det)?);
                encoder_backward(params, trace, &g_h, grads)?;
            }
        }
        Ok(())
    };

    let indices: Vec<usize> = (0..batch.len()).collect();
    let partials: Vec<ModelParams<T>> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            for &i in chunk {
                backward_sample(i, &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    for partial in &partials {
        grads.add(partial);
    }
    grads.regular.projection.add_assign(&dsr_reg.projection);

    let mut value = recon_reg.value + dsr_reg.value;
    let mut terms = LossTerms {
        recon_reg: recon_reg.value.as_f64(),
        dsr_reg: dsr_reg.value.as_f64(),
        ..LossTerms::default()
    };
    if let Some((recon_det, dsr_det)) = &det_terms {
        let g = grads.detention.as_mut().ok_or(Error::BranchAbsent)?;
        g.projection.add_assign(&dsr_det.projection);
        value += recon_det.value + dsr_det.value;
        terms.recon_det = recon_det.value.as_f64();
        terms.dsr_det = dsr_det.value.as_f64();
    }
    if let Some(v) = &views {
        value += lambda3 * v.grad.value;
        terms.margin = v.grad.value.as_f64();
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("total_loss"));
    }
    terms.total = value.as_f64();
    Ok(LossOutput { value, terms, grads })
}
