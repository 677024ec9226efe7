use super::params::{AffineLayer, ModelParams, INPUT_SHAPE};
use crate::error::Result;
use crate::numerics::{
    affine_backward, affine_forward, conv2d_backward, conv2d_forward, dropout_backward, dropout_forward,
    matvec, relu_backward, relu_forward, Tensor,
};
use crate::scalar::Scalar;

/// Activations of one encoder pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct EncoderTrace<T> {
    conv_inputs: Vec<Tensor<T>>,
    conv_pre: Vec<Tensor<T>>,
    mask: Option<Tensor<T>>,
    fc_input: Tensor<T>,
    pub latent: Tensor<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderTrace<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    /// `[1, 2, 7]`.
    pub output: Tensor<T>,
}

/// Full clean (dropout-free) forward pass of one sample.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub(crate) encoder: EncoderTrace<T>,
    pub code_reg: Tensor<T>,
    pub(crate) dec_reg: DecoderTrace<T>,
    pub code_det: Option<Tensor<T>>,
    pub(crate) dec_det: Option<DecoderTrace<T>>,
}

impl<T: Scalar> Forward<T> {
    pub fn latent(&self) -> &Tensor<T> {
        &self.encoder.latent
    }

    pub fn recon_reg(&self) -> &Tensor<T> {
        &self.dec_reg.output
    }

    pub fn recon_det(&self) -> Option<&Tensor<T>> {
        self.dec_det.as_ref().map(|d| &d.output)
    }

    pub(crate) fn run(params: &ModelParams<T>, grid: &Tensor<T>) -> Result<Self> {
        let encoder = encode_traced(params, grid, None)?;
        let code_reg = dsr_project(&params.regular.projection, &encoder.latent)?;
        let dec_reg = decode_traced(&params.regular.decoder, &code_reg)?;
        let (code_det, dec_det) = match &params.detention {
            Some(b) => {
                let code = dsr_project(&b.projection, &encoder.latent)?;
                let dec = decode_traced(&b.decoder, &code)?;
                (Some(code), Some(dec))
            }
            None => (None, None),
        };
        Ok(Forward {
            encoder,
            code_reg,
            dec_reg,
            code_det,
            dec_det,
        })
    }
}

/// Encoder pass; `dropout_seed` enables dropout on the flattened
/// convolution features (used for the contrastive views).
pub(crate) fn encode_traced<T: Scalar>(
    params: &ModelParams<T>,
    grid: &Tensor<T>,
    dropout_seed: Option<u64>,
) -> Result<EncoderTrace<T>> {
    grid.expect_shape("encoder input", &INPUT_SHAPE)?;
    grid.ensure_finite("encoder input")?;
    let mut conv_inputs = Vec::with_capacity(params.encoder.convs.len());
    let mut conv_pre = Vec::with_capacity(params.encoder.convs.len());
    let mut x = grid.clone();
    for conv in &params.encoder.convs {
        let pre = conv2d_forward(&x, &conv.kernels, &conv.bias)?;
        conv_inputs.push(x);
        x = relu_forward(&pre);
        conv_pre.push(pre);
    }
    let flat_len = x.len();
    let flat = x.reshape(&[flat_len])?;
    let (fc_input, mask) = match dropout_seed {
        Some(seed) => {
            let (y, m) = dropout_forward(&flat, params.arch.dropout, seed)?;
            (y, Some(m))
        }
        None => (flat, None),
    };
    let latent = affine_forward(&fc_input, &params.encoder.fc.weight, &params.encoder.fc.bias)?;
    Ok(EncoderTrace {
        conv_inputs,
        conv_pre,
        mask,
        fc_input,
        latent,
    })
}

/// Accumulates encoder parameter gradients for `grad_latent` into `grads`.
pub(crate) fn encoder_backward<T: Scalar>(
    params: &ModelParams<T>,
    trace: &EncoderTrace<T>,
    grad_latent: &Tensor<T>,
    grads: &mut ModelParams<T>,
) -> Result<()> {
    let fc = affine_backward(&trace.fc_input, &params.encoder.fc.weight, grad_latent)?;
    grads.encoder.fc.weight.add_assign(&fc.weight);
    grads.encoder.fc.bias.add_assign(&fc.bias);
    let mut g = match &trace.mask {
        Some(m) => dropout_backward(m, &fc.input),
        None => fc.input,
    };
    for i in (0..params.encoder.convs.len()).rev() {
        let pre = &trace.conv_pre[i];
        g = relu_backward(pre, &g.reshape(pre.shape())?);
        let conv = &params.encoder.convs[i];
        let cg = conv2d_backward(&trace.conv_inputs[i], &conv.kernels, &conv.bias, &g)?;
        grads.encoder.convs[i].kernels.add_assign(&cg.kernels);
        grads.encoder.convs[i].bias.add_assign(&cg.bias);
        g = cg.input;
    }
    Ok(())
}

pub(crate) fn decode_traced<T: Scalar>(layers: &[AffineLayer<T>], code: &Tensor<T>) -> Result<DecoderTrace<T>> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut x = code.clone();
    for (i, layer) in layers.iter().enumerate() {
        let z = affine_forward(&x, &layer.weight, &layer.bias)?;
        inputs.push(x);
        x = if i + 1 < layers.len() { relu_forward(&z) } else { z.clone() };
        pre.push(z);
    }
    Ok(DecoderTrace {
        inputs,
        pre,
        output: x.reshape(&INPUT_SHAPE)?,
    })
}

/// Accumulates decoder gradients into `grad_layers`; returns the gradient
/// w.r.t. the code.
pub(crate) fn decoder_backward<T: Scalar>(
    layers: &[AffineLayer<T>],
    trace: &DecoderTrace<T>,
    grad_out: &Tensor<T>,
    grad_layers: &mut [AffineLayer<T>],
) -> Result<Tensor<T>> {
    let last = layers.len() - 1;
    let mut g = grad_out.clone().reshape(&[trace.pre[last].len()])?;
    for i in (0..layers.len()).rev() {
        if i < last {
            g = relu_backward(&trace.pre[i], &g);
        }
        let ag = affine_backward(&trace.inputs[i], &layers[i].weight, &g)?;
        grad_layers[i].weight.add_assign(&ag.weight);
        grad_layers[i].bias.add_assign(&ag.bias);
        g = ag.input;
    }
    Ok(g)
}

/// Latent code `d_all` of a normalized `[1, 2, 7]` grid (dropout off).
pub fn encode<T: Scalar>(params: &ModelParams<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(encode_traced(params, grid, None)?.latent)
}

/// `d̃ = A·d_all`.
pub fn dsr_project<T: Scalar>(projection: &Tensor<T>, latent: &Tensor<T>) -> Result<Tensor<T>> {
    matvec(projection, latent)
}

/// Regular-branch reconstruction, shaped `[1, 2, 7]`.
pub fn decode_regular<T: Scalar>(params: &ModelParams<T>, code: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(decode_traced(&params.regular.decoder, code)?.output)
}

/// Detention-branch reconstruction; fails in RSR mode.
pub fn decode_detention<T: Scalar>(params: &ModelParams<T>, code: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(decode_traced(&params.detention_branch()?.decoder, code)?.output)
}
