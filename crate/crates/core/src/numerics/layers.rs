use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradients of a convolution w.r.t. its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of an affine map w.r.t. its input and parameters.
#[derive(Clone, Debug)]
pub struct AffineGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    rows: usize,
    cols: usize,
    k_rows: usize,
    k_cols: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Self> {
        let ishape = input.shape();
        let kshape = kernels.shape();
        if ishape.len() != 3 {
            return Err(Error::Shape {
                op: "conv2d input",
                expected: vec![kshape.get(1).copied().unwrap_or(0), 2, 7],
                actual: ishape.to_vec(),
            });
        }
        if kshape.len() != 4 || kshape[1] != ishape[0] {
            return Err(Error::Shape {
                op: "conv2d kernels",
                expected: vec![kshape.first().copied().unwrap_or(0), ishape[0], 2, 3],
                actual: kshape.to_vec(),
            });
        }
        bias.expect_shape("conv2d bias", &[kshape[0]])?;
        let (k_rows, k_cols) = (kshape[2], kshape[3]);
        Ok(ConvGeometry {
            c_in: ishape[0],
            c_out: kshape[0],
            rows: ishape[1],
            cols: ishape[2],
            k_rows,
            k_cols,
            // "same" padding; even kernel extents put the extra zero row/column
            // after the data, so a 2-row kernel pads only below the grid.
            pad_top: (k_rows - 1) / 2,
            pad_left: (k_cols - 1) / 2,
        })
    }

    /// Input coordinate read by output `(r, c)` through kernel tap `(kr, kc)`,
    /// or `None` when the tap lands in the zero padding.
    #[inline]
    fn source(&self, r: usize, c: usize, kr: usize, kc: usize) -> Option<(usize, usize)> {
        let ir = (r + kr).checked_sub(self.pad_top)?;
        let ic = (c + kc).checked_sub(self.pad_left)?;
        (ir < self.rows && ic < self.cols).then_some((ir, ic))
    }
}

/// Stride-1 2-D convolution with "same" zero padding.
///
/// `input` is `[c_in, rows, cols]`, `kernels` is `[c_out, c_in, k_rows,
/// k_cols]`, `bias` is `[c_out]`; the output is `[c_out, rows, cols]`. With the
/// 2×3 kernels used by the encoder on the 2×7 grid this pads one zero column on
/// each side and one zero row below, so every output row still mixes both
/// feature dimensions.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernels, bias)?;
    let x = input.data();
    let k = kernels.data();
    let mut out = Tensor::zeros(&[g.c_out, g.rows, g.cols]);
    let y = out.data_mut();
    for o in 0..g.c_out {
        for r in 0..g.rows {
            for c in 0..g.cols {
                let mut acc = bias.data()[o];
                for i in 0..g.c_in {
                    for kr in 0..g.k_rows {
                        for kc in 0..g.k_cols {
                            if let Some((ir, ic)) = g.source(r, c, kr, kc) {
                                let kv = k[((o * g.c_in + i) * g.k_rows + kr) * g.k_cols + kc];
                                acc += kv * x[(i * g.rows + ir) * g.cols + ic];
                            }
                        }
                    }
                }
                y[(o * g.rows + r) * g.cols + c] = acc;
            }
        }
    }
    out.ensure_finite("conv2d_forward")?;
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input, kernels, bias)?;
    grad_out.expect_shape("conv2d grad_out", &[g.c_out, g.rows, g.cols])?;
    let x = input.data();
    let k = kernels.data();
    let gy = grad_out.data();
    let mut gx = input.zeros_like();
    let mut gk = kernels.zeros_like();
    let mut gb = bias.zeros_like();
    {
        let (gxd, gkd, gbd) = (gx.data_mut(), gk.data_mut(), gb.data_mut());
        for o in 0..g.c_out {
            for r in 0..g.rows {
                for c in 0..g.cols {
                    let go = gy[(o * g.rows + r) * g.cols + c];
                    gbd[o] += go;
                    for i in 0..g.c_in {
                        for kr in 0..g.k_rows {
                            for kc in 0..g.k_cols {
                                if let Some((ir, ic)) = g.source(r, c, kr, kc) {
                                    let ki = ((o * g.c_in + i) * g.k_rows + kr) * g.k_cols + kc;
                                    let xi = (i * g.rows + ir) * g.cols + ic;
                                    gkd[ki] += go * x[xi];
                                    gxd[xi] += go * k[ki];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        kernels: gk,
        bias: gb,
    })
}

/// `W·x` for `W` of shape `[out, in]`.
pub fn matvec<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = matrix_dims("matvec", w, x.len())?;
    let wd = w.data();
    let xd = x.data();
    let data = (0..rows)
        .map(|r| {
            wd[r * cols..(r + 1) * cols]
                .iter()
                .zip(xd)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
        })
        .collect();
    Tensor::from_vec(&[rows], data)
}

/// `Wᵀ·y` for `W` of shape `[out, in]`.
pub fn matvec_transposed<T: Scalar>(w: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = w.shape();
    if shape.len() != 2 || shape[0] != y.len() {
        return Err(Error::Shape {
            op: "matvec_transposed",
            expected: vec![y.len(), shape.get(1).copied().unwrap_or(0)],
            actual: shape.to_vec(),
        });
    }
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = vec![T::zero(); cols];
    for (r, &yr) in y.data().iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w.data()[r * cols..(r + 1) * cols]) {
            *o += wv * yr;
        }
    }
    debug_assert_eq!(rows, y.len());
    Tensor::from_vec(&[cols], out)
}

fn matrix_dims<T: Scalar>(op: &'static str, w: &Tensor<T>, in_len: usize) -> Result<(usize, usize)> {
    let shape = w.shape();
    if shape.len() != 2 || shape[1] != in_len {
        return Err(Error::Shape {
            op,
            expected: vec![shape.first().copied().unwrap_or(0), in_len],
            actual: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1]))
}

/// `y = W·x + b`.
pub fn affine_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matvec(w, x)?;
    b.expect_shape("affine bias", &[w.shape()[0]])?;
    y.add_assign(b);
    y.ensure_finite("affine_forward")?;
    Ok(y)
}

pub fn affine_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<AffineGrads<T>> {
    let (rows, cols) = matrix_dims("affine_backward", w, x.len())?;
    grad_out.expect_shape("affine grad_out", &[rows])?;
    let input = matvec_transposed(w, grad_out)?;
    let mut weight = w.zeros_like();
    {
        let gw = weight.data_mut();
        for (r, &gy) in grad_out.data().iter().enumerate() {
            for (g, &xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x.data()) {
                *g = gy * xv;
            }
        }
    }
    Ok(AffineGrads {
        input,
        weight,
        bias: grad_out.clone(),
    })
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Gradient through ReLU given the pre-activation `x`. The kink at 0 takes
/// the zero subgradient.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// Inverted dropout. Returns the output and the per-element scale mask
/// (`0` for dropped units, `1/(1-rate)` for kept ones); the mask is a pure
/// function of `seed` and the input length.
pub fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout rate", format!("{rate} not in [0, 1)")));
    }
    let mut mask = x.zeros_like();
    if rate == 0.0 {
        mask.fill(T::one());
        return Ok((x.clone(), mask));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in mask.data_mut() {
        *m = if rng.random::<f64>() < rate { T::zero() } else { keep };
    }
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
    Ok((y, mask))
}

pub fn dropout_backward<T: Scalar>(mask: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &m) in g.data_mut().iter_mut().zip(mask.data()) {
        *gv *= m;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn center_tap_kernel_copies_input() {
        let input = t(&[1, 2, 7], (0..14).map(|v| v as f64 + 1.0).collect());
        let mut k = vec![0.0; 6];
        k[1] = 1.0; // top row, middle column
        let out = conv2d_forward(&input, &t(&[1, 1, 2, 3], k), &t(&[1], vec![0.0])).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn off_center_tap_reads_zero_padding_at_boundary() {
        let input = t(&[1, 2, 7], (0..14).map(|v| v as f64 + 1.0).collect());
        let mut k = vec![0.0; 6];
        k[0] = 1.0; // top-left tap: out(r, c) = in(r, c - 1)
        let out = conv2d_forward(&input, &t(&[1, 1, 2, 3], k), &t(&[1], vec![0.0])).unwrap();
        for r in 0..2 {
            assert_eq!(out.data()[r * 7], 0.0);
            for c in 1..7 {
                assert_eq!(out.data()[r * 7 + c], input.data()[r * 7 + c - 1]);
            }
        }
        // bottom-centre tap: row 0 reads row 1, row 1 reads the zero pad row
        let mut k = vec![0.0; 6];
        k[4] = 1.0;
        let out = conv2d_forward(&input, &t(&[1, 1, 2, 3], k), &t(&[1], vec![0.0])).unwrap();
        assert_eq!(&out.data()[..7], &input.data()[7..]);
        assert!(out.data()[7..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_kernels_give_bias() {
        let input = t(&[2, 2, 7], (0..28).map(|v| v as f64).collect());
        let out = conv2d_forward(&input, &Tensor::zeros(&[3, 2, 2, 3]), &t(&[3], vec![1.0, -2.0, 0.5]))
            .unwrap();
        for (o, b) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert!(out.data()[o * 14..(o + 1) * 14].iter().all(|v| v == b));
        }
    }

    #[test]
    fn conv_shape_mismatch_names_shapes() {
        let input = Tensor::<f64>::zeros(&[2, 2, 7]);
        let err = conv2d_forward(&input, &Tensor::zeros(&[3, 1, 2, 3]), &Tensor::zeros(&[3]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 2, 2, 3]") && msg.contains("[3, 1, 2, 3]"), "{msg}");
    }

    #[test]
    fn affine_identity_and_zero_input() {
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 4] = 1.0;
        }
        let x = t(&[3], vec![1.5, -2.0, 3.0]);
        assert_eq!(affine_forward(&x, &w, &Tensor::zeros(&[3])).unwrap(), x);
        let b = t(&[3], vec![0.1, 0.2, 0.3]);
        let w = t(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(affine_forward(&Tensor::zeros(&[2]), &w, &b).unwrap(), b);
        assert!(affine_forward(&x, &w, &b).is_err());
    }

    #[test]
    fn relu_values() {
        let y = relu_forward(&t(&[2], vec![-1.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_rejects_bad_rate() {
        let x = t(&[4], vec![1.0, -2.0, 3.0, 4.0]);
        let (y, _) = dropout_forward(&x, 0.0, 7).unwrap();
        assert_eq!(y, x);
        assert!(dropout_forward(&x, 1.0, 7).is_err());
        assert!(dropout_forward(&x, -0.1, 7).is_err());
    }

    #[test]
    fn dropout_mask_reproducible() {
        let x = t(&[16], vec![1.0; 16]);
        let a = dropout_forward(&x, 0.5, 11).unwrap();
        let b = dropout_forward(&x, 0.5, 11).unwrap();
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Monte-Carlo oracle: the mean over many seeded masks approaches the input mean.
        let x = t(&[8], vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]);
        let input_mean = x.data().iter().sum::<f64>() / 8.0;
        let trials = 10_000;
        let total: f64 = (0..trials)
            .map(|s| dropout_forward(&x, 0.1, s).unwrap().0.data().iter().sum::<f64>() / 8.0)
            .sum();
        let mc_mean = total / trials as f64;
        assert!((mc_mean - input_mean).abs() / input_mean < 0.02, "{mc_mean} vs {input_mean}");
    }
}
