use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matvec, Tensor};
use crate::scalar::Scalar;
use crate::schema::{NormStats, GRID_COLS, GRID_ROWS, NUM_FEATURES};

pub const KERNEL_ROWS: usize = 2;
pub const KERNEL_COLS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Dsr,
    Rsr,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dsr" => Ok(Mode::Dsr),
            "rsr" => Ok(Mode::Rsr),
            other => Err(format!("unknown mode `{other}` (expected dsr or rsr)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    /// Output channels of each convolution stage (input has one channel).
    pub conv_channels: Vec<usize>,
    /// Latent dimension `D`.
    pub latent_dim: usize,
    /// Subspace dimension `d`.
    pub dsr_dim: usize,
    /// Dropout rate used to build the two contrastive views.
    pub dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            conv_channels: vec![8, 16],
            latent_dim: 32,
            dsr_dim: 8,
            dropout: 0.1,
        }
    }
}

impl Architecture {
    pub fn flatten_dim(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(1) * NUM_FEATURES
    }

    /// Layer widths of each decoder: `d → D → flatten → 14`.
    pub fn decoder_widths(&self) -> [usize; 4] {
        [self.dsr_dim, self.latent_dim, self.flatten_dim(), NUM_FEATURES]
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::invalid("conv_channels", "need at least one positive stage"));
        }
        if self.dsr_dim == 0 || self.dsr_dim >= self.latent_dim {
            return Err(Error::invalid(
                "dsr_dim",
                format!("need 0 < d ({}) < D ({})", self.dsr_dim, self.latent_dim),
            ));
        }
        if self.latent_dim >= self.flatten_dim() {
            return Err(Error::invalid(
                "latent_dim",
                format!("D ({}) must be below the flattened size {}", self.latent_dim, self.flatten_dim()),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout", format!("{} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Loss exponents and weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    /// Reconstruction exponent.
    pub p: f64,
    /// Subspace residual exponent.
    pub q: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Margin loss weight.
    pub lambda3: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            p: 1.0,
            q: 1.0,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.5,
            tau: 0.05,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&'static str, f64, bool); 6] = [
            ("p", self.p, self.p > 0.0),
            ("q", self.q, self.q > 0.0),
            ("lambda1", self.lambda1, self.lambda1 > 0.0),
            ("lambda2", self.lambda2, self.lambda2 > 0.0),
            ("lambda3", self.lambda3, self.lambda3 >= 0.0),
            ("tau", self.tau, self.tau > 0.0),
        ];
        for (name, value, ok) in checks {
            if !(ok && value.is_finite()) {
                return Err(Error::invalid(name, format!("{value} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `[c_out, c_in, 2, 3]`.
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineLayer<T> {
    /// `[out, in]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub convs: Vec<ConvLayer<T>>,
    pub fc: AffineLayer<T>,
}

/// One subspace map with its decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    /// `A`, shape `[d, D]`.
    pub projection: Tensor<T>,
    pub decoder: Vec<AffineLayer<T>>,
}

/// Model weights plus the settings needed to use them. The same type doubles
/// as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub hyper: Hyper,
    pub mode: Mode,
    pub encoder: Encoder<T>,
    pub regular: Branch<T>,
    /// Absent in RSR mode.
    pub detention: Option<Branch<T>>,
    /// Normalization fitted on the training split, carried so a checkpoint
    /// can score raw records.
    pub norm: Option<NormStats>,
}

fn xavier<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("valid init shape")
}

fn affine_init<T: Scalar>(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> AffineLayer<T> {
    AffineLayer {
        weight: xavier(rng, &[n_out, n_in], n_in, n_out),
        bias: Tensor::zeros(&[n_out]),
    }
}

/// Random `rows × cols` matrix with orthonormal rows (Gaussian draw, then
/// modified Gram-Schmidt applied twice).
pub(crate) fn orthonormal_rows<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for _pass in 0..2 {
        for i in 0..rows {
            for j in 0..i {
                let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
                let prev = m[j].clone();
                for (a, b) in m[i].iter_mut().zip(&prev) {
                    *a -= dot * b;
                }
            }
            let norm = m[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            m[i].iter_mut().for_each(|a| *a /= norm);
        }
    }
    let data = m.into_iter().flatten().map(T::lit).collect();
    Tensor::from_vec(&[rows, cols], data).expect("valid projection shape")
}

impl<T: Scalar> Branch<T> {
    fn init(rng: &mut ChaCha8Rng, arch: &Architecture) -> Self {
        let projection = orthonormal_rows(rng, arch.dsr_dim, arch.latent_dim);
        let widths = arch.decoder_widths();
        let decoder = widths.windows(2).map(|w| affine_init(rng, w[0], w[1])).collect();
        Branch { projection, decoder }
    }

    fn zeros_like(&self) -> Self {
        Branch {
            projection: self.projection.zeros_like(),
            decoder: self
                .decoder
                .iter()
                .map(|l| AffineLayer {
                    weight: l.weight.zeros_like(),
                    bias: l.bias.zeros_like(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Xavier-uniform convolution/affine weights, zero biases and
    /// orthonormal-row subspace maps, all drawn from one seeded stream.
    pub fn init(arch: &Architecture, hyper: &Hyper, mode: Mode, seed: u64) -> Result<Self> {
        arch.validate()?;
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(arch.conv_channels.len());
        let mut c_in = 1;
        for &c_out in &arch.conv_channels {
            let taps = KERNEL_ROWS * KERNEL_COLS;
            convs.push(ConvLayer {
                kernels: xavier(&mut rng, &[c_out, c_in, KERNEL_ROWS, KERNEL_COLS], c_in * taps, c_out * taps),
                bias: Tensor::zeros(&[c_out]),
            });
            c_in = c_out;
        }
        let fc = affine_init(&mut rng, arch.flatten_dim(), arch.latent_dim);
        let regular = Branch::init(&mut rng, arch);
        let detention = match mode {
            Mode::Dsr => Some(Branch::init(&mut rng, arch)),
            Mode::Rsr => None,
        };
        Ok(ModelParams {
            arch: arch.clone(),
            hyper: hyper.clone(),
            mode,
            encoder: Encoder { convs, fc },
            regular,
            detention,
            norm: None,
        })
    }

    /// Same structure with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            arch: self.arch.clone(),
            hyper: self.hyper.clone(),
            mode: self.mode,
            encoder: Encoder {
                convs: self
                    .encoder
                    .convs
                    .iter()
                    .map(|c| ConvLayer {
                        kernels: c.kernels.zeros_like(),
                        bias: c.bias.zeros_like(),
                    })
                    .collect(),
                fc: AffineLayer {
                    weight: self.encoder.fc.weight.zeros_like(),
                    bias: self.encoder.fc.bias.zeros_like(),
                },
            },
            regular: self.regular.zeros_like(),
            detention: self.detention.as_ref().map(Branch::zeros_like),
            norm: None,
        }
    }

    /// Named tensors in manifest order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.convs.iter().enumerate() {
            out.push((format!("encoder.conv{i}.kernels"), &c.kernels));
            out.push((format!("encoder.conv{i}.bias"), &c.bias));
        }
        out.push(("encoder.fc.weight".into(), &self.encoder.fc.weight));
        out.push(("encoder.fc.bias".into(), &self.encoder.fc.bias));
        let branches = [("regular", Some(&self.regular)), ("detention", self.detention.as_ref())];
        for (name, branch) in branches {
            let Some(b) = branch else { continue };
            out.push((format!("{name}.projection"), &b.projection));
            for (i, l) in b.decoder.iter().enumerate() {
                out.push((format!("{name}.decoder{i}.weight"), &l.weight));
                out.push((format!("{name}.decoder{i}.bias"), &l.bias));
            }
        }
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for c in &mut self.encoder.convs {
            out.push(&mut c.kernels);
            out.push(&mut c.bias);
        }
        out.push(&mut self.encoder.fc.weight);
        out.push(&mut self.encoder.fc.bias);
        for b in std::iter::once(&mut self.regular).chain(self.detention.as_mut()) {
            out.push(&mut b.projection);
            for l in &mut b.decoder {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flat_values(&self) -> Vec<T> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape {
                op: "set_flat",
                expected: vec![self.num_params()],
                actual: vec![values.len()],
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += alpha * other` over every tensor.
    pub fn add_scaled(&mut self, alpha: T, other: &ModelParams<T>) {
        let theirs: Vec<&Tensor<T>> = other.tensors().into_iter().map(|(_, t)| t).collect();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            mine.axpy(alpha, t);
        }
    }

    pub fn add(&mut self, other: &ModelParams<T>) {
        self.add_scaled(T::one(), other);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn detention_branch(&self) -> Result<&Branch<T>> {
        self.detention.as_ref().ok_or(Error::BranchAbsent)
    }

    /// `‖A·Aᵀ − I_d‖_F` of a branch's projection.
    pub fn orthogonality_defect(projection: &Tensor<T>) -> f64 {
        let (rows, cols) = (projection.shape()[0], projection.shape()[1]);
        let mut total = 0.0;
        for i in 0..rows {
            let ri = Tensor::vector(&projection.data()[i * cols..(i + 1) * cols]).expect("row");
            let gram = matvec(projection, &ri).expect("gram row");
            for (j, &g) in gram.data().iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                total += (g.as_f64() - target).powi(2);
            }
        }
        total.sqrt()
    }
}

/// Shape `[1, GRID_ROWS, GRID_COLS]` expected by the encoder.
pub const INPUT_SHAPE: [usize; 3] = [1, GRID_ROWS, GRID_COLS];
