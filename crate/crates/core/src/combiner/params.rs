use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Scalar};

pub const DEFAULT_DROPOUT: f64 = 0.5;

/// Projection width as a multiple of the embedding dim.
pub const PROJECTION_FACTOR: usize = 4;
/// Hidden width of both branches as a multiple of the embedding dim.
pub const HIDDEN_FACTOR: usize = 8;

/// Affine layer `x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = T::one() / T::from_usize(fan_in).expect("fan-in fits").sqrt();
        let lo = -bound;
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(lo..=bound));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    fn cast<U: Scalar>(&self) -> Linear<U> {
        let conv = |v: &T| U::from(*v).expect("float conversion");
        Linear {
            weight: self.weight.map(conv),
            bias: self.bias.map(conv),
        }
    }
}

/// Weights of the fusion network.
///
/// Image and text features are each projected `d -> 4d` (linear + ReLU) and
/// concatenated to `8d`. The gate branch maps the concatenation `8d -> 8d -> 1`
/// and ends in a sigmoid (the convex coefficient); the mixture branch maps
/// `8d -> 8d -> d` (the learned residual).
#[derive(Debug, Clone, PartialEq)]
pub struct CombinerParams<T = f32> {
    pub d: usize,
    pub img_proj: Linear<T>,
    pub txt_proj: Linear<T>,
    pub gate_hidden: Linear<T>,
    pub gate_out: Linear<T>,
    pub mix_hidden: Linear<T>,
    pub mix_out: Linear<T>,
    pub dropout_rate: f64,
}

/// Checkpoint section names, in storage order.
pub const TENSOR_NAMES: [&str; 12] = [
    "img_proj.weight",
    "img_proj.bias",
    "txt_proj.weight",
    "txt_proj.bias",
    "gate_hidden.weight",
    "gate_hidden.bias",
    "gate_out.weight",
    "gate_out.bias",
    "mix_hidden.weight",
    "mix_hidden.bias",
    "mix_out.weight",
    "mix_out.bias",
];

impl<T: Scalar> CombinerParams<T> {
    pub fn projection_width(&self) -> usize {
        PROJECTION_FACTOR * self.d
    }

    pub fn hidden_width(&self) -> usize {
        HIDDEN_FACTOR * self.d
    }

    pub fn zeros(d: usize) -> Self {
        let p = PROJECTION_FACTOR * d;
        let h = HIDDEN_FACTOR * d;
        Self {
            d,
            img_proj: Linear::zeros(d, p),
            txt_proj: Linear::zeros(d, p),
            gate_hidden: Linear::zeros(2 * p, h),
            gate_out: Linear::zeros(h, 1),
            mix_hidden: Linear::zeros(2 * p, h),
            mix_out: Linear::zeros(h, d),
            dropout_rate: DEFAULT_DROPOUT,
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("embedding dim must be >= 1".into()));
        }
        let p = PROJECTION_FACTOR * d;
        let h = HIDDEN_FACTOR * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            d,
            img_proj: Linear::uniform(d, p, &mut rng),
            txt_proj: Linear::uniform(d, p, &mut rng),
            gate_hidden: Linear::uniform(2 * p, h, &mut rng),
            gate_out: Linear::uniform(h, 1, &mut rng),
            mix_hidden: Linear::uniform(2 * p, h, &mut rng),
            mix_out: Linear::uniform(h, d, &mut rng),
            dropout_rate: DEFAULT_DROPOUT,
        })
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    /// Zero-valued tensors of the same shapes, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.d);
        z.dropout_rate = self.dropout_rate;
        z
    }

    pub fn cast<U: Scalar>(&self) -> CombinerParams<U> {
        CombinerParams {
            d: self.d,
            img_proj: self.img_proj.cast(),
            txt_proj: self.txt_proj.cast(),
            gate_hidden: self.gate_hidden.cast(),
            gate_out: self.gate_out.cast(),
            mix_hidden: self.mix_hidden.cast(),
            mix_out: self.mix_out.cast(),
            dropout_rate: self.dropout_rate,
        }
    }

    fn layers(&self) -> [&Linear<T>; 6] {
        [
            &self.img_proj,
            &self.txt_proj,
            &self.gate_hidden,
            &self.gate_out,
            &self.mix_hidden,
            &self.mix_out,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Linear<T>; 6] {
        [
            &mut self.img_proj,
            &mut self.txt_proj,
            &mut self.gate_hidden,
            &mut self.gate_out,
            &mut self.mix_hidden,
            &mut self.mix_out,
        ]
    }

    /// Flat views of every tensor, in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// `(rows, cols)` of every tensor; biases are `1 x n`.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers()
            .into_iter()
            .flat_map(|l| [l.weight.dim(), (1, l.bias.len())])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Checks every tensor has the shape implied by `d`.
    pub fn validate(&self) -> Result<()> {
        let expected = Self::zeros(self.d).shapes();
        for ((name, want), got) in TENSOR_NAMES.iter().zip(&expected).zip(self.shapes()) {
            if *want != got {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {want:?}, found {got:?}"
                )));
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite {
                context: "combiner parameters".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}
