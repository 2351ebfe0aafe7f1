use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{CombinerParams, Linear};
use super::CombineMode;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Deterministic, no dropout.
    Eval,
    /// Inverted dropout with masks drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    /// Unnormalized combined features, `batch x d`.
    pub combined: Array2<T>,
    /// Convex coefficient per row; 0.5 for modes without a gate.
    pub lambda: Array1<T>,
    /// Mixture-branch output, for modes that compute it.
    pub residual: Option<Array2<T>>,
}

/// Activations recorded by [`CombinerParams::forward_cached`].
///
/// The `*_grad` arrays hold the elementwise derivative of the
/// ReLU + dropout stage (0, 1 or the inverted-dropout scale).
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    mode: CombineMode,
    img: Array2<T>,
    txt: Array2<T>,
    concat: Array2<T>,
    concat_grad: Array2<T>,
    gate_hidden: Array2<T>,
    gate_hidden_grad: Array2<T>,
    lambda: Array1<T>,
    mix_hidden: Array2<T>,
    mix_hidden_grad: Array2<T>,
}

impl<T> ForwardCache<T> {
    pub fn mode(&self) -> CombineMode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.img.nrows()
    }
}

impl<T: Scalar> ForwardCache<T> {
    /// Which rectified units passed a nonzero signal (projections, then the
    /// gate and mixture hidden layers). Two forward passes with the same
    /// pattern lie on the same linear piece of every ReLU.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.concat_grad
            .iter()
            .chain(self.gate_hidden_grad.iter())
            .chain(self.mix_hidden_grad.iter())
            .map(|g| *g != T::zero())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: CombinerParams<T>,
    pub img: Array2<T>,
    pub txt: Array2<T>,
}

struct Masks<T> {
    img: Array2<T>,
    txt: Array2<T>,
    gate: Array2<T>,
    mix: Array2<T>,
}

impl<T: Scalar> Masks<T> {
    /// All four masks are always drawn, in a fixed order, so the mode does not
    /// shift the random stream.
    fn draw(batch: usize, p: usize, h: usize, rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mut draw = |cols: usize| {
            Array2::from_shape_fn((batch, cols), |_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
        };
        let img = draw(p);
        let txt = draw(p);
        let gate = draw(h);
        let mix = draw(h);
        Self {
            img,
            txt,
            gate,
            mix,
        }
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// after rounding.
fn sigmoid<T: Scalar>(z: T) -> T {
    let s = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    let upper = T::one() - T::epsilon() / T::from_f64_lossy(2.0);
    s.max(T::min_positive_value()).min(upper)
}

/// ReLU followed by the optional dropout mask; returns activations and their
/// derivative with respect to the pre-activation.
fn relu_dropout<T: Scalar>(pre: Array2<T>, mask: Option<&Array2<T>>) -> (Array2<T>, Array2<T>) {
    let mut grad = pre.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
    if let Some(m) = mask {
        grad *= m;
    }
    let act = &pre * &grad;
    (act, grad)
}

fn check_inputs<T: Scalar>(d: usize, img: &ArrayView2<T>, txt: &ArrayView2<T>) -> Result<()> {
    if img.dim() != txt.dim() {
        return Err(Error::ShapeMismatch(format!(
            "image batch {:?} vs text batch {:?}",
            img.dim(),
            txt.dim()
        )));
    }
    if img.ncols() != d {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} vs combiner dim {d}",
            img.ncols()
        )));
    }
    if img.iter().chain(txt.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "combiner input".into(),
        });
    }
    Ok(())
}

impl<T: Scalar> CombinerParams<T> {
    pub fn forward(
        &self,
        img: ArrayView2<T>,
        txt: ArrayView2<T>,
        mode: CombineMode,
        phase: Phase,
    ) -> Result<Forward<T>> {
        self.forward_cached(img, txt, mode, phase).map(|(f, _)| f)
    }

    pub fn forward_cached(
        &self,
        img: ArrayView2<T>,
        txt: ArrayView2<T>,
        mode: CombineMode,
        phase: Phase,
    ) -> Result<(Forward<T>, ForwardCache<T>)> {
        check_inputs(self.d, &img, &txt)?;
        let batch = img.nrows();
        let half = T::from_f64_lossy(0.5);
        let empty = || Array2::zeros((0, 0));

        if mode == CombineMode::Sum {
            let fwd = Forward {
                combined: &img + &txt,
                lambda: Array1::from_elem(batch, half),
                residual: None,
            };
            let cache = ForwardCache {
                mode,
                img: img.to_owned(),
                txt: txt.to_owned(),
                concat: empty(),
                concat_grad: empty(),
                gate_hidden: empty(),
                gate_hidden_grad: empty(),
                lambda: fwd.lambda.clone(),
                mix_hidden: empty(),
                mix_hidden_grad: empty(),
            };
            return Ok((fwd, cache));
        }

        let p = self.projection_width();
        let masks = match phase {
            Phase::Train { dropout_seed } if self.dropout_rate > 0.0 => Some(Masks::draw(
                batch,
                p,
                self.hidden_width(),
                self.dropout_rate,
                dropout_seed,
            )),
            _ => None,
        };

        let (img_act, img_grad) =
            relu_dropout(self.img_proj.forward(img), masks.as_ref().map(|m| &m.img));
        let (txt_act, txt_grad) =
            relu_dropout(self.txt_proj.forward(txt), masks.as_ref().map(|m| &m.txt));
        let concat = ndarray::concatenate![Axis(1), img_act, txt_act];
        let concat_grad = ndarray::concatenate![Axis(1), img_grad, txt_grad];

        let (gate_hidden, gate_hidden_grad, lambda) = if mode.uses_gate() {
            let (h, g) = relu_dropout(
                self.gate_hidden.forward(concat.view()),
                masks.as_ref().map(|m| &m.gate),
            );
            let z = self.gate_out.forward(h.view());
            let lambda = z.column(0).mapv(sigmoid);
            (h, g, lambda)
        } else {
            (empty(), empty(), Array1::from_elem(batch, half))
        };

        let (mix_hidden, mix_hidden_grad, residual) = if mode.uses_residual() {
            let (h, g) = relu_dropout(
                self.mix_hidden.forward(concat.view()),
                masks.as_ref().map(|m| &m.mix),
            );
            let v = self.mix_out.forward(h.view());
            (h, g, Some(v))
        } else {
            (empty(), empty(), None)
        };

        let mut combined = match mode {
            CombineMode::ResidualOnly => Array2::zeros((batch, self.d)),
            _ => {
                // (1 - lambda) * img + lambda * txt, row-wise
                let mut out = img.to_owned();
                Zip::from(out.rows_mut())
                    .and(txt.rows())
                    .and(&lambda)
                    .for_each(|mut o, t, &l| {
                        o.zip_mut_with(&t, |a, &b| *a = (T::one() - l) * *a + l * b);
                    });
                out
            }
        };
        if let Some(v) = &residual {
            combined += v;
        }

        let fwd = Forward {
            combined,
            lambda: lambda.clone(),
            residual,
        };
        let cache = ForwardCache {
            mode,
            img: img.to_owned(),
            txt: txt.to_owned(),
            concat,
            concat_grad,
            gate_hidden,
            gate_hidden_grad,
            lambda,
            mix_hidden,
            mix_hidden_grad,
        };
        Ok((fwd, cache))
    }

    /// Exact gradients of `<grad_out, combined>` with respect to every
    /// parameter and both inputs, replaying the cached dropout masks.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_out: ArrayView2<T>,
    ) -> Result<Gradients<T>> {
        if grad_out.dim() != cache.img.dim() {
            return Err(Error::ShapeMismatch(format!(
                "grad_out {:?} vs cached batch {:?}",
                grad_out.dim(),
                cache.img.dim()
            )));
        }
        if cache.img.ncols() != self.d {
            return Err(Error::ShapeMismatch(format!(
                "cache dim {} vs combiner dim {}",
                cache.img.ncols(),
                self.d
            )));
        }
        let mut grads = self.zeros_like();
        let mode = cache.mode;

        if mode == CombineMode::Sum {
            return Ok(Gradients {
                params: grads,
                img: grad_out.to_owned(),
                txt: grad_out.to_owned(),
            });
        }

        // Direct paths through the convex combination.
        let (mut d_img, mut d_txt) = match mode {
            CombineMode::ResidualOnly => (
                Array2::zeros(grad_out.raw_dim()),
                Array2::zeros(grad_out.raw_dim()),
            ),
            _ => {
                let mut di = grad_out.to_owned();
                let mut dt = grad_out.to_owned();
                Zip::from(di.rows_mut())
                    .and(dt.rows_mut())
                    .and(&cache.lambda)
                    .for_each(|mut a, mut b, &l| {
                        a.mapv_inplace(|g| g * (T::one() - l));
                        b.mapv_inplace(|g| g * l);
                    });
                (di, dt)
            }
        };

        let mut d_concat = Array2::<T>::zeros(cache.concat.raw_dim());

        if mode.uses_gate() {
            // d lambda_i = sum_k g_ik (txt_ik - img_ik); dz = d lambda * l (1 - l)
            let diff = &cache.txt - &cache.img;
            let d_lambda = (&grad_out * &diff).sum_axis(Axis(1));
            let dz = Zip::from(&d_lambda)
                .and(&cache.lambda)
                .map_collect(|&g, &l| g * l * (T::one() - l))
                .insert_axis(Axis(1));
            let d_hidden = branch_backward(
                &self.gate_out,
                &mut grads.gate_out,
                cache.gate_hidden.view(),
                dz.view(),
            );
            let d_pre = d_hidden * &cache.gate_hidden_grad;
            d_concat += &branch_backward(
                &self.gate_hidden,
                &mut grads.gate_hidden,
                cache.concat.view(),
                d_pre.view(),
            );
        }

        if mode.uses_residual() {
            let d_hidden = branch_backward(
                &self.mix_out,
                &mut grads.mix_out,
                cache.mix_hidden.view(),
                grad_out,
            );
            let d_pre = d_hidden * &cache.mix_hidden_grad;
            d_concat += &branch_backward(
                &self.mix_hidden,
                &mut grads.mix_hidden,
                cache.concat.view(),
                d_pre.view(),
            );
        }

        let d_concat_pre = d_concat * &cache.concat_grad;
        let p = self.projection_width();
        d_img += &branch_backward(
            &self.img_proj,
            &mut grads.img_proj,
            cache.img.view(),
            d_concat_pre.slice(s![.., ..p]),
        );
        d_txt += &branch_backward(
            &self.txt_proj,
            &mut grads.txt_proj,
            cache.txt.view(),
            d_concat_pre.slice(s![.., p..]),
        );

        Ok(Gradients {
            params: grads,
            img: d_img,
            txt: d_txt,
        })
    }
}

/// Backward through `y = x W + b`: writes dW, db and returns dx.
fn branch_backward<T: Scalar>(
    layer: &Linear<T>,
    grad: &mut Linear<T>,
    input: ArrayView2<T>,
    d_out: ArrayView2<T>,
) -> Array2<T> {
    grad.weight = input.t().dot(&d_out);
    grad.bias = d_out.sum_axis(Axis(0));
    d_out.dot(&layer.weight.t())
}
