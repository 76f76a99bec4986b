//! Reusable network layers over the tape: convolution, batch norm, linear,
//! and the activation selector.

use ndarray::{Array2 as NdArray2, Array4 as NdArray4, Ix1};
use rand_chacha::ChaCha8Rng;

use crate::tensor::infer::InferCtx;
use crate::tensor::{kernels, params, Forward, ParamId, ParamStore, TensorId};

/// Model-wide activation choice. The default is SiLU; ReLU exists for the
/// ablation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    pub fn apply(&self, f: &mut Forward, x: TensorId) -> TensorId {
        match self {
            Activation::Silu => f.tape.silu(x),
            Activation::Relu => f.tape.relu(x),
        }
    }
}

/// Scale a canonical channel width by the desk-scale multiplier, rounding to
/// a multiple of 4 (minimum 4).
pub fn scaled_width(base: usize, mult: f64) -> usize {
    if (mult - 1.0).abs() < 1e-12 {
        return base;
    }
    let w = (base as f64 * mult / 4.0).round() as usize * 4;
    w.max(4)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            params::conv_init(rng, c_out, c_in, kernel),
            true,
            false,
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), params::zeros(&[c_out]), true, false));
        Conv2d {
            w,
            b,
            stride,
            pad: kernel / 2,
            kernel,
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: TensorId) -> TensorId {
        let w = f.param(self.w);
        let b = self.b.map(|bid| f.param(bid));
        f.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Per-device batch normalization with momentum 0.99 and epsilon 1e-3.
/// Scale/offset are weight-decay exempt; running statistics are buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), params::full(&[c], 1.0), true, true),
            beta: store.add(format!("{name}.beta"), params::zeros(&[c]), true, true),
            running_mean: store.add(format!("{name}.running_mean"), params::zeros(&[c]), false, false),
            running_var: store.add(format!("{name}.running_var"), params::full(&[c], 1.0), false, false),
            momentum: 0.99,
            eps: 1e-3,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: TensorId) -> TensorId {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        if f.is_train() {
            let (y, mean, var) = f.tape.batchnorm(x, gamma, beta, None, self.eps);
            let m = self.momentum;
            {
                let rm = f.store.value_mut(self.running_mean);
                let rm1 = rm.view().into_dimensionality::<Ix1>().unwrap().to_owned() * m
                    + &(mean.clone() * (1.0 - m));
                rm.assign(&rm1.into_dyn());
            }
            {
                let rv = f.store.value_mut(self.running_var);
                let rv1 = rv.view().into_dimensionality::<Ix1>().unwrap().to_owned() * m
                    + &(var.clone() * (1.0 - m));
                rv.assign(&rv1.into_dyn());
            }
            y
        } else {
            let rm = f
                .store
                .value(self.running_mean)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            let rv = f
                .store
                .value(self.running_var)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            let (y, _, _) = f.tape.batchnorm(x, gamma, beta, Some((rm, rv)), self.eps);
            y
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Linear {
            w: store.add(
                format!("{name}.weight"),
                params::linear_init(rng, out_dim, in_dim),
                true,
                false,
            ),
            b: store.add(format!("{name}.bias"), params::zeros(&[out_dim]), true, false),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: TensorId) -> TensorId {
        let w = f.param(self.w);
        let b = f.param(self.b);
        f.tape.linear(x, w, Some(b))
    }
}


// ---------------------------------------------------------------------------
// forward-only inference at benchmark precision
// ---------------------------------------------------------------------------

impl Activation {
    pub fn infer4(&self, x: NdArray4<f32>) -> NdArray4<f32> {
        match self {
            Activation::Silu => x.mapv(kernels::silu),
            Activation::Relu => x.mapv(|v| v.max(0.0)),
        }
    }

    pub fn infer2(&self, x: NdArray2<f32>) -> NdArray2<f32> {
        match self {
            Activation::Silu => x.mapv(kernels::silu),
            Activation::Relu => x.mapv(|v| v.max(0.0)),
        }
    }
}

impl Conv2d {
    pub fn infer(&self, ctx: &InferCtx, x: &NdArray4<f32>) -> NdArray4<f32> {
        let w = ctx.value4(self.w);
        let b = self.b.map(|bid| ctx.value1(bid));
        let y = kernels::conv2d(&x.view(), &w.view(), b.as_ref(), self.stride, self.pad);
        ctx.quantize4(y)
    }
}

impl BatchNorm2d {
    /// Eval-mode normalization with the running statistics.
    pub fn infer(&self, ctx: &InferCtx, x: &NdArray4<f32>) -> NdArray4<f32> {
        let y = kernels::batchnorm_apply(
            &x.view(),
            &ctx.value1(self.running_mean),
            &ctx.value1(self.running_var),
            &ctx.value1(self.gamma),
            &ctx.value1(self.beta),
            self.eps as f32,
        );
        ctx.quantize4(y)
    }
}

impl Linear {
    pub fn infer(&self, ctx: &InferCtx, x: &NdArray2<f32>) -> NdArray2<f32> {
        let y = kernels::linear(x, &ctx.value2(self.w), Some(&ctx.value1(self.b)));
        ctx.quantize2(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn scaled_width_rounds_and_floors() {
        assert_eq!(scaled_width(256, 1.0), 256);
        assert_eq!(scaled_width(256, 0.125), 32);
        assert_eq!(scaled_width(64, 0.0625), 4);
        assert_eq!(scaled_width(32, 0.0625), 4); // floored at 4
    }

    #[test]
    fn batchnorm_updates_running_stats_only_in_train() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        let x = ndarray::ArrayD::from_elem(IxDyn(&[2, 2, 3, 3]), 5.0);

        let mut f = Forward::new(&mut store, Mode::Eval);
        let xid = f.tape.constant(x.clone());
        bn.forward(&mut f, xid);
        drop(f);
        assert_eq!(store.value(bn.running_mean).first().unwrap(), &0.0);

        let mut f = Forward::new(&mut store, Mode::Train { step: 0, seed: 0 });
        let xid = f.tape.constant(x);
        bn.forward(&mut f, xid);
        drop(f);
        // rm = 0.99 * 0 + 0.01 * 5
        assert!((store.value(bn.running_mean).first().unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn conv_layer_names_follow_dotted_paths() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let c = Conv2d::new(&mut store, &mut rng, "stem.conv1", 3, 8, 3, 2, false);
        assert_eq!(store.entry(c.w).name, "stem.conv1.weight");
        assert!(c.b.is_none());
    }
}
