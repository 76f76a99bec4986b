//! Feature pyramid over the backbone's C3..C5 outputs, producing five
//! levels P3..P7 at a uniform channel width.

use ndarray::Array4 as NdArray4;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{FeatureMaps, FeatureMaps32};
use crate::error::{DetError, Result};
use crate::layers::{Activation, BatchNorm2d, Conv2d};
use crate::tensor::{kernels, Forward, InferCtx, ParamStore, TensorId};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FpnConfig {
    /// Channel width of every pyramid level (canonically 256).
    pub width: usize,
    /// Apply batch norm + activation after the output convolutions. When
    /// disabled only the activation between P6 and P7 remains.
    pub norm: bool,
    pub activation: Activation,
}

impl Default for FpnConfig {
    fn default() -> Self {
        FpnConfig {
            width: 256,
            norm: true,
            activation: Activation::Silu,
        }
    }
}

/// The five pyramid levels, strides 8..128.
#[derive(Debug, Clone, Copy)]
pub struct PyramidFeatures {
    pub p3: TensorId,
    pub p4: TensorId,
    pub p5: TensorId,
    pub p6: TensorId,
    pub p7: TensorId,
}

impl PyramidFeatures {
    pub fn levels(&self) -> [TensorId; 5] {
        [self.p3, self.p4, self.p5, self.p6, self.p7]
    }
}

pub struct Fpn {
    pub config: FpnConfig,
    lateral: [Conv2d; 3],
    output: [Conv2d; 3],
    p6_conv: Conv2d,
    p7_conv: Conv2d,
    norms: Option<[BatchNorm2d; 5]>,
}

impl Fpn {
    /// `in_channels` are the widths of C3, C4, C5.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: [usize; 3],
        config: FpnConfig,
    ) -> Result<Self> {
        if config.width == 0 {
            return Err(DetError::config("fpn.width", "width must be positive"));
        }
        let w = config.width;
        let lateral = [
            Conv2d::new(store, rng, &format!("{prefix}.lateral3"), in_channels[0], w, 1, 1, true),
            Conv2d::new(store, rng, &format!("{prefix}.lateral4"), in_channels[1], w, 1, 1, true),
            Conv2d::new(store, rng, &format!("{prefix}.lateral5"), in_channels[2], w, 1, 1, true),
        ];
        let has_norm = config.norm;
        let mk_out = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, stride| {
            Conv2d::new(store, rng, name, c_in, w, 3, stride, !has_norm)
        };
        let output = [
            mk_out(store, rng, &format!("{prefix}.output3"), w, 1),
            mk_out(store, rng, &format!("{prefix}.output4"), w, 1),
            mk_out(store, rng, &format!("{prefix}.output5"), w, 1),
        ];
        let p6_conv = mk_out(store, rng, &format!("{prefix}.p6"), in_channels[2], 2);
        let p7_conv = mk_out(store, rng, &format!("{prefix}.p7"), w, 2);
        let norms = has_norm.then(|| {
            [
                BatchNorm2d::new(store, &format!("{prefix}.norm3"), w),
                BatchNorm2d::new(store, &format!("{prefix}.norm4"), w),
                BatchNorm2d::new(store, &format!("{prefix}.norm5"), w),
                BatchNorm2d::new(store, &format!("{prefix}.norm6"), w),
                BatchNorm2d::new(store, &format!("{prefix}.norm7"), w),
            ]
        });
        Ok(Fpn {
            config,
            lateral,
            output,
            p6_conv,
            p7_conv,
            norms,
        })
    }

    fn finish(&self, f: &mut Forward, idx: usize, raw: TensorId) -> TensorId {
        match &self.norms {
            Some(norms) => {
                let n = norms[idx].forward(f, raw);
                self.config.activation.apply(f, n)
            }
            None => raw,
        }
    }

    pub fn forward(&self, f: &mut Forward, maps: &FeatureMaps) -> Result<PyramidFeatures> {
        for (name, id) in [("C3", maps.c3), ("C4", maps.c4), ("C5", maps.c5)] {
            let s = f.tape.value(id).shape().to_vec();
            if s[2] % 2 != 0 || s[3] % 2 != 0 {
                return Err(DetError::Shape(format!(
                    "{name} spatial dims {}x{} are not divisible by 2; \
                     input size must be divisible by 128",
                    s[2], s[3]
                )));
            }
        }
        // top-down pathway with nearest-neighbor upsampling
        let m5 = self.lateral[2].forward(f, maps.c5);
        let up5 = f.tape.upsample_nearest2(m5);
        let l4 = self.lateral[1].forward(f, maps.c4);
        let m4 = f.tape.add(l4, up5);
        let up4 = f.tape.upsample_nearest2(m4);
        let l3 = self.lateral[0].forward(f, maps.c3);
        let m3 = f.tape.add(l3, up4);

        let p3 = {
            let r = self.output[0].forward(f, m3);
            self.finish(f, 0, r)
        };
        let p4 = {
            let r = self.output[1].forward(f, m4);
            self.finish(f, 1, r)
        };
        let p5 = {
            let r = self.output[2].forward(f, m5);
            self.finish(f, 2, r)
        };
        let p6 = {
            let r = self.p6_conv.forward(f, maps.c5);
            self.finish(f, 3, r)
        };
        let p7 = {
            // without norm the activation still sits between P6 and P7
            let src = if self.norms.is_some() {
                p6
            } else {
                self.config.activation.apply(f, p6)
            };
            let r = self.p7_conv.forward(f, src);
            self.finish(f, 4, r)
        };
        Ok(PyramidFeatures { p3, p4, p5, p6, p7 })
    }
}


impl Fpn {
    fn finish_infer(&self, ctx: &InferCtx, idx: usize, raw: NdArray4<f32>) -> NdArray4<f32> {
        match &self.norms {
            Some(norms) => {
                let n = norms[idx].infer(ctx, &raw);
                self.config.activation.infer4(n)
            }
            None => raw,
        }
    }

    /// Forward-only pyramid at benchmark precision; returns P3..P7.
    pub fn infer(&self, ctx: &InferCtx, maps: &FeatureMaps32) -> [NdArray4<f32>; 5] {
        let m5 = self.lateral[2].infer(ctx, &maps.c5);
        let up5 = kernels::upsample_nearest2(&m5.view());
        let m4 = ctx.quantize4(self.lateral[1].infer(ctx, &maps.c4) + &up5);
        let up4 = kernels::upsample_nearest2(&m4.view());
        let m3 = ctx.quantize4(self.lateral[0].infer(ctx, &maps.c3) + &up4);
        let p3 = self.finish_infer(ctx, 0, self.output[0].infer(ctx, &m3));
        let p4 = self.finish_infer(ctx, 1, self.output[1].infer(ctx, &m4));
        let p5 = self.finish_infer(ctx, 2, self.output[2].infer(ctx, &m5));
        let p6 = self.finish_infer(ctx, 3, self.p6_conv.infer(ctx, &maps.c5));
        let p7 = {
            let src = if self.norms.is_some() {
                p6.clone()
            } else {
                self.config.activation.infer4(p6.clone())
            };
            self.finish_infer(ctx, 4, self.p7_conv.infer(ctx, &src))
        };
        [p3, p4, p5, p6, p7]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneSpec, ResNetRs};
    use crate::tensor::Mode;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn tiny_backbone(store: &mut ParamStore) -> ResNetRs {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = BackboneSpec {
            width_mult: 0.0625,
            ..Default::default()
        };
        ResNetRs::new(store, &mut rng, "bb", &spec).unwrap()
    }

    #[test]
    fn pyramid_shapes_for_640_input() {
        let mut store = ParamStore::new();
        let bb = tiny_backbone(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = FpnConfig { width: 32, ..Default::default() };
        let fpn = Fpn::new(
            &mut store,
            &mut rng,
            "fpn",
            [bb.stage_channels[1], bb.stage_channels[2], bb.stage_channels[3]],
            cfg,
        )
        .unwrap();
        let mut f = Forward::new(&mut store, Mode::Eval);
        let x = f.tape.constant(ArrayD::from_elem(IxDyn(&[1, 3, 640, 640]), 0.1));
        let maps = bb.forward(&mut f, x);
        let p = fpn.forward(&mut f, &maps).unwrap();
        let sizes: Vec<usize> = p
            .levels()
            .iter()
            .map(|id| f.tape.value(*id).shape()[2])
            .collect();
        assert_eq!(sizes, vec![80, 40, 20, 10, 5]);
        for id in p.levels() {
            assert_eq!(f.tape.value(id).shape()[1], 32);
        }
    }

    #[test]
    fn zero_inputs_give_zero_pyramid() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fpn = Fpn::new(&mut store, &mut rng, "fpn", [8, 16, 32], FpnConfig {
            width: 8,
            ..Default::default()
        })
        .unwrap();
        let mut f = Forward::new(&mut store, Mode::Eval);
        let c3 = f.tape.constant(ArrayD::zeros(IxDyn(&[1, 8, 16, 16])));
        let c4 = f.tape.constant(ArrayD::zeros(IxDyn(&[1, 16, 8, 8])));
        let c5 = f.tape.constant(ArrayD::zeros(IxDyn(&[1, 32, 4, 4])));
        let maps = FeatureMaps { c2: c3, c3, c4, c5 };
        let p = fpn.forward(&mut f, &maps).unwrap();
        for id in p.levels() {
            assert!(f.tape.value(id).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn top_down_sum_matches_hand_computation() {
        // 1-channel toy with identity laterals and identity output convs,
        // norm disabled: P4 = C4 + up2(C5).
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fpn = Fpn::new(&mut store, &mut rng, "fpn", [1, 1, 1], FpnConfig {
            width: 1,
            norm: false,
            activation: Activation::Silu,
        })
        .unwrap();
        // identity 1x1 laterals
        for conv in &fpn.lateral {
            store.value_mut(conv.w).fill(1.0);
            store.value_mut(conv.b.unwrap()).fill(0.0);
        }
        // identity 3x3 output convs (center tap)
        for conv in [&fpn.output[0], &fpn.output[1], &fpn.output[2]] {
            let w = store.value_mut(conv.w);
            w.fill(0.0);
            w[[0, 0, 1, 1]] = 1.0;
            store.value_mut(conv.b.unwrap()).fill(0.0);
        }
        let mut f = Forward::new(&mut store, Mode::Eval);
        let c3v = ArrayD::from_elem(IxDyn(&[1, 1, 8, 8]), 0.25);
        let c4v = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| (ix[2] * 4 + ix[3]) as f64);
        let c5v = ArrayD::from_shape_fn(IxDyn(&[1, 1, 2, 2]), |ix| 10.0 * (ix[2] * 2 + ix[3]) as f64);
        let c3 = f.tape.constant(c3v);
        let c4 = f.tape.constant(c4v.clone());
        let c5 = f.tape.constant(c5v.clone());
        let maps = FeatureMaps { c2: c3, c3, c4, c5 };
        let p = fpn.forward(&mut f, &maps).unwrap();
        let p4 = f.tape.value(p.p4);
        for i in 0..4 {
            for j in 0..4 {
                let want = c4v[[0, 0, i, j]] + c5v[[0, 0, i / 2, j / 2]];
                assert!((p4[[0, 0, i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_odd_spatial_dims() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fpn = Fpn::new(&mut store, &mut rng, "fpn", [4, 4, 4], FpnConfig {
            width: 4,
            ..Default::default()
        })
        .unwrap();
        let mut f = Forward::new(&mut store, Mode::Eval);
        let c3 = f.tape.constant(ArrayD::zeros(IxDyn(&[1, 4, 7, 7])));
        let c4 = f.tape.constant(ArrayD::zeros(IxDyn(&[1, 4, 4, 4])));
        let c5 = f.tape.constant(ArrayD::zeros(IxDyn(&[1, 4, 2, 2])));
        let maps = FeatureMaps { c2: c3, c3, c4, c5 };
        assert!(fpn.forward(&mut f, &maps).is_err());
    }
}
