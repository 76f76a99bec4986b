//! Forward-only inference context at benchmark precision.
//!
//! Training runs in f64 on the tape; benchmarked inference casts the
//! weights once into f32 (`half = false`) or through IEEE binary16
//! (`half = true`, storage emulation: values are rounded to the f16 grid
//! after every layer while arithmetic stays f32, since the host has no
//! native half compute).

use half::f16;
use ndarray::{Array1, Array2, Array4, ArrayD};

use super::{ParamId, ParamStore};

pub struct InferCtx {
    values: Vec<ArrayD<f32>>,
    pub half: bool,
}

fn cast_f32(a: &ArrayD<f64>, half: bool) -> ArrayD<f32> {
    if half {
        a.mapv(|v| f16::from_f64(v).to_f32())
    } else {
        a.mapv(|v| v as f32)
    }
}

impl InferCtx {
    /// Cast every parameter in the store.
    pub fn new(store: &ParamStore, half: bool) -> Self {
        let values = store
            .entries()
            .iter()
            .map(|e| cast_f32(&e.value, half))
            .collect();
        InferCtx { values, half }
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.values[id.0]
    }

    pub fn value4(&self, id: ParamId) -> Array4<f32> {
        self.values[id.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("rank-4 parameter")
            .to_owned()
    }

    pub fn value2(&self, id: ParamId) -> Array2<f32> {
        self.values[id.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("rank-2 parameter")
            .to_owned()
    }

    pub fn value1(&self, id: ParamId) -> Array1<f32> {
        self.values[id.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("rank-1 parameter")
            .to_owned()
    }

    /// Round activations to the f16 grid in half mode.
    pub fn quantize4(&self, mut x: Array4<f32>) -> Array4<f32> {
        if self.half {
            x.mapv_inplace(|v| f16::from_f32(v).to_f32());
        }
        x
    }

    pub fn quantize2(&self, mut x: Array2<f32>) -> Array2<f32> {
        if self.half {
            x.mapv_inplace(|v| f16::from_f32(v).to_f32());
        }
        x
    }

    /// Quantize an input image batch the same way the weights were cast.
    pub fn cast_input(&self, x: &Array4<f64>) -> Array4<f32> {
        if self.half {
            x.mapv(|v| f16::from_f64(v).to_f32())
        } else {
            x.mapv(|v| v as f32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn half_cast_rounds_to_f16_grid() {
        let mut store = ParamStore::new();
        let v = 0.1234567890123_f64;
        let id = store.add("w", ArrayD::from_elem(IxDyn(&[1]), v), true, false);

        let single = InferCtx::new(&store, false);
        assert_eq!(single.value(id)[[0]], v as f32);

        let half = InferCtx::new(&store, true);
        let got = half.value(id)[[0]];
        assert_eq!(got, f16::from_f64(v).to_f32());
        assert_ne!(got, v as f32); // the grid is coarser
    }

    #[test]
    fn quantize_is_identity_in_single_mode() {
        let store = ParamStore::new();
        let ctx = InferCtx::new(&store, false);
        let x = Array4::from_elem((1, 1, 2, 2), 0.333_333_3_f32);
        assert_eq!(ctx.quantize4(x.clone()), x);
    }
}
