//! Reference micro-CNN:
//! `conv3×3/2 (→16) → relu → conv3×3/2 (→32) → relu → global avg pool →
//! affine (→4) → softmax`, both convolutions zero-padded by one pixel.
//!
//! Activations are HWC. Convolution weights are stored `[kh][kw][in][out]`,
//! the affine layer `[in][out]`. All parameters live in one flat buffer in
//! the order listed by [`MicroCnn::tensors`]; gradients share that layout.

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pss::PyramidSamplingSet;
use crate::rng::SeededRng;
use crate::score::NUM_CLASSES;

use super::loss::ClassWeights;

pub trait Real: Float + Send + Sync + Debug + std::iter::Sum + 'static {}
impl Real for f32 {}
impl Real for f64 {}

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
}

impl Architecture {
    pub fn reference(input_channels: usize) -> Self {
        Self {
            input_channels,
            conv1_channels: 16,
            conv2_channels: 32,
        }
    }

    /// Layer list as stored in the model container header.
    pub fn layers(&self) -> serde_json::Value {
        serde_json::json!([
            {"type": "conv2d", "in": self.input_channels, "out": self.conv1_channels,
             "kernel": KERNEL, "stride": STRIDE, "padding": PAD},
            {"type": "relu"},
            {"type": "conv2d", "in": self.conv1_channels, "out": self.conv2_channels,
             "kernel": KERNEL, "stride": STRIDE, "padding": PAD},
            {"type": "relu"},
            {"type": "global_avg_pool"},
            {"type": "linear", "in": self.conv2_channels, "out": NUM_CLASSES},
            {"type": "softmax"}
        ])
    }

    /// Inverse of [`Architecture::layers`]; rejects anything else.
    pub fn from_layers(layers: &serde_json::Value) -> Result<Self> {
        let get = |i: usize, key: &str| -> Result<usize> {
            layers
                .get(i)
                .and_then(|l| l.get(key))
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("layer {i} lacks integer field {key:?}")))
        };
        let arch = Architecture {
            input_channels: get(0, "in")?,
            conv1_channels: get(0, "out")?,
            conv2_channels: get(2, "out")?,
        };
        if &arch.layers() != layers {
            return Err(Error::Format("unsupported layer list".into()));
        }
        Ok(arch)
    }

    pub fn tensors(&self) -> Vec<TensorSpec> {
        let (cin, c1, c2) = (self.input_channels, self.conv1_channels, self.conv2_channels);
        let shapes: [(&str, Vec<usize>); 6] = [
            ("conv1.weight", vec![KERNEL, KERNEL, cin, c1]),
            ("conv1.bias", vec![c1]),
            ("conv2.weight", vec![KERNEL, KERNEL, c1, c2]),
            ("conv2.bias", vec![c2]),
            ("fc.weight", vec![c2, NUM_CLASSES]),
            ("fc.bias", vec![NUM_CLASSES]),
        ];
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let spec = TensorSpec {
                    name: name.to_string(),
                    shape,
                    offset,
                    len,
                };
                offset += len;
                spec
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
    #[serde(skip)]
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroCnn<T: Real = f32> {
    arch: Architecture,
    params: Vec<T>,
}

pub type MicroCnnModel = MicroCnn<f32>;

/// Output side of a 3×3, stride-2, pad-1 convolution.
fn conv_out(side: usize) -> usize {
    (side + 2 * PAD - KERNEL) / STRIDE + 1
}

/// Intermediate activations kept for the backward pass.
struct Trace<T> {
    side0: usize,
    side1: usize,
    side2: usize,
    a1: Vec<T>,
    a2: Vec<T>,
    pooled: Vec<T>,
    probs: [T; NUM_CLASSES],
}

impl<T: Real> MicroCnn<T> {
    /// He-normal convolutions, scaled-normal affine layer, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.input_channels == 0 || arch.conv1_channels == 0 || arch.conv2_channels == 0 {
            return Err(Error::Config(format!("degenerate architecture {arch:?}")));
        }
        let mut rng = SeededRng::new(seed);
        let mut params = vec![T::zero(); arch.param_count()];
        for t in arch.tensors() {
            let std = match t.name.as_str() {
                "conv1.weight" => (2.0 / (9 * arch.input_channels) as f64).sqrt(),
                "conv2.weight" => (2.0 / (9 * arch.conv1_channels) as f64).sqrt(),
                "fc.weight" => (1.0 / arch.conv2_channels as f64).sqrt(),
                _ => continue,
            };
            for p in &mut params[t.offset..t.offset + t.len] {
                *p = T::from(std * rng.next_gaussian()).unwrap();
            }
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<T>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for an architecture needing {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_channels(&self) -> usize {
        self.arch.input_channels
    }

    pub fn tensors(&self) -> Vec<TensorSpec> {
        self.arch.tensors()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.tensors()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.offset..t.offset + t.len])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let t = self.tensors().into_iter().find(|t| t.name == name)?;
        Some(&mut self.params[t.offset..t.offset + t.len])
    }

    pub fn cast<U: Real>(&self) -> MicroCnn<U> {
        MicroCnn {
            arch: self.arch,
            params: self.params.iter().map(|&p| U::from(p).unwrap()).collect(),
        }
    }

    fn slices(&self) -> [&[T]; 6] {
        let t = self.tensors();
        std::array::from_fn(|i| &self.params[t[i].offset..t[i].offset + t[i].len])
    }

    fn check_input(&self, pss: &PyramidSamplingSet) -> Result<()> {
        if pss.stacked_channels() != self.arch.input_channels {
            return Err(Error::Shape(format!(
                "PSS has {} stacked channels, model expects {}",
                pss.stacked_channels(),
                self.arch.input_channels
            )));
        }
        Ok(())
    }

    /// Class probabilities for one PSS.
    pub fn forward(&self, pss: &PyramidSamplingSet) -> Result<[T; NUM_CLASSES]> {
        self.check_input(pss)?;
        Ok(self.trace(&pss.stacked(), pss.patch_size()).probs)
    }

    /// Probabilities for a raw HWC byte tensor of side `side`.
    pub fn forward_stacked(&self, input: &[u8], side: usize) -> Result<[T; NUM_CLASSES]> {
        if input.len() != side * side * self.arch.input_channels {
            return Err(Error::Shape(format!(
                "input of {} bytes is not {side}x{side}x{}",
                input.len(),
                self.arch.input_channels
            )));
        }
        Ok(self.trace(input, side).probs)
    }

    fn trace(&self, input: &[u8], side0: usize) -> Trace<T> {
        let [w1, b1, w2, b2, wf, bf] = self.slices();
        let (cin, c1, c2) = (self.arch.input_channels, self.arch.conv1_channels, self.arch.conv2_channels);
        let lut = input_lut::<T>();
        let side1 = conv_out(side0);
        let mut a1 = conv3x3s2(input, side0, cin, |v| lut[v as usize], w1, b1, c1);
        relu(&mut a1);
        let side2 = conv_out(side1);
        let mut a2 = conv3x3s2(&a1, side1, c1, |v| v, w2, b2, c2);
        relu(&mut a2);
        let npix = T::from(side2 * side2).unwrap();
        let mut pooled = vec![T::zero(); c2];
        for px in a2.chunks_exact(c2) {
            for (p, &v) in pooled.iter_mut().zip(px) {
                *p = *p + v;
            }
        }
        for p in &mut pooled {
            *p = *p / npix;
        }
        let mut logits = [T::zero(); NUM_CLASSES];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = bf[j] + (0..c2).map(|c| pooled[c] * wf[c * NUM_CLASSES + j]).sum::<T>();
        }
        Trace {
            side0,
            side1,
            side2,
            a1,
            a2,
            pooled,
            probs: softmax(logits),
        }
    }

    /// Loss and parameter gradient for a batch of stacked inputs, using
    /// `-(1/m) Σ w_y ln p_y`. Samples are processed in order and gradients
    /// summed sequentially, so the result does not depend on threading.
    pub fn loss_and_grad(
        &self,
        inputs: &[(&[u8], usize)],
        labels: &[usize],
        weights: &ClassWeights,
    ) -> Result<(f64, Vec<T>)> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if inputs.len() != labels.len() {
            return Err(Error::Arity(format!("{} inputs for {} labels", inputs.len(), labels.len())));
        }
        let m = inputs.len() as f64;
        let mut grad = vec![T::zero(); self.params.len()];
        let mut loss = 0.0;
        for (&(input, side), &label) in inputs.iter().zip(labels) {
            if input.len() != side * side * self.arch.input_channels {
                return Err(Error::Shape(format!("input of {} bytes is not {side}x{side}", input.len())));
            }
            let trace = self.trace(input, side);
            let w = weights.0[label];
            let p = trace.probs[label].to_f64().unwrap();
            loss -= w * p.max(super::loss::PROB_FLOOR).ln() / m;
            let coef = T::from(w / m).unwrap();
            let mut dlogits = [T::zero(); NUM_CLASSES];
            for (j, d) in dlogits.iter_mut().enumerate() {
                let y = if j == label { T::one() } else { T::zero() };
                *d = coef * (trace.probs[j] - y);
            }
            self.backward(input, &trace, dlogits, &mut grad);
        }
        Ok((loss, grad))
    }

    fn backward(&self, input: &[u8], tr: &Trace<T>, dlogits: [T; NUM_CLASSES], grad: &mut [T]) {
        let [_, _, w2, _, wf, _] = self.slices();
        let specs = self.tensors();
        let (cin, c1, c2) = (self.arch.input_channels, self.arch.conv1_channels, self.arch.conv2_channels);
        let (g_rest, g_fb) = grad.split_at_mut(specs[5].offset);
        let (g_rest, g_fw) = g_rest.split_at_mut(specs[4].offset);
        let (g_rest, g_b2) = g_rest.split_at_mut(specs[3].offset);
        let (g_rest, g_w2) = g_rest.split_at_mut(specs[2].offset);
        let (g_w1, g_b1) = g_rest.split_at_mut(specs[1].offset);

        // affine + pool
        let mut dpooled = vec![T::zero(); c2];
        for c in 0..c2 {
            for j in 0..NUM_CLASSES {
                g_fw[c * NUM_CLASSES + j] = g_fw[c * NUM_CLASSES + j] + tr.pooled[c] * dlogits[j];
                dpooled[c] = dpooled[c] + wf[c * NUM_CLASSES + j] * dlogits[j];
            }
        }
        for j in 0..NUM_CLASSES {
            g_fb[j] = g_fb[j] + dlogits[j];
        }
        let npix2 = T::from(tr.side2 * tr.side2).unwrap();
        let mut dz2 = vec![T::zero(); tr.a2.len()];
        for (dpx, apx) in dz2.chunks_exact_mut(c2).zip(tr.a2.chunks_exact(c2)) {
            for c in 0..c2 {
                if apx[c] > T::zero() {
                    dpx[c] = dpooled[c] / npix2;
                }
            }
        }
        for px in dz2.chunks_exact(c2) {
            for (gb, &d) in g_b2.iter_mut().zip(px) {
                *gb = *gb + d;
            }
        }
        let mut da1 = vec![T::zero(); tr.a1.len()];
        conv3x3s2_backward(&tr.a1, tr.side1, c1, |v| v, &dz2, tr.side2, c2, w2, g_w2, Some(&mut da1));

        let mut dz1 = da1;
        for (d, &a) in dz1.iter_mut().zip(&tr.a1) {
            if a <= T::zero() {
                *d = T::zero();
            }
        }
        for px in dz1.chunks_exact(c1) {
            for (gb, &d) in g_b1.iter_mut().zip(px) {
                *gb = *gb + d;
            }
        }
        let lut = input_lut::<T>();
        conv3x3s2_backward(input, tr.side0, cin, |v| lut[v as usize], &dz1, tr.side1, c1, &[], g_w1, None);
    }
}

/// Maps bytes to `[-1, 1]`.
fn input_lut<T: Real>() -> [T; 256] {
    std::array::from_fn(|i| T::from((i as f64 - 127.5) / 127.5).unwrap())
}

fn relu<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

pub(crate) fn softmax<T: Real>(logits: [T; NUM_CLASSES]) -> [T; NUM_CLASSES] {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps = logits.map(|l| (l - max).exp());
    let sum: T = exps.iter().copied().sum();
    exps.map(|e| e / sum)
}

/// Input pixel `(iy, ix)` feeding output `(oy, ox)` through tap `(k, l)`.
#[inline]
fn tap(o: usize, k: usize, side: usize) -> Option<usize> {
    let i = (o * STRIDE + k).checked_sub(PAD)?;
    (i < side).then_some(i)
}

fn conv3x3s2<I: Copy, T: Real>(
    input: &[I],
    side: usize,
    cin: usize,
    value: impl Fn(I) -> T,
    w: &[T],
    b: &[T],
    cout: usize,
) -> Vec<T> {
    let out_side = conv_out(side);
    let mut out = vec![T::zero(); out_side * out_side * cout];
    for oy in 0..out_side {
        for ox in 0..out_side {
            let acc = &mut out[(oy * out_side + ox) * cout..(oy * out_side + ox + 1) * cout];
            acc.copy_from_slice(b);
            for ky in 0..KERNEL {
                let Some(iy) = tap(oy, ky, side) else { continue };
                for kx in 0..KERNEL {
                    let Some(ix) = tap(ox, kx, side) else { continue };
                    let px = &input[(iy * side + ix) * cin..(iy * side + ix + 1) * cin];
                    let wk = &w[(ky * KERNEL + kx) * cin * cout..(ky * KERNEL + kx + 1) * cin * cout];
                    for (&raw, wrow) in px.iter().zip(wk.chunks_exact(cout)) {
                        let v = value(raw);
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + v * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates the weight gradient into `gw` and, if requested, the input
/// gradient into `dinput`.
#[allow(clippy::too_many_arguments)]
fn conv3x3s2_backward<I: Copy, T: Real>(
    input: &[I],
    side: usize,
    cin: usize,
    value: impl Fn(I) -> T,
    dout: &[T],
    out_side: usize,
    cout: usize,
    w: &[T],
    gw: &mut [T],
    mut dinput: Option<&mut [T]>,
) {
    for oy in 0..out_side {
        for ox in 0..out_side {
            let d = &dout[(oy * out_side + ox) * cout..(oy * out_side + ox + 1) * cout];
            if d.iter().all(|v| v.is_zero()) {
                continue;
            }
            for ky in 0..KERNEL {
                let Some(iy) = tap(oy, ky, side) else { continue };
                for kx in 0..KERNEL {
                    let Some(ix) = tap(ox, kx, side) else { continue };
                    let base = (iy * side + ix) * cin;
                    let kbase = (ky * KERNEL + kx) * cin * cout;
                    let px = &input[base..base + cin];
                    let gk = &mut gw[kbase..kbase + cin * cout];
                    for (&raw, grow) in px.iter().zip(gk.chunks_exact_mut(cout)) {
                        let v = value(raw);
                        for (g, &dv) in grow.iter_mut().zip(d) {
                            *g = *g + v * dv;
                        }
                    }
                    if let Some(di) = dinput.as_deref_mut() {
                        let wk = &w[kbase..kbase + cin * cout];
                        for (dx, wrow) in di[base..base + cin].iter_mut().zip(wk.chunks_exact(cout)) {
                            let s: T = wrow.iter().zip(d).map(|(&wv, &dv)| wv * dv).sum();
                            *dx = *dx + s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Raster;
    use crate::pss::{build_pss, PssConfig};

    fn tiny_cfg() -> PssConfig {
        PssConfig {
            patch_size: 8,
            n_full: 2,
            n_half: 1,
            include_whole: true,
        }
    }

    fn random_core(seed: u64, side: usize) -> Raster {
        let mut rng = SeededRng::new(seed);
        Raster::from_fn(side, side, |_, _| {
            [rng.next_below(256) as u8, rng.next_below(256) as u8, rng.next_below(256) as u8]
        })
        .unwrap()
    }

    #[test]
    fn output_side_arithmetic() {
        assert_eq!(conv_out(512), 256);
        assert_eq!(conv_out(64), 32);
        assert_eq!(conv_out(7), 4);
        assert_eq!(conv_out(1), 1);
    }

    #[test]
    fn zero_affine_gives_uniform() {
        let cfg = tiny_cfg();
        let mut model = MicroCnn::<f32>::new(Architecture::reference(cfg.stacked_channels()), 1).unwrap();
        model.tensor_mut("fc.weight").unwrap().fill(0.0);
        model.tensor_mut("fc.bias").unwrap().fill(0.0);
        let pss = build_pss(&random_core(2, 32), &cfg, 3).unwrap();
        assert_eq!(model.forward(&pss).unwrap(), [0.25; 4]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let model = MicroCnn::<f32>::new(Architecture::reference(9), 1).unwrap();
        let pss = build_pss(&random_core(2, 32), &tiny_cfg(), 3).unwrap();
        assert!(matches!(model.forward(&pss), Err(Error::Shape(_))));
    }

    #[test]
    fn probabilities_form_a_simplex() {
        let cfg = tiny_cfg();
        for seed in 0..200u64 {
            let model = MicroCnn::<f32>::new(Architecture::reference(cfg.stacked_channels()), seed).unwrap();
            let pss = build_pss(&random_core(seed + 1000, 24), &cfg, seed).unwrap();
            let p = model.forward(&pss).unwrap();
            assert!(p.iter().all(|&v| v >= 0.0));
            let s: f64 = p.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6, "{p:?}");
            assert_eq!(p, model.forward(&pss).unwrap());
        }
    }

    #[test]
    fn layer_list_round_trips() {
        let arch = Architecture::reference(153);
        assert_eq!(Architecture::from_layers(&arch.layers()).unwrap(), arch);
        let mut bad = arch.layers();
        bad[1]["type"] = "tanh".into();
        assert!(Architecture::from_layers(&bad).is_err());
        assert_eq!(arch.param_count(), 9 * 153 * 16 + 16 + 9 * 16 * 32 + 32 + 32 * 4 + 4);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax([1000.0f64, 0.0, 0.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
