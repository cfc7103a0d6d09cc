//! Grad-CAM saliency maps and their upsampling to input resolution.

use serde::{Deserialize, Serialize};

use crate::decoygen::LabeledImage;
use crate::error::{Error, Result};
use crate::modelzoo::{images_to_tensor, ModelHandle};
use crate::nn::{Adjoint, Network, Trace};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Raw,
    Minmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Native,
    Input,
}

/// A nonnegative spatial attribution map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    values: Vec<f32>,
    height: usize,
    width: usize,
    pub normalization: Normalization,
    pub target_class: usize,
    pub resolution: Resolution,
}

impl SaliencyMap {
    /// Builds a map from explicit values (negative values are rejected).
    pub fn new(height: usize, width: usize, values: Vec<f32>, normalization: Normalization, target_class: usize, resolution: Resolution) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!("{height}x{width}"), values.len()));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::NumericInstability("saliency values must be finite and nonnegative".into()));
        }
        Ok(SaliencyMap {
            values,
            height,
            width,
            normalization,
            target_class,
            resolution,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Min-max normalization; a constant map becomes all-zero.
    pub fn minmax(mut self) -> Self {
        let max = self.max();
        let min = self.values.iter().copied().fold(f32::INFINITY, f32::min);
        let span = max - min;
        for v in &mut self.values {
            *v = if span > 0.0 { ((*v - min) / span).clamp(0.0, 1.0) } else { 0.0 };
        }
        self.normalization = Normalization::Minmax;
        self
    }
}

/// Everything a Grad-CAM evaluation produces, kept for loss gradients.
pub(crate) struct CamPass<F> {
    pub trace_conv: Trace<F>,
    pub trace_head: Trace<F>,
    /// `B × K` channel weights (spatial mean of ∂logit/∂A).
    pub alpha: Vec<F>,
    /// `B × S` pre-ReLU weighted sums `Σ_k α_k A^k`.
    pub cam_pre: Vec<F>,
    pub channels: usize,
    pub grid: (usize, usize),
}

impl<F: Scalar> CamPass<F> {
    pub fn logits(&self) -> &Tensor<F> {
        self.trace_head.output()
    }

    pub fn spatial(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Rectified map of instance `n`.
    pub fn cam(&self, n: usize) -> impl Iterator<Item = F> + '_ {
        let s = self.spatial();
        self.cam_pre[n * s..(n + 1) * s].iter().map(|&v| if v > F::zero() { v } else { F::zero() })
    }
}

pub(crate) fn one_hot<F: Scalar>(classes: &[usize], k: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[classes.len(), k]);
    for (n, &c) in classes.iter().enumerate() {
        t.data_mut()[n * k + c] = F::one();
    }
    t
}

pub(crate) fn cam_pass<F: Scalar>(net: &Network<F>, x: &Tensor<F>, classes: &[usize]) -> Result<CamPass<F>> {
    let fl = net
        .feature_layer()
        .ok_or_else(|| Error::UnsupportedArchitecture("Grad-CAM needs at least one convolutional layer".into()))?;
    let k_cls = net.num_classes();
    if let Some(&bad) = classes.iter().find(|&&c| c >= k_cls) {
        return Err(Error::InvalidConfig(format!("target class {bad} outside [0, {k_cls})")));
    }
    assert_eq!(classes.len(), x.batch(), "one target class per image");
    let trace_conv = net.forward(x, 0, fl);
    let trace_head = net.forward(trace_conv.output(), fl, net.num_layers());
    let grads = net
        .backward(&trace_head, Adjoint::value(one_hot(classes, k_cls)), None, true)
        .value
        .expect("input adjoint requested");
    let fshape = net.shape_at(fl);
    let (ch, hs, ws) = (fshape[0], fshape[1], fshape[2]);
    let s = hs * ws;
    let b = x.batch();
    let a = trace_conv.output();
    let inv_s = F::one() / F::of(s as f64);
    let mut alpha = vec![F::zero(); b * ch];
    let mut cam_pre = vec![F::zero(); b * s];
    for n in 0..b {
        let g = grads.item(n);
        let an = a.item(n);
        for k in 0..ch {
            let w: F = g[k * s..(k + 1) * s].iter().copied().sum::<F>() * inv_s;
            alpha[n * ch + k] = w;
            for (acc, &v) in cam_pre[n * s..(n + 1) * s].iter_mut().zip(&an[k * s..(k + 1) * s]) {
                *acc += w * v;
            }
        }
    }
    Ok(CamPass {
        trace_conv,
        trace_head,
        alpha,
        cam_pre,
        channels: ch,
        grid: (hs, ws),
    })
}

/// Grad-CAM maps (min-max normalized, native resolution) for a prepared
/// network-layout batch.
pub fn grad_cam_tensor<F: Scalar>(net: &Network<F>, x: &Tensor<F>, classes: &[usize]) -> Result<Vec<SaliencyMap>> {
    let pass = cam_pass(net, x, classes)?;
    let (hs, ws) = pass.grid;
    (0..x.batch())
        .map(|n| {
            let raw: Vec<f32> = pass.cam(n).map(|v| v.as_f64() as f32).collect();
            if raw.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericInstability("non-finite Grad-CAM activation".into()));
            }
            Ok(SaliencyMap::new(hs, ws, raw, Normalization::Raw, classes[n], Resolution::Native)?.minmax())
        })
        .collect()
}

pub fn grad_cam(model: &ModelHandle, image: &LabeledImage, target_class: usize) -> Result<SaliencyMap> {
    let mut maps = batch_grad_cam(model, &[image], &[target_class])?;
    Ok(maps.remove(0))
}

/// Element-wise [`grad_cam`] with order preserved; evaluated in chunks.
pub fn batch_grad_cam(model: &ModelHandle, images: &[&LabeledImage], classes: &[usize]) -> Result<Vec<SaliencyMap>> {
    if images.len() != classes.len() {
        return Err(Error::shape(format!("{} target classes", images.len()), classes.len()));
    }
    let mut out = Vec::with_capacity(images.len());
    for (chunk, cls) in images.chunks(64).zip(classes.chunks(64)) {
        let x = images_to_tensor::<f32>(chunk, &model.spec)?;
        out.extend(grad_cam_tensor(&model.net, &x, cls)?);
    }
    Ok(out)
}

/// Bilinear upsampling (half-pixel centres, edge clamped), clipped to `[0,1]`.
pub fn upsample(map: &SaliencyMap, to: (usize, usize)) -> Result<SaliencyMap> {
    let (h, w) = to;
    let (sh, sw) = (map.height, map.width);
    if h < sh || w < sw {
        return Err(Error::Size(format!("upsample target {h}x{w} is smaller than the source {sh}x{sw}")));
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (src - lo as f64) as f32)
    };
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        let (r0, r1, fy) = coord(r, h, sh);
        for c in 0..w {
            let (c0, c1, fx) = coord(c, w, sw);
            let top = map.get(r0, c0) * (1.0 - fx) + map.get(r0, c1) * fx;
            let bot = map.get(r1, c0) * (1.0 - fx) + map.get(r1, c1) * fx;
            values.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
        }
    }
    Ok(SaliencyMap {
        values,
        height: h,
        width: w,
        normalization: map.normalization,
        target_class: map.target_class,
        resolution: Resolution::Input,
    })
}
