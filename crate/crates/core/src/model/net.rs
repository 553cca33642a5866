//! Forward and backward passes of the sequential feature extractor plus
//! the linear classifier.

use rand::Rng;

use super::arch::{Layer, Shape};
use super::params::ModelParams;
use super::{Embedding, Logits, Matrix, ModelError, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    /// Inverted dropout with the given drop rate on the embedding.
    Train { dropout: f32 },
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Per image, the input of every extractor layer.
    inputs: Vec<Vec<Vec<f32>>>,
    /// Per embedding element: 0 or `1 / (1 - rate)`.
    mask: Option<Vec<f32>>,
    /// The classifier input (after dropout).
    embedding: Matrix,
}

impl ForwardCache {
    /// Parameter version the cache was computed with.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dropout_mask(&self) -> Option<&[f32]> {
        self.mask.as_deref()
    }
}

struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    fn new(layer: &Layer, input: Shape, output: Shape) -> Option<Self> {
        let (Shape::Spatial { channels: in_c, height: in_h, width: in_w }, Shape::Spatial { channels: out_c, height: out_h, width: out_w }) =
            (input, output)
        else {
            return None;
        };
        let (kernel, stride, pad, groups) = match *layer {
            Layer::Conv { kernel, stride, padding, .. } => (kernel, stride, padding, 1),
            Layer::DepthwiseConv { kernel, stride, padding, channels } => (kernel, stride, padding, channels),
            _ => return None,
        };
        Some(ConvGeom { in_c, in_h, in_w, out_c, out_h, out_w, kh: kernel.0, kw: kernel.1, stride, pad, groups })
    }

    /// Output index range along one axis for which `o*stride + k - pad` is in bounds.
    fn valid(&self, k: usize, input: usize, output: usize) -> (usize, usize) {
        let lo = if self.pad > k { (self.pad - k).div_ceil(self.stride) } else { 0 };
        let hi = if input + self.pad > k { ((input + self.pad - k - 1) / self.stride + 1).min(output) } else { 0 };
        (lo, hi.max(lo))
    }

    fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }
}

fn conv_forward(g: &ConvGeom, input: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let (ipg, opg) = (g.in_per_group(), g.out_per_group());
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0f32; g.out_c * plane];
    let ys: Vec<_> = (0..g.kh).map(|k| g.valid(k, g.in_h, g.out_h)).collect();
    let xs: Vec<_> = (0..g.kw).map(|k| g.valid(k, g.in_w, g.out_w)).collect();
    for oc in 0..g.out_c {
        let out_plane = &mut out[oc * plane..(oc + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = bias[oc]);
        let group = oc / opg;
        for icg in 0..ipg {
            let ic = group * ipg + icg;
            let in_plane = &input[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = ys[ky];
                for kx in 0..g.kw {
                    let wv = weight[((oc * ipg + icg) * g.kh + ky) * g.kw + kx];
                    let (ox_lo, ox_hi) = xs[kx];
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let in_row = &in_plane[iy * g.in_w + ix0..(iy + 1) * g.in_w];
                        let out_row = &mut out_plane[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                        for (o, i) in out_row.iter_mut().zip(in_row.iter().step_by(g.stride)) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    d_out: &[f32],
    d_weight: &mut [f32],
    d_bias: &mut [f32],
    mut d_input: Option<&mut [f32]>,
) {
    let (ipg, opg) = (g.in_per_group(), g.out_per_group());
    let plane = g.out_h * g.out_w;
    let ys: Vec<_> = (0..g.kh).map(|k| g.valid(k, g.in_h, g.out_h)).collect();
    let xs: Vec<_> = (0..g.kw).map(|k| g.valid(k, g.in_w, g.out_w)).collect();
    let in_plane_len = g.in_h * g.in_w;
    for oc in 0..g.out_c {
        let dout_plane = &d_out[oc * plane..(oc + 1) * plane];
        d_bias[oc] += dout_plane.iter().sum::<f32>();
        let group = oc / opg;
        for icg in 0..ipg {
            let ic = group * ipg + icg;
            let in_plane = &input[ic * in_plane_len..(ic + 1) * in_plane_len];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = ys[ky];
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = xs[kx];
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let widx = ((oc * ipg + icg) * g.kh + ky) * g.kw + kx;
                    let wv = weight[widx];
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    let mut dw = 0.0f32;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dout_row = &dout_plane[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                        let in_row = &in_plane[iy * g.in_w + ix0..(iy + 1) * g.in_w];
                        for (d, i) in dout_row.iter().zip(in_row.iter().step_by(g.stride)) {
                            dw += d * i;
                        }
                        if let Some(dx) = d_input.as_deref_mut() {
                            let dx_row = &mut dx[ic * in_plane_len + iy * g.in_w + ix0..ic * in_plane_len + (iy + 1) * g.in_w];
                            for (d, x) in dout_row.iter().zip(dx_row.iter_mut().step_by(g.stride)) {
                                *x += wv * d;
                            }
                        }
                    }
                    d_weight[widx] += dw;
                }
            }
        }
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn layer_forward(params: &ModelParams, l: usize, x: &[f32]) -> Vec<f32> {
    let layer = &params.arch.layers[l];
    let (input, output) = (params.shapes[l], params.shapes[l + 1]);
    match *layer {
        Layer::Conv { .. } | Layer::DepthwiseConv { .. } => {
            let g = ConvGeom::new(layer, input, output).expect("shapes validated at construction");
            let w = params.layer_blocks[l].expect("trainable layer");
            conv_forward(&g, x, &params.blocks[w].values, &params.blocks[w + 1].values)
        }
        Layer::FullyConnected { inputs, outputs } => {
            let w = params.layer_blocks[l].expect("trainable layer");
            let (weight, bias) = (&params.blocks[w].values, &params.blocks[w + 1].values);
            (0..outputs)
                .map(|o| bias[o] + weight[o * inputs..(o + 1) * inputs].iter().zip(x).map(|(a, b)| a * b).sum::<f32>())
                .collect()
        }
        Layer::GlobalAvgPool => {
            let Shape::Spatial { channels, height, width } = input else { unreachable!("validated") };
            let n = height * width;
            (0..channels).map(|c| x[c * n..(c + 1) * n].iter().sum::<f32>() / n as f32).collect()
        }
        Layer::Activation => x.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

/// Fixed input standardization: `(x - INPUT_MEAN) / INPUT_STD` per channel.
pub const INPUT_MEAN: f32 = 0.5;
pub const INPUT_STD: f32 = 0.25;

fn image_to_chw(image: &Image) -> Vec<f32> {
    let (h, w) = (image.height(), image.width());
    let mut out = vec![0.0f32; 3 * h * w];
    for (i, px) in image.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = (px[c] - INPUT_MEAN) / INPUT_STD;
        }
    }
    out
}

fn check_input(params: &ModelParams, image: &Image) -> Result<()> {
    if (image.height(), image.width()) != params.input {
        return Err(ModelError::Shape(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            params.input.0,
            params.input.1
        )));
    }
    Ok(())
}

fn forward_image(params: &ModelParams, image: &Image, mut cache: Option<&mut Vec<Vec<f32>>>) -> Vec<f32> {
    let mut x = image_to_chw(image);
    for l in 0..params.arch.layers.len() {
        let y = layer_forward(params, l, &x);
        if let Some(c) = cache.as_deref_mut() {
            c.push(std::mem::replace(&mut x, y));
        } else {
            x = y;
        }
    }
    x
}

/// Extractor forward pass with activations cached for [`backward`]. In
/// training mode dropout is applied to the returned embedding, drawing the
/// mask from `rng` image by image.
pub fn forward_features(
    params: &ModelParams,
    images: &[&Image],
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Embedding, ForwardCache)> {
    for img in images {
        check_input(params, img)?;
    }
    let dim = params.embedding_dim;
    let mut values = Matrix::zeros(images.len(), dim);
    let mut inputs = Vec::with_capacity(images.len());
    for (r, img) in images.iter().enumerate() {
        let mut cache = Vec::with_capacity(params.arch.layers.len());
        let out = forward_image(params, img, Some(&mut cache));
        values.row_mut(r).copy_from_slice(&out);
        inputs.push(cache);
    }
    let mask = match mode {
        Mode::Train { dropout } if dropout > 0.0 => {
            let keep = 1.0 / (1.0 - dropout);
            let mask: Vec<f32> =
                (0..values.data.len()).map(|_| if rng.gen::<f32>() < dropout { 0.0 } else { keep }).collect();
            values.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            Some(mask)
        }
        _ => None,
    };
    let cache = ForwardCache { version: params.version, inputs, mask, embedding: values.clone() };
    Ok((Embedding::new(values), cache))
}

/// Inference-only forward pass (no dropout, nothing cached).
pub fn extract_features(params: &ModelParams, images: &[&Image]) -> Result<Embedding> {
    let mut values = Matrix::zeros(images.len(), params.embedding_dim);
    for (r, img) in images.iter().enumerate() {
        check_input(params, img)?;
        values.row_mut(r).copy_from_slice(&forward_image(params, img, None));
    }
    Ok(Embedding::new(values))
}

/// Affine classifier: `logits = embedding * W + b`.
pub fn classify(params: &ModelParams, embedding: &Embedding) -> Result<Logits> {
    let (d, n) = (params.embedding_dim, params.num_classes);
    if embedding.dim() != d {
        return Err(ModelError::Shape(format!("embedding width {} does not match classifier input {d}", embedding.dim())));
    }
    let c = params.classifier_block();
    let (weight, bias) = (&params.blocks[c].values, &params.blocks[c + 1].values);
    let mut out = Matrix::zeros(embedding.rows(), n);
    for r in 0..embedding.rows() {
        let row = out.row_mut(r);
        row.copy_from_slice(bias);
        for (k, &e) in embedding.row(r).iter().enumerate() {
            if e == 0.0 {
                continue;
            }
            for (o, w) in row.iter_mut().zip(&weight[k * n..(k + 1) * n]) {
                *o += e * w;
            }
        }
    }
    Ok(Logits(out))
}

/// Accumulates parameter gradients of a loss whose gradient with respect to
/// the logits of the cached batch is `d_logits`. Rows with an all-zero
/// upstream gradient are skipped.
pub fn backward(params: &mut ModelParams, cache: &ForwardCache, d_logits: &Matrix) -> Result<()> {
    if cache.version != params.version {
        return Err(ModelError::StaleCache { cached: cache.version, current: params.version });
    }
    let (d, n) = (params.embedding_dim, params.num_classes);
    if d_logits.rows != cache.len() || d_logits.cols != n {
        return Err(ModelError::Shape(format!(
            "upstream gradient is {}x{}, expected {}x{n}",
            d_logits.rows,
            d_logits.cols,
            cache.len()
        )));
    }
    let c = params.classifier_block();
    for r in 0..cache.len() {
        let dl = d_logits.row(r);
        if dl.iter().all(|&g| g == 0.0) {
            continue;
        }
        let emb = cache.embedding.row(r);
        let mut d_emb = vec![0.0f32; d];
        {
            let (head, tail) = params.blocks.split_at_mut(c + 1);
            let w = &mut head[c];
            for (k, &e) in emb.iter().enumerate() {
                let wrow = &w.values[k * n..(k + 1) * n];
                let grow = &mut w.grads[k * n..(k + 1) * n];
                let mut acc = 0.0f32;
                for ((g, wv), &dv) in grow.iter_mut().zip(wrow).zip(dl) {
                    *g += e * dv;
                    acc += wv * dv;
                }
                d_emb[k] = acc;
            }
            tail[0].grads.iter_mut().zip(dl).for_each(|(g, dv)| *g += dv);
        }
        if let Some(mask) = &cache.mask {
            d_emb.iter_mut().zip(&mask[r * d..(r + 1) * d]).for_each(|(g, m)| *g *= m);
        }
        if d_emb.iter().all(|&g| g == 0.0) {
            continue;
        }
        extractor_backward(params, &cache.inputs[r], d_emb);
    }
    Ok(())
}

fn extractor_backward(params: &mut ModelParams, inputs: &[Vec<f32>], mut grad: Vec<f32>) {
    for l in (0..params.arch.layers.len()).rev() {
        let layer = params.arch.layers[l];
        let x = &inputs[l];
        let need_dx = l > 0;
        grad = match layer {
            Layer::Conv { .. } | Layer::DepthwiseConv { .. } => {
                let g = ConvGeom::new(&layer, params.shapes[l], params.shapes[l + 1]).expect("validated");
                let w = params.layer_blocks[l].expect("trainable layer");
                let (head, tail) = params.blocks.split_at_mut(w + 1);
                let wb = &mut head[w];
                let mut dx = if need_dx { vec![0.0f32; x.len()] } else { Vec::new() };
                conv_backward(&g, x, &wb.values, &grad, &mut wb.grads, &mut tail[0].grads, need_dx.then_some(dx.as_mut_slice()));
                dx
            }
            Layer::FullyConnected { inputs: ni, outputs: no } => {
                let w = params.layer_blocks[l].expect("trainable layer");
                let (head, tail) = params.blocks.split_at_mut(w + 1);
                let wb = &mut head[w];
                let mut dx = vec![0.0f32; ni];
                for o in 0..no {
                    let go = grad[o];
                    if go == 0.0 {
                        continue;
                    }
                    tail[0].grads[o] += go;
                    let wrow = &wb.values[o * ni..(o + 1) * ni];
                    let grow = &mut wb.grads[o * ni..(o + 1) * ni];
                    for ((gw, &xi), (dxi, &wv)) in grow.iter_mut().zip(x).zip(dx.iter_mut().zip(wrow)) {
                        *gw += go * xi;
                        *dxi += go * wv;
                    }
                }
                dx
            }
            Layer::GlobalAvgPool => {
                let Shape::Spatial { channels, height, width } = params.shapes[l] else { unreachable!("validated") };
                let hw = height * width;
                let mut dx = vec![0.0f32; channels * hw];
                for ch in 0..channels {
                    let v = grad[ch] / hw as f32;
                    dx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d = v);
                }
                dx
            }
            Layer::Activation => grad
                .iter()
                .zip(x)
                .map(|(&g, &v)| {
                    let s = sigmoid(v);
                    g * s * (1.0 + v * (1.0 - s))
                })
                .collect(),
        };
        if !need_dx {
            break;
        }
    }
}
