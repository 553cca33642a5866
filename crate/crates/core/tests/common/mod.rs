//! Straight-line f64 re-implementation of the network and losses, used as
//! an independent reference by the integration tests.
#![allow(dead_code)]

use ahem_core::data::ImageRef;
use ahem_core::imaging::Image;
use ahem_core::model::{Layer, ModelParams, Shape, INPUT_MEAN, INPUT_STD};
use ahem_core::Corpus;
use rand::Rng;

fn block(params: &ModelParams, name: &str) -> Vec<f64> {
    let b = params.blocks().iter().find(|b| b.name == name).unwrap_or_else(|| panic!("no block {name}"));
    b.values.iter().map(|&v| v as f64).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Extractor output for one image, no dropout.
pub fn features(params: &ModelParams, image: &Image) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let shapes = params.arch().shapes(h, w).unwrap();
    // channel-major, standardized copy of the interleaved pixels
    let mut x = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..3 {
                x[(c * h + y) * w + xx] = (image.get(y, xx, c) as f64 - INPUT_MEAN as f64) / INPUT_STD as f64;
            }
        }
    }
    for (l, layer) in params.arch().layers.iter().enumerate() {
        let weight = || block(params, &format!("layer{l}.weight"));
        let bias = || block(params, &format!("layer{l}.bias"));
        x = match (*layer, shapes[l], shapes[l + 1]) {
            (
                Layer::Conv { kernel, stride, padding, .. } | Layer::DepthwiseConv { kernel, stride, padding, .. },
                Shape::Spatial { channels: ic, height: ih, width: iw },
                Shape::Spatial { channels: oc, height: oh, width: ow },
            ) => {
                let groups = if matches!(layer, Layer::DepthwiseConv { .. }) { ic } else { 1 };
                let (wt, bs) = (weight(), bias());
                let (ipg, opg) = (ic / groups, oc / groups);
                let mut out = vec![0.0; oc * oh * ow];
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bs[o];
                            for g in 0..ipg {
                                let i = (o / opg) * ipg + g;
                                for ky in 0..kernel.0 {
                                    for kx in 0..kernel.1 {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if iy < 0 || ix < 0 || iy >= ih as isize || ix >= iw as isize {
                                            continue;
                                        }
                                        let wv = wt[((o * ipg + g) * kernel.0 + ky) * kernel.1 + kx];
                                        acc += wv * x[(i * ih + iy as usize) * iw + ix as usize];
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                out
            }
            (Layer::FullyConnected { inputs, outputs }, _, _) => {
                let (wt, bs) = (weight(), bias());
                (0..outputs).map(|o| bs[o] + (0..inputs).map(|i| wt[o * inputs + i] * x[i]).sum::<f64>()).collect()
            }
            (Layer::GlobalAvgPool, Shape::Spatial { channels, height, width }, _) => {
                let n = height * width;
                (0..channels).map(|c| x[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64).collect()
            }
            (Layer::Activation, _, _) => x.iter().map(|&v| silu(v)).collect(),
            other => panic!("unexpected layer/shape combination {other:?}"),
        };
    }
    x
}

/// Classifier logits of one (already dropped-out) embedding row.
pub fn logits(params: &ModelParams, embedding: &[f64]) -> Vec<f64> {
    let (d, n) = (params.embedding_dim(), params.num_classes());
    let (w, b) = (block(params, "classifier.weight"), block(params, "classifier.bias"));
    (0..n).map(|o| b[o] + (0..d).map(|k| embedding[k] * w[k * n + o]).sum::<f64>()).collect()
}

/// Mean cross-entropy against `(1 - eps) * onehot + eps / N`.
pub fn smoothed_ce(rows: &[Vec<f64>], labels: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    for (row, &y) in rows.iter().zip(labels) {
        let n = row.len() as f64;
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (k, v) in row.iter().enumerate() {
            let t = eps / n + if k == y { 1.0 - eps } else { 0.0 };
            total -= t * (v - lse);
        }
    }
    total / rows.len() as f64
}

/// Logit rows of `images`, applying the flattened image-major dropout mask.
pub fn batch_logits(params: &ModelParams, images: &[&Image], mask: Option<&[f32]>) -> Vec<Vec<f64>> {
    let d = params.embedding_dim();
    images
        .iter()
        .enumerate()
        .map(|(r, img)| {
            let mut e = features(params, img);
            if let Some(m) = mask {
                e.iter_mut().zip(&m[r * d..(r + 1) * d]).for_each(|(v, &k)| *v *= k as f64);
            }
            logits(params, &e)
        })
        .collect()
}

/// Draws an inverted-dropout mask the way the network does: one uniform f32
/// per element, image-major.
pub fn dropout_mask(rng: &mut impl Rng, len: usize, rate: f64) -> Vec<f32> {
    let keep = 1.0 / (1.0 - rate as f32);
    (0..len).map(|_| if rng.gen::<f32>() < rate as f32 { 0.0 } else { keep }).collect()
}

/// Small corpus of noisy tinted images, `classes` identities.
pub fn toy_corpus(classes: usize, per_class: usize, h: usize, w: usize, seed: u64) -> Corpus {
    let mut rng = ahem_core::rng::stream(seed, &[4242]);
    let images = (0..classes)
        .map(|c| {
            let base = [(c as f32 * 0.37) % 1.0, (c as f32 * 0.61 + 0.2) % 1.0, (c as f32 * 0.13 + 0.5) % 1.0];
            (0..per_class)
                .map(|_| {
                    let mut px = Vec::with_capacity(h * w * 3);
                    for y in 0..h {
                        for _ in 0..w {
                            for (ch, b) in base.iter().enumerate() {
                                let shade = if y < h / 2 { *b } else { 1.0 - *b * (ch as f32 + 1.0) / 3.0 };
                                px.push((shade + rng.gen_range(-0.08f32..0.08)).clamp(0.0, 1.0));
                            }
                        }
                    }
                    Image::from_pixels(h, w, px).unwrap()
                })
                .collect()
        })
        .collect();
    Corpus::from_images(images).unwrap()
}

pub fn refs(pairs: &[(usize, usize)]) -> Vec<ImageRef> {
    pairs.iter().map(|&(class, index)| ImageRef { class, index }).collect()
}

/// Loss of one iteration trace: `L_batch` alone, or `(L_batch + L_aug) / 2`
/// over the selected candidates when the hard branch ran.
pub fn iteration_loss(params: &ModelParams, trace: &ahem_core::trainer::IterationTrace, eps: f64) -> (f64, Option<f64>) {
    let inputs: Vec<&Image> = trace.input_images.iter().collect();
    let l_batch = smoothed_ce(&batch_logits(params, &inputs, trace.input_mask.as_deref()), &trace.labels, eps);
    if trace.selected_rows.is_empty() {
        return (l_batch, None);
    }
    let d = params.embedding_dim();
    let selected: Vec<&Image> = trace.selected_rows.iter().map(|&r| &trace.hard_images[r]).collect();
    let mask: Option<Vec<f32>> =
        trace.hard_mask.as_ref().map(|m| trace.selected_rows.iter().flat_map(|&r| m[r * d..(r + 1) * d].to_vec()).collect());
    let l_aug = smoothed_ce(&batch_logits(params, &selected, mask.as_deref()), &trace.selected_labels, eps);
    (l_batch, Some(l_aug))
}

pub fn objective(params: &ModelParams, trace: &ahem_core::trainer::IterationTrace, eps: f64) -> f64 {
    match iteration_loss(params, trace, eps) {
        (b, Some(a)) => (b + a) / 2.0,
        (b, None) => b,
    }
}

#[derive(Debug, Clone)]
pub struct GradEntry {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Relative error `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// `per_block` random parameters of every block (or all of them when the
/// block is smaller), compared against central differences of `objective`.
pub fn gradient_check(
    params: &ModelParams,
    trace: &ahem_core::trainer::IterationTrace,
    eps: f64,
    h: f32,
    picks: &[(usize, usize)],
) -> Vec<GradEntry> {
    let mut probe = params.clone();
    picks
        .iter()
        .map(|&(b, i)| {
            let original = params.blocks()[b].values[i];
            let (up, down) = (original + h, original - h);
            probe.blocks_mut()[b].values[i] = up;
            let f_up = objective(&probe, trace, eps);
            probe.blocks_mut()[b].values[i] = down;
            let f_down = objective(&probe, trace, eps);
            probe.blocks_mut()[b].values[i] = original;
            let numeric = (f_up - f_down) / (up as f64 - down as f64);
            let analytic = params.blocks()[b].grads[i] as f64;
            GradEntry {
                block: params.blocks()[b].name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: rel_error(analytic, numeric),
            }
        })
        .collect()
}

/// `total` parameter positions spread evenly over the blocks; blocks smaller
/// than their share hand the remainder to the larger ones.
pub fn stratified_picks(params: &ModelParams, total: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params.blocks().iter().map(|b| b.values.len()).collect();
    let mut quota = vec![0usize; sizes.len()];
    let mut left = total.min(sizes.iter().sum());
    while left > 0 {
        for (q, &n) in quota.iter_mut().zip(&sizes) {
            if left > 0 && *q < n {
                *q += 1;
                left -= 1;
            }
        }
    }
    let mut picks = Vec::with_capacity(total);
    for (b, (&n, &q)) in sizes.iter().zip(&quota).enumerate() {
        picks.extend(rand::seq::index::sample(rng, n, q).into_iter().map(|i| (b, i)));
    }
    picks
}
