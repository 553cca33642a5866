//! Layer descriptors, shape inference and multiply-add counting.

use std::fmt;
use std::str::FromStr;

use super::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv { in_ch: usize, out_ch: usize, kernel: (usize, usize), stride: usize, padding: usize },
    DepthwiseConv { channels: usize, kernel: (usize, usize), stride: usize, padding: usize },
    FullyConnected { inputs: usize, outputs: usize },
    GlobalAvgPool,
    /// Elementwise SiLU, `x * sigmoid(x)`.
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { channels, height, width } => channels * height * width,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn conv_out(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

impl Layer {
    /// Output shape for `input`, or a description of the mismatch.
    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        match (*self, input) {
            (Layer::Conv { in_ch, out_ch, kernel, stride, padding }, Shape::Spatial { channels, height, width }) => {
                if in_ch != channels {
                    return Err(format!("conv expects {in_ch} input channels, got {channels}"));
                }
                let h = conv_out(height, kernel.0, stride, padding);
                let w = conv_out(width, kernel.1, stride, padding);
                match (h, w, out_ch) {
                    (Some(h), Some(w), c) if c > 0 => Ok(Shape::Spatial { channels: c, height: h, width: w }),
                    _ => Err(format!("conv {kernel:?}/{stride} pad {padding} does not fit {height}x{width}")),
                }
            }
            (Layer::DepthwiseConv { channels: ch, kernel, stride, padding }, Shape::Spatial { channels, height, width }) => {
                if ch != channels {
                    return Err(format!("depthwise conv expects {ch} channels, got {channels}"));
                }
                match (conv_out(height, kernel.0, stride, padding), conv_out(width, kernel.1, stride, padding)) {
                    (Some(h), Some(w)) => Ok(Shape::Spatial { channels, height: h, width: w }),
                    _ => Err(format!("depthwise conv {kernel:?}/{stride} does not fit {height}x{width}")),
                }
            }
            (Layer::FullyConnected { inputs, outputs }, Shape::Flat(n)) => {
                if inputs != n || outputs == 0 {
                    return Err(format!("fully-connected expects {inputs} inputs, got {n}"));
                }
                Ok(Shape::Flat(outputs))
            }
            (Layer::FullyConnected { .. }, s) => Err(format!("fully-connected needs a flat input, got {s:?}")),
            (Layer::GlobalAvgPool, Shape::Spatial { channels, .. }) => Ok(Shape::Flat(channels)),
            (Layer::GlobalAvgPool, s) => Err(format!("global average pool needs a spatial input, got {s:?}")),
            (Layer::Activation, s) => Ok(s),
            (layer, s) => Err(format!("{layer} cannot consume {s:?}")),
        }
    }

    /// (weight count, bias count) of a trainable layer.
    pub fn param_counts(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Conv { in_ch, out_ch, kernel, .. } => Some((out_ch * in_ch * kernel.0 * kernel.1, out_ch)),
            Layer::DepthwiseConv { channels, kernel, .. } => Some((channels * kernel.0 * kernel.1, channels)),
            Layer::FullyConnected { inputs, outputs } => Some((inputs * outputs, outputs)),
            Layer::GlobalAvgPool | Layer::Activation => None,
        }
    }

    /// Multiply-adds for one image producing `output`.
    pub fn madds(&self, output: Shape) -> u64 {
        let spatial = |s: Shape| match s {
            Shape::Spatial { height, width, .. } => (height * width) as u64,
            Shape::Flat(_) => 0,
        };
        match *self {
            Layer::Conv { in_ch, out_ch, kernel, .. } => {
                spatial(output) * (out_ch * in_ch * kernel.0 * kernel.1) as u64
            }
            Layer::DepthwiseConv { channels, kernel, .. } => spatial(output) * (channels * kernel.0 * kernel.1) as u64,
            Layer::FullyConnected { inputs, outputs } => (inputs * outputs) as u64,
            Layer::GlobalAvgPool | Layer::Activation => 0,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Conv { in_ch, out_ch, kernel, stride, padding } => write!(
                f,
                "conv in={in_ch} out={out_ch} kernel={}x{} stride={stride} pad={padding}",
                kernel.0, kernel.1
            ),
            Layer::DepthwiseConv { channels, kernel, stride, padding } => {
                write!(f, "dwconv ch={channels} kernel={}x{} stride={stride} pad={padding}", kernel.0, kernel.1)
            }
            Layer::FullyConnected { inputs, outputs } => write!(f, "fc in={inputs} out={outputs}"),
            Layer::GlobalAvgPool => f.write_str("gap"),
            Layer::Activation => f.write_str("act"),
        }
    }
}

impl FromStr for Layer {
    type Err = ModelError;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |msg: &str| ModelError::ArchParse(format!("{msg} in {line:?}"));
        let mut parts = line.split_whitespace();
        let kind = parts.next().ok_or_else(|| bad("empty layer line"))?;
        let mut fields = std::collections::BTreeMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            if fields.insert(k, v).is_some() {
                return Err(bad("duplicate field"));
            }
        }
        let mut take = |k: &str| fields.remove(k).ok_or_else(|| bad(&format!("missing field {k}")));
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad(&format!("bad number {v:?}")));
        let kernel = |v: &str| -> Result<(usize, usize)> {
            let (a, b) = v.split_once('x').ok_or_else(|| bad("kernel must be HxW"))?;
            Ok((num(a)?, num(b)?))
        };
        let layer = match kind {
            "conv" => Layer::Conv {
                in_ch: num(take("in")?)?,
                out_ch: num(take("out")?)?,
                kernel: kernel(take("kernel")?)?,
                stride: num(take("stride")?)?,
                padding: num(take("pad")?)?,
            },
            "dwconv" => Layer::DepthwiseConv {
                channels: num(take("ch")?)?,
                kernel: kernel(take("kernel")?)?,
                stride: num(take("stride")?)?,
                padding: num(take("pad")?)?,
            },
            "fc" => Layer::FullyConnected { inputs: num(take("in")?)?, outputs: num(take("out")?)? },
            "gap" => Layer::GlobalAvgPool,
            "act" => Layer::Activation,
            other => return Err(bad(&format!("unknown layer kind {other:?}"))),
        };
        if let Some(k) = fields.keys().next() {
            return Err(bad(&format!("unexpected field {k}")));
        }
        Ok(layer)
    }
}

/// An ordered stack of layers applied to a 3-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub layers: Vec<Layer>,
}

impl ArchSpec {
    /// Three stride-2 3x3 convolutions (8, 16, 32 channels) with SiLU,
    /// global average pooling and a fully-connected embedding layer.
    pub fn reference(embedding_dim: usize) -> Self {
        let conv = |in_ch, out_ch| Layer::Conv { in_ch, out_ch, kernel: (3, 3), stride: 2, padding: 1 };
        ArchSpec {
            layers: vec![
                conv(3, 8),
                Layer::Activation,
                conv(8, 16),
                Layer::Activation,
                conv(16, 32),
                Layer::Activation,
                Layer::GlobalAvgPool,
                Layer::FullyConnected { inputs: 32, outputs: embedding_dim },
            ],
        }
    }

    /// MobileNetV2 feature extractor (no normalization layers, residual adds
    /// omitted since they cost no multiply-adds) followed by a classifier.
    pub fn mobilenet_v2(width_multiplier: f64, num_classes: usize) -> Self {
        let divisible = |c: f64| -> usize {
            let d = 8.0;
            let v = ((c + d / 2.0) / d).floor().max(1.0) * d;
            (if v < 0.9 * c { v + d } else { v }) as usize
        };
        let mut layers = Vec::new();
        let pw = |i, o| Layer::Conv { in_ch: i, out_ch: o, kernel: (1, 1), stride: 1, padding: 0 };
        let stem = divisible(32.0 * width_multiplier);
        layers.push(Layer::Conv { in_ch: 3, out_ch: stem, kernel: (3, 3), stride: 2, padding: 1 });
        layers.push(Layer::Activation);
        let settings: [(usize, f64, usize, usize); 7] =
            [(1, 16.0, 1, 1), (6, 24.0, 2, 2), (6, 32.0, 3, 2), (6, 64.0, 4, 2), (6, 96.0, 3, 1), (6, 160.0, 3, 2), (6, 320.0, 1, 1)];
        let mut channels = stem;
        for (t, c, n, s) in settings {
            let out = divisible(c * width_multiplier);
            for i in 0..n {
                let stride = if i == 0 { s } else { 1 };
                let hidden = channels * t;
                if t != 1 {
                    layers.push(pw(channels, hidden));
                    layers.push(Layer::Activation);
                }
                layers.push(Layer::DepthwiseConv { channels: hidden, kernel: (3, 3), stride, padding: 1 });
                layers.push(Layer::Activation);
                layers.push(pw(hidden, out));
                channels = out;
            }
        }
        let last = if width_multiplier > 1.0 { divisible(1280.0 * width_multiplier) } else { 1280 };
        layers.push(pw(channels, last));
        layers.push(Layer::Activation);
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::FullyConnected { inputs: last, outputs: num_classes });
        ArchSpec { layers }
    }

    /// Shapes of the input followed by the output of every layer.
    pub fn shapes(&self, height: usize, width: usize) -> Result<Vec<Shape>> {
        let mut shapes = vec![Shape::Spatial { channels: 3, height, width }];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(*shapes.last().expect("non-empty"))
                .map_err(|msg| ModelError::Shape(format!("layer {i} ({layer}): {msg}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Length of the final flat output.
    pub fn output_dim(&self, height: usize, width: usize) -> Result<usize> {
        match self.shapes(height, width)?.last() {
            Some(Shape::Flat(n)) => Ok(*n),
            other => Err(ModelError::Shape(format!("architecture must end in a flat output, ends in {other:?}"))),
        }
    }

    pub fn concat(&self, other: &ArchSpec) -> ArchSpec {
        ArchSpec { layers: self.layers.iter().chain(&other.layers).copied().collect() }
    }
}

/// Multiply-adds of one forward pass at `height`x`width`: convolutions
/// count `out_h*out_w*out_ch*in_ch*k_h*k_w`, depthwise `out_h*out_w*ch*k_h*k_w`,
/// fully-connected `in*out`; pooling and activations are free.
pub fn count_madds(arch: &ArchSpec, height: usize, width: usize) -> Result<u64> {
    let shapes = arch.shapes(height, width)?;
    Ok(arch.layers.iter().zip(&shapes[1..]).map(|(l, &s)| l.madds(s)).sum())
}

/// Madds of each layer, for profiling reports.
pub fn madds_per_layer(arch: &ArchSpec, height: usize, width: usize) -> Result<Vec<(Layer, Shape, u64)>> {
    let shapes = arch.shapes(height, width)?;
    Ok(arch.layers.iter().zip(&shapes[1..]).map(|(l, &s)| (*l, s, l.madds(s))).collect())
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

/// One layer per line; blank lines and `#` comments are ignored.
impl FromStr for ArchSpec {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let layers = s
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Layer>>>()?;
        if layers.is_empty() {
            return Err(ModelError::ArchParse("architecture has no layers".into()));
        }
        Ok(ArchSpec { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_counts() {
        let fc = ArchSpec { layers: vec![Layer::GlobalAvgPool, Layer::FullyConnected { inputs: 3, outputs: 5 }] };
        assert_eq!(count_madds(&fc, 2, 2).unwrap(), 15);
        let fc10 = Layer::FullyConnected { inputs: 10, outputs: 5 };
        assert_eq!(fc10.madds(Shape::Flat(5)), 50);
        let conv = ArchSpec { layers: vec![Layer::Conv { in_ch: 3, out_ch: 8, kernel: (3, 3), stride: 1, padding: 1 }] };
        assert_eq!(count_madds(&conv, 4, 4).unwrap(), 4 * 4 * 8 * 3 * 3 * 3);
        assert_eq!(count_madds(&conv, 4, 4).unwrap(), 3456);
        let dw = ArchSpec { layers: vec![Layer::DepthwiseConv { channels: 3, kernel: (3, 3), stride: 2, padding: 1 }] };
        assert_eq!(count_madds(&dw, 4, 4).unwrap(), 2 * 2 * 3 * 9);
    }

    #[test]
    fn reference_shapes() {
        let arch = ArchSpec::reference(64);
        let shapes = arch.shapes(64, 32).unwrap();
        assert_eq!(shapes[1], Shape::Spatial { channels: 8, height: 32, width: 16 });
        assert_eq!(shapes[5], Shape::Spatial { channels: 32, height: 8, width: 4 });
        assert_eq!(arch.output_dim(64, 32).unwrap(), 64);
        assert_eq!(arch.output_dim(4, 2).unwrap(), 64);
    }

    #[test]
    fn inconsistent_shapes_error() {
        let arch = ArchSpec { layers: vec![Layer::Conv { in_ch: 4, out_ch: 8, kernel: (3, 3), stride: 1, padding: 1 }] };
        assert!(matches!(count_madds(&arch, 4, 4), Err(ModelError::Shape(_))));
        let arch = ArchSpec { layers: vec![Layer::FullyConnected { inputs: 3, outputs: 2 }] };
        assert!(arch.shapes(2, 2).is_err());
        let arch = ArchSpec { layers: vec![Layer::Conv { in_ch: 3, out_ch: 8, kernel: (5, 5), stride: 1, padding: 0 }] };
        assert!(arch.shapes(3, 3).is_err());
    }

    #[test]
    fn text_round_trip() {
        let arch = ArchSpec::mobilenet_v2(0.75, 100);
        let text = arch.to_string();
        assert_eq!(text.parse::<ArchSpec>().unwrap(), arch);
        assert!("conv in=3 out=8".parse::<ArchSpec>().is_err());
        assert!("pool".parse::<ArchSpec>().is_err());
        assert!("fc in=2 out=3 extra=1".parse::<ArchSpec>().is_err());
        assert!("# nothing\n".parse::<ArchSpec>().is_err());
    }

    #[test]
    fn mobilenet_v2_imagenet_count() {
        // The widely reported ~300M multiply-adds at 224x224 for 1000 classes.
        let madds = count_madds(&ArchSpec::mobilenet_v2(1.0, 1000), 224, 224).unwrap();
        assert!((295_000_000..=305_000_000).contains(&madds), "{madds}");
    }

    proptest! {
        #[test]
        fn additive_over_concatenation(split in 0usize..8, h in 8usize..40, w in 8usize..40) {
            let arch = ArchSpec::reference(16);
            let (a, b) = arch.layers.split_at(split);
            let a = ArchSpec { layers: a.to_vec() };
            let b = ArchSpec { layers: b.to_vec() };
            let whole = count_madds(&arch, h, w).unwrap();
            let first = count_madds(&a, h, w).unwrap();
            let shapes = a.shapes(h, w).unwrap();
            let second: u64 = {
                let mut s = *shapes.last().unwrap();
                b.layers.iter().map(|l| { s = l.output_shape(s).unwrap(); l.madds(s) }).sum()
            };
            prop_assert_eq!(whole, first + second);
            prop_assert_eq!(count_madds(&a.concat(&b), h, w).unwrap(), whole);
        }
    }
}
