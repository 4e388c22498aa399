//! Encoder-decoder CNN with skip connections.
//!
//! For `widths = [w0, .., w{D-1}]` the network has `D` resolution levels.
//! Each encoder level applies `convs_per_level` 3x3 convolutions (each
//! followed by leaky ReLU), keeps the result as a skip and average-pools.
//! The deepest level is the bottleneck. Each decoder level upsamples
//! (nearest), concatenates the matching skip and applies the same number of
//! convolutions. A 1x1 convolution maps `w0` channels to the output.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};
use crate::tomo::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub in_channels: usize,
    pub out_channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub convs_per_level: usize,
    pub leaky_slope: f64,
}

impl Default for Descriptor {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            widths: vec![16, 32, 64],
            kernel: 3,
            convs_per_level: 1,
            leaky_slope: 0.01,
        }
    }
}

/// Input and output channel counts of one convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub fn parameter_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel + self.out_channels
    }
}

impl Descriptor {
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return invalid("descriptor needs at least one nonzero width");
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.convs_per_level == 0 {
            return invalid("descriptor channel and conv counts must be positive");
        }
        if self.kernel.is_multiple_of(2) {
            return invalid(format!("kernel size must be odd, got {}", self.kernel));
        }
        if !self.leaky_slope.is_finite() {
            return invalid("leaky slope must be finite");
        }
        Ok(())
    }

    /// Every convolution in execution order.
    pub fn convs(&self) -> Vec<ConvSpec> {
        let k = self.kernel;
        let d = self.depth();
        let mut out = Vec::new();
        let push_level = |prefix: String, first_in: usize, width: usize, out: &mut Vec<ConvSpec>| {
            for i in 0..self.convs_per_level {
                out.push(ConvSpec {
                    name: format!("{prefix}.conv{i}"),
                    in_channels: if i == 0 { first_in } else { width },
                    out_channels: width,
                    kernel: k,
                });
            }
        };
        let mut channels = self.in_channels;
        for level in 0..d {
            let prefix = if level + 1 == d { "bottleneck".to_string() } else { format!("enc{level}") };
            push_level(prefix, channels, self.widths[level], &mut out);
            channels = self.widths[level];
        }
        for level in (0..d.saturating_sub(1)).rev() {
            push_level(format!("dec{level}"), channels + self.widths[level], self.widths[level], &mut out);
            channels = self.widths[level];
        }
        out.push(ConvSpec { name: "head".into(), in_channels: channels, out_channels: self.out_channels, kernel: 1 });
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.convs().iter().map(ConvSpec::parameter_count).sum()
    }

    /// Spatial sizes must be multiples of this; other inputs are padded.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth() - 1)
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<String> = self.widths.iter().map(ToString::to_string).collect();
        write!(
            f,
            "in={} out={} widths={} kernel={} convs={} slope={:e}",
            self.in_channels,
            self.out_channels,
            widths.join(","),
            self.kernel,
            self.convs_per_level,
            self.leaky_slope
        )
    }
}

/// Ordered named weights of a network with the architecture `descriptor`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    descriptor: Descriptor,
    tensors: Vec<(String, Tensor)>,
}

impl NetworkParams {
    /// He-uniform weights drawn from `seed`, zero biases.
    pub fn init(descriptor: Descriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for conv in descriptor.convs() {
            let fan_in = conv.in_channels * conv.kernel * conv.kernel;
            let bound = (6.0 / fan_in as f64).sqrt();
            let shape = vec![conv.out_channels, conv.in_channels, conv.kernel, conv.kernel];
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            tensors.push((format!("{}.weight", conv.name), Tensor::new(shape, data)?));
            tensors.push((format!("{}.bias", conv.name), Tensor::zeros(vec![conv.out_channels])));
        }
        Ok(Self { descriptor, tensors })
    }

    pub fn from_parts(descriptor: Descriptor, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        descriptor.validate()?;
        let expected = descriptor.convs();
        if tensors.len() != 2 * expected.len() {
            return invalid(format!("expected {} tensors, got {}", 2 * expected.len(), tensors.len()));
        }
        for (conv, pair) in expected.iter().zip(tensors.chunks(2)) {
            let wshape = [conv.out_channels, conv.in_channels, conv.kernel, conv.kernel];
            if pair[0].0 != format!("{}.weight", conv.name) || pair[0].1.shape() != wshape {
                return invalid(format!("tensor {} does not match {}.weight {wshape:?}", pair[0].0, conv.name));
            }
            if pair[1].0 != format!("{}.bias", conv.name) || pair[1].1.shape() != [conv.out_channels] {
                return invalid(format!("tensor {} does not match {}.bias", pair[1].0, conv.name));
            }
        }
        Ok(Self { descriptor, tensors })
    }

    pub fn descriptor(&self) -> &Descriptor {
        &self.descriptor
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect()
    }

    /// Records the network applied to `input` (`[C_in, H, W]`) on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        let d = &self.descriptor;
        if params.len() != self.tensors.len() {
            return invalid("parameter handles do not match the network");
        }
        let shape = tape.value(input)?.shape().to_vec();
        let [c, h, w] = shape[..] else {
            return invalid(format!("network input must be [C, H, W], got {shape:?}"));
        };
        if c != d.in_channels {
            return invalid(format!("network expects {} input channels, got {c}", d.in_channels));
        }
        let m = d.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut x = if (ph, pw) != (h, w) { tape.reflect_pad(input, ph, pw)? } else { input };

        let mut next = params.chunks(2);
        let mut conv = |tape: &mut Tape, x: Var, act: bool| -> Result<Var> {
            let pair = next.next().expect("descriptor and parameters agree");
            let y = tape.conv2d(x, pair[0], pair[1])?;
            if act {
                tape.leaky_relu(y, d.leaky_slope)
            } else {
                Ok(y)
            }
        };
        let depth = d.depth();
        let mut skips = Vec::with_capacity(depth);
        for level in 0..depth {
            for _ in 0..d.convs_per_level {
                x = conv(tape, x, true)?;
            }
            if level + 1 < depth {
                skips.push(x);
                x = tape.avg_pool2(x)?;
            }
        }
        while let Some(skip) = skips.pop() {
            let up = tape.upsample2(x)?;
            x = tape.concat(up, skip)?;
            for _ in 0..d.convs_per_level {
                x = conv(tape, x, true)?;
            }
        }
        x = conv(tape, x, false)?;
        if (ph, pw) != (h, w) {
            x = tape.crop(x, h, w)?;
        }
        Ok(x)
    }

    /// Applies the network to a single-channel image.
    pub fn forward(&self, input: &Image) -> Result<Image> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape);
        let x = tape.constant(Tensor::from_image(input));
        let y = self.forward_on(&mut tape, &params, x)?;
        tape.value(y)?.to_image()
    }
}

/// Free-function form of [`NetworkParams::forward`].
pub fn forward(params: &NetworkParams, input: &Image) -> Result<Image> {
    params.forward(input)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |r, c| ((r * 7 + c * 3) % 11) as f64 / 11.0 - 0.3)
    }

    #[test]
    fn default_network_shape_and_count() {
        let d = Descriptor::default();
        // enc0 1->16, enc1 16->32, bottleneck 32->64, dec1 96->32, dec0 48->16, head 16->1
        let by_hand = (9 * 16 + 16)
            + (16 * 9 * 32 + 32)
            + (32 * 9 * 64 + 64)
            + (96 * 9 * 32 + 32)
            + (48 * 9 * 16 + 16)
            + (16 + 1);
        assert_eq!(by_hand, 57_921);
        assert_eq!(d.parameter_count(), by_hand);
        let p = NetworkParams::init(d, 0).unwrap();
        assert_eq!(p.parameter_count(), by_hand);
        let out = p.forward(&ramp(64, 64)).unwrap();
        assert_eq!(out.shape(), (64, 64));
        assert!(out.is_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let a = NetworkParams::init(Descriptor::default(), 11).unwrap();
        let b = NetworkParams::init(Descriptor::default(), 11).unwrap();
        assert_eq!(a, b);
        let x = ramp(32, 32);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        assert_ne!(a, NetworkParams::init(Descriptor::default(), 12).unwrap());
    }

    #[test]
    fn zero_head_gives_constant_map() {
        let mut p = NetworkParams::init(Descriptor::default(), 4).unwrap();
        p.get_mut("head.weight").unwrap().data_mut().fill(0.0);
        p.get_mut("head.bias").unwrap().data_mut()[0] = 0.375;
        let out = p.forward(&ramp(16, 16)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let p = NetworkParams::init(Descriptor::default(), 2).unwrap();
        let out = p.forward(&ramp(30, 27)).unwrap();
        assert_eq!(out.shape(), (30, 27));
    }

    #[test]
    fn descriptor_mismatches() {
        assert!(NetworkParams::init(Descriptor { widths: vec![], ..Descriptor::default() }, 0).is_err());
        assert!(NetworkParams::init(Descriptor { kernel: 4, ..Descriptor::default() }, 0).is_err());
        let p = NetworkParams::init(Descriptor { in_channels: 2, ..Descriptor::default() }, 0).unwrap();
        assert!(p.forward(&ramp(8, 8)).is_err());
        let q = NetworkParams::init(Descriptor::default(), 0).unwrap();
        let mut tensors = q.tensors().to_vec();
        tensors.swap(0, 2);
        assert!(NetworkParams::from_parts(Descriptor::default(), tensors).is_err());
    }

    #[test]
    fn conv_layer_is_translation_consistent() {
        let d = Descriptor { widths: vec![3], ..Descriptor::default() };
        let p = NetworkParams::init(d, 8).unwrap();
        let x = ramp(12, 12);
        let shifted = Image::from_fn(12, 12, |r, c| if c == 0 { 0.0 } else { x.get(r, c - 1) });
        let conv = |img: &Image| {
            let mut tape = Tape::new();
            let params = p.register(&mut tape);
            let input = tape.constant(Tensor::from_image(img));
            let y = tape.conv2d(input, params[0], params[1]).unwrap();
            tape.value(y).unwrap().clone()
        };
        let (a, b) = (conv(&x), conv(&shifted));
        for ch in 0..3 {
            for r in 1..11 {
                for c in 1..10 {
                    let lhs = a.data()[(ch * 12 + r) * 12 + c];
                    let rhs = b.data()[(ch * 12 + r) * 12 + c + 1];
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let d = Descriptor { widths: vec![2, 3], ..Descriptor::default() };
        let base = NetworkParams::init(d, 21).unwrap();
        let x = ramp(8, 8);
        let loss = |p: &NetworkParams| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let vars = p.register(&mut tape);
            let input = tape.constant(Tensor::from_image(&x));
            let y = p.forward_on(&mut tape, &vars, input).unwrap();
            let l = tape.sum_squares(y).unwrap();
            tape.backward(l).unwrap();
            let grads = vars.iter().map(|v| tape.grad(*v).unwrap().unwrap().to_vec()).collect();
            (tape.value(l).unwrap().item(), grads)
        };
        let (_, grads) = loss(&base);
        for (ti, gi) in grads.iter().enumerate() {
            for e in (0..gi.len()).step_by(5) {
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    p.tensors_mut()[ti].1.data_mut()[e] += delta;
                    loss(&p).0
                };
                let numeric = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                let err = (numeric - gi[e]).abs() / numeric.abs().max(gi[e].abs()).max(1e-6);
                assert!(err < 1e-4, "tensor {ti} entry {e}: {} vs {numeric}", gi[e]);
            }
        }
    }
}
