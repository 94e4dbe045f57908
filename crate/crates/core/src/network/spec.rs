//! Layer and network descriptions, and the line-per-layer architecture text
//! format.
//!
//! ```text
//! # comments and blank lines are ignored
//! input c=1 h=16 w=16
//! classes horizontal vertical diagonal ring
//! conv k=6 kh=3 kw=3 stride=1 pad=1
//! relu
//! maxpool window=2 stride=2
//! flatten
//! dense u=24 head
//! relu
//! dense u=4 head
//! softmax
//! ```
//!
//! `c=` on conv and `d=` on dense are optional and checked when present.
//! `frozen` marks a layer that never trains; `head` marks the layers trained
//! in the heads-only phase.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::{maxpool_output_dims, ConvGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        kernels: usize,
        channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
        inputs: usize,
    },
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Tag byte used in the checkpoint format.
    pub fn tag(&self) -> u8 {
        match self {
            LayerKind::Conv { .. } => 0,
            LayerKind::Relu => 1,
            LayerKind::MaxPool { .. } => 2,
            LayerKind::Flatten => 3,
            LayerKind::Dense { .. } => 4,
            LayerKind::Softmax => 5,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    /// Shapes of the `(weights, bias)` tensors, for parametric layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv {
                kernels,
                channels,
                kh,
                kw,
                ..
            } => Some((vec![kernels, channels, kh, kw], vec![kernels])),
            LayerKind::Dense { units, inputs } => Some((vec![units, inputs], vec![units])),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` of the weight tensor.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerKind::Conv {
                kernels,
                channels,
                kh,
                kw,
                ..
            } => Some((channels * kh * kw, kernels * kh * kw)),
            LayerKind::Dense { units, inputs } => Some((inputs, units)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub trainable: bool,
    pub head: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            trainable: true,
            head: false,
        }
    }

    pub fn conv(kernels: usize, channels: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        Self::new(LayerKind::Conv {
            kernels,
            channels,
            kh,
            kw,
            stride,
            pad,
        })
    }

    pub fn relu() -> Self {
        Self::new(LayerKind::Relu)
    }

    pub fn maxpool(window: usize, stride: usize) -> Self {
        Self::new(LayerKind::MaxPool { window, stride })
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn dense(units: usize, inputs: usize) -> Self {
        Self::new(LayerKind::Dense { units, inputs })
    }

    pub fn softmax() -> Self {
        Self::new(LayerKind::Softmax)
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn head(mut self) -> Self {
        self.head = true;
        self
    }
}

/// An ordered, shape-checked stack of layers ending in softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    class_names: Vec<String>,
}

impl NetworkSpec {
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "input shape {input_shape:?} has a zero dimension"
            )));
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        let mut shapes = vec![input_shape.to_vec()];
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer.kind, LayerKind::Softmax) && i + 1 != layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "softmax may only be the final layer (found at layer {i})"
                )));
            }
            let next = output_shape(&layer.kind, shapes.last().unwrap())
                .map_err(|e| Error::InvalidArgument(format!("layer {i} ({}): {e}", layer.kind.name())))?;
            shapes.push(next);
        }
        if !matches!(layers.last().unwrap().kind, LayerKind::Softmax) {
            return Err(Error::InvalidArgument("the final layer must be softmax".into()));
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            class_names: Vec::new(),
        })
    }

    /// Attaches human-readable class names; their count must equal the class count.
    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if !names.is_empty() && names.len() != self.class_count() {
            return Err(Error::InvalidArgument(format!(
                "{} class names given for {} classes",
                names.len(),
                self.class_count()
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        self.shapes.last().unwrap().iter().product()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Name of a class, falling back to its decimal index.
    pub fn class_name(&self, class: usize) -> String {
        self.class_names
            .get(class)
            .cloned()
            .unwrap_or_else(|| class.to_string())
    }

    /// Resolves a class given by name or decimal index.
    pub fn resolve_class(&self, name_or_index: &str) -> Result<usize> {
        if let Some(i) = self.class_names.iter().position(|n| n == name_or_index) {
            return Ok(i);
        }
        match name_or_index.parse::<usize>() {
            Ok(i) if i < self.class_count() => Ok(i),
            Ok(i) => Err(Error::IndexOutOfRange {
                what: "class",
                index: i,
                len: self.class_count(),
            }),
            Err(_) => Err(Error::InvalidArgument(format!("unknown class {name_or_index:?}"))),
        }
    }

    /// Input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Output shape of layer `i`.
    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i + 1]
    }

    /// Which layers train in the heads-only phase.
    ///
    /// Layers flagged `head` if any are; otherwise every parametric layer
    /// after the last convolution.
    pub fn head_mask(&self) -> Vec<bool> {
        if self.layers.iter().any(|l| l.head) {
            return self.layers.iter().map(|l| l.head && l.trainable).collect();
        }
        let last_conv = self
            .layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Conv { .. }));
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.trainable && last_conv.map_or(true, |c| i > c))
            .collect()
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.trainable).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.kind.param_shapes())
            .map(|(w, b)| w.iter().product::<usize>() + b[0])
            .sum()
    }
}

fn output_shape(kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
    let as3 = || -> Result<(usize, usize, usize)> {
        match *input {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(format!("expects a [C,H,W] input, got {input:?}"))),
        }
    };
    match *kind {
        LayerKind::Conv {
            kernels,
            channels,
            kh,
            kw,
            stride,
            pad,
        } => {
            if kernels == 0 || kh == 0 || kw == 0 {
                return Err(Error::InvalidArgument("conv sizes must be positive".into()));
            }
            let g = ConvGeometry::resolve(as3()?, (kernels, channels, kh, kw), stride, pad)?;
            Ok(g.output_shape().to_vec())
        }
        LayerKind::MaxPool { window, stride } => {
            let (c, h, w) = as3()?;
            let (oh, ow) = maxpool_output_dims(h, w, window, stride)?;
            Ok(vec![c, oh, ow])
        }
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::Dense { units, inputs } => {
            let n: usize = input.iter().product();
            if units == 0 {
                return Err(Error::InvalidArgument("dense units must be positive".into()));
            }
            if n != inputs {
                return Err(Error::dim(format!("expects {inputs} inputs, got {n}")));
            }
            Ok(vec![units])
        }
        LayerKind::Softmax => {
            if input.len() != 1 {
                return Err(Error::dim(format!("softmax expects a vector, got {input:?}")));
            }
            Ok(input.to_vec())
        }
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input_shape;
        writeln!(f, "input c={c} h={h} w={w}")?;
        if !self.class_names.is_empty() {
            writeln!(f, "classes {}", self.class_names.join(" "))?;
        }
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv {
                    kernels,
                    channels,
                    kh,
                    kw,
                    stride,
                    pad,
                } => write!(f, "conv k={kernels} c={channels} kh={kh} kw={kw} stride={stride} pad={pad}")?,
                LayerKind::MaxPool { window, stride } => write!(f, "maxpool window={window} stride={stride}")?,
                LayerKind::Dense { units, inputs } => write!(f, "dense u={units} d={inputs}")?,
                other => write!(f, "{}", other.name())?,
            }
            if !layer.trainable {
                write!(f, " frozen")?;
            }
            if layer.head {
                write!(f, " head")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input: Option<[usize; 3]> = None;
        let mut class_names = Vec::new();
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::format("architecture", format!("line {}: {msg}", lineno + 1));
            let mut tokens = line.split_whitespace();
            let word = tokens.next().unwrap();
            if word == "classes" {
                class_names = tokens.map(str::to_string).collect();
                continue;
            }
            let mut args = Args::default();
            for tok in tokens {
                args.push(tok).map_err(bad)?;
            }
            // Channel count flowing into the next layer, for inferring conv `c=`.
            let current = current_shape(input, &layers).map_err(|e| bad(e.to_string()))?;
            let kind = match word {
                "input" => {
                    if input.is_some() || !layers.is_empty() {
                        return Err(bad("input must appear once, before any layer".into()));
                    }
                    input = Some([args.req("c").map_err(bad)?, args.req("h").map_err(bad)?, args.req("w").map_err(bad)?]);
                    args.finish().map_err(bad)?;
                    continue;
                }
                "conv" => {
                    let size = args.opt("size").map_err(bad)?;
                    let kh = args.opt("kh").map_err(bad)?.or(size).ok_or_else(|| bad("conv needs kh= (or size=)".into()))?;
                    let kw = args.opt("kw").map_err(bad)?.or(size).ok_or_else(|| bad("conv needs kw= (or size=)".into()))?;
                    let inferred = current.as_ref().and_then(|s| (s.len() == 3).then(|| s[0]));
                    let channels = match (args.opt("c").map_err(bad)?, inferred) {
                        (Some(c), Some(i)) if c != i => {
                            return Err(bad(format!("conv c={c} but incoming channels are {i}")))
                        }
                        (Some(c), _) => c,
                        (None, Some(i)) => i,
                        (None, None) => return Err(bad("cannot infer conv input channels".into())),
                    };
                    LayerKind::Conv {
                        kernels: args.req("k").map_err(bad)?,
                        channels,
                        kh,
                        kw,
                        stride: args.opt("stride").map_err(bad)?.unwrap_or(1),
                        pad: args.opt("pad").map_err(bad)?.unwrap_or(0),
                    }
                }
                "relu" => LayerKind::Relu,
                "maxpool" => {
                    let window = args.req("window").map_err(bad)?;
                    LayerKind::MaxPool {
                        window,
                        stride: args.opt("stride").map_err(bad)?.unwrap_or(window),
                    }
                }
                "flatten" => LayerKind::Flatten,
                "dense" => {
                    let inferred = current.as_ref().map(|s| s.iter().product::<usize>());
                    let inputs = match (args.opt("d").map_err(bad)?, inferred) {
                        (Some(d), Some(i)) if d != i => {
                            return Err(bad(format!("dense d={d} but incoming size is {i}")))
                        }
                        (Some(d), _) => d,
                        (None, Some(i)) => i,
                        (None, None) => return Err(bad("cannot infer dense input size".into())),
                    };
                    LayerKind::Dense {
                        units: args.req("u").map_err(bad)?,
                        inputs,
                    }
                }
                "softmax" => LayerKind::Softmax,
                other => return Err(bad(format!("unknown layer kind {other:?}"))),
            };
            let spec = LayerSpec {
                kind,
                trainable: !args.flag("frozen"),
                head: args.flag("head"),
            };
            args.finish().map_err(bad)?;
            layers.push(spec);
        }
        let input = input.ok_or_else(|| Error::format("architecture", "missing `input c= h= w=` line"))?;
        NetworkSpec::new(input, layers)?.with_class_names(class_names)
    }
}

/// Shape entering the next layer while parsing, if it can be determined.
fn current_shape(input: Option<[usize; 3]>, layers: &[LayerSpec]) -> Result<Option<Vec<usize>>> {
    let Some(input) = input else { return Ok(None) };
    let mut shape = input.to_vec();
    for layer in layers {
        shape = output_shape(&layer.kind, &shape)?;
    }
    Ok(Some(shape))
}

#[derive(Default)]
struct Args {
    values: Vec<(String, usize)>,
    flags: Vec<String>,
}

impl Args {
    fn push(&mut self, token: &str) -> std::result::Result<(), String> {
        match token.split_once('=') {
            Some((k, v)) => {
                let v = v
                    .parse()
                    .map_err(|_| format!("{k}= expects a non-negative integer, got {v:?}"))?;
                self.values.push((k.to_string(), v));
            }
            None => self.flags.push(token.to_string()),
        }
        Ok(())
    }

    fn opt(&mut self, key: &str) -> std::result::Result<Option<usize>, String> {
        let found: Vec<usize> = self.values.iter().filter(|(k, _)| k == key).map(|(_, v)| *v).collect();
        self.values.retain(|(k, _)| k != key);
        match found.as_slice() {
            [] => Ok(None),
            [v] => Ok(Some(*v)),
            _ => Err(format!("{key}= given more than once")),
        }
    }

    fn req(&mut self, key: &str) -> std::result::Result<usize, String> {
        self.opt(key)?.ok_or_else(|| format!("missing {key}="))
    }

    fn flag(&mut self, name: &str) -> bool {
        let before = self.flags.len();
        self.flags.retain(|f| f != name);
        self.flags.len() != before
    }

    fn finish(self) -> std::result::Result<(), String> {
        if let Some((k, _)) = self.values.first() {
            return Err(format!("unexpected parameter {k}="));
        }
        if let Some(f) = self.flags.first() {
            return Err(format!("unexpected flag {f:?}"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "
        # toy net
        input c=1 h=16 w=16
        classes a b c d
        conv k=6 kh=3 kw=3 pad=1 frozen
        relu
        maxpool window=2
        flatten
        dense u=24 head
        relu
        dense u=4 d=24 head
        softmax
    ";

    #[test]
    fn parses_and_infers_shapes() {
        let spec: NetworkSpec = SMALL.parse().unwrap();
        assert_eq!(spec.layers().len(), 8);
        assert_eq!(spec.class_count(), 4);
        assert_eq!(spec.layer_output_shape(0), &[6, 16, 16]);
        assert_eq!(spec.layer_output_shape(2), &[6, 8, 8]);
        assert_eq!(
            spec.layers()[4].kind,
            LayerKind::Dense { units: 24, inputs: 384 }
        );
        assert!(!spec.layers()[0].trainable);
        assert_eq!(spec.resolve_class("c").unwrap(), 2);
        assert_eq!(spec.resolve_class("3").unwrap(), 3);
        assert!(spec.resolve_class("4").is_err());
    }

    #[test]
    fn display_round_trips() {
        let spec: NetworkSpec = SMALL.parse().unwrap();
        let again: NetworkSpec = spec.to_string().parse().unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn softmax_must_be_last() {
        let err = NetworkSpec::new(
            [1, 1, 2],
            vec![LayerSpec::flatten(), LayerSpec::softmax(), LayerSpec::dense(2, 2)],
        );
        assert!(err.is_err());
        let err = NetworkSpec::new([1, 1, 2], vec![LayerSpec::flatten(), LayerSpec::dense(2, 2)]);
        assert!(err.is_err());
    }

    #[test]
    fn shape_chain_is_checked() {
        let text = "input c=1 h=4 w=4\nflatten\ndense u=3 d=15\nsoftmax\n";
        assert!(text.parse::<NetworkSpec>().is_err());
        let text = "input c=3 h=4 w=4\nconv k=2 c=1 kh=2 kw=2\nflatten\ndense u=3\nsoftmax\n";
        assert!(text.parse::<NetworkSpec>().is_err());
    }

    #[test]
    fn rejects_unknown_tokens() {
        assert!("input c=1 h=2 w=2\nflatten\ndense u=2 bogus\nsoftmax".parse::<NetworkSpec>().is_err());
        assert!("input c=1 h=2 w=2\nflatten\ndense u=2 q=1\nsoftmax".parse::<NetworkSpec>().is_err());
        assert!("input c=1 h=2 w=2\nfancy\nsoftmax".parse::<NetworkSpec>().is_err());
    }

    #[test]
    fn head_mask_defaults_to_layers_after_last_conv() {
        let text = "input c=1 h=4 w=4\nconv k=2 kh=3 kw=3\nrelu\nflatten\ndense u=3\nsoftmax\n";
        let spec: NetworkSpec = text.parse().unwrap();
        assert_eq!(spec.head_mask(), vec![false, true, true, true, true]);
        let spec: NetworkSpec = SMALL.parse().unwrap();
        assert_eq!(
            spec.head_mask(),
            vec![false, false, false, false, true, false, true, false]
        );
    }
}
