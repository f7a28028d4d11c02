//! Patchwise network descriptions.
//!
//! A network is a linear chain of convolution, pooling and pointwise
//! layers. It is written as a text document with one directive per line:
//!
//! ```text
//! input channels=3
//! conv out=50 in=3 k=6 stride=1 weights=seed:11
//! pool kind=max k=8 stride=8
//! nonlin kind=tanh
//! conv out=32 in=50 k=7 stride=1 weights=conv2.fmap
//! ```
//!
//! `weights=` either names an FMAP file (resolved against the document's
//! directory) holding one `in x k x k` map per output channel followed by a
//! `1 x 1 x out` bias map, or `seed:<u64>`, which fills kernel and bias with
//! uniform values in `[-0.5, 0.5]`. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_fmaps, write_fmaps, FeatureMap, Shape};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightSource {
    Seed(u64),
    /// Path as written in the document.
    File(String),
}

impl fmt::Display for WeightSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSource::Seed(s) => write!(f, "seed:{s}"),
            WeightSource::File(p) => f.write_str(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerSpec<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    /// `[out][in][k][k]`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub source: WeightSource,
}

impl<T: Scalar> ConvLayerSpec<T> {
    /// A layer whose kernel and bias are drawn uniformly from `[-0.5, 0.5]`.
    pub fn seeded(
        out_channels: usize,
        in_channels: usize,
        kernel_size: usize,
        stride: usize,
        seed: u64,
    ) -> Result<Self> {
        check_positive(&[
            ("out", out_channels),
            ("in", in_channels),
            ("k", kernel_size),
            ("stride", stride),
        ])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = out_channels * in_channels * kernel_size * kernel_size;
        let mut draw = || T::from_f64(rng.gen_range(-0.5..=0.5));
        let weights = (0..n).map(|_| draw()).collect();
        let bias = (0..out_channels).map(|_| draw()).collect();
        Ok(ConvLayerSpec {
            out_channels,
            in_channels,
            kernel_size,
            stride,
            weights,
            bias,
            source: WeightSource::Seed(seed),
        })
    }

    pub fn with_weights(
        out_channels: usize,
        in_channels: usize,
        kernel_size: usize,
        stride: usize,
        weights: Vec<T>,
        bias: Vec<T>,
        source: WeightSource,
    ) -> Result<Self> {
        let layer = ConvLayerSpec {
            out_channels,
            in_channels,
            kernel_size,
            stride,
            weights,
            bias,
            source,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        check_positive(&[
            ("out", self.out_channels),
            ("in", self.in_channels),
            ("k", self.kernel_size),
            ("stride", self.stride),
        ])?;
        if self.weights.len() != self.weight_len() {
            return Err(Error::InvalidSpec(format!(
                "conv kernel has {} entries, expected {}",
                self.weights.len(),
                self.weight_len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::InvalidSpec(format!(
                "conv bias has {} entries, expected {}",
                self.bias.len(),
                self.out_channels
            )));
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size * self.kernel_size
    }

    #[inline]
    pub fn weight_index(&self, o: usize, c: usize, i: usize, j: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel_size + i) * self.kernel_size + j
    }

    #[inline]
    pub fn weight(&self, o: usize, c: usize, i: usize, j: usize) -> T {
        self.weights[self.weight_index(o, c, i, j)]
    }

    /// Splits the layer into the FMAP records of a weight file.
    pub fn to_fmaps(&self) -> Vec<FeatureMap<T>> {
        let k = self.kernel_size;
        let per_out = self.in_channels * k * k;
        let mut maps: Vec<_> = self
            .weights
            .chunks(per_out)
            .map(|w| FeatureMap::from_parts(Shape::new(self.in_channels, k, k).unwrap(), w.to_vec()))
            .collect();
        maps.push(FeatureMap::from_parts(
            Shape::new(1, 1, self.out_channels).unwrap(),
            self.bias.clone(),
        ));
        maps
    }

    pub fn write_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        write_fmaps(path, &self.to_fmaps())
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayerSpec<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        ConvLayerSpec {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel_size: self.kernel_size,
            stride: self.stride,
            weights: conv(&self.weights),
            bias: conv(&self.bias),
            source: self.source.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolLayerSpec {
    pub kind: PoolKind,
    pub kernel_size: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NonlinKind {
    Tanh,
    Relu,
    Identity,
}

impl NonlinKind {
    pub fn name(self) -> &'static str {
        match self {
            NonlinKind::Tanh => "tanh",
            NonlinKind::Relu => "relu",
            NonlinKind::Identity => "identity",
        }
    }

    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            NonlinKind::Tanh => v.tanh(),
            NonlinKind::Relu => v.max(T::zero()),
            NonlinKind::Identity => v,
        }
    }

    /// Derivative at `v`; the ReLU derivative at exactly zero is zero.
    #[inline]
    pub fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            NonlinKind::Tanh => {
                let t = v.tanh();
                T::one() - t * t
            }
            NonlinKind::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            NonlinKind::Identity => T::one(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NonlinLayerSpec {
    pub kind: NonlinKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec<T> {
    Conv(ConvLayerSpec<T>),
    Pool(PoolLayerSpec),
    Nonlin(NonlinLayerSpec),
}

impl<T> LayerSpec<T> {
    /// Kernel size and stride of windowed layers.
    pub fn window(&self) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Conv(c) => Some((c.kernel_size, c.stride)),
            LayerSpec::Pool(p) => Some((p.kernel_size, p.stride)),
            LayerSpec::Nonlin(_) => None,
        }
    }

    pub fn stride(&self) -> usize {
        self.window().map_or(1, |(_, s)| s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec<T> {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec<T>>,
}

impl<T: Scalar> NetworkSpec<T> {
    pub fn new(input_channels: usize, layers: Vec<LayerSpec<T>>) -> Result<Self> {
        let spec = NetworkSpec {
            input_channels,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("no layers".into()));
        }
        check_positive(&[("input channels", self.input_channels)])?;
        let mut channels = self.input_channels;
        for (k, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv(c) => {
                    c.validate()?;
                    if c.in_channels != channels {
                        return Err(Error::ChannelChain {
                            layer: k + 1,
                            expected: c.in_channels,
                            found: channels,
                        });
                    }
                    channels = c.out_channels;
                }
                LayerSpec::Pool(p) => check_positive(&[("k", p.kernel_size), ("stride", p.stride)])?,
                LayerSpec::Nonlin(_) => {}
            }
        }
        let n = self.patch_size()?;
        let sizes = self.layer_sizes(n)?;
        debug_assert_eq!(sizes.last(), Some(&1));
        Ok(())
    }

    /// Channels of the final output.
    pub fn output_channels(&self) -> usize {
        self.channels_after().last().copied().unwrap_or(self.input_channels)
    }

    /// Channel count of each layer's output.
    pub fn channels_after(&self) -> Vec<usize> {
        let mut c = self.input_channels;
        self.layers
            .iter()
            .map(|l| {
                if let LayerSpec::Conv(conv) = l {
                    c = conv.out_channels;
                }
                c
            })
            .collect()
    }

    /// Side of the square patch that the strided network maps to exactly
    /// one output pixel: walk back from `1x1` with
    /// `size <- (size - 1) * stride + kernel`.
    pub fn patch_size(&self) -> Result<usize> {
        let mut size = 1usize;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if let Some((kernel, stride)) = layer.window() {
                size = (size - 1)
                    .checked_mul(stride)
                    .and_then(|s| s.checked_add(kernel))
                    .filter(|&s| s <= u32::MAX as usize)
                    .ok_or(Error::PatchSize { layer: k + 1 })?;
            }
        }
        Ok(size)
    }

    /// Image padding on the leading (top, left) side: `floor(n / 2)`.
    pub fn padding_margin(&self) -> Result<usize> {
        Ok(self.patch_size()? / 2)
    }

    /// Leading and trailing padding. They differ only for even patch sizes.
    pub fn padding(&self) -> Result<(usize, usize)> {
        let n = self.patch_size()?;
        Ok((n / 2, n - 1 - n / 2))
    }

    /// Spatial side of every layer's input when the strided network runs on
    /// an `n x n` patch, plus the final output side. Fails unless every
    /// window tiles its input exactly.
    pub fn layer_sizes(&self, n: usize) -> Result<Vec<usize>> {
        let mut sizes = Vec::with_capacity(self.layers.len() + 1);
        let mut size = n;
        sizes.push(size);
        for (k, layer) in self.layers.iter().enumerate() {
            if let Some((kernel, stride)) = layer.window() {
                if size < kernel || !(size - kernel).is_multiple_of(stride) {
                    return Err(Error::InvalidSpec(format!(
                        "layer {}: {kernel}-wide window with stride {stride} does not tile a {size}-wide input",
                        k + 1
                    )));
                }
                size = (size - kernel) / stride + 1;
            }
            sizes.push(size);
        }
        Ok(sizes)
    }

    /// Names in the style `conv1, pool1, tanh1, conv2, ...`.
    pub fn layer_names(&self) -> Vec<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        self.layers
            .iter()
            .map(|l| {
                let base = match l {
                    LayerSpec::Conv(_) => "conv",
                    LayerSpec::Pool(_) => "pool",
                    LayerSpec::Nonlin(n) => n.kind.name(),
                };
                let n = counts.entry(base).or_default();
                *n += 1;
                format!("{base}{n}")
            })
            .collect()
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvLayerSpec<T>)> {
        self.layers.iter().enumerate().filter_map(|(k, l)| match l {
            LayerSpec::Conv(c) => Some((k, c)),
            _ => None,
        })
    }

    pub fn cast<U: Scalar>(&self) -> NetworkSpec<U> {
        NetworkSpec {
            input_channels: self.input_channels,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerSpec::Conv(c) => LayerSpec::Conv(c.cast()),
                    LayerSpec::Pool(p) => LayerSpec::Pool(*p),
                    LayerSpec::Nonlin(n) => LayerSpec::Nonlin(*n),
                })
                .collect(),
        }
    }

    /// Renders the network in the document grammar accepted by [`parse_spec`].
    pub fn to_document(&self) -> String {
        let mut out = format!("input channels={}\n", self.input_channels);
        for layer in &self.layers {
            let line = match layer {
                LayerSpec::Conv(c) => format!(
                    "conv out={} in={} k={} stride={} weights={}",
                    c.out_channels, c.in_channels, c.kernel_size, c.stride, c.source
                ),
                LayerSpec::Pool(p) => format!(
                    "pool kind={} k={} stride={}",
                    match p.kind {
                        PoolKind::Max => "max",
                        PoolKind::Average => "avg",
                    },
                    p.kernel_size,
                    p.stride
                ),
                LayerSpec::Nonlin(n) => format!("nonlin kind={}", n.kind.name()),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Parses a network document. Weight files are resolved against `base_dir`
/// (or the working directory when `None`).
pub fn parse_spec<T: Scalar>(text: &str, base_dir: Option<&Path>) -> Result<NetworkSpec<T>> {
    let mut input_channels = None;
    let mut layers = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let directive = words.next().unwrap();
        let fields = Fields::parse(line_no, words)?;
        match directive {
            "input" => {
                if input_channels.is_some() {
                    return Err(syntax(line_no, "duplicate `input` directive"));
                }
                fields.allow(&["channels"])?;
                input_channels = Some(fields.positive("channels")?);
            }
            "conv" => {
                fields.allow(&["out", "in", "k", "stride", "weights"])?;
                let out = fields.positive("out")?;
                let inp = fields.positive("in")?;
                let k = fields.positive("k")?;
                let stride = fields.positive("stride")?;
                let weights = fields.get("weights")?;
                let conv = match weights.strip_prefix("seed:") {
                    Some(seed) => {
                        let seed = seed
                            .parse::<u64>()
                            .map_err(|_| syntax(line_no, format!("bad seed `{seed}`")))?;
                        ConvLayerSpec::seeded(out, inp, k, stride, seed)?
                    }
                    None => load_conv_weights(out, inp, k, stride, weights, base_dir)
                        .map_err(|e| syntax(line_no, e.to_string()))?,
                };
                layers.push(LayerSpec::Conv(conv));
            }
            "pool" => {
                fields.allow(&["kind", "k", "stride"])?;
                let kind = match fields.get("kind")? {
                    "max" => PoolKind::Max,
                    "avg" => PoolKind::Average,
                    other => return Err(syntax(line_no, format!("unknown pool kind `{other}`"))),
                };
                layers.push(LayerSpec::Pool(PoolLayerSpec {
                    kind,
                    kernel_size: fields.positive("k")?,
                    stride: fields.positive("stride")?,
                }));
            }
            "nonlin" => {
                fields.allow(&["kind"])?;
                let kind = match fields.get("kind")? {
                    "tanh" => NonlinKind::Tanh,
                    "relu" => NonlinKind::Relu,
                    "identity" => NonlinKind::Identity,
                    other => {
                        return Err(syntax(line_no, format!("unknown nonlinearity `{other}`")))
                    }
                };
                layers.push(LayerSpec::Nonlin(NonlinLayerSpec { kind }));
            }
            other => return Err(syntax(line_no, format!("unknown directive `{other}`"))),
        }
    }
    let input_channels =
        input_channels.ok_or_else(|| Error::InvalidSpec("missing `input channels=` line".into()))?;
    NetworkSpec::new(input_channels, layers)
}

/// Reads and parses a document from disk, resolving weight files relative
/// to the document.
pub fn load_spec<T: Scalar>(path: impl AsRef<Path>) -> Result<NetworkSpec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spec(&text, path.parent())
}

fn load_conv_weights<T: Scalar>(
    out: usize,
    inp: usize,
    k: usize,
    stride: usize,
    file: &str,
    base_dir: Option<&Path>,
) -> Result<ConvLayerSpec<T>> {
    let path: PathBuf = match base_dir {
        Some(dir) if Path::new(file).is_relative() => dir.join(file),
        _ => PathBuf::from(file),
    };
    let maps = read_fmaps::<T>(&path)?;
    if maps.len() != out + 1 {
        return Err(Error::Format(format!(
            "{}: expected {} kernel maps plus a bias map, found {} records",
            path.display(),
            out,
            maps.len()
        )));
    }
    let kernel_shape = Shape::new(inp, k, k)?;
    let mut weights = Vec::with_capacity(out * kernel_shape.len());
    for m in &maps[..out] {
        if m.shape() != kernel_shape {
            return Err(Error::ShapeMismatch {
                left: kernel_shape,
                right: m.shape(),
            });
        }
        weights.extend_from_slice(m.data());
    }
    let bias_shape = Shape::new(1, 1, out)?;
    if maps[out].shape() != bias_shape {
        return Err(Error::ShapeMismatch {
            left: bias_shape,
            right: maps[out].shape(),
        });
    }
    ConvLayerSpec::with_weights(
        out,
        inp,
        k,
        stride,
        weights,
        maps[out].data().to_vec(),
        WeightSource::File(file.to_string()),
    )
}

fn syntax(line: usize, msg: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        msg: msg.into(),
    }
}

fn check_positive(dims: &[(&str, usize)]) -> Result<()> {
    for &(name, v) in dims {
        if v == 0 {
            return Err(Error::InvalidSpec(format!("`{name}` must be positive")));
        }
    }
    Ok(())
}

struct Fields<'a> {
    line: usize,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn parse(line: usize, words: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| syntax(line, format!("expected key=value, found `{w}`")))?;
            if map.insert(k, v).is_some() {
                return Err(syntax(line, format!("field `{k}` given twice")));
            }
        }
        Ok(Fields { line, map })
    }

    fn allow(&self, keys: &[&str]) -> Result<()> {
        match self.map.keys().find(|k| !keys.contains(k)) {
            Some(k) => Err(syntax(self.line, format!("unexpected field `{k}`"))),
            None => Ok(()),
        }
    }

    fn get(&self, key: &str) -> Result<&'a str> {
        self.map
            .get(key)
            .copied()
            .ok_or_else(|| syntax(self.line, format!("missing field `{key}`")))
    }

    fn positive(&self, key: &str) -> Result<usize> {
        let raw = self.get(key)?;
        let v: u32 = raw
            .parse()
            .map_err(|_| syntax(self.line, format!("field `{key}`: `{raw}` is not a u32")))?;
        if v == 0 {
            return Err(syntax(self.line, format!("field `{key}` must be positive")));
        }
        Ok(v as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn plain_cnn1_parses_to_seven_layers() {
        let spec: NetworkSpec<f64> = parse_spec(&presets::plain_cnn1_document(1, 8), None).unwrap();
        assert_eq!(spec.layers.len(), 7);
        assert_eq!(spec.input_channels, 3);
        assert_eq!(spec.output_channels(), 32);
        assert_eq!(
            spec.layer_names(),
            ["conv1", "pool1", "tanh1", "conv2", "pool2", "tanh2", "conv3"]
        );
    }

    #[test]
    fn patch_sizes() {
        let ex: NetworkSpec<f64> = presets::example_net(0);
        assert_eq!(ex.patch_size().unwrap(), 15);
        let plain: NetworkSpec<f64> = presets::plain_cnn1(0, 8);
        assert_eq!(plain.patch_size().unwrap(), 133);
        assert_eq!(presets::plain_cnn1::<f64>(0, 4).patch_size().unwrap(), 69);
        assert_eq!(presets::plain_cnn1::<f64>(0, 2).patch_size().unwrap(), 37);
        let one = NetworkSpec::<f64>::new(
            1,
            vec![LayerSpec::Conv(ConvLayerSpec::seeded(1, 1, 1, 1, 0).unwrap())],
        )
        .unwrap();
        assert_eq!(one.patch_size().unwrap(), 1);
        assert_eq!(one.padding_margin().unwrap(), 0);
    }

    #[test]
    fn padding_margins() {
        let ex: NetworkSpec<f64> = presets::example_net(0);
        assert_eq!(ex.padding_margin().unwrap(), 7);
        assert_eq!(5 + 2 * ex.padding_margin().unwrap(), 19);
        let plain: NetworkSpec<f64> = presets::plain_cnn1(0, 8);
        assert_eq!(plain.padding_margin().unwrap(), 66);
        assert_eq!(256 + 2 * plain.padding_margin().unwrap(), 388);
    }

    #[test]
    fn even_patch_padding_is_asymmetric() {
        let spec = NetworkSpec::<f64>::new(
            1,
            vec![LayerSpec::Conv(ConvLayerSpec::seeded(1, 1, 4, 1, 0).unwrap())],
        )
        .unwrap();
        assert_eq!(spec.patch_size().unwrap(), 4);
        assert_eq!(spec.padding().unwrap(), (2, 1));
    }

    #[test]
    fn rcnn3_chain_matches_reported_padding() {
        let spec: NetworkSpec<f64> = presets::rcnn3_chain(0);
        assert_eq!(spec.patch_size().unwrap(), 155);
        assert_eq!(256 + 2 * spec.padding_margin().unwrap(), 410);
    }

    #[test]
    fn forward_size_simulation_reaches_one() {
        let ex: NetworkSpec<f64> = presets::example_net(0);
        assert_eq!(ex.layer_sizes(15).unwrap(), [15, 14, 7, 6, 2, 1]);
        assert!(ex.layer_sizes(16).is_err());
    }

    #[test]
    fn empty_document_rejected() {
        let err = parse_spec::<f64>("input channels=1\n", None).unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)), "{err}");
        assert!(parse_spec::<f64>("", None).is_err());
    }

    #[test]
    fn channel_chain_mismatch() {
        let doc = "input channels=3\n\
                   conv out=25 in=3 k=3 stride=1 weights=seed:1\n\
                   conv out=10 in=50 k=3 stride=1 weights=seed:2\n";
        let err = parse_spec::<f64>(doc, None).unwrap_err();
        assert!(
            matches!(err, Error::ChannelChain { layer: 2, expected: 50, found: 25 }),
            "{err}"
        );
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let cases = [
            ("input channels=1\nconv out=1 in=1 k=0 stride=1 weights=seed:1\n", 2),
            ("input channels=1\n\nfoo\n", 3),
            ("input channels=1\npool kind=median k=2 stride=2\n", 2),
            ("input channels=x\n", 1),
            ("input channels=1\nnonlin kind=tanh extra=1\n", 2),
            ("input channels=1\nconv out=1 in=1 k=1 stride=1\n", 2),
            ("input channels=1\nconv out=1 in=1 k=1 stride=1 weights=seed:-3\n", 2),
            ("input channels=1\ninput channels=2\n", 2),
            ("input channels=1\nconv out=1 in=1 k=1 stride=1 weights=missing.fmap\n", 2),
        ];
        for (doc, line) in cases {
            match parse_spec::<f64>(doc, None) {
                Err(Error::Syntax { line: l, .. }) => assert_eq!(l, line, "{doc}"),
                other => panic!("{doc:?}: expected syntax error, got {other:?}"),
            }
        }
    }

    #[test]
    fn comments_and_blank_lines() {
        let doc = "# a net\ninput channels=2   # rgb-ish\n\nconv out=1 in=2 k=3 stride=1 weights=seed:4\n";
        let spec = parse_spec::<f64>(doc, None).unwrap();
        assert_eq!(spec.layers.len(), 1);
    }

    #[test]
    fn seeded_weights_in_range_and_deterministic() {
        let a = ConvLayerSpec::<f64>::seeded(4, 3, 3, 1, 9).unwrap();
        let b = ConvLayerSpec::<f64>::seeded(4, 3, 3, 1, 9).unwrap();
        let c = ConvLayerSpec::<f64>::seeded(4, 3, 3, 1, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        assert!(a.weights.iter().chain(&a.bias).all(|v| (-0.5..=0.5).contains(v)));
    }

    #[test]
    fn document_roundtrip_with_weight_file() {
        let dir = tempfile::tempdir().unwrap();
        let conv = ConvLayerSpec::<f32>::seeded(3, 2, 2, 1, 5).unwrap();
        conv.write_weights(dir.path().join("w.fmap")).unwrap();
        let doc = "input channels=2\nconv out=3 in=2 k=2 stride=1 weights=w.fmap\npool kind=avg k=2 stride=2\nnonlin kind=relu\n";
        let spec = parse_spec::<f32>(doc, Some(dir.path())).unwrap();
        match &spec.layers[0] {
            LayerSpec::Conv(c) => {
                assert_eq!(c.weights, conv.weights);
                assert_eq!(c.bias, conv.bias);
            }
            _ => unreachable!(),
        }
        assert_eq!(spec.to_document(), doc);
        let again = parse_spec::<f32>(&spec.to_document(), Some(dir.path())).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn weight_file_shape_checked() {
        let dir = tempfile::tempdir().unwrap();
        ConvLayerSpec::<f32>::seeded(3, 2, 2, 1, 5)
            .unwrap()
            .write_weights(dir.path().join("w.fmap"))
            .unwrap();
        let doc = "input channels=2\nconv out=3 in=2 k=3 stride=1 weights=w.fmap\n";
        assert!(parse_spec::<f32>(doc, Some(dir.path())).is_err());
    }

    #[test]
    fn random_documents_roundtrip() {
        for seed in 0..40 {
            let spec: NetworkSpec<f64> = presets::random_small(seed);
            let again: NetworkSpec<f64> = parse_spec(&spec.to_document(), None).unwrap();
            assert_eq!(again, spec);
            // the derived patch size always reduces to a single output pixel
            let n = spec.patch_size().unwrap();
            assert_eq!(*spec.layer_sizes(n).unwrap().last().unwrap(), 1);
        }
    }
}
