//! Declarative network descriptions and their text serialization.

use std::fmt;
use std::ops::Range;

use crate::error::{CheckpointError, Error, Result};
use crate::spatial::HeadMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool { window: usize, stride: usize },
    Dense { out: usize },
}

impl Layer {
    /// `k×k` convolution, stride 1, size-preserving padding.
    pub const fn conv(out_channels: usize, kernel: usize) -> Layer {
        Layer::Conv {
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub const fn pool2() -> Layer {
        Layer::MaxPool { window: 2, stride: 2 }
    }

    pub const fn dense(out: usize) -> Layer {
        Layer::Dense { out }
    }

    pub fn parse(token: &str) -> std::result::Result<Layer, CheckpointError> {
        let unknown = || CheckpointError::UnknownLayer(token.to_string());
        let (name, args) = match token.find('(') {
            Some(i) if token.ends_with(')') => (&token[..i], &token[i + 1..token.len() - 1]),
            Some(_) => return Err(unknown()),
            None => (token, ""),
        };
        let nums: Vec<usize> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| a.trim().parse::<usize>().map_err(|_| unknown()))
                .collect::<std::result::Result<_, _>>()?
        };
        match (name, nums[..].as_ref()) {
            ("relu", []) => Ok(Layer::Relu),
            ("pool", []) => Ok(Layer::pool2()),
            ("pool", [w, s]) => Ok(Layer::MaxPool { window: *w, stride: *s }),
            ("dense", [o]) => Ok(Layer::Dense { out: *o }),
            ("conv", [o]) => Ok(Layer::conv(*o, 3)),
            ("conv", [o, k]) => Ok(Layer::conv(*o, *k)),
            ("conv", [o, k, s, p]) => Ok(Layer::Conv {
                out_channels: *o,
                kernel: *k,
                stride: *s,
                padding: *p,
            }),
            _ => Err(unknown()),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv({out_channels},{kernel},{stride},{padding})"),
            Layer::Relu => write!(f, "relu"),
            Layer::MaxPool { window, stride } => write!(f, "pool({window},{stride})"),
            Layer::Dense { out } => write!(f, "dense({out})"),
        }
    }
}

pub fn parse_layers(text: &str) -> std::result::Result<Vec<Layer>, CheckpointError> {
    text.split_whitespace().map(Layer::parse).collect()
}

pub fn format_layers(layers: &[Layer]) -> String {
    layers.iter().map(Layer::to_string).collect::<Vec<_>>().join(" ")
}

/// Where the spatial transformer sits and what its localization network reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// No transformer.
    Plain,
    /// Warps the input; separate localization network on the input.
    StnC0,
    /// Warps the feature map after conv block X; separate localization
    /// network reads that feature map.
    StnCx,
    /// Warps the input; the localization network reuses the classifier's
    /// first X conv blocks and adds a private head.
    StnSlx,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::StnC0 => "stn_c0",
            Variant::StnCx => "stn_c",
            Variant::StnSlx => "stn_sl",
        }
    }

    pub fn has_transformer(self) -> bool {
        self != Variant::Plain
    }
}

/// Localization network shape. `conv_channels` only applies to the
/// separate networks of `StnC0` / `StnCx`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LocSpec {
    pub mode: HeadMode,
    pub conv_channels: Vec<usize>,
    pub hidden: Vec<usize>,
}

impl Default for LocSpec {
    fn default() -> Self {
        LocSpec {
            mode: HeadMode::FullAffine,
            conv_channels: vec![16, 16],
            hidden: vec![32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    /// `(channels, height, width)` of one input image.
    pub input: (usize, usize, usize),
    pub backbone: Vec<Layer>,
    pub variant: Variant,
    /// Insertion depth for `StnCx`, sharing depth for `StnSlx`, in conv blocks.
    pub depth: usize,
    pub loc: LocSpec,
}

/// conv(32)-relu-pool, conv(64)-relu-pool, dense(128)-relu, dense(10).
pub fn default_backbone() -> Vec<Layer> {
    vec![
        Layer::conv(32, 3),
        Layer::Relu,
        Layer::pool2(),
        Layer::conv(64, 3),
        Layer::Relu,
        Layer::pool2(),
        Layer::dense(128),
        Layer::Relu,
        Layer::dense(10),
    ]
}

/// Eight 3×3 conv blocks with pooling after blocks 2, 4 and 6.
pub fn deep_backbone(widths: [usize; 8], hidden: usize) -> Vec<Layer> {
    let mut layers = Vec::new();
    for (i, &w) in widths.iter().enumerate() {
        layers.push(Layer::conv(w, 3));
        layers.push(Layer::Relu);
        if matches!(i, 1 | 3 | 5) {
            layers.push(Layer::pool2());
        }
    }
    layers.extend([Layer::dense(hidden), Layer::Relu, Layer::dense(10)]);
    layers
}

impl NetworkSpec {
    pub fn new(input: (usize, usize, usize), backbone: Vec<Layer>, variant: Variant, depth: usize, loc: LocSpec) -> Result<Self> {
        let spec = NetworkSpec {
            input,
            backbone,
            variant,
            depth,
            loc,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a spec from a short model name: `cnn`, `stn_c0`, `stn_cX`, `stn_slX`.
    pub fn named(name: &str, input: (usize, usize, usize), backbone: Vec<Layer>, loc: LocSpec) -> Result<Self> {
        let (variant, depth) = parse_model_name(name)?;
        Self::new(input, backbone, variant, depth, loc)
    }

    pub fn name(&self) -> String {
        match self.variant {
            Variant::Plain => "cnn".to_string(),
            Variant::StnC0 => "stn_c0".to_string(),
            Variant::StnCx => format!("stn_c{}", self.depth),
            Variant::StnSlx => format!("stn_sl{}", self.depth),
        }
    }

    pub fn conv_count(&self) -> usize {
        self.backbone.iter().filter(|l| matches!(l, Layer::Conv { .. })).count()
    }

    /// Layer ranges of each conv block (a conv plus the relu/pool layers that
    /// follow it), and the range of the dense tail.
    pub fn blocks(&self) -> (Vec<Range<usize>>, Range<usize>) {
        let tail_start = self
            .backbone
            .iter()
            .position(|l| matches!(l, Layer::Dense { .. }))
            .unwrap_or(self.backbone.len());
        let starts: Vec<usize> = self.backbone[..tail_start]
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv { .. }))
            .map(|(i, _)| i)
            .collect();
        let blocks = starts
            .iter()
            .enumerate()
            .map(|(k, &s)| s..starts.get(k + 1).copied().unwrap_or(tail_start))
            .collect();
        (blocks, tail_start..self.backbone.len())
    }

    pub fn num_classes(&self) -> usize {
        match self.backbone.last() {
            Some(Layer::Dense { out }) => *out,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("empty input shape {:?}", self.input));
        }
        if !matches!(self.backbone.last(), Some(Layer::Dense { .. })) {
            return bad("backbone must end with a dense layer".into());
        }
        if self.backbone.first().is_some_and(|l| !matches!(l, Layer::Conv { .. } | Layer::Dense { .. })) {
            return bad("backbone must start with a conv or dense layer".into());
        }
        let (_, tail) = self.blocks();
        if self.backbone[tail].iter().any(|l| matches!(l, Layer::Conv { .. } | Layer::MaxPool { .. })) {
            return bad("conv and pool layers must precede the first dense layer".into());
        }
        for l in &self.backbone {
            match *l {
                Layer::Conv { out_channels, kernel, stride, .. } if out_channels == 0 || kernel == 0 || stride == 0 => {
                    return bad(format!("degenerate layer {l}"))
                }
                Layer::MaxPool { window, stride } if window == 0 || stride == 0 => {
                    return bad(format!("degenerate layer {l}"))
                }
                Layer::Dense { out: 0 } => return bad(format!("degenerate layer {l}")),
                _ => {}
            }
        }
        let convs = self.conv_count();
        match self.variant {
            Variant::Plain | Variant::StnC0 if self.depth != 0 => {
                bad(format!("{} takes depth 0, got {}", self.variant.name(), self.depth))
            }
            Variant::StnCx | Variant::StnSlx if self.depth == 0 => {
                bad("depth 0 is only valid as stn_c0".into())
            }
            Variant::StnCx | Variant::StnSlx if self.depth > convs => bad(format!(
                "depth {} exceeds the {convs} conv layers of the backbone",
                self.depth
            )),
            _ => Ok(()),
        }?;
        // Every layer must produce a non-empty map.
        self.feature_shapes().map(|_| ())
    }

    /// Shape `(c, h, w)` after each conv block, starting with the input at index 0.
    pub fn feature_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (blocks, _) = self.blocks();
        let mut shapes = vec![self.input];
        let mut cur = self.input;
        for block in blocks {
            for layer in &self.backbone[block] {
                cur = layer_output(layer, cur)?;
            }
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn to_text(&self) -> String {
        let (c, h, w) = self.input;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "input={c}x{h}x{w}\nvariant={}\ndepth={}\nbackbone={}\nloc_mode={}\nloc_conv={}\nloc_hidden={}\n",
            self.variant.name(),
            self.depth,
            format_layers(&self.backbone),
            self.loc.mode.name(),
            list(&self.loc.conv_channels),
            list(&self.loc.hidden),
        )
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, CheckpointError> {
        let corrupt = |d: String| CheckpointError::CorruptLength { offset: 0, detail: d };
        let mut input = None;
        let mut variant = None;
        let mut depth = None;
        let mut backbone = None;
        let mut loc = LocSpec::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("bad spec line `{line}`")))?;
            match k {
                "input" => {
                    let d: Vec<usize> = v.split('x').filter_map(|p| p.parse().ok()).collect();
                    match d[..] {
                        [c, h, w] => input = Some((c, h, w)),
                        _ => return Err(corrupt(format!("bad input `{v}`"))),
                    }
                }
                "variant" => {
                    variant = Some(match v {
                        "plain" => Variant::Plain,
                        "stn_c0" => Variant::StnC0,
                        "stn_c" => Variant::StnCx,
                        "stn_sl" => Variant::StnSlx,
                        other => return Err(CheckpointError::UnknownLayer(other.to_string())),
                    })
                }
                "depth" => depth = Some(v.parse().map_err(|_| corrupt(format!("bad depth `{v}`")))?),
                "backbone" => backbone = Some(parse_layers(v)?),
                "loc_mode" => {
                    loc.mode = HeadMode::parse(v).ok_or_else(|| CheckpointError::UnknownLayer(v.to_string()))?
                }
                "loc_conv" => loc.conv_channels = parse_list(v).ok_or_else(|| corrupt(format!("bad loc_conv `{v}`")))?,
                "loc_hidden" => loc.hidden = parse_list(v).ok_or_else(|| corrupt(format!("bad loc_hidden `{v}`")))?,
                other => return Err(corrupt(format!("unknown spec key `{other}`"))),
            }
        }
        let spec = NetworkSpec {
            input: input.ok_or_else(|| corrupt("missing input".into()))?,
            backbone: backbone.ok_or_else(|| corrupt("missing backbone".into()))?,
            variant: variant.ok_or_else(|| corrupt("missing variant".into()))?,
            depth: depth.ok_or_else(|| corrupt("missing depth".into()))?,
            loc,
        };
        spec.validate()
            .map_err(|e| CheckpointError::ParamMismatch(e.to_string()))?;
        Ok(spec)
    }
}

fn parse_list(v: &str) -> Option<Vec<usize>> {
    if v.trim().is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|p| p.trim().parse().ok()).collect()
}

/// `cnn` | `plain` | `stn_c0` | `stn_c<X>` | `stn_sl<X>`.
pub fn parse_model_name(name: &str) -> Result<(Variant, usize)> {
    let bad = || Error::Spec(format!("unknown model name `{name}`"));
    match name {
        "cnn" | "plain" => Ok((Variant::Plain, 0)),
        "stn_c0" => Ok((Variant::StnC0, 0)),
        _ => {
            if let Some(d) = name.strip_prefix("stn_sl") {
                let x: usize = d.parse().map_err(|_| bad())?;
                if x == 0 {
                    Ok((Variant::StnC0, 0))
                } else {
                    Ok((Variant::StnSlx, x))
                }
            } else if let Some(d) = name.strip_prefix("stn_c") {
                Ok((Variant::StnCx, d.parse().map_err(|_| bad())?))
            } else {
                Err(bad())
            }
        }
    }
}

pub(crate) fn layer_output(layer: &Layer, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    match *layer {
        Layer::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let (ph, pw) = (h + 2 * padding, w + 2 * padding);
            if ph < kernel || pw < kernel {
                return Err(Error::Spec(format!("{layer} does not fit a {h}x{w} map")));
            }
            Ok((out_channels, (ph - kernel) / stride + 1, (pw - kernel) / stride + 1))
        }
        Layer::Relu => Ok((c, h, w)),
        Layer::MaxPool { window, stride } => {
            if h < window || w < window {
                return Err(Error::Spec(format!("{layer} does not fit a {h}x{w} map")));
            }
            Ok((c, (h - window) / stride + 1, (w - window) / stride + 1))
        }
        Layer::Dense { out } => Ok((out, 1, 1)),
    }
}
