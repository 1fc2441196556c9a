//! The four network configurations over a shared layer vocabulary.
//!
//! Parameter names are stable and appear in checkpoints:
//!
//! | name                     | tensor                                  |
//! |--------------------------|-----------------------------------------|
//! | `backbone.conv{k}.weight` | k-th backbone conv kernel (1-based)     |
//! | `backbone.conv{k}.bias`   |                                         |
//! | `backbone.dense{k}.weight`| k-th backbone dense layer               |
//! | `loc.conv{k}.*`           | separate localization conv blocks       |
//! | `loc.dense{k}.*`          | localization hidden layers              |
//! | `loc.head.*`              | localization regression head            |
//!
//! `stn_sl` models have no `loc.conv*` tensors: their localization branch
//! reads `backbone.conv1..X` directly.

mod checkpoint;
mod spec;

use std::collections::HashMap;

use rand::Rng;

pub use checkpoint::{from_bytes, load, save, to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use spec::{
    deep_backbone, default_backbone, format_layers, parse_layers, parse_model_name, Layer, LocSpec, NetworkSpec,
    Variant,
};

use crate::error::{Error, Result};
use crate::rng;
use crate::spatial::{identity_head_init, localization_head, params_from_tensor, spatial_transform, AffineParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    fn add(&mut self, name: String, tensor: Tensor) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

type Affine = (ParamId, ParamId);

/// Parameter ids wired into each part of the graph.
#[derive(Clone, Debug, PartialEq)]
struct Wiring {
    /// One entry per backbone layer; `Some` for conv and dense layers.
    backbone: Vec<Option<Affine>>,
    /// Separate localization conv blocks (empty for `stn_sl`).
    loc_convs: Vec<Affine>,
    loc_hidden: Vec<Affine>,
    loc_head: Option<Affine>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelInstance {
    spec: NetworkSpec,
    params: ParamStore,
    wiring: Wiring,
}

/// Graph handles produced by [`ModelInstance::forward_on`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub theta: Option<Var>,
    /// Map the transformer warps (the input, or a feature map for `stn_c`).
    pub pre_warp: Option<Var>,
    pub post_warp: Option<Var>,
    /// Tape handle of every parameter, indexed by [`ParamId`].
    pub params: Vec<Var>,
}

/// Concrete forward results.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub theta: Option<Tensor>,
    pub pre_warp: Option<Tensor>,
    pub post_warp: Option<Tensor>,
}

impl Prediction {
    pub fn predicted_params(&self) -> Option<Result<Vec<AffineParams>>> {
        self.theta.as_ref().map(params_from_tensor)
    }
}

fn he_uniform(shape: Vec<usize>, fan_in: usize, r: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, r)
}

/// Output shape of the separate localization conv stack on a `(c, h, w)` map.
fn loc_conv_output(spec: &NetworkSpec, (mut c, mut h, mut w): (usize, usize, usize)) -> (usize, usize, usize) {
    for &ch in &spec.loc.conv_channels {
        c = ch;
        if h >= 2 && w >= 2 {
            h /= 2;
            w /= 2;
        }
    }
    (c, h, w)
}

impl ModelInstance {
    /// Deterministic He-uniform initialization. Backbone and localization
    /// tensors draw from separate streams, so a backbone is identical across
    /// variants built with the same seed.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::default();
        let mut rb = rng::stream(seed, &format!("{}.backbone", rng::INIT));
        let mut rl = rng::stream(seed, &format!("{}.loc", rng::INIT));

        let mut backbone = Vec::with_capacity(spec.backbone.len());
        let (mut nconv, mut ndense) = (0, 0);
        let mut cur = spec.input;
        for layer in &spec.backbone {
            let (c, h, w) = cur;
            backbone.push(match *layer {
                Layer::Conv { out_channels, kernel, .. } => {
                    nconv += 1;
                    let fan = c * kernel * kernel;
                    let wt = he_uniform(vec![out_channels, c, kernel, kernel], fan, &mut rb);
                    let b = he_uniform(vec![out_channels], fan, &mut rb);
                    Some((
                        params.add(format!("backbone.conv{nconv}.weight"), wt),
                        params.add(format!("backbone.conv{nconv}.bias"), b),
                    ))
                }
                Layer::Dense { out } => {
                    ndense += 1;
                    let fan = c * h * w;
                    let wt = he_uniform(vec![out, fan], fan, &mut rb);
                    let b = he_uniform(vec![out], fan, &mut rb);
                    Some((
                        params.add(format!("backbone.dense{ndense}.weight"), wt),
                        params.add(format!("backbone.dense{ndense}.bias"), b),
                    ))
                }
                _ => None,
            });
            cur = spec::layer_output(layer, cur)?;
        }

        let mut wiring = Wiring {
            backbone,
            loc_convs: Vec::new(),
            loc_hidden: Vec::new(),
            loc_head: None,
        };
        if spec.variant.has_transformer() {
            let shapes = spec.feature_shapes()?;
            let reads = match spec.variant {
                Variant::StnCx => shapes[spec.depth],
                _ => spec.input,
            };
            let feat = match spec.variant {
                Variant::StnSlx => shapes[spec.depth],
                _ => {
                    let mut c = reads.0;
                    for (k, &ch) in spec.loc.conv_channels.iter().enumerate() {
                        let fan = c * 9;
                        let wt = he_uniform(vec![ch, c, 3, 3], fan, &mut rl);
                        let b = he_uniform(vec![ch], fan, &mut rl);
                        wiring.loc_convs.push((
                            params.add(format!("loc.conv{}.weight", k + 1), wt),
                            params.add(format!("loc.conv{}.bias", k + 1), b),
                        ));
                        c = ch;
                    }
                    loc_conv_output(spec, reads)
                }
            };
            let mut n = feat.0 * feat.1 * feat.2;
            for (k, &hid) in spec.loc.hidden.iter().enumerate() {
                let wt = he_uniform(vec![hid, n], n, &mut rl);
                let b = he_uniform(vec![hid], n, &mut rl);
                wiring.loc_hidden.push((
                    params.add(format!("loc.dense{}.weight", k + 1), wt),
                    params.add(format!("loc.dense{}.bias", k + 1), b),
                ));
                n = hid;
            }
            let (wt, b) = identity_head_init(spec.loc.mode, n);
            wiring.loc_head = Some((params.add("loc.head.weight".into(), wt), params.add("loc.head.bias".into(), b)));
        }
        Ok(ModelInstance { spec: spec.clone(), params, wiring })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Ids of the tensors the classification path reads.
    pub fn classifier_param_ids(&self) -> Vec<ParamId> {
        self.wiring.backbone.iter().flatten().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Ids of the tensors the localization path reads, shared ones included.
    pub fn localization_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if self.spec.variant == Variant::StnSlx {
            let (blocks, _) = self.spec.blocks();
            for block in &blocks[..self.spec.depth] {
                for slot in &self.wiring.backbone[block.clone()] {
                    if let Some((w, b)) = slot {
                        ids.extend([*w, *b]);
                    }
                }
            }
        }
        for &(w, b) in self.wiring.loc_convs.iter().chain(&self.wiring.loc_hidden).chain(&self.wiring.loc_head) {
            ids.extend([w, b]);
        }
        ids
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let [_, c, h, w] = batch.dims4("forward")?;
        if (c, h, w) != self.spec.input {
            return Err(Error::shape(
                "forward",
                "input",
                format!("expected [B, {}, {}, {}], got {:?}", self.spec.input.0, self.spec.input.1, self.spec.input.2, batch.shape()),
            ));
        }
        Ok(())
    }

    fn run_layers(&self, tape: &mut Tape, mut x: Var, range: std::ops::Range<usize>, p: &[Var]) -> Result<Var> {
        for i in range {
            x = match self.spec.backbone[i] {
                Layer::Conv { stride, padding, .. } => {
                    let (w, b) = self.wiring.backbone[i].expect("conv params");
                    tape.conv2d(x, p[w.0], p[b.0], stride, padding)?
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool { window, stride } => tape.max_pool2d(x, window, stride)?,
                Layer::Dense { .. } => {
                    let (w, b) = self.wiring.backbone[i].expect("dense params");
                    if tape.value(x).ndim() != 2 {
                        x = tape.flatten(x)?;
                    }
                    tape.dense(x, p[w.0], p[b.0])?
                }
            };
        }
        Ok(x)
    }

    /// Localization branch: optional conv stack, hidden layers, head.
    fn localize(&self, tape: &mut Tape, mut x: Var, p: &[Var]) -> Result<Var> {
        for &(w, b) in &self.wiring.loc_convs {
            x = tape.conv2d(x, p[w.0], p[b.0], 1, 1)?;
            x = tape.relu(x);
            let [_, _, h, wd] = tape.value(x).dims4("localize")?;
            if h >= 2 && wd >= 2 {
                x = tape.max_pool2d(x, 2, 2)?;
            }
        }
        x = tape.flatten(x)?;
        for &(w, b) in &self.wiring.loc_hidden {
            x = tape.dense(x, p[w.0], p[b.0])?;
            x = tape.relu(x);
        }
        let (w, b) = self.wiring.loc_head.expect("head");
        localization_head(tape, x, self.spec.loc.mode, p[w.0], p[b.0])
    }

    /// Records the forward pass on `tape`. Parameters become leaves that
    /// require gradients when `trainable` is set.
    pub fn forward_on(&self, tape: &mut Tape, batch: &Tensor, trainable: bool) -> Result<ForwardVars> {
        let p: Vec<Var> = self.params.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        self.forward_with(tape, batch, &p, &p)
    }

    /// Forward pass over caller-supplied parameter handles. The classification
    /// path reads `cls`, the localization path (shared blocks included) reads
    /// `loc`; passing distinct handles separates the two gradient paths.
    pub fn forward_with(&self, tape: &mut Tape, batch: &Tensor, cls: &[Var], loc: &[Var]) -> Result<ForwardVars> {
        self.check_input(batch)?;
        for h in [cls, loc] {
            if h.len() != self.params.len() {
                return Err(Error::invalid("forward", format!("expected {} parameter handles, got {}", self.params.len(), h.len())));
            }
        }
        let input = tape.constant(batch.clone());
        let (blocks, _) = self.spec.blocks();
        let all = 0..self.spec.backbone.len();
        let split = if self.spec.depth == 0 { 0 } else { blocks[self.spec.depth - 1].end };
        let (logits, theta, pre, post) = match self.spec.variant {
            Variant::Plain => (self.run_layers(tape, input, all, cls)?, None, None, None),
            Variant::StnC0 => {
                let theta = self.localize(tape, input, loc)?;
                let warped = spatial_transform(tape, input, theta)?;
                (self.run_layers(tape, warped, all, cls)?, Some(theta), Some(input), Some(warped))
            }
            Variant::StnCx => {
                let fmap = self.run_layers(tape, input, 0..split, cls)?;
                let theta = self.localize(tape, fmap, loc)?;
                let warped = spatial_transform(tape, fmap, theta)?;
                let out = self.run_layers(tape, warped, split..all.end, cls)?;
                (out, Some(theta), Some(fmap), Some(warped))
            }
            Variant::StnSlx => {
                let shared = self.run_layers(tape, input, 0..split, loc)?;
                let theta = self.localize(tape, shared, loc)?;
                let warped = spatial_transform(tape, input, theta)?;
                (self.run_layers(tape, warped, all, cls)?, Some(theta), Some(input), Some(warped))
            }
        };
        Ok(ForwardVars {
            logits,
            theta,
            pre_warp: pre,
            post_warp: post,
            params: cls.to_vec(),
        })
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let v = self.forward_on(&mut tape, batch, false)?;
        let get = |o: Option<Var>| o.map(|v| tape.value(v).clone());
        Ok(Prediction {
            logits: tape.value(v.logits).clone(),
            theta: get(v.theta),
            pre_warp: get(v.pre_warp),
            post_warp: get(v.post_warp),
        })
    }

    /// Backbone feature map after `blocks` conv blocks, without any warping
    /// (`0` returns the input).
    pub fn features(&self, batch: &Tensor, blocks: usize) -> Result<Tensor> {
        self.check_input(batch)?;
        let (ranges, _) = self.spec.blocks();
        if blocks > ranges.len() {
            return Err(Error::invalid("features", format!("layer {blocks} exceeds {} conv blocks", ranges.len())));
        }
        let end = if blocks == 0 { 0 } else { ranges[blocks - 1].end };
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let input = tape.constant(batch.clone());
        let out = self.run_layers(&mut tape, input, 0..end, &p)?;
        Ok(tape.value(out).clone())
    }

    /// Replaces parameters after checking names and shapes against the network layout.
    pub fn with_params(spec: &NetworkSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::build(spec, 0)?;
        if tensors.len() != model.params.len() {
            return Err(crate::error::CheckpointError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            ))
            .into());
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if model.params.names[i] != name || model.params.tensors[i].shape() != t.shape() {
                return Err(crate::error::CheckpointError::ParamMismatch(format!(
                    "slot {i}: expected {} {:?}, found {name} {:?}",
                    model.params.names[i],
                    model.params.tensors[i].shape(),
                    t.shape()
                ))
                .into());
            }
            model.params.tensors[i] = t;
        }
        Ok(model)
    }
}
