//! The residual U-Net and its two heads.
//!
//! The encoder has `depth` stages at channels `base·2^i`, each an entry
//! conv/norm/ReLU followed by a body block and 2×2 max pooling. A body
//! block at the bottleneck keeps `base·2^(depth-1)` channels. Each decoder
//! stage upsamples, applies conv/norm/ReLU, merges the matching encoder
//! output and runs another body block. Two 1×1 convolutions read the final
//! `base`-channel map: a presence head (one logit per pixel) and a
//! character head (K logits, evaluated only at requested positions).

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    self, conv2d, conv2d_grad, group_norm, group_norm_grad, maxpool2, maxpool2_grad, relu, relu_grad, upsample2_grad,
    upsample2_nearest, TensorError, GROUP_NORM_EPS,
};
use crate::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match the expected {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("position ({row}, {col}) outside a {resolution}x{resolution} map")]
    PositionOutOfRange { row: usize, col: usize, resolution: usize },
    #[error("position ({row}, {col}) listed twice")]
    DuplicatePosition { row: usize, col: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// How encoder features reach the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Residual body blocks; long skips are summed.
    Residual,
    /// Plain double-conv blocks; long skips are concatenated.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_resolution: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub groups: usize,
    pub in_channels: usize,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_resolution: 640,
            base_channels: 64,
            depth: 4,
            num_classes: 4000,
            groups: 16,
            in_channels: 1,
            architecture: Architecture::Residual,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.depth != 4 {
            return fail(format!("depth is fixed at 4, got {}", self.depth));
        }
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(1 << self.depth) {
            return fail(format!(
                "input_resolution {} is not a positive multiple of {}",
                self.input_resolution,
                1 << self.depth
            ));
        }
        if self.groups == 0 || self.base_channels == 0 || !self.base_channels.is_multiple_of(self.groups) {
            return fail(format!(
                "base_channels {} not divisible into {} groups",
                self.base_channels, self.groups
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        Ok(())
    }

    /// Channel count of encoder/decoder stage `i`.
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// `[channels, height, width]` of the bottleneck activation.
    pub fn bottleneck_shape(&self) -> [usize; 3] {
        let side = self.input_resolution >> self.depth;
        [self.channels(self.depth - 1), side, side]
    }

    pub fn parameter_count(&self) -> usize {
        let cnr = |cin: usize, cout: usize| 9 * cin * cout + cout + 2 * cout;
        let body = |c: usize| match self.architecture {
            Architecture::Residual => 2 * cnr(c, c),
            Architecture::Plain => cnr(c, c),
        };
        let mut total = 0;
        for i in 0..self.depth {
            let cin = if i == 0 { self.in_channels } else { self.channels(i - 1) };
            total += cnr(cin, self.channels(i)) + body(self.channels(i));
        }
        total += body(self.channels(self.depth - 1));
        for j in 0..self.depth {
            let cin = if j + 1 == self.depth {
                self.channels(j)
            } else {
                self.channels(j + 1)
            };
            let c = self.channels(j);
            total += cnr(cin, c) + body(c);
            if self.architecture == Architecture::Plain {
                total += cnr(2 * c, c);
            }
        }
        let c = self.base_channels;
        total + (c + 1) + (self.num_classes * c + self.num_classes)
    }
}

/// Bytes needed to hold dense per-pixel class distributions in 32-bit floats.
pub fn memory_estimate_dense(config: &ModelConfig) -> u64 {
    let r = config.input_resolution as u64;
    r * r * config.num_classes as u64 * 4
}

/// Pixel positions `(row, col)` at model resolution.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PositionList(Vec<(usize, usize)>);

impl PositionList {
    pub fn new(positions: Vec<(usize, usize)>, resolution: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(positions.len());
        for &(row, col) in &positions {
            if row >= resolution || col >= resolution {
                return Err(ModelError::PositionOutOfRange { row, col, resolution });
            }
            if !seen.insert((row, col)) {
                return Err(ModelError::DuplicatePosition { row, col });
            }
        }
        Ok(Self(positions))
    }

    pub fn as_slice(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn push(&mut self, name: String, value: Tensor<T>) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradient accumulators parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            tensors: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    fn add(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        Ok(self.tensors[id.0].add_assign(g)?)
    }
}

struct Init<'a> {
    store: ParamStore<f64>,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let w = Tensor::uniform(&[cout, cin, k, k], (6.0 / fan_in).sqrt(), self.rng);
        Conv {
            weight: self.store.push(format!("{name}.weight"), w),
            bias: self.store.push(format!("{name}.bias"), Tensor::zeros(&[cout])),
            padding: k / 2,
        }
    }

    fn cnr(&mut self, name: &str, cin: usize, cout: usize, groups: usize) -> Cnr {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3);
        Cnr {
            conv,
            norm: Norm {
                gamma: self
                    .store
                    .push(format!("{name}.norm.gamma"), Tensor::full(&[cout], 1.0)),
                beta: self.store.push(format!("{name}.norm.beta"), Tensor::zeros(&[cout])),
                groups,
            },
        }
    }

    fn block(&mut self, name: &str, c: usize, groups: usize, arch: Architecture) -> Block {
        match arch {
            Architecture::Residual => Block::Residual(
                self.cnr(&format!("{name}.a"), c, c, groups),
                self.cnr(&format!("{name}.b"), c, c, groups),
            ),
            Architecture::Plain => Block::Plain(self.cnr(&format!("{name}.a"), c, c, groups)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    padding: usize,
}

impl Conv {
    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(conv2d(x, p.get(self.weight), p.get(self.bias), self.padding, 1)?)
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        g: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let og = conv2d_grad(x, p.get(self.weight), dy, self.padding, 1)?;
        g.add(self.weight, &og.params["weight"])?;
        g.add(self.bias, &og.params["bias"])?;
        Ok(og.input)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

/// conv 3×3 → group norm → ReLU.
#[derive(Debug, Clone, Copy)]
struct Cnr {
    conv: Conv,
    norm: Norm,
}

struct CnrCache<T> {
    x: Tensor<T>,
    conv_out: Tensor<T>,
    norm_out: Tensor<T>,
}

impl Cnr {
    fn infer<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.conv.forward(p, x)?;
        let n = group_norm(
            &c,
            self.norm.groups,
            p.get(self.norm.gamma),
            p.get(self.norm.beta),
            GROUP_NORM_EPS,
        )?;
        Ok(relu(&n))
    }

    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: Tensor<T>) -> Result<(Tensor<T>, CnrCache<T>)> {
        let conv_out = self.conv.forward(p, &x)?;
        let norm_out = group_norm(
            &conv_out,
            self.norm.groups,
            p.get(self.norm.gamma),
            p.get(self.norm.beta),
            GROUP_NORM_EPS,
        )?;
        let y = relu(&norm_out);
        Ok((y, CnrCache { x, conv_out, norm_out }))
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &CnrCache<T>,
        dy: &Tensor<T>,
        g: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let dn = relu_grad(&cache.norm_out, dy)?;
        let ng = group_norm_grad(
            &cache.conv_out,
            self.norm.groups,
            p.get(self.norm.gamma),
            GROUP_NORM_EPS,
            &dn,
        )?;
        g.add(self.norm.gamma, &ng.params["gamma"])?;
        g.add(self.norm.beta, &ng.params["beta"])?;
        self.conv.backward(p, &cache.x, &ng.input, g)
    }
}

#[derive(Debug, Clone, Copy)]
enum Block {
    /// `x + b(a(x))`
    Residual(Cnr, Cnr),
    Plain(Cnr),
}

enum BlockCache<T> {
    Residual(CnrCache<T>, CnrCache<T>),
    Plain(CnrCache<T>),
}

impl Block {
    fn infer<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Block::Residual(a, b) => Ok(tensor::add(x, &b.infer(p, &a.infer(p, x)?)?)?),
            Block::Plain(a) => a.infer(p, x),
        }
    }

    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        match self {
            Block::Residual(a, b) => {
                let (h, ca) = a.forward(p, x.clone())?;
                let (f, cb) = b.forward(p, h)?;
                Ok((tensor::add(&x, &f)?, BlockCache::Residual(ca, cb)))
            }
            Block::Plain(a) => {
                let (y, c) = a.forward(p, x)?;
                Ok((y, BlockCache::Plain(c)))
            }
        }
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &BlockCache<T>,
        dy: &Tensor<T>,
        g: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        match (self, cache) {
            (Block::Residual(a, b), BlockCache::Residual(ca, cb)) => {
                let dh = b.backward(p, cb, dy, g)?;
                let mut dx = a.backward(p, ca, &dh, g)?;
                dx.add_assign(dy)?;
                Ok(dx)
            }
            (Block::Plain(a), BlockCache::Plain(c)) => a.backward(p, c, dy, g),
            _ => unreachable!("block cache variant always matches its block"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderStage {
    entry: Cnr,
    body: Block,
}

#[derive(Debug, Clone, Copy)]
struct DecoderStage {
    up: Cnr,
    /// Present for concatenation skips: reduces `2c` channels back to `c`.
    merge: Option<Cnr>,
    body: Block,
    channels: usize,
    level: usize,
}

struct EncoderCache<T> {
    entry: CnrCache<T>,
    body: BlockCache<T>,
    pooled_from: Vec<usize>,
    argmax: Vec<usize>,
}

struct DecoderCache<T> {
    up: CnrCache<T>,
    merge: Option<CnrCache<T>>,
    body: BlockCache<T>,
}

/// Activations retained by a training forward pass.
pub struct ForwardCache<T> {
    encoder: Vec<EncoderCache<T>>,
    bottleneck: BlockCache<T>,
    /// Decoder caches in execution order (deepest stage first).
    decoder: Vec<DecoderCache<T>>,
}

/// The two-headed residual U-Net.
#[derive(Debug, Clone)]
pub struct KuroNet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Vec<EncoderStage>,
    bottleneck: Block,
    decoder: Vec<DecoderStage>,
    presence: Conv,
    character: Conv,
}

impl<T: Scalar> KuroNet<T> {
    /// Builds the network with fan-in scaled uniform conv weights, zero
    /// biases, and identity group-norm affines.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: ParamStore {
                names: Vec::new(),
                values: Vec::new(),
            },
            rng: &mut rng,
        };
        let (g, arch) = (config.groups, config.architecture);
        let mut encoder = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let cin = if i == 0 {
                config.in_channels
            } else {
                config.channels(i - 1)
            };
            let c = config.channels(i);
            encoder.push(EncoderStage {
                entry: init.cnr(&format!("enc{i}.entry"), cin, c, g),
                body: init.block(&format!("enc{i}.body"), c, g, arch),
            });
        }
        let bottleneck = init.block("bottleneck", config.channels(config.depth - 1), g, arch);
        let mut decoder = Vec::with_capacity(config.depth);
        for j in (0..config.depth).rev() {
            let c = config.channels(j);
            let cin = if j + 1 == config.depth {
                c
            } else {
                config.channels(j + 1)
            };
            let up = init.cnr(&format!("dec{j}.up"), cin, c, g);
            let merge = match arch {
                Architecture::Residual => None,
                Architecture::Plain => Some(init.cnr(&format!("dec{j}.merge"), 2 * c, c, g)),
            };
            decoder.push(DecoderStage {
                up,
                merge,
                body: init.block(&format!("dec{j}.body"), c, g, arch),
                channels: c,
                level: j,
            });
        }
        let presence = init.conv("head.presence", config.base_channels, 1, 1);
        let character = init.conv("head.character", config.base_channels, config.num_classes, 1);
        let store = init.store;
        Ok(Self {
            params: ParamStore {
                names: store.names,
                values: store.values.iter().map(Tensor::cast).collect(),
            },
            config,
            encoder,
            bottleneck,
            decoder,
            presence,
            character,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn resolution(&self) -> usize {
        self.config.input_resolution
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Same topology with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> KuroNet<U> {
        KuroNet {
            config: self.config.clone(),
            params: ParamStore {
                names: self.params.names.clone(),
                values: self.params.values.iter().map(Tensor::cast).collect(),
            },
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck,
            decoder: self.decoder.clone(),
            presence: self.presence,
            character: self.character,
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let r = self.config.input_resolution;
        let expected = [1, self.config.in_channels, r, r];
        if image.shape() != expected {
            return Err(ModelError::InputShape {
                expected: expected.to_vec(),
                got: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Shared `[1, base, R, R]` feature map for an `[1, ch, R, R]` image.
    pub fn forward_features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let p = &self.params;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = image.clone();
        for stage in &self.encoder {
            let s = stage.body.infer(p, &stage.entry.infer(p, &x)?)?;
            x = maxpool2(&s)?.0;
            skips.push(s);
        }
        x = self.bottleneck.infer(p, &x)?;
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let u = stage.up.infer(p, &upsample2_nearest(&x)?)?;
            let merged = match stage.merge {
                None => tensor::add(&u, &skip)?,
                Some(m) => m.infer(p, &Tensor::concat_channels(&u, &skip)?)?,
            };
            x = stage.body.infer(p, &merged)?;
        }
        Ok(x)
    }

    /// Like [`forward_features`](Self::forward_features), retaining what the
    /// backward pass needs.
    pub fn forward_train(&self, image: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_image(image)?;
        let p = &self.params;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut x = image.clone();
        for stage in &self.encoder {
            let (e, entry) = stage.entry.forward(p, x)?;
            let (s, body) = stage.body.forward(p, e)?;
            let (pooled, argmax) = maxpool2(&s)?;
            encoder.push(EncoderCache {
                entry,
                body,
                pooled_from: s.shape().to_vec(),
                argmax,
            });
            skips.push(s);
            x = pooled;
        }
        let (mut x, bottleneck) = self.bottleneck.forward(p, x)?;
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let (u, up) = stage.up.forward(p, upsample2_nearest(&x)?)?;
            let (merged, merge) = match stage.merge {
                None => (tensor::add(&u, &skip)?, None),
                Some(m) => {
                    let (y, c) = m.forward(p, Tensor::concat_channels(&u, &skip)?)?;
                    (y, Some(c))
                }
            };
            let (y, body) = stage.body.forward(p, merged)?;
            decoder.push(DecoderCache { up, merge, body });
            x = y;
        }
        Ok((
            x,
            ForwardCache {
                encoder,
                bottleneck,
                decoder,
            },
        ))
    }

    /// Accumulates parameter gradients given the gradient w.r.t. the feature map.
    pub fn backward_features(
        &self,
        cache: &ForwardCache<T>,
        dfeatures: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        let p = &self.params;
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; self.encoder.len()];
        let mut dx = dfeatures.clone();
        for (stage, c) in self.decoder.iter().zip(&cache.decoder).rev() {
            let dm = stage.body.backward(p, &c.body, &dx, grads)?;
            let (du, dskip) = match (stage.merge, &c.merge) {
                (Some(m), Some(mc)) => {
                    let dcat = m.backward(p, mc, &dm, grads)?;
                    dcat.split_channels(stage.channels)?
                }
                _ => (dm.clone(), dm),
            };
            dskips[stage.level] = Some(dskip);
            let dup = stage.up.backward(p, &c.up, &du, grads)?;
            dx = upsample2_grad(&dup)?;
        }
        dx = self.bottleneck.backward(p, &cache.bottleneck, &dx, grads)?;
        for (i, (stage, c)) in self.encoder.iter().zip(&cache.encoder).enumerate().rev() {
            let mut ds = maxpool2_grad(&c.pooled_from, &c.argmax, &dx)?;
            ds.add_assign(dskips[i].as_ref().expect("every stage has a skip gradient"))?;
            let de = stage.body.backward(p, &c.body, &ds, grads)?;
            dx = stage.entry.backward(p, &c.entry, &de, grads)?;
        }
        Ok(())
    }

    /// One presence logit per pixel, `[1, 1, R, R]`.
    pub fn presence_logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.presence.forward(&self.params, features)
    }

    /// Returns the gradient w.r.t. `features`.
    pub fn presence_backward(
        &self,
        features: &Tensor<T>,
        dlogits: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        self.presence.backward(&self.params, features, dlogits, grads)
    }

    fn gather(&self, features: &Tensor<T>, positions: &PositionList) -> Result<(Vec<T>, usize)> {
        let (n, c, h, w) = features.dims4("character_logits_at")?;
        if n != 1 || c != self.config.base_channels {
            return Err(ModelError::InputShape {
                expected: vec![1, self.config.base_channels, h, w],
                got: features.shape().to_vec(),
            });
        }
        let mut g = Vec::with_capacity(positions.len() * c);
        for &(row, col) in positions.as_slice() {
            if row >= h || col >= w {
                return Err(ModelError::PositionOutOfRange {
                    row,
                    col,
                    resolution: h,
                });
            }
            g.extend((0..c).map(|ch| features.data()[(ch * h + row) * w + col]));
        }
        Ok((g, c))
    }

    /// Character logits `[M, K]` at the given positions; row `m` belongs to `positions[m]`.
    pub fn character_logits_at(&self, features: &Tensor<T>, positions: &PositionList) -> Result<Tensor<T>> {
        let (gathered, c) = self.gather(features, positions)?;
        let k = self.config.num_classes;
        let m = positions.len();
        let bias = self.params.get(self.character.bias).data();
        let mut out: Vec<T> = (0..m).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(
            m,
            c,
            k,
            &gathered,
            false,
            self.params.get(self.character.weight).data(),
            true,
            T::one(),
            &mut out,
        );
        Ok(Tensor::new(&[m, k], out)?.ensure_finite("character_logits_at")?)
    }

    /// Accumulates character-head gradients and adds the feature gradient into `dfeatures`.
    pub fn character_backward(
        &self,
        features: &Tensor<T>,
        positions: &PositionList,
        dlogits: &Tensor<T>,
        grads: &mut Gradients<T>,
        dfeatures: &mut Tensor<T>,
    ) -> Result<()> {
        let (gathered, c) = self.gather(features, positions)?;
        let (m, k) = (positions.len(), self.config.num_classes);
        if dlogits.shape() != [m, k] {
            return Err(TensorError::ShapeMismatch {
                op: "character_backward",
                left: vec![m, k],
                right: dlogits.shape().to_vec(),
            }
            .into());
        }
        if m == 0 {
            return Ok(());
        }
        let dw = &mut grads.tensors[self.character.weight.0];
        T::gemm(k, m, c, dlogits.data(), true, &gathered, false, T::one(), dw.data_mut());
        let db = &mut grads.tensors[self.character.bias.0];
        for row in dlogits.data().chunks(k) {
            for (acc, &v) in db.data_mut().iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        let mut dg = vec![T::zero(); m * c];
        T::gemm(
            m,
            k,
            c,
            dlogits.data(),
            false,
            self.params.get(self.character.weight).data(),
            false,
            T::zero(),
            &mut dg,
        );
        let (_, _, h, w) = dfeatures.dims4("character_backward")?;
        let df = dfeatures.data_mut();
        for (i, &(row, col)) in positions.as_slice().iter().enumerate() {
            for ch in 0..c {
                let idx = (ch * h + row) * w + col;
                df[idx] = df[idx] + dg[i * c + ch];
            }
        }
        Ok(())
    }
}
