//! The mirror network: a CT branch predicting tissue groups and a PET branch
//! predicting lesions, joined by concatenating the CT encoder bottleneck onto
//! the PET bottleneck.
//!
//! Each branch is a UNet-3D: `levels` encoder blocks separated by 2x max
//! pooling, a bottleneck block, and a decoder that upsamples, concatenates
//! the matching encoder output and applies another block. A block is two
//! rounds of 3x3x3 convolution, instance norm and ReLU.

mod tissues;

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{read_params, write_params, Element, Graph, ParamId, ParamStore};
use crate::{seed, Dims, Error, Result, Tensor, Var};

pub use tissues::{group_tissues, TissueGrouping, GROUP_NAMES, OTHERS};

pub const CT_PREFIX: &str = "ct/";
pub const PET_PREFIX: &str = "pet/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl BranchConfig {
    pub fn ct(out_channels: usize) -> Self {
        Self { levels: 3, base_channels: 8, in_channels: 1, out_channels }
    }

    pub fn pet() -> Self {
        Self { levels: 3, base_channels: 8, in_channels: 1, out_channels: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("branch sizes must be positive: {self:?}")));
        }
        if self.levels > 8 {
            return Err(Error::Config(format!("{} levels is beyond any supported patch size", self.levels)));
        }
        Ok(())
    }

    /// Channels produced by encoder level `i`; level `levels` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels)
    }

    /// Patches must be divisible by this along every axis.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MirrorConfig {
    pub ct: BranchConfig,
    pub pet: BranchConfig,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl Default for MirrorConfig {
    fn default() -> Self {
        Self { ct: BranchConfig::ct(16), pet: BranchConfig::pet(), norm_eps: default_norm_eps() }
    }
}

impl MirrorConfig {
    pub fn validate(&self) -> Result<()> {
        self.ct.validate()?;
        self.pet.validate()?;
        if self.ct.levels != self.pet.levels {
            return Err(Error::Config(format!(
                "branches must share depth for bottleneck fusion (ct {}, pet {})",
                self.ct.levels, self.pet.levels
            )));
        }
        if self.pet.out_channels != 1 {
            return Err(Error::Config("the lesion branch predicts a single channel".into()));
        }
        if self.ct.out_channels < 2 {
            return Err(Error::Config("the tissue branch needs at least 2 classes".into()));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config(format!("norm_eps must be positive, got {}", self.norm_eps)));
        }
        Ok(())
    }

    /// Channel count entering the lesion decoder after fusion.
    pub fn fused_channels(&self) -> usize {
        self.pet.bottleneck_channels() + self.ct.bottleneck_channels()
    }
}

/// Which parameters [`MirrorNet::parameters`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchFilter {
    Ct,
    Pet,
    All,
}

impl BranchFilter {
    pub fn accepts(self, name: &str) -> bool {
        match self {
            BranchFilter::Ct => name.starts_with(CT_PREFIX),
            BranchFilter::Pet => name.starts_with(PET_PREFIX),
            BranchFilter::All => true,
        }
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Block(Vec<(Conv, Norm)>);

#[derive(Clone, Debug)]
struct Branch {
    cfg: BranchConfig,
    encoder: Vec<Block>,
    bottleneck: Block,
    /// Indexed by level, so `decoder[0]` runs last at full resolution.
    decoder: Vec<Block>,
    head: Conv,
}

struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    seed: u64,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let idx = self.store.len() as u64;
        let fan_in = (cin * k * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut rng = seed::rng(seed::derive(self.seed, &[idx]));
        let w = Tensor::from_fn(Dims::new(cout, cin, k, k, k), |_| normal.sample(&mut rng) as f32);
        let w = self.store.push(format!("{name}/w"), w);
        let b = self.store.push(format!("{name}/b"), Tensor::zeros(Dims::new(1, cout, 1, 1, 1)));
        Conv { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let dims = Dims::new(1, c, 1, 1, 1);
        let gamma = self.store.push(format!("{name}/gamma"), Tensor::filled(dims, 1.0));
        let beta = self.store.push(format!("{name}/beta"), Tensor::zeros(dims));
        Norm { gamma, beta }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block(
            (0..2)
                .map(|j| {
                    let c_in = if j == 0 { cin } else { cout };
                    (self.conv(&format!("{name}/conv{j}"), c_in, cout, 3), self.norm(&format!("{name}/norm{j}"), cout))
                })
                .collect(),
        )
    }

    /// `fused` extra channels join the bottleneck output before decoding.
    fn branch(&mut self, prefix: &str, cfg: BranchConfig, fused: usize) -> Branch {
        let mut encoder = Vec::with_capacity(cfg.levels);
        let mut cin = cfg.in_channels;
        for i in 0..cfg.levels {
            encoder.push(self.block(&format!("{prefix}enc{i}"), cin, cfg.channels(i)));
            cin = cfg.channels(i);
        }
        let bottleneck = self.block(&format!("{prefix}bottleneck"), cin, cfg.bottleneck_channels());
        let mut below = cfg.bottleneck_channels() + fused;
        let mut decoder = Vec::with_capacity(cfg.levels);
        for i in (0..cfg.levels).rev() {
            decoder.push(self.block(&format!("{prefix}dec{i}"), below + cfg.channels(i), cfg.channels(i)));
            below = cfg.channels(i);
        }
        decoder.reverse();
        let head = self.conv(&format!("{prefix}head"), cfg.channels(0), cfg.out_channels, 1);
        Branch { cfg, encoder, bottleneck, decoder, head }
    }
}

impl Branch {
    fn conv<T: Element>(g: &mut Graph<T>, p: &[Var], c: &Conv, x: Var, pad: usize) -> Result<Var> {
        g.conv3d(x, p[c.w.index()], p[c.b.index()], 1, pad)
    }

    fn block<T: Element>(g: &mut Graph<T>, p: &[Var], blk: &Block, mut x: Var, eps: f64) -> Result<Var> {
        for (conv, norm) in &blk.0 {
            x = Self::conv(g, p, conv, x, 1)?;
            x = g.instance_norm(x, p[norm.gamma.index()], p[norm.beta.index()], eps)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }

    fn check_input<T: Element>(&self, g: &Graph<T>, x: Var, what: &str) -> Result<()> {
        let d = g.dims(x);
        let div = self.cfg.divisor();
        if d.c != self.cfg.in_channels || d.spatial_shape().iter().any(|&s| s == 0 || s % div != 0) {
            return Err(Error::Shape(format!(
                "{what} input {d} needs {} channel(s) and spatial dims divisible by {div}",
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Returns the encoder outputs per level and the bottleneck.
    fn encode<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var, eps: f64) -> Result<(Vec<Var>, Var)> {
        let mut skips = Vec::with_capacity(self.cfg.levels);
        let mut h = x;
        for blk in &self.encoder {
            h = Self::block(g, p, blk, h, eps)?;
            skips.push(h);
            h = g.max_pool2(h)?;
        }
        let bottom = Self::block(g, p, &self.bottleneck, h, eps)?;
        Ok((skips, bottom))
    }

    fn decode<T: Element>(&self, g: &mut Graph<T>, p: &[Var], skips: &[Var], bottom: Var, eps: f64) -> Result<Var> {
        let mut h = bottom;
        for (blk, &skip) in self.decoder.iter().zip(skips).rev() {
            let up = g.upsample2(h)?;
            h = g.concat_channels(up, skip)?;
            h = Self::block(g, p, blk, h, eps)?;
        }
        Self::conv(g, p, &self.head, h, 0)
    }
}

/// Output of [`MirrorNet::ct_graph`].
#[derive(Clone, Copy, Debug)]
pub struct CtOutputs {
    pub logits: Var,
    pub bottleneck: Var,
}

/// Parameters and layout of both branches.
#[derive(Clone, Debug)]
pub struct MirrorNet {
    cfg: MirrorConfig,
    ct: Branch,
    pet: Branch,
    store: ParamStore<f32>,
    ct_frozen: bool,
}

impl MirrorNet {
    /// He-normal convolution weights, zero biases, unit norm scales.
    pub fn new(cfg: MirrorConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, seed: init_seed };
        let ct = b.branch(CT_PREFIX, cfg.ct, 0);
        let pet = b.branch(PET_PREFIX, cfg.pet, cfg.ct.bottleneck_channels());
        Ok(Self { cfg, ct, pet, store, ct_frozen: false })
    }

    pub fn config(&self) -> &MirrorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn freeze_ct(&mut self) {
        self.ct_frozen = true;
    }

    pub fn is_ct_frozen(&self) -> bool {
        self.ct_frozen
    }

    /// Parameter ids in registration order.
    pub fn parameters(&self, filter: BranchFilter) -> Vec<ParamId> {
        self.store.ids().filter(|&id| filter.accepts(self.store.name(id))).collect()
    }

    /// Whether a parameter takes gradient updates given the freeze state.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.ct_frozen && name.starts_with(CT_PREFIX))
    }

    /// Builds the CT branch on `g`. `params` comes from [`Graph::bind`].
    pub fn ct_graph<T: Element>(&self, g: &mut Graph<T>, params: &[Var], ct: Var) -> Result<CtOutputs> {
        self.ct.check_input(g, ct, "ct")?;
        let (skips, bottleneck) = self.ct.encode(g, params, ct, self.cfg.norm_eps)?;
        let logits = self.ct.decode(g, params, &skips, bottleneck, self.cfg.norm_eps)?;
        Ok(CtOutputs { logits, bottleneck })
    }

    /// Builds the PET branch with `ct_bottleneck` fused at its bottleneck.
    pub fn pet_graph<T: Element>(&self, g: &mut Graph<T>, params: &[Var], pet: Var, ct_bottleneck: Var) -> Result<Var> {
        self.pet.check_input(g, pet, "pet")?;
        let (skips, bottom) = self.pet.encode(g, params, pet, self.cfg.norm_eps)?;
        let (pb, cb) = (g.dims(bottom), g.dims(ct_bottleneck));
        if pb.n != cb.n || pb.spatial_shape() != cb.spatial_shape() || cb.c != self.cfg.ct.bottleneck_channels() {
            return Err(Error::Shape(format!(
                "ct bottleneck {cb} does not fit pet bottleneck {pb} ({} channels expected)",
                self.cfg.ct.bottleneck_channels()
            )));
        }
        let fused = g.concat_channels(bottom, ct_bottleneck)?;
        self.pet.decode(g, params, &skips, fused, self.cfg.norm_eps)
    }

    /// Tissue logits `[N, C_ct, P, P, P]` and the CT bottleneck.
    pub fn forward_ct(&self, ct: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = g.bind(&self.store, |_| false)?;
        let x = g.input(ct)?;
        let out = self.ct_graph(&mut g, &p, x)?;
        Ok((g.to_tensor(out.logits), g.to_tensor(out.bottleneck)))
    }

    /// Lesion logits `[N, 1, P, P, P]`.
    pub fn forward_pet(&self, pet: &Tensor, ct_bottleneck: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(&self.store, |_| false)?;
        let x = g.input(pet)?;
        let b = g.input(ct_bottleneck)?;
        let out = self.pet_graph(&mut g, &p, x, b)?;
        Ok(g.to_tensor(out))
    }

    pub fn forward_full(&self, ct: &Tensor, pet: &Tensor) -> Result<Tensor> {
        let (_, bottleneck) = self.forward_ct(ct)?;
        self.forward_pet(pet, &bottleneck)
    }

    /// Replaces every parameter by the same-named tensor of `other`.
    pub fn load_store(&mut self, other: &ParamStore<f32>) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors given, architecture has {}",
                other.len(),
                self.store.len()
            )));
        }
        let mut fresh = Vec::with_capacity(self.store.len());
        for id in self.store.ids() {
            let name = self.store.name(id);
            let src = other.find(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let t = other.get(src);
            if t.dims() != self.store.get(id).dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {} vs {}",
                    t.dims(),
                    self.store.get(id).dims()
                )));
            }
            fresh.push(t.data().to_vec());
        }
        for (id, data) in self.store.ids().collect::<Vec<_>>().into_iter().zip(fresh) {
            self.store.get_mut(id).data_mut().copy_from_slice(&data);
        }
        Ok(())
    }

    pub fn save(&self, base: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        write_params(&self.store, meta, base)
    }

    /// Builds the architecture from `cfg` and fills it from `base`.
    pub fn load(cfg: MirrorConfig, base: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let mut net = Self::new(cfg, 0)?;
        let (store, meta) = read_params(base)?;
        net.load_store(&store)?;
        Ok((net, meta))
    }
}

impl crate::inference::LesionModel for MirrorNet {
    fn lesion_logits(&self, ct: &Tensor, pet: &Tensor) -> Result<Tensor> {
        self.forward_full(ct, pet)
    }
}

/// Runs the lesion branch with the CT bottleneck replaced by zeros.
pub struct CtAblated<'a>(pub &'a MirrorNet);

impl crate::inference::LesionModel for CtAblated<'_> {
    fn lesion_logits(&self, _ct: &Tensor, pet: &Tensor) -> Result<Tensor> {
        let net = self.0;
        let d = pet.dims();
        let div = net.cfg.ct.divisor();
        let zeros = Tensor::zeros(Dims::new(d.n, net.cfg.ct.bottleneck_channels(), d.d / div, d.h / div, d.w / div));
        net.forward_pet(pet, &zeros)
    }
}
