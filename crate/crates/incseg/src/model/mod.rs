//! The dynamic segmentation network: an encoder of residual units whose
//! 3x3 convolutions are shared across domains while 1x1 parallel adapters
//! and batch-norm branches are domain-specific, plus per-domain decoder
//! heads. Routing by domain id guarantees a forward pass touches only
//! shared parameters and the chosen domain's own parameters.

pub mod checkpoint;

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, BnMode, RunningStats};
use crate::tensor::param::{ParamKind, Parameter};
use crate::tensor::rng::RngState;
use crate::tensor::{no_grad, Scalar, Tensor};

/// Encoder flavor: `Dau` carries per-domain adapters and BN branches,
/// `Plain` is the same topology with adapters removed and one shared BN
/// set (the baseline network).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Dau,
    Plain,
}

/// Decoder arrangement: one head per domain, or a single head over a
/// fixed (union) label space shared by every domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    PerDomain,
    SingleHead,
}

/// How a newly added domain's specific parameters start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitWt {
    /// Copy adapters, BN and non-classifier decoder weights bitwise from
    /// the previous domain; only the classifier is drawn fresh.
    FromPrevious,
    /// Everything fresh.
    Random,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Stage output widths, one per stage.
    pub widths: Vec<usize>,
    /// Stride of each stage's downsampler; the product is the total
    /// spatial reduction the decoder must undo.
    pub stage_strides: Vec<usize>,
    pub units_per_stage: usize,
    /// Intermediate widths of the two upsampling blocks.
    pub decoder_widths: [usize; 2],
    /// Transposed-conv kernel (2 or 4).
    pub decoder_kernel: usize,
    pub adapter_init_std: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub net: NetKind,
    pub head: HeadMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            widths: vec![16, 32, 64],
            stage_strides: vec![2, 2, 1],
            units_per_stage: 2,
            decoder_widths: [16, 8],
            decoder_kernel: 2,
            adapter_init_std: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            net: NetKind::Dau,
            head: HeadMode::PerDomain,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.widths.windows(2).any(|p| p[0] > p[1]) {
            return Err(Error::Config(format!("stage widths must be nondecreasing: {:?}", self.widths)));
        }
        if self.stage_strides.len() != self.widths.len() {
            return Err(Error::Config("one stride per stage required".into()));
        }
        if self.stage_strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("stage strides must be >= 1".into()));
        }
        if self.units_per_stage == 0 {
            return Err(Error::Config("units_per_stage must be >= 1".into()));
        }
        if self.decoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if !matches!(self.decoder_kernel, 2 | 4) {
            return Err(Error::Config(format!("decoder kernel must be 2 or 4, got {}", self.decoder_kernel)));
        }
        let red = self.reduction();
        if red != 4 {
            return Err(Error::Config(format!(
                "stage strides multiply to {red}, but the two x2 decoder blocks undo exactly 4"
            )));
        }
        if self.adapter_init_std <= 0.0 || self.bn_momentum <= 0.0 || self.bn_momentum > 1.0 || self.bn_eps <= 0.0 {
            return Err(Error::Config("adapter_init_std, bn_momentum, bn_eps must be positive (momentum <= 1)".into()));
        }
        Ok(())
    }

    /// Total spatial downsampling of the encoder.
    pub fn reduction(&self) -> usize {
        self.stage_strides.iter().product()
    }
}

/// A registered domain: its name and ordered class list (position = id).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainInfo {
    pub name: String,
    pub class_names: Vec<String>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl DomainInfo {
    pub fn new(name: impl Into<String>, class_names: Vec<String>) -> Result<Self> {
        let info = DomainInfo { name: name.into(), class_names };
        info.validate()?;
        Ok(info)
    }

    fn validate(&self) -> Result<()> {
        if !valid_token(&self.name) {
            return Err(Error::InvalidArgument(format!(
                "domain name `{}` must be nonempty [A-Za-z0-9_-]",
                self.name
            )));
        }
        if self.class_names.is_empty() {
            return Err(Error::InvalidArgument(format!("domain `{}` has zero classes", self.name)));
        }
        if self.class_names.len() > 254 {
            return Err(Error::InvalidArgument(format!(
                "domain `{}` has {} classes; at most 254 fit below the ignore index",
                self.name,
                self.class_names.len()
            )));
        }
        for c in &self.class_names {
            if !valid_token(c) {
                return Err(Error::InvalidArgument(format!(
                    "class name `{c}` in domain `{}` must be nonempty [A-Za-z0-9_-]",
                    self.name
                )));
            }
        }
        for (i, c) in self.class_names.iter().enumerate() {
            if self.class_names[..i].contains(c) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate class name `{c}` in domain `{}`",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// One batch-norm instance: learnable scale/shift parameters plus running
/// statistics. A layer whose scale is frozen always normalizes by its
/// running statistics and never updates them, regardless of the requested
/// mode; that is what makes frozen domains and frozen encoders bitwise
/// inert.
pub(crate) struct BnLayer<S: Scalar> {
    pub scale: Parameter<S>,
    pub shift: Parameter<S>,
    pub stats: RefCell<RunningStats<S>>,
}

impl<S: Scalar> BnLayer<S> {
    fn new(prefix: &str, kind: ParamKind, channels: usize) -> Self {
        BnLayer {
            scale: Parameter::new(format!("{prefix}.scale"), kind, Tensor::full(&[channels], S::ONE)),
            shift: Parameter::new(format!("{prefix}.shift"), kind, Tensor::zeros(&[channels])),
            stats: RefCell::new(RunningStats::new(channels)),
        }
    }

    fn forward(&self, x: &Tensor<S>, mode: BnMode, momentum: S, eps: S) -> Result<Tensor<S>> {
        let mode = if self.scale.frozen() { BnMode::Infer } else { mode };
        ops::batch_norm2d(
            x,
            self.scale.tensor(),
            self.shift.tensor(),
            &mut self.stats.borrow_mut(),
            mode,
            momentum,
            eps,
        )
    }

    fn copy_state_from(&self, other: &BnLayer<S>) {
        self.scale.copy_data_from(&other.scale);
        self.shift.copy_data_from(&other.shift);
        *self.stats.borrow_mut() = other.stats.borrow().clone();
    }

    fn deep_clone(&self) -> Self {
        BnLayer {
            scale: self.scale.deep_clone(),
            shift: self.shift.deep_clone(),
            stats: RefCell::new(self.stats.borrow().clone()),
        }
    }
}

/// Per-domain branch of a residual unit: optional 1x1 parallel adapters
/// (absent on the plain network) and two BN layers.
pub(crate) struct Branch<S: Scalar> {
    pub aw1: Option<Parameter<S>>,
    pub aw2: Option<Parameter<S>>,
    pub bn1: BnLayer<S>,
    pub bn2: BnLayer<S>,
}

impl<S: Scalar> Branch<S> {
    fn deep_clone(&self) -> Self {
        Branch {
            aw1: self.aw1.as_ref().map(|p| p.deep_clone()),
            aw2: self.aw2.as_ref().map(|p| p.deep_clone()),
            bn1: self.bn1.deep_clone(),
            bn2: self.bn2.deep_clone(),
        }
    }
}

/// Residual unit: two shared 3x3 convolutions plus one branch per domain
/// (or a single shared branch on the plain network).
pub(crate) struct ResUnit<S: Scalar> {
    pub w1: Parameter<S>,
    pub w2: Parameter<S>,
    pub branches: Vec<Branch<S>>,
    prefix: String,
    channels: usize,
}

fn he_conv<S: Scalar>(
    name: String,
    kind: ParamKind,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut RngState,
) -> Parameter<S> {
    let mut data = vec![S::ZERO; cout * cin * k * k];
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    rng.fill_normal(&mut data, std);
    Parameter::new(name, kind, Tensor::new(&[cout, cin, k, k], data).expect("conv shape"))
}

fn he_tconv<S: Scalar>(
    name: String,
    kind: ParamKind,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut RngState,
) -> Parameter<S> {
    let mut data = vec![S::ZERO; cin * cout * k * k];
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    rng.fill_normal(&mut data, std);
    Parameter::new(name, kind, Tensor::new(&[cin, cout, k, k], data).expect("tconv shape"))
}

fn adapter_conv<S: Scalar>(
    name: String,
    kind: ParamKind,
    channels: usize,
    std: f64,
    rng: &mut RngState,
) -> Parameter<S> {
    let mut data = vec![S::ZERO; channels * channels];
    rng.fill_normal(&mut data, std);
    Parameter::new(name, kind, Tensor::new(&[channels, channels, 1, 1], data).expect("adapter shape"))
}

impl<S: Scalar> ResUnit<S> {
    pub(crate) fn new(prefix: &str, channels: usize, rng: &mut RngState) -> Self {
        ResUnit {
            w1: he_conv(format!("{prefix}.w1"), ParamKind::Shared, channels, channels, 3, rng),
            w2: he_conv(format!("{prefix}.w2"), ParamKind::Shared, channels, channels, 3, rng),
            branches: Vec::new(),
            prefix: prefix.to_string(),
            channels,
        }
    }

    /// Append the branch for the next domain (or the single shared branch
    /// of a plain unit when `domain` is None).
    pub(crate) fn add_branch(&mut self, domain: Option<usize>, adapter_std: f64, rng: &mut RngState) {
        let (kind, bp) = match domain {
            Some(t) => (ParamKind::Domain(t), format!("{}.dom{t}", self.prefix)),
            None => (ParamKind::Shared, self.prefix.clone()),
        };
        let (aw1, aw2) = match domain {
            Some(_) => (
                Some(adapter_conv(format!("{bp}.aw1"), kind, self.channels, adapter_std, rng)),
                Some(adapter_conv(format!("{bp}.aw2"), kind, self.channels, adapter_std, rng)),
            ),
            None => (None, None),
        };
        self.branches.push(Branch {
            aw1,
            aw2,
            bn1: BnLayer::new(&format!("{bp}.bn1"), kind, self.channels),
            bn2: BnLayer::new(&format!("{bp}.bn2"), kind, self.channels),
        });
    }

    fn forward(&self, x: &Tensor<S>, branch: usize, mode: BnMode, momentum: S, eps: S) -> Result<Tensor<S>> {
        let b = &self.branches[branch];
        let mut s1 = ops::conv2d(x, self.w1.tensor(), 1, 1)?;
        if let Some(aw1) = &b.aw1 {
            s1 = ops::add(&s1, &ops::conv2d(x, aw1.tensor(), 1, 0)?)?;
        }
        let h1 = ops::relu(&b.bn1.forward(&s1, mode, momentum, eps)?);
        let mut s2 = ops::conv2d(&h1, self.w2.tensor(), 1, 1)?;
        if let Some(aw2) = &b.aw2 {
            s2 = ops::add(&s2, &ops::conv2d(&h1, aw2.tensor(), 1, 0)?)?;
        }
        let h2 = b.bn2.forward(&s2, mode, momentum, eps)?;
        Ok(ops::relu(&ops::add(x, &h2)?))
    }

    fn deep_clone(&self) -> Self {
        ResUnit {
            w1: self.w1.deep_clone(),
            w2: self.w2.deep_clone(),
            branches: self.branches.iter().map(|b| b.deep_clone()).collect(),
            prefix: self.prefix.clone(),
            channels: self.channels,
        }
    }
}

/// Stage entry: shared strided 3x3 conv with per-domain BN.
pub(crate) struct DownBlock<S: Scalar> {
    pub w: Parameter<S>,
    pub bns: Vec<BnLayer<S>>,
    stride: usize,
    prefix: String,
    channels: usize,
}

impl<S: Scalar> DownBlock<S> {
    fn new(prefix: &str, cin: usize, cout: usize, stride: usize, rng: &mut RngState) -> Self {
        DownBlock {
            w: he_conv(format!("{prefix}.w"), ParamKind::Shared, cout, cin, 3, rng),
            bns: Vec::new(),
            stride,
            prefix: prefix.to_string(),
            channels: cout,
        }
    }

    fn add_branch(&mut self, domain: Option<usize>) {
        let (kind, bp) = match domain {
            Some(t) => (ParamKind::Domain(t), format!("{}.dom{t}.bn", self.prefix)),
            None => (ParamKind::Shared, format!("{}.bn", self.prefix)),
        };
        self.bns.push(BnLayer::new(&bp, kind, self.channels));
    }

    fn forward(&self, x: &Tensor<S>, branch: usize, mode: BnMode, momentum: S, eps: S) -> Result<Tensor<S>> {
        let y = ops::conv2d(x, self.w.tensor(), self.stride, 1)?;
        Ok(ops::relu(&self.bns[branch].forward(&y, mode, momentum, eps)?))
    }

    fn deep_clone(&self) -> Self {
        DownBlock {
            w: self.w.deep_clone(),
            bns: self.bns.iter().map(|b| b.deep_clone()).collect(),
            stride: self.stride,
            prefix: self.prefix.clone(),
            channels: self.channels,
        }
    }
}

pub(crate) struct Stage<S: Scalar> {
    pub down: DownBlock<S>,
    pub units: Vec<ResUnit<S>>,
}

impl<S: Scalar> Stage<S> {
    fn deep_clone(&self) -> Self {
        Stage { down: self.down.deep_clone(), units: self.units.iter().map(|u| u.deep_clone()).collect() }
    }
}

/// Decoder head: two transposed-conv x2 blocks restoring input resolution,
/// then a 1x1 classifier over the head's label space.
pub(crate) struct DecoderHead<S: Scalar> {
    pub up1: Parameter<S>,
    pub bn1: BnLayer<S>,
    pub up2: Parameter<S>,
    pub bn2: BnLayer<S>,
    pub cls: Parameter<S>,
    pub classes: usize,
}

impl<S: Scalar> DecoderHead<S> {
    fn new(cfg: &ModelConfig, domain: Option<usize>, classes: usize, rng: &mut RngState) -> Self {
        let (kind, bp) = match domain {
            Some(t) => (ParamKind::Decoder(t), format!("dec.dom{t}")),
            None => (ParamKind::Shared, "dec".to_string()),
        };
        let enc_out = *cfg.widths.last().expect("validated");
        let [d1, d2] = cfg.decoder_widths;
        let k = cfg.decoder_kernel;
        DecoderHead {
            up1: he_tconv(format!("{bp}.up1"), kind, enc_out, d1, k, rng),
            bn1: BnLayer::new(&format!("{bp}.bn1"), kind, d1),
            up2: he_tconv(format!("{bp}.up2"), kind, d1, d2, k, rng),
            bn2: BnLayer::new(&format!("{bp}.bn2"), kind, d2),
            cls: he_conv(format!("{bp}.cls"), kind, classes, d2, 1, rng),
            classes,
        }
    }

    fn forward(&self, x: &Tensor<S>, mode: BnMode, momentum: S, eps: S) -> Result<Tensor<S>> {
        let y = ops::relu(&self.bn1.forward(&ops::conv_transpose2d(x, self.up1.tensor(), 2)?, mode, momentum, eps)?);
        let y = ops::relu(&self.bn2.forward(&ops::conv_transpose2d(&y, self.up2.tensor(), 2)?, mode, momentum, eps)?);
        ops::conv2d(&y, self.cls.tensor(), 1, 0)
    }

    /// Copy everything but the classifier from another head.
    fn copy_upsampling_from(&self, other: &DecoderHead<S>) {
        self.up1.copy_data_from(&other.up1);
        self.bn1.copy_state_from(&other.bn1);
        self.up2.copy_data_from(&other.up2);
        self.bn2.copy_state_from(&other.bn2);
    }

    fn deep_clone(&self) -> Self {
        DecoderHead {
            up1: self.up1.deep_clone(),
            bn1: self.bn1.deep_clone(),
            up2: self.up2.deep_clone(),
            bn2: self.bn2.deep_clone(),
            cls: self.cls.deep_clone(),
            classes: self.classes,
        }
    }
}

/// Exhaustive, disjoint labeling of every parameter name: shared vs each
/// domain's own set, plus the currently frozen names.
#[derive(Clone, Debug, Default)]
pub struct ParamPartition {
    pub shared: Vec<String>,
    pub domain: Vec<Vec<String>>,
    pub frozen: Vec<String>,
}

impl ParamPartition {
    pub fn total_names(&self) -> usize {
        self.shared.len() + self.domain.iter().map(|d| d.len()).sum::<usize>()
    }
}

/// Fraction of parameter scalars (running stats excluded) that live on the
/// shared side of the partition.
pub(crate) fn sharing_ratio_of<S: Scalar>(params: &[&Parameter<S>]) -> f64 {
    let total: usize = params.iter().map(|p| p.numel()).sum();
    let shared: usize =
        params.iter().filter(|p| p.kind() == ParamKind::Shared).map(|p| p.numel()).sum();
    shared as f64 / total as f64
}

pub struct Model<S: Scalar> {
    cfg: ModelConfig,
    stages: Vec<Stage<S>>,
    heads: Vec<DecoderHead<S>>,
    domains: Vec<DomainInfo>,
}

impl<S: Scalar> Model<S> {
    /// Build a fresh one-domain model. For `HeadMode::SingleHead` the
    /// first domain's label space is the head's fixed (union) space.
    pub fn build(cfg: ModelConfig, first: DomainInfo, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        first.validate()?;
        let mut stages = Vec::with_capacity(cfg.widths.len());
        let mut cin = cfg.in_channels;
        for (i, (&w, &stride)) in cfg.widths.iter().zip(&cfg.stage_strides).enumerate() {
            let mut down = DownBlock::new(&format!("enc.stage{i}.down"), cin, w, stride, rng);
            down.add_branch(dom_tag(cfg.net, 0));
            let mut units = Vec::with_capacity(cfg.units_per_stage);
            for j in 0..cfg.units_per_stage {
                let mut u = ResUnit::new(&format!("enc.stage{i}.unit{j}"), w, rng);
                u.add_branch(dom_tag(cfg.net, 0), cfg.adapter_init_std, rng);
                units.push(u);
            }
            stages.push(Stage { down, units });
            cin = w;
        }
        let head_tag = match cfg.head {
            HeadMode::PerDomain => Some(0),
            HeadMode::SingleHead => None,
        };
        let heads = vec![DecoderHead::new(&cfg, head_tag, first.num_classes(), rng)];
        Ok(Model { cfg, stages, heads, domains: vec![first] })
    }

    /// Register domain t = current count. Adds an adapter/BN branch per
    /// unit and a decoder head as the config dictates; never touches any
    /// existing parameter, so all previous domains' outputs are unchanged.
    pub fn add_domain(&mut self, info: DomainInfo, init: InitWt, rng: &mut RngState) -> Result<usize> {
        info.validate()?;
        if self.domains.iter().any(|d| d.name == info.name) {
            return Err(Error::DuplicateDomain(info.name));
        }
        let t = self.domains.len();
        if self.cfg.net == NetKind::Dau {
            for stage in &mut self.stages {
                stage.down.add_branch(Some(t));
                for unit in &mut stage.units {
                    unit.add_branch(Some(t), self.cfg.adapter_init_std, rng);
                }
            }
            if init == InitWt::FromPrevious {
                for stage in &self.stages {
                    let bns = &stage.down.bns;
                    bns[t].copy_state_from(&bns[t - 1]);
                    for unit in &stage.units {
                        let (prev, new) = (&unit.branches[t - 1], &unit.branches[t]);
                        if let (Some(p), Some(n)) = (&prev.aw1, &new.aw1) {
                            n.copy_data_from(p);
                        }
                        if let (Some(p), Some(n)) = (&prev.aw2, &new.aw2) {
                            n.copy_data_from(p);
                        }
                        new.bn1.copy_state_from(&prev.bn1);
                        new.bn2.copy_state_from(&prev.bn2);
                    }
                }
            }
        }
        if self.cfg.head == HeadMode::PerDomain {
            let head = DecoderHead::new(&self.cfg, Some(t), info.num_classes(), rng);
            if init == InitWt::FromPrevious {
                head.copy_upsampling_from(&self.heads[t - 1]);
            }
            self.heads.push(head);
        }
        self.domains.push(info);
        Ok(t)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn domains(&self) -> &[DomainInfo] {
        &self.domains
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    fn check_domain(&self, t: usize) -> Result<()> {
        if t >= self.domains.len() {
            return Err(Error::UnknownDomain(format!("domain index {t}")));
        }
        Ok(())
    }

    fn branch_index(&self, t: usize) -> usize {
        match self.cfg.net {
            NetKind::Dau => t,
            NetKind::Plain => 0,
        }
    }

    /// Classes predicted for domain t (the union space in single-head mode).
    pub fn head_classes(&self, t: usize) -> Result<usize> {
        self.check_domain(t)?;
        Ok(match self.cfg.head {
            HeadMode::PerDomain => self.heads[t].classes,
            HeadMode::SingleHead => self.heads[0].classes,
        })
    }

    /// Final encoder feature map along the domain-t path.
    pub fn encoder_features(&self, x: &Tensor<S>, t: usize, mode: BnMode) -> Result<Tensor<S>> {
        self.check_domain(t)?;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected (n, {}, h, w) input, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let red = self.cfg.reduction();
        if shape[2] % red != 0 || shape[3] % red != 0 {
            return Err(Error::InvalidArgument(format!(
                "input extents {}x{} must be divisible by the encoder reduction {red}",
                shape[2], shape[3]
            )));
        }
        let b = self.branch_index(t);
        let momentum = S::from_f64(self.cfg.bn_momentum);
        let eps = S::from_f64(self.cfg.bn_eps);
        let mut y = x.clone();
        for stage in &self.stages {
            y = stage.down.forward(&y, b, mode, momentum, eps)?;
            for unit in &stage.units {
                y = unit.forward(&y, b, mode, momentum, eps)?;
            }
        }
        Ok(y)
    }

    /// Full pass: encoder along the domain-t path, then that domain's
    /// head. Logits come back at input resolution.
    pub fn forward(&self, x: &Tensor<S>, t: usize, mode: BnMode) -> Result<Tensor<S>> {
        let feats = self.encoder_features(x, t, mode)?;
        let head = match self.cfg.head {
            HeadMode::PerDomain => &self.heads[t],
            HeadMode::SingleHead => &self.heads[0],
        };
        let momentum = S::from_f64(self.cfg.bn_momentum);
        let eps = S::from_f64(self.cfg.bn_eps);
        head.forward(&feats, mode, momentum, eps)
    }

    /// Visit every parameter in deterministic structural order.
    pub(crate) fn visit_params(&self, f: &mut dyn FnMut(&Parameter<S>)) {
        for stage in &self.stages {
            f(&stage.down.w);
            for bn in &stage.down.bns {
                f(&bn.scale);
                f(&bn.shift);
            }
            for unit in &stage.units {
                f(&unit.w1);
                f(&unit.w2);
                for b in &unit.branches {
                    if let Some(a) = &b.aw1 {
                        f(a);
                    }
                    if let Some(a) = &b.aw2 {
                        f(a);
                    }
                    f(&b.bn1.scale);
                    f(&b.bn1.shift);
                    f(&b.bn2.scale);
                    f(&b.bn2.shift);
                }
            }
        }
        for head in &self.heads {
            f(&head.up1);
            f(&head.bn1.scale);
            f(&head.bn1.shift);
            f(&head.up2);
            f(&head.bn2.scale);
            f(&head.bn2.shift);
            f(&head.cls);
        }
    }

    pub(crate) fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        for stage in &mut self.stages {
            f(&mut stage.down.w);
            for bn in &mut stage.down.bns {
                f(&mut bn.scale);
                f(&mut bn.shift);
            }
            for unit in &mut stage.units {
                f(&mut unit.w1);
                f(&mut unit.w2);
                for b in &mut unit.branches {
                    if let Some(a) = &mut b.aw1 {
                        f(a);
                    }
                    if let Some(a) = &mut b.aw2 {
                        f(a);
                    }
                    f(&mut b.bn1.scale);
                    f(&mut b.bn1.shift);
                    f(&mut b.bn2.scale);
                    f(&mut b.bn2.shift);
                }
            }
        }
        for head in &mut self.heads {
            f(&mut head.up1);
            f(&mut head.bn1.scale);
            f(&mut head.bn1.shift);
            f(&mut head.up2);
            f(&mut head.bn2.scale);
            f(&mut head.bn2.shift);
            f(&mut head.cls);
        }
    }

    /// Visit every BN layer (for running-stats serialization), same order
    /// as the parameter walk.
    pub(crate) fn visit_bns(&self, f: &mut dyn FnMut(&BnLayer<S>)) {
        for stage in &self.stages {
            for bn in &stage.down.bns {
                f(bn);
            }
            for unit in &stage.units {
                for b in &unit.branches {
                    f(&b.bn1);
                    f(&b.bn2);
                }
            }
        }
        for head in &self.heads {
            f(&head.bn1);
            f(&head.bn2);
        }
    }

    /// All parameters in deterministic order.
    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut out = Vec::new();
        // Safety of the double borrow: visit_params hands out references
        // tied to &self, collected here.
        let ptr: *mut Vec<&Parameter<S>> = &mut out;
        self.visit_params(&mut |p| unsafe { (*ptr).push(std::mem::transmute::<&Parameter<S>, &Parameter<S>>(p)) });
        out
    }

    /// Parameters owned by domain t (adapters, DS-BN, decoder head).
    pub fn domain_params(&self, t: usize) -> Vec<&Parameter<S>> {
        self.params().into_iter().filter(|p| p.kind().owner() == Some(t)).collect()
    }

    /// Shared parameters (encoder convolutions; plus BN and head on the
    /// plain/single-head variants).
    pub fn shared_params(&self) -> Vec<&Parameter<S>> {
        self.params().into_iter().filter(|p| p.kind() == ParamKind::Shared).collect()
    }

    /// Freeze all parameters owned by domain t.
    pub fn freeze_domain(&mut self, t: usize) {
        self.visit_params_mut(&mut |p| {
            if p.kind().owner() == Some(t) {
                p.freeze();
            }
        });
    }

    /// Freeze the whole encoder (convolutions, adapters, every BN branch):
    /// the feature-extraction regime.
    pub fn freeze_encoder(&mut self) {
        for stage in &mut self.stages {
            stage.down.w.freeze();
            for bn in &mut stage.down.bns {
                bn.scale.freeze();
                bn.shift.freeze();
            }
            for unit in &mut stage.units {
                unit.w1.freeze();
                unit.w2.freeze();
                for b in &mut unit.branches {
                    if let Some(a) = &mut b.aw1 {
                        a.freeze();
                    }
                    if let Some(a) = &mut b.aw2 {
                        a.freeze();
                    }
                    b.bn1.scale.freeze();
                    b.bn1.shift.freeze();
                    b.bn2.scale.freeze();
                    b.bn2.shift.freeze();
                }
            }
        }
    }

    pub fn partition(&self) -> ParamPartition {
        let mut part = ParamPartition {
            shared: Vec::new(),
            domain: vec![Vec::new(); self.domains.len()],
            frozen: Vec::new(),
        };
        self.visit_params(&mut |p| {
            match p.kind().owner() {
                None => part.shared.push(p.name().to_string()),
                Some(t) => part.domain[t].push(p.name().to_string()),
            }
            if p.frozen() {
                part.frozen.push(p.name().to_string());
            }
        });
        part
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    pub fn sharing_ratio(&self) -> f64 {
        sharing_ratio_of(&self.params())
    }

    /// Frozen deep copy for use as a distillation teacher.
    pub fn snapshot(&self) -> Snapshot<S> {
        let mut model = self.deep_clone();
        model.visit_params_mut(&mut |p| p.freeze());
        Snapshot { model }
    }

    pub fn deep_clone(&self) -> Model<S> {
        Model {
            cfg: self.cfg.clone(),
            stages: self.stages.iter().map(|s| s.deep_clone()).collect(),
            heads: self.heads.iter().map(|h| h.deep_clone()).collect(),
            domains: self.domains.clone(),
        }
    }

}

fn dom_tag(net: NetKind, t: usize) -> Option<usize> {
    match net {
        NetKind::Dau => Some(t),
        NetKind::Plain => None,
    }
}

/// Immutable teacher: a deep copy with every parameter frozen. Forward
/// passes always use running statistics and never record autodiff graphs.
pub struct Snapshot<S: Scalar> {
    model: Model<S>,
}

impl<S: Scalar> Snapshot<S> {
    pub fn forward(&self, x: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        no_grad(|| self.model.forward(x, t, BnMode::Infer))
    }

    pub fn domain_count(&self) -> usize {
        self.model.domain_count()
    }

    pub fn model(&self) -> &Model<S> {
        &self.model
    }

    /// Snapshot of a snapshot: the same frozen state, copied.
    pub fn resnapshot(&self) -> Snapshot<S> {
        self.model.snapshot()
    }
}
