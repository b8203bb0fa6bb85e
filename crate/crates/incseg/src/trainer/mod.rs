//! The stepwise incremental optimization protocol: before each new domain
//! the current model is snapshotted as a frozen teacher, every previous
//! domain's specific parameters are frozen, and training combines the new
//! domain's pixel loss with a KL term that holds old-domain responses at
//! the teacher's. Domain-specific parameters move at the base learning
//! rate, shared ones at a reduced (or zero) rate.

use std::time::Instant;

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::{self, evaluate_domain, image_batch, label_batch, DomainScore};
use crate::model::{DomainInfo, HeadMode, InitWt, Model, ModelConfig, NetKind, Snapshot};
use crate::tensor::ops::{self, BnMode, LabelMap};
use crate::tensor::optim::{ParamGroup, SgdMomentum};
use crate::tensor::param::{ParamKind, Parameter};
use crate::tensor::rng::RngState;
use crate::tensor::{backward, Scalar, Tensor};
use crate::IGNORE_INDEX;

/// Learning-rate policy for shared parameters relative to the base rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dlr {
    /// Shared LR = lr / ratio; ratio 1 trains everything uniformly.
    Ratio(f64),
    /// Shared LR exactly 0: shared weights stay bitwise put.
    FreezeShared,
}

/// Which previous domains receive a distillation pass: every one of them,
/// or only the most recent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillMode {
    All,
    Last,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub dlr: Dlr,
    pub lambda_kld: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    pub distill: DistillMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-3,
            dlr: Dlr::Ratio(100.0),
            lambda_kld: 1.0,
            epochs: 10,
            batch_size: 8,
            momentum: 0.9,
            seed: 1,
            distill: DistillMode::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if let Dlr::Ratio(r) = self.dlr {
            if !(r >= 1.0) || !r.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "dlr ratio must be >= 1 (or freeze-shared), got {r}"
                )));
            }
        }
        if !(self.lambda_kld >= 0.0) || !self.lambda_kld.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda_kld must be >= 0, got {}",
                self.lambda_kld
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    fn shared_lr(&self) -> f64 {
        match self.dlr {
            Dlr::Ratio(r) => self.lr / r,
            Dlr::FreezeShared => 0.0,
        }
    }
}

/// The three scalars of one batch: pixel loss on the new domain, the
/// weighted distillation term, and their sum (the shared-weight loss).
pub struct LossBundle<S: Scalar> {
    pub l_ce: Tensor<S>,
    pub l_kld: Tensor<S>,
    pub l_ws: Tensor<S>,
}

impl<S: Scalar> LossBundle<S> {
    pub fn ce_value(&self) -> f64 {
        self.l_ce.item().to_f64()
    }

    pub fn kld_value(&self) -> f64 {
        self.l_kld.item().to_f64()
    }

    pub fn total_value(&self) -> f64 {
        self.l_ws.item().to_f64()
    }
}

/// One domain of the sequence: its name and its rendered dataset.
pub struct DomainData {
    pub name: String,
    pub dataset: Dataset,
}

impl DomainData {
    pub fn new(name: impl Into<String>, dataset: Dataset) -> DomainData {
        DomainData { name: name.into(), dataset }
    }

    pub fn info(&self) -> Result<DomainInfo> {
        DomainInfo::new(self.name.clone(), self.dataset.classes.names().to_vec())
    }
}

/// Mean losses over one epoch's batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub ce: f64,
    pub kld: f64,
    pub total: f64,
}

/// Everything recorded about one incremental step. `wall_seconds` is
/// informational only and deliberately left out of `render`, so report
/// files are byte-stable across reruns.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: usize,
    pub domain: String,
    pub epochs: Vec<EpochLoss>,
    pub scores: Vec<DomainScore>,
    pub wall_seconds: f64,
    pub config_echo: Vec<(String, String)>,
}

impl StepReport {
    pub fn render(&self) -> String {
        let mut out = format!("step {} ({})\n", self.step, self.domain);
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!(
                "  epoch {:>2}  ce {:.4}  kld {:.4}  total {:.4}\n",
                i + 1,
                e.ce,
                e.kld,
                e.total
            ));
        }
        for s in &self.scores {
            match s.delta {
                Some(d) => out.push_str(&format!(
                    "  {}: miou {:.2} ({})\n",
                    s.domain,
                    s.miou,
                    eval::fmt_delta(d)
                )),
                None => out.push_str(&format!("  {}: miou {:.2}\n", s.domain, s.miou)),
            }
        }
        let echo: Vec<String> =
            self.config_echo.iter().map(|(k, v)| format!("{k}={v}")).collect();
        out.push_str(&format!("  config: {}\n", echo.join(" ")));
        out
    }
}

/// Open incremental step t: snapshot the current model as the frozen
/// teacher, register the new domain, and freeze every previous domain's
/// specific parameters. Shared weights stay trainable, and the new
/// domain's weights start per `init`.
pub fn begin_step<S: Scalar>(
    model: &mut Model<S>,
    info: DomainInfo,
    init: InitWt,
    rng: &mut RngState,
) -> Result<Snapshot<S>> {
    if model.domain_index(&info.name).is_ok() {
        return Err(Error::DuplicateDomain(info.name));
    }
    let teacher = model.snapshot();
    let t = model.add_domain(info, init, rng)?;
    for i in 0..t {
        model.freeze_domain(i);
    }
    Ok(teacher)
}

/// Losses for one batch of domain t. The pixel loss runs the domain-t
/// path with training-mode BN. Distillation compares the live model's
/// old-domain responses against the teacher's on the same images, both
/// with inference BN; those passes happen first so they see running
/// statistics untouched by this batch. With no history or a zero weight
/// the distillation term is a gradient-free zero.
pub fn compute_losses<S: Scalar>(
    model: &Model<S>,
    snap: Option<&Snapshot<S>>,
    x: &Tensor<S>,
    y: &LabelMap,
    t: usize,
    cfg: &TrainConfig,
) -> Result<LossBundle<S>> {
    let l_kld = if t > 0 && cfg.lambda_kld > 0.0 {
        let teacher = snap.ok_or_else(|| {
            Error::InvalidArgument(format!("distillation at step {t} needs a teacher snapshot"))
        })?;
        if teacher.domain_count() < t {
            return Err(Error::InvalidArgument(format!(
                "teacher knows {} domain(s) but step {t} distills over the first {t}",
                teacher.domain_count()
            )));
        }
        let lo = match cfg.distill {
            DistillMode::All => 0,
            DistillMode::Last => t - 1,
        };
        let mut sum: Option<Tensor<S>> = None;
        for i in lo..t {
            let q_s = model.forward(x, i, BnMode::Infer)?;
            let q_t = teacher.forward(x, i)?;
            let kl = ops::kl_div(&q_s, &q_t)?;
            sum = Some(match sum {
                None => kl,
                Some(acc) => ops::add(&acc, &kl)?,
            });
        }
        ops::scale(&sum.expect("nonempty distill set"), S::from_f64(cfg.lambda_kld))
    } else {
        Tensor::scalar(S::ZERO)
    };
    let logits = model.forward(x, t, BnMode::Train)?;
    let l_ce = ops::cross_entropy(&logits, y, IGNORE_INDEX)?.loss;
    let l_ws = ops::add(&l_ce, &l_kld)?;
    Ok(LossBundle { l_ce, l_kld, l_ws })
}

/// One pass over domain t's training samples in a freshly shuffled order:
/// per batch, compute the loss bundle, backpropagate the combined loss,
/// and apply one optimizer step over `groups`.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<S: Scalar>(
    model: &Model<S>,
    snap: Option<&Snapshot<S>>,
    samples: &[Sample],
    t: usize,
    cfg: &TrainConfig,
    groups: &[ParamGroup<S>],
    opt: &mut SgdMomentum<S>,
    shuffle: &mut RngState,
    remap: Option<&[u8]>,
) -> Result<EpochLoss> {
    if samples.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    shuffle.shuffle(&mut order);
    let (mut ce, mut kld, mut total) = (0.0, 0.0, 0.0);
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        let x = image_batch::<S>(&refs)?;
        let y = label_batch(&refs, remap)?;
        let losses = compute_losses(model, snap, &x, &y, t, cfg)?;
        backward(&losses.l_ws)?;
        opt.step(groups)?;
        ce += losses.ce_value();
        kld += losses.kld_value();
        total += losses.total_value();
        batches += 1;
    }
    let n = batches as f64;
    Ok(EpochLoss { ce: ce / n, kld: kld / n, total: total / n })
}

/// What a training regime freezes when a step opens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum FreezePolicy {
    /// Nothing; earlier parameters stay trainable (or merely unvisited).
    Nothing,
    /// Every previous domain's specific parameters.
    OldDomains,
    /// The entire encoder, from the second step on.
    Encoder,
}

/// Which parameters the optimizer visits during steps past the first
/// (step 0 always trains the whole unfrozen network at the base rate).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum GroupStyle {
    /// Every unfrozen parameter at the base rate.
    WholeNet,
    /// Shared parameters plus the new domain's own, one rate.
    SharedPlusOwn,
    /// Two groups: the new domain's own parameters at the base rate and
    /// shared ones at the reduced rate.
    DomainAndShared,
    /// Only the new domain's own parameters.
    OwnOnly,
}

/// A named training regime: network flavor, head arrangement, new-domain
/// initialization, which of the protocol's ingredients are active, and
/// what gets frozen or grouped each step.
#[derive(Clone, Copy, Debug)]
pub(crate) struct RegimeSpec {
    pub name: &'static str,
    pub net: NetKind,
    pub head: HeadMode,
    pub init: InitWt,
    pub use_dlr: bool,
    pub use_kld: bool,
    pub freeze: FreezePolicy,
    pub style: GroupStyle,
    /// Train all domains together in one offline phase.
    pub joint: bool,
}

pub(crate) fn protocol_regime(net: NetKind) -> RegimeSpec {
    RegimeSpec {
        name: "ours",
        net,
        head: HeadMode::PerDomain,
        init: InitWt::FromPrevious,
        use_dlr: true,
        use_kld: true,
        freeze: FreezePolicy::OldDomains,
        style: GroupStyle::DomainAndShared,
        joint: false,
    }
}

/// Final model plus one report per training phase.
pub struct SequenceOutcome<S: Scalar> {
    pub reports: Vec<StepReport>,
    pub model: Model<S>,
}

/// Called with the model at the end of each training phase, before the
/// next one begins; lets a runner persist per-step checkpoints.
pub type StepObserver<'a, S> = &'a mut dyn FnMut(usize, &Model<S>) -> Result<()>;

/// Run the full incremental protocol over `data` in order: snapshot
/// teacher, frozen history, differential learning rates, and KL
/// distillation, evaluating every registered domain after each step.
/// `cfgs` holds one configuration per step, all sharing seed and
/// momentum.
pub fn run_sequence<S: Scalar>(
    data: &[DomainData],
    cfgs: &[TrainConfig],
    net: NetKind,
) -> Result<SequenceOutcome<S>> {
    run_sequence_observed(data, cfgs, net, &mut |_, _| Ok(()))
}

/// [`run_sequence`] with a per-step observer.
pub fn run_sequence_observed<S: Scalar>(
    data: &[DomainData],
    cfgs: &[TrainConfig],
    net: NetKind,
    observe: StepObserver<S>,
) -> Result<SequenceOutcome<S>> {
    run_regime(&protocol_regime(net), data, cfgs, None, None, observe)
}

fn remap_for<'a>(remaps: Option<&'a [Vec<u8>]>, t: usize) -> Option<&'a [u8]> {
    remaps.map(|r| r[t].as_slice())
}

/// Copy with the regime's inactive ingredients turned off, so loss
/// computation and grouping read one source of truth.
fn effective_cfg(cfg: &TrainConfig, spec: &RegimeSpec) -> TrainConfig {
    let mut eff = cfg.clone();
    if !spec.use_kld {
        eff.lambda_kld = 0.0;
    }
    if !spec.use_dlr {
        eff.dlr = Dlr::Ratio(1.0);
    }
    eff
}

fn build_groups<S: Scalar>(
    model: &Model<S>,
    t: usize,
    style: GroupStyle,
    eff: &TrainConfig,
) -> Result<Vec<ParamGroup<S>>> {
    let lr = S::from_f64(eff.lr);
    let params = model.params();
    Ok(match style {
        GroupStyle::WholeNet => {
            let all: Vec<&Parameter<S>> = params.into_iter().filter(|p| !p.frozen()).collect();
            vec![ParamGroup::new("all", lr, &all)?]
        }
        GroupStyle::SharedPlusOwn => {
            let sel: Vec<&Parameter<S>> = params
                .into_iter()
                .filter(|p| p.kind().owner().is_none() || p.kind().owner() == Some(t))
                .collect();
            vec![ParamGroup::new("main", lr, &sel)?]
        }
        GroupStyle::DomainAndShared => {
            let own: Vec<&Parameter<S>> =
                params.iter().copied().filter(|p| p.kind().owner() == Some(t)).collect();
            let shared: Vec<&Parameter<S>> =
                params.iter().copied().filter(|p| p.kind() == ParamKind::Shared).collect();
            vec![
                ParamGroup::new("domain", lr, &own)?,
                ParamGroup::new("shared", S::from_f64(eff.shared_lr()), &shared)?,
            ]
        }
        GroupStyle::OwnOnly => {
            let own: Vec<&Parameter<S>> =
                params.into_iter().filter(|p| p.kind().owner() == Some(t)).collect();
            vec![ParamGroup::new("own", lr, &own)?]
        }
    })
}

fn echo_entries(spec: &RegimeSpec, cfg: &TrainConfig, eff: &TrainConfig) -> Vec<(String, String)> {
    let dlr_text = |d: Dlr| match d {
        Dlr::Ratio(r) => format!("{r}"),
        Dlr::FreezeShared => "freeze-shared".to_string(),
    };
    vec![
        ("method".into(), spec.name.into()),
        (
            "net".into(),
            match spec.net {
                NetKind::Dau => "dau",
                NetKind::Plain => "plain",
            }
            .into(),
        ),
        (
            "head".into(),
            match spec.head {
                HeadMode::PerDomain => "per-domain",
                HeadMode::SingleHead => "single",
            }
            .into(),
        ),
        (
            "init_wt".into(),
            match spec.init {
                InitWt::FromPrevious => "from-previous",
                InitWt::Random => "random",
            }
            .into(),
        ),
        (
            "protocol".into(),
            if spec.joint { "offline-joint" } else { "incremental" }.into(),
        ),
        ("lr".into(), format!("{}", cfg.lr)),
        ("dlr".into(), dlr_text(eff.dlr)),
        ("lambda_kld".into(), format!("{}", eff.lambda_kld)),
        ("epochs".into(), cfg.epochs.to_string()),
        ("batch_size".into(), cfg.batch_size.to_string()),
        ("momentum".into(), format!("{}", cfg.momentum)),
        ("seed".into(), cfg.seed.to_string()),
        (
            "distill".into(),
            match cfg.distill {
                DistillMode::All => "all",
                DistillMode::Last => "last",
            }
            .into(),
        ),
    ]
}

/// Evaluate every registered domain, attaching each old domain's drift
/// against the score it earned when first learned.
fn score_all<S: Scalar>(
    model: &Model<S>,
    data: &[DomainData],
    registered: usize,
    batch_size: usize,
    remaps: Option<&[Vec<u8>]>,
    first_miou: &mut Vec<f64>,
) -> Result<Vec<DomainScore>> {
    let mut scores = Vec::with_capacity(registered);
    for m in 0..registered {
        let outcome = evaluate_domain(
            model,
            data[m].dataset.samples(Split::Val),
            m,
            batch_size,
            remap_for(remaps, m),
        )?;
        let delta = (m < first_miou.len()).then(|| outcome.miou - first_miou[m]);
        if m == first_miou.len() {
            first_miou.push(outcome.miou);
        }
        scores.push(DomainScore {
            domain: data[m].name.clone(),
            miou: outcome.miou,
            delta,
            per_class_iou: outcome.per_class_iou,
        });
    }
    Ok(scores)
}

/// The engine behind `run_sequence` and every baseline: builds the model
/// for the regime's network and head arrangement, then either trains all
/// domains in one offline phase (`joint`) or chains incremental steps.
/// `remaps`/`union_classes` carry the shared label space for single-head
/// regimes. Training data for a step is not touched after that step ends.
pub(crate) fn run_regime<S: Scalar>(
    spec: &RegimeSpec,
    data: &[DomainData],
    cfgs: &[TrainConfig],
    remaps: Option<&[Vec<u8>]>,
    union_classes: Option<&[String]>,
    observe: StepObserver<S>,
) -> Result<SequenceOutcome<S>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("at least one domain is required".into()));
    }
    for (i, d) in data.iter().enumerate() {
        if data[..i].iter().any(|e| e.name == d.name) {
            return Err(Error::DuplicateDomain(d.name.clone()));
        }
    }
    let want = if spec.joint { 1 } else { data.len() };
    if cfgs.len() != want {
        return Err(Error::InvalidArgument(format!(
            "{} over {} domain(s) needs {want} config(s), got {}",
            spec.name,
            data.len(),
            cfgs.len()
        )));
    }
    for c in cfgs {
        c.validate()?;
    }
    let seed = cfgs[0].seed;
    let momentum = cfgs[0].momentum;
    for c in &cfgs[1..] {
        if c.seed != seed || c.momentum != momentum {
            return Err(Error::InvalidArgument(
                "all steps of one run must share seed and momentum".into(),
            ));
        }
    }
    if (spec.head == HeadMode::SingleHead) != (remaps.is_some() && union_classes.is_some()) {
        return Err(Error::InvalidArgument(
            "single-head regimes need a union label space; per-domain ones must not get one".into(),
        ));
    }

    let root = RngState::new(seed);
    let mut init_rng = root.substream(1);
    let mut shuffle_rng = root.substream(2);

    let first_info = match union_classes {
        Some(u) => DomainInfo::new(data[0].name.clone(), u.to_vec())?,
        None => data[0].info()?,
    };
    let model_cfg = ModelConfig { net: spec.net, head: spec.head, ..ModelConfig::default() };
    let mut model = Model::build(model_cfg, first_info, &mut init_rng)?;

    let mut first_miou: Vec<f64> = Vec::new();
    let mut reports = Vec::new();

    if spec.joint {
        let cfg = &cfgs[0];
        let eff = effective_cfg(cfg, spec);
        for d in &data[1..] {
            model.add_domain(d.info()?, spec.init, &mut init_rng)?;
        }
        let start = Instant::now();
        let groups = build_groups(&model, 0, GroupStyle::WholeNet, &eff)?;
        let mut opt = SgdMomentum::new(S::from_f64(momentum));
        let mut epochs = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            // Whole-batch units per domain, then the units shuffled, so
            // every batch is single-domain but the phase interleaves all.
            let mut units: Vec<(usize, Vec<usize>)> = Vec::new();
            for (t, d) in data.iter().enumerate() {
                let train = d.dataset.samples(Split::Train);
                if train.is_empty() {
                    return Err(Error::Data(format!("domain `{}` has no training samples", d.name)));
                }
                let mut order: Vec<usize> = (0..train.len()).collect();
                shuffle_rng.shuffle(&mut order);
                for chunk in order.chunks(cfg.batch_size) {
                    units.push((t, chunk.to_vec()));
                }
            }
            shuffle_rng.shuffle(&mut units);
            let (mut ce, mut kld, mut total) = (0.0, 0.0, 0.0);
            for (t, idx) in &units {
                let train = data[*t].dataset.samples(Split::Train);
                let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
                let x = image_batch::<S>(&refs)?;
                let y = label_batch(&refs, remap_for(remaps, *t))?;
                let losses = compute_losses(&model, None, &x, &y, *t, &eff)?;
                backward(&losses.l_ws)?;
                opt.step(&groups)?;
                ce += losses.ce_value();
                kld += losses.kld_value();
                total += losses.total_value();
            }
            let n = units.len() as f64;
            epochs.push(EpochLoss { ce: ce / n, kld: kld / n, total: total / n });
        }
        let scores =
            score_all(&model, data, data.len(), cfg.batch_size, remaps, &mut first_miou)?;
        let names: Vec<&str> = data.iter().map(|d| d.name.as_str()).collect();
        reports.push(StepReport {
            step: 0,
            domain: names.join("+"),
            epochs,
            scores,
            wall_seconds: start.elapsed().as_secs_f64(),
            config_echo: echo_entries(spec, cfg, &eff),
        });
        observe(0, &model)?;
        return Ok(SequenceOutcome { reports, model });
    }

    for (t, d) in data.iter().enumerate() {
        let cfg = &cfgs[t];
        let eff = effective_cfg(cfg, spec);
        let start = Instant::now();
        let teacher = if t == 0 {
            None
        } else {
            Some(match spec.freeze {
                FreezePolicy::OldDomains => begin_step(&mut model, d.info()?, spec.init, &mut init_rng)?,
                FreezePolicy::Encoder => {
                    let snap = model.snapshot();
                    model.add_domain(d.info()?, spec.init, &mut init_rng)?;
                    model.freeze_encoder();
                    snap
                }
                FreezePolicy::Nothing => {
                    let snap = model.snapshot();
                    model.add_domain(d.info()?, spec.init, &mut init_rng)?;
                    snap
                }
            })
        };
        let style = if t == 0 { GroupStyle::WholeNet } else { spec.style };
        let groups = build_groups(&model, t, style, &eff)?;
        let mut opt = SgdMomentum::new(S::from_f64(momentum));
        let train = d.dataset.samples(Split::Train);
        let mut epochs = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            epochs.push(train_epoch(
                &model,
                teacher.as_ref(),
                train,
                t,
                &eff,
                &groups,
                &mut opt,
                &mut shuffle_rng,
                remap_for(remaps, t),
            )?);
        }
        let scores = score_all(&model, data, t + 1, cfg.batch_size, remaps, &mut first_miou)?;
        reports.push(StepReport {
            step: t,
            domain: d.name.clone(),
            epochs,
            scores,
            wall_seconds: start.elapsed().as_secs_f64(),
            config_echo: echo_entries(spec, cfg, &eff),
        });
        observe(t, &model)?;
    }
    Ok(SequenceOutcome { reports, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, DomainGenSpec, ShapeKind};
    use crate::model::checkpoint;
    use crate::tensor::no_grad;

    fn tiny_spec(name: &str, seed: u64, shapes: Vec<ShapeKind>, train: usize, val: usize) -> DomainGenSpec {
        let palette = vec![[0.8, 0.3, 0.2], [0.2, 0.4, 0.9], [0.3, 0.8, 0.3], [0.9, 0.8, 0.2]];
        DomainGenSpec {
            name: name.to_string(),
            seed,
            height: 16,
            width: 16,
            train_count: train,
            val_count: val,
            palette: palette[..shapes.len()].to_vec(),
            shapes,
            color_jitter: 0.03,
            background_color: [0.15, 0.2, 0.25],
            texture_freq: 3.0,
            texture_amp: 0.05,
            noise_sigma: 0.02,
            density: 1,
        }
    }

    fn two_tiny_domains() -> Vec<DomainData> {
        let a = tiny_spec("a", 11, vec![ShapeKind::Rectangle, ShapeKind::Disk], 8, 4);
        let b = tiny_spec("b", 22, vec![ShapeKind::Rectangle, ShapeKind::Triangle], 8, 4);
        vec![
            DomainData::new("a", generate_domain(&a).unwrap()),
            DomainData::new("b", generate_domain(&b).unwrap()),
        ]
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() }
    }

    /// Small model plus a batch from each of two registered domains.
    fn model_with_history() -> (Model<f32>, Snapshot<f32>, Tensor<f32>, LabelMap, RngState) {
        let data = two_tiny_domains();
        let mut rng = RngState::new(7);
        let cfg = crate::model::ModelConfig {
            widths: vec![4, 8],
            stage_strides: vec![2, 2],
            units_per_stage: 1,
            decoder_widths: [4, 4],
            ..crate::model::ModelConfig::default()
        };
        let mut model = Model::build(cfg, data[0].info().unwrap(), &mut rng).unwrap();
        // One step-0 update so the snapshot is not the freshly built net.
        let tc = quick_cfg();
        let groups = build_groups(&model, 0, GroupStyle::WholeNet, &tc).unwrap();
        let mut opt = SgdMomentum::new(0.9f32);
        let mut shuffle = RngState::new(3);
        train_epoch(
            &model,
            None,
            data[0].dataset.samples(Split::Train),
            0,
            &tc,
            &groups,
            &mut opt,
            &mut shuffle,
            None,
        )
        .unwrap();
        let teacher = begin_step(&mut model, data[1].info().unwrap(), InitWt::FromPrevious, &mut rng).unwrap();
        let refs: Vec<&Sample> = data[1].dataset.samples(Split::Train).iter().take(4).collect();
        let x = image_batch::<f32>(&refs).unwrap();
        let y = label_batch(&refs, None).unwrap();
        (model, teacher, x, y, rng)
    }

    #[test]
    fn first_step_has_no_distillation_term() {
        let data = two_tiny_domains();
        let mut rng = RngState::new(5);
        let model = Model::<f32>::build(
            crate::model::ModelConfig {
                widths: vec![4, 8],
                stage_strides: vec![2, 2],
                units_per_stage: 1,
                decoder_widths: [4, 4],
                ..crate::model::ModelConfig::default()
            },
            data[0].info().unwrap(),
            &mut rng,
        )
        .unwrap();
        let refs: Vec<&Sample> = data[0].dataset.samples(Split::Train).iter().take(4).collect();
        let x = image_batch::<f32>(&refs).unwrap();
        let y = label_batch(&refs, None).unwrap();
        let cfg = TrainConfig::default();
        let losses = compute_losses(&model, None, &x, &y, 0, &cfg).unwrap();
        assert_eq!(losses.kld_value(), 0.0);
        assert_eq!(losses.total_value(), losses.ce_value());
        assert!(losses.ce_value() > 0.0);
    }

    #[test]
    fn distillation_starts_at_exactly_zero() {
        let (model, teacher, x, y, _rng) = model_with_history();
        let cfg = TrainConfig::default();
        let losses = compute_losses(&model, Some(&teacher), &x, &y, 1, &cfg).unwrap();
        // Student and teacher share every weight and statistic that the
        // old-domain path touches, so the divergence is bitwise zero.
        assert_eq!(losses.kld_value(), 0.0);
    }

    #[test]
    fn missing_teacher_is_rejected() {
        let (model, _teacher, x, y, _rng) = model_with_history();
        let cfg = TrainConfig::default();
        let err = compute_losses(&model, None, &x, &y, 1, &cfg).err().unwrap();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
        // Zero weight needs no teacher at all.
        let cfg0 = TrainConfig { lambda_kld: 0.0, ..TrainConfig::default() };
        let losses = compute_losses(&model, None, &x, &y, 1, &cfg0).unwrap();
        assert_eq!(losses.kld_value(), 0.0);
    }

    /// Push shared weights visibly off the teacher's. The divergence is
    /// quadratic in the weight shift, so a lone reduced-rate optimizer
    /// step would vanish below f32 resolution.
    fn nudge_shared(model: &Model<f32>) {
        for p in model.shared_params() {
            p.tensor().with_data_mut(|w| {
                for (i, v) in w.iter_mut().enumerate() {
                    *v += if i % 2 == 0 { 0.02 } else { -0.02 };
                }
            });
        }
    }

    #[test]
    fn doubling_the_weight_doubles_the_distillation_term() {
        let (model, teacher, x, y, _rng) = model_with_history();
        nudge_shared(&model);
        let cfg = quick_cfg();
        let one = compute_losses(&model, Some(&teacher), &x, &y, 1, &cfg).unwrap().kld_value();
        let two = compute_losses(
            &model,
            Some(&teacher),
            &x,
            &y,
            1,
            &TrainConfig { lambda_kld: 2.0, ..cfg.clone() },
        )
        .unwrap()
        .kld_value();
        assert!(one > 0.0);
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn combined_loss_is_the_sum_of_its_parts() {
        let (model, teacher, x, y, _rng) = model_with_history();
        nudge_shared(&model);
        let cfg = quick_cfg();
        let after = compute_losses(&model, Some(&teacher), &x, &y, 1, &cfg).unwrap();
        let sum = after.l_ce.item() + after.l_kld.item();
        assert_eq!(after.l_ws.item(), sum);
        assert!(after.kld_value() > 0.0);
    }

    #[test]
    fn snapshot_matches_live_model_when_a_step_opens() {
        let (model, teacher, x, _y, _rng) = model_with_history();
        let live = no_grad(|| model.forward(&x, 0, BnMode::Infer)).unwrap();
        let old = teacher.forward(&x, 0).unwrap();
        assert_eq!(live.to_vec(), old.to_vec());
    }

    #[test]
    fn opening_a_step_twice_for_one_domain_fails() {
        let (mut model, _teacher, _x, _y, mut rng) = model_with_history();
        let dup = DomainInfo::new("a", vec!["background".into(), "x".into()]).unwrap();
        let err = begin_step(&mut model, dup, InitWt::Random, &mut rng).err().unwrap();
        assert!(matches!(err, Error::DuplicateDomain(_)), "{err}");
    }

    #[test]
    fn frozen_history_stays_bitwise_constant_through_a_step() {
        let (model, teacher, _x, _y, _rng) = model_with_history();
        let data = two_tiny_domains();
        let before: Vec<Vec<f32>> = model
            .params()
            .iter()
            .filter(|p| p.frozen())
            .map(|p| p.tensor().to_vec())
            .collect();
        assert!(!before.is_empty());
        let shared_before: Vec<Vec<f32>> =
            model.shared_params().iter().map(|p| p.tensor().to_vec()).collect();

        let cfg = quick_cfg();
        let groups = build_groups(&model, 1, GroupStyle::DomainAndShared, &cfg).unwrap();
        let mut opt = SgdMomentum::new(0.9f32);
        let mut shuffle = RngState::new(9);
        train_epoch(
            &model,
            Some(&teacher),
            data[1].dataset.samples(Split::Train),
            1,
            &cfg,
            &groups,
            &mut opt,
            &mut shuffle,
            None,
        )
        .unwrap();

        let after: Vec<Vec<f32>> = model
            .params()
            .iter()
            .filter(|p| p.frozen())
            .map(|p| p.tensor().to_vec())
            .collect();
        assert_eq!(before, after);
        // The reduced-rate group must still be a real update, not a freeze.
        let shared_after: Vec<Vec<f32>> =
            model.shared_params().iter().map(|p| p.tensor().to_vec()).collect();
        assert_ne!(shared_before, shared_after);
    }

    #[test]
    fn freeze_shared_sentinel_keeps_shared_weights_put() {
        let (model, teacher, _x, _y, _rng) = model_with_history();
        let data = two_tiny_domains();
        let cfg = TrainConfig { dlr: Dlr::FreezeShared, ..quick_cfg() };
        let shared_before: Vec<Vec<f32>> =
            model.shared_params().iter().map(|p| p.tensor().to_vec()).collect();
        let own_before: Vec<Vec<f32>> =
            model.domain_params(1).iter().map(|p| p.tensor().to_vec()).collect();
        let groups = build_groups(&model, 1, GroupStyle::DomainAndShared, &cfg).unwrap();
        let mut opt = SgdMomentum::new(0.9f32);
        let mut shuffle = RngState::new(9);
        train_epoch(
            &model,
            Some(&teacher),
            data[1].dataset.samples(Split::Train),
            1,
            &cfg,
            &groups,
            &mut opt,
            &mut shuffle,
            None,
        )
        .unwrap();
        let shared_after: Vec<Vec<f32>> =
            model.shared_params().iter().map(|p| p.tensor().to_vec()).collect();
        let own_after: Vec<Vec<f32>> =
            model.domain_params(1).iter().map(|p| p.tensor().to_vec()).collect();
        assert_eq!(shared_before, shared_after);
        assert_ne!(own_before, own_after);
    }

    #[test]
    fn group_rates_scale_updates_exactly() {
        let (model, _teacher, _x, _y, _rng) = model_with_history();
        // Zeroed weights, unit gradients, zero momentum: the update IS
        // the learning rate, so the two groups' step sizes divide
        // exactly by the configured ratio (a power of two).
        let cfg = TrainConfig { lr: 5e-3, dlr: Dlr::Ratio(128.0), momentum: 0.0, ..quick_cfg() };
        for p in model.params() {
            p.tensor().with_data_mut(|w| w.iter_mut().for_each(|v| *v = 0.0));
            if !p.frozen() {
                p.tensor().with_grad_mut(|g| g.iter_mut().for_each(|v| *v = 1.0));
            }
        }
        let groups = build_groups(&model, 1, GroupStyle::DomainAndShared, &cfg).unwrap();
        let mut opt = SgdMomentum::new(0.0f32);
        opt.step(&groups).unwrap();
        let lr = 5e-3f32;
        let reduced = lr / 128.0;
        for p in model.params() {
            let expect = match p.kind().owner() {
                Some(1) => -lr,
                None => -reduced,
                Some(_) => 0.0, // frozen history: zeroed, unmoved
            };
            for v in p.tensor().to_vec() {
                assert_eq!(v, expect, "{}", p.name());
            }
        }
        assert_eq!(reduced * 128.0, lr);
    }

    #[test]
    fn distillation_gradients_skip_new_domain_parameters() {
        let (model, teacher, x, y, _rng) = model_with_history();
        // Separate student from teacher first so the term has gradients.
        nudge_shared(&model);
        let cfg = quick_cfg();
        let bundle = compute_losses(&model, Some(&teacher), &x, &y, 1, &cfg).unwrap();
        assert!(bundle.kld_value() > 0.0);
        backward(&bundle.l_kld).unwrap();
        let mut saw_shared_grad = false;
        for p in model.params() {
            match p.kind().owner() {
                Some(1) => assert!(
                    p.tensor().grad().is_none(),
                    "distillation must not reach `{}`",
                    p.name()
                ),
                Some(_) => assert!(p.tensor().grad().is_none(), "frozen `{}`", p.name()),
                None => saw_shared_grad |= p.tensor().grad().is_some(),
            }
            p.tensor().clear_grad();
        }
        assert!(saw_shared_grad);
    }

    #[test]
    fn pixel_loss_falls_over_a_toy_run() {
        let spec = tiny_spec("solo", 31, vec![ShapeKind::Rectangle, ShapeKind::Disk], 32, 8);
        let data = vec![DomainData::new("solo", generate_domain(&spec).unwrap())];
        let cfg = TrainConfig { epochs: 5, batch_size: 8, ..TrainConfig::default() };
        let out = run_sequence::<f32>(&data, &[cfg.clone()], NetKind::Dau).unwrap();
        assert_eq!(out.reports.len(), 1);
        let epochs = &out.reports[0].epochs;
        assert_eq!(epochs.len(), cfg.epochs);
        assert!(
            epochs.last().unwrap().ce < epochs.first().unwrap().ce,
            "ce {:?} should fall",
            epochs.iter().map(|e| e.ce).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sequences_are_deterministic() {
        let data = two_tiny_domains();
        let cfgs = vec![quick_cfg(), quick_cfg()];
        let one = run_sequence::<f32>(&data, &cfgs, NetKind::Dau).unwrap();
        let data2 = two_tiny_domains();
        let two = run_sequence::<f32>(&data2, &cfgs, NetKind::Dau).unwrap();
        let mut b1 = Vec::new();
        checkpoint::save(&one.model, &mut b1).unwrap();
        let mut b2 = Vec::new();
        checkpoint::save(&two.model, &mut b2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(one.reports.len(), 2);
        for (r1, r2) in one.reports.iter().zip(&two.reports) {
            assert_eq!(r1.epochs, r2.epochs);
            for (s1, s2) in r1.scores.iter().zip(&r2.scores) {
                assert_eq!(s1.miou, s2.miou);
                assert_eq!(s1.delta, s2.delta);
                assert_eq!(s1.per_class_iou, s2.per_class_iou);
            }
        }
        // Second step evaluates both domains; drift annotation only on
        // the old one.
        let last = &one.reports[1];
        assert_eq!(last.scores.len(), 2);
        assert!(last.scores[0].delta.is_some());
        assert!(last.scores[1].delta.is_none());
    }

    #[test]
    fn sequence_rejects_duplicates_and_empty_input() {
        let data = two_tiny_domains();
        let dup = vec![
            DomainData::new("a", data[0].dataset.clone()),
            DomainData::new("a", data[0].dataset.clone()),
        ];
        let err =
            run_sequence::<f32>(&dup, &[quick_cfg(), quick_cfg()], NetKind::Dau).err().unwrap();
        assert!(matches!(err, Error::DuplicateDomain(_)), "{err}");
        let err = run_sequence::<f32>(&[], &[], NetKind::Dau).err().unwrap();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
        let err = run_sequence::<f32>(&data, &[quick_cfg()], NetKind::Dau).err().unwrap();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let (model, teacher, _x, _y, _rng) = model_with_history();
        let cfg = quick_cfg();
        let groups = build_groups(&model, 1, GroupStyle::DomainAndShared, &cfg).unwrap();
        let mut opt = SgdMomentum::new(0.9f32);
        let mut shuffle = RngState::new(1);
        let err = train_epoch(
            &model,
            Some(&teacher),
            &[],
            1,
            &cfg,
            &groups,
            &mut opt,
            &mut shuffle,
            None,
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn config_bounds_are_enforced() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        let cases = [
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { lr: -1.0, ..ok.clone() },
            TrainConfig { dlr: Dlr::Ratio(0.5), ..ok.clone() },
            TrainConfig { lambda_kld: -0.1, ..ok.clone() },
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { momentum: -0.1, ..ok.clone() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
        TrainConfig { dlr: Dlr::FreezeShared, ..ok }.validate().unwrap();
    }

    #[test]
    fn rendered_reports_omit_wall_time() {
        let report = StepReport {
            step: 1,
            domain: "b".into(),
            epochs: vec![EpochLoss { ce: 1.25, kld: 0.5, total: 1.75 }],
            scores: vec![
                DomainScore {
                    domain: "a".into(),
                    miou: 72.55,
                    delta: Some(0.0),
                    per_class_iou: vec![],
                },
                DomainScore { domain: "b".into(), miou: 54.1, delta: None, per_class_iou: vec![] },
            ],
            wall_seconds: 123.456,
            config_echo: vec![("method".into(), "ours".into())],
        };
        let text = report.render();
        assert!(text.contains("step 1 (b)"));
        assert!(text.contains("ce 1.2500"));
        assert!(text.contains("a: miou 72.55 (-0.00)"));
        assert!(text.contains("b: miou 54.10\n"));
        assert!(text.contains("config: method=ours"));
        assert!(!text.contains("123"), "wall time must stay out of report text:\n{text}");
    }
}
