//! Reference training regimes the protocol is compared against: per-task
//! and offline-joint upper bounds, fine-tuning with per-domain or shared
//! heads, frozen-encoder feature extraction, distillation-regularized
//! fine-tuning, and the ablation grid that switches the protocol's
//! ingredients (adapters, inherited initialization, reduced shared rate,
//! distillation) on and off one at a time.

use crate::data::LabelSpace;
use crate::error::{Error, Result};
use crate::model::{HeadMode, InitWt, NetKind};
use crate::tensor::Scalar;
use crate::trainer::{
    run_regime, DomainData, FreezePolicy, GroupStyle, RegimeSpec, SequenceOutcome, StepObserver,
    TrainConfig,
};
use crate::IGNORE_INDEX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    /// One independent model per domain (upper bound; no transfer).
    SingleTask,
    /// One offline phase over every domain at once (violates the
    /// incremental setting; flagged as such in its report).
    JointMultitask,
    /// Fine-tune encoder plus a fresh head per domain.
    FtMultihead,
    /// Fine-tune everything behind one head over the union label space.
    FtSinglehead,
    /// Freeze the encoder after the first domain; train new heads only.
    FeatureExtract,
    /// Fine-tune with a distillation term through every old head.
    LwfMultihead,
    /// Adapters, random new-domain init, uniform rate, no distillation.
    DauFt,
    /// Adapters, inherited init, uniform rate, no distillation.
    DauFtDlr1,
    /// Adapters, random init, reduced shared rate, no distillation.
    DauFtRinit,
    /// Adapters, inherited init, reduced shared rate, no distillation.
    DauFtDlr,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 10] = [
        BaselineKind::SingleTask,
        BaselineKind::JointMultitask,
        BaselineKind::FtMultihead,
        BaselineKind::FtSinglehead,
        BaselineKind::FeatureExtract,
        BaselineKind::LwfMultihead,
        BaselineKind::DauFt,
        BaselineKind::DauFtDlr1,
        BaselineKind::DauFtRinit,
        BaselineKind::DauFtDlr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::SingleTask => "single_task",
            BaselineKind::JointMultitask => "joint_multitask",
            BaselineKind::FtMultihead => "ft_multihead",
            BaselineKind::FtSinglehead => "ft_singlehead",
            BaselineKind::FeatureExtract => "feature_extract",
            BaselineKind::LwfMultihead => "lwf_multihead",
            BaselineKind::DauFt => "dau_ft",
            BaselineKind::DauFtDlr1 => "dau_ft_dlr1",
            BaselineKind::DauFtRinit => "dau_ft_rinit",
            BaselineKind::DauFtDlr => "dau_ft_dlr",
        }
    }

    pub fn parse(s: &str) -> Result<BaselineKind> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = BaselineKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown baseline `{s}`; expected one of {}",
                    names.join(", ")
                ))
            })
    }

    pub(crate) fn regime(self) -> RegimeSpec {
        let plain = |name, head, style, freeze, joint, use_kld| RegimeSpec {
            name,
            net: NetKind::Plain,
            head,
            init: InitWt::Random,
            use_dlr: false,
            use_kld,
            freeze,
            style,
            joint,
        };
        let dau = |name, init, use_dlr| RegimeSpec {
            name,
            net: NetKind::Dau,
            head: HeadMode::PerDomain,
            init,
            use_dlr,
            use_kld: false,
            freeze: FreezePolicy::OldDomains,
            style: GroupStyle::DomainAndShared,
            joint: false,
        };
        match self {
            BaselineKind::SingleTask => plain(
                "single_task",
                HeadMode::PerDomain,
                GroupStyle::WholeNet,
                FreezePolicy::Nothing,
                false,
                false,
            ),
            BaselineKind::JointMultitask => plain(
                "joint_multitask",
                HeadMode::PerDomain,
                GroupStyle::WholeNet,
                FreezePolicy::Nothing,
                true,
                false,
            ),
            BaselineKind::FtMultihead => plain(
                "ft_multihead",
                HeadMode::PerDomain,
                GroupStyle::SharedPlusOwn,
                FreezePolicy::Nothing,
                false,
                false,
            ),
            BaselineKind::FtSinglehead => plain(
                "ft_singlehead",
                HeadMode::SingleHead,
                GroupStyle::WholeNet,
                FreezePolicy::Nothing,
                false,
                false,
            ),
            BaselineKind::FeatureExtract => plain(
                "feature_extract",
                HeadMode::PerDomain,
                GroupStyle::OwnOnly,
                FreezePolicy::Encoder,
                false,
                false,
            ),
            BaselineKind::LwfMultihead => plain(
                "lwf_multihead",
                HeadMode::PerDomain,
                GroupStyle::WholeNet,
                FreezePolicy::Nothing,
                false,
                true,
            ),
            BaselineKind::DauFt => dau("dau_ft", InitWt::Random, false),
            BaselineKind::DauFtDlr1 => dau("dau_ft_dlr1", InitWt::FromPrevious, false),
            BaselineKind::DauFtRinit => dau("dau_ft_rinit", InitWt::Random, true),
            BaselineKind::DauFtDlr => dau("dau_ft_dlr", InitWt::FromPrevious, true),
        }
    }

    /// Distillation term active (L_KLD column of the ablation grid).
    pub fn uses_distillation(self) -> bool {
        self.regime().use_kld
    }

    /// Shared weights move at the reduced rate (DLR column).
    pub fn uses_reduced_shared_lr(self) -> bool {
        self.regime().use_dlr
    }

    /// New domain parameters start from the previous domain's (init_Wt
    /// column).
    pub fn inherits_domain_init(self) -> bool {
        self.regime().init == InitWt::FromPrevious
    }

    /// Runs on the adapter encoder rather than the plain one (DAU column).
    pub fn uses_adapters(self) -> bool {
        self.regime().net == NetKind::Dau
    }

    /// One head over the union label space instead of one per domain.
    pub fn single_head(self) -> bool {
        self.regime().head == HeadMode::SingleHead
    }

    /// Reads every domain's training data in one phase instead of one
    /// domain per step.
    pub fn offline(self) -> bool {
        self.regime().joint
    }
}

/// Global class registry for single-head training: class names from all
/// domains in first-seen order, plus per-domain tables taking local label
/// ids to global ones.
pub struct UnionLabelSpace {
    union: LabelSpace,
    tables: Vec<Vec<u8>>,
}

impl UnionLabelSpace {
    pub fn build(spaces: &[&LabelSpace]) -> Result<UnionLabelSpace> {
        if spaces.is_empty() {
            return Err(Error::InvalidArgument("no label spaces to merge".into()));
        }
        let mut names: Vec<String> = Vec::new();
        for s in spaces {
            for n in s.names() {
                if !names.contains(n) {
                    names.push(n.clone());
                }
            }
        }
        let union = LabelSpace::new(names)?;
        let tables = spaces
            .iter()
            .map(|s| {
                s.names()
                    .iter()
                    .map(|n| union.id_of(n).expect("union contains every member name"))
                    .collect()
            })
            .collect();
        Ok(UnionLabelSpace { union, tables })
    }

    pub fn union(&self) -> &LabelSpace {
        &self.union
    }

    pub fn domain_count(&self) -> usize {
        self.tables.len()
    }

    pub fn remap_table(&self, domain: usize) -> Result<&[u8]> {
        self.tables
            .get(domain)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownDomain(format!("domain index {domain}")))
    }

    pub(crate) fn tables(&self) -> &[Vec<u8>] {
        &self.tables
    }

    /// Local label ids to global ones; the ignore index passes through.
    pub fn remap_labels(&self, labels: &[u8], domain: usize) -> Result<Vec<u8>> {
        let table = self.remap_table(domain)?;
        labels
            .iter()
            .map(|&l| {
                if l == IGNORE_INDEX {
                    Ok(IGNORE_INDEX)
                } else {
                    table.get(l as usize).copied().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "label {l} is outside the domain's {}-class space",
                            table.len()
                        ))
                    })
                }
            })
            .collect()
    }

    /// Global label ids back to domain-local ones; errors on classes the
    /// domain does not hold.
    pub fn restore_labels(&self, labels: &[u8], domain: usize) -> Result<Vec<u8>> {
        let table = self.remap_table(domain)?;
        labels
            .iter()
            .map(|&g| {
                if g == IGNORE_INDEX {
                    Ok(IGNORE_INDEX)
                } else {
                    table
                        .iter()
                        .position(|&u| u == g)
                        .map(|i| i as u8)
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "global label {g} has no class in domain {domain}"
                            ))
                        })
                }
            })
            .collect()
    }
}

/// Train `kind` over the domain sequence. `cfgs` carries one entry per
/// step, except for the offline joint phase which takes exactly one.
/// Ingredients a kind does not use (distillation weight, reduced shared
/// rate) are ignored and echoed as off in its reports.
pub fn run_baseline<S: Scalar>(
    kind: BaselineKind,
    data: &[DomainData],
    cfgs: &[TrainConfig],
) -> Result<SequenceOutcome<S>> {
    run_baseline_observed(kind, data, cfgs, &mut |_, _| Ok(()))
}

/// [`run_baseline`] with a per-step observer.
pub fn run_baseline_observed<S: Scalar>(
    kind: BaselineKind,
    data: &[DomainData],
    cfgs: &[TrainConfig],
    observe: StepObserver<S>,
) -> Result<SequenceOutcome<S>> {
    if kind == BaselineKind::SingleTask && data.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "single_task trains one domain per model, got {}",
            data.len()
        )));
    }
    let spec = kind.regime();
    if spec.head == HeadMode::SingleHead {
        let spaces: Vec<&LabelSpace> = data.iter().map(|d| &d.dataset.classes).collect();
        let union = UnionLabelSpace::build(&spaces)?;
        run_regime(&spec, data, cfgs, Some(union.tables()), Some(union.union().names()), observe)
    } else {
        run_regime(&spec, data, cfgs, None, None, observe)
    }
}
