//! Experiment runner: a flat key=value config describes domains, one
//! training configuration, a method, and an output directory; commands
//! tie generation, training, evaluation, and reporting into reproducible
//! runs whose artifacts are byte-stable given the same config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::baselines::{run_baseline_observed, BaselineKind};
use crate::data::{
    default_domain_specs, domain_dir, generate_domain, load_dataset, validate_spec_set,
    write_dataset, DomainGenSpec, ShapeKind, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_domain, parse_csv, render_report, render_table_from_csv, DomainEvalOutcome,
    MethodReport,
};
use crate::model::checkpoint::{load_from_path, save_to_path};
use crate::model::{HeadMode, Model, NetKind};
use crate::trainer::{run_sequence_observed, DistillMode, Dlr, DomainData, StepReport, TrainConfig};
use crate::IGNORE_INDEX;

const GLOBAL_KEYS: [&str; 11] = [
    "out_dir",
    "method",
    "sequence",
    "lr",
    "dlr",
    "lambda_kld",
    "epochs",
    "batch_size",
    "momentum",
    "seed",
    "distill",
];

const DOMAIN_KEYS: [&str; 13] = [
    "seed",
    "shapes",
    "palette",
    "background",
    "texture_freq",
    "texture_amp",
    "noise_sigma",
    "color_jitter",
    "density",
    "height",
    "width",
    "train_count",
    "val_count",
];

/// A parsed experiment file: the method to train, the domain sequence
/// with fully resolved generation specs, one training configuration, and
/// every key=value pair as written (echoed into reports).
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub method: String,
    pub sequence: Vec<String>,
    pub train: TrainConfig,
    pub domains: Vec<DomainGenSpec>,
    pub echo: Vec<(String, String)>,
}

fn conf<T>(msg: String) -> Result<T> {
    Err(Error::Config(msg))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
}

fn parse_shape(key: &str, token: &str) -> Result<ShapeKind> {
    ShapeKind::UNIVERSE
        .into_iter()
        .find(|s| s.name() == token)
        .ok_or_else(|| {
            let names: Vec<&str> = ShapeKind::UNIVERSE.iter().map(|s| s.name()).collect();
            Error::Config(format!(
                "key `{key}`: unknown shape `{token}`; expected one of {}",
                names.join(", ")
            ))
        })
}

fn parse_rgb(key: &str, v: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return conf(format!("key `{key}`: expected r,g,b, got `{v}`"));
    }
    let mut rgb = [0.0; 3];
    for (slot, p) in rgb.iter_mut().zip(&parts) {
        *slot = parse_num::<f64>(key, p)?;
    }
    Ok(rgb)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return conf(format!("line {}: expected key=value, got `{line}`", ln + 1));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if pairs.iter().any(|(e, _)| *e == k) {
            return conf(format!("duplicate key `{k}`"));
        }
        pairs.push((k, v));
    }
    let get = |k: &str| pairs.iter().find(|(e, _)| e == k).map(|(_, v)| v.as_str());

    let out_dir = PathBuf::from(
        get("out_dir").ok_or_else(|| Error::Config("missing key `out_dir`".into()))?,
    );
    let method = get("method").unwrap_or("ours").to_string();
    let sequence: Vec<String> = get("sequence")
        .ok_or_else(|| Error::Config("missing key `sequence`".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    if sequence.iter().any(String::is_empty) {
        return conf("key `sequence`: empty domain name".into());
    }
    for (i, name) in sequence.iter().enumerate() {
        if sequence[..i].contains(name) {
            return conf(format!("key `sequence`: domain `{name}` listed twice"));
        }
    }

    let mut train = TrainConfig::default();
    if let Some(v) = get("lr") {
        train.lr = parse_num("lr", v)?;
    }
    if let Some(v) = get("dlr") {
        train.dlr = if v == "freeze-shared" {
            Dlr::FreezeShared
        } else {
            Dlr::Ratio(parse_num("dlr", v)?)
        };
    }
    if let Some(v) = get("lambda_kld") {
        train.lambda_kld = parse_num("lambda_kld", v)?;
    }
    if let Some(v) = get("epochs") {
        train.epochs = parse_num("epochs", v)?;
    }
    if let Some(v) = get("batch_size") {
        train.batch_size = parse_num("batch_size", v)?;
    }
    if let Some(v) = get("momentum") {
        train.momentum = parse_num("momentum", v)?;
    }
    if let Some(v) = get("seed") {
        train.seed = parse_num("seed", v)?;
    }
    if let Some(v) = get("distill") {
        train.distill = match v {
            "all" => DistillMode::All,
            "last" => DistillMode::Last,
            _ => return conf(format!("key `distill`: expected all|last, got `{v}`")),
        };
    }
    train.validate().map_err(|e| Error::Config(e.to_string()))?;

    // Each sequence entry starts from one of the stock domain templates
    // (cycled by position) and overrides whatever its keys specify; the
    // per-domain seed is never implied.
    let templates = default_domain_specs(0);
    let mut domains = Vec::with_capacity(sequence.len());
    for (i, name) in sequence.iter().enumerate() {
        let mut spec = templates[i % templates.len()].clone();
        spec.name = name.clone();
        let dk = |field: &str| format!("domain.{name}.{field}");
        let seed_key = dk("seed");
        spec.seed = match get(&seed_key) {
            Some(v) => parse_num(&seed_key, v)?,
            None => return conf(format!("missing key `{seed_key}`")),
        };
        if let Some(v) = get(&dk("shapes")) {
            let key = dk("shapes");
            let shapes: Result<Vec<ShapeKind>> =
                v.split(',').map(|t| parse_shape(&key, t.trim())).collect();
            spec.shapes = shapes?;
            // Recycle the template palette to the new class count unless
            // the config paints its own.
            let base = spec.palette.clone();
            spec.palette = (0..spec.shapes.len()).map(|j| base[j % base.len()]).collect();
        }
        if let Some(v) = get(&dk("palette")) {
            let key = dk("palette");
            let colors: Result<Vec<[f64; 3]>> =
                v.split(';').map(|t| parse_rgb(&key, t.trim())).collect();
            spec.palette = colors?;
        }
        if let Some(v) = get(&dk("background")) {
            spec.background_color = parse_rgb(&dk("background"), v)?;
        }
        if let Some(v) = get(&dk("texture_freq")) {
            spec.texture_freq = parse_num(&dk("texture_freq"), v)?;
        }
        if let Some(v) = get(&dk("texture_amp")) {
            spec.texture_amp = parse_num(&dk("texture_amp"), v)?;
        }
        if let Some(v) = get(&dk("noise_sigma")) {
            spec.noise_sigma = parse_num(&dk("noise_sigma"), v)?;
        }
        if let Some(v) = get(&dk("color_jitter")) {
            spec.color_jitter = parse_num(&dk("color_jitter"), v)?;
        }
        if let Some(v) = get(&dk("density")) {
            spec.density = parse_num(&dk("density"), v)?;
        }
        if let Some(v) = get(&dk("height")) {
            spec.height = parse_num(&dk("height"), v)?;
        }
        if let Some(v) = get(&dk("width")) {
            spec.width = parse_num(&dk("width"), v)?;
        }
        if let Some(v) = get(&dk("train_count")) {
            spec.train_count = parse_num(&dk("train_count"), v)?;
        }
        if let Some(v) = get(&dk("val_count")) {
            spec.val_count = parse_num(&dk("val_count"), v)?;
        }
        spec.validate()?;
        domains.push(spec);
    }
    validate_spec_set(&domains)?;

    for (k, _) in &pairs {
        let known_global = GLOBAL_KEYS.contains(&k.as_str());
        let known_domain = k
            .strip_prefix("domain.")
            .and_then(|rest| rest.split_once('.'))
            .is_some_and(|(name, field)| {
                sequence.iter().any(|n| n == name) && DOMAIN_KEYS.contains(&field)
            });
        if !known_global && !known_domain {
            return conf(format!("unknown key `{k}`"));
        }
    }

    Ok(ExperimentConfig { out_dir, method, sequence, train, domains, echo: pairs })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn data_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("runs").join(&cfg.method)
}

/// Render every domain dataset into `<out_dir>/data/domain_<name>/`.
/// Existing copies are replaced wholesale, so reruns are byte-identical.
pub fn cmd_gen_domains(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let root = data_root(cfg);
    std::fs::create_dir_all(&root)?;
    let mut dirs = Vec::new();
    for spec in &cfg.domains {
        let ds = generate_domain(spec)?;
        let dir = domain_dir(&root, &spec.name);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        write_dataset(&ds, &root, &spec.name)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

fn load_sequence_data(cfg: &ExperimentConfig) -> Result<Vec<DomainData>> {
    let root = data_root(cfg);
    cfg.sequence
        .iter()
        .map(|name| {
            let dir = domain_dir(&root, name);
            if !dir.exists() {
                return Err(Error::Data(format!(
                    "dataset for domain `{name}` not found at {}; run gen-domains first",
                    dir.display()
                )));
            }
            Ok(DomainData::new(name.clone(), load_dataset(&root, name)?))
        })
        .collect()
}

/// Paths written by one training run.
pub struct RunArtifacts {
    pub checkpoints: Vec<PathBuf>,
    pub report_txt: PathBuf,
    pub report_csv: PathBuf,
    pub reports: Vec<StepReport>,
}

fn compose_report(cfg: &ExperimentConfig, reports: &[StepReport]) -> Result<(String, String)> {
    let mut txt = String::from("[config]\n");
    for (k, v) in &cfg.echo {
        let _ = writeln!(txt, "{k}={v}");
    }
    txt.push_str("\n[steps]\n");
    for r in reports {
        txt.push_str(&r.render());
    }
    let last = reports.last().expect("at least one step report");
    let method = MethodReport {
        method: cfg.method.clone(),
        step: last.step,
        domains: last.scores.clone(),
        delta_m: None,
    };
    let (table, csv) = render_report(&[method])?;
    txt.push_str("\n[final]\n");
    txt.push_str(&table);
    Ok((txt, csv))
}

/// Train the configured method over the sequence, writing one
/// `step_<t>.mdil` checkpoint per training phase plus`report.txt` and
/// `report.csv` under `<out_dir>/runs/<method>/`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let data = load_sequence_data(cfg)?;
    let dir = run_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let mut checkpoints = Vec::new();
    let mut save_step = |t: usize, model: &Model<f32>| -> Result<()> {
        let path = dir.join(format!("step_{t}.mdil"));
        save_to_path(model, &path)?;
        checkpoints.push(path);
        Ok(())
    };
    let outcome = if cfg.method == "ours" {
        let cfgs = vec![cfg.train.clone(); data.len()];
        run_sequence_observed::<f32>(&data, &cfgs, NetKind::Dau, &mut save_step)?
    } else {
        let kind = BaselineKind::parse(&cfg.method)?;
        let cfgs = vec![cfg.train.clone(); if kind.offline() { 1 } else { data.len() }];
        run_baseline_observed::<f32>(kind, &data, &cfgs, &mut save_step)?
    };
    let (txt, csv) = compose_report(cfg, &outcome.reports)?;
    let report_txt = dir.join("report.txt");
    let report_csv = dir.join("report.csv");
    std::fs::write(&report_txt, txt)?;
    std::fs::write(&report_csv, csv)?;
    Ok(RunArtifacts { checkpoints, report_txt, report_csv, reports: outcome.reports })
}

/// Everything [`cmd_eval`] renders: which head slot was scored, the
/// class names of the head's label space, and the metrics.
pub struct EvalBreakdown {
    pub domain_index: usize,
    pub samples: usize,
    pub class_names: Vec<String>,
    pub outcome: DomainEvalOutcome,
}

/// Score a checkpoint on one domain's validation split.
pub fn eval_checkpoint(checkpoint: &Path, data_root: &Path, domain: &str) -> Result<EvalBreakdown> {
    let model: Model<f32> = load_from_path(checkpoint)?;
    let t = model.domain_index(domain)?;
    let ds = load_dataset(data_root, domain)?;
    let local = ds.classes.names();
    // Head space: the domain's own classes, or the shared union head's.
    let head_space: Vec<String> = match model.config().head {
        HeadMode::PerDomain => model.domains()[t].class_names.clone(),
        HeadMode::SingleHead => model.domains()[0].class_names.clone(),
    };
    let remap: Option<Vec<u8>> = match model.config().head {
        HeadMode::PerDomain => {
            if *local != head_space[..] {
                return Err(Error::Data(format!(
                    "dataset classes {local:?} do not match the checkpoint's {head_space:?}"
                )));
            }
            None
        }
        HeadMode::SingleHead => Some(
            local
                .iter()
                .map(|n| {
                    head_space.iter().position(|u| u == n).map(|i| i as u8).ok_or_else(|| {
                        Error::Data(format!("class `{n}` is missing from the checkpoint's head"))
                    })
                })
                .collect::<Result<Vec<u8>>>()?,
        ),
    };
    let samples = ds.samples(Split::Val);
    let outcome = evaluate_domain(&model, samples, t, 8, remap.as_deref())?;
    Ok(EvalBreakdown {
        domain_index: t,
        samples: samples.len(),
        class_names: head_space,
        outcome,
    })
}

/// [`eval_checkpoint`] rendered as a per-class IoU table plus the domain
/// mIoU; classes absent from both prediction and truth show "-".
pub fn cmd_eval(checkpoint: &Path, data_root: &Path, domain: &str) -> Result<String> {
    let b = eval_checkpoint(checkpoint, data_root, domain)?;
    let mut out = format!(
        "domain {domain} (index {}), {} validation images\n",
        b.domain_index, b.samples
    );
    let width = b.class_names.iter().map(String::len).max().unwrap_or(0).max(5);
    for (name, iou) in b.class_names.iter().zip(&b.outcome.per_class_iou) {
        match iou {
            Some(v) => {
                let _ = writeln!(out, "  {name:width$}  {:6.2}", v * 100.0);
            }
            None => {
                let _ = writeln!(out, "  {name:width$}  {:>6}", "-");
            }
        }
    }
    let _ = writeln!(out, "  {:width$}  {:6.2}", "miou", b.outcome.miou);
    Ok(out)
}

/// Re-render a report CSV as an aligned comparison table.
pub fn cmd_report(csv_path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(csv_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", csv_path.display())))?;
    let rows = parse_csv(&text)?;
    render_table_from_csv(&rows)
}

/// Environment variable naming a self-test check that must report an
/// injected failure; exercises the failure path end to end.
pub const SELFTEST_FAIL_ENV: &str = "INCSEG_SELFTEST_FAIL";

/// Fast built-in verification: gradient spot checks on every operator,
/// routing isolation, the published metric vectors, and a checkpoint
/// roundtrip. Prints one PASS/FAIL line per check to `sink` and fails
/// with the offending check's name.
pub fn cmd_selftest(sink: &mut dyn std::io::Write) -> Result<()> {
    let inject = std::env::var(SELFTEST_FAIL_ENV).ok();
    let mut failures = Vec::new();
    for (name, check) in selftest_checks() {
        let result = if inject.as_deref() == Some(name) {
            Err(Error::CheckFailed(format!("{name}: injected failure")))
        } else {
            check()
        };
        match result {
            Ok(()) => {
                let _ = writeln!(sink, "PASS {name}");
            }
            Err(e) => {
                let _ = writeln!(sink, "FAIL {name}: {e}");
                failures.push(name);
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(failures.join(", ")))
    }
}

type Check = fn() -> Result<()>;

fn selftest_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("gradients.operators", selftest_gradients),
        ("gradients.composite", selftest_composite_gradient),
        ("routing.isolation", selftest_routing),
        ("metrics.published_vectors", selftest_metrics),
        ("checkpoint.roundtrip", selftest_checkpoint),
    ]
}

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::CheckFailed(msg.into()))
    }
}

fn selftest_gradients() -> Result<()> {
    use crate::gradcheck::check_gradients;
    use crate::tensor::ops::{self, BnMode, LabelMap, RunningStats};
    use crate::tensor::rng::RngState;
    use crate::tensor::Tensor;

    let tol = 1e-4;
    let mut rng = RngState::new(41);
    let fill = |rng: &mut RngState, shape: &[usize]| {
        let n: usize = shape.iter().product();
        let mut v = vec![0.0f64; n];
        rng.fill_normal(&mut v, 0.5);
        Tensor::new(shape, v).unwrap()
    };
    let proj = |rng: &mut RngState, n: usize| {
        let mut w = vec![0.0f64; n];
        rng.fill_normal(&mut w, 0.3);
        w
    };

    let x = fill(&mut rng, &[2, 3, 6, 6]);
    let w = fill(&mut rng, &[4, 3, 3, 3]);
    let pw = proj(&mut rng, 2 * 4 * 6 * 6);
    let r = check_gradients(
        &[&x, &w],
        || ops::weighted_sum(&ops::conv2d(&x, &w, 1, 1).unwrap(), &pw).unwrap(),
        1e-4,
    )?;
    require(r.max_rel_err <= tol, &format!("conv2d rel err {:.2e}", r.max_rel_err))?;

    let x = fill(&mut rng, &[1, 3, 4, 4]);
    let w = fill(&mut rng, &[3, 2, 2, 2]);
    let pw = proj(&mut rng, 2 * 8 * 8);
    let r = check_gradients(
        &[&x, &w],
        || ops::weighted_sum(&ops::conv_transpose2d(&x, &w, 2).unwrap(), &pw).unwrap(),
        1e-4,
    )?;
    require(r.max_rel_err <= tol, &format!("conv_transpose2d rel err {:.2e}", r.max_rel_err))?;

    let x = fill(&mut rng, &[2, 3, 4, 4]);
    let scale = fill(&mut rng, &[3]);
    let shift = fill(&mut rng, &[3]);
    let pw = proj(&mut rng, 2 * 3 * 4 * 4);
    let r = check_gradients(
        &[&x, &scale, &shift],
        || {
            let mut stats = RunningStats::new(3);
            let y = ops::batch_norm2d(&x, &scale, &shift, &mut stats, BnMode::Train, 0.1, 1e-5)
                .unwrap();
            ops::weighted_sum(&ops::relu(&y), &pw).unwrap()
        },
        1e-4,
    )?;
    require(r.max_rel_err <= tol, &format!("batch_norm2d rel err {:.2e}", r.max_rel_err))?;

    let logits = fill(&mut rng, &[2, 4, 3, 3]);
    let labels =
        LabelMap::new(2, 3, 3, vec![0, 1, 2, 3, 255, 0, 1, 2, 3, 0, 1, 2, 3, 255, 0, 1, 2, 3])
            .unwrap();
    let r = check_gradients(
        &[&logits],
        || ops::cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap().loss,
        1e-4,
    )?;
    require(r.max_rel_err <= tol, &format!("cross_entropy rel err {:.2e}", r.max_rel_err))?;

    let student = fill(&mut rng, &[2, 4, 3, 3]);
    let teacher = fill(&mut rng, &[2, 4, 3, 3]);
    let r = check_gradients(&[&student], || ops::kl_div(&student, &teacher).unwrap(), 1e-4)?;
    require(r.max_rel_err <= tol, &format!("kl_div rel err {:.2e}", r.max_rel_err))
}

fn selftest_composite_gradient() -> Result<()> {
    use crate::gradcheck::check_gradients;
    use crate::model::{DomainInfo, Model, ModelConfig};
    use crate::tensor::ops::{self, BnMode, LabelMap};
    use crate::tensor::rng::RngState;
    use crate::tensor::Tensor;

    let mut rng = RngState::new(43);
    let cfg = ModelConfig {
        widths: vec![2, 3],
        stage_strides: vec![2, 2],
        units_per_stage: 1,
        decoder_widths: [3, 2],
        ..ModelConfig::default()
    };
    let info = DomainInfo::new("probe", vec!["background".into(), "thing".into()]).unwrap();
    let model = Model::<f64>::build(cfg, info, &mut rng).unwrap();
    let mut data = vec![0.0f64; 3 * 8 * 8];
    rng.fill_normal(&mut data, 0.5);
    let x = Tensor::new(&[1, 3, 8, 8], data).unwrap();
    let labels = LabelMap::new(1, 8, 8, vec![1u8; 64]).unwrap();
    let params = model.params();
    let tensors: Vec<_> = params.iter().map(|p| p.tensor().clone()).collect();
    let refs: Vec<&Tensor<f64>> = tensors.iter().collect();
    let r = check_gradients(
        &refs,
        || {
            let logits = model.forward(&x, 0, BnMode::Infer).unwrap();
            ops::cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap().loss
        },
        1e-4,
    )?;
    require(r.max_rel_err <= 1e-4, &format!("network rel err {:.2e}", r.max_rel_err))
}

fn selftest_routing() -> Result<()> {
    use crate::model::{DomainInfo, InitWt, Model, ModelConfig};
    use crate::tensor::rng::RngState;
    use crate::tensor::{no_grad, ops::BnMode, Tensor};

    let mut rng = RngState::new(47);
    let cfg = ModelConfig {
        widths: vec![4, 8],
        stage_strides: vec![2, 2],
        units_per_stage: 1,
        decoder_widths: [4, 4],
        ..ModelConfig::default()
    };
    let info = DomainInfo::new("first", vec!["background".into(), "thing".into()]).unwrap();
    let mut model = Model::<f32>::build(cfg, info, &mut rng).unwrap();
    let mut data = vec![0.0f32; 3 * 16 * 16];
    rng.fill_normal(&mut data, 0.5);
    let x = Tensor::new(&[1, 3, 16, 16], data).unwrap();
    let before = no_grad(|| model.forward(&x, 0, BnMode::Infer)).unwrap().to_vec();
    let second = DomainInfo::new("second", vec!["background".into(), "other".into()]).unwrap();
    model.add_domain(second, InitWt::Random, &mut rng).unwrap();
    for p in model.domain_params(1) {
        p.tensor().with_data_mut(|w| w.iter_mut().for_each(|v| *v += 0.37));
    }
    let after = no_grad(|| model.forward(&x, 0, BnMode::Infer)).unwrap().to_vec();
    require(before == after, "perturbing domain 1 changed domain 0's output")
}

fn selftest_metrics() -> Result<()> {
    use crate::eval::delta_m;

    let close = |a: f64, b: f64| (a - b).abs() <= 0.01;
    let two = delta_m(&[40.05, 52.74], &[72.55, 54.1])?;
    require(close(two, 23.66), &format!("two-domain drop {two:.4} != 23.66"))?;
    let ours = delta_m(&[65.21, 55.73], &[72.55, 54.1])?;
    require(close(ours, 3.55), &format!("two-domain drop {ours:.4} != 3.55"))?;
    let three = delta_m(&[30.49, 32.05, 60.65], &[72.55, 54.1, 61.97])?;
    require(close(three, 33.62), &format!("three-domain drop {three:.4} != 33.62"))
}

fn selftest_checkpoint() -> Result<()> {
    use crate::model::checkpoint::{load, save};
    use crate::model::{DomainInfo, InitWt, Model, ModelConfig};
    use crate::tensor::rng::RngState;
    use crate::tensor::{no_grad, ops::BnMode, Tensor};

    let mut rng = RngState::new(53);
    let cfg = ModelConfig {
        widths: vec![4, 8],
        stage_strides: vec![2, 2],
        units_per_stage: 1,
        decoder_widths: [4, 4],
        ..ModelConfig::default()
    };
    let info = DomainInfo::new("first", vec!["background".into(), "thing".into()]).unwrap();
    let mut model = Model::<f32>::build(cfg, info, &mut rng).unwrap();
    let second = DomainInfo::new("second", vec!["background".into(), "other".into()]).unwrap();
    model.add_domain(second, InitWt::FromPrevious, &mut rng).unwrap();
    let mut bytes = Vec::new();
    save(&model, &mut bytes)?;
    let back: Model<f32> = load(&mut bytes.as_slice())?;
    let mut data = vec![0.0f32; 3 * 16 * 16];
    rng.fill_normal(&mut data, 0.5);
    let x = Tensor::new(&[1, 3, 16, 16], data).unwrap();
    for t in 0..2 {
        let a = no_grad(|| model.forward(&x, t, BnMode::Infer)).unwrap().to_vec();
        let b = no_grad(|| back.forward(&x, t, BnMode::Infer)).unwrap().to_vec();
        require(a == b, &format!("reloaded model diverges on domain {t}"))?;
    }
    let mut again = Vec::new();
    save(&back, &mut again)?;
    require(bytes == again, "resaving a reloaded model changed its bytes")
}
