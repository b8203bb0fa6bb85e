//! Segmentation metrics (confusion matrices, per-class IoU, mIoU), the
//! average per-task drop score used to compare incremental methods,
//! forgetting deltas, text/CSV report rendering, and latent export.

use std::io::Write;
use std::path::Path;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, DTYPE_LABELS};
use crate::model::Model;
use crate::tensor::ops::{self, BnMode, LabelMap};
use crate::tensor::{no_grad, Scalar, Tensor};
use crate::IGNORE_INDEX;

/// C x C counts with rows = ground truth and columns = prediction, plus
/// the number of pixels skipped for carrying the ignore index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 || classes > 255 {
            return Err(Error::InvalidArgument(format!(
                "confusion matrix needs 1..=255 classes, got {classes}"
            )));
        }
        Ok(ConfusionMatrix { classes, counts: vec![0; classes * classes], ignored: 0 })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    /// Pixels accounted for: counted plus ignored.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.ignored
    }

    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!(
                "prediction has {} pixels, truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        let c = self.classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_INDEX {
                self.ignored += 1;
                continue;
            }
            if t as usize >= c {
                return Err(Error::InvalidArgument(format!("truth label {t} outside {c} classes")));
            }
            if p as usize >= c {
                return Err(Error::InvalidArgument(format!("predicted label {p} outside {c} classes")));
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }
}

/// Per-class IoU (None for classes absent from both prediction and truth)
/// and their mean over present classes, both as fractions in [0, 1].
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let c = cm.classes;
    let mut per_class = vec![None; c];
    let (mut sum, mut present) = (0.0, 0usize);
    for k in 0..c {
        let diag = cm.count(k, k);
        let row: u64 = (0..c).map(|j| cm.count(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.count(i, k)).sum();
        let union = row + col - diag;
        if union == 0 {
            continue;
        }
        let iou = diag as f64 / union as f64;
        per_class[k] = Some(iou);
        sum += iou;
        present += 1;
    }
    if present == 0 {
        return Err(Error::InvalidArgument("every class has zero union; nothing to score".into()));
    }
    Ok((per_class, sum / present as f64))
}

/// Average per-task drop of `model` against `baseline` mIoU values (in
/// percent), as a percentage: positive means the model lost accuracy on
/// average, negative means a net gain.
pub fn delta_m(model: &[f64], baseline: &[f64]) -> Result<f64> {
    if model.is_empty() || model.len() != baseline.len() {
        return Err(Error::InvalidArgument(format!(
            "need equal nonempty score lists, got {} and {}",
            model.len(),
            baseline.len()
        )));
    }
    let mut acc = 0.0;
    for (&m, &b) in model.iter().zip(baseline) {
        if b <= 0.0 {
            return Err(Error::InvalidArgument(format!("baseline mIoU {b} must be positive")));
        }
        acc += (m - b) / b;
    }
    Ok(-(acc / model.len() as f64) * 100.0)
}

/// Signed change of a score: after minus before.
pub fn forgetting_delta(before: f64, after: f64) -> f64 {
    after - before
}

/// One domain's scores inside a method row.
#[derive(Clone, Debug)]
pub struct DomainScore {
    pub domain: String,
    /// mIoU in percent.
    pub miou: f64,
    /// Parenthesized drop/gain against the reference run; omitted when
    /// there is no reference (e.g. the baseline row itself).
    pub delta: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
}

/// One method's final-step evaluation across every registered domain.
#[derive(Clone, Debug)]
pub struct MethodReport {
    pub method: String,
    pub step: usize,
    pub domains: Vec<DomainScore>,
    /// Average per-task drop in percent; None for the reference rows.
    pub delta_m: Option<f64>,
}

/// Two decimals with an explicit sign; exact zero renders as "-0.00" to
/// mark a method that provably cannot forget.
pub(crate) fn fmt_delta(d: f64) -> String {
    if d == 0.0 {
        "-0.00".to_string()
    } else if d > 0.0 {
        format!("+{d:.2}")
    } else {
        format!("-{:.2}", d.abs())
    }
}

fn fmt_delta_m(dm: f64) -> String {
    if dm < 0.0 {
        format!("{:.2}^", dm.abs())
    } else {
        format!("{dm:.2}")
    }
}

pub const CSV_HEADER: &str = "method,step,domain,miou,delta,delta_m";

/// Render an aligned text table (one row per method, one column per
/// domain, drop score last; gains are flagged with `^`) and a CSV with
/// the stable header `method,step,domain,miou,delta,delta_m`.
pub fn render_report(reports: &[MethodReport]) -> Result<(String, String)> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    let domains: Vec<&str> = reports[0].domains.iter().map(|d| d.domain.as_str()).collect();
    for r in reports {
        let got: Vec<&str> = r.domains.iter().map(|d| d.domain.as_str()).collect();
        if got != domains {
            return Err(Error::InvalidArgument(format!(
                "method `{}` reports domains {got:?}, expected {domains:?}",
                r.method
            )));
        }
    }

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in reports {
        for d in &r.domains {
            let delta = d.delta.map(fmt_delta).unwrap_or_default();
            let dm = r.delta_m.map(|v| format!("{v:.2}")).unwrap_or_default();
            csv.push_str(&format!("{},{},{},{:.2},{delta},{dm}\n", r.method, r.step, d.domain, d.miou));
        }
    }

    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["method".to_string()];
    header.extend(domains.iter().map(|d| d.to_string()));
    header.push("delta_m%".to_string());
    cells.push(header);
    for r in reports {
        let mut row = vec![r.method.clone()];
        for d in &r.domains {
            row.push(match d.delta {
                Some(delta) => format!("{:.2} ({})", d.miou, fmt_delta(delta)),
                None => format!("{:.2}", d.miou),
            });
        }
        row.push(r.delta_m.map(fmt_delta_m).unwrap_or_default());
        cells.push(row);
    }
    let cols = cells[0].len();
    let widths: Vec<usize> =
        (0..cols).map(|c| cells.iter().map(|row| row[c].len()).max().unwrap()).collect();
    let mut table = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> =
            row.iter().zip(&widths).map(|(cell, &w)| format!("{cell:<w$}")).collect();
        table.push_str(line.join("  ").trim_end());
        table.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            table.push_str(&rule.join("  "));
            table.push('\n');
        }
    }
    Ok((table, csv))
}

/// A parsed CSV report row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub method: String,
    pub step: usize,
    pub domain: String,
    pub miou: f64,
    pub delta: Option<f64>,
    pub delta_m: Option<f64>,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "expected header `{CSV_HEADER}`, got `{}`",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!("row {} has {} fields, expected 6", i + 2, fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("row {}: bad {what} `{s}`", i + 2)))
        };
        let opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() { Ok(None) } else { num(s, what).map(Some) }
        };
        rows.push(CsvRow {
            method: fields[0].to_string(),
            step: fields[1]
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad step `{}`", i + 2, fields[1])))?,
            domain: fields[2].to_string(),
            miou: num(fields[3], "miou")?,
            delta: opt(fields[4], "delta")?,
            delta_m: opt(fields[5], "delta_m")?,
        });
    }
    Ok(rows)
}

/// Rebuild the aligned text table from report CSV rows.
pub fn render_table_from_csv(rows: &[CsvRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to render".into()));
    }
    let mut reports: Vec<MethodReport> = Vec::new();
    for row in rows {
        if reports.last().map(|r: &MethodReport| r.method != row.method).unwrap_or(true) {
            reports.push(MethodReport {
                method: row.method.clone(),
                step: row.step,
                domains: Vec::new(),
                delta_m: row.delta_m,
            });
        }
        reports
            .last_mut()
            .unwrap()
            .domains
            .push(DomainScore { domain: row.domain.clone(), miou: row.miou, delta: row.delta, per_class_iou: vec![] });
    }
    render_report(&reports).map(|(table, _)| table)
}

/// Stack samples into one channel-major image batch.
pub fn image_batch<S: Scalar>(samples: &[&Sample]) -> Result<Tensor<S>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (h, w) = (samples[0].height, samples[0].width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if s.height != h || s.width != w {
            return Err(Error::ShapeMismatch("mixed image sizes in one batch".into()));
        }
        data.extend(s.image.iter().map(|&v| S::from_f64(v as f64)));
    }
    Tensor::new(&[samples.len(), 3, h, w], data)
}

/// Stack samples' labels, optionally remapping each local id through
/// `remap` (ignore-index pixels pass through untouched).
pub fn label_batch(samples: &[&Sample], remap: Option<&[u8]>) -> Result<LabelMap> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (h, w) = (samples[0].height, samples[0].width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        for &l in &s.labels {
            data.push(match (l, remap) {
                (IGNORE_INDEX, _) | (_, None) => l,
                (_, Some(map)) => *map.get(l as usize).ok_or_else(|| {
                    Error::InvalidArgument(format!("label {l} outside the remap table"))
                })?,
            });
        }
    }
    LabelMap::new(samples.len(), h, w, data)
}

/// Confusion matrix plus scores for one domain's sample set.
pub struct DomainEvalOutcome {
    pub confusion: ConfusionMatrix,
    pub per_class_iou: Vec<Option<f64>>,
    /// In percent.
    pub miou: f64,
}

/// Score `model` on `samples` along the domain-`t` path with inference
/// batch norm. `remap` converts local label ids into the head's space
/// (used when several domains share one head).
pub fn evaluate_domain<S: Scalar>(
    model: &Model<S>,
    samples: &[Sample],
    t: usize,
    batch_size: usize,
    remap: Option<&[u8]>,
) -> Result<DomainEvalOutcome> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut cm = ConfusionMatrix::new(model.head_classes(t)?)?;
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = image_batch::<S>(&refs)?;
        let truth = label_batch(&refs, remap)?;
        let logits = no_grad(|| model.forward(&x, t, BnMode::Infer))?;
        let pred = ops::argmax_channels(&logits)?;
        cm.accumulate(&pred, &truth.data)?;
    }
    let (per_class_iou, m) = miou(&cm)?;
    Ok(DomainEvalOutcome { confusion: cm, per_class_iou, miou: m * 100.0 })
}

/// Write the final-encoder-stage feature map of one sample plus its label
/// map as two container tensor records ("features", then "labels").
pub fn export_latents<S: Scalar>(
    model: &Model<S>,
    sample: &Sample,
    t: usize,
    path: &Path,
) -> Result<()> {
    let x = image_batch::<S>(&[sample])?;
    let feats = no_grad(|| model.encoder_features(&x, t, BnMode::Infer))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    checkpoint::write_record(
        &mut f,
        "features",
        S::DTYPE_CODE,
        &feats.shape(),
        &checkpoint::scalars_to_bytes(&feats.to_vec()),
    )?;
    checkpoint::write_record(
        &mut f,
        "labels",
        DTYPE_LABELS,
        &[sample.height, sample.width],
        &sample.labels,
    )?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_sample, DomainGenSpec, ShapeKind};
    use crate::model::{DomainInfo, ModelConfig};
    use crate::tensor::rng::RngState;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        cm.accumulate(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        let (per_class, m) = miou(&cm).unwrap();
        assert_eq!(per_class, vec![Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(m, 1.0);
    }

    #[test]
    fn disputed_classes_score_zero_and_absent_classes_drop_out() {
        let mut cm = ConfusionMatrix::new(4).unwrap();
        // Truth is all class 0, prediction all class 1; classes 2 and 3
        // appear nowhere.
        cm.accumulate(&[1, 1], &[0, 0]).unwrap();
        let (per_class, m) = miou(&cm).unwrap();
        assert_eq!(per_class, vec![Some(0.0), Some(0.0), None, None]);
        assert_eq!(m, 0.0);
    }

    #[test]
    fn hand_checked_three_class_matrix() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        for (t, p, n) in [(0, 0, 5), (0, 1, 1), (1, 0, 2), (1, 1, 7), (1, 2, 1), (2, 2, 4)] {
            for _ in 0..n {
                cm.accumulate(&[p], &[t]).unwrap();
            }
        }
        let (per_class, m) = miou(&cm).unwrap();
        let expect = [5.0 / 8.0, 7.0 / 11.0, 4.0 / 5.0];
        for (got, want) in per_class.iter().zip(expect) {
            assert!((got.unwrap() - want).abs() < 1e-12);
        }
        assert!((m - expect.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!((m - 0.687121).abs() < 1e-6);
    }

    #[test]
    fn ignored_pixels_are_skipped_but_counted() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        cm.accumulate(&[0, 1, 0], &[255, 255, 0]).unwrap();
        assert_eq!(cm.ignored(), 2);
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.total(), 3, "counted + ignored covers every evaluated pixel");

        let mut empty = ConfusionMatrix::new(2).unwrap();
        empty.accumulate(&[1, 1], &[255, 255]).unwrap();
        assert!(miou(&empty).is_err(), "all-ignored input has no scoreable class");
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        assert!(cm.accumulate(&[0], &[2]).is_err());
        assert!(cm.accumulate(&[2], &[0]).is_err());
        assert!(cm.accumulate(&[0, 0], &[0]).is_err());
    }

    #[test]
    fn drop_score_matches_published_two_domain_numbers() {
        let dm = delta_m(&[40.05, 52.74], &[72.55, 54.1]).unwrap();
        assert!((dm - 23.66).abs() < 0.01, "{dm}");
        let dm = delta_m(&[65.21, 55.73], &[72.55, 54.1]).unwrap();
        assert!((dm - 3.55).abs() < 0.01, "{dm}");
    }

    #[test]
    fn drop_score_matches_published_three_domain_numbers() {
        let dm = delta_m(&[30.49, 32.05, 60.65], &[72.55, 54.1, 61.97]).unwrap();
        assert!((dm - 33.62).abs() < 0.01, "{dm}");
    }

    #[test]
    fn drop_score_edge_cases() {
        assert_eq!(delta_m(&[50.0, 60.0], &[50.0, 60.0]).unwrap(), 0.0);
        assert!(delta_m(&[70.0], &[60.0]).unwrap() < 0.0, "gains come out negative");
        assert!(delta_m(&[], &[]).is_err());
        assert!(delta_m(&[1.0], &[1.0, 2.0]).is_err());
        assert!(delta_m(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn forgetting_matches_published_parentheses() {
        assert!((forgetting_delta(72.55, 40.05) - (-32.5)).abs() < 1e-9);
        assert!((forgetting_delta(54.1, 55.73) - 1.63).abs() < 1e-9);
        assert_eq!(forgetting_delta(10.0, 10.0), 0.0);
    }

    fn sample_reports() -> Vec<MethodReport> {
        let d = |name: &str, miou: f64, delta: Option<f64>| DomainScore {
            domain: name.to_string(),
            miou,
            delta,
            per_class_iou: vec![],
        };
        vec![
            MethodReport {
                method: "single_task".into(),
                step: 1,
                domains: vec![d("alpha", 72.55, None), d("beta", 54.1, None)],
                delta_m: None,
            },
            MethodReport {
                method: "ft_multihead".into(),
                step: 1,
                domains: vec![d("alpha", 40.05, Some(-32.5)), d("beta", 52.74, Some(-1.36))],
                delta_m: Some(23.66),
            },
            MethodReport {
                method: "feature_extract".into(),
                step: 1,
                domains: vec![d("alpha", 72.55, Some(0.0)), d("beta", 48.0, Some(-6.1))],
                delta_m: Some(5.64),
            },
        ]
    }

    #[test]
    fn report_renders_table_and_csv() {
        let (table, csv) = render_report(&sample_reports()).unwrap();
        assert!(table.contains("40.05 (-32.50)"));
        assert!(table.contains("72.55 (-0.00)"), "exact zero renders as -0.00:\n{table}");
        assert!(table.contains("delta_m%"));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 3 * 2, "one row per method and domain");
        assert!(lines[1].starts_with("single_task,1,alpha,72.55,,"));
        assert!(lines.iter().any(|l| l.starts_with("ft_multihead,1,alpha,40.05,-32.50,23.66")));
    }

    #[test]
    fn gains_are_flagged_in_the_table_but_numeric_in_csv() {
        let mut reports = sample_reports();
        reports[1].delta_m = Some(-0.30);
        let (table, csv) = render_report(&reports).unwrap();
        assert!(table.contains("0.30^"), "{table}");
        assert!(csv.contains(",-0.30\n"));
    }

    #[test]
    fn csv_roundtrips_to_printed_precision() {
        let reports = sample_reports();
        let (_, csv) = render_report(&reports).unwrap();
        let rows = parse_csv(&csv).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].method, "single_task");
        assert_eq!(rows[0].delta, None);
        assert_eq!(rows[2].miou, 40.05);
        assert_eq!(rows[2].delta, Some(-32.5));
        assert_eq!(rows[2].delta_m, Some(23.66));
        assert_eq!(rows[4].delta, Some(0.0), "-0.00 parses back to zero");

        // Rendering from parsed rows reproduces the table.
        let table_a = render_report(&reports).unwrap().0;
        let table_b = render_table_from_csv(&rows).unwrap();
        assert_eq!(table_a, table_b);

        assert!(parse_csv("bogus\n").is_err());
        assert!(parse_csv(&format!("{CSV_HEADER}\na,b\n")).is_err());
        assert!(render_report(&[]).is_err());
    }

    fn tiny_model() -> Model<f32> {
        let cfg = ModelConfig {
            widths: vec![4, 8],
            stage_strides: vec![2, 2],
            units_per_stage: 1,
            decoder_widths: [4, 4],
            ..ModelConfig::default()
        };
        let mut rng = RngState::new(33);
        let info = DomainInfo::new("tiny", vec!["background".into(), "rectangle".into(), "disk".into()])
            .unwrap();
        Model::build(cfg, info, &mut rng).unwrap()
    }

    fn tiny_sample() -> Sample {
        let spec = DomainGenSpec {
            name: "tiny".into(),
            seed: 7,
            height: 32,
            width: 32,
            train_count: 1,
            val_count: 1,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Disk],
            palette: vec![[0.8, 0.2, 0.2], [0.2, 0.8, 0.2]],
            color_jitter: 0.02,
            background_color: [0.2, 0.2, 0.3],
            texture_freq: 2.0,
            texture_amp: 0.05,
            noise_sigma: 0.01,
            density: 2,
        };
        render_sample(&spec, 0).unwrap()
    }

    #[test]
    fn evaluation_covers_every_pixel() {
        let model = tiny_model();
        let samples = vec![tiny_sample(), tiny_sample()];
        let out = evaluate_domain(&model, &samples, 0, 2, None).unwrap();
        assert_eq!(out.confusion.total(), 2 * 32 * 32);
        assert!((0.0..=100.0).contains(&out.miou));
    }

    #[test]
    fn label_remapping_feeds_the_shared_space() {
        let s = tiny_sample();
        let remap = [0u8, 5, 6];
        let mapped = label_batch(&[&s], Some(&remap)).unwrap();
        for (&orig, &got) in s.labels.iter().zip(&mapped.data) {
            assert_eq!(got, remap[orig as usize]);
        }
    }

    #[test]
    fn latent_export_roundtrips_bitwise() {
        let model = tiny_model();
        let sample = tiny_sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("latents.bin");
        export_latents(&model, &sample, 0, &path).unwrap();
        let path2 = dir.path().join("latents2.bin");
        export_latents(&model, &sample, 0, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        let bytes = std::fs::read(&path).unwrap();
        let mut cursor = bytes.as_slice();
        let feats = checkpoint::read_record(&mut cursor).unwrap();
        let labels = checkpoint::read_record(&mut cursor).unwrap();
        assert!(cursor.is_empty());
        assert_eq!(feats.name, "features");
        assert_eq!(feats.extents, vec![1, 8, 8, 8], "one sample, final width, 32/4 spatial");

        let x = image_batch::<f32>(&[&sample]).unwrap();
        let live = model.encoder_features(&x, 0, BnMode::Infer).unwrap();
        let stored: Vec<f32> = checkpoint::scalars_from_bytes(&feats.payload);
        assert_eq!(
            live.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            stored.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(labels.dtype, DTYPE_LABELS);
        assert_eq!(labels.extents, vec![32, 32]);
        assert_eq!(labels.payload, sample.labels);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

        #[test]
        fn miou_is_invariant_under_simultaneous_relabeling(
            counts in proptest::collection::vec(0u64..50, 16),
            perm_seed in 0u64..1000,
        ) {
            let mut cm = ConfusionMatrix::new(4).unwrap();
            cm.counts.copy_from_slice(&counts);
            if let Ok((per_class, m)) = miou(&cm) {
                let mut perm: Vec<usize> = (0..4).collect();
                RngState::new(perm_seed).shuffle(&mut perm);
                let mut relabeled = ConfusionMatrix::new(4).unwrap();
                for t in 0..4 {
                    for p in 0..4 {
                        relabeled.counts[perm[t] * 4 + perm[p]] = cm.count(t, p);
                    }
                }
                let (per_class2, m2) = miou(&relabeled).unwrap();
                prop_assert!((m - m2).abs() < 1e-12);
                for k in 0..4 {
                    prop_assert_eq!(per_class[k], per_class2[perm[k]]);
                }
            }
        }

        #[test]
        fn confusion_conserves_pixel_counts(
            labels in proptest::collection::vec(0u8..3, 1..64),
            ignore_mask in proptest::collection::vec(any::<bool>(), 64),
        ) {
            let truth: Vec<u8> = labels
                .iter()
                .zip(&ignore_mask)
                .map(|(&l, &ig)| if ig { IGNORE_INDEX } else { l })
                .collect();
            let pred: Vec<u8> = labels.iter().map(|&l| (l + 1) % 3).collect();
            let mut cm = ConfusionMatrix::new(3).unwrap();
            cm.accumulate(&pred, &truth).unwrap();
            prop_assert_eq!(cm.total(), truth.len() as u64);
        }
    }
}
