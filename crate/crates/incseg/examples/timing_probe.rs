use incseg::baselines::{run_baseline, BaselineKind};
use incseg::data::{default_domain_specs, generate_domain};
use incseg::model::NetKind;
use incseg::trainer::{run_sequence, Dlr, DomainData, StepReport, TrainConfig};
use std::time::Instant;

fn digest(tag: &str, last: &StepReport, secs: f64) -> String {
    let f = last.scores[0].delta.map(|d| -d).unwrap_or(f64::NAN);
    format!(
        "{tag}[forget {f:+.2} old {:.2} new {:.2} {:.0}s]",
        last.scores[0].miou, last.scores[1].miou, secs
    )
}

fn main() {
    let specs = default_domain_specs(0);
    let data: Vec<DomainData> = specs[..2]
        .iter()
        .map(|s| DomainData::new(s.name.clone(), generate_domain(s).unwrap()))
        .collect();
    let total = Instant::now();
    for seed in [1u64, 2, 3] {
        let cfg = TrainConfig {
            seed,
            lr: 2e-2,
            epochs: 20,
            dlr: Dlr::Ratio(10.0),
            ..TrainConfig::default()
        };
        let cfgs = [cfg.clone(), cfg];
        let mut row = format!("seed {seed}: ");

        let t0 = Instant::now();
        let ours = run_sequence::<f32>(&data, &cfgs, NetKind::Dau).unwrap();
        row += &digest("ours", ours.reports.last().unwrap(), t0.elapsed().as_secs_f64());

        let t0 = Instant::now();
        let out = run_baseline::<f32>(BaselineKind::DauFtDlr, &data, &cfgs).unwrap();
        row += " ";
        row += &digest("dau_ft_dlr", out.reports.last().unwrap(), t0.elapsed().as_secs_f64());
        println!("{row}");
    }
    println!("total {:.0}s", total.elapsed().as_secs_f64());
}
