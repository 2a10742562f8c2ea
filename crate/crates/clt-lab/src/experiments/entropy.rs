use clt_embed::entropy::{entropy_oracle_product_fft, loglog_slope, strong_logconcave_bound, DEFAULT_FFT_POINTS};
use clt_embed::measure::Density1d;

use super::Outcome;
use crate::config::{DensitySpec, ExperimentConfig, MeasureSpec};
use crate::report::{CriterionRecord, Table};
use crate::LabError;

const DOUBLING: [usize; 6] = [2, 4, 8, 16, 32, 64];

fn families(cfg: &ExperimentConfig, default: &[(&str, DensitySpec)]) -> Result<Vec<(String, Density1d, bool)>, LabError> {
    let specs: Vec<(String, DensitySpec)> = match &cfg.measure {
        None => default.iter().map(|(n, s)| (n.to_string(), s.clone())).collect(),
        Some(MeasureSpec::Cloud { density, .. }) => vec![("custom".into(), density.clone())],
        Some(_) => return Err(LabError::Config("entropy experiments take a cloud measure spec for its density".into())),
    };
    specs
        .into_iter()
        .map(|(name, s)| {
            let gaussian = matches!(s, DensitySpec::Gauss { .. });
            Ok((name, s.build()?, gaussian))
        })
        .collect()
}

pub(super) fn strong(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let fams = families(
        cfg,
        &[
            ("gauss_1", DensitySpec::Gauss { s: 1.0 }),
            ("gauss_0.8", DensitySpec::Gauss { s: 0.8 }),
            ("logcosh_2_1", DensitySpec::Logcosh { a: 2.0, b: 1.0 }),
        ],
    )?;
    let ds = cfg.ds(&[1, 2]);
    let ns = cfg.ns(&DOUBLING, &DOUBLING);
    let mut t = Table::new("entropy_strong", &["family", "d", "n", "entropy", "oracle_err", "bound"]);
    for (name, f, gaussian) in &fams {
        let var = f.variance();
        let sd = var.sqrt();
        // per coordinate
        let ent_x = entropy_oracle_product_fft(f, 1, 1.0, DEFAULT_FFT_POINTS)?.value;
        for &d in &ds {
            for &n in &ns {
                let e = entropy_oracle_product_fft(f, n, sd, DEFAULT_FFT_POINTS)?.tensorized(d);
                let bound = strong_logconcave_bound(d, var, d as f64 * ent_x, n)?;
                let id = format!("{name},d={d},n={n}");
                out.report.push(CriterionRecord::le("C8", id.clone(), e.value, bound).ci(e.ci).tolerance(cfg.tol("C8")));
                if *gaussian {
                    out.report.push(CriterionRecord::le("C8", format!("{id},exact_zero"), e.value, 1e-6));
                }
                t.row(vec![name.as_str().into(), d.into(), n.into(), e.value.into(), e.ci.into(), bound.into()]);
            }
        }
    }
    out.table(t);
    Ok(())
}

pub(super) fn rate(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let fams = families(cfg, &[("logcosh_2_1", DensitySpec::Logcosh { a: 2.0, b: 1.0 })])?;
    let ns = cfg.ns(&DOUBLING, &DOUBLING);
    let d = 1usize;
    let mut t = Table::new("entropy_rate", &["family", "n", "entropy", "oracle_err", "n_times_entropy"]);
    for (name, f, _) in &fams {
        let sd = f.variance().sqrt();
        let ent_x = entropy_oracle_product_fft(f, 1, sd, DEFAULT_FFT_POINTS)?.value;
        let mut ys = vec![];
        let mut implied = 0.0_f64;
        for &n in &ns {
            let e = entropy_oracle_product_fft(f, n, sd, DEFAULT_FFT_POINTS)?;
            let scaled = n as f64 * e.value;
            implied = implied.max(scaled / ((d as f64).powi(10) * (1.0 + ent_x)));
            t.row(vec![name.as_str().into(), n.into(), e.value.into(), e.ci.into(), scaled.into()]);
            ys.push(e.value);
        }
        let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        let slope = loglog_slope(&xs, &ys);
        out.report.push(CriterionRecord::range("C9", format!("{name},slope"), slope, -1.2, -0.8).tolerance(cfg.tol("C9")));
        out.report.note(&format!("{name}_implied_constant"), implied);
        out.report.note(&format!("{name}_ent_x"), ent_x);
    }
    out.table(t);
    Ok(())
}
