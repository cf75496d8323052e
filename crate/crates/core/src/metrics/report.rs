use std::io::Write;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub f_score: f64,
    pub mae: f64,
    pub pri: f64,
    pub voi: f64,
    pub gce: f64,
    /// `None` when a mask has no boundary.
    pub bde: Option<f64>,
}

impl MetricsReport {
    fn fields(&self) -> [f64; 6] {
        [self.f_score, self.mae, self.pri, self.voi, self.gce, self.bde.unwrap_or(f64::NAN)]
    }
}

/// Field-wise means; BDE averages only the images where it is defined.
pub fn aggregate(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let bdes: Vec<f64> = reports.iter().filter_map(|r| r.bde).collect();
    Some(MetricsReport {
        f_score: mean(|r| r.f_score),
        mae: mean(|r| r.mae),
        pri: mean(|r| r.pri),
        voi: mean(|r| r.voi),
        gce: mean(|r| r.gce),
        bde: (!bdes.is_empty()).then(|| bdes.iter().sum::<f64>() / bdes.len() as f64),
    })
}

fn line(out: &mut impl Write, id: &str, r: &MetricsReport) -> std::io::Result<()> {
    write!(out, "{id}")?;
    for v in r.fields() {
        write!(out, " {v:.6}")?;
    }
    writeln!(out)
}

/// `id f mae pri voi gce bde` per image, then an `AGGREGATE` line of means.
/// Undefined BDE is written as `NaN`.
pub fn write_report(out: &mut impl Write, rows: &[(String, MetricsReport)]) -> Result<()> {
    let io = |e| Error::io("<report>", e);
    for (id, r) in rows {
        if id.is_empty() || id.chars().any(char::is_whitespace) || id == "AGGREGATE" {
            return Err(Error::Domain(format!("unusable report id {id:?}")));
        }
        line(out, id, r).map_err(io)?;
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(agg) = aggregate(&reports) {
        line(out, "AGGREGATE", &agg).map_err(io)?;
    }
    Ok(())
}

/// CSV `threshold,precision,recall`.
pub fn write_pr_csv(out: &mut impl Write, thresholds: &[f64], points: &[(f64, f64)]) -> Result<()> {
    if thresholds.len() != points.len() {
        return Err(Error::shape(format!(
            "{} thresholds for {} points",
            thresholds.len(),
            points.len()
        )));
    }
    let io = |e| Error::io("<pr curve>", e);
    writeln!(out, "threshold,precision,recall").map_err(io)?;
    for (t, (p, r)) in thresholds.iter().zip(points) {
        writeln!(out, "{t:.6},{p:.6},{r:.6}").map_err(io)?;
    }
    Ok(())
}
