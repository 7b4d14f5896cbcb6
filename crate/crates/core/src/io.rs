//! CSV and JSON persistence.
//!
//! CSV floats are written with 17 significant digits so that repeated runs
//! hash identically; column names follow the model's symbols where one exists.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::hjb::FeedbackSolution;
use crate::lq::RiccatiSolution;
use crate::mfg::{DriftReport, MfgEquilibrium};
use crate::population::PopulationRun;
use crate::principal::{FocReport, TraceRow};
use crate::{Error, Result};

/// Largest path dump written in one file.
pub const MAX_PATH_ROWS: usize = 10_000_000;

pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

struct Csv {
    w: csv::Writer<BufWriter<File>>,
    row: Vec<String>,
}

impl Csv {
    fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(header)?;
        Ok(Csv { w, row: Vec::new() })
    }

    fn int(&mut self, v: usize) -> &mut Self {
        self.row.push(v.to_string());
        self
    }

    fn num(&mut self, v: f64) -> &mut Self {
        self.row.push(fmt17(v));
        self
    }

    fn end(&mut self) -> Result<()> {
        self.w.write_record(&self.row)?;
        self.row.clear();
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `t, S, clearing`.
pub fn write_price_csv(path: &Path, eq: &MfgEquilibrium) -> Result<()> {
    let mut c = Csv::create(path, &["t", "S", "clearing"])?;
    for (n, t) in eq.flows.times.iter().enumerate() {
        c.num(*t).num(eq.price.at(n)).num(eq.clearing[n]).end()?;
    }
    c.finish()
}

/// Moment flows, one row per (t, k).
pub fn write_flows_csv(path: &Path, eq: &MfgEquilibrium) -> Result<()> {
    let header = [
        "t",
        "k",
        "mean_YX",
        "mean_Gamma",
        "mean_X",
        "var_X",
        "mean_A",
        "var_A",
        "mean_YA",
    ];
    let mut c = Csv::create(path, &header)?;
    for (n, t) in eq.flows.times.iter().enumerate() {
        for (k, f) in eq.flows.per_k.iter().enumerate() {
            c.num(*t)
                .int(k)
                .num(f.mean_yx[n])
                .num(f.mean_gamma[n])
                .num(f.mean_x[n]);
            c.num(f.var_x[n])
                .num(f.mean_a[n])
                .num(f.var_a[n])
                .num(f.mean_ya[n])
                .end()?;
        }
    }
    c.finish()
}

#[derive(Serialize)]
struct FeedbackHeader<'a> {
    k: usize,
    grid: &'a crate::StateGrid,
    penalty: &'a crate::PenaltySpec,
    params: &'a crate::SubPopulationParams,
    price: &'a [f64],
}

/// Full feedback table `feedback_k{k}.csv` plus its grid description
/// `feedback_k{k}.json` in `dir`.
pub fn write_feedback(dir: &Path, sol: &FeedbackSolution) -> Result<()> {
    let g = &sol.grid;
    write_json(
        &dir.join(format!("feedback_k{}.json", sol.k)),
        &FeedbackHeader {
            k: sol.k,
            grid: g,
            penalty: &sol.penalty,
            params: &sol.params,
            price: &sol.price.0,
        },
    )?;
    let path = dir.join(format!("feedback_k{}.csv", sol.k));
    let mut c = Csv::create(&path, &["t_index", "x_index", "a_index", "V", "YX", "YA"])?;
    for n in 0..=g.nt {
        for l in 0..g.na {
            for j in 0..g.nx {
                let (v, yx, ya) = sol.at(n, j, l);
                c.int(n).int(j).int(l).num(v).num(yx).num(ya).end()?;
            }
        }
    }
    c.finish()
}

/// Riccati coefficients of V = ½p x² + q x a + ½r a² + s x + u a + w.
pub fn write_riccati_csv(path: &Path, sol: &RiccatiSolution) -> Result<()> {
    let mut c = Csv::create(path, &["t", "p", "q", "r", "s", "u", "w"])?;
    for (t, k) in sol.times.iter().zip(&sol.coefficients) {
        c.num(*t);
        for v in k {
            c.num(*v);
        }
        c.end()?;
    }
    c.finish()
}

/// Every agent's trajectory; refuses dumps above [`MAX_PATH_ROWS`].
pub fn write_paths_csv(path: &Path, run: &PopulationRun) -> Result<()> {
    let rows = run.agents.len() * run.times.len();
    if rows > MAX_PATH_ROWS {
        return Err(Error::TooManyRows {
            rows,
            limit: MAX_PATH_ROWS,
        });
    }
    let mut c = Csv::create(path, &["t", "agent", "k", "X", "A", "g", "Gamma", "alpha"])?;
    for (i, p) in run.agents.iter().enumerate() {
        for (n, t) in run.times.iter().enumerate() {
            c.num(*t).int(i).int(p.k).num(p.x[n]).num(p.a[n]);
            c.num(p.g[n]).num(p.gamma[n]).num(p.alpha[n]).end()?;
        }
    }
    c.finish()
}

/// `t, clearing` of a finite population.
pub fn write_clearing_csv(path: &Path, run: &PopulationRun) -> Result<()> {
    let mut c = Csv::create(path, &["t", "clearing"])?;
    for (t, r) in run.times.iter().zip(&run.clearing) {
        c.num(*t).num(*r).end()?;
    }
    c.finish()
}

/// Optimisation trace with one column per family parameter.
pub fn write_trace_csv(path: &Path, param_names: &[String], rows: &[TraceRow]) -> Result<()> {
    let mut header = vec!["iteration"];
    header.extend(param_names.iter().map(String::as_str));
    header.extend(["JP", "SE", "reservation_gap", "max_FOC_residual"]);
    let mut c = Csv::create(path, &header)?;
    for r in rows {
        c.int(r.iteration);
        for p in &r.params {
            c.num(*p);
        }
        c.num(r.jp)
            .num(r.se)
            .num(r.reservation_gap)
            .num(r.max_foc_residual)
            .end()?;
    }
    c.finish()
}

/// First-order-condition residuals and the adjoints they were built from.
pub fn write_foc_csv(path: &Path, foc: &FocReport) -> Result<()> {
    let header = [
        "t",
        "k",
        "residual_X",
        "residual_A",
        "se_X",
        "se_A",
        "Kx",
        "Kv",
        "Ka",
        "M",
    ];
    let mut c = Csv::create(path, &header)?;
    let adj = &foc.adjoints;
    for (n, t) in foc.times.iter().enumerate() {
        for k in 0..foc.residual_x.len() {
            c.num(*t)
                .int(k)
                .num(foc.residual_x[k][n])
                .num(foc.residual_a[k][n]);
            c.num(foc.se_x[k][n]).num(foc.se_a[k][n]);
            c.num(adj.kx[k][n])
                .num(adj.kv[k][n])
                .num(adj.ka[k][n])
                .num(adj.m[n])
                .end()?;
        }
    }
    c.finish()
}

/// Per-step adjoint drift means and standard errors.
pub fn write_drift_csv(path: &Path, reports: &[DriftReport]) -> Result<()> {
    let header = [
        "step",
        "k",
        "mean_dYX",
        "se_dYX",
        "mean_dYA_drift",
        "se_dYA_drift",
    ];
    let mut c = Csv::create(path, &header)?;
    for r in reports {
        for n in 0..r.mean_dyx.len() {
            c.int(n).int(r.k).num(r.mean_dyx[n]).num(r.se_dyx[n]);
            c.num(r.mean_dya[n]).num(r.se_dya[n]).end()?;
        }
    }
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt17(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt17(-2.5), "-2.5000000000000000e0");
        assert_eq!(fmt17(0.0), "0.0000000000000000e0");
        let x = 0.8333333333333334;
        assert_eq!(fmt17(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn trace_header_lists_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        let rows = vec![TraceRow {
            iteration: 0,
            params: vec![1.0, 0.5],
            jp: -0.75,
            se: 0.01,
            reservation_gap: 0.0,
            max_foc_residual: f64::NAN,
        }];
        write_trace_csv(&p, &["slope_0".into(), "slope_1".into()], &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,slope_0,slope_1,JP,SE,reservation_gap,max_FOC_residual"
        );
        assert_eq!(
            lines.next().unwrap(),
            "0,1.0000000000000000e0,5.0000000000000000e-1,-7.5000000000000000e-1,\
             1.0000000000000000e-2,0.0000000000000000e0,NaN"
        );
    }
}
