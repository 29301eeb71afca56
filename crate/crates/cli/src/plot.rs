//! CSV plot data derived from a report. Column order is fixed; sections
//! missing from the report give header-only files.

use std::path::{Path, PathBuf};

use csv::{Terminator, WriterBuilder};

use crate::report::Report;
use crate::CliError;

pub const RESIDUAL_VS_TIME: &str = "residual_vs_time.csv";
pub const ETA_TABLE: &str = "eta_table.csv";
pub const DETERMINANT: &str = "determinant.csv";
pub const FG_FITS: &str = "fg_fits.csv";
pub const CURVATURES: &str = "curvatures.csv";

pub const RESIDUAL_HEADER: [&str; 3] = ["t", "invariance_residual", "representation_residual"];
pub const ETA_HEADER: [&str; 6] = ["s", "t", "eta", "count", "spread", "affine_eta"];
pub const DETERMINANT_HEADER: [&str; 6] = ["s", "t", "d", "d_normalized", "noise", "significant"];
pub const FG_HEADER: [&str; 5] = ["source", "s", "f", "g", "count"];
pub const CURVATURE_HEADER: [&str; 8] = [
    "level",
    "source",
    "surface_kind",
    "cluster_value",
    "multiplicity",
    "m_mean",
    "m_rel_std",
    "n_points",
];

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

type Rows = Vec<Vec<String>>;

fn residual_rows(r: &Report) -> Rows {
    let Some(inv) = &r.invariance else {
        return Vec::new();
    };
    let rep = r.classification.as_ref().map(|c| &c.representation_residual);
    inv.times
        .iter()
        .zip(&inv.residual)
        .enumerate()
        .map(|(k, (&t, &res))| vec![num(t), num(res), opt(rep.and_then(|v| v.get(k).copied()))])
        .collect()
}

fn eta_rows(r: &Report) -> Rows {
    let Some(inv) = &r.invariance else {
        return Vec::new();
    };
    let affine = r.classification.as_ref().and_then(|c| c.affine.as_ref());
    let mut rows = Vec::new();
    for (k, &t) in inv.times.iter().enumerate() {
        for (b, &s) in inv.s_bins.iter().enumerate() {
            let fit = affine.map(|a| a.a[k] * s + a.b[k]);
            rows.push(vec![
                num(s),
                num(t),
                opt(inv.eta[k][b]),
                inv.counts[b].to_string(),
                num(inv.spread[k][b]),
                opt(fit),
            ]);
        }
    }
    rows
}

fn determinant_rows(r: &Report) -> Rows {
    let Some(d) = r.invariance.as_ref().and_then(|i| i.determinant.as_ref()) else {
        return Vec::new();
    };
    let mut rows = Vec::new();
    for (k, &t) in d.times.iter().enumerate() {
        for (b, &s) in d.s.iter().enumerate() {
            if d.d[k][b].is_none() {
                continue;
            }
            rows.push(vec![
                num(s),
                num(t),
                opt(d.d[k][b]),
                opt(d.normalized[k][b]),
                opt(d.noise[k][b]),
                u8::from(d.significant[k][b]).to_string(),
            ]);
        }
    }
    rows
}

fn fg_rows(r: &Report) -> Rows {
    let mut rows = Vec::new();
    if let Some(iso) = &r.isoparametric {
        for (j, &s) in iso.f.knots.iter().enumerate() {
            rows.push(vec![
                "fit".into(),
                num(s),
                num(iso.f.values[j]),
                num(iso.g.eval(s)),
                iso.f.counts[j].to_string(),
            ]);
        }
    }
    if let Some(c) = &r.classification {
        for e in &c.level_estimates {
            rows.push(vec![
                "split".into(),
                num(e.s),
                num(e.f),
                num(e.g),
                e.n_times.to_string(),
            ]);
        }
    }
    rows
}

fn curvature_rows(r: &Report) -> Rows {
    let mut rows = Vec::new();
    let Some(iso) = &r.isoparametric else {
        return rows;
    };
    for s in &iso.surfaces {
        let base = [num(s.level), "surface".into(), s.kind.label()];
        if s.clusters.is_empty() {
            let mut row = base.to_vec();
            row.extend([
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                s.n_samples.to_string(),
            ]);
            rows.push(row);
        }
        for c in &s.clusters {
            let mut row = base.to_vec();
            row.extend([
                num(c.value),
                c.multiplicity.to_string(),
                String::new(),
                String::new(),
                s.n_samples.to_string(),
            ]);
            rows.push(row);
        }
    }
    for g in &iso.levels {
        let tail = |v: String, m: String| {
            vec![
                num(g.level),
                "level_geometry".into(),
                String::new(),
                v,
                m,
                num(g.m_mean),
                opt(g.m_rel_std),
                g.n_points.to_string(),
            ]
        };
        if g.clusters.is_empty() {
            rows.push(tail(String::new(), String::new()));
        }
        for c in &g.clusters {
            rows.push(tail(num(c.value), c.multiplicity.to_string()));
        }
    }
    rows
}

fn write_csv(path: &Path, header: &[&str], rows: &Rows) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::io("plot", format!("{}: {e}", path.display()));
    let mut w = WriterBuilder::new()
        .terminator(Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io("plot", e))
}

/// Writes the five CSV files into `dir` and returns their paths.
pub fn emit_plot_data(report: &Report, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io("plot", format!("{}: {e}", dir.display())))?;
    let files: [(&str, &[&str], Rows); 5] = [
        (RESIDUAL_VS_TIME, &RESIDUAL_HEADER, residual_rows(report)),
        (ETA_TABLE, &ETA_HEADER, eta_rows(report)),
        (DETERMINANT, &DETERMINANT_HEADER, determinant_rows(report)),
        (FG_FITS, &FG_HEADER, fg_rows(report)),
        (CURVATURES, &CURVATURE_HEADER, curvature_rows(report)),
    ];
    files
        .into_iter()
        .map(|(name, header, rows)| {
            let p = dir.join(name);
            write_csv(&p, header, &rows)?;
            Ok(p)
        })
        .collect()
}
