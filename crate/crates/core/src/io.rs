//! Plain-text field format and series directories.
//!
//! ```text
//! dim 2
//! shape 3 4
//! origin 0.0 -1.0
//! spacing 0.5 0.5
//! time 0.25          (or `time none`)
//! 0 0 1.5 B          (one row per node, row-major: indices, value, kind)
//! ...
//! ```
//!
//! Numbers are written in shortest round-trip form, so write -> read ->
//! write reproduces the bytes exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{DomainMask, Grid, NodeKind, ScalarField, TimeSeriesField};

pub const FIELD_EXTENSION: &str = "field";

fn join<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

/// Renders a field in the text format (LF line endings).
pub fn field_to_string(field: &ScalarField) -> String {
    let g = field.grid();
    let mut out = String::with_capacity(g.len() * (8 + 4 * g.dim()));
    let _ = writeln!(out, "dim {}", g.dim());
    let _ = writeln!(out, "shape {}", join(g.shape()));
    let _ = writeln!(out, "origin {}", join(g.origin()));
    let _ = writeln!(out, "spacing {}", join(g.spacing()));
    match field.time() {
        Some(t) => {
            let _ = writeln!(out, "time {t:?}");
        }
        None => out.push_str("time none\n"),
    }
    for i in 0..g.len() {
        for ix in g.unravel(i) {
            let _ = write!(out, "{ix} ");
        }
        let _ = writeln!(out, "{:?} {}", field.value(i), field.mask().kind(i).code());
    }
    out
}

pub fn write_field<W: Write>(mut w: W, field: &ScalarField) -> Result<()> {
    w.write_all(field_to_string(field).as_bytes())?;
    Ok(())
}

pub fn save_field(path: impl AsRef<Path>, field: &ScalarField) -> Result<()> {
    fs::write(path, field_to_string(field))?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<Option<String>> {
        match self.inner.next() {
            Some(l) => {
                self.line += 1;
                Ok(Some(l?))
            }
            None => Ok(None),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    /// Next line as `key v1 v2 ...`, checking the key.
    fn header(&mut self, key: &str) -> Result<Vec<String>> {
        let l = self
            .next()?
            .ok_or_else(|| self.err(format!("missing `{key}` header")))?;
        let mut it = l.split_whitespace();
        if it.next() != Some(key) {
            return Err(self.err(format!("expected `{key}` header")));
        }
        Ok(it.map(str::to_string).collect())
    }

    fn numbers<T: std::str::FromStr>(&self, toks: &[String], n: usize, what: &str) -> Result<Vec<T>> {
        if toks.len() != n {
            return Err(self.err(format!("{what}: expected {n} values, got {}", toks.len())));
        }
        toks.iter()
            .map(|t| {
                t.parse::<T>()
                    .map_err(|_| self.err(format!("{what}: bad number `{t}`")))
            })
            .collect()
    }
}

pub fn read_field<R: BufRead>(r: R) -> Result<ScalarField> {
    let mut lines = Lines {
        inner: r.lines(),
        line: 0,
    };
    let dim_tok = lines.header("dim")?;
    let dim: usize = lines.numbers(&dim_tok, 1, "dim")?[0];
    if dim == 0 {
        return Err(lines.err("dim must be positive"));
    }
    let t = lines.header("shape")?;
    let shape: Vec<usize> = lines.numbers(&t, dim, "shape")?;
    let t = lines.header("origin")?;
    let origin: Vec<f64> = lines.numbers(&t, dim, "origin")?;
    let t = lines.header("spacing")?;
    let spacing: Vec<f64> = lines.numbers(&t, dim, "spacing")?;
    let t = lines.header("time")?;
    let time = match t.as_slice() {
        [v] if v == "none" => None,
        _ => Some(lines.numbers::<f64>(&t, 1, "time")?[0]),
    };
    let grid = Grid::new(shape, origin, spacing).map_err(|e| lines.err(e.to_string()))?;
    let n = grid.len();
    let mut values = vec![0.0; n];
    let mut kinds = vec![NodeKind::Exterior; n];
    let mut seen = vec![false; n];
    while let Some(l) = lines.next()? {
        if l.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != dim + 2 {
            return Err(lines.err(format!("expected {} columns, got {}", dim + 2, toks.len())));
        }
        let idx = toks[..dim]
            .iter()
            .map(|t| t.parse::<usize>().map_err(|_| lines.err(format!("bad index `{t}`"))))
            .collect::<Result<Vec<usize>>>()?;
        if idx.iter().zip(grid.shape()).any(|(&i, &s)| i >= s) {
            return Err(lines.err("index outside the grid"));
        }
        let lin = grid.ravel(&idx);
        if seen[lin] {
            return Err(lines.err("duplicate node"));
        }
        seen[lin] = true;
        values[lin] = toks[dim]
            .parse()
            .map_err(|_| lines.err(format!("bad value `{}`", toks[dim])))?;
        kinds[lin] = NodeKind::from_code(toks[dim + 1])
            .ok_or_else(|| lines.err(format!("bad mask code `{}`", toks[dim + 1])))?;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Parse {
            line: lines.line,
            msg: format!("node {:?} missing", grid.unravel(missing)),
        });
    }
    let mask = DomainMask::from_kinds(&grid, kinds)?;
    ScalarField::new(Arc::new(grid), Arc::new(mask), values, time)
}

pub fn parse_field(text: &str) -> Result<ScalarField> {
    read_field(text.as_bytes())
}

pub fn load_field(path: impl AsRef<Path>) -> Result<ScalarField> {
    read_field(BufReader::new(fs::File::open(path)?))
}

/// File name of snapshot `k` in a series directory.
pub fn snapshot_name(k: usize) -> String {
    format!("u_{k:05}.{FIELD_EXTENSION}")
}

/// Writes one field file per snapshot, each tagged with its time.
pub fn save_series(dir: impl AsRef<Path>, series: &TimeSeriesField) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    series
        .snapshots()
        .iter()
        .zip(series.times())
        .enumerate()
        .map(|(k, (u, &t))| {
            let p = dir.join(snapshot_name(k));
            save_field(&p, &u.clone().with_time(Some(t)))?;
            Ok(p)
        })
        .collect()
}

/// Reads every `*.field` file in `dir`, ordered by time tag.
pub fn load_series(dir: impl AsRef<Path>) -> Result<TimeSeriesField> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == FIELD_EXTENSION))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no .{FIELD_EXTENSION} files in {}",
            dir.as_ref().display()
        )));
    }
    let mut fields = paths
        .iter()
        .map(|p| {
            load_field(p).map_err(|e| match e {
                Error::Parse { line, msg } => Error::Parse {
                    line,
                    msg: format!("{}: {msg}", p.display()),
                },
                e => e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = fields.iter().position(|f| f.time().is_none()) {
        return Err(Error::InvalidField(format!("{} has no time tag", paths[i].display())));
    }
    fields.sort_by(|a, b| a.time().unwrap().total_cmp(&b.time().unwrap()));
    // share one grid and mask across snapshots
    let (grid, mask) = (fields[0].grid_arc().clone(), fields[0].mask_arc().clone());
    let shared = fields
        .into_iter()
        .map(|f| {
            if *f.grid() != *grid || *f.mask() != *mask {
                return Err(Error::InvalidField("snapshots differ in grid or mask".into()));
            }
            ScalarField::new(grid.clone(), mask.clone(), f.values().to_vec(), f.time())
        })
        .collect::<Result<Vec<_>>>()?;
    TimeSeriesField::new(shared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(time: Option<f64>) -> ScalarField {
        let g = Arc::new(Grid::new(vec![5, 4], vec![-1.0, 0.1], vec![0.5, 0.3]).unwrap());
        let m = Arc::new(DomainMask::from_predicate(&g, |x| {
            x[0] * x[0] + (x[1] - 0.5).powi(2) < 1.1
        }));
        ScalarField::from_fn(g, m, time, |x| (x[0] * 3.1).sin() + x[1] / 7.0).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for t in [Some(0.1), None, Some(-2.5e-9)] {
            let f = sample(t);
            let a = field_to_string(&f);
            let back = parse_field(&a).unwrap();
            assert_eq!(back, f);
            assert_eq!(field_to_string(&back), a);
            assert!(!a.contains('\r'));
        }
    }

    #[test]
    fn header_layout() {
        let s = field_to_string(&sample(Some(0.25)));
        let head: Vec<&str> = s.lines().take(6).collect();
        assert_eq!(
            head,
            [
                "dim 2",
                "shape 5 4",
                "origin -1.0 0.1",
                "spacing 0.5 0.3",
                "time 0.25",
                "0 0 0.0 E"
            ]
        );
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let good = field_to_string(&sample(None));
        let bad = good.replacen("time none", "tim none", 1);
        assert!(matches!(parse_field(&bad), Err(Error::Parse { line: 5, .. })));
        let mut lines: Vec<&str> = good.lines().collect();
        lines[7] = "0 2 1.0 X";
        assert!(matches!(
            parse_field(&lines.join("\n")),
            Err(Error::Parse { line: 8, .. })
        ));
        lines.truncate(7);
        assert!(matches!(parse_field(&lines.join("\n")), Err(Error::Parse { .. })));
        assert!(parse_field("dim 1\nshape 2\norigin 0\nspacing 1\ntime none\n0 1 I\n1 1 I\n").is_err());
    }

    #[test]
    fn series_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Arc::new(Grid::spanning(&[0.0], &[1.0], &[11]).unwrap());
        let m = Arc::new(DomainMask::full(&g));
        let ts = [0.0, 0.1, 0.3, 0.7];
        let s = TimeSeriesField::from_fn(g, m, &ts, |x, t| x[0] * (-t).exp()).unwrap();
        save_series(dir.path(), &s).unwrap();
        let back = load_series(dir.path()).unwrap();
        assert_eq!(back.times(), &ts);
        for (a, b) in back.snapshots().iter().zip(s.snapshots()) {
            assert_eq!(a.values(), b.values());
        }
        let again = tempfile::tempdir().unwrap();
        save_series(again.path(), &back).unwrap();
        for k in 0..ts.len() {
            let n = snapshot_name(k);
            assert_eq!(
                fs::read(dir.path().join(&n)).unwrap(),
                fs::read(again.path().join(&n)).unwrap()
            );
        }
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 12), t in proptest::option::of(-10.0f64..10.0)) {
            let g = Arc::new(Grid::new(vec![3, 4], vec![0.0, 0.0], vec![0.1, 0.2]).unwrap());
            let m = Arc::new(DomainMask::full(&g));
            let f = ScalarField::new(g, m, vals, t).unwrap();
            let s = field_to_string(&f);
            let back = parse_field(&s).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(field_to_string(&back), s);
        }
    }
}
