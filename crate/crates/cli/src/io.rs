use std::path::Path;

use lgss_core::model::{ExplicitModel, Trajectory};
use nalgebra::DMatrix;

use crate::output::{fmt_f64, Table};
use crate::CliError;

pub fn read_model(path: &Path) -> Result<ExplicitModel, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let m: ExplicitModel =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    m.validate()?;
    Ok(m)
}

pub fn write_model(path: &Path, m: &ExplicitModel) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(m).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Columns `t, u1.., y1..` and, when present, the true `x1..`.
pub fn trajectory_table(tr: &Trajectory) -> Table {
    let mut cols = vec!["t".to_string()];
    let series: Vec<(&str, &DMatrix<f64>)> =
        [("u", Some(&tr.u)), ("y", Some(&tr.y)), ("x", tr.x.as_ref())].into_iter().filter_map(|(n, m)| Some((n, m?))).collect();
    for (name, m) in &series {
        cols.extend((1..=m.nrows()).map(|i| format!("{name}{i}")));
    }
    let mut t = Table { columns: cols, ..Table::default() };
    for k in 0..tr.horizon() {
        let mut row = vec![(k + 1).to_string()];
        for (_, m) in &series {
            row.extend(m.column(k).iter().map(|v| fmt_f64(*v)));
        }
        t.push(row);
    }
    t
}

fn numbered(name: &str, prefix: char) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?;
    rest.parse::<usize>().ok().filter(|i| *i >= 1)
}

/// Reads `u1.., y1..` columns from a CSV with `#` comments; other columns are ignored.
pub fn read_data(path: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>), CliError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    let pick = |prefix: char| -> Result<Vec<usize>, CliError> {
        let mut cols: Vec<(usize, usize)> =
            header.iter().enumerate().filter_map(|(j, h)| numbered(h, prefix).map(|i| (i, j))).collect();
        cols.sort();
        if cols.iter().enumerate().any(|(k, (i, _))| *i != k + 1) {
            return Err(CliError::Config(format!("{}: {prefix} columns must be numbered 1..n", path.display())));
        }
        Ok(cols.into_iter().map(|(_, j)| j).collect())
    };
    let (uc, yc) = (pick('u')?, pick('y')?);
    if yc.is_empty() {
        return Err(CliError::Config(format!("{}: no y1.. columns", path.display())));
    }
    let (mut u, mut y) = (Vec::new(), Vec::new());
    let mut t = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let get = |j: usize| -> Result<f64, CliError> {
            rec[j].parse().map_err(|_| CliError::Config(format!("{}: bad number `{}`", path.display(), &rec[j])))
        };
        for &j in &uc {
            u.push(get(j)?);
        }
        for &j in &yc {
            y.push(get(j)?);
        }
        t += 1;
    }
    if t == 0 {
        return Err(CliError::Config(format!("{}: no data rows", path.display())));
    }
    Ok((DMatrix::from_vec(uc.len(), t, u), DMatrix::from_vec(yc.len(), t, y)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_round_trips_through_csv() {
        let tr = Trajectory {
            u: DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]),
            y: DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 1e-7, 2.0, -3.0]),
            x: None,
            w: None,
            v: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, trajectory_table(&tr).to_csv("test").unwrap()).unwrap();
        let (u, y) = read_data(&p).unwrap();
        assert_eq!(u, tr.u);
        assert_eq!(y, tr.y);
    }

    #[test]
    fn column_names() {
        assert_eq!(numbered("y12", 'y'), Some(12));
        assert_eq!(numbered("y0", 'y'), None);
        assert_eq!(numbered("yy", 'y'), None);
        assert_eq!(numbered("u1", 'y'), None);
    }
}
