use std::io::Write;

use crate::CliError;

/// Crate version plus the git description baked in at build time, if any.
pub fn version_string() -> String {
    match option_env!("LGSS_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Shortest round-trip representation; exponent form outside `[1e-4, 1e6)`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e6).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// A CSV payload: `#` comment lines, then header, then rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|s| s.to_string()).collect(), ..Self::default() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Provenance line first, then notes, header and rows.
    pub fn to_csv(&self, provenance: &str) -> Result<Vec<u8>, CliError> {
        let mut out = Vec::new();
        writeln!(out, "# {provenance}")?;
        for n in &self.notes {
            writeln!(out, "# {n}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.into_error()))
    }
}

pub fn provenance(experiment: &str, config_hash: &str, seed: u64) -> String {
    format!("lgss {} experiment={experiment} config_sha256={config_hash} seed={seed}", version_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["a", "b"]);
        t.notes.push("note".into());
        t.push(vec!["1".into(), "x,y".into()]);
        let s = String::from_utf8(t.to_csv("prov").unwrap()).unwrap();
        assert_eq!(s, "# prov\n# note\na,b\n1,\"x,y\"\n");
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.0, 1.5, -434.5412, 1e-5, 2.5e9, -3.25e-12, f64::NAN] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert!(back == v || (v.is_nan() && back.is_nan()), "{s}");
        }
        assert_eq!(fmt_f64(1e-5), "1e-5");
        assert_eq!(fmt_f64(0.25), "0.25");
    }
}
