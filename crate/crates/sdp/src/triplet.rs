//! Sparse-triplet text format.
//!
//! One record per line, indices zero-based, matrices given by their upper triangle:
//!
//! ```text
//! n <nvars>
//! b <block> <dim>
//! c <var> <value>                       objective coefficient
//! k <block> <row> <col> <value>         constant term
//! f <block> <var> <row> <col> <value>   coefficient of variable `var`
//! e <eqrow> <var> <value>               equality row entry
//! r <eqrow> <value>                     equality right-hand side
//! ```
//!
//! Lines starting with `#` and blank lines are ignored.

use std::io::{BufRead, Write};

use crate::{ConicProgram, SdpError};

pub fn write_program<W: Write>(p: &ConicProgram, mut out: W) -> Result<(), SdpError> {
    writeln!(out, "# lgss-sdp triplet v1")?;
    writeln!(out, "n {}", p.n_vars)?;
    for (k, c) in p.objective.iter().enumerate() {
        if *c != 0.0 {
            writeln!(out, "c {k} {c:e}")?;
        }
    }
    for (bi, b) in p.blocks.iter().enumerate() {
        writeln!(out, "b {bi} {}", b.dim)?;
        for &(i, j, v) in &b.constant.entries {
            writeln!(out, "k {bi} {i} {j} {v:e}")?;
        }
        for (var, f) in &b.coeffs {
            for &(i, j, v) in &f.entries {
                writeln!(out, "f {bi} {var} {i} {j} {v:e}")?;
            }
        }
    }
    for (r, row) in p.eq_rows.iter().enumerate() {
        for &(k, v) in row {
            writeln!(out, "e {r} {k} {v:e}")?;
        }
        writeln!(out, "r {r} {:e}", p.eq_rhs[r])?;
    }
    Ok(())
}

pub fn to_string(p: &ConicProgram) -> String {
    let mut buf = Vec::new();
    write_program(p, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("ascii output")
}

pub fn read_program<R: BufRead>(input: R) -> Result<ConicProgram, SdpError> {
    let mut p: Option<ConicProgram> = None;
    for (ln, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = ln + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |msg: &str| SdpError::Parse { line: line_no, msg: msg.to_string() };
        let mut it = t.split_whitespace();
        let tag = it.next().unwrap_or_default();
        let fields: Vec<&str> = it.collect();
        let idx = |i: usize| -> Result<usize, SdpError> {
            fields.get(i).ok_or_else(|| err("missing field"))?.parse().map_err(|_| err("bad index"))
        };
        let val = |i: usize| -> Result<f64, SdpError> {
            fields.get(i).ok_or_else(|| err("missing field"))?.parse().map_err(|_| err("bad number"))
        };
        let arity = match tag {
            "n" => 1,
            "b" | "c" => 2,
            "e" => 3,
            "r" => 2,
            "k" => 4,
            "f" => 5,
            _ => return Err(err(&format!("unknown record '{tag}'"))),
        };
        if fields.len() != arity {
            return Err(err(&format!("record '{tag}' expects {arity} fields")));
        }
        if tag == "n" {
            if p.is_some() {
                return Err(err("duplicate 'n' record"));
            }
            p = Some(ConicProgram::new(idx(0)?));
            continue;
        }
        let prog = p.as_mut().ok_or_else(|| err("'n' record must come first"))?;
        match tag {
            "b" => {
                let (b, dim) = (idx(0)?, idx(1)?);
                if b != prog.blocks.len() {
                    return Err(err("blocks must be declared in order"));
                }
                prog.add_block(dim);
            }
            "c" => {
                let k = idx(0)?;
                if k >= prog.n_vars {
                    return Err(err("variable index out of range"));
                }
                prog.objective[k] += val(1)?;
            }
            "k" | "f" => {
                let b = idx(0)?;
                if b >= prog.blocks.len() {
                    return Err(err("undeclared block"));
                }
                if tag == "k" {
                    prog.add_constant(b, idx(1)?, idx(2)?, val(3)?);
                } else {
                    prog.add_coeff(b, idx(1)?, idx(2)?, idx(3)?, val(4)?);
                }
            }
            "e" | "r" => {
                let r = idx(0)?;
                while prog.eq_rows.len() <= r {
                    prog.eq_rows.push(Vec::new());
                    prog.eq_rhs.push(0.0);
                }
                if tag == "e" {
                    prog.eq_rows[r].push((idx(1)?, val(2)?));
                } else {
                    prog.eq_rhs[r] = val(1)?;
                }
            }
            _ => unreachable!(),
        }
    }
    let p = p.ok_or(SdpError::Parse { line: 0, msg: "empty input".into() })?;
    p.validate()?;
    Ok(p)
}

pub fn from_str(s: &str) -> Result<ConicProgram, SdpError> {
    read_program(s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rejects_unknown_records_and_missing_header() {
        assert!(from_str("x 1 2").is_err());
        assert!(from_str("b 0 2").is_err());
        assert!(from_str("n 1\nb 0 2\nf 0 1 0 0 1.0").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let p = from_str("# hi\n\nn 1\nc 0 1.5\nb 0 1\nk 0 0 0 -1\nf 0 0 0 0 1\n").unwrap();
        assert_eq!(p.objective, vec![1.5]);
        assert_eq!(p.blocks[0].constant.entries, vec![(0, 0, -1.0)]);
    }
}
