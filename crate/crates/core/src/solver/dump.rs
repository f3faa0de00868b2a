use std::fmt::Write;

use nalgebra::{DMatrix, DVector};

use super::ProgramInstance;

fn matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

fn vector(out: &mut String, name: &str, v: &DVector<f64>) {
    let _ = writeln!(out, "{name} {}", v.len());
    let line: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
    let _ = writeln!(out, "{}", line.join(" "));
}

/// Plain-text dump with one section per matrix, for cross-checking with
/// external tools. Infinite bounds print as `inf` / `-inf`.
pub fn dump_instance(inst: &ProgramInstance) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# min v'Pv + 2q'v + constant  s.t.  lo <= Av <= hi,  v'P_i v + 2q_i'v + r_i <= 0");
    matrix(&mut out, "P", &inst.p);
    vector(&mut out, "q", &inst.q);
    let _ = writeln!(out, "constant {:.17e}", inst.constant);
    matrix(&mut out, "A", &inst.a);
    vector(&mut out, "lo", &inst.lo);
    vector(&mut out, "hi", &inst.hi);
    let _ = writeln!(out, "quadratic {}", inst.quadratic.len());
    for (i, qc) in inst.quadratic.iter().enumerate() {
        matrix(&mut out, &format!("P_{i}"), &qc.p);
        vector(&mut out, &format!("q_{i}"), &qc.q);
        let _ = writeln!(out, "r_{i} {:.17e}", qc.r);
    }
    out
}
