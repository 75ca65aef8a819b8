//! Canonical JSON and CSV output.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::constants::ConstantsReport;
use crate::dyadic::SurgeryEstimate;
use crate::error::Result;

/// Pretty JSON with sorted object keys and a trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key, so a round trip through
    // `Value` sorts every object
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        format!("{x}").to_lowercase()
    }
}

pub const CONSTANTS_HEADER: &str =
    "grid,a2,a2_dual,testing,testing_dual,pivotal,pivotal_dual,norm,ratio,common_atom";

fn constants_row(label: &str, r: &ConstantsReport) -> String {
    format!(
        "{label},{},{},{},{},{},{},{},{},{}",
        num(r.a2),
        num(r.a2_dual),
        num(r.testing),
        num(r.testing_dual),
        num(r.pivotal),
        num(r.pivotal_dual),
        num(r.norm),
        num(r.ratio),
        r.common_atom
    )
}

/// One row per grid plus a `pooled` row.
pub fn constants_csv(per_grid: &[ConstantsReport], pooled: &ConstantsReport) -> String {
    let mut s = String::from(CONSTANTS_HEADER);
    s.push('\n');
    for (g, r) in per_grid.iter().enumerate() {
        writeln!(s, "{}", constants_row(&g.to_string(), r)).unwrap();
    }
    writeln!(s, "{}", constants_row("pooled", pooled)).unwrap();
    s
}

/// Columns `tau,estimate,stderr,analytic_1d`; the last is blank when absent.
pub fn surgery_csv(rows: &[SurgeryEstimate], analytic: impl Fn(f64) -> Option<f64>) -> String {
    let mut s = String::from("tau,estimate,stderr,analytic_1d\n");
    for r in rows {
        let a = analytic(r.tau).map(num).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{a}",
            num(r.tau),
            num(r.estimate),
            num(r.stderr)
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted() {
        #[derive(Serialize)]
        struct T {
            zeta: u8,
            alpha: u8,
        }
        let s = canonical_json(&T { zeta: 1, alpha: 2 }).unwrap();
        assert!(s.find("alpha").unwrap() < s.find("zeta").unwrap());
    }

    #[test]
    fn surgery_blank_column() {
        let rows = [SurgeryEstimate {
            tau: 0.1,
            estimate: 0.2,
            stderr: 0.01,
        }];
        assert_eq!(
            surgery_csv(&rows, |_| None),
            "tau,estimate,stderr,analytic_1d\n0.1,0.2,0.01,\n"
        );
    }
}
