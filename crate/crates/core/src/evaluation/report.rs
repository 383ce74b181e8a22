use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{cumulative_error_curve, file_err, threshold_accuracy, ErrorAxis, EvalError, PoseError, ThresholdBin};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub specific_blocks: usize,
    pub multiscale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub queries: usize,
    /// Percentages, one per bin.
    pub accuracy: Vec<f64>,
    pub translation_curve: Vec<(f64, f64)>,
    pub rotation_curve: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub bins: Vec<ThresholdBin>,
    pub conditions: Vec<ConditionResult>,
}

impl EvalReport {
    /// One result per named group of errors.
    pub fn from_errors(
        meta: RunMeta,
        bins: &[ThresholdBin],
        groups: &[(String, Vec<PoseError>)],
    ) -> Result<Self, EvalError> {
        let conditions = groups
            .iter()
            .map(|(name, errs)| {
                Ok(ConditionResult {
                    condition: name.clone(),
                    queries: errs.len(),
                    accuracy: threshold_accuracy(errs, bins)?,
                    translation_curve: cumulative_error_curve(errs, ErrorAxis::Translation)?,
                    rotation_curve: cumulative_error_curve(errs, ErrorAxis::Rotation)?,
                })
            })
            .collect::<Result<_, EvalError>>()?;
        Ok(Self {
            meta,
            bins: bins.to_vec(),
            conditions,
        })
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.condition == name)
    }
}

const CSV_HEADER: &str = "run_id,condition,bin_t,bin_r,accuracy_pct";

fn csv_text(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let m = &r.meta;
        writeln!(
            out,
            "# run_id={} config_hash={} seed={} N_S={} multiscale={}",
            m.run_id, m.config_hash, m.seed, m.specific_blocks, m.multiscale
        )
        .expect("write to string");
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for c in &r.conditions {
            for (b, a) in r.bins.iter().zip(&c.accuracy) {
                writeln!(out, "{},{},{},{},{:.4}", r.meta.run_id, c.condition, b.t_m, b.r_deg, a).expect("write to string");
            }
        }
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Step plot of a cumulative error curve.
pub fn render_curve_svg(title: &str, axis: ErrorAxis, curve: &[(f64, f64)], config_hash: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    let x_max = curve.last().map_or(1.0, |p| p.0).max(1e-9);
    let sx = |x: f64| M + (W - 2.0 * M) * x / x_max;
    let sy = |y: f64| H - M - (H - 2.0 * M) * y;
    let mut points = format!("{:.3},{:.3}", sx(0.0), sy(0.0));
    let mut prev = 0.0;
    for &(x, f) in curve {
        write!(points, " {:.3},{:.3} {:.3},{:.3}", sx(x), sy(prev), sx(x), sy(f)).expect("write to string");
        prev = f;
    }
    let unit = match axis {
        ErrorAxis::Translation => "translation error (m)",
        ErrorAxis::Rotation => "rotation error (deg)",
    };
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .expect("write to string");
    writeln!(s, "<desc>config_hash={}</desc>", xml_escape(config_hash)).expect("write to string");
    writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#).expect("write to string");
    writeln!(
        s,
        r#"<path d="M{M},{} L{M},{} L{},{}" stroke="black" fill="none"/>"#,
        M,
        H - M,
        W - M,
        H - M
    )
    .expect("write to string");
    writeln!(s, r#"<polyline points="{points}" stroke="steelblue" stroke-width="2" fill="none"/>"#)
        .expect("write to string");
    writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    )
    .expect("write to string");
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{} (max {:.3})</text>"#,
        W / 2.0,
        H - 12.0,
        unit,
        x_max
    )
    .expect("write to string");
    writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})">fraction of queries</text>"#,
        H / 2.0,
        H / 2.0
    )
    .expect("write to string");
    s.push_str("</svg>\n");
    s
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `report.csv`, `report.json` and one SVG per curve into `out_dir`;
/// returns the written paths.
pub fn emit_report(reports: &[EvalReport], out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty("emit_report"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| file_err(out_dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: String, body: String| -> Result<(), EvalError> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| file_err(&p, e))?;
        written.push(p);
        Ok(())
    };
    write("report.csv".into(), csv_text(reports))?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| file_err(out_dir, e))?;
    write("report.json".into(), json + "\n")?;
    for r in reports {
        for c in &r.conditions {
            for (axis, curve) in [
                (ErrorAxis::Translation, &c.translation_curve),
                (ErrorAxis::Rotation, &c.rotation_curve),
            ] {
                let title = format!("{} / {}", r.meta.run_id, c.condition);
                write(
                    format!("{}-{}-{}.svg", slug(&r.meta.run_id), slug(&c.condition), axis.as_str()),
                    render_curve_svg(&title, axis, curve, &r.meta.config_hash),
                )?;
            }
        }
    }
    Ok(written)
}
