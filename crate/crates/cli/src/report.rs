//! Static SVG/Markdown report rendered from a run directory's artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hemoforge_core::manifest::Manifest;
use hemoforge_core::metrics::{ConfusionMatrix, MetricReport};
use hemoforge_core::registry::{ClassRegistry, Lineage};
use hemoforge_core::Result;

const CELL: usize = 36;
const MARGIN: usize = 70;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of samples per class.
pub fn render_histogram(counts: &[(String, usize)], title: &str) -> String {
    let bar_w = 40;
    let height = 260.0;
    let max = counts.iter().map(|c| c.1).max().unwrap_or(0).max(1) as f64;
    let width = MARGIN + counts.len() * bar_w + 20;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" font-family="sans-serif" font-size="11">
<text x="{MARGIN}" y="20" font-size="14">{t}</text>
"#,
        h = height as usize + 80,
        t = escape(title)
    );
    let base = height + 40.0;
    for (i, (label, n)) in counts.iter().enumerate() {
        let x = MARGIN + i * bar_w;
        let h = *n as f64 / max * height;
        let _ = writeln!(
            svg,
            r##"<rect x="{x}" y="{y:.1}" width="{w}" height="{h:.1}" fill="#7a4b94"/>
<text class="count" data-class="{l}" x="{cx}" y="{ty:.1}" text-anchor="middle">{n}</text>
<text x="{cx}" y="{ly:.1}" text-anchor="middle">{l}</text>"##,
            y = base - h,
            w = bar_w - 6,
            cx = x + (bar_w - 6) / 2,
            ty = base - h - 4.0,
            ly = base + 14.0,
            l = escape(label),
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{x2}" y2="{base}" stroke="black"/>
</svg>"#,
        x2 = MARGIN + counts.len() * bar_w
    );
    svg
}

/// Maximal runs of consecutive indices.
fn contiguous_runs(indices: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &i in indices {
        match runs.last_mut() {
            Some((_, end)) if *end + 1 == i => *end = i,
            _ => runs.push((i, i)),
        }
    }
    runs
}

/// Heatmap with the count printed in every cell. `lineages` draws a dashed
/// box around each diagonal block of same-lineage classes.
pub fn render_heatmap(cm: &ConfusionMatrix, title: &str, lineages: Option<&[(Lineage, Vec<usize>)]>) -> String {
    let n = cm.num_classes();
    let size = MARGIN + n * CELL + 20;
    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{h}" font-family="sans-serif" font-size="10">
<text x="{MARGIN}" y="18" font-size="14">{t}</text>
<text x="{MARGIN}" y="{yl}">predicted →</text>
<text x="12" y="{MARGIN}" transform="rotate(90 12 {MARGIN})">true →</text>
"#,
        h = size + 20,
        t = escape(title),
        yl = MARGIN - 24,
    );
    for (j, label) in cm.labels.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" text-anchor="middle">{l}</text>
<text x="{xr}" y="{yr}" text-anchor="end">{l}</text>"#,
            x = MARGIN + j * CELL + CELL / 2,
            y = MARGIN - 6,
            xr = MARGIN - 6,
            yr = MARGIN + j * CELL + CELL / 2 + 4,
            l = escape(label)
        );
    }
    for (i, row) in cm.counts.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 - 200.0 * (v as f64 / max)).round() as u8;
            let ink = if shade < 140 { "white" } else { "black" };
            let _ = writeln!(
                svg,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="#ddd"/>
<text class="cell" data-row="{i}" data-col="{j}" x="{cx}" y="{cy}" text-anchor="middle" fill="{ink}">{v}</text>"##,
                x = MARGIN + j * CELL,
                y = MARGIN + i * CELL,
                cx = MARGIN + j * CELL + CELL / 2,
                cy = MARGIN + i * CELL + CELL / 2 + 4,
            );
        }
    }
    for (lineage, members) in lineages.unwrap_or(&[]) {
        if *lineage == Lineage::Unassigned {
            continue;
        }
        for (a, b) in contiguous_runs(members) {
            let _ = writeln!(
                svg,
                r#"<rect class="lineage" data-lineage="{lineage}" x="{x}" y="{x}" width="{w}" height="{w}" fill="none" stroke="red" stroke-width="2" stroke-dasharray="5,3"/>"#,
                x = MARGIN + a * CELL,
                w = (b - a + 1) * CELL,
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn summary_page(report: &MetricReport) -> String {
    let mut out = String::from("# Out-of-fold metrics\n\n| metric | value |\n|---|---|\n");
    for (k, v) in [
        ("macro F1", report.macro_f1),
        ("balanced accuracy", report.balanced_accuracy),
        ("macro precision", report.macro_precision),
        ("macro sensitivity", report.macro_sensitivity),
        ("macro specificity", report.macro_specificity),
        ("accuracy", report.accuracy),
    ] {
        let _ = writeln!(out, "| {k} | {v:.4} |");
    }
    let _ = writeln!(out, "\nSamples: {}", report.samples);
    if !report.excluded.is_empty() {
        let _ = writeln!(out, "Excluded (no support): {}", report.excluded.join(", "));
    }
    out.push_str("\n| class | precision | recall | F1 | specificity | support |\n|---|---|---|---|---|---|\n");
    for c in report.per_class.iter().filter(|c| c.included) {
        let _ = writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
            c.label, c.precision, c.recall, c.f1, c.specificity, c.support
        );
    }
    out
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ReportBundle {
    pub written: Vec<PathBuf>,
    pub gaps: Vec<String>,
}

/// Renders whatever artifacts `run_dir` holds into `run_dir/report/`.
/// Missing inputs are listed in `report/index.md` instead of failing.
pub fn emit_report(run_dir: &Path, manifest: Option<&Manifest>) -> Result<ReportBundle> {
    let out_dir = run_dir.join("report");
    std::fs::create_dir_all(&out_dir)?;
    let registry = ClassRegistry::builtin();
    let mut bundle = ReportBundle::default();
    let write = |name: &str, text: String, bundle: &mut ReportBundle| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, text)?;
        bundle.written.push(p);
        Ok(())
    };

    match manifest {
        Some(m) => {
            let counts = m.class_counts();
            let rows: Vec<(String, usize)> = registry
                .codes()
                .zip(counts)
                .map(|(c, n)| (c.to_string(), n))
                .collect();
            write("class_histogram.svg", render_histogram(&rows, "Samples per class"), &mut bundle)?;
        }
        None => bundle.gaps.push("class histogram: no manifest".into()),
    }

    let read = |name: &str| std::fs::read_to_string(run_dir.join(name)).ok();
    match read("oof_confusion.csv") {
        Some(text) => {
            let cm = ConfusionMatrix::parse_csv(&text)?;
            write(
                "oof_confusion.svg",
                render_heatmap(&cm, "Out-of-fold confusion matrix", None),
                &mut bundle,
            )?;
        }
        None => bundle.gaps.push("OOF confusion heatmap: oof_confusion.csv missing".into()),
    }
    match read("misclassification.csv") {
        Some(text) => {
            let cm = ConfusionMatrix::parse_csv(&text)?;
            let groups = registry.lineage_groups();
            write(
                "misclassification.svg",
                render_heatmap(&cm, "High-confidence label issues (given × suggested)", Some(&groups)),
                &mut bundle,
            )?;
        }
        None => bundle
            .gaps
            .push("misclassification heatmap: misclassification.csv missing".into()),
    }
    match read("metrics.txt") {
        Some(text) => write("summary.md", summary_page(&MetricReport::parse_text(&text)?), &mut bundle)?,
        None => bundle.gaps.push("metrics summary: metrics.txt missing".into()),
    }

    let mut index = String::from("# Report\n\n");
    for p in &bundle.written {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let _ = writeln!(index, "- [{name}]({name})");
    }
    if !bundle.gaps.is_empty() {
        index.push_str("\n## Missing\n\n");
        for g in &bundle.gaps {
            let _ = writeln!(index, "- {g}");
        }
    }
    write("index.md", index, &mut bundle)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_cells_carry_matrix_values() {
        let cm = ConfusionMatrix {
            labels: vec!["A".into(), "B".into()],
            counts: vec![vec![5, 1], vec![0, 12]],
        };
        let svg = render_heatmap(&cm, "t", None);
        assert!(svg.contains(r#"data-row="0" data-col="1""#));
        assert!(svg.contains(">12</text>"));
    }

    #[test]
    fn runs_split_on_gaps() {
        assert_eq!(contiguous_runs(&[4, 5, 6, 8, 9, 12]), vec![(4, 6), (8, 9), (12, 12)]);
    }

    #[test]
    fn lineage_boxes_drawn() {
        let reg = ClassRegistry::builtin();
        let cm = ConfusionMatrix::for_registry(&reg);
        let groups = reg.lineage_groups();
        let svg = render_heatmap(&cm, "t", Some(&groups));
        assert!(svg.contains(r#"data-lineage="granulopoiesis""#));
        assert!(!svg.contains(r#"data-lineage="unassigned""#));
    }

    #[test]
    fn empty_run_dir_reports_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let b = emit_report(dir.path(), None).unwrap();
        assert_eq!(b.gaps.len(), 4);
        assert!(dir.path().join("report/index.md").exists());
    }
}
