//! Plain-text tables for `--format table`.

use liftguard::detection::EvaluationReport;
use liftguard::io::LocalizationPair;
use liftguard::safety::{distance_error, LocalizationReport};

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row<S: Into<String>>(&mut self, cells: impl IntoIterator<Item = S>) {
        self.rows.push(cells.into_iter().map(Into::into).collect());
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

pub fn detection(report: &EvaluationReport) -> String {
    let mut header = vec!["class".to_string(), "gt".into(), "det".into(), "P".into(), "R".into(), "AP50".into(), "AP50-95".into()];
    header.extend(report.map_at.iter().map(|(t, _)| format!("AP{:.0}", t * 100.0)));
    let mut t = Table::new(header);
    for c in &report.classes {
        let mut row = vec![
            c.label.as_str().to_string(),
            c.gt_count.to_string(),
            c.det_count.to_string(),
            f4(c.precision),
            f4(c.recall),
            f4(c.ap50),
            f4(c.ap50_95),
        ];
        row.extend(c.ap_at.iter().map(|(_, ap)| f4(*ap)));
        t.row(row);
    }
    let mut all = vec![
        "all".to_string(),
        report.classes.iter().map(|c| c.gt_count).sum::<usize>().to_string(),
        report.classes.iter().map(|c| c.det_count).sum::<usize>().to_string(),
        f4(report.mean_precision),
        f4(report.mean_recall),
        f4(report.map50),
        f4(report.map50_95),
    ];
    all.extend(report.map_at.iter().map(|(_, m)| f4(*m)));
    t.row(all);
    format!("{} frames\n{}", report.frames, t.render())
}

pub fn localization(pairs: &[LocalizationPair], report: &LocalizationReport) -> String {
    let mut out = String::new();
    for class in &report.classes {
        let mut t = Table::new(["frame", "truth x", "truth y", "truth z", "det x", "det y", "det z", "error"]);
        for p in pairs.iter().filter(|p| p.class == class.label) {
            t.row([
                p.frame.clone(),
                f4(p.truth.x),
                f4(p.truth.y),
                f4(p.truth.z),
                f4(p.detected.x),
                f4(p.detected.y),
                f4(p.detected.z),
                f4(distance_error(&p.detected, &p.truth)),
            ]);
        }
        t.row(["mean", "", "", "", "", "", "", &f4(class.mean_error)]);
        out.push_str(&format!("{} ({} pairs, max {:.4} m)\n", class.label.as_str(), class.count, class.max_error));
        out.push_str(&t.render());
        out.push('\n');
    }
    out
}
