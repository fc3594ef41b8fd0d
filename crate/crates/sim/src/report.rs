//! Per-round accuracy tables built from a trace: the mean accuracy of each
//! node's best two models, each node's local ensemble accuracy, and the
//! averages of both across nodes.

use std::path::{Path, PathBuf};

use crate::csvio::write_file;
use crate::error::Result;
use crate::trace::{provenance, TraceDocument};

/// Values indexed `[round - 1][series]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub title: &'static str,
    pub series: Vec<String>,
    pub rounds: Vec<u32>,
    pub values: Vec<Vec<f64>>,
}

fn node_series(doc: &TraceDocument) -> Vec<u32> {
    let mut ids: Vec<u32> = doc.rounds.iter().flat_map(|r| r.nodes.iter().map(|n| n.node_id)).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn per_node(
    doc: &TraceDocument,
    name: &'static str,
    title: &'static str,
    f: impl Fn(&eflsim_core::server::NodeRoundEntry) -> f64,
) -> Table {
    let ids = node_series(doc);
    let values = doc
        .rounds
        .iter()
        .map(|r| ids.iter().map(|id| r.nodes.iter().find(|n| n.node_id == *id).map_or(f64::NAN, &f)).collect())
        .collect();
    Table {
        name,
        title,
        series: ids.iter().map(|id| format!("N{id}")).collect(),
        rounds: doc.rounds.iter().map(|r| r.round).collect(),
        values,
    }
}

fn b2m_mean(n: &eflsim_core::server::NodeRoundEntry) -> f64 {
    (n.b2m_accuracies[0] + n.b2m_accuracies[1]) / 2.0
}

pub fn best_two_by_node(doc: &TraceDocument) -> Table {
    per_node(doc, "best_two_by_node", "Mean accuracy of the best two models", b2m_mean)
}

pub fn local_ensemble_by_node(doc: &TraceDocument) -> Table {
    per_node(doc, "local_ensemble_by_node", "Local ensemble accuracy", |n| n.lel_accuracy)
}

pub fn averages(doc: &TraceDocument) -> Table {
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    Table {
        name: "averages",
        title: "Average over nodes",
        series: vec!["local_ensemble".into(), "best_two".into()],
        rounds: doc.rounds.iter().map(|r| r.round).collect(),
        values: doc
            .rounds
            .iter()
            .map(|r| {
                vec![
                    mean(r.nodes.iter().map(|n| n.lel_accuracy).collect()),
                    mean(r.nodes.iter().map(b2m_mean).collect()),
                ]
            })
            .collect(),
    }
}

pub fn tables(doc: &TraceDocument) -> Vec<Table> {
    vec![best_two_by_node(doc), local_ensemble_by_node(doc), averages(doc)]
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("round");
        for name in &self.series {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for (r, row) in self.rounds.iter().zip(&self.values) {
            s.push_str(&r.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n{:<7}", self.title, "round");
        for name in &self.series {
            s.push_str(&format!("{name:>16}"));
        }
        s.push('\n');
        for (r, row) in self.rounds.iter().zip(&self.values) {
            s.push_str(&format!("{r:<7}"));
            for v in row {
                s.push_str(&format!("{v:>16.4}"));
            }
            s.push('\n');
        }
        s
    }

    /// A line chart, one polyline per series.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const PAD: f64 = 50.0;
        const COLORS: [&str; 8] =
            ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
        let finite = || self.values.iter().flatten().copied().filter(|v| v.is_finite());
        let lo = finite().fold(f64::INFINITY, f64::min).min(1.0);
        let hi = finite().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
        let n = self.rounds.len().max(2) - 1;
        let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / n as f64;
        let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        s.push_str(&format!("<text x=\"{PAD}\" y=\"24\" font-size=\"14\">{}</text>\n", self.title));
        s.push_str(&format!(
            "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{0}\" stroke=\"black\"/>\n",
            H - PAD,
            W - PAD
        ));
        s.push_str(&format!("<text x=\"4\" y=\"{:.1}\">{lo:.3}</text>\n", y(lo)));
        s.push_str(&format!("<text x=\"4\" y=\"{:.1}\">{hi:.3}</text>\n", y(hi) + 4.0));
        for (i, r) in self.rounds.iter().enumerate() {
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{r}</text>\n",
                x(i),
                H - PAD + 16.0
            ));
        }
        for (k, name) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let pts: Vec<String> = self
                .values
                .iter()
                .enumerate()
                .filter(|(_, row)| row[k].is_finite())
                .map(|(i, row)| format!("{:.1},{:.1}", x(i), y(row[k])))
                .collect();
            s.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>\n",
                W - PAD + 4.0,
                PAD + 14.0 * k as f64
            ));
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Writes `<name>.csv` (and `<name>.svg` when asked) for every table.
pub fn write_reports(doc: &TraceDocument, dir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for t in tables(doc) {
        let p = dir.join(format!("{}.csv", t.name));
        let csv = format!("# {}\n{}", provenance(doc.artifact.master_seed), t.to_csv());
        write_file(&p, csv.as_bytes())?;
        written.push(p);
        if svg {
            let p = dir.join(format!("{}.svg", t.name));
            let svg = t.to_svg().replacen('\n', &format!("\n<!-- {} -->\n", provenance(doc.artifact.master_seed)), 1);
            write_file(&p, svg.as_bytes())?;
            written.push(p);
        }
    }
    Ok(written)
}
