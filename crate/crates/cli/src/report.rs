//! Plain-text artifacts: CSV tables, PCA scatters and a static SVG.

use std::fmt::Write as _;

use cod_lab::analysis::{AlignmentMetrics, Pca, RepresentationSnapshot};
use cod_lab::trainer::{EpochRecord, MatrixRow};

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

pub fn metrics_csv(epochs: &[EpochRecord]) -> String {
    let mut out = String::from(
        "epoch,task_loss,train_cod_loss,probe_cod_loss,accuracy,macro_f1,hits_at_k,paired_cos,within_text,within_graph,between,ratio\n",
    );
    for e in epochs {
        let a = &e.alignment;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.task_loss,
            opt(e.train_cod_loss),
            opt(e.probe_cod_loss),
            opt(e.eval.accuracy),
            opt(e.eval.macro_f1),
            opt(e.eval.hits_at_k),
            a.paired_cos,
            a.within_text,
            a.within_graph,
            a.between,
            a.ratio()
        )
        .unwrap();
    }
    out
}

pub fn curves_csv(rows: &[(usize, AlignmentMetrics)]) -> String {
    let mut out = String::from("epoch,paired_cos,within_text,within_graph,between,ratio\n");
    for (epoch, a) in rows {
        writeln!(
            out,
            "{epoch},{},{},{},{},{}",
            a.paired_cos,
            a.within_text,
            a.within_graph,
            a.between,
            a.ratio()
        )
        .unwrap();
    }
    out
}

/// Rows of the joint PCA tagged by modality; text rows come first.
fn tagged_points(s: &RepresentationSnapshot, pca: &Pca) -> Vec<(&'static str, usize, f64, f64)> {
    let n = s.z_text.rows();
    let rows = pca.projected.to_rows();
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if i < n {
                ("text", i, r[0], r[1])
            } else {
                ("graph", i - n, r[0], r[1])
            }
        })
        .collect()
}

pub fn pca_csv(s: &RepresentationSnapshot, pca: &Pca) -> String {
    let mut out = format!(
        "# epoch={} explained_pc1={} explained_pc2={}\nmodality,index,pc1,pc2\n",
        s.epoch, pca.explained_ratio.0, pca.explained_ratio.1
    );
    for (m, i, x, y) in tagged_points(s, pca) {
        writeln!(out, "{m},{i},{x},{y}").unwrap();
    }
    out
}

pub fn pca_svg(s: &RepresentationSnapshot, pca: &Pca) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 20.0;
    let pts = tagged_points(s, pca);
    let extent = pts
        .iter()
        .flat_map(|p| [p.2.abs(), p.3.abs()])
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let scale = (SIZE / 2.0 - PAD) / extent;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"{PAD}\" font-size=\"12\">epoch {}</text>\n",
        s.epoch
    );
    for (m, _, x, y) in pts {
        let color = if m == "text" { "#1f77b4" } else { "#d62728" };
        writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.7\"/>",
            SIZE / 2.0 + x * scale,
            SIZE / 2.0 - y * scale
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

pub fn ablation_csv(rows: &[MatrixRow]) -> String {
    let mut out = String::from("arm,mean,sd,marker,runs\n");
    for r in rows {
        let runs: Vec<String> = r.runs.iter().map(f64::to_string).collect();
        writeln!(
            out,
            "{},{},{},{},{}",
            r.arm,
            r.mean,
            r.sd,
            r.marker,
            runs.join(";")
        )
        .unwrap();
    }
    out
}

pub fn ablation_text(rows: &[MatrixRow]) -> String {
    let mut out = format!("{:<12} {:>16}\n", "arm", "mean ± sd");
    for r in rows {
        let mark = match r.marker.as_str() {
            "best" => "**",
            "second" => "_",
            _ => "",
        };
        writeln!(
            out,
            "{:<12} {:>7.4} ± {:<6.4}  {mark}",
            r.arm.as_str(),
            r.mean,
            r.sd
        )
        .unwrap();
    }
    out.push_str("** best, _ second best\n");
    out
}
