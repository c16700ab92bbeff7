//! Metric tables, report files and sweep plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{QueryTriplet, ReportStyle};
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::util::{atomic_write, round2};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
}

impl Metric {
    pub fn new(metric: impl Into<String>, k: Option<usize>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            k,
            value,
        }
    }
}

/// `(R@5 + R_subset@1) / 2`, rounded to two decimals.
pub fn cirr_composite(r5: f64, rsub1: f64) -> f64 {
    round2((r5 + rsub1) / 2.0)
}

fn recall_rows(
    name: &str,
    rankings: &[Vec<String>],
    truths: &[&str],
    ks: &[usize],
) -> Result<Vec<Metric>> {
    ks.iter()
        .map(|&k| Ok(Metric::new(name, Some(k), recall_at_k(rankings, truths, k)?)))
        .collect()
}

fn find(metrics: &[Metric], name: &str, k: usize) -> Option<f64> {
    metrics
        .iter()
        .find(|m| m.metric == name && m.k == Some(k))
        .map(|m| m.value)
}

/// Metrics of one split in the layout of `style`. `rankings` and
/// `triplets` are aligned; `subset_rankings` is keyed by query id.
pub fn metrics_for_style(
    style: ReportStyle,
    triplets: &[&QueryTriplet],
    rankings: &[(String, Vec<String>)],
    subset_rankings: &[(String, Vec<String>)],
) -> Result<Vec<Metric>> {
    if triplets.len() != rankings.len() {
        return Err(Error::Eval(format!(
            "{} triplets for {} rankings",
            triplets.len(),
            rankings.len()
        )));
    }
    if triplets.is_empty() {
        return Ok(Vec::new());
    }
    let lists: Vec<Vec<String>> = rankings.iter().map(|(_, r)| r.clone()).collect();
    let truths: Vec<&str> = triplets.iter().map(|t| t.target_image_id.as_str()).collect();
    let mut out = Vec::new();
    match style {
        ReportStyle::FashionIq => {
            let mut groups: BTreeMap<&str, (Vec<Vec<String>>, Vec<&str>)> = BTreeMap::new();
            for (t, r) in triplets.iter().zip(&lists) {
                let g = groups.entry(t.category().unwrap_or("all")).or_default();
                g.0.push(r.clone());
                g.1.push(t.target_image_id.as_str());
            }
            let mut per_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (cat, (r, tr)) in &groups {
                for m in recall_rows(&format!("recall/{cat}"), r, tr, &[10, 50])? {
                    per_k.entry(m.k.unwrap()).or_default().push(m.value);
                    out.push(m);
                }
            }
            let mut avgs = Vec::new();
            for (k, vals) in per_k {
                let avg = vals.iter().sum::<f64>() / vals.len() as f64;
                avgs.push(avg);
                out.push(Metric::new("recall/average", Some(k), avg));
            }
            out.push(Metric::new("average", None, avgs.iter().sum::<f64>() / avgs.len() as f64));
        }
        ReportStyle::Cirr => {
            out.extend(recall_rows("recall", &lists, &truths, &[1, 5, 10, 50])?);
            if !subset_rankings.is_empty() {
                let by_id: BTreeMap<&str, &Vec<String>> =
                    subset_rankings.iter().map(|(q, r)| (q.as_str(), r)).collect();
                let mut sl = Vec::new();
                let mut st = Vec::new();
                for t in triplets {
                    if let Some(r) = by_id.get(t.query_id.as_str()) {
                        sl.push((*r).clone());
                        st.push(t.target_image_id.as_str());
                    }
                }
                out.extend(recall_rows("recall_subset", &sl, &st, &[1, 2, 3])?);
                let r5 = find(&out, "recall", 5).unwrap();
                let s1 = find(&out, "recall_subset", 1).unwrap();
                out.push(Metric::new("composite", None, cirr_composite(r5, s1)));
            }
        }
        ReportStyle::Shoes => {
            let rows = recall_rows("recall", &lists, &truths, &[1, 10, 50])?;
            let mean = rows.iter().map(|m| m.value).sum::<f64>() / rows.len() as f64;
            out.extend(rows);
            out.push(Metric::new("mean", None, mean));
        }
        ReportStyle::Generic => out.extend(recall_rows("recall", &lists, &truths, &[1, 5, 10, 50])?),
    }
    Ok(out)
}

pub fn metrics_jsonl(metrics: &[Metric]) -> String {
    metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metric serializes") + "\n")
        .collect()
}

pub fn parse_metrics_jsonl(text: &str, path: &Path) -> Result<Vec<Metric>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn label(m: &Metric) -> String {
    let base = match m.metric.as_str() {
        "recall" => "R".to_string(),
        "recall_subset" => "R_subset".to_string(),
        other => other.strip_prefix("recall/").map_or(other.to_string(), |c| format!("{c} R")),
    };
    match m.k {
        Some(k) => format!("{base}@{k}"),
        None => base,
    }
}

/// Human-readable table, values to two decimals.
pub fn render_markdown(title: &str, metrics: &[Metric]) -> String {
    let mut s = format!("# {title}\n\n| Metric | Value |\n|---|---:|\n");
    for m in metrics {
        let _ = writeln!(s, "| {} | {:.2} |", label(m), round2(m.value));
    }
    s
}

/// Paths written by [`write_report`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub markdown: PathBuf,
    pub rankings: PathBuf,
}

#[derive(Serialize)]
struct RankLine<'a> {
    query_id: &'a str,
    top_k: &'a [String],
}

/// Writes `metrics.jsonl`, `report.md` and `rankings.jsonl` (first `top_k`
/// ids per query) into `dir`.
pub fn write_report(
    dir: &Path,
    title: &str,
    metrics: &[Metric],
    rankings: &[(String, Vec<String>)],
    top_k: usize,
) -> Result<ReportFiles> {
    let files = ReportFiles {
        metrics: dir.join("metrics.jsonl"),
        markdown: dir.join("report.md"),
        rankings: dir.join("rankings.jsonl"),
    };
    atomic_write(&files.metrics, metrics_jsonl(metrics).as_bytes())?;
    atomic_write(&files.markdown, render_markdown(title, metrics).as_bytes())?;
    let mut lines = String::new();
    for (q, r) in rankings {
        let line = RankLine {
            query_id: q,
            top_k: &r[..r.len().min(top_k)],
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    atomic_write(&files.rankings, lines.as_bytes())?;
    Ok(files)
}

/// One plotted line of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of metric values against categorical sweep values, as SVG.
pub fn render_sweep_svg(param: &str, xs: &[String], series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 150.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let all: Vec<f64> = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite()).collect();
    let (mut lo, mut hi) = all.iter().fold((f64::MAX, f64::MIN), |(l, u), v| (l.min(*v), u.max(*v)));
    if all.is_empty() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let x_at = |i: usize| {
        if xs.len() <= 1 {
            left + pw / 2.0
        } else {
            left + pw * i as f64 / (xs.len() - 1) as f64
        }
    };
    let y_at = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" stroke="black" fill="none"/>"#,
        top + ph,
        left + pw
    );
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let y = y_at(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    for (i, x) in xs.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x_at(i),
            top + ph + 18.0,
            escape(x)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        escape(param)
    );
    for (n, ser) in series.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let pts: Vec<String> = ser
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", x_at(i), y_at(*v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 16.0 * n as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{:.1}" width="12" height="3" fill="{color}"/><text x="{}" y="{:.1}">{}</text>"#,
            left + pw + 12.0,
            ly - 2.0,
            left + pw + 30.0,
            ly + 3.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_sweep_plot(path: &Path, param: &str, xs: &[String], series: &[Series]) -> Result<()> {
    atomic_write(path, render_sweep_svg(param, xs, series).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn triplet(id: &str, target: &str, subset: Option<Vec<&str>>) -> QueryTriplet {
        QueryTriplet {
            query_id: id.into(),
            ref_image_id: "r".into(),
            mod_text: "m".into(),
            target_image_id: target.into(),
            split: Split::Val,
            subset_ids: subset.map(|v| v.into_iter().map(String::from).collect()),
        }
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn composite_of_table_values() {
        assert_eq!(cirr_composite(82.60, 81.37), 81.99);
    }

    #[test]
    fn cirr_layout() {
        let ts = [triplet("a", "t1", Some(vec!["t1", "x"])), triplet("b", "t2", Some(vec!["y", "t2"]))];
        let refs: Vec<&QueryTriplet> = ts.iter().collect();
        let rankings = vec![
            ("a".to_string(), ids(&["t1", "x", "y", "t2"])),
            ("b".to_string(), ids(&["x", "y", "t1", "t2"])),
        ];
        let subs = vec![("a".to_string(), ids(&["t1", "x"])), ("b".to_string(), ids(&["y", "t2"]))];
        let m = metrics_for_style(ReportStyle::Cirr, &refs, &rankings, &subs).unwrap();
        assert_eq!(find(&m, "recall", 1), Some(50.0));
        assert_eq!(find(&m, "recall", 5), Some(100.0));
        assert_eq!(find(&m, "recall_subset", 1), Some(50.0));
        assert_eq!(find(&m, "recall_subset", 2), Some(100.0));
        let c = m.iter().find(|x| x.metric == "composite").unwrap();
        assert_eq!(c.value, 75.0);
    }

    #[test]
    fn fashioniq_layout_averages_categories() {
        let ts = [triplet("dress:val:00000", "t", None), triplet("shirt:val:00000", "t", None)];
        let refs: Vec<&QueryTriplet> = ts.iter().collect();
        let mut miss = ids(&["z"; 60]);
        miss[20] = "t".into();
        let rankings = vec![("a".into(), ids(&["t"])), ("b".into(), miss)];
        let m = metrics_for_style(ReportStyle::FashionIq, &refs, &rankings, &[]).unwrap();
        assert_eq!(find(&m, "recall/dress", 10), Some(100.0));
        assert_eq!(find(&m, "recall/shirt", 10), Some(0.0));
        assert_eq!(find(&m, "recall/shirt", 50), Some(100.0));
        assert_eq!(find(&m, "recall/average", 10), Some(50.0));
        assert_eq!(m.last().unwrap().value, 75.0);
    }

    #[test]
    fn empty_metrics_give_empty_table() {
        let md = render_markdown("x", &[]);
        assert_eq!(md.lines().count(), 4);
        assert!(metrics_for_style(ReportStyle::Shoes, &[], &[], &[]).unwrap().is_empty());
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = vec![Metric::new("recall", Some(1), 50.0), Metric::new("mean", None, 1.0 / 3.0)];
        let f = write_report(dir.path(), "t", &m, &[("q".into(), ids(&["a", "b", "c"]))], 2).unwrap();
        let text = std::fs::read_to_string(&f.metrics).unwrap();
        assert_eq!(parse_metrics_jsonl(&text, &f.metrics).unwrap(), m);
        let r = std::fs::read_to_string(&f.rankings).unwrap();
        assert_eq!(r.trim(), r#"{"query_id":"q","top_k":["a","b"]}"#);
        assert!(std::fs::read_to_string(&f.markdown).unwrap().contains("| R@1 | 50.00 |"));
    }

    #[test]
    fn sweep_plot_is_svg() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sweep.svg");
        let xs = ids(&["1", "2", "4"]);
        write_sweep_plot(&p, "P", &xs, &[Series { name: "R@1".into(), values: vec![1.0, 2.0, 1.5] }]).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert!(s.starts_with("<svg") && s.contains("polyline"));
    }
}
