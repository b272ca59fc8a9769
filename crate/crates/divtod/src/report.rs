//! Markdown summary and SVG plots over metric reports.
//!
//! Stages write `<name>.metrics.json` files; `report` gathers every such
//! file under the input directories, refuses to mix config hashes unless
//! forced, and renders a table plus three plots: the pre-training loss
//! curve, accuracy against k and unique n-gram counts per corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use divtod_core::metrics::MetricReport;
use plotters::prelude::*;

use crate::io::{self, IoError};

pub const METRICS_SUFFIX: &str = ".metrics.json";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("mixed config hashes: {0}; pass --force to combine them")]
    MixedHashes(String),
    #[error("no metric reports found")]
    Empty,
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("plot {0}: {1}")]
    Plot(PathBuf, String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Found {
    pub path: PathBuf,
    pub report: MetricReport,
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), IoError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).map_err(|e| IoError::fs(dir, e))?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>().map_err(|e| IoError::fs(dir, e))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// All files under `dirs` ending in `suffix`, sorted.
pub fn find_files(dirs: &[PathBuf], suffix: &str) -> Result<Vec<PathBuf>, IoError> {
    let mut all = Vec::new();
    for d in dirs {
        walk(d, &mut all)?;
    }
    all.retain(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)));
    all.sort();
    all.dedup();
    Ok(all)
}

pub fn collect_reports(dirs: &[PathBuf]) -> Result<Vec<Found>, ReportError> {
    let mut out = Vec::new();
    for path in find_files(dirs, METRICS_SUFFIX)? {
        let report: MetricReport = io::read_json(&path)?;
        report.validate().map_err(|e| ReportError::Invalid { path: path.clone(), message: e.to_string() })?;
        out.push(Found { path, report });
    }
    Ok(out)
}

/// The shared config hash, or an error naming every hash seen.
pub fn check_hashes<'a>(hashes: impl IntoIterator<Item = &'a str>, force: bool) -> Result<String, ReportError> {
    let mut seen: Vec<&str> = hashes.into_iter().collect();
    seen.sort_unstable();
    seen.dedup();
    match seen.as_slice() {
        [] => Err(ReportError::Empty),
        [one] => Ok(one.to_string()),
        many if force => {
            log::warn!("combining artifacts from {} config hashes", many.len());
            Ok(many.join("+"))
        }
        many => Err(ReportError::MixedHashes(many.join(", "))),
    }
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<(), IoError> {
    io::write_json(path, report)
}

pub fn report_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}{METRICS_SUFFIX}"))
}

/// Pairs `(k, accuracy)` of a report's `acc@k` values, ascending in k.
pub fn k_curve(report: &MetricReport) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = report.values.iter().filter_map(|(name, &x)| name.strip_prefix("acc@").and_then(|k| k.parse().ok()).map(|k| (k, x))).collect();
    v.sort_by_key(|p| p.0);
    v
}

/// Pairs `(n, count)` of a report's unique n-gram values.
pub fn ngram_counts(report: &MetricReport) -> Vec<(usize, f64)> {
    (1..=4).filter_map(|n| report.values.get(&format!("unique_{n}grams")).map(|&c| (n, c))).collect()
}

fn plot_err(path: &Path) -> impl Fn(String) -> ReportError + '_ {
    move |m| ReportError::Plot(path.to_path_buf(), m)
}

fn palette(i: usize) -> RGBColor {
    const COLORS: [RGBColor; 6] = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44), RGBColor(214, 39, 40), RGBColor(148, 103, 189), RGBColor(140, 86, 75)];
    COLORS[i % COLORS.len()]
}

fn range_of(ys: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

pub fn plot_lines(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<(), ReportError> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let (x0, x1) = range_of(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = range_of(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(e.to_string()))?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(|e| err(e.to_string()))?;
    for (i, (label, points)) in series.iter().enumerate() {
        let color = palette(i);
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    if series.len() > 1 {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(|e| err(e.to_string()))?;
    }
    root.present().map_err(|e| err(e.to_string()))
}

/// Grouped bars: one group per category, one bar per series.
pub fn plot_bars(path: &Path, title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> Result<(), ReportError> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let top = series.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0f64, f64::max).max(1.0) * 1.1;
    let groups = categories.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..groups, 0.0..top)
        .map_err(|e| err(e.to_string()))?;
    let cats = categories.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(categories.len().max(1) * 2 + 1)
        .x_label_formatter(&move |x: &f64| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 0.26 {
                cats.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(|e| err(e.to_string()))?;
    let width = 0.8 / series.len().max(1) as f64;
    for (s, (label, values)) in series.iter().enumerate() {
        let color = palette(s);
        let bars = values.iter().enumerate().map(move |(c, &v)| {
            let x = c as f64 + 0.1 + s as f64 * width;
            Rectangle::new([(x, 0.0), (x + width * 0.95, v)], color.filled())
        });
        chart
            .draw_series(bars)
            .map_err(|e| err(e.to_string()))?
            .label(label.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// `(step, total)` rows of a pre-training log CSV.
pub fn read_loss_curve(path: &Path) -> Result<Vec<(f64, f64)>, ReportError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| ReportError::Invalid { path: path.to_path_buf(), message: e.to_string() })?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<BTreeMap<String, String>>().enumerate() {
        let invalid = |m: String| ReportError::Invalid { path: path.to_path_buf(), message: format!("row {}: {m}", i + 2) };
        let row = row.map_err(|e| invalid(e.to_string()))?;
        let get = |k: &str| row.get(k).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| invalid(format!("missing or bad {k}")));
        out.push((get("step")?, get("total")?));
    }
    Ok(out)
}

fn label_of(f: &Found) -> String {
    let stem = f.path.file_name().and_then(|n| n.to_str()).unwrap_or("?");
    stem.strip_suffix(METRICS_SUFFIX).unwrap_or(stem).to_string()
}

/// What `render` produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub markdown: PathBuf,
    pub plots: Vec<PathBuf>,
    pub config_hash: String,
}

/// Writes `report.md` and the plots into `out`. `extra_hashes` covers
/// artifacts other than metric reports, such as checkpoints.
pub fn render(inputs: &[PathBuf], out: &Path, extra_hashes: &[String], force: bool) -> Result<Rendered, ReportError> {
    let found = collect_reports(inputs)?;
    if found.is_empty() {
        return Err(ReportError::Empty);
    }
    let hash = check_hashes(found.iter().map(|f| f.report.meta.config_hash.as_str()).chain(extra_hashes.iter().map(String::as_str)), force)?;
    fs::create_dir_all(out).map_err(|e| IoError::fs(out, e))?;
    let mut plots = Vec::new();
    let mut md = String::new();
    let _ = writeln!(md, "# Results\n\nConfig hash: `{hash}`\n");
    let _ = writeln!(md, "| report | dataset | split | seed | metric | value |\n|---|---|---|---|---|---|");
    for f in &found {
        for (name, v) in f.report.rounded() {
            let m = &f.report.meta;
            let _ = writeln!(md, "| {} | {} | {} | {} | {name} | {v:.2} |", label_of(f), m.dataset, m.split, m.seed);
        }
    }

    let logs = find_files(inputs, TRAIN_LOG)?;
    let mut loss_series = Vec::new();
    for log in &logs {
        let curve = read_loss_curve(log)?;
        if !curve.is_empty() {
            let name = log.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()).unwrap_or("pretrain").to_string();
            loss_series.push((name, curve));
        }
    }
    if !loss_series.is_empty() {
        let p = out.join("loss_curve.svg");
        plot_lines(&p, "Pre-training loss", "step", "total loss", &loss_series)?;
        plots.push(p);
    }

    let k_series: Vec<(String, Vec<(f64, f64)>)> = found
        .iter()
        .map(|f| (label_of(f), k_curve(&f.report).into_iter().map(|(k, a)| (k as f64, a)).collect::<Vec<_>>()))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if !k_series.is_empty() {
        let p = out.join("accuracy_vs_k.svg");
        plot_lines(&p, "k-to-100 accuracy", "k", "accuracy", &k_series)?;
        plots.push(p);
    }

    let div: Vec<(String, Vec<(usize, f64)>)> = found.iter().map(|f| (label_of(f), ngram_counts(&f.report))).filter(|(_, v)| !v.is_empty()).collect();
    if !div.is_empty() {
        let orders: Vec<usize> = {
            let mut o: Vec<usize> = div.iter().flat_map(|(_, v)| v.iter().map(|p| p.0)).collect();
            o.sort_unstable();
            o.dedup();
            o
        };
        let cats: Vec<String> = orders.iter().map(|n| format!("{n}-gram")).collect();
        let series: Vec<(String, Vec<f64>)> = div.iter().map(|(l, v)| (l.clone(), orders.iter().map(|n| v.iter().find(|p| p.0 == *n).map_or(0.0, |p| p.1)).collect())).collect();
        let p = out.join("diversity_bars.svg");
        plot_bars(&p, "Unique n-grams", &cats, &series)?;
        plots.push(p);
    }

    if !plots.is_empty() {
        let _ = writeln!(md, "\n## Plots\n");
        for p in &plots {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let _ = writeln!(md, "![{name}]({name})");
        }
    }
    let markdown = out.join("report.md");
    fs::write(&markdown, md).map_err(|e| IoError::fs(&markdown, e))?;
    Ok(Rendered { markdown, plots, config_hash: hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use divtod_core::metrics::ReportMeta;

    fn report(hash: &str, values: &[(&str, f64)]) -> MetricReport {
        let mut r = MetricReport::new(ReportMeta { dataset: "toy".into(), split: "test".into(), seed: 0, config_hash: hash.into() });
        for (k, v) in values {
            r.insert(k, *v).unwrap();
        }
        r
    }

    #[test]
    fn hash_policy() {
        assert_eq!(check_hashes(["a", "a"], false).unwrap(), "a");
        assert!(matches!(check_hashes(["a", "b"], false), Err(ReportError::MixedHashes(_))));
        assert_eq!(check_hashes(["b", "a"], true).unwrap(), "a+b");
        assert!(matches!(check_hashes([], true), Err(ReportError::Empty)));
    }

    #[test]
    fn renders_markdown_and_plots() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write_report(&report_path(d, "rs"), &report("h", &[("acc@1", 0.2), ("acc@10", 0.7), ("acc@100", 1.0)])).unwrap();
        write_report(&report_path(d, "div"), &report("h", &[("unique_1grams", 40.0), ("unique_2grams", 90.0)])).unwrap();
        fs::create_dir_all(d.join("pretrain")).unwrap();
        fs::write(d.join("pretrain").join(TRAIN_LOG), "step,distill_loss,mlm_loss,total,dev_ppl\n1,0.5,6,6.5,\n2,0.4,5,5.4,100\n").unwrap();
        let out = d.join("out");
        let r = render(&[d.to_path_buf()], &out, &[], false).unwrap();
        assert_eq!(r.config_hash, "h");
        assert_eq!(r.plots.len(), 3);
        for p in &r.plots {
            assert!(fs::read_to_string(p).unwrap().starts_with("<svg"));
        }
        let md = fs::read_to_string(&r.markdown).unwrap();
        assert!(md.contains("| rs | toy | test | 0 | acc@10 | 0.70 |"), "{md}");

        write_report(&report_path(d, "other"), &report("g", &[("accuracy", 0.5)])).unwrap();
        assert!(matches!(render(&[d.to_path_buf()], &out, &[], false), Err(ReportError::MixedHashes(_))));
        assert!(render(&[d.to_path_buf()], &out, &[], true).is_ok());
    }

    #[test]
    fn k_curve_sorts_numerically() {
        let r = report("h", &[("acc@10", 0.5), ("acc@2", 0.3), ("accuracy", 1.0)]);
        assert_eq!(k_curve(&r), vec![(2, 0.3), (10, 0.5)]);
    }
}
