//! Gnuplot scripts for run outputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

/// One script to emit; column numbers are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub enum PlotSpec {
    Lines {
        csv: String,
        x: usize,
        y: usize,
        xlabel: String,
        ylabel: String,
        logy: bool,
    },
    /// `lambda, t, density, log_minus` scan drawn as a map of `log_minus`.
    Heatmap { csv: String },
    /// `separation, log_norm` with the fitted line `intercept − gamma·s`.
    Decay { csv: String, gamma: f64, intercept: f64 },
    /// Norm trace with vertical markers at the mode thresholds.
    Trace {
        csv: String,
        markers: Vec<f64>,
        threshold: Option<f64>,
    },
}

impl PlotSpec {
    fn csv(&self) -> &str {
        match self {
            PlotSpec::Lines { csv, .. } | PlotSpec::Heatmap { csv } | PlotSpec::Decay { csv, .. } | PlotSpec::Trace { csv, .. } => csv,
        }
    }
}

fn header(out: &mut String, csv: &str, png: &str) {
    let _ = writeln!(out, "set datafile separator ','");
    let _ = writeln!(out, "set key autotitle columnhead");
    let _ = writeln!(out, "set terminal pngcairo size 900,600");
    let _ = writeln!(out, "set output '{png}'");
    let _ = writeln!(out, "set title '{csv}' noenhanced");
}

fn script(spec: &PlotSpec, png: &str) -> String {
    let mut s = String::new();
    header(&mut s, spec.csv(), png);
    match spec {
        PlotSpec::Lines {
            csv,
            x,
            y,
            xlabel,
            ylabel,
            logy,
        } => {
            let _ = writeln!(s, "set xlabel '{xlabel}'\nset ylabel '{ylabel}'");
            if *logy {
                let _ = writeln!(s, "set logscale y");
            }
            let _ = writeln!(s, "plot '{csv}' using {x}:{y} with linespoints");
        }
        PlotSpec::Heatmap { csv } => {
            let _ = writeln!(s, "set xlabel 'lambda'\nset ylabel 't'\nset cblabel 'ln- density'");
            let _ = writeln!(s, "set view map\nset palette rgbformulae 33,13,10");
            let _ = writeln!(s, "plot '{csv}' using 1:2:4 with points pointtype 5 pointsize 0.6 palette");
        }
        PlotSpec::Decay { csv, gamma, intercept } => {
            let _ = writeln!(s, "set xlabel 'separation'\nset ylabel 'ln norm'");
            let _ = writeln!(s, "fit_line(x) = {intercept:e} - {gamma:e} * x");
            let _ = writeln!(
                s,
                "plot '{csv}' using 1:2 with points pointtype 7, fit_line(x) title 'gamma = {gamma:.4}' with lines"
            );
        }
        PlotSpec::Trace { csv, markers, threshold } => {
            let _ = writeln!(s, "set xlabel 'r'\nset ylabel 'norm'\nset logscale x");
            for m in markers {
                let _ = writeln!(s, "set arrow from {m:e}, graph 0 to {m:e}, graph 1 nohead dashtype 2 linecolor rgb 'gray'");
            }
            match threshold {
                Some(t) => {
                    let _ = writeln!(
                        s,
                        "plot '{csv}' using 1:2 with lines, '' using 1:3 with lines, '' using 1:4 with lines, {t:e} title 'threshold' with lines dashtype 3"
                    );
                }
                None => {
                    let _ = writeln!(s, "plot '{csv}' using 1:2 with lines, '' using 1:3 with lines, '' using 1:4 with lines");
                }
            }
        }
    }
    s
}

/// Writes one `.gp` script per spec next to its CSV and returns the script
/// names. A missing CSV is an error naming the file.
pub fn emit_plots(out: &Path, specs: &[PlotSpec]) -> Result<Vec<String>, CliError> {
    let mut names = Vec::with_capacity(specs.len());
    for spec in specs {
        let csv = spec.csv();
        if !out.join(csv).is_file() {
            return Err(CliError::Plot(format!("missing CSV {}", out.join(csv).display())));
        }
        let stem = csv.strip_suffix(".csv").unwrap_or(csv);
        let name = format!("{stem}.gp");
        let text = script(spec, &format!("{stem}.png"));
        std::fs::write(out.join(&name), text).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        names.push(name);
    }
    Ok(names)
}
