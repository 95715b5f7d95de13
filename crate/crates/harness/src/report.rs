//! Median and interquartile tables over bench CSV output, plus plot-ready
//! series with log10 values precomputed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tilestream::metrics::{
    buffer_rate, frame_rate, read_csv, summarize, EventRow, FovEvent, FrameRow, FrameSample, LayerClass, Summary, EVENT_CSV_HEADER,
    FRAME_CSV_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    FrameRate,
    BufferRate,
    Tefov(LayerClass),
    Tpt(LayerClass),
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::FrameRate,
        Metric::BufferRate,
        Metric::Tefov(LayerClass::LR),
        Metric::Tpt(LayerClass::LR),
        Metric::Tefov(LayerClass::HR),
        Metric::Tpt(LayerClass::HR),
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Metric::FrameRate => "frame rate (FPS)",
            Metric::BufferRate => "buffer rate (GB/s)",
            Metric::Tefov(LayerClass::LR) => "LR TeFOV (ms)",
            Metric::Tefov(LayerClass::HR) => "HR TeFOV (ms)",
            Metric::Tpt(LayerClass::LR) => "LR TPT (us)",
            Metric::Tpt(LayerClass::HR) => "HR TPT (us)",
        }
    }

    pub fn slug(&self) -> &'static str {
        match self {
            Metric::FrameRate => "fps",
            Metric::BufferRate => "buffer_rate_gbps",
            Metric::Tefov(LayerClass::LR) => "lr_tefov_ms",
            Metric::Tefov(LayerClass::HR) => "hr_tefov_ms",
            Metric::Tpt(LayerClass::LR) => "lr_tpt_us",
            Metric::Tpt(LayerClass::HR) => "hr_tpt_us",
        }
    }
}

/// One column of the report: the data of one bench run.
#[derive(Debug, Clone, Default)]
pub struct RunData {
    pub label: String,
    pub frames: Vec<FrameSample>,
    pub events: Vec<FovEvent>,
}

impl RunData {
    pub fn series(&self, metric: Metric) -> Vec<f64> {
        let included = |class| {
            self.events
                .iter()
                .filter(move |e: &&FovEvent| e.layer_class == class && e.is_included())
        };
        match metric {
            Metric::FrameRate => frame_rate(&self.frames).map(|s| s.values).unwrap_or_default(),
            Metric::BufferRate => buffer_rate(&self.frames).map(|s| s.values).unwrap_or_default(),
            Metric::Tefov(class) => included(class).map(|e| e.tefov().as_nanos() as f64 / 1e6).collect(),
            Metric::Tpt(class) => included(class)
                .filter_map(|e| tilestream::metrics::tpt(e))
                .map(|t| t.micros())
                .collect(),
        }
    }

    pub fn summary(&self, metric: Metric) -> Option<Summary> {
        summarize(&self.series(metric))
    }
}

enum CsvKind {
    Frames,
    Events,
    Empty,
}

fn sniff(path: &Path) -> Result<CsvKind> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let Some(first) = text.lines().next().filter(|l| !l.trim().is_empty()) else {
        return Ok(CsvKind::Empty);
    };
    let header: Vec<_> = first.trim().split(',').collect();
    if header == FRAME_CSV_HEADER {
        Ok(CsvKind::Frames)
    } else if header == EVENT_CSV_HEADER {
        Ok(CsvKind::Events)
    } else {
        bail!("schema mismatch in {}: header {first:?}", path.display())
    }
}

fn add_file(run: &mut RunData, path: &Path) -> Result<()> {
    match sniff(path)? {
        CsvKind::Frames => run
            .frames
            .extend(read_csv::<FrameRow>(path)?.iter().map(FrameSample::from)),
        CsvKind::Events => run
            .events
            .extend(read_csv::<EventRow>(path)?.iter().map(FovEvent::from)),
        CsvKind::Empty => {}
    }
    Ok(())
}

/// Loads a bench output directory (its `frames.csv` and `events.csv`) or a
/// single CSV file as one report column.
pub fn load_run(path: &Path) -> Result<RunData> {
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut run = RunData {
        label,
        ..Default::default()
    };
    if path.is_dir() {
        let files: Vec<PathBuf> = ["frames.csv", "events.csv"]
            .iter()
            .map(|f| path.join(f))
            .filter(|p| p.exists())
            .collect();
        if files.is_empty() {
            bail!("{} holds neither frames.csv nor events.csv", path.display());
        }
        for f in files {
            add_file(&mut run, &f)?;
        }
    } else {
        add_file(&mut run, path)?;
    }
    Ok(run)
}

pub fn format_summary(s: Option<Summary>) -> String {
    match s {
        Some(s) => format!("{:.2} [{:.2}, {:.2}] n={}", s.median, s.p25, s.p75, s.n),
        None => "insufficient data".into(),
    }
}

/// Median [25th, 75th percentile] per metric, one column per run.
pub fn render_table(runs: &[RunData]) -> String {
    let mut rows = vec![std::iter::once("metric".to_string())
        .chain(runs.iter().map(|r| r.label.clone()))
        .collect::<Vec<_>>()];
    for m in Metric::ALL {
        rows.push(
            std::iter::once(m.label().to_string())
                .chain(runs.iter().map(|r| format_summary(r.summary(m))))
                .collect(),
        );
    }
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<_> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
        if i == 0 {
            let rule: Vec<_> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "{}", rule.join("-|-"));
        }
    }
    out
}

/// Writes `<label>_<metric>.csv` per run and metric with columns
/// `index,value,log10_value`; `log10_value` is empty for non-positive values.
pub fn write_plot_data(dir: &Path, runs: &[RunData]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for run in runs {
        for m in Metric::ALL {
            let path = dir.join(format!("{}_{}.csv", run.label, m.slug()));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["index", "value", "log10_value"])?;
            for (i, v) in run.series(m).iter().enumerate() {
                let log = if *v > 0.0 { v.log10().to_string() } else { String::new() };
                w.write_record([i.to_string(), v.to_string(), log])?;
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}
