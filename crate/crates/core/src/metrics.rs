//! Consistency score and rate of adapted agents against from-scratch
//! baselines, per-grid reports and heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::Mode;
use crate::meta::Algo;
use crate::pg::LearningCurve;
use crate::{Error, Result};

pub const SMOOTH_WINDOW: usize = 5;
/// Fraction of the peak a smoothed curve must reach to count as converged.
pub const PEAK_TOLERANCE: f64 = 0.02;
/// Added to the normalised adaptation time of the adapted agent.
pub const RATE_OFFSET: f64 = 0.01;
/// Relative size under which a score denominator is treated as zero.
pub const SCORE_GUARD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedCurve {
    pub source: LearningCurve,
    pub window: usize,
    pub values: Vec<f64>,
}

/// Centred moving average; windows shrink at both ends.
pub fn smooth(curve: &LearningCurve, window: usize) -> Result<SmoothedCurve> {
    if curve.is_empty() {
        return Err(Error::Config(format!("cannot smooth empty curve {}", curve.run_id)));
    }
    let w = window.max(1);
    let ys = curve.returns();
    let n = ys.len();
    let left = (w - 1) / 2;
    let right = w - 1 - left;
    let values = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(n - 1);
            ys[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    Ok(SmoothedCurve { source: curve.clone(), window: w, values })
}

impl SmoothedCurve {
    pub fn frames(&self) -> Vec<u64> {
        self.source.frames()
    }

    pub fn peak_return(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn range(&self) -> f64 {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        self.peak_return() - lo
    }

    /// Convergence threshold for the peak `r`, on the side of `r` that
    /// lies 2% of its magnitude below it.
    pub fn threshold(&self) -> f64 {
        let r = self.peak_return();
        if r > 0.0 {
            (1.0 - PEAK_TOLERANCE) * r
        } else if r < 0.0 {
            (1.0 + PEAK_TOLERANCE) * r
        } else {
            r - PEAK_TOLERANCE * self.range()
        }
    }

    /// First frame at which the smoothed curve reaches the threshold,
    /// divided by `budget`.
    pub fn time_to_peak(&self, budget: u64) -> f64 {
        let th = self.threshold();
        let f = self
            .values
            .iter()
            .zip(self.source.points.iter())
            .find(|(v, _)| **v >= th)
            .map(|(_, p)| p.frame)
            .expect("the peak itself reaches the threshold");
        f as f64 / budget.max(1) as f64
    }
}

pub fn peak_return(s: &SmoothedCurve) -> f64 {
    s.peak_return()
}

pub fn time_to_peak(s: &SmoothedCurve, budget: u64) -> f64 {
    s.time_to_peak(budget)
}

/// `(peak(meta) - r0) / (peak(scratch) - r0)`, or `None` when the
/// denominator vanishes relative to the curves' spread.
pub fn c_score(meta: &SmoothedCurve, scratch: &SmoothedCurve, r_theta0: f64) -> Option<f64> {
    let den = scratch.peak_return() - r_theta0;
    let spread = meta.range().max(scratch.range()).max((meta.peak_return() - r_theta0).abs());
    if den == 0.0 || den.abs() < SCORE_GUARD * spread {
        return None;
    }
    Some((meta.peak_return() - r_theta0) / den)
}

/// `t(scratch) / (t(meta) + 0.01)` with times normalised by the budget.
pub fn c_rate(scratch: &SmoothedCurve, meta: &SmoothedCurve, budget: u64) -> f64 {
    scratch.time_to_peak(budget).min(1.0) / (meta.time_to_peak(budget).min(1.0) + RATE_OFFSET)
}

/// How per-seed values are combined into a cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Metrics per seed, then averaged.
    #[default]
    PerSeed,
    /// Metrics of the seed-averaged curves.
    MeanCurve,
}

/// One learning curve with the coordinates that pair it with its baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub algo: Algo,
    pub mode: Mode,
    /// `None` for meta-learning baselines, which depend only on the test space.
    pub train_space: Option<String>,
    pub test_space: String,
    pub seed: u64,
    pub budget: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub curve: LearningCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyCell {
    pub algo: Algo,
    pub mode: Mode,
    pub train_space: String,
    pub test_space: String,
    pub seed_count: usize,
    pub c_score: Option<f64>,
    pub c_rate: f64,
    pub seed_scores: Vec<Option<f64>>,
    pub seed_rates: Vec<f64>,
    pub r_theta0: f64,
}

impl ConsistencyCell {
    pub fn is_diagonal(&self) -> bool {
        self.train_space == self.test_space
    }

    pub fn defined(&self) -> bool {
        self.c_score.is_some()
    }

    pub fn score_std(&self) -> Option<f64> {
        let v: Vec<f64> = self.seed_scores.iter().copied().collect::<Option<Vec<f64>>>()?;
        Some(std_dev(&v))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub algo: Algo,
    pub mode: Mode,
    pub ood_cells: usize,
    pub defined_cells: usize,
    pub mean_c_score: Option<f64>,
    pub mean_c_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub cells: Vec<ConsistencyCell>,
    pub summary: Vec<SummaryRow>,
}

type CellKey = (Algo, Mode, String, String);

fn baseline_key(m: &RunMeta) -> (Algo, Mode, Option<String>, String, u64) {
    let base = m.mode.baseline();
    let train = if base == Mode::ScratchMeta { None } else { m.train_space.clone() };
    (m.algo, base, train, m.test_space.clone(), m.seed)
}

fn mean_curve(curves: &[&LearningCurve]) -> Result<LearningCurve> {
    let frames = curves[0].frames();
    if curves.iter().any(|c| c.frames() != frames) {
        return Err(Error::Config("seed curves differ in evaluation frames".into()));
    }
    let pts: Vec<(u64, f64)> = frames
        .iter()
        .enumerate()
        .map(|(i, &f)| (f, curves.iter().map(|c| c.points[i].mean_return).sum::<f64>() / curves.len() as f64))
        .collect();
    LearningCurve::from_points(curves[0].run_id.clone(), curves[0].seed, &pts)
}

/// Pair every adapted run with its baseline and aggregate per cell.
pub fn build_report(runs: &[RunRecord], agg: Aggregation) -> Result<ConsistencyReport> {
    let mut baselines = BTreeMap::new();
    for r in runs.iter().filter(|r| r.meta.mode.is_scratch()) {
        let m = &r.meta;
        let train = if m.mode == Mode::ScratchMeta { None } else { m.train_space.clone() };
        baselines.insert((m.algo, m.mode, train, m.test_space.clone(), m.seed), r);
    }
    let mut groups: BTreeMap<CellKey, Vec<(&RunRecord, &RunRecord)>> = BTreeMap::new();
    let mut missing = Vec::new();
    for r in runs.iter().filter(|r| !r.meta.mode.is_scratch()) {
        let m = &r.meta;
        let key = baseline_key(m);
        let train = m.train_space.clone().unwrap_or_default();
        match baselines.get(&key) {
            Some(b) => {
                if b.meta.budget != m.budget {
                    return Err(Error::Config(format!("budget mismatch between {} and its baseline", r.curve.run_id)));
                }
                groups.entry((m.algo, m.mode, train, m.test_space.clone())).or_default().push((r, b));
            }
            None => missing.push(format!("{}/{}/{}->{}/seed {}", m.algo, m.mode, train, m.test_space, m.seed)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingPairs(missing));
    }
    let mut cells = Vec::with_capacity(groups.len());
    for ((algo, mode, train, test), mut pairs) in groups {
        pairs.sort_by_key(|(r, _)| r.meta.seed);
        let budget = pairs[0].0.meta.budget;
        let firsts: Vec<f64> = pairs.iter().map(|(_, b)| b.curve.first_return().expect("non-empty")).collect();
        let r0 = mean(&firsts);
        let mut seed_scores = Vec::with_capacity(pairs.len());
        let mut seed_rates = Vec::with_capacity(pairs.len());
        for (r, b) in &pairs {
            let sm = smooth(&r.curve, SMOOTH_WINDOW)?;
            let sb = smooth(&b.curve, SMOOTH_WINDOW)?;
            seed_scores.push(c_score(&sm, &sb, r0));
            seed_rates.push(c_rate(&sb, &sm, budget));
        }
        let (c_score_v, c_rate_v) = match agg {
            Aggregation::PerSeed => {
                let s = seed_scores.iter().copied().collect::<Option<Vec<f64>>>().map(|v| mean(&v));
                (s, mean(&seed_rates))
            }
            Aggregation::MeanCurve => {
                let mc: Vec<&LearningCurve> = pairs.iter().map(|(r, _)| &r.curve).collect();
                let bc: Vec<&LearningCurve> = pairs.iter().map(|(_, b)| &b.curve).collect();
                let sm = smooth(&mean_curve(&mc)?, SMOOTH_WINDOW)?;
                let sb = smooth(&mean_curve(&bc)?, SMOOTH_WINDOW)?;
                (c_score(&sm, &sb, r0), c_rate(&sb, &sm, budget))
            }
        };
        cells.push(ConsistencyCell {
            algo,
            mode,
            train_space: train,
            test_space: test,
            seed_count: pairs.len(),
            c_score: c_score_v,
            c_rate: c_rate_v,
            seed_scores,
            seed_rates,
            r_theta0: r0,
        });
    }
    let mut by_am: BTreeMap<(Algo, Mode), Vec<&ConsistencyCell>> = BTreeMap::new();
    for c in cells.iter().filter(|c| !c.is_diagonal()) {
        by_am.entry((c.algo, c.mode)).or_default().push(c);
    }
    let summary = by_am
        .into_iter()
        .map(|((algo, mode), cs)| {
            let defined: Vec<f64> = cs.iter().filter_map(|c| c.c_score).collect();
            let rates: Vec<f64> = cs.iter().map(|c| c.c_rate).collect();
            SummaryRow {
                algo,
                mode,
                ood_cells: cs.len(),
                defined_cells: defined.len(),
                mean_c_score: (!defined.is_empty()).then(|| mean(&defined)),
                mean_c_rate: mean(&rates),
            }
        })
        .collect();
    Ok(ConsistencyReport { cells, summary })
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

impl ConsistencyReport {
    pub fn cell(&self, algo: Algo, mode: Mode, train: &str, test: &str) -> Option<&ConsistencyCell> {
        self.cells.iter().find(|c| c.algo == algo && c.mode == mode && c.train_space == train && c.test_space == test)
    }

    pub fn summary_for(&self, algo: Algo, mode: Mode) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.algo == algo && s.mode == mode)
    }

    /// `report.csv` contents; undefined scores are left empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(["algo", "mode", "train_space", "test_space", "seed_count", "c_score", "c_rate", "defined"])?;
        for c in &self.cells {
            w.write_record([
                c.algo.key().to_string(),
                c.mode.key().to_string(),
                c.train_space.clone(),
                c.test_space.clone(),
                c.seed_count.to_string(),
                c.c_score.map(fmt6).unwrap_or_default(),
                fmt6(c.c_rate),
                c.defined().to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf8"))
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(["algo", "mode", "ood_cells", "defined_cells", "mean_c_score", "mean_c_rate"])?;
        for s in &self.summary {
            w.write_record([
                s.algo.key().to_string(),
                s.mode.key().to_string(),
                s.ood_cells.to_string(),
                s.defined_cells.to_string(),
                s.mean_c_score.map(fmt6).unwrap_or_default(),
                fmt6(s.mean_c_rate),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf8"))
    }

    /// Heatmap of one metric with train spaces as rows and test spaces as
    /// columns, in first-appearance order.
    pub fn heatmap_svg(&self, algo: Algo, mode: Mode, metric: Metric) -> String {
        let cells: Vec<&ConsistencyCell> = self.cells.iter().filter(|c| c.algo == algo && c.mode == mode).collect();
        let mut rows: Vec<&str> = Vec::new();
        let mut cols: Vec<&str> = Vec::new();
        for c in &cells {
            if !rows.contains(&c.train_space.as_str()) {
                rows.push(&c.train_space);
            }
            if !cols.contains(&c.test_space.as_str()) {
                cols.push(&c.test_space);
            }
        }
        let value = |c: &ConsistencyCell| match metric {
            Metric::Score => c.c_score,
            Metric::Rate => Some(c.c_rate),
        };
        let vals: Vec<f64> = cells.iter().filter_map(|c| value(c)).collect();
        let (lo, hi) = match metric {
            Metric::Score => (vals.iter().copied().fold(0.0, f64::min), vals.iter().copied().fold(1.0, f64::max)),
            Metric::Rate => (0.0, vals.iter().copied().fold(1.0, f64::max)),
        };
        let (cw, ch, left, top) = (110.0, 48.0, 150.0, 60.0);
        let width = left + cw * cols.len() as f64 + 20.0;
        let height = top + ch * rows.len() as f64 + 20.0;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{} {} {}</text>"#, width / 2.0, algo, mode, metric.key());
        for (j, col) in cols.iter().enumerate() {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + cw * (j as f64 + 0.5), top - 8.0, xml_escape(col));
        }
        for (i, row) in rows.iter().enumerate() {
            let y = top + ch * i as f64;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 8.0, y + ch / 2.0 + 4.0, xml_escape(row));
            for (j, col) in cols.iter().enumerate() {
                let x = left + cw * j as f64;
                let cell = cells.iter().find(|c| c.train_space == *row && c.test_space == *col);
                let (fill, label) = match cell.and_then(|c| value(c)) {
                    Some(v) => (color((v - lo) / (hi - lo).max(1e-12)), format!("{v:.2}")),
                    None if cell.is_some() => ("#bdbdbd".to_string(), "undef".to_string()),
                    None => ("#ffffff".to_string(), String::new()),
                };
                let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{fill}" stroke="#ffffff"/>"##);
                let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#, x + cw / 2.0, y + ch / 2.0 + 4.0);
            }
        }
        s.push_str("</svg>\n");
        s
    }

    /// `report.csv`, `summary.csv` and one heatmap per algorithm, mode and
    /// metric.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv()?)?;
        let mut pairs: Vec<(Algo, Mode)> = self.cells.iter().map(|c| (c.algo, c.mode)).collect();
        pairs.dedup();
        pairs.sort();
        pairs.dedup();
        for (a, m) in pairs {
            for metric in [Metric::Score, Metric::Rate] {
                let name = format!("heatmap_{}_{}_{}.svg", a.key(), m.key(), metric.key());
                std::fs::write(dir.join(name), self.heatmap_svg(a, m, metric))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Score,
    Rate,
}

impl Metric {
    pub fn key(self) -> &'static str {
        match self {
            Metric::Score => "c_score",
            Metric::Rate => "c_rate",
        }
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// White-to-blue ramp on `[0, 1]`.
fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(247.0, 8.0), lerp(251.0, 69.0), lerp(255.0, 148.0))
}
