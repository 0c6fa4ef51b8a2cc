//! Dice and Hausdorff metrics over the WT/TC/ET regions, and the per-pattern
//! result table.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dropout::{enumerate_patterns, PatternMask};
use crate::error::{Error, Result};
use crate::volumes::{labels_to_regions, LabelVolume, Mask, MultiModalVolume, Region};

/// Largest mask (in voxels) the brute-force Hausdorff oracle accepts.
pub const BRUTEFORCE_MAX_VOXELS: usize = 16 * 16 * 16;

/// Voxel-center coordinate.
pub type Point = [usize; 3];

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty, 0 when only one is.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(match (tp + fp == 0, tp + fn_ == 0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
    })
}

fn check_shapes(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("mask shapes {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// Foreground voxels with a 6-connected background or out-of-bounds neighbour,
/// in raster order.
pub fn extract_surface(mask: &Mask) -> Vec<Point> {
    let [d, h, w] = mask.shape;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(z, y, x) {
                    continue;
                }
                let interior = z > 0
                    && z + 1 < d
                    && y > 0
                    && y + 1 < h
                    && x > 0
                    && x + 1 < w
                    && mask.get(z - 1, y, x)
                    && mask.get(z + 1, y, x)
                    && mask.get(z, y - 1, x)
                    && mask.get(z, y + 1, x)
                    && mask.get(z, y, x - 1)
                    && mask.get(z, y, x + 1);
                if !interior {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn squared_mm(a: Point, b: Point, spacing: [f64; 3]) -> f64 {
    (0..3)
        .map(|k| {
            let d = (a[k] as f64 - b[k] as f64) * spacing[k];
            d * d
        })
        .sum()
}

/// Directed max-min squared distance, skipping a source point as soon as it
/// is provably no farther than the running maximum.
fn directed_squared(from: &[Point], to: &[Point], spacing: [f64; 3]) -> f64 {
    let mut worst = 0.0f64;
    for &a in from {
        let mut best = f64::INFINITY;
        for &b in to {
            let d = squared_mm(a, b, spacing);
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Shape(format!("voxel spacing {spacing:?} must be positive")));
    }
    Ok(())
}

/// Symmetric Hausdorff distance in mm between the two surfaces.
///
/// `Ok(None)` when either surface is empty (the metric is undefined).
pub fn hausdorff(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    check_spacing(spacing)?;
    let (a, b) = (extract_surface(pred), extract_surface(gt));
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    Ok(Some(hausdorff_points(&a, &b, spacing)))
}

/// Hausdorff distance between two non-empty point sets.
pub fn hausdorff_points(a: &[Point], b: &[Point], spacing: [f64; 3]) -> f64 {
    directed_squared(a, b, spacing)
        .max(directed_squared(b, a, spacing))
        .sqrt()
}

/// All-pairs reference implementation; only for masks up to 16³ voxels.
pub fn hausdorff_bruteforce(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    check_spacing(spacing)?;
    let n: usize = pred.shape.iter().product();
    if n > BRUTEFORCE_MAX_VOXELS {
        return Err(Error::Oracle(format!(
            "brute-force Hausdorff limited to {BRUTEFORCE_MAX_VOXELS} voxels, got {n}"
        )));
    }
    let (a, b) = (extract_surface(pred), extract_surface(gt));
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let dist = |p: Point, q: Point| squared_mm(p, q, spacing).sqrt();
    let directed = |s: &[Point], r: &[Point]| {
        s.iter()
            .map(|&p| r.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Ok(Some(directed(&a, &b).max(directed(&b, &a))))
}

/// Per-region means over subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub dice: f64,
    /// Mean over subjects where the distance is defined.
    pub hd: Option<f64>,
    /// Subjects whose distance was undefined.
    pub hd_undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub pattern: PatternMask,
    /// WT, TC, ET.
    pub regions: [RegionStats; 3],
}

impl PatternRow {
    pub fn avg_dice(&self) -> f64 {
        self.regions.iter().map(|r| r.dice).sum::<f64>() / 3.0
    }

    /// Mean of the defined region distances.
    pub fn avg_hd(&self) -> Option<f64> {
        mean_defined(self.regions.iter().map(|r| r.hd))
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Dice and Hausdorff per availability pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub name: String,
    pub rows: Vec<PatternRow>,
}

pub const TABLE_FOOTER: &str = "Dice in percent, HD in mm. Both masks empty: Dice 100. \
Exactly one empty: Dice 0 and HD undefined (\"-\", excluded from means). \
Surfaces use 6-connectivity.";

impl ResultTable {
    /// Row order follows [`enumerate_patterns`].
    pub fn sorted(mut self) -> Self {
        self.rows.sort_by_key(|r| r.pattern.table_index());
        self
    }

    pub fn row(&self, pattern: PatternMask) -> Option<&PatternRow> {
        self.rows.iter().find(|r| r.pattern == pattern)
    }

    /// Mean over pattern rows, per region.
    pub fn average(&self) -> [RegionStats; 3] {
        let n = self.rows.len().max(1) as f64;
        [0, 1, 2].map(|k| RegionStats {
            dice: self.rows.iter().map(|r| r.regions[k].dice).sum::<f64>() / n,
            hd: mean_defined(self.rows.iter().map(|r| r.regions[k].hd)),
            hd_undefined: self.rows.iter().map(|r| r.regions[k].hd_undefined).sum(),
        })
    }

    /// Mean AVG dice over pattern rows.
    pub fn mean_avg_dice(&self) -> f64 {
        self.rows.iter().map(PatternRow::avg_dice).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// `pattern,region,dsc,hd,hd_undefined`; missing distances are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pattern,region,dsc,hd,hd_undefined\n");
        for row in &self.rows {
            for (region, s) in Region::ALL.iter().zip(&row.regions) {
                let hd = s.hd.map(|h| format!("{h:.6}")).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{},{}",
                    row.pattern.bits(),
                    region.name(),
                    s.dice,
                    hd,
                    s.hd_undefined
                );
            }
        }
        out
    }

    pub fn from_csv(name: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty result CSV".into()))?;
        if !header.starts_with("pattern,region,dsc,hd") {
            return Err(Error::Format(format!("unexpected CSV header {header:?}")));
        }
        let mut rows: Vec<(PatternMask, [Option<RegionStats>; 3])> = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = |what: &str| Error::Format(format!("CSV line {}: {what}: {line:?}", i + 2));
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() < 4 {
                return Err(bad("expected at least 4 columns"));
            }
            let pattern: PatternMask = cells[0].parse().map_err(|_| bad("bad pattern"))?;
            let region = Region::from_name(cells[1]).ok_or_else(|| bad("bad region"))?;
            let dice: f64 = cells[2].parse().map_err(|_| bad("bad dsc"))?;
            let hd = match cells[3] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("bad hd"))?),
            };
            let hd_undefined = match cells.get(4) {
                Some(s) if !s.is_empty() => s.parse().map_err(|_| bad("bad hd_undefined"))?,
                _ => 0,
            };
            let k = Region::ALL.iter().position(|r| *r == region).expect("known region");
            let slot = match rows.iter().position(|(p, _)| *p == pattern) {
                Some(j) => j,
                None => {
                    rows.push((pattern, Default::default()));
                    rows.len() - 1
                }
            };
            rows[slot].1[k] = Some(RegionStats { dice, hd, hd_undefined });
        }
        let rows = rows
            .into_iter()
            .map(|(pattern, regions)| {
                let [wt, tc, et] = regions;
                match (wt, tc, et) {
                    (Some(a), Some(b), Some(c)) => Ok(PatternRow {
                        pattern,
                        regions: [a, b, c],
                    }),
                    _ => Err(Error::Format(format!("pattern {pattern} lacks a region"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.into(),
            rows,
        }
        .sorted())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_csv(name, &text)
    }

    pub fn to_text(&self) -> String {
        render_comparison(std::slice::from_ref(self))
    }
}

/// Published full-modality Dice (WT, TC, ET) of the complete model on real
/// data, printed next to reports for orientation only.
pub const REFERENCE_FULL_DICE: [f64; 3] = [86.6, 85.8, 76.9];

pub fn reference_row() -> String {
    let [wt, tc, et] = REFERENCE_FULL_DICE;
    format!("Reference (published, full modalities, real data): WT {wt:.1}  TC {tc:.1}  ET {et:.1} Dice (%)")
}

/// Several tables in one CSV, `table` first.
pub fn comparison_csv(tables: &[ResultTable]) -> String {
    let mut out = String::from("table,pattern,region,dsc,hd,hd_undefined\n");
    for t in tables {
        for line in t.to_csv().lines().skip(1) {
            let _ = writeln!(out, "{},{line}", t.name);
        }
    }
    out
}

fn fmt_hd(v: Option<f64>) -> String {
    v.map(|h| format!("{h:.2}")).unwrap_or_else(|| "-".into())
}

/// Side-by-side text table: one row per pattern in table order plus an
/// Average row, with WT/TC/ET/AVG columns for each table, Dice then HD.
pub fn render_comparison(tables: &[ResultTable]) -> String {
    let mut out = String::new();
    let group = |out: &mut String, cells: &[String]| {
        for c in cells {
            let _ = write!(out, " {c:>7}");
        }
        out.push_str(" |");
    };
    for (metric, is_dice) in [("Dice (%)", true), ("Hausdorff (mm)", false)] {
        let _ = writeln!(out, "{metric}");
        let _ = write!(out, "{:<2} {:<2} {:<3} {:<2} |", "F", "T1", "T1c", "T2");
        for t in tables {
            let title: String = t.name.chars().take(31).collect();
            let _ = write!(out, " {title:^31} |");
        }
        out.push('\n');
        let _ = write!(out, "{:12}|", "");
        for _ in tables {
            group(&mut out, &["WT", "TC", "ET", "AVG"].map(String::from));
        }
        out.push('\n');
        let patterns: Vec<PatternMask> = {
            let mut seen: Vec<PatternMask> = Vec::new();
            for p in enumerate_patterns() {
                if tables.iter().any(|t| t.row(p).is_some()) {
                    seen.push(p);
                }
            }
            seen
        };
        for p in &patterns {
            let sym: Vec<char> = p.symbols().chars().collect();
            let _ = write!(out, "{:<2} {:<2} {:<3} {:<2} |", sym[0], sym[1], sym[2], sym[3]);
            for t in tables {
                let cells: Vec<String> = match t.row(*p) {
                    Some(r) if is_dice => r
                        .regions
                        .iter()
                        .map(|s| format!("{:.1}", 100.0 * s.dice))
                        .chain([format!("{:.1}", 100.0 * r.avg_dice())])
                        .collect(),
                    Some(r) => r
                        .regions
                        .iter()
                        .map(|s| fmt_hd(s.hd))
                        .chain([fmt_hd(r.avg_hd())])
                        .collect(),
                    None => vec!["".into(); 4],
                };
                group(&mut out, &cells);
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<12}|", "Average");
        for t in tables {
            let avg = t.average();
            let cells: Vec<String> = if is_dice {
                avg.iter()
                    .map(|s| format!("{:.1}", 100.0 * s.dice))
                    .chain([format!("{:.1}", 100.0 * t.mean_avg_dice())])
                    .collect()
            } else {
                avg.iter()
                    .map(|s| fmt_hd(s.hd))
                    .chain([fmt_hd(mean_defined(avg.iter().map(|s| s.hd)))])
                    .collect()
            };
            group(&mut out, &cells);
        }
        out.push_str("\n\n");
    }
    let _ = writeln!(out, "• present, ◦ missing. {TABLE_FOOTER}");
    out
}

/// Metrics of one prediction against ground truth, per region.
pub fn region_metrics(
    pred: &LabelVolume,
    gt: &LabelVolume,
    spacing: [f64; 3],
) -> Result<[(f64, Option<f64>); 3]> {
    let (p, g) = (labels_to_regions(pred), labels_to_regions(gt));
    let mut out = [(0.0, None); 3];
    for k in 0..3 {
        out[k] = (
            dice_score(&p[k].mask, &g[k].mask)?,
            hausdorff(&p[k].mask, &g[k].mask, spacing)?,
        );
    }
    Ok(out)
}

/// Evaluate `predict` on every subject under every pattern.
///
/// `predict` receives the subject with the pattern already applied.
pub fn evaluate_patterns<F>(
    name: impl Into<String>,
    mut predict: F,
    dataset: &[(&MultiModalVolume, &LabelVolume)],
    patterns: &[PatternMask],
    spacing: [f64; 3],
) -> Result<ResultTable>
where
    F: FnMut(&MultiModalVolume, PatternMask) -> Result<LabelVolume>,
{
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("no subjects to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(patterns.len());
    for &pattern in patterns {
        let mut dice = [0.0f64; 3];
        let mut hd_sum = [0.0f64; 3];
        let mut hd_n = [0usize; 3];
        for (subject, gt) in dataset {
            let input = crate::dropout::apply_pattern(subject, pattern)?;
            let pred = predict(&input, pattern)?;
            for (k, (d, h)) in region_metrics(&pred, gt, spacing)?.into_iter().enumerate() {
                dice[k] += d;
                if let Some(h) = h {
                    hd_sum[k] += h;
                    hd_n[k] += 1;
                }
            }
        }
        let n = dataset.len();
        let regions = [0, 1, 2].map(|k| RegionStats {
            dice: dice[k] / n as f64,
            hd: (hd_n[k] > 0).then(|| hd_sum[k] / hd_n[k] as f64),
            hd_undefined: n - hd_n[k],
        });
        rows.push(PatternRow { pattern, regions });
    }
    Ok(ResultTable {
        name: name.into(),
        rows,
    }
    .sorted())
}
