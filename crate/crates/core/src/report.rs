//! Report emission: delimiter-separated tables with an aligned plain-text
//! rendering, faithfulness landscapes (grid plus a self-contained SVG
//! heatmap), and claim-faithfulness distribution summaries.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::backend::CostRow;
use crate::evaluation::{
    DirectionComparison, GenerationAblationRow, KernelAblationRow, MethodEvalRow,
};
use crate::model::ScoreVector;

/// A titled table that renders as aligned text and round-trips through its
/// own tab-separated format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn new(title: impl Into<String>, columns: Vec<String>) -> Self {
        Self {
            title: title.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width mismatch");
        self.rows.push(row);
    }

    /// Aligned plain-text rendering.
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for row in &self.rows {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.chars().count());
            }
        }
        let mut out = String::new();
        out.push_str(&format!("# {}\n", self.title));
        let render_row = |cells: &[String]| {
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{:<width$}", c, width = widths[i]))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        out.push_str(&render_row(&self.columns));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1).max(0)));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&render_row(row));
            out.push('\n');
        }
        out
    }

    fn sanitize(cell: &str) -> String {
        cell.replace(['\t', '\n', '\r'], " ")
    }

    /// Tab-separated form: `# title`, header line, then one line per row.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# {}\n", Self::sanitize(&self.title));
        out.push_str(&self.columns.iter().map(|c| Self::sanitize(c)).collect::<Vec<_>>().join("\t"));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(|c| Self::sanitize(c)).collect::<Vec<_>>().join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let title = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or("missing '# title' line")?
            .to_string();
        let columns: Vec<String> = lines
            .next()
            .ok_or("missing header line")?
            .split('\t')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let row: Vec<String> = line.split('\t').map(str::to_string).collect();
            if row.len() != columns.len() {
                return Err(format!(
                    "row width {} != header width {}",
                    row.len(),
                    columns.len()
                ));
            }
            rows.push(row);
        }
        Ok(Self {
            title,
            columns,
            rows,
        })
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_tsv().as_bytes())
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> std::io::Result<Result<Self, String>> {
        Ok(Self::from_tsv(&std::fs::read_to_string(path)?))
    }
}

fn fmt3(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.3}"),
        None => "-".to_string(),
    }
}

/// Evaluation table in the rows-are-methods layout, one column per dataset
/// plus the cross-dataset average, for a chosen metric column.
pub fn eval_table(rows: &[MethodEvalRow], metric: &str) -> TextTable {
    let mut datasets: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for row in rows {
        if !datasets.contains(&row.dataset_tag) {
            datasets.push(row.dataset_tag.clone());
        }
        if !methods.contains(&row.method) {
            methods.push(row.method.clone());
        }
    }
    let mut columns = vec!["Method".to_string(), "Orientation".to_string()];
    columns.extend(datasets.clone());
    columns.push("Avg.".to_string());
    let mut table = TextTable::new(format!("{metric} by method and dataset"), columns);
    for method_name in &methods {
        let mut cells = vec![method_name.clone(), String::new()];
        let mut values = Vec::new();
        for dataset in &datasets {
            let row = rows
                .iter()
                .find(|r| &r.method == method_name && &r.dataset_tag == dataset);
            let value = row.and_then(|r| match metric {
                "auprc" => r.auprc,
                "pearson" => r.pearson_r,
                _ => r.auroc,
            });
            if let Some(r) = row {
                cells[1] = match r.orientation {
                    crate::model::Orientation::HigherIsConfident => "confident".into(),
                    crate::model::Orientation::HigherIsUncertain => "uncertain".into(),
                };
            }
            if let Some(v) = value {
                values.push(v);
            }
            cells.push(fmt3(value));
        }
        let avg = if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        };
        cells.push(fmt3(avg));
        table.push_row(cells);
    }
    table
}

/// Pearson table: r with 95% CI and p-value per method and dataset.
pub fn pearson_table(rows: &[MethodEvalRow]) -> TextTable {
    let mut table = TextTable::new(
        "Pearson r with Fisher 95% CI",
        vec![
            "Method".into(),
            "Dataset".into(),
            "r".into(),
            "CI low".into(),
            "CI high".into(),
            "p".into(),
            "n".into(),
            "excluded".into(),
        ],
    );
    for row in rows {
        if row.pearson_r.is_none() {
            continue;
        }
        table.push_row(vec![
            row.method.clone(),
            row.dataset_tag.clone(),
            fmt3(row.pearson_r),
            fmt3(row.ci_low),
            fmt3(row.ci_high),
            row.p_value
                .map(|p| {
                    if p < 0.001 {
                        "<0.001".to_string()
                    } else {
                        format!("{p:.4}")
                    }
                })
                .unwrap_or_else(|| "-".into()),
            row.n_claims.to_string(),
            row.n_excluded.to_string(),
        ]);
    }
    table
}

/// Model-faithfulness table: one row per dataset, one column per model.
pub fn faithfulness_table(per_dataset: &BTreeMap<String, f64>, model: &str) -> TextTable {
    let mut table = TextTable::new(
        "Model faithfulness by dataset",
        vec!["Dataset".into(), model.to_string()],
    );
    for (dataset, value) in per_dataset {
        table.push_row(vec![dataset.clone(), fmt3(Some(*value))]);
    }
    table
}

fn kernel_display(name: &str) -> String {
    let base = name.split(':').next().unwrap_or(name);
    let label = match base {
        "exp" => "Exp-E",
        "lin" => "Lin-E",
        "acc" => "Acc-E",
        "none" => "No-E",
        other => other,
    };
    format!("{label} ({name})")
}

/// Kernel ablation table: one row per propagation kernel.
pub fn kernel_table(rows: &[KernelAblationRow]) -> TextTable {
    let datasets: Vec<String> = rows
        .first()
        .map(|r| r.aurocs.iter().map(|(d, _)| d.clone()).collect())
        .unwrap_or_default();
    let mut columns = vec!["Kernel".to_string()];
    columns.extend(datasets);
    columns.push("Avg.".to_string());
    let mut table = TextTable::new("auroc by propagation kernel", columns);
    for row in rows {
        let mut cells = vec![kernel_display(&row.kernel)];
        for (_, auroc) in &row.aurocs {
            cells.push(fmt3(*auroc));
        }
        cells.push(fmt3(row.average));
        table.push_row(cells);
    }
    table
}

/// Generation-count ablation table: one row per evidence-pool size.
pub fn generations_table(rows: &[GenerationAblationRow]) -> TextTable {
    let methods: Vec<String> = rows
        .iter()
        .find(|r| !r.aurocs.is_empty())
        .map(|r| r.aurocs.iter().map(|(m, _)| m.clone()).collect())
        .unwrap_or_default();
    let mut columns = vec!["n".to_string()];
    columns.extend(methods);
    columns.push("note".to_string());
    let mut table = TextTable::new("auroc by number of sampled responses", columns);
    for row in rows {
        let mut cells = vec![row.n.to_string()];
        if row.aurocs.is_empty() {
            for _ in 1..table.columns.len() - 1 {
                cells.push("-".into());
            }
        } else {
            for (_, auroc) in &row.aurocs {
                cells.push(fmt3(*auroc));
            }
        }
        cells.push(row.skipped.clone().unwrap_or_default());
        table.push_row(cells);
    }
    table
}

/// Direction comparison table with percentage deltas relative to the
/// forward direction.
pub fn direction_table(rows: &[DirectionComparison]) -> TextTable {
    let mut table = TextTable::new(
        "auroc by contradiction direction",
        vec![
            "Dataset".into(),
            "Ent. (S)".into(),
            "forward".into(),
            "reversed".into(),
            "rev delta".into(),
            "note".into(),
        ],
    );
    for row in rows {
        table.push_row(vec![
            row.dataset_tag.clone(),
            fmt3(row.entailment_auroc),
            fmt3(row.iuq_auroc),
            fmt3(row.iuq_rev_auroc),
            row.rev_delta_pct
                .map(|d| format!("{d:+.1}%"))
                .unwrap_or_else(|| "-".into()),
            row.note.clone().unwrap_or_default(),
        ]);
    }
    table
}

/// Cost report table: one row per stage plus the exact totals row.
pub fn cost_table(rows: &[CostRow], n_topics: usize) -> TextTable {
    let mut table = TextTable::new(
        format!("per-stage token consumption ({n_topics} topics)"),
        vec![
            "Stage".into(),
            "Requests".into(),
            "Prompt".into(),
            "Completion".into(),
            "Total".into(),
            "Avg. Tokens/Topic".into(),
            "Cached".into(),
            "Approx.".into(),
        ],
    );
    for row in rows {
        table.push_row(vec![
            row.stage.clone(),
            row.requests.to_string(),
            row.prompt_tokens.to_string(),
            row.completion_tokens.to_string(),
            row.total_tokens.to_string(),
            format!("{:.1}", row.avg_tokens_per_topic),
            row.cached_requests.to_string(),
            if row.approximate { "yes".into() } else { String::new() },
        ]);
    }
    table
}

/// Linearly resample a sequence to `target_len`, preserving endpoints.
pub fn interpolate_to(values: &[f64], target_len: usize) -> Vec<f64> {
    if values.is_empty() || target_len == 0 {
        return Vec::new();
    }
    if values.len() == 1 {
        return vec![values[0]; target_len];
    }
    if target_len == 1 {
        return vec![values[0]];
    }
    let last = values.len() - 1;
    (0..target_len)
        .map(|t| {
            let position = t as f64 * last as f64 / (target_len - 1) as f64;
            let low = position.floor() as usize;
            let high = position.ceil() as usize;
            if low == high {
                values[low]
            } else {
                let frac = position - low as f64;
                values[low] * (1.0 - frac) + values[high] * frac
            }
        })
        .collect()
}

/// Topic-by-claim grid of averaged, interpolated unfaithfulness weightings.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub dataset_tag: String,
    pub topic_ids: Vec<String>,
    /// One row per topic; trailing `None` pads topics with fewer claims.
    pub rows: Vec<Vec<Option<f64>>>,
    pub width: usize,
    /// Color-scale maximum: the largest weight in the grid.
    pub max_weight: f64,
    /// Topics that had no scored responses (blank rows).
    pub blank_topics: Vec<String>,
}

/// Build the faithfulness landscape for one dataset tag.
///
/// Per topic, each sample's weight sequence is linearly interpolated to the
/// topic's longest sample and the sequences are averaged elementwise. Grid
/// rows are topics (in score order), columns claim positions up to the
/// dataset-wide maximum.
pub fn landscape(scores: &[ScoreVector], dataset_tag: &str) -> LandscapeGrid {
    let mut topic_order: Vec<String> = Vec::new();
    let mut by_topic: BTreeMap<String, BTreeMap<u32, Vec<(u32, f64)>>> = BTreeMap::new();
    for sv in scores.iter().filter(|sv| sv.dataset_tag == dataset_tag) {
        if !topic_order.contains(&sv.topic_id) {
            topic_order.push(sv.topic_id.clone());
        }
        by_topic
            .entry(sv.topic_id.clone())
            .or_default()
            .entry(sv.sample_index)
            .or_default()
            .push((sv.claim_index, sv.weight));
    }

    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut blank_topics = Vec::new();
    for topic_id in &topic_order {
        let samples = &by_topic[topic_id];
        let mut sequences: Vec<Vec<f64>> = Vec::new();
        for per_sample in samples.values() {
            let mut ordered = per_sample.clone();
            ordered.sort_by_key(|(idx, _)| *idx);
            sequences.push(ordered.into_iter().map(|(_, w)| w).collect());
        }
        sequences.retain(|s| !s.is_empty());
        if sequences.is_empty() {
            blank_topics.push(topic_id.clone());
            rows.push(Vec::new());
            continue;
        }
        let target = sequences.iter().map(Vec::len).max().unwrap();
        let interpolated: Vec<Vec<f64>> =
            sequences.iter().map(|s| interpolate_to(s, target)).collect();
        let averaged: Vec<Option<f64>> = (0..target)
            .map(|i| {
                Some(
                    interpolated.iter().map(|s| s[i]).sum::<f64>() / interpolated.len() as f64,
                )
            })
            .collect();
        rows.push(averaged);
    }

    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    for row in &mut rows {
        row.resize(width, None);
    }
    let max_weight = rows
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |acc, w| acc.max(*w));
    LandscapeGrid {
        dataset_tag: dataset_tag.to_string(),
        topic_ids: topic_order,
        rows,
        width,
        max_weight,
        blank_topics,
    }
}

/// Comma-separated numeric grid; empty cells where a topic has no claim at
/// that position.
pub fn landscape_csv(grid: &LandscapeGrid) -> String {
    let mut out = String::from("topic_id");
    for i in 0..grid.width {
        out.push_str(&format!(",claim_{}", i + 1));
    }
    out.push('\n');
    for (topic_id, row) in grid.topic_ids.iter().zip(&grid.rows) {
        out.push_str(topic_id);
        for cell in row {
            out.push(',');
            if let Some(w) = cell {
                out.push_str(&format!("{w:.6}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Self-contained SVG heatmap of the landscape grid. The color scale runs
/// from white (0) to dark red (`max_weight`), printed in the legend.
pub fn landscape_svg(grid: &LandscapeGrid) -> String {
    const CELL: usize = 14;
    const LEFT: usize = 140;
    const TOP: usize = 40;
    let width = LEFT + grid.width * CELL + 20;
    let height = TOP + grid.rows.len() * CELL + 30;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<style>text{{font-family:monospace;font-size:10px}}\
         </style>\n"
    );
    svg.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"14\">unfaithfulness weighting, dataset {} \
         (scale 0..{:.3})</text>\n",
        xml_escape(&grid.dataset_tag),
        grid.max_weight
    ));
    for (r, (topic_id, row)) in grid.topic_ids.iter().zip(&grid.rows).enumerate() {
        let y = TOP + r * CELL;
        let label: String = topic_id.chars().take(18).collect();
        svg.push_str(&format!(
            "<text x=\"2\" y=\"{}\">{}</text>\n",
            y + CELL - 3,
            xml_escape(&label)
        ));
        for (c, cell) in row.iter().enumerate() {
            let x = LEFT + c * CELL;
            match cell {
                Some(w) => {
                    let intensity = if grid.max_weight > 0.0 {
                        (w / grid.max_weight).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let shade = (255.0 * (1.0 - intensity)) as u8;
                    svg.push_str(&format!(
                        "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" \
                         fill=\"rgb(255,{shade},{shade})\" stroke=\"#ccc\"/>\n"
                    ));
                }
                None => svg.push_str(&format!(
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" \
                     fill=\"none\" stroke=\"#eee\"/>\n"
                )),
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Histogram of claim faithfulness values and the per-response variance
/// summary for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FaithfulnessStats {
    pub dataset_tag: String,
    pub bin_count: usize,
    /// Counts over [0,1] split into `bin_count` equal bins.
    pub histogram: Vec<u64>,
    pub n_values: usize,
    /// Mean over responses of the population variance of F within the
    /// response.
    pub mean_within_response_variance: Option<f64>,
    pub model_faithfulness: Option<f64>,
}

/// Distribution and variance statistics per dataset tag.
pub fn faithfulness_stats(scores: &[ScoreVector], bin_count: usize) -> Vec<FaithfulnessStats> {
    let bin_count = bin_count.max(1);
    let mut datasets: Vec<String> = Vec::new();
    for sv in scores {
        if !datasets.contains(&sv.dataset_tag) {
            datasets.push(sv.dataset_tag.clone());
        }
    }
    datasets
        .into_iter()
        .map(|dataset| {
            let subset: Vec<&ScoreVector> =
                scores.iter().filter(|sv| sv.dataset_tag == dataset).collect();
            let mut histogram = vec![0u64; bin_count];
            let mut n_values = 0usize;
            for sv in &subset {
                if let Some(f) = sv.faithfulness {
                    let bin = ((f * bin_count as f64) as usize).min(bin_count - 1);
                    histogram[bin] += 1;
                    n_values += 1;
                }
            }
            // Population variance of F within each response, then averaged.
            let mut by_response: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for sv in &subset {
                if let Some(f) = sv.faithfulness {
                    by_response.entry(sv.response_id.as_str()).or_default().push(f);
                }
            }
            let variances: Vec<f64> = by_response
                .values()
                .map(|fs| {
                    let mean = fs.iter().sum::<f64>() / fs.len() as f64;
                    fs.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / fs.len() as f64
                })
                .collect();
            let mean_within_response_variance = if variances.is_empty() {
                None
            } else {
                Some(variances.iter().sum::<f64>() / variances.len() as f64)
            };

            // F(M): mean over topics of mean over samples of mean over claims.
            let mut per_topic: BTreeMap<&str, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
            for sv in &subset {
                if let Some(f) = sv.faithfulness {
                    per_topic
                        .entry(sv.topic_id.as_str())
                        .or_default()
                        .entry(sv.response_id.as_str())
                        .or_default()
                        .push(f);
                }
            }
            let topic_means: Vec<f64> = per_topic
                .values()
                .map(|responses| {
                    let response_means: Vec<f64> = responses
                        .values()
                        .map(|fs| fs.iter().sum::<f64>() / fs.len() as f64)
                        .collect();
                    response_means.iter().sum::<f64>() / response_means.len() as f64
                })
                .collect();
            let model_faithfulness = if topic_means.is_empty() {
                None
            } else {
                Some(topic_means.iter().sum::<f64>() / topic_means.len() as f64)
            };

            FaithfulnessStats {
                dataset_tag: dataset,
                bin_count,
                histogram,
                n_values,
                mean_within_response_variance,
                model_faithfulness,
            }
        })
        .collect()
}

/// Render one dataset's histogram as a bar-chart SVG. The footer notes the
/// population-variance convention.
pub fn histogram_svg(stats: &FaithfulnessStats) -> String {
    const BAR: usize = 18;
    const HEIGHT: usize = 160;
    const LEFT: usize = 30;
    let width = LEFT + stats.bin_count * BAR + 20;
    let height = HEIGHT + 70;
    let max_count = stats.histogram.iter().copied().max().unwrap_or(0).max(1);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<style>text{{font-family:monospace;font-size:10px}}\
         </style>\n"
    );
    svg.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"14\">claim faithfulness distribution, dataset {} (n={})</text>\n",
        xml_escape(&stats.dataset_tag),
        stats.n_values
    ));
    for (i, count) in stats.histogram.iter().enumerate() {
        let bar_height = (*count as f64 / max_count as f64 * HEIGHT as f64) as usize;
        let x = LEFT + i * BAR;
        let y = 30 + HEIGHT - bar_height;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"{}\" height=\"{bar_height}\" fill=\"#4477aa\"/>\n",
            BAR - 2
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"{}\">0.0 .. 1.0; within-response variance (population): {}</text>\n",
        HEIGHT + 50,
        stats
            .mean_within_response_variance
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into())
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap as Map;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} != {b} (tol {tol})");
    }

    #[test]
    fn interpolation_worked_example() {
        let out = interpolate_to(&[0.0, 1.0], 4);
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        assert_eq!(out.len(), 4);
        for (a, b) in out.iter().zip(want) {
            approx(*a, b, 1e-12);
        }
    }

    #[test]
    fn interpolation_identity_and_endpoints() {
        let seq = [0.3, 0.9, 0.1];
        assert_eq!(interpolate_to(&seq, 3), seq.to_vec());
        let out = interpolate_to(&seq, 11);
        assert_eq!(out[0], seq[0]);
        assert_eq!(out[10], seq[2]);
        assert_eq!(interpolate_to(&[0.7], 5), vec![0.7; 5]);
        assert!(interpolate_to(&[], 5).is_empty());
    }

    fn score(topic: &str, sample: u32, index: u32, weight: f64, f: Option<f64>) -> ScoreVector {
        ScoreVector {
            claim_id: format!("{topic}-{sample}-{index}"),
            response_id: format!("{topic}-{sample}"),
            topic_id: topic.into(),
            dataset_tag: "d".into(),
            sample_index: sample,
            claim_index: index,
            entailment: 1.0,
            faithfulness: f,
            weight,
            uncertainty: weight,
            weight_rev: None,
            uncertainty_rev: None,
            answer_uncertainty: None,
            confidence: (-weight).exp(),
            baselines: Map::new(),
            orientations: Map::new(),
        }
    }

    #[test]
    fn single_sample_landscape_row_is_its_own_sequence() {
        let scores = vec![
            score("t0", 0, 1, 0.1, Some(0.9)),
            score("t0", 0, 2, 0.5, Some(0.5)),
            score("t0", 0, 3, 0.2, Some(0.8)),
        ];
        let grid = landscape(&scores, "d");
        assert_eq!(grid.rows.len(), 1);
        assert_eq!(
            grid.rows[0],
            vec![Some(0.1), Some(0.5), Some(0.2)]
        );
    }

    #[test]
    fn mixed_length_samples_interpolate_then_average() {
        // Sample 0 has weights {0, 1} over 2 claims; sample 1 has 4 claims
        // of zeros. Interpolating {0,1} to length 4 gives {0,1/3,2/3,1}.
        let mut scores = vec![
            score("t0", 0, 1, 0.0, Some(1.0)),
            score("t0", 0, 2, 1.0, Some(0.0)),
        ];
        for i in 1..=4 {
            scores.push(score("t0", 1, i, 0.0, Some(1.0)));
        }
        let grid = landscape(&scores, "d");
        assert_eq!(grid.width, 4);
        let row = &grid.rows[0];
        approx(row[0].unwrap(), 0.0, 1e-12);
        approx(row[1].unwrap(), 1.0 / 6.0, 1e-12);
        approx(row[2].unwrap(), 1.0 / 3.0, 1e-12);
        approx(row[3].unwrap(), 0.5, 1e-12);
    }

    #[test]
    fn all_faithful_run_yields_zero_grid() {
        let scores = vec![
            score("t0", 0, 1, 0.0, Some(1.0)),
            score("t1", 0, 1, 0.0, Some(1.0)),
        ];
        let grid = landscape(&scores, "d");
        assert_eq!(grid.max_weight, 0.0);
        assert!(grid
            .rows
            .iter()
            .flatten()
            .all(|c| c.is_none() || *c == Some(0.0)));
        let svg = landscape_svg(&grid);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("scale 0..0.000"));
    }

    #[test]
    fn stats_variance_worked_example() {
        // One response with F values {0, 1}: population variance 0.25.
        let scores = vec![
            score("t0", 0, 1, 1.0, Some(0.0)),
            score("t0", 0, 2, 0.0, Some(1.0)),
        ];
        let stats = faithfulness_stats(&scores, 20);
        assert_eq!(stats.len(), 1);
        approx(stats[0].mean_within_response_variance.unwrap(), 0.25, 1e-12);
        approx(stats[0].model_faithfulness.unwrap(), 0.5, 1e-12);
        assert_eq!(stats[0].histogram.iter().sum::<u64>(), 2);
        // Degenerate all-faithful: point mass in the top bin, zero variance.
        let scores = vec![
            score("t0", 0, 1, 0.0, Some(1.0)),
            score("t0", 0, 2, 0.0, Some(1.0)),
        ];
        let stats = faithfulness_stats(&scores, 20);
        assert_eq!(stats[0].histogram[19], 2);
        approx(stats[0].mean_within_response_variance.unwrap(), 0.0, 0.0);
    }

    #[test]
    fn two_datasets_make_two_histogram_series() {
        let mut a = score("t0", 0, 1, 0.0, Some(1.0));
        a.dataset_tag = "alpha".into();
        let mut b = score("t1", 0, 1, 0.0, Some(0.2));
        b.dataset_tag = "beta".into();
        let stats = faithfulness_stats(&[a, b], 10);
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[0].dataset_tag, "alpha");
        assert_eq!(stats[1].dataset_tag, "beta");
    }

    #[test]
    fn tsv_round_trip_preserves_structure() {
        let mut table = TextTable::new(
            "demo table",
            vec!["Method".into(), "auroc".into(), "note".into()],
        );
        table.push_row(vec!["entailment".into(), "0.833".into(), String::new()]);
        table.push_row(vec!["iuq".into(), "0.912".into(), "best".into()]);
        let parsed = TextTable::from_tsv(&table.to_tsv()).unwrap();
        assert_eq!(parsed, table);
        // Cells with tabs are sanitized on write, so round-trip is lossy
        // only in whitespace, never in shape.
        let mut dirty = TextTable::new("t", vec!["a".into()]);
        dirty.push_row(vec!["x\ty".into()]);
        let parsed = TextTable::from_tsv(&dirty.to_tsv()).unwrap();
        assert_eq!(parsed.rows[0][0], "x y");
    }

    #[test]
    fn render_aligns_columns() {
        let mut table = TextTable::new("t", vec!["a".into(), "b".into()]);
        table.push_row(vec!["long-cell".into(), "1".into()]);
        table.push_row(vec!["x".into(), "22".into()]);
        let text = table.render();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].starts_with("a"));
        assert!(lines[3].starts_with("long-cell"));
        assert_eq!(lines[3].find('1'), lines[4].find('2'));
    }
}
