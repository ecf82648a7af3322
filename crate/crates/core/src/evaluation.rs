//! Correctness labeling against reference text and the evaluation metrics:
//! AUROC, AUPRC, and Pearson r with Fisher-z confidence interval and
//! p-value. Also the ablation harnesses that recompute scores from stored
//! artifacts without new model calls.
//!
//! Every method is evaluated as a binary classifier of claim correctness.
//! Confidences are oriented before ranking: methods flagged
//! higher-is-uncertain are negated, so AUROC always reads
//! "probability a correct claim outranks an incorrect one".

use std::collections::{BTreeMap, BTreeSet, HashMap};

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::backend::{Client, CompletionRequest, StageTag};
use crate::model::{
    method, ClaimRecord, CorrectnessLabel, KernelSpec, Label, Orientation, RunArtifacts,
    ScoreVector, TopicItem,
};
use crate::par;
use crate::scoring::{self, ScoreConfig};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("single-class input: {0}")]
    SingleClass(String),
    #[error("no positive labels")]
    NoPositives,
    #[error("zero variance in {0}")]
    ZeroVariance(String),
    #[error("need at least {needed} points, got {got}")]
    TooFew { needed: usize, got: usize },
}

/// Area under the ROC curve by the Mann-Whitney pair count.
///
/// `scored` pairs a pre-oriented confidence (higher means more confident)
/// with the binary correctness label. Ties contribute half a win. The
/// counting is done in integers so the result equals the quadratic pairwise
/// oracle exactly.
pub fn auroc(scored: &[(f64, bool)]) -> Result<f64, MetricError> {
    let n_pos = scored.iter().filter(|(_, l)| *l).count() as u64;
    let n_neg = scored.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass(format!(
            "{n_pos} positives, {n_neg} negatives"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("comparable confidences"));

    let mut wins = 0u64; // (pos, neg) pairs with conf_pos > conf_neg
    let mut ties = 0u64;
    let mut negatives_below = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let mut group_pos = 0u64;
        let mut group_neg = 0u64;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                group_pos += 1;
            } else {
                group_neg += 1;
            }
            j += 1;
        }
        wins += negatives_below * group_pos;
        ties += group_neg * group_pos;
        negatives_below += group_neg;
        i = j;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (n_pos * n_neg) as f64)
}

/// Area under the precision-recall curve as average precision, grouping
/// equal confidences at a single threshold.
pub fn auprc(scored: &[(f64, bool)]) -> Result<f64, MetricError> {
    let n_pos = scored.iter().filter(|(_, l)| *l).count();
    if n_pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("comparable confidences"));

    let mut cum_pos = 0usize;
    let mut cum_all = 0usize;
    let mut ap_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let mut group_pos = 0usize;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                group_pos += 1;
            }
            j += 1;
        }
        cum_pos += group_pos;
        cum_all += j - i;
        if group_pos > 0 {
            ap_sum += group_pos as f64 * (cum_pos as f64 / cum_all as f64);
        }
        i = j;
    }
    Ok(ap_sum / n_pos as f64)
}

/// Pearson r with its Fisher-z 95% confidence interval and two-sided
/// p-value.
#[derive(Debug, Clone, PartialEq)]
pub struct PearsonResult {
    pub r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Sample Pearson correlation between confidences and labels, with
/// `z = atanh(r)`, `se = 1/sqrt(n-3)`, CI `tanh(z +- 1.96*se)` and the
/// normal-approximation p-value.
pub fn pearson_with_ci(pairs: &[(f64, f64)]) -> Result<PearsonResult, MetricError> {
    let n = pairs.len();
    if n < 4 {
        return Err(MetricError::TooFew { needed: 4, got: n });
    }
    let nf = n as f64;
    let mean_x = pairs.iter().map(|(x, _)| x).sum::<f64>() / nf;
    let mean_y = pairs.iter().map(|(_, y)| y).sum::<f64>() / nf;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (x, y) in pairs {
        let dx = x - mean_x;
        let dy = y - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 {
        return Err(MetricError::ZeroVariance("confidences".into()));
    }
    if var_y == 0.0 {
        return Err(MetricError::ZeroVariance("labels".into()));
    }
    let r = (cov / (var_x.sqrt() * var_y.sqrt())).clamp(-1.0, 1.0);
    let z = r.atanh();
    let se = 1.0 / (nf - 3.0).sqrt();
    let ci_low = (z - 1.96 * se).tanh();
    let ci_high = (z + 1.96 * se).tanh();
    let p_value = if z.is_infinite() {
        0.0
    } else {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        2.0 * (1.0 - normal.cdf((z / se).abs()))
    };
    Ok(PearsonResult {
        r,
        ci_low: ci_low.clamp(-1.0, 1.0),
        ci_high: ci_high.clamp(-1.0, 1.0),
        p_value,
        n,
    })
}

/// Split reference text into overlapping windows of whitespace tokens.
pub fn split_passages(reference: &str, window: usize, stride: usize) -> Vec<String> {
    let tokens: Vec<&str> = reference.split_whitespace().collect();
    if tokens.is_empty() {
        return Vec::new();
    }
    let stride = stride.max(1);
    let mut passages = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(tokens.len());
        passages.push(tokens[start..end].join(" "));
        if end == tokens.len() {
            break;
        }
        start += stride;
    }
    passages
}

/// Ranks reference passages by relevance to a claim.
pub trait PassageRetriever: Send + Sync {
    /// Indices of `passages` in descending relevance order.
    fn rank(&self, claim: &str, passages: &[String]) -> Vec<usize>;
}

/// Default retriever: normalized token-overlap between claim and passage.
#[derive(Debug, Default, Clone, Copy)]
pub struct LexicalRetriever;

impl PassageRetriever for LexicalRetriever {
    fn rank(&self, claim: &str, passages: &[String]) -> Vec<usize> {
        let claim_tokens: BTreeSet<String> = normalized_tokens(claim).collect();
        let mut scored: Vec<(usize, f64)> = passages
            .iter()
            .enumerate()
            .map(|(i, passage)| {
                let passage_tokens: BTreeSet<String> = normalized_tokens(passage).collect();
                let overlap = claim_tokens.intersection(&passage_tokens).count();
                let score = if claim_tokens.is_empty() {
                    0.0
                } else {
                    overlap as f64 / claim_tokens.len() as f64
                };
                (i, score)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.into_iter().map(|(i, _)| i).collect()
    }
}

fn normalized_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
}

pub const PASSAGE_WINDOW: usize = 256;
pub const PASSAGE_STRIDE: usize = 128;
pub const PASSAGES_PER_CLAIM: usize = 3;

/// Label claims against the topic's reference text at temperature 0.
///
/// Missing reference: every claim gets `not_enough_information`. An
/// unparseable judge verdict also falls back to `not_enough_information`
/// and is reported in the returned diagnostics list.
pub fn label_claims(
    claims: &[ClaimRecord],
    topic: &TopicItem,
    client: &Client,
    retriever: &dyn PassageRetriever,
    correctness_template: &str,
) -> (Vec<CorrectnessLabel>, Vec<String>) {
    let reference = match &topic.reference {
        Some(r) if !r.trim().is_empty() => r.clone(),
        _ => {
            let labels = claims
                .iter()
                .map(|c| CorrectnessLabel {
                    claim_id: c.id.clone(),
                    label: Label::NotEnoughInformation,
                    judge_raw: "missing reference".into(),
                })
                .collect();
            return (labels, vec![format!("topic {}: no reference text", topic.topic_id)]);
        }
    };
    let passages = split_passages(&reference, PASSAGE_WINDOW, PASSAGE_STRIDE);
    let results = par::map(claims, |claim| {
        let ranked = retriever.rank(&claim.text, &passages);
        let selected: Vec<&str> = ranked
            .iter()
            .take(PASSAGES_PER_CLAIM)
            .map(|&i| passages[i].as_str())
            .collect();
        let prompt = correctness_template
            .replace("{claim}", &claim.text)
            .replace("{reference}", &selected.join("\n"));
        let req = CompletionRequest::new(StageTag::CorrectnessEval, prompt).max_tokens(16);
        match client.complete(&req) {
            Ok(result) => {
                let raw = result.text.trim().to_string();
                match parse_verdict(&raw) {
                    Some(label) => (
                        CorrectnessLabel {
                            claim_id: claim.id.clone(),
                            label,
                            judge_raw: raw,
                        },
                        None,
                    ),
                    None => (
                        CorrectnessLabel {
                            claim_id: claim.id.clone(),
                            label: Label::NotEnoughInformation,
                            judge_raw: raw.clone(),
                        },
                        Some(format!("claim {}: unparseable verdict {raw:?}", claim.id)),
                    ),
                }
            }
            Err(err) => (
                CorrectnessLabel {
                    claim_id: claim.id.clone(),
                    label: Label::NotEnoughInformation,
                    judge_raw: format!("error: {err}"),
                },
                Some(format!("claim {}: judge error {err}", claim.id)),
            ),
        }
    });
    let mut labels = Vec::with_capacity(results.len());
    let mut diagnostics = Vec::new();
    for (label, diag) in results {
        labels.push(label);
        diagnostics.extend(diag);
    }
    (labels, diagnostics)
}

fn parse_verdict(raw: &str) -> Option<Label> {
    let lower = raw.to_lowercase();
    if lower.contains("not_enough_information") || lower.contains("not enough information") {
        Some(Label::NotEnoughInformation)
    } else if lower.contains("incorrect") {
        Some(Label::Incorrect)
    } else if lower.contains("correct") {
        Some(Label::Correct)
    } else {
        None
    }
}

/// One evaluated method on one dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MethodEvalRow {
    pub method: String,
    pub dataset_tag: String,
    pub orientation: Orientation,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub pearson_r: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub p_value: Option<f64>,
    pub n_claims: usize,
    /// Claims excluded as `not_enough_information` or unscored.
    pub n_excluded: usize,
    /// Why a statistic is missing, when it is.
    pub note: Option<String>,
}

/// Confidence value of one method for one score vector, oriented so that
/// higher always means more confident. `None` when the method is absent.
pub fn oriented_confidence(sv: &ScoreVector, method_name: &str) -> Option<f64> {
    let raw = match method_name {
        method::ENTAILMENT => Some(sv.entailment),
        method::IUQ => Some(sv.uncertainty),
        method::IUQ_REV => sv.uncertainty_rev,
        method::IUQ_CONFIDENCE => Some(sv.confidence),
        method::ANSWER_UNCERTAINTY => sv.answer_uncertainty,
        other => sv.baselines.get(other).copied(),
    }?;
    let orientation = sv
        .orientations
        .get(method_name)
        .copied()
        .unwrap_or(Orientation::HigherIsConfident);
    Some(match orientation {
        Orientation::HigherIsConfident => raw,
        Orientation::HigherIsUncertain => -raw,
    })
}

/// All method names present across the score vectors, in report order.
pub fn methods_present(scores: &[ScoreVector]) -> Vec<String> {
    let mut known = vec![
        method::MAX_TOKEN_ENTROPY.to_string(),
        method::PERPLEXITY.to_string(),
        method::FREQUENCY.to_string(),
        method::ANSWER_UNCERTAINTY.to_string(),
        method::ENTAILMENT.to_string(),
        method::CLOSENESS.to_string(),
        method::IUQ.to_string(),
        method::IUQ_REV.to_string(),
        method::IUQ_CONFIDENCE.to_string(),
    ];
    let mut extra: BTreeSet<String> = BTreeSet::new();
    for sv in scores {
        for name in sv.baselines.keys() {
            if !known.contains(name) {
                extra.insert(name.clone());
            }
        }
    }
    known.extend(extra);
    known
        .into_iter()
        .filter(|name| {
            scores.iter().any(|sv| oriented_confidence(sv, name).is_some())
        })
        .collect()
}

/// Evaluate every present method against the correctness labels, one row
/// per (method, dataset).
pub fn evaluate_methods(
    scores: &[ScoreVector],
    labels: &[CorrectnessLabel],
) -> Vec<MethodEvalRow> {
    let label_map: HashMap<&str, Label> =
        labels.iter().map(|l| (l.claim_id.as_str(), l.label)).collect();
    let mut datasets: BTreeSet<&str> = BTreeSet::new();
    for sv in scores {
        datasets.insert(sv.dataset_tag.as_str());
    }
    let mut rows = Vec::new();
    for dataset in datasets {
        let subset: Vec<&ScoreVector> =
            scores.iter().filter(|sv| sv.dataset_tag == dataset).collect();
        for method_name in methods_present(scores) {
            let mut pairs: Vec<(f64, bool)> = Vec::new();
            let mut excluded = 0usize;
            for sv in &subset {
                let confidence = match oriented_confidence(sv, &method_name) {
                    Some(c) => c,
                    None => {
                        excluded += 1;
                        continue;
                    }
                };
                match label_map.get(sv.claim_id.as_str()) {
                    Some(Label::Correct) => pairs.push((confidence, true)),
                    Some(Label::Incorrect) => pairs.push((confidence, false)),
                    Some(Label::NotEnoughInformation) | None => excluded += 1,
                }
            }
            let orientation = subset
                .iter()
                .find_map(|sv| sv.orientations.get(&method_name).copied())
                .unwrap_or(Orientation::HigherIsConfident);
            let mut note = None;
            let auroc_value = match auroc(&pairs) {
                Ok(v) => Some(v),
                Err(e) => {
                    note = Some(e.to_string());
                    None
                }
            };
            let auprc_value = auprc(&pairs).ok();
            let pearson = if pairs.len() >= 4 {
                pearson_with_ci(
                    &pairs
                        .iter()
                        .map(|(c, l)| (*c, if *l { 1.0 } else { 0.0 }))
                        .collect::<Vec<_>>(),
                )
                .ok()
            } else {
                None
            };
            rows.push(MethodEvalRow {
                method: method_name.clone(),
                dataset_tag: dataset.to_string(),
                orientation,
                auroc: auroc_value,
                auprc: auprc_value,
                pearson_r: pearson.as_ref().map(|p| p.r),
                ci_low: pearson.as_ref().map(|p| p.ci_low),
                ci_high: pearson.as_ref().map(|p| p.ci_high),
                p_value: pearson.as_ref().map(|p| p.p_value),
                n_claims: pairs.len(),
                n_excluded: excluded,
                note,
            });
        }
    }
    rows
}

/// AUROC of the claim-uncertainty method recomputed under each kernel, one
/// row per kernel with one column per dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelAblationRow {
    pub kernel: String,
    /// (dataset_tag, auroc or None with reason)
    pub aurocs: Vec<(String, Option<f64>)>,
    pub average: Option<f64>,
}

/// Recompute U under each kernel from stored contradictions and
/// entailments; no model calls.
pub fn ablate_kernels(
    artifacts: &RunArtifacts,
    labels: &[CorrectnessLabel],
    kernels: &[KernelSpec],
    base: &ScoreConfig,
) -> Vec<KernelAblationRow> {
    kernels
        .iter()
        .map(|kernel| {
            let cfg = ScoreConfig {
                kernel: kernel.clone(),
                ..base.clone()
            };
            let (scores, _) = scoring::assemble_scores(artifacts, &cfg);
            let rows = evaluate_methods(&scores, labels);
            let aurocs: Vec<(String, Option<f64>)> = rows
                .iter()
                .filter(|r| r.method == method::IUQ)
                .map(|r| (r.dataset_tag.clone(), r.auroc))
                .collect();
            let found: Vec<f64> = aurocs.iter().filter_map(|(_, a)| *a).collect();
            let average = if found.is_empty() {
                None
            } else {
                Some(found.iter().sum::<f64>() / found.len() as f64)
            };
            KernelAblationRow {
                kernel: kernel.name(),
                aurocs,
                average,
            }
        })
        .collect()
}

/// AUROC per method per evidence-pool size.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationAblationRow {
    pub n: usize,
    /// (method, auroc or None)
    pub aurocs: Vec<(String, Option<f64>)>,
    pub skipped: Option<String>,
}

/// Recompute S (and the dependent U) using only the first `n` sampled
/// responses as the entailment evidence pool; the claim set under
/// evaluation stays fixed.
pub fn ablate_num_generations(
    artifacts: &RunArtifacts,
    scores: &[ScoreVector],
    labels: &[CorrectnessLabel],
    n_values: &[usize],
    include_own: bool,
) -> Vec<GenerationAblationRow> {
    let label_map: HashMap<&str, Label> =
        labels.iter().map(|l| (l.claim_id.as_str(), l.label)).collect();
    let sample_index: HashMap<&str, u32> = artifacts
        .responses
        .iter()
        .map(|r| (r.id.as_str(), r.sample_index))
        .collect();
    let mut verdicts_by_claim: HashMap<&str, Vec<(&str, bool)>> = HashMap::new();
    for e in &artifacts.entailments {
        verdicts_by_claim
            .entry(e.claim_id.as_str())
            .or_default()
            .push((e.response_id.as_str(), e.verdict));
    }
    let n_samples = artifacts
        .responses
        .iter()
        .map(|r| r.sample_index + 1)
        .max()
        .unwrap_or(0) as usize;

    n_values
        .iter()
        .map(|&n| {
            if n == 0 || n > n_samples {
                return GenerationAblationRow {
                    n,
                    aurocs: Vec::new(),
                    skipped: Some(format!("run has {n_samples} samples")),
                };
            }
            let mut s_pairs: Vec<(f64, bool)> = Vec::new();
            let mut u_pairs: Vec<(f64, bool)> = Vec::new();
            for sv in scores {
                let label = match label_map.get(sv.claim_id.as_str()) {
                    Some(Label::Correct) => true,
                    Some(Label::Incorrect) => false,
                    _ => continue,
                };
                let verdicts: Vec<(&str, bool)> = verdicts_by_claim
                    .get(sv.claim_id.as_str())
                    .map(|vs| {
                        vs.iter()
                            .filter(|(rid, _)| {
                                sample_index.get(rid).is_some_and(|i| (*i as usize) < n)
                            })
                            .copied()
                            .collect()
                    })
                    .unwrap_or_default();
                if verdicts.is_empty() {
                    continue;
                }
                let s = crate::baselines::claim_entailment_s(
                    &verdicts,
                    &sv.response_id,
                    include_own,
                );
                s_pairs.push((s, label));
                u_pairs.push((-scoring::claim_uncertainty(s, sv.weight), label));
            }
            GenerationAblationRow {
                n,
                aurocs: vec![
                    (method::ENTAILMENT.to_string(), auroc(&s_pairs).ok()),
                    (method::IUQ.to_string(), auroc(&u_pairs).ok()),
                ],
                skipped: None,
            }
        })
        .collect()
}

/// AUROC comparison of S, the uncertainty score, and its reversed-direction
/// control, with deltas relative to the forward direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionComparison {
    pub dataset_tag: String,
    pub entailment_auroc: Option<f64>,
    pub iuq_auroc: Option<f64>,
    pub iuq_rev_auroc: Option<f64>,
    /// (rev - iuq) / iuq, as a percentage.
    pub rev_delta_pct: Option<f64>,
    pub note: Option<String>,
}

pub fn compare_iuq_rev(
    scores: &[ScoreVector],
    labels: &[CorrectnessLabel],
) -> Vec<DirectionComparison> {
    let rows = evaluate_methods(scores, labels);
    let mut by_dataset: BTreeMap<&str, DirectionComparison> = BTreeMap::new();
    for row in &rows {
        let entry = by_dataset
            .entry(row.dataset_tag.as_str())
            .or_insert_with(|| DirectionComparison {
                dataset_tag: row.dataset_tag.clone(),
                entailment_auroc: None,
                iuq_auroc: None,
                iuq_rev_auroc: None,
                rev_delta_pct: None,
                note: None,
            });
        match row.method.as_str() {
            method::ENTAILMENT => entry.entailment_auroc = row.auroc,
            method::IUQ => entry.iuq_auroc = row.auroc,
            method::IUQ_REV => entry.iuq_rev_auroc = row.auroc,
            _ => {}
        }
    }
    by_dataset
        .into_values()
        .map(|mut comparison| {
            match (comparison.iuq_auroc, comparison.iuq_rev_auroc) {
                (Some(iuq), Some(rev)) if iuq != 0.0 => {
                    comparison.rev_delta_pct = Some(100.0 * (rev - iuq) / iuq);
                }
                (_, None) => {
                    comparison.note =
                        Some("reversed-direction pass missing; partial table".into());
                }
                _ => {}
            }
            comparison
        })
        .collect()
}
