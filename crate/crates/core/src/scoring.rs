//! Pure deterministic scoring over stored pipeline artifacts.
//!
//! Per claim: faithfulness `F = 1 - mean per-question contradiction`, the
//! kernel-propagated unfaithfulness weighting `W`, the uncertainty `U = S*W`,
//! and the entropy-based answer-level uncertainty `U_A`. Per response and
//! model: plain means of the claim values. Everything here is a function of
//! stored records; no model calls.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::baselines;
use crate::model::{
    method, Direction, KernelSpec, Orientation, RunArtifacts, ScoreVector, TokenLogprob,
};
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("claim {0} has no usable contradiction scores")]
    NoUsableContradictions(String),
    #[error("kernel configuration error: {0}")]
    KernelParams(String),
    #[error("no tokens: entropy undefined for an empty token list")]
    NoTokens,
}

/// Per-claim faithfulness: the per-question contradiction means and the
/// resulting `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaithfulnessRecord {
    pub claim_id: String,
    pub per_question_x: Vec<f64>,
    pub f: f64,
}

/// Faithfulness of one claim from its per-answer contradiction scores.
///
/// `per_question` holds one slot per answer; `None` marks a recorded-missing
/// slot, excluded from that question's mean. Questions with no usable slots
/// drop out of the outer mean entirely.
pub fn claim_faithfulness(
    claim_id: &str,
    per_question: &[Vec<Option<f64>>],
) -> Result<FaithfulnessRecord, ScoringError> {
    let per_question_x: Vec<f64> = per_question
        .iter()
        .filter_map(|answers| {
            let usable: Vec<f64> = answers.iter().flatten().copied().collect();
            if usable.is_empty() {
                None
            } else {
                Some(usable.iter().sum::<f64>() / usable.len() as f64)
            }
        })
        .collect();
    if per_question_x.is_empty() {
        return Err(ScoringError::NoUsableContradictions(claim_id.to_string()));
    }
    let mean_x = per_question_x.iter().sum::<f64>() / per_question_x.len() as f64;
    Ok(FaithfulnessRecord {
        claim_id: claim_id.to_string(),
        per_question_x,
        f: 1.0 - mean_x,
    })
}

/// Mean faithfulness over a response's scored claims; `None` when empty.
pub fn response_faithfulness(claim_f: &[f64]) -> Option<f64> {
    if claim_f.is_empty() {
        None
    } else {
        Some(claim_f.iter().sum::<f64>() / claim_f.len() as f64)
    }
}

/// Mean response faithfulness over a topic's samples; `None` when empty.
pub fn response_set_faithfulness(response_f: &[f64]) -> Option<f64> {
    response_faithfulness(response_f)
}

/// Mean over topics: the model-level faithfulness.
pub fn model_faithfulness(topic_f: &[f64]) -> Option<f64> {
    response_faithfulness(topic_f)
}

/// Unfaithfulness weighting of an ordered claim sequence under a kernel.
///
/// Exp: `W_i = sum_{j<=i} (1-F_j) * exp(-lambda*(i-j))`. Linear replaces the
/// decay with a growing ramp `m*(i-j)+b`. Accumulative is the prefix sum of
/// `1-F`, and NoPropagation keeps each claim's own unfaithfulness only.
pub fn unfaithfulness_weighting(
    f_sequence: &[f64],
    kernel: &KernelSpec,
) -> Result<Vec<f64>, ScoringError> {
    kernel.validate().map_err(ScoringError::KernelParams)?;
    let unfaith: Vec<f64> = f_sequence.iter().map(|f| 1.0 - f).collect();
    let weights = match kernel {
        KernelSpec::Exp { lambda } => convolve(&unfaith, |d| (-lambda * d as f64).exp()),
        KernelSpec::Linear { m, b } => convolve(&unfaith, |d| m * d as f64 + b),
        KernelSpec::Accumulative => convolve(&unfaith, |_| 1.0),
        KernelSpec::NoPropagation => unfaith,
    };
    Ok(weights)
}

fn convolve(unfaith: &[f64], kernel_at: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..unfaith.len())
        .map(|i| (0..=i).map(|j| unfaith[j] * kernel_at(i - j)).sum())
        .collect()
}

/// Claim uncertainty: the entailment score scaled by the unfaithfulness
/// weighting. Higher is more uncertain.
pub fn claim_uncertainty(s: f64, w: f64) -> f64 {
    s * w
}

/// Sequence negative log-likelihood of one sampled answer, the Monte-Carlo
/// surrogate for its conditional entropy. Optionally length-normalized.
pub fn answer_entropy(
    token_logprobs: &[TokenLogprob],
    length_normalized: bool,
) -> Result<f64, ScoringError> {
    if token_logprobs.is_empty() {
        return Err(ScoringError::NoTokens);
    }
    let total: f64 = token_logprobs.iter().map(|(_, lp)| -lp).sum();
    Ok(if length_normalized {
        total / token_logprobs.len() as f64
    } else {
        total
    })
}

/// Answer-level uncertainty: mean over questions of the mean entropy of
/// that question's answers. `None` when no answer had an entropy.
pub fn answer_level_uncertainty(per_question_entropies: &[Vec<f64>]) -> Option<f64> {
    let question_means: Vec<f64> = per_question_entropies
        .iter()
        .filter(|es| !es.is_empty())
        .map(|es| es.iter().sum::<f64>() / es.len() as f64)
        .collect();
    response_faithfulness(&question_means)
}

/// Knobs for assembling score vectors from stored artifacts.
#[derive(Debug, Clone)]
pub struct ScoreConfig {
    pub kernel: KernelSpec,
    /// Count the claim's own source response in the entailment pool.
    pub include_own_response: bool,
    pub normalize_answer_entropy: bool,
    /// Minimum claim-token coverage for token alignment (see baselines).
    pub alignment_min_coverage: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::default(),
            include_own_response: true,
            normalize_answer_entropy: false,
            alignment_min_coverage: 0.6,
        }
    }
}

/// Diagnostics accumulated while assembling scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoringDiagnostics {
    /// Claims that had no usable contradiction scores (F missing, treated
    /// as neutral inside W so positions stay aligned).
    pub claims_without_faithfulness: Vec<String>,
    /// Claims whose token alignment against the source response failed.
    pub alignment_failures: Vec<String>,
}

/// Assemble one [`ScoreVector`] per claim of every non-refused response.
pub fn assemble_scores(
    artifacts: &RunArtifacts,
    cfg: &ScoreConfig,
) -> (Vec<ScoreVector>, ScoringDiagnostics) {
    let index = ArtifactIndex::build(artifacts);
    let topic_results = par::map(&artifacts.topics, |topic| {
        score_topic(artifacts, &index, cfg, &topic.topic_id, &topic.dataset_tag)
    });
    let mut scores = Vec::new();
    let mut diagnostics = ScoringDiagnostics::default();
    for (mut topic_scores, topic_diag) in topic_results {
        scores.append(&mut topic_scores);
        diagnostics
            .claims_without_faithfulness
            .extend(topic_diag.claims_without_faithfulness);
        diagnostics.alignment_failures.extend(topic_diag.alignment_failures);
    }
    (scores, diagnostics)
}

/// Prebuilt lookup maps over the artifact vectors.
pub struct ArtifactIndex<'a> {
    pub responses_by_topic: HashMap<&'a str, Vec<&'a crate::model::SampledResponse>>,
    pub claims_by_response: HashMap<&'a str, Vec<&'a crate::model::ClaimRecord>>,
    pub questions_by_claim: HashMap<&'a str, Vec<&'a crate::model::QuestionRecord>>,
    pub answers_by_question: HashMap<&'a str, Vec<&'a crate::model::AnswerRecord>>,
    pub contradiction_by_answer:
        HashMap<(&'a str, Direction), &'a crate::model::ContradictionRecord>,
    pub entailments_by_claim: HashMap<&'a str, Vec<(&'a str, bool)>>,
    pub supports_by_claim: HashMap<&'a str, Vec<(&'a str, bool)>>,
}

impl<'a> ArtifactIndex<'a> {
    pub fn build(artifacts: &'a RunArtifacts) -> Self {
        let mut responses_by_topic: HashMap<&str, Vec<_>> = HashMap::new();
        for r in &artifacts.responses {
            responses_by_topic.entry(r.topic_id.as_str()).or_default().push(r);
        }
        for list in responses_by_topic.values_mut() {
            list.sort_by_key(|r| r.sample_index);
        }
        let mut claims_by_response: HashMap<&str, Vec<_>> = HashMap::new();
        for c in &artifacts.claims {
            claims_by_response.entry(c.response_id.as_str()).or_default().push(c);
        }
        for list in claims_by_response.values_mut() {
            list.sort_by_key(|c| c.index);
        }
        let mut questions_by_claim: HashMap<&str, Vec<_>> = HashMap::new();
        for q in &artifacts.questions {
            questions_by_claim.entry(q.claim_id.as_str()).or_default().push(q);
        }
        for list in questions_by_claim.values_mut() {
            list.sort_by_key(|q| q.index);
        }
        let mut answers_by_question: HashMap<&str, Vec<_>> = HashMap::new();
        for a in &artifacts.answers {
            answers_by_question.entry(a.question_id.as_str()).or_default().push(a);
        }
        for list in answers_by_question.values_mut() {
            list.sort_by_key(|a| a.index);
        }
        let mut contradiction_by_answer = HashMap::new();
        for c in &artifacts.contradictions {
            contradiction_by_answer.insert((c.answer_id.as_str(), c.direction), c);
        }
        let mut entailments_by_claim: HashMap<&str, Vec<(&str, bool)>> = HashMap::new();
        for e in &artifacts.entailments {
            entailments_by_claim
                .entry(e.claim_id.as_str())
                .or_default()
                .push((e.response_id.as_str(), e.verdict));
        }
        let mut supports_by_claim: HashMap<&str, Vec<(&str, bool)>> = HashMap::new();
        for s in &artifacts.supports {
            supports_by_claim
                .entry(s.claim_id.as_str())
                .or_default()
                .push((s.response_id.as_str(), s.verdict));
        }
        Self {
            responses_by_topic,
            claims_by_response,
            questions_by_claim,
            answers_by_question,
            contradiction_by_answer,
            entailments_by_claim,
            supports_by_claim,
        }
    }
}

fn score_topic(
    artifacts: &RunArtifacts,
    index: &ArtifactIndex<'_>,
    cfg: &ScoreConfig,
    topic_id: &str,
    dataset_tag: &str,
) -> (Vec<ScoreVector>, ScoringDiagnostics) {
    let mut scores = Vec::new();
    let mut diagnostics = ScoringDiagnostics::default();
    let responses = match index.responses_by_topic.get(topic_id) {
        Some(rs) => rs,
        None => return (scores, diagnostics),
    };
    let active: Vec<_> = responses.iter().filter(|r| !r.refusal).collect();
    let centrality = baselines::topic_closeness_centrality(artifacts, index, topic_id);

    for response in &active {
        let claims = match index.claims_by_response.get(response.id.as_str()) {
            Some(cs) => cs,
            None => continue,
        };

        // Faithfulness per claim, in claim order; None = no usable scores.
        let mut f_values: Vec<Option<f64>> = Vec::with_capacity(claims.len());
        let mut f_rev_values: Vec<Option<f64>> = Vec::with_capacity(claims.len());
        let mut answer_uncertainties: Vec<Option<f64>> = Vec::with_capacity(claims.len());
        let mut has_rev = false;
        for claim in claims {
            let questions = index
                .questions_by_claim
                .get(claim.id.as_str())
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let mut per_question: Vec<Vec<Option<f64>>> = Vec::new();
            let mut per_question_rev: Vec<Vec<Option<f64>>> = Vec::new();
            let mut per_question_entropy: Vec<Vec<f64>> = Vec::new();
            for question in questions {
                let answers = index
                    .answers_by_question
                    .get(question.id.as_str())
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                let mut slots = Vec::new();
                let mut slots_rev = Vec::new();
                let mut entropies = Vec::new();
                for answer in answers {
                    slots.push(
                        index
                            .contradiction_by_answer
                            .get(&(answer.id.as_str(), Direction::Preceding))
                            .and_then(|c| c.value),
                    );
                    if let Some(c) = index
                        .contradiction_by_answer
                        .get(&(answer.id.as_str(), Direction::Subsequent))
                    {
                        has_rev = true;
                        slots_rev.push(c.value);
                    } else {
                        slots_rev.push(None);
                    }
                    if let Some(lps) = &answer.token_logprobs {
                        if let Ok(h) = answer_entropy(lps, cfg.normalize_answer_entropy) {
                            entropies.push(h);
                        }
                    }
                }
                per_question.push(slots);
                per_question_rev.push(slots_rev);
                per_question_entropy.push(entropies);
            }
            match claim_faithfulness(&claim.id, &per_question) {
                Ok(record) => f_values.push(Some(record.f)),
                Err(_) => {
                    diagnostics.claims_without_faithfulness.push(claim.id.clone());
                    f_values.push(None);
                }
            }
            f_rev_values.push(
                claim_faithfulness(&claim.id, &per_question_rev)
                    .ok()
                    .map(|r| r.f),
            );
            answer_uncertainties.push(answer_level_uncertainty(&per_question_entropy));
        }

        // Missing F stays neutral (F=1) inside the convolution so positional
        // distances in the kernel stay aligned with the response order.
        let f_seq: Vec<f64> = f_values.iter().map(|f| f.unwrap_or(1.0)).collect();
        let weights = unfaithfulness_weighting(&f_seq, &cfg.kernel).expect("validated kernel");
        let weights_rev = if has_rev {
            let f_seq_rev: Vec<f64> = f_rev_values.iter().map(|f| f.unwrap_or(1.0)).collect();
            Some(unfaithfulness_weighting(&f_seq_rev, &cfg.kernel).expect("validated kernel"))
        } else {
            None
        };

        for (slot, claim) in claims.iter().enumerate() {
            let verdicts = index
                .entailments_by_claim
                .get(claim.id.as_str())
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let s =
                baselines::claim_entailment_s(verdicts, &response.id, cfg.include_own_response);
            let w = weights[slot];
            let u = claim_uncertainty(s, w);
            let mut baselines_map = BTreeMap::new();
            let mut orientations = BTreeMap::new();
            orientations.insert(method::ENTAILMENT.into(), Orientation::HigherIsConfident);
            orientations.insert(method::IUQ.into(), Orientation::HigherIsUncertain);
            orientations.insert(method::IUQ_CONFIDENCE.into(), Orientation::HigherIsConfident);

            if let Some(c) = centrality.get(claim.id.as_str()) {
                baselines_map.insert(method::CLOSENESS.into(), *c);
                orientations.insert(method::CLOSENESS.into(), Orientation::HigherIsConfident);
            }
            if let Some(support) = index.supports_by_claim.get(claim.id.as_str()) {
                let alternatives: Vec<bool> = support
                    .iter()
                    .filter(|(rid, _)| *rid != response.id)
                    .map(|(_, v)| *v)
                    .collect();
                if !alternatives.is_empty() {
                    baselines_map.insert(
                        method::FREQUENCY.into(),
                        baselines::frequency_scoring(&alternatives),
                    );
                    orientations.insert(method::FREQUENCY.into(), Orientation::HigherIsConfident);
                }
            }
            match baselines::align_claim_tokens(&claim.text, response, cfg.alignment_min_coverage)
            {
                Some(aligned) => {
                    baselines_map.insert(
                        method::MAX_TOKEN_ENTROPY.into(),
                        baselines::max_token_entropy(&aligned),
                    );
                    orientations
                        .insert(method::MAX_TOKEN_ENTROPY.into(), Orientation::HigherIsUncertain);
                    baselines_map.insert(method::PERPLEXITY.into(), baselines::perplexity(&aligned));
                    orientations.insert(method::PERPLEXITY.into(), Orientation::HigherIsUncertain);
                }
                None => diagnostics.alignment_failures.push(claim.id.clone()),
            }

            let answer_uncertainty = answer_uncertainties[slot];
            if answer_uncertainty.is_some() {
                orientations
                    .insert(method::ANSWER_UNCERTAINTY.into(), Orientation::HigherIsUncertain);
            }
            let (weight_rev, uncertainty_rev) = match &weights_rev {
                Some(ws) => {
                    orientations.insert(method::IUQ_REV.into(), Orientation::HigherIsUncertain);
                    (Some(ws[slot]), Some(claim_uncertainty(s, ws[slot])))
                }
                None => (None, None),
            };

            scores.push(ScoreVector {
                claim_id: claim.id.clone(),
                response_id: response.id.clone(),
                topic_id: topic_id.to_string(),
                dataset_tag: dataset_tag.to_string(),
                sample_index: response.sample_index,
                claim_index: claim.index,
                entailment: s,
                faithfulness: f_values[slot],
                weight: w,
                uncertainty: u,
                weight_rev,
                uncertainty_rev,
                answer_uncertainty,
                confidence: s * (-w).exp(),
                baselines: baselines_map,
                orientations,
            });
        }
    }
    (scores, diagnostics)
}
