//! Shared record types for every pipeline stage.
//!
//! All records are immutable value objects with content-addressed ids:
//! `id = sha256(parent_id, stage, ordinal, text)[..16]`. Re-running a stage
//! over identical inputs therefore reproduces identical ids, which is what
//! makes runs resumable and the store dedup-safe.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Token paired with its log-probability (always <= 0 for a valid record).
pub type TokenLogprob = (String, f64);

/// Compute a content-addressed record id from its lineage and payload.
pub fn content_id(parent_id: &str, stage: &str, ordinal: u64, text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(parent_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(stage.as_bytes());
    hasher.update([0u8]);
    hasher.update(ordinal.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    hex::encode(&digest[..8])
}

/// A prompt plus optional reference document; the unit of dataset ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicItem {
    pub topic_id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub dataset_tag: String,
}

/// One sampled long-form response for a topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub id: String,
    pub topic_id: String,
    pub sample_index: u32,
    pub text: String,
    /// Refused responses stay in the store but are excluded downstream.
    pub refusal: bool,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

/// An atomic claim extracted from a response, 1-based position within it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub id: String,
    pub response_id: String,
    pub topic_id: String,
    /// Position in decomposition-output order, contiguous from 1.
    pub index: u32,
    pub text: String,
}

/// A question derived from one claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub claim_id: String,
    pub index: u32,
    pub text: String,
    /// True when the question came from the fallback template rather than
    /// the model.
    #[serde(default)]
    pub synthetic: bool,
}

/// One sampled answer to a question, decoupled from the generative context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub id: String,
    pub question_id: String,
    pub index: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

/// Which side of the claim sequence the contradiction context is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Claims that precede and include the claim under test.
    Preceding,
    /// Strictly subsequent claims (the reversed control variant).
    Subsequent,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Preceding => "preceding",
            Direction::Subsequent => "subsequent",
        }
    }
}

/// Per-answer contradiction judgement against a claim context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContradictionRecord {
    pub answer_id: String,
    pub claim_id: String,
    pub direction: Direction,
    /// Fraction in [0,1]; `None` when the judge reply stayed unparseable.
    pub value: Option<f64>,
    /// True when the context was empty, so nothing could be contradicted.
    #[serde(default)]
    pub vacuous: bool,
}

/// Entailment verdict of one sampled response for one claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentRecord {
    pub claim_id: String,
    pub response_id: String,
    pub verdict: bool,
    /// Verdict defaulted to false because the judge reply was unparseable.
    #[serde(default)]
    pub parse_failed: bool,
}

/// Support verdict used by the frequency-scoring baseline (distinct judge
/// prompt from [`EntailmentRecord`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportRecord {
    pub claim_id: String,
    pub response_id: String,
    pub verdict: bool,
    #[serde(default)]
    pub parse_failed: bool,
}

/// Three-way correctness verdict for a claim against reference text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Correct,
    Incorrect,
    NotEnoughInformation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessLabel {
    pub claim_id: String,
    pub label: Label,
    pub judge_raw: String,
}

/// Whether larger values of a method mean more or less confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsConfident,
    HigherIsUncertain,
}

/// Influence-kernel variant used to propagate claim unfaithfulness forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Exponential decay `exp(-lambda * distance)`.
    Exp { lambda: f64 },
    /// Linearly growing influence `m * distance + b`.
    Linear { m: f64, b: f64 },
    /// Cumulative sum of unfaithfulness up to the claim.
    Accumulative,
    /// No propagation: each claim carries only its own unfaithfulness.
    NoPropagation,
}

impl KernelSpec {
    /// Validate kernel parameters.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            KernelSpec::Exp { lambda } if *lambda <= 0.0 => {
                Err(format!("exp kernel requires lambda > 0, got {lambda}"))
            }
            KernelSpec::Linear { m, .. } if *m <= 0.0 => {
                Err(format!("linear kernel requires m > 0, got {m}"))
            }
            _ => Ok(()),
        }
    }

    /// Short name used in tables and CLI flags.
    pub fn name(&self) -> String {
        match self {
            KernelSpec::Exp { lambda } => format!("exp:{lambda}"),
            KernelSpec::Linear { m, b } => format!("lin:{m}:{b}"),
            KernelSpec::Accumulative => "acc".to_string(),
            KernelSpec::NoPropagation => "none".to_string(),
        }
    }

    /// Parse a CLI-style kernel spec: `exp:LAMBDA`, `lin:M:B`, `acc`, `none`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let spec = match parts.as_slice() {
            ["exp"] => KernelSpec::Exp { lambda: 1.0 },
            ["exp", l] => KernelSpec::Exp {
                lambda: l.parse().map_err(|_| format!("bad lambda: {l}"))?,
            },
            ["lin"] => KernelSpec::Linear { m: 0.1, b: 0.0 },
            ["lin", m] => KernelSpec::Linear {
                m: m.parse().map_err(|_| format!("bad slope: {m}"))?,
                b: 0.0,
            },
            ["lin", m, b] => KernelSpec::Linear {
                m: m.parse().map_err(|_| format!("bad slope: {m}"))?,
                b: b.parse().map_err(|_| format!("bad intercept: {b}"))?,
            },
            ["acc"] => KernelSpec::Accumulative,
            ["none"] => KernelSpec::NoPropagation,
            _ => return Err(format!("unrecognized kernel spec: {s}")),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Exp { lambda: 1.0 }
    }
}

/// Per-claim bundle of every score the run produced, with orientation
/// metadata so evaluation never guesses sign conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub claim_id: String,
    pub response_id: String,
    pub topic_id: String,
    pub dataset_tag: String,
    pub sample_index: u32,
    pub claim_index: u32,
    /// Cross-sample entailment score S: entail count / N, exactly.
    pub entailment: f64,
    /// Claim faithfulness F; `None` when no contradiction score was usable.
    pub faithfulness: Option<f64>,
    /// Kernel-propagated unfaithfulness weighting W.
    pub weight: f64,
    /// Claim uncertainty U = S * W (higher is uncertain).
    pub uncertainty: f64,
    /// W computed from the reversed-direction contradiction pass, if run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_rev: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty_rev: Option<f64>,
    /// Answer-level uncertainty U_A; `None` without token logprobs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_uncertainty: Option<f64>,
    /// Composite confidence S * exp(-W) (repo-defined method).
    pub confidence: f64,
    /// Baseline method scores keyed by method name.
    #[serde(default)]
    pub baselines: BTreeMap<String, f64>,
    /// Orientation for every method stored in this vector.
    pub orientations: BTreeMap<String, Orientation>,
}

/// Canonical method names used across scoring, evaluation and reports.
pub mod method {
    pub const ENTAILMENT: &str = "entailment";
    pub const CLOSENESS: &str = "closeness-centrality";
    pub const FREQUENCY: &str = "frequency";
    pub const MAX_TOKEN_ENTROPY: &str = "max-token-entropy";
    pub const PERPLEXITY: &str = "ppl";
    pub const ANSWER_UNCERTAINTY: &str = "answer-uncertainty";
    pub const IUQ: &str = "iuq";
    pub const IUQ_REV: &str = "iuq-rev";
    pub const IUQ_CONFIDENCE: &str = "iuq-confidence";
}

/// All stage records of a run, loaded for validation or scoring.
#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub topics: Vec<TopicItem>,
    pub responses: Vec<SampledResponse>,
    pub claims: Vec<ClaimRecord>,
    pub questions: Vec<QuestionRecord>,
    pub answers: Vec<AnswerRecord>,
    pub contradictions: Vec<ContradictionRecord>,
    pub entailments: Vec<EntailmentRecord>,
    pub supports: Vec<SupportRecord>,
    pub labels: Vec<CorrectnessLabel>,
    pub scores: Vec<ScoreVector>,
}

/// One invariant violation found by [`validate_run_artifacts`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub kind: String,
    pub reference: String,
    pub message: String,
}

impl ValidationIssue {
    fn new(kind: &str, reference: &str, message: String) -> Self {
        Self {
            kind: kind.to_string(),
            reference: reference.to_string(),
            message,
        }
    }
}

/// Check cross-stage invariants over loaded records; report-only.
///
/// An empty report means the run is structurally consistent: claim indices
/// contiguous from 1, probability-like fields in range, logprobs
/// non-positive, and every record's parent present in the prior stage.
pub fn validate_run_artifacts(artifacts: &RunArtifacts) -> Vec<ValidationIssue> {
    use std::collections::{HashMap, HashSet};

    let mut issues = Vec::new();

    let topic_ids: HashSet<&str> = artifacts.topics.iter().map(|t| t.topic_id.as_str()).collect();
    let response_ids: HashSet<&str> = artifacts.responses.iter().map(|r| r.id.as_str()).collect();
    let claim_ids: HashSet<&str> = artifacts.claims.iter().map(|c| c.id.as_str()).collect();
    let question_ids: HashSet<&str> = artifacts.questions.iter().map(|q| q.id.as_str()).collect();
    let answer_ids: HashSet<&str> = artifacts.answers.iter().map(|a| a.id.as_str()).collect();

    for topic in &artifacts.topics {
        if topic.prompt.trim().is_empty() {
            issues.push(ValidationIssue::new(
                "empty-prompt",
                &topic.topic_id,
                "topic has an empty prompt".to_string(),
            ));
        }
    }

    let mut seen_samples: HashSet<(&str, u32)> = HashSet::new();
    for resp in &artifacts.responses {
        if !topic_ids.contains(resp.topic_id.as_str()) {
            issues.push(ValidationIssue::new(
                "orphan-response",
                &resp.id,
                format!("response references unknown topic {}", resp.topic_id),
            ));
        }
        if !seen_samples.insert((resp.topic_id.as_str(), resp.sample_index)) {
            issues.push(ValidationIssue::new(
                "duplicate-sample-index",
                &resp.id,
                format!(
                    "sample_index {} repeats within topic {}",
                    resp.sample_index, resp.topic_id
                ),
            ));
        }
        if let Some(lps) = &resp.token_logprobs {
            if lps.iter().any(|(_, lp)| *lp > 0.0) {
                issues.push(ValidationIssue::new(
                    "positive-logprob",
                    &resp.id,
                    "response token logprob above zero".to_string(),
                ));
            }
        }
    }

    // Claim indices must be exactly 1..k per response.
    let mut per_response: HashMap<&str, Vec<u32>> = HashMap::new();
    let refused: HashSet<&str> = artifacts
        .responses
        .iter()
        .filter(|r| r.refusal)
        .map(|r| r.id.as_str())
        .collect();
    for claim in &artifacts.claims {
        if !response_ids.contains(claim.response_id.as_str()) {
            issues.push(ValidationIssue::new(
                "orphan-claim",
                &claim.id,
                format!("claim references unknown response {}", claim.response_id),
            ));
        }
        if refused.contains(claim.response_id.as_str()) {
            issues.push(ValidationIssue::new(
                "claim-on-refusal",
                &claim.id,
                "claim extracted from a refused response".to_string(),
            ));
        }
        if claim.text.trim().is_empty() {
            issues.push(ValidationIssue::new(
                "empty-claim",
                &claim.id,
                "claim text is empty".to_string(),
            ));
        }
        per_response.entry(claim.response_id.as_str()).or_default().push(claim.index);
    }
    for (resp_id, mut indices) in per_response {
        indices.sort_unstable();
        let mut expected = 1u32;
        for idx in indices {
            if idx < expected {
                issues.push(ValidationIssue::new(
                    "duplicate-claim-index",
                    resp_id,
                    format!("claim index {idx} repeats"),
                ));
            } else {
                while expected < idx {
                    issues.push(ValidationIssue::new(
                        "claim-index-gap",
                        resp_id,
                        format!("index gap at {expected}"),
                    ));
                    expected += 1;
                }
                expected = idx + 1;
            }
        }
    }

    for q in &artifacts.questions {
        if !claim_ids.contains(q.claim_id.as_str()) {
            issues.push(ValidationIssue::new(
                "orphan-question",
                &q.id,
                format!("question references unknown claim {}", q.claim_id),
            ));
        }
    }

    for a in &artifacts.answers {
        if !question_ids.contains(a.question_id.as_str()) {
            issues.push(ValidationIssue::new(
                "orphan-answer",
                &a.id,
                format!("answer references unknown question {}", a.question_id),
            ));
        }
        if let Some(lps) = &a.token_logprobs {
            if lps.iter().any(|(_, lp)| *lp > 0.0) {
                issues.push(ValidationIssue::new(
                    "positive-logprob",
                    &a.id,
                    "answer token logprob above zero".to_string(),
                ));
            }
        }
    }

    for c in &artifacts.contradictions {
        if !answer_ids.contains(c.answer_id.as_str()) {
            issues.push(ValidationIssue::new(
                "orphan-contradiction",
                &c.answer_id,
                "contradiction references unknown answer".to_string(),
            ));
        }
        if let Some(v) = c.value {
            if !(0.0..=1.0).contains(&v) {
                issues.push(ValidationIssue::new(
                    "contradiction-out-of-range",
                    &c.answer_id,
                    format!("contradiction out of range: {v}"),
                ));
            }
        }
    }

    for e in &artifacts.entailments {
        if !claim_ids.contains(e.claim_id.as_str()) || !response_ids.contains(e.response_id.as_str())
        {
            issues.push(ValidationIssue::new(
                "orphan-entailment",
                &e.claim_id,
                "entailment references unknown claim or response".to_string(),
            ));
        }
    }

    for l in &artifacts.labels {
        if !claim_ids.contains(l.claim_id.as_str()) {
            issues.push(ValidationIssue::new(
                "orphan-label",
                &l.claim_id,
                "label references unknown claim".to_string(),
            ));
        }
    }

    for s in &artifacts.scores {
        if !claim_ids.contains(s.claim_id.as_str()) {
            issues.push(ValidationIssue::new(
                "orphan-score",
                &s.claim_id,
                "score references unknown claim".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&s.entailment) {
            issues.push(ValidationIssue::new(
                "entailment-out-of-range",
                &s.claim_id,
                format!("entailment out of range: {}", s.entailment),
            ));
        }
        if let Some(f) = s.faithfulness {
            if !(0.0..=1.0).contains(&f) {
                issues.push(ValidationIssue::new(
                    "faithfulness-out-of-range",
                    &s.claim_id,
                    format!("faithfulness out of range: {f}"),
                ));
            }
        }
        for (name, _) in &s.baselines {
            if !s.orientations.contains_key(name) {
                issues.push(ValidationIssue::new(
                    "missing-orientation",
                    &s.claim_id,
                    format!("method {name} stored without orientation"),
                ));
            }
        }
    }

    issues
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_artifacts() -> RunArtifacts {
        let topic = TopicItem {
            topic_id: "t1".into(),
            prompt: "Tell me about X.".into(),
            reference: None,
            dataset_tag: "test".into(),
        };
        let resp = SampledResponse {
            id: content_id("t1", "response", 0, "X is a painter."),
            topic_id: "t1".into(),
            sample_index: 0,
            text: "X is a painter.".into(),
            refusal: false,
            temperature: 1.0,
            token_logprobs: None,
        };
        let claim = ClaimRecord {
            id: content_id(&resp.id, "claim", 1, "X is a painter."),
            response_id: resp.id.clone(),
            topic_id: "t1".into(),
            index: 1,
            text: "X is a painter.".into(),
        };
        RunArtifacts {
            topics: vec![topic],
            responses: vec![resp],
            claims: vec![claim],
            ..Default::default()
        }
    }

    #[test]
    fn consistent_run_has_empty_report() {
        let artifacts = sample_artifacts();
        assert!(validate_run_artifacts(&artifacts).is_empty());
    }

    #[test]
    fn index_gap_is_reported() {
        let mut artifacts = sample_artifacts();
        let resp_id = artifacts.responses[0].id.clone();
        artifacts.claims.push(ClaimRecord {
            id: content_id(&resp_id, "claim", 3, "X lives in Rome."),
            response_id: resp_id,
            topic_id: "t1".into(),
            index: 3,
            text: "X lives in Rome.".into(),
        });
        let issues = validate_run_artifacts(&artifacts);
        assert!(issues.iter().any(|i| i.kind == "claim-index-gap" && i.message.contains("2")));
    }

    #[test]
    fn contradiction_out_of_range_is_reported() {
        let mut artifacts = sample_artifacts();
        let claim_id = artifacts.claims[0].id.clone();
        let q = QuestionRecord {
            id: content_id(&claim_id, "question", 0, "What does X do?"),
            claim_id: claim_id.clone(),
            index: 0,
            text: "What does X do?".into(),
            synthetic: false,
        };
        let a = AnswerRecord {
            id: content_id(&q.id, "answer", 0, "X is a painter."),
            question_id: q.id.clone(),
            index: 0,
            text: "X is a painter.".into(),
            token_logprobs: None,
        };
        artifacts.contradictions.push(ContradictionRecord {
            answer_id: a.id.clone(),
            claim_id,
            direction: Direction::Preceding,
            value: Some(1.2),
            vacuous: false,
        });
        artifacts.questions.push(q);
        artifacts.answers.push(a);
        let issues = validate_run_artifacts(&artifacts);
        assert!(issues.iter().any(|i| i.kind == "contradiction-out-of-range"));
    }

    #[test]
    fn orphan_records_are_reported() {
        let mut artifacts = sample_artifacts();
        artifacts.claims.push(ClaimRecord {
            id: "deadbeef".into(),
            response_id: "missing".into(),
            topic_id: "t1".into(),
            index: 1,
            text: "orphan".into(),
        });
        let issues = validate_run_artifacts(&artifacts);
        assert!(issues.iter().any(|i| i.kind == "orphan-claim"));
    }

    #[test]
    fn content_ids_are_stable_and_distinct() {
        let a = content_id("p", "claim", 1, "x");
        let b = content_id("p", "claim", 1, "x");
        let c = content_id("p", "claim", 2, "x");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn kernel_parse_round_trip() {
        for s in ["exp:0.5", "lin:0.1:0", "acc", "none"] {
            let k = KernelSpec::parse(s).unwrap();
            assert_eq!(KernelSpec::parse(&k.name()).unwrap(), k);
        }
        assert!(KernelSpec::parse("exp:-1").is_err());
        assert!(KernelSpec::parse("lin:0:1").is_err());
        assert!(KernelSpec::parse("bogus").is_err());
    }
}
