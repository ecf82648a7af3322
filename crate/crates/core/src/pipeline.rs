//! Stage orchestration: sample responses, decompose them into claims,
//! derive questions, sample context-free answers, judge contradictions, and
//! judge cross-sample entailment (plus the support pass used by frequency
//! scoring).
//!
//! Stages execute in order per topic with a store checkpoint after each, so
//! a killed run resumes at the first incomplete stage without repeating
//! model calls. Content-addressed record ids make the replayed appends
//! no-ops; sampling requests carry deterministic seed hints so re-issued
//! work returns cached results byte-for-byte.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{whitespace_tokens, BackendError, Client, CompletionRequest, StageTag};
use crate::model::{
    content_id, AnswerRecord, ClaimRecord, ContradictionRecord, Direction, EntailmentRecord,
    QuestionRecord, SampledResponse, SupportRecord, TopicItem,
};
use crate::par;
use crate::store::{PipelineStage, RunStore, StageStatus, StoreError};
use crate::synthworld::stable_seed;

/// Prompt templates for every stage; placeholders in braces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    /// `{prompt}` — long-form generation.
    pub generation: String,
    /// `{context}`, `{text}` — claim decomposition.
    pub decomposition: String,
    /// `{context}`, `{claim}` — question generation.
    pub question: String,
    /// `{context}`, `{question}` — context-free answering.
    pub answering: String,
    /// `{statement}`, `{context}` — contradiction percentage judge.
    pub contradiction: String,
    /// `{claim}`, `{reference}` — correctness judge.
    pub correctness: String,
    /// `{claim}`, `{passage}` — entailment judge (supported / not-supported).
    pub entailment: String,
    /// `{claim}`, `{passage}` — support judge for frequency scoring (yes / no).
    pub support: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            generation: "Answer the following question in plain text, without any additional \
                         formatting: {prompt}"
                .into(),
            decomposition: "Given context and a paragraph of text, deconstruct the text into the \
                            smallest possible standalone and self-contained facts without \
                            semantic repetition. Each fact should come from the text and must be \
                            related to the context.\n\n<Context>{context}</Context>\n<Text>{text}\
                            </Text>\nReturn ONLY a list of facts, with no additional text."
                .into(),
            question: "Given context and a claim, generate one specific, clear question that has \
                       its answer contained in the claim. The generated question must be \
                       self-contained and related to the context.\nReturn only the question, \
                       with no additional text.\n\nContext: {context}\nClaim: {claim}"
                .into(),
            answering: "Answer the following question based on the given context. Format your \
                        answer in one sentence:\n\nContext: {context}\nQuestion: {question}\n\n\
                        Answer: "
                .into(),
            contradiction: "You will be given a statement and a context. Please estimate how \
                            much of the context contradicts the statement?\nYour final answer \
                            should be a percentage number between 0 and 100, representing the \
                            percentage of the context that contradicts the statement.\n\n\
                            <Statement>\n{statement}\n</Statement>\n\n<Context>\n{context}\n\
                            </Context>\n\nReturn your answer as a percentage number ONLY, with \
                            no additional text."
                .into(),
            correctness: "Is the following claim correct according to the reference passage? \
                          Choose your answer from \
                          <correct/incorrect/not_enough_information>.\n\n<Claim>{claim}</Claim>\
                          \n\n<Reference>{reference}</Reference>"
                .into(),
            entailment: "You will be given a claim and a passage. Does the passage support the \
                         claim? Answer with exactly one word: supported or not-supported.\n\n\
                         <Claim>{claim}</Claim>\n\n<Passage>{passage}</Passage>"
                .into(),
            support: "You will be given a claim and an alternative response. Is the content of \
                      the response consistent with the claim, and does it imply the claim? \
                      Answer with exactly one word: yes or no.\n\n<Claim>{claim}</Claim>\n\n\
                      <Passage>{passage}</Passage>"
                .into(),
        }
    }
}

/// Run parameters; defaults follow the pipeline's standard setup
/// (5 samples at temperature 1.0, up to 3 questions, 3 answers each).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub n_samples: u32,
    pub sample_temperature: f64,
    pub n_questions_max: u32,
    pub n_answers: u32,
    /// Contradiction context side for the main pass.
    pub direction: Direction,
    /// Also run the opposite-direction contradiction pass.
    pub dual_direction: bool,
    /// Count the claim's own source response in the entailment pool.
    pub include_own_response: bool,
    /// Run the support-judge pass that feeds frequency scoring.
    pub with_support_stage: bool,
    pub refusal_phrases: Vec<String>,
    /// A response shorter than this many whitespace tokens that contains a
    /// refusal phrase counts as a refusal.
    pub refusal_max_tokens: u32,
    pub seed: u64,
    pub max_tokens_generation: u32,
    pub max_tokens_decomposition: u32,
    pub max_tokens_question: u32,
    pub max_tokens_answer: u32,
    pub max_tokens_judge: u32,
    #[serde(default)]
    pub templates: PromptTemplates,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_samples: 5,
            sample_temperature: 1.0,
            n_questions_max: 3,
            n_answers: 3,
            direction: Direction::Preceding,
            dual_direction: false,
            include_own_response: true,
            with_support_stage: true,
            refusal_phrases: vec![
                "i don't know".into(),
                "i cannot provide information".into(),
                "i can't provide information".into(),
                "i am unable to answer".into(),
            ],
            refusal_max_tokens: 20,
            seed: 0,
            max_tokens_generation: 1024,
            max_tokens_decomposition: 1024,
            max_tokens_question: 256,
            max_tokens_answer: 128,
            max_tokens_judge: 16,
            templates: PromptTemplates::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_samples == 0 {
            return Err("n_samples must be at least 1".into());
        }
        if !(1..=3).contains(&self.n_questions_max) {
            return Err(format!(
                "n_questions_max must lie in 1..=3, got {}",
                self.n_questions_max
            ));
        }
        if self.n_answers == 0 {
            return Err("n_answers must be at least 1".into());
        }
        if self.sample_temperature < 0.0 {
            return Err("sample_temperature must be non-negative".into());
        }
        Ok(())
    }

    /// Stages this configuration will execute, in order.
    pub fn active_stages(&self) -> Vec<PipelineStage> {
        let mut stages = vec![
            PipelineStage::Generation,
            PipelineStage::Decomposition,
            PipelineStage::Questions,
            PipelineStage::Answers,
            PipelineStage::Contradiction,
        ];
        if self.dual_direction {
            stages.push(PipelineStage::ContradictionRev);
        }
        stages.push(PipelineStage::Entailment);
        if self.with_support_stage {
            stages.push(PipelineStage::Support);
        }
        stages
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("topic {topic}: {stage} stage failed: {message}")]
    Stage {
        topic: String,
        stage: &'static str,
        message: String,
    },
    #[error("topic {0}: every sampled response was a refusal")]
    AllRefused(String),
}

/// Case-insensitive refusal detector: a short response containing one of
/// the configured phrases.
pub fn is_refusal(text: &str, phrases: &[String], max_tokens: u32) -> bool {
    if whitespace_tokens(text) >= max_tokens as u64 {
        return false;
    }
    let lower = text.to_lowercase();
    phrases.iter().any(|p| lower.contains(&p.to_lowercase()))
}

/// Strip list markers and drop preamble lines; returns the cleaned items.
pub fn parse_list_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|line| !line.is_empty())
        .filter(|line| !line.ends_with(':'))
        .map(strip_list_marker)
        .filter(|line| !line.is_empty())
        .collect()
}

fn strip_list_marker(line: &str) -> String {
    let trimmed = line.trim_start_matches(['-', '*', '•']).trim_start();
    // Numbered markers: "3." or "3)".
    let mut chars = trimmed.char_indices().peekable();
    let mut digits_end = 0;
    while let Some((i, c)) = chars.peek().copied() {
        if c.is_ascii_digit() {
            digits_end = i + c.len_utf8();
            chars.next();
        } else {
            break;
        }
    }
    if digits_end > 0 {
        if let Some(rest) = trimmed[digits_end..].strip_prefix(['.', ')']) {
            return rest.trim().to_string();
        }
    }
    trimmed.trim().to_string()
}

/// Extract a percentage in [0, 100] from a judge reply and scale to [0, 1].
pub fn parse_percentage(text: &str) -> Option<f64> {
    let mut number = String::new();
    let mut seen_digit = false;
    for c in text.chars() {
        if c.is_ascii_digit() {
            number.push(c);
            seen_digit = true;
        } else if c == '.' && seen_digit && !number.contains('.') {
            number.push(c);
        } else if seen_digit {
            break;
        }
    }
    let value: f64 = number.trim_end_matches('.').parse().ok()?;
    Some(value.clamp(0.0, 100.0) / 100.0)
}

fn parse_support_verdict(text: &str) -> Option<bool> {
    let lower = text.trim().to_lowercase();
    if lower.contains("not-supported") || lower.contains("not supported") {
        Some(false)
    } else if lower.contains("supported") {
        Some(true)
    } else if lower.starts_with("yes") {
        Some(true)
    } else if lower.starts_with("no") {
        Some(false)
    } else {
        None
    }
}

/// Sample N responses for a topic, flagging refusals.
///
/// Refused responses are kept (the store retains them) but excluded from
/// every downstream stage; if all N refuse the topic is reported skipped.
pub fn generate_responses(
    topic: &TopicItem,
    cfg: &PipelineConfig,
    client: &Client,
) -> Result<Vec<SampledResponse>, PipelineError> {
    if topic.prompt.trim().is_empty() {
        return Err(PipelineError::Config(format!(
            "topic {} has an empty prompt",
            topic.topic_id
        )));
    }
    let stage_tag = if cfg.sample_temperature == 0.0 {
        StageTag::GreedyGen
    } else {
        StageTag::DiverseGen
    };
    let prompt = cfg.templates.generation.replace("{prompt}", &topic.prompt);
    let responses: Vec<Result<SampledResponse, BackendError>> =
        par::map_range(cfg.n_samples as usize, |i| {
            let req = CompletionRequest::new(stage_tag, prompt.clone())
                .temperature(cfg.sample_temperature)
                .max_tokens(cfg.max_tokens_generation)
                .logprobs(true)
                .seed(stable_seed(&[
                    &cfg.seed.to_string(),
                    "gen",
                    &topic.topic_id,
                    &i.to_string(),
                ]));
            let result = client.complete(&req)?;
            let refusal = is_refusal(&result.text, &cfg.refusal_phrases, cfg.refusal_max_tokens);
            Ok(SampledResponse {
                id: content_id(&topic.topic_id, "response", i as u64, &result.text),
                topic_id: topic.topic_id.clone(),
                sample_index: i as u32,
                text: result.text,
                refusal,
                temperature: cfg.sample_temperature,
                token_logprobs: result.token_logprobs,
            })
        });
    let responses: Result<Vec<_>, _> = responses.into_iter().collect();
    let responses = responses?;
    if responses.iter().all(|r| r.refusal) {
        // Caller stores the refused responses, then marks the topic skipped.
        return Err(PipelineError::AllRefused(topic.topic_id.clone()));
    }
    Ok(responses)
}

/// Decompose a response into ordered atomic claims at temperature 0.
///
/// The reply must parse as a list; one retry (bypassing the cache) is
/// allowed before the stage errors out. A parseable-but-empty list means
/// the response is excluded: `Ok(empty)` with the reason in the error slot.
pub fn decompose_claims(
    response: &SampledResponse,
    topic: &TopicItem,
    cfg: &PipelineConfig,
    client: &Client,
) -> Result<Vec<ClaimRecord>, PipelineError> {
    if response.refusal {
        return Err(PipelineError::Stage {
            topic: topic.topic_id.clone(),
            stage: "decomposition",
            message: "refused responses are excluded".into(),
        });
    }
    let prompt = cfg
        .templates
        .decomposition
        .replace("{context}", &topic.prompt)
        .replace("{text}", &response.text);
    let mut claims = None;
    for attempt in 0..2u64 {
        let mut req = CompletionRequest::new(StageTag::ClaimExtract, prompt.clone())
            .max_tokens(cfg.max_tokens_decomposition);
        if attempt > 0 {
            req = req.seed(attempt);
        }
        let result = client.complete(&req)?;
        let parsed = parse_list_lines(&result.text);
        if !parsed.is_empty() || result.text.trim().is_empty() {
            claims = Some(parsed);
            break;
        }
        // Prose or preamble-only reply: retry once with a fresh request.
    }
    let texts = claims.ok_or_else(|| PipelineError::Stage {
        topic: topic.topic_id.clone(),
        stage: "decomposition",
        message: format!("unparseable claim list for response {}", response.id),
    })?;
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| ClaimRecord {
            id: content_id(&response.id, "claim", (i + 1) as u64, &text),
            response_id: response.id.clone(),
            topic_id: topic.topic_id.clone(),
            index: (i + 1) as u32,
            text,
        })
        .collect())
}

/// Derive up to `n_questions_max` questions for a claim in one request.
///
/// Duplicates (after whitespace/case normalization) are dropped and the
/// model's output order is kept. If nothing parses, a synthetic fallback
/// question is built from the template and flagged.
pub fn generate_questions(
    claim: &ClaimRecord,
    topic: &TopicItem,
    cfg: &PipelineConfig,
    client: &Client,
) -> Result<Vec<QuestionRecord>, PipelineError> {
    let prompt = cfg
        .templates
        .question
        .replace("{context}", &topic.prompt)
        .replace("{claim}", &claim.text);
    let req = CompletionRequest::new(StageTag::QuestionGen, prompt)
        .temperature(cfg.sample_temperature)
        .max_tokens(cfg.max_tokens_question)
        .seed(stable_seed(&[&cfg.seed.to_string(), "questions", &claim.id]));
    let result = client.complete(&req)?;
    let mut seen = std::collections::HashSet::new();
    let mut questions: Vec<String> = Vec::new();
    for line in parse_list_lines(&result.text) {
        let normalized = line.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if seen.insert(normalized) {
            questions.push(line);
        }
        if questions.len() == cfg.n_questions_max as usize {
            break;
        }
    }
    let synthetic = questions.is_empty();
    if synthetic {
        questions.push(format!(
            "Regarding {}: is the following true: {}?",
            topic.prompt.trim_end_matches(['.', '?']),
            claim.text
        ));
    }
    Ok(questions
        .into_iter()
        .enumerate()
        .map(|(i, text)| QuestionRecord {
            id: content_id(&claim.id, "question", i as u64, &text),
            claim_id: claim.id.clone(),
            index: i as u32,
            text,
            synthetic,
        })
        .collect())
}

/// Sample `n_answers` context-free answers for a question.
///
/// The answering prompt sees only the original dataset prompt as context,
/// never the sampled response. A failed sample leaves its slot missing.
pub fn answer_questions(
    question: &QuestionRecord,
    topic: &TopicItem,
    cfg: &PipelineConfig,
    client: &Client,
) -> (Vec<AnswerRecord>, Vec<String>) {
    let prompt = cfg
        .templates
        .answering
        .replace("{context}", &topic.prompt)
        .replace("{question}", &question.text);
    let want_logprobs = client.supports_logprobs();
    let results = par::map_range(cfg.n_answers as usize, |i| {
        let req = CompletionRequest::new(StageTag::AnswerGen, prompt.clone())
            .temperature(cfg.sample_temperature)
            .max_tokens(cfg.max_tokens_answer)
            .logprobs(want_logprobs)
            .seed(stable_seed(&[
                &cfg.seed.to_string(),
                "answers",
                &question.id,
                &i.to_string(),
            ]));
        client.complete(&req).map(|result| AnswerRecord {
            id: content_id(&question.id, "answer", i as u64, &result.text),
            question_id: question.id.clone(),
            index: i as u32,
            text: result.text,
            token_logprobs: result.token_logprobs,
        })
    });
    let mut answers = Vec::new();
    let mut missing = Vec::new();
    for (i, result) in results.into_iter().enumerate() {
        match result {
            Ok(answer) => answers.push(answer),
            Err(err) => missing.push(format!(
                "question {} answer slot {i} missing: {err}",
                question.id
            )),
        }
    }
    (answers, missing)
}

/// Judge how much of the claim context contradicts a single answer.
///
/// The context is the concatenation of the claims on the configured side of
/// the claim under test. An empty context cannot be contradicted: the score
/// is 0 by convention, flagged vacuous. An unparseable percentage after one
/// retry is recorded missing.
pub fn evaluate_contradiction(
    answer: &AnswerRecord,
    claim_id: &str,
    claim_context: &[&str],
    direction: Direction,
    cfg: &PipelineConfig,
    client: &Client,
) -> Result<ContradictionRecord, PipelineError> {
    if claim_context.is_empty() {
        return Ok(ContradictionRecord {
            answer_id: answer.id.clone(),
            claim_id: claim_id.to_string(),
            direction,
            value: Some(0.0),
            vacuous: true,
        });
    }
    let prompt = cfg
        .templates
        .contradiction
        .replace("{statement}", &answer.text)
        .replace("{context}", &claim_context.join(" "));
    let mut value = None;
    for attempt in 0..2u64 {
        let mut req = CompletionRequest::new(StageTag::ContradictionEval, prompt.clone())
            .max_tokens(cfg.max_tokens_judge);
        if attempt > 0 {
            req = req.seed(attempt);
        }
        let result = client.complete(&req)?;
        if let Some(v) = parse_percentage(&result.text) {
            value = Some(v);
            break;
        }
    }
    Ok(ContradictionRecord {
        answer_id: answer.id.clone(),
        claim_id: claim_id.to_string(),
        direction,
        value,
        vacuous: false,
    })
}

/// Judge whether another sampled response supports a claim.
///
/// An unparseable verdict after one retry counts as not-supported and is
/// flagged for the diagnostics tally.
pub fn evaluate_entailment(
    claim: &ClaimRecord,
    other_response: &SampledResponse,
    cfg: &PipelineConfig,
    client: &Client,
) -> Result<EntailmentRecord, PipelineError> {
    let prompt = cfg
        .templates
        .entailment
        .replace("{claim}", &claim.text)
        .replace("{passage}", &other_response.text);
    let (verdict, parse_failed) = judge_with_retry(&prompt, StageTag::EntailmentEval, cfg, client)?;
    Ok(EntailmentRecord {
        claim_id: claim.id.clone(),
        response_id: other_response.id.clone(),
        verdict,
        parse_failed,
    })
}

fn evaluate_support(
    claim: &ClaimRecord,
    other_response: &SampledResponse,
    cfg: &PipelineConfig,
    client: &Client,
) -> Result<SupportRecord, PipelineError> {
    let prompt = cfg
        .templates
        .support
        .replace("{claim}", &claim.text)
        .replace("{passage}", &other_response.text);
    let (verdict, parse_failed) = judge_with_retry(&prompt, StageTag::EntailmentEval, cfg, client)?;
    Ok(SupportRecord {
        claim_id: claim.id.clone(),
        response_id: other_response.id.clone(),
        verdict,
        parse_failed,
    })
}

fn judge_with_retry(
    prompt: &str,
    tag: StageTag,
    cfg: &PipelineConfig,
    client: &Client,
) -> Result<(bool, bool), PipelineError> {
    for attempt in 0..2u64 {
        let mut req =
            CompletionRequest::new(tag, prompt.to_string()).max_tokens(cfg.max_tokens_judge);
        if attempt > 0 {
            req = req.seed(attempt);
        }
        let result = client.complete(&req)?;
        if let Some(verdict) = parse_support_verdict(&result.text) {
            return Ok((verdict, false));
        }
    }
    Ok((false, true))
}

/// Outcome of a full pipeline run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub topics_completed: usize,
    pub topics_failed: usize,
    pub topics_skipped: usize,
    pub judge_parse_failures: usize,
}

/// Execute all active stages for every stored topic, checkpointing after
/// each stage per topic.
///
/// Re-invocation resumes at the first incomplete stage of each topic; a
/// stage error marks the topic failed and the run continues. `stop_after`
/// halts after the named stage (used to exercise resumption).
pub fn run_pipeline(
    store: &mut RunStore,
    client: &Client,
    cfg: &PipelineConfig,
    stop_after: Option<PipelineStage>,
) -> Result<RunSummary, PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    client.restore_ledger(store.manifest().ledger.clone());
    let topics: Vec<TopicItem> = store.read()?;
    let stages = cfg.active_stages();
    let mut summary = RunSummary::default();

    for topic in &topics {
        if store.manifest().topic_skipped(&topic.topic_id) {
            summary.topics_skipped += 1;
            continue;
        }
        let mut failed = false;
        for &stage in &stages {
            if store.manifest().status(&topic.topic_id, stage) == StageStatus::Complete {
                continue;
            }
            match run_stage(store, client, cfg, topic, stage, &mut summary) {
                Ok(StageOutcome::Done) => {
                    store.manifest_mut().set_status(&topic.topic_id, stage, StageStatus::Complete);
                    checkpoint(store, client)?;
                }
                Ok(StageOutcome::TopicSkipped(reason)) => {
                    store.manifest_mut().set_status(&topic.topic_id, stage, StageStatus::Skipped);
                    store.manifest_mut().topics.get_mut(&topic.topic_id).map(|t| {
                        t.reason = Some(reason);
                        t
                    });
                    checkpoint(store, client)?;
                    summary.topics_skipped += 1;
                    failed = true; // stop processing further stages
                    break;
                }
                Err(err) => {
                    store.diagnostic(stage.name(), &format!("topic {}: {err}", topic.topic_id));
                    store.manifest_mut().set_status(&topic.topic_id, stage, StageStatus::Failed);
                    store.manifest_mut().topics.get_mut(&topic.topic_id).map(|t| {
                        t.reason = Some(err.to_string());
                        t
                    });
                    checkpoint(store, client)?;
                    summary.topics_failed += 1;
                    failed = true;
                    break;
                }
            }
            if Some(stage) == stop_after {
                break;
            }
        }
        if !failed {
            let last = stop_after.unwrap_or(*stages.last().expect("stages non-empty"));
            if store.manifest().status(&topic.topic_id, last) == StageStatus::Complete {
                summary.topics_completed += 1;
            }
        }
    }
    Ok(summary)
}

enum StageOutcome {
    Done,
    TopicSkipped(String),
}

fn checkpoint(store: &mut RunStore, client: &Client) -> Result<(), StoreError> {
    store.manifest_mut().ledger = client.ledger();
    store.save_manifest()
}

fn run_stage(
    store: &mut RunStore,
    client: &Client,
    cfg: &PipelineConfig,
    topic: &TopicItem,
    stage: PipelineStage,
    summary: &mut RunSummary,
) -> Result<StageOutcome, PipelineError> {
    match stage {
        PipelineStage::Generation => match generate_responses(topic, cfg, client) {
            Ok(responses) => {
                store.append(&responses)?;
                Ok(StageOutcome::Done)
            }
            Err(PipelineError::AllRefused(_)) => {
                Ok(StageOutcome::TopicSkipped("all responses refused".into()))
            }
            Err(err) => Err(err),
        },
        PipelineStage::Decomposition => {
            let responses = active_responses(store, topic)?;
            let results = par::map(&responses, |r| decompose_claims(r, topic, cfg, client));
            let mut all_claims = Vec::new();
            for (response, result) in responses.iter().zip(results) {
                let claims = result?;
                if claims.is_empty() {
                    store.diagnostic(
                        "decomposition",
                        &format!("response {} excluded: empty claim set", response.id),
                    );
                    continue;
                }
                let k = claims.len() as u32;
                let manifest = store.manifest_mut();
                manifest.max_claims_per_response = manifest.max_claims_per_response.max(k);
                all_claims.extend(claims);
            }
            store.append(&all_claims)?;
            Ok(StageOutcome::Done)
        }
        PipelineStage::Questions => {
            let claims = topic_claims(store, topic)?;
            let results = par::map(&claims, |c| generate_questions(c, topic, cfg, client));
            let mut questions = Vec::new();
            for result in results {
                questions.extend(result?);
            }
            store.append(&questions)?;
            Ok(StageOutcome::Done)
        }
        PipelineStage::Answers => {
            let claims = topic_claims(store, topic)?;
            let claim_ids: std::collections::HashSet<String> =
                claims.iter().map(|c| c.id.clone()).collect();
            let questions: Vec<QuestionRecord> =
                store.read_filtered(|q: &QuestionRecord| claim_ids.contains(&q.claim_id))?;
            let results = par::map(&questions, |q| answer_questions(q, topic, cfg, client));
            let mut answers = Vec::new();
            for (batch, missing) in results {
                answers.extend(batch);
                for message in missing {
                    store.diagnostic("answers", &message);
                }
            }
            store.append(&answers)?;
            Ok(StageOutcome::Done)
        }
        PipelineStage::Contradiction => {
            run_contradiction_stage(store, client, cfg, topic, cfg.direction)
        }
        PipelineStage::ContradictionRev => {
            let opposite = match cfg.direction {
                Direction::Preceding => Direction::Subsequent,
                Direction::Subsequent => Direction::Preceding,
            };
            run_contradiction_stage(store, client, cfg, topic, opposite)
        }
        PipelineStage::Entailment => {
            let responses = active_responses(store, topic)?;
            let claims = topic_claims(store, topic)?;
            let pairs: Vec<(&ClaimRecord, &SampledResponse)> = claims
                .iter()
                .flat_map(|c| responses.iter().map(move |r| (c, r)))
                .collect();
            let results = par::map(&pairs, |(c, r)| evaluate_entailment(c, r, cfg, client));
            let mut records = Vec::new();
            for result in results {
                let record = result?;
                if record.parse_failed {
                    summary.judge_parse_failures += 1;
                }
                records.push(record);
            }
            store.append(&records)?;
            Ok(StageOutcome::Done)
        }
        PipelineStage::Support => {
            let responses = active_responses(store, topic)?;
            let claims = topic_claims(store, topic)?;
            // Alternatives only: a claim is never judged against its own
            // source response here.
            let pairs: Vec<(&ClaimRecord, &SampledResponse)> = claims
                .iter()
                .flat_map(|c| {
                    responses
                        .iter()
                        .filter(move |r| r.id != c.response_id)
                        .map(move |r| (c, r))
                })
                .collect();
            let results = par::map(&pairs, |(c, r)| evaluate_support(c, r, cfg, client));
            let mut records = Vec::new();
            for result in results {
                let record = result?;
                if record.parse_failed {
                    summary.judge_parse_failures += 1;
                }
                records.push(record);
            }
            store.append(&records)?;
            Ok(StageOutcome::Done)
        }
        PipelineStage::Labeling | PipelineStage::Scoring => Ok(StageOutcome::Done),
    }
}

fn active_responses(
    store: &RunStore,
    topic: &TopicItem,
) -> Result<Vec<SampledResponse>, StoreError> {
    let mut responses: Vec<SampledResponse> = store
        .read_filtered(|r: &SampledResponse| r.topic_id == topic.topic_id && !r.refusal)?;
    responses.sort_by_key(|r| r.sample_index);
    Ok(responses)
}

fn topic_claims(store: &RunStore, topic: &TopicItem) -> Result<Vec<ClaimRecord>, StoreError> {
    let mut claims: Vec<ClaimRecord> =
        store.read_filtered(|c: &ClaimRecord| c.topic_id == topic.topic_id)?;
    claims.sort_by(|a, b| a.response_id.cmp(&b.response_id).then(a.index.cmp(&b.index)));
    Ok(claims)
}

fn run_contradiction_stage(
    store: &mut RunStore,
    client: &Client,
    cfg: &PipelineConfig,
    topic: &TopicItem,
    direction: Direction,
) -> Result<StageOutcome, PipelineError> {
    use std::collections::HashMap;
    let responses = active_responses(store, topic)?;
    let claims = topic_claims(store, topic)?;
    let claim_ids: std::collections::HashSet<String> =
        claims.iter().map(|c| c.id.clone()).collect();
    let questions: Vec<QuestionRecord> =
        store.read_filtered(|q: &QuestionRecord| claim_ids.contains(&q.claim_id))?;
    let question_ids: std::collections::HashSet<String> =
        questions.iter().map(|q| q.id.clone()).collect();
    let answers: Vec<AnswerRecord> =
        store.read_filtered(|a: &AnswerRecord| question_ids.contains(&a.question_id))?;

    let mut questions_by_claim: HashMap<&str, Vec<&QuestionRecord>> = HashMap::new();
    for q in &questions {
        questions_by_claim.entry(q.claim_id.as_str()).or_default().push(q);
    }
    let mut answers_by_question: HashMap<&str, Vec<&AnswerRecord>> = HashMap::new();
    for a in &answers {
        answers_by_question.entry(a.question_id.as_str()).or_default().push(a);
    }
    let mut claims_by_response: HashMap<&str, Vec<&ClaimRecord>> = HashMap::new();
    for c in &claims {
        claims_by_response.entry(c.response_id.as_str()).or_default().push(c);
    }

    let mut jobs: Vec<(AnswerRecord, String, Vec<String>)> = Vec::new();
    for response in &responses {
        let mut response_claims = claims_by_response
            .get(response.id.as_str())
            .cloned()
            .unwrap_or_default();
        response_claims.sort_by_key(|c| c.index);
        let texts: Vec<&str> = response_claims.iter().map(|c| c.text.as_str()).collect();
        for (i, claim) in response_claims.iter().enumerate() {
            // Preceding context includes the claim itself; subsequent
            // context is strictly after it.
            let context: Vec<String> = match direction {
                Direction::Preceding => texts[..=i].iter().map(|s| s.to_string()).collect(),
                Direction::Subsequent => texts[i + 1..].iter().map(|s| s.to_string()).collect(),
            };
            for question in questions_by_claim.get(claim.id.as_str()).into_iter().flatten() {
                for answer in answers_by_question
                    .get(question.id.as_str())
                    .into_iter()
                    .flatten()
                {
                    jobs.push(((*answer).clone(), claim.id.clone(), context.clone()));
                }
            }
        }
    }
    let results = par::map(&jobs, |(answer, claim_id, context)| {
        let context_refs: Vec<&str> = context.iter().map(String::as_str).collect();
        evaluate_contradiction(answer, claim_id, &context_refs, direction, cfg, client)
    });
    let mut records = Vec::new();
    for result in results {
        let record = result?;
        if record.value.is_none() {
            store.diagnostic(
                "contradiction",
                &format!("answer {}: unparseable percentage, recorded missing", record.answer_id),
            );
        }
        records.push(record);
    }
    store.append(&records)?;
    Ok(StageOutcome::Done)
}

/// Snapshot of everything that identifies a run, stored in the manifest and
/// compared on resume.
pub fn config_snapshot(cfg: &PipelineConfig, client: &Client) -> serde_json::Value {
    serde_json::json!({
        "pipeline": cfg,
        "model": client.model_name(),
    })
}

/// Deterministic run id from the config snapshot.
pub fn run_id(snapshot: &serde_json::Value) -> String {
    content_id("", "run", 0, &snapshot.to_string())
}
