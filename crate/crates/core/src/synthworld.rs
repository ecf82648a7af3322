//! Synthetic knowledge worlds with fabrication behaviour known by
//! construction.
//!
//! A world holds entities with ground-truth facts and, for a subset of
//! attributes, a fabricated override value. Its backend answers every
//! pipeline stage deterministically from those tables:
//!
//! - generation emits one templated sentence per attribute, swapping in the
//!   fabricated value with probability `fabrication_rate` (per attribute, or
//!   per sample when the world is context-driven);
//! - interrogation answers repeat the claimed value with probability
//!   `answer_consistency` and otherwise reveal the ground truth;
//! - the contradiction, entailment and correctness judges compare parsed
//!   `(entity, attribute, value)` triples exactly.
//!
//! Fabricated values are the same in every sample by default, modelling the
//! mutually-consistent fabrication that cross-sample consistency checks
//! cannot see; `per_sample_refabrication` flips that for contrast runs.

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, CompletionRequest, RawCompleter, RawCompletion, StageTag};
use crate::model::{ClaimRecord, CorrectnessLabel, Label, TokenLogprob, TopicItem};

const FIRST_NAMES: [&str; 20] = [
    "Alda", "Boris", "Casimir", "Delphine", "Edmund", "Fenna", "Gustav", "Hilde", "Ivo", "Jorunn",
    "Klara", "Lennart", "Mireille", "Nils", "Odette", "Pavel", "Quirin", "Rosalind", "Sigrid",
    "Tobias",
];

const LAST_NAMES: [&str; 20] = [
    "Ashgrove", "Brandt", "Copperfield", "Durant", "Eklund", "Falk", "Grimaldi", "Hartwell",
    "Ingerson", "Jarvela", "Kovacs", "Lindqvist", "Moreau", "Norgaard", "Ostrovsky", "Pellerin",
    "Quist", "Rutherford", "Sorensen", "Thackeray",
];

const ATTRIBUTES: [&str; 12] = [
    "profession",
    "birthplace",
    "birth year",
    "employer",
    "notable award",
    "field of study",
    "residence",
    "alma mater",
    "nationality",
    "signature work",
    "founding role",
    "mentor",
];

const ADJECTIVES: [&str; 20] = [
    "amber", "boreal", "cobalt", "ducal", "ember", "floral", "gilded", "hollow", "ivory", "jade",
    "keel", "lunar", "marble", "noble", "ochre", "pale", "quartz", "russet", "slate", "tidal",
];

const NOUNS: [&str; 20] = [
    "archive", "beacon", "citadel", "delta", "engine", "fjord", "grove", "harbor", "island",
    "junction", "kiln", "lagoon", "meadow", "nexus", "orchard", "plateau", "quarry", "ridge",
    "summit", "terrace",
];

/// Deterministic 64-bit seed from string parts.
pub fn stable_seed(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// World-construction parameters; the on-disk world file stores exactly this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub entities: usize,
    pub attributes_per_entity: usize,
    /// How many attributes carry a fabricated override value.
    pub fabricated_attributes: usize,
    /// Probability a sampled response uses the fabricated value.
    pub fabrication_rate: f64,
    /// Probability an interrogation answer matches the claimed value rather
    /// than the ground truth.
    pub answer_consistency: f64,
    /// Fabrication is a per-sample event cascading from the first attribute
    /// (the premise) instead of independent per attribute.
    #[serde(default)]
    pub context_driven: bool,
    /// Context-driven responses end with a sentence restating the premise.
    #[serde(default)]
    pub restate_premise: bool,
    /// Generate a fresh false value per sample instead of a consistent one.
    #[serde(default)]
    pub per_sample_refabrication: bool,
    /// This many entities refuse to answer entirely.
    #[serde(default)]
    pub refusal_entities: usize,
    #[serde(default = "default_dataset_tag")]
    pub dataset_tag: String,
}

fn default_dataset_tag() -> String {
    "synthetic".to_string()
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            entities: 5,
            attributes_per_entity: 8,
            fabricated_attributes: 4,
            fabrication_rate: 0.4,
            answer_consistency: 0.2,
            context_driven: false,
            restate_premise: false,
            per_sample_refabrication: false,
            refusal_entities: 0,
            dataset_tag: default_dataset_tag(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeFact {
    pub name: String,
    pub true_value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fabricated_value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub facts: Vec<AttributeFact>,
    #[serde(default)]
    pub refuses: bool,
}

/// A fully materialized synthetic world; immutable after build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub entities: Vec<Entity>,
}

/// Build a world deterministically from its config.
pub fn build_world(config: &WorldConfig) -> Result<SynthWorld, BackendError> {
    if config.entities == 0 {
        return Err(BackendError::Config("world needs at least one entity".into()));
    }
    if config.attributes_per_entity == 0 {
        return Err(BackendError::Config("world needs at least one attribute".into()));
    }
    if config.fabricated_attributes > config.attributes_per_entity {
        return Err(BackendError::Config(
            "fabricated_attributes exceeds attributes_per_entity".into(),
        ));
    }
    for (name, rate) in [
        ("fabrication_rate", config.fabrication_rate),
        ("answer_consistency", config.answer_consistency),
    ] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(BackendError::Config(format!("{name} must lie in [0,1], got {rate}")));
        }
    }

    let mut entities = Vec::with_capacity(config.entities);
    for i in 0..config.entities {
        let name = format!(
            "{} {}",
            FIRST_NAMES[i % FIRST_NAMES.len()],
            LAST_NAMES[(i / FIRST_NAMES.len()) % LAST_NAMES.len()]
        );
        let name = if i >= FIRST_NAMES.len() * LAST_NAMES.len() {
            format!("{name} {}", i / (FIRST_NAMES.len() * LAST_NAMES.len()) + 2)
        } else {
            name
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[
            &config.seed.to_string(),
            "entity",
            &name,
        ]));
        // Spread fabricated attributes evenly over the sequence so kernels
        // see both early and late unfaithfulness.
        let override_indices: Vec<usize> = if config.fabricated_attributes == 0 {
            Vec::new()
        } else {
            let step = config.attributes_per_entity as f64 / config.fabricated_attributes as f64;
            (0..config.fabricated_attributes)
                .map(|j| (j as f64 * step) as usize)
                .collect()
        };
        let facts = (0..config.attributes_per_entity)
            .map(|j| {
                let attr_name = if j < ATTRIBUTES.len() {
                    ATTRIBUTES[j].to_string()
                } else {
                    format!("attribute {j}")
                };
                let true_value = gen_value(&mut rng);
                let fabricated_value = override_indices.contains(&j).then(|| {
                    let mut v = gen_value(&mut rng);
                    while v == true_value {
                        v = gen_value(&mut rng);
                    }
                    v
                });
                AttributeFact {
                    name: attr_name,
                    true_value,
                    fabricated_value,
                }
            })
            .collect();
        entities.push(Entity {
            name,
            facts,
            refuses: i < config.refusal_entities,
        });
    }
    Ok(SynthWorld {
        config: config.clone(),
        entities,
    })
}

fn gen_value(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{}-{}-{}",
        ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())],
        NOUNS[rng.gen_range(0..NOUNS.len())],
        rng.gen_range(10..100)
    )
}

impl SynthWorld {
    pub fn entity(&self, name: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.name == name)
    }

    /// Entity whose name appears in the text, if any.
    fn entity_in(&self, text: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| text.contains(&e.name))
    }

    /// The dataset this world stands in for: one topic per entity, with a
    /// reference article assembled from the ground-truth facts.
    pub fn dataset(&self) -> Vec<TopicItem> {
        self.entities
            .iter()
            .map(|e| TopicItem {
                topic_id: e.name.replace(' ', "-").to_lowercase(),
                prompt: format!("Tell me about {}.", e.name),
                reference: Some(self.reference_article(e)),
                dataset_tag: self.config.dataset_tag.clone(),
            })
            .collect()
    }

    fn reference_article(&self, entity: &Entity) -> String {
        entity
            .facts
            .iter()
            .map(|f| fact_sentence(&f.name, &entity.name, &f.true_value))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Exact correctness labels from the fact tables, bypassing any judge.
    ///
    /// A claim whose value matches the ground truth is correct, a claim with
    /// a recognized attribute but a different value is incorrect, and a claim
    /// that cannot be traced to a world fact is `not_enough_information`.
    pub fn ground_truth_labels(&self, claims: &[ClaimRecord]) -> Vec<CorrectnessLabel> {
        claims
            .iter()
            .map(|claim| {
                let label = match parse_fact_sentence(&claim.text) {
                    Some((attr, entity_name, value)) => match self
                        .entity(&entity_name)
                        .and_then(|e| e.facts.iter().find(|f| f.name == attr))
                    {
                        Some(fact) if fact.true_value == value => Label::Correct,
                        Some(_) => Label::Incorrect,
                        None => Label::NotEnoughInformation,
                    },
                    None => Label::NotEnoughInformation,
                };
                CorrectnessLabel {
                    claim_id: claim.id.clone(),
                    label,
                    judge_raw: "ground-truth".into(),
                }
            })
            .collect()
    }
}

/// Render one fact as the world's rigid sentence template.
pub fn fact_sentence(attr: &str, entity: &str, value: &str) -> String {
    format!("The {attr} of {entity} is {value}.")
}

/// Parse `(attribute, entity, value)` from a fact sentence.
///
/// Accepts the plain template, a leading `To recap,`, and the question form
/// `Is it true that the ... is ...?`.
pub fn parse_fact_sentence(text: &str) -> Option<(String, String, String)> {
    let t = text.trim().trim_end_matches(['.', '?']);
    let t = t.strip_prefix("To recap, ").unwrap_or(t);
    let t = t.strip_prefix("Is it true that ").unwrap_or(t);
    let t = t.strip_prefix("The ").or_else(|| t.strip_prefix("the "))?;
    let of_pos = t.find(" of ")?;
    let attr = &t[..of_pos];
    let rest = &t[of_pos + 4..];
    let is_pos = rest.rfind(" is ")?;
    let entity = &rest[..is_pos];
    let value = &rest[is_pos + 4..];
    if attr.is_empty() || entity.is_empty() || value.is_empty() {
        return None;
    }
    Some((attr.to_string(), entity.to_string(), value.to_string()))
}

fn extract_between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(text[start..end].trim())
}

fn extract_after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let start = text.rfind(marker)? + marker.len();
    let rest = &text[start..];
    let end = rest.find('\n').unwrap_or(rest.len());
    Some(rest[..end].trim())
}

/// Backend that answers every stage prompt from the world's fact tables.
pub struct WorldBackend {
    world: Arc<SynthWorld>,
    ordinal: Mutex<u64>,
}

/// Wrap a validated world as a deterministic scripted backend.
pub fn scripted_backend_from_world(world: SynthWorld) -> Result<WorldBackend, BackendError> {
    if world.entities.is_empty() {
        return Err(BackendError::Config("world has no entities".into()));
    }
    if world.entities.iter().any(|e| e.facts.is_empty()) {
        return Err(BackendError::Config("world entity without facts".into()));
    }
    Ok(WorldBackend {
        world: Arc::new(world),
        ordinal: Mutex::new(0),
    })
}

impl WorldBackend {
    pub fn world(&self) -> &SynthWorld {
        &self.world
    }

    fn entropy(&self, req: &CompletionRequest) -> u64 {
        match req.seed_hint {
            Some(seed) => seed,
            None if req.temperature > 0.0 => {
                let mut ordinal = self.ordinal.lock().unwrap();
                *ordinal += 1;
                *ordinal
            }
            None => 0,
        }
    }

    fn rng(&self, label: &str, key: &str, entropy: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stable_seed(&[
            &self.world.config.seed.to_string(),
            label,
            key,
            &entropy.to_string(),
        ]))
    }

    fn generate(&self, req: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        let world = &self.world;
        let entity = world.entity_in(&req.prompt).ok_or_else(|| BackendError::NoScriptEntry {
            stage: req.stage_tag,
            prompt_prefix: req.prompt.chars().take(80).collect(),
        })?;
        if entity.refuses {
            let text = "I cannot provide information on this topic.".to_string();
            let logprobs = plain_logprobs(&text, &mut self.rng("refuse", &entity.name, 0));
            return Ok(RawCompletion {
                text,
                token_logprobs: req.want_logprobs.then_some(logprobs),
                usage: None,
            });
        }

        let entropy = if req.temperature == 0.0 { 0 } else { self.entropy(req) };
        let mut rng = self.rng("gen", &entity.name, entropy);
        let cfg = &world.config;
        let sample_fabricates = cfg.context_driven && rng.gen::<f64>() < cfg.fabrication_rate;

        let mut sentences = Vec::new();
        let mut fabricated_flags = Vec::new();
        let mut premise: Option<(String, String)> = None;
        for fact in &entity.facts {
            let fabricate = match &fact.fabricated_value {
                None => false,
                Some(_) if cfg.context_driven => sample_fabricates,
                Some(_) => rng.gen::<f64>() < cfg.fabrication_rate,
            };
            let value = if fabricate {
                if cfg.per_sample_refabrication {
                    let mut refab_rng =
                        self.rng("refab", &format!("{}|{}", entity.name, fact.name), entropy);
                    gen_value(&mut refab_rng)
                } else {
                    fact.fabricated_value.clone().unwrap()
                }
            } else {
                fact.true_value.clone()
            };
            if premise.is_none() {
                premise = Some((fact.name.clone(), value.clone()));
            }
            sentences.push(fact_sentence(&fact.name, &entity.name, &value));
            fabricated_flags.push(fabricate);
        }
        if cfg.restate_premise {
            let (attr, value) = premise.expect("entity has facts");
            sentences.push(format!("To recap, the {attr} of {} is {value}.", entity.name));
            fabricated_flags.push(*fabricated_flags.first().unwrap_or(&false));
        }

        let text = sentences.join(" ");
        let token_logprobs = req.want_logprobs.then(|| {
            let mut lps = Vec::new();
            for (sentence, fabricated) in sentences.iter().zip(&fabricated_flags) {
                let mut lp_rng = self.rng("lp", sentence, entropy);
                for token in sentence.split_whitespace() {
                    let lp = if *fabricated {
                        -(0.5 + 0.9 * lp_rng.gen::<f64>())
                    } else {
                        -(0.01 + 0.05 * lp_rng.gen::<f64>())
                    };
                    lps.push((token.to_string(), lp));
                }
            }
            lps
        });
        Ok(RawCompletion {
            text,
            token_logprobs,
            usage: None,
        })
    }

    fn decompose(&self, req: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        let text = extract_between(&req.prompt, "<Text>", "</Text>").ok_or_else(|| {
            BackendError::Decode {
                stage: req.stage_tag,
                message: "decomposition prompt lacks <Text> block".into(),
            }
        })?;
        let claims: Vec<String> = split_sentences(text)
            .into_iter()
            .map(|s| format!("- {s}"))
            .collect();
        Ok(RawCompletion {
            text: claims.join("\n"),
            token_logprobs: None,
            usage: None,
        })
    }

    fn question(&self, req: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        let claim = extract_after(&req.prompt, "Claim: ").unwrap_or("");
        let text = match parse_fact_sentence(claim) {
            Some((attr, entity, value)) => {
                format!("Is it true that the {attr} of {entity} is {value}?")
            }
            None => format!("Can you verify the following: {claim}?"),
        };
        Ok(RawCompletion {
            text,
            token_logprobs: None,
            usage: None,
        })
    }

    fn answer(&self, req: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        let question = extract_after(&req.prompt, "Question: ").unwrap_or("");
        let entropy = self.entropy(req);
        let mut rng = self.rng("ans", question, entropy);
        let (text, truthful) = match parse_fact_sentence(question) {
            Some((attr, entity_name, claimed_value)) => {
                let truth = self
                    .world
                    .entity(&entity_name)
                    .and_then(|e| e.facts.iter().find(|f| f.name == attr))
                    .map(|f| f.true_value.clone());
                match truth {
                    Some(true_value) => {
                        let value = if rng.gen::<f64>() < self.world.config.answer_consistency {
                            claimed_value
                        } else {
                            true_value.clone()
                        };
                        let truthful = value == true_value;
                        (fact_sentence(&attr, &entity_name, &value), truthful)
                    }
                    None => ("I am not sure about that.".to_string(), false),
                }
            }
            None => ("I am not sure about that.".to_string(), false),
        };
        let token_logprobs = req.want_logprobs.then(|| {
            let mut lps = Vec::new();
            for token in text.split_whitespace() {
                let lp = if truthful {
                    -(0.01 + 0.05 * rng.gen::<f64>())
                } else {
                    -(0.5 + 0.9 * rng.gen::<f64>())
                };
                lps.push((token.to_string(), lp));
            }
            lps
        });
        Ok(RawCompletion {
            text,
            token_logprobs,
            usage: None,
        })
    }

    fn contradiction(&self, req: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        let statement = extract_between(&req.prompt, "<Statement>", "</Statement>").unwrap_or("");
        let context = extract_between(&req.prompt, "<Context>", "</Context>").unwrap_or("");
        let percent = match parse_fact_sentence(statement) {
            Some((attr, entity, value)) => {
                let conflict = split_sentences(context).into_iter().any(|sentence| {
                    matches!(
                        parse_fact_sentence(&sentence),
                        Some((a, e, v)) if a == attr && e == entity && v != value
                    )
                });
                if conflict {
                    100
                } else {
                    0
                }
            }
            None => 0,
        };
        Ok(RawCompletion {
            text: percent.to_string(),
            token_logprobs: None,
            usage: None,
        })
    }

    fn judge_support(&self, req: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        let claim = extract_between(&req.prompt, "<Claim>", "</Claim>").unwrap_or("");
        let passage = extract_between(&req.prompt, "<Passage>", "</Passage>").unwrap_or("");
        let supported = match parse_fact_sentence(claim) {
            Some((attr, entity, value)) => split_sentences(passage).into_iter().any(|sentence| {
                matches!(
                    parse_fact_sentence(&sentence),
                    Some((a, e, v)) if a == attr && e == entity && v == value
                )
            }),
            None => false,
        };
        // The entailment and frequency judges use different reply styles.
        let yes_no = req.prompt.contains("yes or no");
        let text = match (supported, yes_no) {
            (true, true) => "yes",
            (false, true) => "no",
            (true, false) => "supported",
            (false, false) => "not-supported",
        };
        Ok(RawCompletion {
            text: text.to_string(),
            token_logprobs: None,
            usage: None,
        })
    }

    fn correctness(&self, req: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        let claim = extract_between(&req.prompt, "<Claim>", "</Claim>").unwrap_or("");
        let reference = extract_between(&req.prompt, "<Reference>", "</Reference>").unwrap_or("");
        let verdict = match parse_fact_sentence(claim) {
            Some((attr, entity, value)) => {
                let mut found = None;
                for sentence in split_sentences(reference) {
                    if let Some((a, e, v)) = parse_fact_sentence(&sentence) {
                        if a == attr && e == entity {
                            found = Some(v);
                            break;
                        }
                    }
                }
                match found {
                    Some(v) if v == value => "correct",
                    Some(_) => "incorrect",
                    None => "not_enough_information",
                }
            }
            None => "not_enough_information",
        };
        Ok(RawCompletion {
            text: verdict.to_string(),
            token_logprobs: None,
            usage: None,
        })
    }
}

fn plain_logprobs(text: &str, rng: &mut ChaCha8Rng) -> Vec<TokenLogprob> {
    text.split_whitespace()
        .map(|t| (t.to_string(), -(0.05 + 0.1 * rng.gen::<f64>())))
        .collect()
}

/// Split templated text into trimmed sentences.
pub fn split_sentences(text: &str) -> Vec<String> {
    text.split(['.', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| format!("{s}."))
        .collect()
}

impl RawCompleter for WorldBackend {
    fn backend_id(&self) -> String {
        format!("world:{}", self.world.config.seed)
    }

    fn model_name(&self) -> String {
        "synthworld".into()
    }

    fn supports_logprobs(&self) -> bool {
        true
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        match req.stage_tag {
            StageTag::GreedyGen | StageTag::DiverseGen => self.generate(req),
            StageTag::ClaimExtract => self.decompose(req),
            StageTag::QuestionGen => self.question(req),
            StageTag::AnswerGen => self.answer(req),
            StageTag::ContradictionEval => self.contradiction(req),
            StageTag::EntailmentEval => self.judge_support(req),
            StageTag::CorrectnessEval => self.correctness(req),
        }
    }
}
