//! Reference uncertainty methods computed from the same stored artifacts:
//! claim entailment S, closeness centrality over the bipartite entailment
//! graph, frequency scoring, and the two token-level baselines (max token
//! entropy, perplexity). External methods such as CCP are ingested from a
//! score file rather than computed here.

use std::collections::HashMap;

use crate::model::{Orientation, RunArtifacts, SampledResponse, ScoreVector, TokenLogprob};
use crate::scoring::ArtifactIndex;

/// Cross-sample entailment score S: the fraction of sampled responses that
/// entail the claim. Higher is more confident.
///
/// `verdicts` holds one `(response_id, verdict)` pair per sampled response;
/// when `include_own` is false the claim's source response is left out of
/// both numerator and denominator.
pub fn claim_entailment_s(
    verdicts: &[(&str, bool)],
    own_response_id: &str,
    include_own: bool,
) -> f64 {
    let pool: Vec<bool> = verdicts
        .iter()
        .filter(|(rid, _)| include_own || *rid != own_response_id)
        .map(|(_, v)| *v)
        .collect();
    if pool.is_empty() {
        return 0.0;
    }
    pool.iter().filter(|v| **v).count() as f64 / pool.len() as f64
}

/// Fraction of alternative responses judged to support the claim.
pub fn frequency_scoring(support_verdicts: &[bool]) -> f64 {
    if support_verdicts.is_empty() {
        return 0.0;
    }
    support_verdicts.iter().filter(|v| **v).count() as f64 / support_verdicts.len() as f64
}

/// Bipartite graph between claim nodes and response nodes; an edge means the
/// response entails the claim.
#[derive(Debug, Clone, Default)]
pub struct EntailmentGraph {
    pub claim_ids: Vec<String>,
    pub response_ids: Vec<String>,
    /// Edges as (claim slot, response slot).
    pub edges: Vec<(usize, usize)>,
}

impl EntailmentGraph {
    pub fn new(claim_ids: Vec<String>, response_ids: Vec<String>) -> Self {
        Self {
            claim_ids,
            response_ids,
            edges: Vec::new(),
        }
    }

    pub fn add_edge(&mut self, claim_slot: usize, response_slot: usize) {
        assert!(claim_slot < self.claim_ids.len() && response_slot < self.response_ids.len());
        self.edges.push((claim_slot, response_slot));
    }

    fn node_count(&self) -> usize {
        self.claim_ids.len() + self.response_ids.len()
    }

    /// Adjacency over the combined node list: claims first, then responses.
    fn adjacency(&self) -> Vec<Vec<usize>> {
        let n_claims = self.claim_ids.len();
        let mut adj = vec![Vec::new(); self.node_count()];
        for (c, r) in &self.edges {
            adj[*c].push(n_claims + r);
            adj[n_claims + r].push(*c);
        }
        adj
    }

    /// Closeness centrality of every claim node, with the Wasserman-Faust
    /// reachability scaling for disconnected graphs:
    /// `C(v) = ((r-1)/(n-1)) * ((r-1)/sum of distances to reachable nodes)`,
    /// where `r` counts the nodes reachable from `v` including itself.
    /// Isolated claims score 0.
    pub fn closeness_centrality(&self) -> HashMap<String, f64> {
        let adj = self.adjacency();
        let n = self.node_count();
        let mut out = HashMap::new();
        for (slot, claim_id) in self.claim_ids.iter().enumerate() {
            out.insert(claim_id.clone(), closeness_from(&adj, n, slot));
        }
        out
    }
}

fn closeness_from(adj: &[Vec<usize>], n: usize, start: usize) -> f64 {
    // BFS distances from `start`.
    let mut dist = vec![usize::MAX; n];
    dist[start] = 0;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let reachable: Vec<usize> = dist.iter().copied().filter(|d| *d != usize::MAX).collect();
    let r = reachable.len();
    let total: usize = reachable.iter().sum();
    if r <= 1 || total == 0 || n <= 1 {
        return 0.0;
    }
    ((r - 1) as f64 / (n - 1) as f64) * ((r - 1) as f64 / total as f64)
}

/// Closeness centrality for every claim of one topic, from the stored
/// entailment verdicts of its non-refused responses.
pub fn topic_closeness_centrality(
    artifacts: &RunArtifacts,
    index: &ArtifactIndex<'_>,
    topic_id: &str,
) -> HashMap<String, f64> {
    let _ = artifacts;
    let responses: Vec<&SampledResponse> = index
        .responses_by_topic
        .get(topic_id)
        .map(|rs| rs.iter().filter(|r| !r.refusal).copied().collect())
        .unwrap_or_default();
    let response_slot: HashMap<&str, usize> = responses
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let mut claim_ids = Vec::new();
    let mut claim_slot = HashMap::new();
    for response in &responses {
        if let Some(claims) = index.claims_by_response.get(response.id.as_str()) {
            for claim in claims {
                claim_slot.insert(claim.id.as_str(), claim_ids.len());
                claim_ids.push(claim.id.clone());
            }
        }
    }
    let mut graph =
        EntailmentGraph::new(claim_ids, responses.iter().map(|r| r.id.clone()).collect());
    for (claim_id, c_slot) in &claim_slot {
        if let Some(verdicts) = index.entailments_by_claim.get(claim_id) {
            for (response_id, verdict) in verdicts {
                if *verdict {
                    if let Some(r_slot) = response_slot.get(response_id) {
                        graph.add_edge(*c_slot, *r_slot);
                    }
                }
            }
        }
    }
    graph.closeness_centrality()
}

fn normalize_token(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Locate the claim inside its source response as the longest common
/// contiguous token run; succeeds when the run covers at least
/// `min_coverage` of the claim's tokens. Returns the aligned response
/// tokens with their logprobs.
pub fn align_claim_tokens(
    claim_text: &str,
    response: &SampledResponse,
    min_coverage: f64,
) -> Option<Vec<TokenLogprob>> {
    let response_lps = response.token_logprobs.as_ref()?;
    let claim_tokens: Vec<String> = claim_text
        .split_whitespace()
        .map(normalize_token)
        .filter(|t| !t.is_empty())
        .collect();
    if claim_tokens.is_empty() {
        return None;
    }
    let response_tokens: Vec<String> = response_lps
        .iter()
        .map(|(t, _)| normalize_token(t))
        .collect();

    // Longest common contiguous run via suffix-length DP.
    let n = claim_tokens.len();
    let m = response_tokens.len();
    let mut best_len = 0usize;
    let mut best_end_in_response = 0usize;
    let mut prev = vec![0usize; m + 1];
    for i in 1..=n {
        let mut current = vec![0usize; m + 1];
        for j in 1..=m {
            if claim_tokens[i - 1] == response_tokens[j - 1] && !response_tokens[j - 1].is_empty() {
                current[j] = prev[j - 1] + 1;
                if current[j] > best_len {
                    best_len = current[j];
                    best_end_in_response = j;
                }
            }
        }
        prev = current;
    }

    let coverage = best_len as f64 / n as f64;
    if coverage < min_coverage {
        return None;
    }
    let start = best_end_in_response - best_len;
    Some(response_lps[start..best_end_in_response].to_vec())
}

/// Largest single-token surprisal over the aligned tokens. Higher is more
/// uncertain.
pub fn max_token_entropy(aligned: &[TokenLogprob]) -> f64 {
    aligned.iter().map(|(_, lp)| -lp).fold(0.0, f64::max)
}

/// Perplexity over the aligned tokens: the geometric mean of inverse token
/// probabilities, `exp(mean(-logprob))`. Higher is more uncertain.
pub fn perplexity(aligned: &[TokenLogprob]) -> f64 {
    if aligned.is_empty() {
        return 1.0;
    }
    let mean_nll = aligned.iter().map(|(_, lp)| -lp).sum::<f64>() / aligned.len() as f64;
    mean_nll.exp()
}

/// Parsed external score file: a header naming the method and orientation,
/// then one `claim_id<TAB>score` row per line.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScores {
    pub method: String,
    pub orientation: Orientation,
    pub rows: Vec<(String, f64)>,
}

/// Parse the two-column external-score format.
///
/// Header: `# method=NAME orientation=higher-is-confident|higher-is-uncertain`.
pub fn parse_external_scores(text: &str) -> Result<ExternalScores, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty score file")?;
    let header = header
        .strip_prefix('#')
        .ok_or("first line must be a '# method=... orientation=...' header")?;
    let mut method = None;
    let mut orientation = None;
    for field in header.split_whitespace() {
        if let Some(name) = field.strip_prefix("method=") {
            method = Some(name.to_string());
        } else if let Some(o) = field.strip_prefix("orientation=") {
            orientation = Some(match o {
                "higher-is-confident" => Orientation::HigherIsConfident,
                "higher-is-uncertain" => Orientation::HigherIsUncertain,
                other => return Err(format!("unknown orientation: {other}")),
            });
        }
    }
    let method = method.ok_or("header missing method=")?;
    let orientation = orientation.ok_or("header missing orientation=")?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let claim_id = parts
            .next()
            .ok_or_else(|| format!("row {}: missing claim id", i + 2))?;
        let score: f64 = parts
            .next()
            .ok_or_else(|| format!("row {}: missing score", i + 2))?
            .parse()
            .map_err(|e| format!("row {}: bad score: {e}", i + 2))?;
        rows.push((claim_id.to_string(), score));
    }
    Ok(ExternalScores {
        method,
        orientation,
        rows,
    })
}

/// Outcome of joining external scores onto stored score vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub accepted: usize,
    /// Rows whose claim id matched nothing.
    pub rejected: Vec<String>,
    /// Claim ids that appeared more than once (last write wins).
    pub duplicates: Vec<String>,
}

/// Join external scores onto score vectors under the declared method name.
pub fn ingest_external_scores(
    scores: &mut [ScoreVector],
    external: &ExternalScores,
) -> IngestReport {
    let mut slot_by_claim: HashMap<String, usize> = HashMap::new();
    for (i, sv) in scores.iter().enumerate() {
        slot_by_claim.insert(sv.claim_id.clone(), i);
    }
    let mut report = IngestReport::default();
    let mut seen: HashMap<String, ()> = HashMap::new();
    for (claim_id, value) in &external.rows {
        match slot_by_claim.get(claim_id) {
            Some(slot) => {
                if seen.insert(claim_id.clone(), ()).is_some() {
                    report.duplicates.push(claim_id.clone());
                } else {
                    report.accepted += 1;
                }
                let sv = &mut scores[*slot];
                sv.baselines.insert(external.method.clone(), *value);
                sv.orientations.insert(external.method.clone(), external.orientation);
            }
            None => report.rejected.push(claim_id.clone()),
        }
    }
    report
}
