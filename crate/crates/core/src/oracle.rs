//! Evidence-fusion inference: retrieve neighbors, build an age-aware
//! evidence prompt, obtain a SUCCESS/FAILURE verdict from a pluggable
//! provider, and blend the neighbor vote with the verdict probability into
//! a calibrated outcome estimate.
//!
//! The default provider is a deterministic rule that applies the prompt's
//! age filter literally, so the whole pipeline is reproducible and
//! auditable offline. An external HTTP provider can be attached for real
//! language-model verdicts.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::archive::{Neighbor, PopulationArchive};
use crate::error::{CoreError, Result};
use crate::synthdata::Sex;

/// Retrieval and fusion knobs for one oracle run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub k: usize,
    /// Maximum |query age − neighbor age| in years; a gap strictly above
    /// this excludes the neighbor from the verdict. Infinity disables the
    /// filter.
    pub age_gap: f64,
    /// Weight of the neighbor vote in the fused probability.
    pub neighbor_weight: f64,
    pub p_success: f64,
    pub p_failure: f64,
    pub threshold: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            k: 5,
            age_gap: 15.0,
            neighbor_weight: 0.60,
            p_success: 0.20,
            p_failure: 0.80,
            threshold: 0.50,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::Config("k: must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.neighbor_weight) {
            return Err(CoreError::Config(format!(
                "neighbor_weight: must be in [0,1], got {}",
                self.neighbor_weight
            )));
        }
        if !(self.p_success > 0.0 && self.p_success < self.p_failure && self.p_failure < 1.0) {
            return Err(CoreError::Config(format!(
                "verdict probabilities: need 0 < p_success < p_failure < 1, got ({}, {})",
                self.p_success, self.p_failure
            )));
        }
        if self.age_gap < 0.0 || self.age_gap.is_nan() {
            return Err(CoreError::Config("age_gap: must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CoreError::Config("threshold: must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Demographics of the subject being predicted.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QueryMeta {
    pub subject_id: String,
    pub age: f64,
    pub sex: Sex,
}

/// Structured evidence shown to the verdict provider; `render` produces
/// the deterministic text form actually sent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvidencePrompt {
    pub query_age: f64,
    pub query_sex: Sex,
    pub neighbors: Vec<Neighbor>,
    /// The δ the instruction text embeds.
    pub age_gap: f64,
}

fn sex_word(sex: Sex) -> &'static str {
    match sex {
        Sex::M => "M",
        Sex::F => "F",
    }
}

fn outcome_word(label: u8) -> &'static str {
    if label == 1 {
        "FAILURE"
    } else {
        "SUCCESS"
    }
}

// Ages appear in prompts and justifications as whole years so the audit's
// exact number matching is well defined.
fn age_text(age: f64) -> String {
    format!("{}", age.round() as i64)
}

fn gap_text(age_gap: f64) -> String {
    if age_gap.is_infinite() {
        "unlimited".to_string()
    } else if age_gap == age_gap.trunc() {
        format!("{}", age_gap as i64)
    } else {
        format!("{age_gap}")
    }
}

impl EvidencePrompt {
    pub fn render(&self) -> String {
        let mut text = String::new();
        text.push_str(&format!(
            "Query patient: age {}, sex {}.\n",
            age_text(self.query_age),
            sex_word(self.query_sex)
        ));
        text.push_str("Most similar archived patients, best match first:\n");
        for (i, n) in self.neighbors.iter().enumerate() {
            text.push_str(&format!(
                "{}. patient {}, age {}, sex {}, outcome {}\n",
                i + 1,
                n.subject_id,
                age_text(n.age),
                sex_word(n.sex),
                outcome_word(n.label)
            ));
        }
        text.push_str(&format!(
            "Mentally filter out any historical match whose age gap to the query \
             exceeds {} years before judging.\n",
            gap_text(self.age_gap)
        ));
        text.push_str(
            "Begin your response with exactly one token, SUCCESS or FAILURE, \
             followed by one short justification sentence.",
        );
        text
    }

    fn eligible(&self) -> Vec<&Neighbor> {
        self.neighbors
            .iter()
            .filter(|n| (n.age - self.query_age).abs() <= self.age_gap)
            .collect()
    }
}

/// Parsed verdict token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictToken {
    Success,
    Failure,
    Unparseable,
}

/// Full outcome of one oracle prediction, with enough provenance to replay
/// and audit it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OracleVerdict {
    pub subject_id: String,
    pub token: VerdictToken,
    pub justification: String,
    pub raw_response: String,
    pub p_neighbor: f64,
    pub p_llm: f64,
    pub p_q: f64,
    pub predicted_label: u8,
    pub prompt: EvidencePrompt,
}

/// Source of SUCCESS/FAILURE responses. Implementations should answer
/// deterministically where possible; errors are absorbed by the pipeline
/// as unparseable verdicts, never as crashes.
pub trait VerdictProvider: Sync {
    fn verdict(&self, prompt: &EvidencePrompt) -> Result<String>;
    fn name(&self) -> &str;
}

/// Deterministic offline provider: applies the prompt's age filter
/// literally and votes by majority outcome, ties conservative (FAILURE).
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBasedProvider;

impl VerdictProvider for RuleBasedProvider {
    fn verdict(&self, prompt: &EvidencePrompt) -> Result<String> {
        Ok(rule_based_verdict(prompt))
    }

    fn name(&self) -> &str {
        "rule-based"
    }
}

/// Pure function of the prompt: filter by age gap, fall back to the full
/// set when nothing survives, majority-vote the outcomes. The
/// justification cites only facts present in the prompt and only ages of
/// age-eligible neighbors.
pub fn rule_based_verdict(prompt: &EvidencePrompt) -> String {
    let eligible = prompt.eligible();
    let (set, fallback): (Vec<&Neighbor>, bool) = if eligible.is_empty() {
        (prompt.neighbors.iter().collect(), true)
    } else {
        (eligible, false)
    };
    let failures = set.iter().filter(|n| n.label == 1).count();
    // tie goes to FAILURE: the conservative default
    let failing = 2 * failures >= set.len();
    let token = if failing { "FAILURE" } else { "SUCCESS" };
    let outcome = if failing { "unfavourable" } else { "favourable" };
    if fallback {
        format!(
            "{token}: no match fell within the configured window, so judging from \
             all retrieved matches, where {failures} of {} carry the unfavourable outcome.",
            set.len()
        )
    } else {
        let ages: Vec<String> = set.iter().map(|n| age_text(n.age)).collect();
        format!(
            "{token}: the eligible matches (ages {}) lean {outcome}, with {failures} of {} \
             unfavourable outcomes.",
            ages.join(", "),
            set.len()
        )
    }
}

/// HTTP verdict provider. Disabled unless an endpoint is configured; see
/// [`ExternalProvider::from_env`].
#[derive(Debug, Clone)]
pub struct ExternalProvider {
    pub endpoint: String,
    pub auth_token: Option<String>,
    pub timeout: Duration,
}

/// Environment variables configuring the external provider.
pub const ENDPOINT_ENV: &str = "TRAJO_ORACLE_ENDPOINT";
pub const TOKEN_ENV: &str = "TRAJO_ORACLE_TOKEN";

const SYSTEM_TEXT: &str = "You are to act as an expert epileptologist judging whether a \
surgical outcome trajectory predicts seizure freedom. Answer deterministically.";

#[derive(Serialize)]
struct ExternalRequest<'a> {
    system: &'a str,
    prompt: String,
    temperature: f64,
    greedy: bool,
    max_new_tokens: u32,
}

impl ExternalProvider {
    pub fn new(endpoint: String, auth_token: Option<String>) -> Self {
        Self {
            endpoint,
            auth_token,
            timeout: Duration::from_secs(30),
        }
    }

    /// Reads the endpoint (and optional bearer token) from the
    /// environment; `None` when unset, which keeps the provider disabled
    /// by default.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok()?;
        if endpoint.is_empty() {
            return None;
        }
        Some(Self::new(endpoint, std::env::var(TOKEN_ENV).ok()))
    }
}

impl VerdictProvider for ExternalProvider {
    fn verdict(&self, prompt: &EvidencePrompt) -> Result<String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| CoreError::Provider(format!("client: {e}")))?;
        let body = ExternalRequest {
            system: SYSTEM_TEXT,
            prompt: prompt.render(),
            temperature: 0.0,
            greedy: true,
            max_new_tokens: 64,
        };
        let mut req = client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| CoreError::Provider(format!("endpoint {}: {e}", self.endpoint)))?;
        if !resp.status().is_success() {
            return Err(CoreError::Provider(format!(
                "endpoint {} returned status {}",
                self.endpoint,
                resp.status()
            )));
        }
        resp.text()
            .map_err(|e| CoreError::Provider(format!("reading response: {e}")))
    }

    fn name(&self) -> &str {
        "external"
    }
}

/// Total function from raw response text to (token, justification). The
/// first alphabetic run decides, case-insensitively; everything else is
/// UNPARSEABLE.
pub fn parse_verdict(response: &str) -> (VerdictToken, String) {
    let start = response.find(|c: char| c.is_alphabetic());
    let token = match start {
        Some(s) => {
            let word: String = response[s..].chars().take_while(|c| c.is_alphabetic()).collect();
            if word.eq_ignore_ascii_case("success") {
                Some((VerdictToken::Success, s + word.len()))
            } else if word.eq_ignore_ascii_case("failure") {
                Some((VerdictToken::Failure, s + word.len()))
            } else {
                None
            }
        }
        None => None,
    };
    match token {
        Some((t, end)) => {
            let rest = response[end..]
                .trim_start_matches(|c: char| !c.is_alphanumeric())
                .trim_end();
            (t, rest.to_string())
        }
        None => (VerdictToken::Unparseable, response.trim().to_string()),
    }
}

/// Fraction of retrieved neighbors with the unfavourable outcome; the
/// denominator is the number actually retrieved, not nominal k.
pub fn neighbor_vote(neighbors: &[Neighbor]) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(CoreError::Config("neighbor_vote: no neighbors retrieved".into()));
    }
    let failures = neighbors.iter().filter(|n| n.label == 1).count();
    Ok(failures as f64 / neighbors.len() as f64)
}

/// Assembles the evidence prompt from the query demographics and the
/// retrieval result, embedding the configured age gap.
pub fn build_prompt(query: &QueryMeta, neighbors: &[Neighbor], config: &OracleConfig) -> EvidencePrompt {
    EvidencePrompt {
        query_age: query.age,
        query_sex: query.sex,
        neighbors: neighbors.to_vec(),
        age_gap: config.age_gap,
    }
}

/// p_q = w_n·p_neighbor + (1−w_n)·p_llm; label 1 iff p_q exceeds the
/// threshold strictly.
pub fn fuse(p_neighbor: f64, p_llm: f64, config: &OracleConfig) -> Result<(f64, u8)> {
    for (name, v) in [("p_neighbor", p_neighbor), ("p_llm", p_llm)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CoreError::Numeric(format!("fuse: {name} = {v} outside [0,1]")));
        }
    }
    let p_q = config.neighbor_weight * p_neighbor + (1.0 - config.neighbor_weight) * p_llm;
    let label = u8::from(p_q > config.threshold);
    Ok((p_q, label))
}

/// Runs the full inference pipeline for one query: exact top-k retrieval,
/// neighbor vote, prompt construction, provider verdict (provider failure
/// degrades to UNPARSEABLE), fusion, thresholding.
pub fn predict(
    query: &QueryMeta,
    trajectory: &[f64],
    archive: &PopulationArchive,
    provider: &dyn VerdictProvider,
    config: &OracleConfig,
) -> Result<OracleVerdict> {
    config.validate()?;
    let neighbors = archive.search(trajectory, config.k)?;
    let p_neighbor = neighbor_vote(&neighbors)?;
    let prompt = build_prompt(query, &neighbors, config);
    let raw_response = match provider.verdict(&prompt) {
        Ok(text) => text,
        // failure isolation: a broken provider must not break prediction
        Err(CoreError::Provider(msg)) => format!("[provider error: {msg}]"),
        Err(other) => return Err(other),
    };
    let (token, justification) = parse_verdict(&raw_response);
    let p_llm = match token {
        VerdictToken::Success => config.p_success,
        VerdictToken::Failure | VerdictToken::Unparseable => config.p_failure,
    };
    let (p_q, predicted_label) = fuse(p_neighbor, p_llm, config)?;
    Ok(OracleVerdict {
        subject_id: query.subject_id.clone(),
        token,
        justification,
        raw_response,
        p_neighbor,
        p_llm,
        p_q,
        predicted_label,
        prompt,
    })
}

/// Audit outcome for one verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFlags {
    /// True iff the justification references an age, id, or sex not
    /// present in the prompt.
    pub hallucination: bool,
    /// True iff no age-gap-violating neighbor is cited as supporting
    /// evidence.
    pub age_filter_adherent: bool,
}

fn cited_age_numbers(justification: &str) -> Vec<i64> {
    let mut cited = Vec::new();
    let tokens: Vec<&str> = justification.split_whitespace().collect();
    let mut i = 0;
    while i < tokens.len() {
        let word: String = tokens[i]
            .chars()
            .filter(|c| c.is_alphabetic())
            .collect::<String>()
            .to_ascii_lowercase();
        if word == "age" || word == "ages" || word == "aged" {
            // collect the run of numeric tokens that follows
            let mut j = i + 1;
            while j < tokens.len() {
                let digits: String = tokens[j].chars().filter(|c| c.is_ascii_digit()).collect();
                let only_number = tokens[j].chars().all(|c| !c.is_alphabetic());
                if digits.is_empty() || !only_number {
                    break;
                }
                cited.push(digits.parse::<i64>().expect("digits parse"));
                j += 1;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    cited
}

fn looks_like_subject_id(token: &str) -> bool {
    let t = token.trim_matches(|c: char| !c.is_alphanumeric());
    let mut chars = t.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => {
            let rest: Vec<char> = chars.collect();
            rest.len() >= 2 && rest.iter().all(|c| c.is_ascii_digit())
        }
        _ => false,
    }
}

/// Checks a verdict's justification against its source prompt: exact
/// string/number matching for cited ages and ids, plus the age-filter
/// adherence rule. Sex words outside the prompt's vocabulary also count
/// as hallucination.
pub fn audit_justification(verdict: &OracleVerdict, prompt: &EvidencePrompt) -> AuditFlags {
    let query_age = age_text(prompt.query_age).parse::<i64>().unwrap();
    let eligible_ages: Vec<i64> = prompt
        .eligible()
        .iter()
        .map(|n| age_text(n.age).parse::<i64>().unwrap())
        .collect();
    let violating_ages: Vec<i64> = prompt
        .neighbors
        .iter()
        .filter(|n| (n.age - prompt.query_age).abs() > prompt.age_gap)
        .map(|n| age_text(n.age).parse::<i64>().unwrap())
        .collect();
    let all_ages: Vec<i64> = prompt
        .neighbors
        .iter()
        .map(|n| age_text(n.age).parse::<i64>().unwrap())
        .collect();

    let mut hallucination = false;
    let mut adherent = true;
    for cited in cited_age_numbers(&verdict.justification) {
        let in_prompt = cited == query_age || all_ages.contains(&cited);
        if !in_prompt {
            hallucination = true;
        }
        if in_prompt
            && cited != query_age
            && violating_ages.contains(&cited)
            && !eligible_ages.contains(&cited)
        {
            adherent = false;
        }
    }

    for token in verdict.justification.split_whitespace() {
        if looks_like_subject_id(token) {
            let t = token.trim_matches(|c: char| !c.is_alphanumeric());
            if !prompt.neighbors.iter().any(|n| n.subject_id == t) {
                hallucination = true;
            }
        }
        let w: String = token
            .chars()
            .filter(|c| c.is_alphabetic())
            .collect::<String>()
            .to_ascii_lowercase();
        // the prompt renders sex as M/F; spelled-out sexes are invented facts
        if w == "male" || w == "female" {
            hallucination = true;
        }
    }

    AuditFlags {
        hallucination,
        age_filter_adherent: adherent,
    }
}

/// Appends verdicts to a JSON-lines log, one prediction per line.
pub fn write_verdict_log(path: &Path, verdicts: &[OracleVerdict]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in verdicts {
        serde_json::to_writer(&mut w, v).map_err(|e| CoreError::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_verdict_log(path: &Path) -> Result<Vec<OracleVerdict>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CoreError::Parse(format!("verdict log line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::{build_archive, ArchiveEntry};
    use std::io::Read as _;

    fn neighbor(id: &str, age: f64, label: u8, sim: f64) -> Neighbor {
        Neighbor {
            archive_index: 0,
            subject_id: id.to_string(),
            similarity: sim,
            label,
            age,
            sex: Sex::F,
        }
    }

    fn prompt_with(query_age: f64, neighbors: Vec<Neighbor>, age_gap: f64) -> EvidencePrompt {
        EvidencePrompt {
            query_age,
            query_sex: Sex::M,
            neighbors,
            age_gap,
        }
    }

    #[test]
    fn fusion_traces_match_hand_arithmetic() {
        let config = OracleConfig::default();
        let (p, l) = fuse(0.4, 0.20, &config).unwrap();
        assert!((p - 0.32).abs() < 1e-12);
        assert_eq!(l, 0);
        let (p, l) = fuse(1.0, 0.80, &config).unwrap();
        assert!((p - 0.92).abs() < 1e-12);
        assert_eq!(l, 1);
        let (p, l) = fuse(0.0, 0.20, &config).unwrap();
        assert!((p - 0.08).abs() < 1e-12);
        assert_eq!(l, 0);
    }

    #[test]
    fn fusion_is_a_convex_combination() {
        let mut config = OracleConfig::default();
        for w in [0.0, 0.25, 0.6, 1.0] {
            config.neighbor_weight = w;
            for (a, b) in [(0.3, 0.3), (0.1, 0.9), (1.0, 0.0)] {
                let (p, _) = fuse(a, b, &config).unwrap();
                assert!(p >= a.min(b) - 1e-12 && p <= a.max(b) + 1e-12);
                if a == b {
                    assert!((p - a).abs() < 1e-12);
                }
            }
        }
        // strictly increasing in p_neighbor for w > 0
        config.neighbor_weight = 0.6;
        let (lo, _) = fuse(0.2, 0.5, &config).unwrap();
        let (hi, _) = fuse(0.3, 0.5, &config).unwrap();
        assert!(hi > lo);
        assert!(fuse(1.2, 0.5, &config).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let config = OracleConfig {
            neighbor_weight: 1.0,
            ..OracleConfig::default()
        };
        let (p, l) = fuse(0.5, 0.2, &config).unwrap();
        assert_eq!(p, 0.5);
        assert_eq!(l, 0, "p_q equal to the threshold must stay label 0");
    }

    #[test]
    fn parse_verdict_cases() {
        let (t, j) = parse_verdict("SUCCESS: trajectory matches favourable cohort.");
        assert_eq!(t, VerdictToken::Success);
        assert_eq!(j, "trajectory matches favourable cohort.");

        let (t, _) = parse_verdict("failure — poor matches.");
        assert_eq!(t, VerdictToken::Failure);

        let (t, j) = parse_verdict("The patient will do well.");
        assert_eq!(t, VerdictToken::Unparseable);
        assert_eq!(j, "The patient will do well.");

        let (t, _) = parse_verdict("**FAILURE** because of weak evidence");
        assert_eq!(t, VerdictToken::Failure);

        let (t, _) = parse_verdict("");
        assert_eq!(t, VerdictToken::Unparseable);

        let (t, _) = parse_verdict("successful outcome expected");
        assert_eq!(t, VerdictToken::Unparseable, "token must match exactly, not by prefix");
    }

    #[test]
    fn neighbor_vote_counts_retrieved_fraction() {
        let ns: Vec<Neighbor> = [1, 1, 0, 0, 0]
            .iter()
            .enumerate()
            .map(|(i, &l)| neighbor(&format!("n{i}"), 40.0, l, 0.9))
            .collect();
        assert!((neighbor_vote(&ns).unwrap() - 0.4).abs() < 1e-12);

        let zeros: Vec<Neighbor> = (0..4).map(|i| neighbor(&format!("z{i}"), 40.0, 0, 0.9)).collect();
        assert_eq!(neighbor_vote(&zeros).unwrap(), 0.0);

        let sat: Vec<Neighbor> = [1, 0, 1]
            .iter()
            .enumerate()
            .map(|(i, &l)| neighbor(&format!("s{i}"), 40.0, l, 0.9))
            .collect();
        assert!((neighbor_vote(&sat).unwrap() - 2.0 / 3.0).abs() < 1e-12);

        assert!(neighbor_vote(&[]).is_err());
    }

    #[test]
    fn prompt_render_is_deterministic_and_embeds_the_gap() {
        let ns = vec![
            neighbor("n001", 41.0, 1, 0.95),
            neighbor("n002", 52.0, 0, 0.90),
        ];
        let p = prompt_with(34.0, ns, 15.0);
        let a = p.render();
        let b = p.render();
        assert_eq!(a, b);
        assert!(a.contains("15"));
        assert!(a.contains("age 34, sex M"));
        assert_eq!(a.matches("patient n0").count(), 2);
        assert!(a.contains("outcome FAILURE"));

        let unlimited = prompt_with(34.0, Vec::new(), f64::INFINITY).render();
        assert!(unlimited.contains("unlimited"));
    }

    #[test]
    fn rule_based_majority_and_tie_rules() {
        // filtered outcomes [0,0,1]: majority favourable
        let ns = vec![
            neighbor("a", 30.0, 0, 0.9),
            neighbor("b", 35.0, 0, 0.8),
            neighbor("c", 40.0, 1, 0.7),
        ];
        let resp = rule_based_verdict(&prompt_with(32.0, ns, 15.0));
        assert!(resp.starts_with("SUCCESS"), "{resp}");

        // 1 vs 1 tie: conservative FAILURE
        let ns = vec![neighbor("a", 30.0, 0, 0.9), neighbor("b", 35.0, 1, 0.8)];
        let resp = rule_based_verdict(&prompt_with(32.0, ns, 15.0));
        assert!(resp.starts_with("FAILURE"), "{resp}");
    }

    #[test]
    fn rule_based_falls_back_when_all_neighbors_violate_the_gap() {
        // query 30 vs all age 50: gap 20 > 15
        let ns = vec![
            neighbor("a", 50.0, 1, 0.9),
            neighbor("b", 50.0, 1, 0.8),
            neighbor("c", 50.0, 0, 0.7),
        ];
        let prompt = prompt_with(30.0, ns, 15.0);
        let resp = rule_based_verdict(&prompt);
        assert!(resp.starts_with("FAILURE"), "{resp}");
        assert!(resp.contains("all retrieved matches"), "{resp}");
        // fallback must stay audit-clean: no age citations
        let verdict = mock_verdict(&resp, &prompt);
        let flags = audit_justification(&verdict, &prompt);
        assert!(!flags.hallucination);
        assert!(flags.age_filter_adherent);
    }

    #[test]
    fn rule_based_is_pure_and_gap_exactly_delta_is_retained() {
        let ns = vec![neighbor("a", 45.0, 0, 0.9), neighbor("b", 60.0, 1, 0.8)];
        let prompt = prompt_with(30.0, ns, 15.0);
        assert_eq!(rule_based_verdict(&prompt), rule_based_verdict(&prompt));
        // gap to "a" is exactly 15: retained; "b" (gap 30) dropped; so the
        // eligible set is favourable
        assert!(rule_based_verdict(&prompt).starts_with("SUCCESS"));
    }

    #[test]
    fn infinite_gap_disables_the_filter() {
        let ns = vec![
            neighbor("a", 90.0, 1, 0.9),
            neighbor("b", 18.0, 1, 0.8),
            neighbor("c", 60.0, 0, 0.7),
        ];
        let filtered = prompt_with(30.0, ns.clone(), f64::INFINITY);
        assert_eq!(filtered.eligible().len(), 3);
        let resp = rule_based_verdict(&filtered);
        assert!(resp.starts_with("FAILURE"));
    }

    fn mock_verdict(raw: &str, prompt: &EvidencePrompt) -> OracleVerdict {
        let (token, justification) = parse_verdict(raw);
        OracleVerdict {
            subject_id: "q".into(),
            token,
            justification,
            raw_response: raw.to_string(),
            p_neighbor: 0.0,
            p_llm: 0.2,
            p_q: 0.08,
            predicted_label: 0,
            prompt: prompt.clone(),
        }
    }

    #[test]
    fn audit_flags_fabricated_facts() {
        let ns = vec![neighbor("a", 41.0, 0, 0.9), neighbor("b", 52.0, 1, 0.8)];
        let prompt = prompt_with(34.0, ns, 15.0);

        let clean = mock_verdict("SUCCESS: the eligible matches (ages 41) lean favourable.", &prompt);
        let flags = audit_justification(&clean, &prompt);
        assert!(!flags.hallucination);
        assert!(flags.age_filter_adherent);

        let invented = mock_verdict("SUCCESS: the match at age 99 recovered.", &prompt);
        assert!(audit_justification(&invented, &prompt).hallucination);

        let fake_id = mock_verdict("SUCCESS: patient z9999 did well.", &prompt);
        assert!(audit_justification(&fake_id, &prompt).hallucination);

        let real_id = mock_verdict("SUCCESS: patient a001 did well.", &prompt);
        // "a001" is id-shaped but absent; the real id is "a"
        assert!(audit_justification(&real_id, &prompt).hallucination);

        let sexed = mock_verdict("SUCCESS: the female matches recovered.", &prompt);
        assert!(audit_justification(&sexed, &prompt).hallucination);
    }

    #[test]
    fn audit_flags_gap_violating_citations() {
        // neighbor "far" at age 60 violates the 15-year gap from query 34
        let ns = vec![neighbor("near", 41.0, 0, 0.9), neighbor("far", 60.0, 1, 0.8)];
        let prompt = prompt_with(34.0, ns, 15.0);
        let citing = mock_verdict("FAILURE: the match aged 60 relapsed.", &prompt);
        let flags = audit_justification(&citing, &prompt);
        assert!(!flags.hallucination, "age 60 is in the prompt");
        assert!(!flags.age_filter_adherent, "age 60 violates the gap");

        let ok = mock_verdict("SUCCESS: the match aged 41 recovered.", &prompt);
        assert!(audit_justification(&ok, &prompt).age_filter_adherent);
    }

    #[test]
    fn rule_based_audits_clean_over_random_prompts() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(30, &[0]);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let ns: Vec<Neighbor> = (0..n)
                .map(|i| {
                    neighbor(
                        &format!("s{i:04}"),
                        rng.gen_range(18.0..65.0),
                        rng.gen_range(0..2) as u8,
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let prompt = prompt_with(rng.gen_range(18.0..65.0), ns, 15.0);
            let raw = rule_based_verdict(&prompt);
            let verdict = mock_verdict(&raw, &prompt);
            let flags = audit_justification(&verdict, &prompt);
            assert!(!flags.hallucination, "{raw}");
            assert!(flags.age_filter_adherent, "{raw}");
        }
    }

    fn unit(values: Vec<f64>) -> Vec<f64> {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        values.into_iter().map(|v| v / n).collect()
    }

    fn archive_with_labels(labels: &[u8]) -> PopulationArchive {
        let entries: Vec<ArchiveEntry> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| ArchiveEntry {
                subject_id: format!("s{i:04}"),
                trajectory: unit(vec![1.0, i as f64 * 0.01, 0.0]),
                label: l,
                age: 40.0,
                sex: Sex::F,
            })
            .collect();
        build_archive(entries).unwrap()
    }

    fn query() -> QueryMeta {
        QueryMeta {
            subject_id: "q0001".into(),
            age: 40.0,
            sex: Sex::M,
        }
    }

    #[test]
    fn predict_end_to_end_traces() {
        let config = OracleConfig::default();
        let q = unit(vec![1.0, 0.0, 0.0]);

        // all 5 neighbors favourable, rule-based agrees: 0.6*0 + 0.4*0.2
        let v = predict(&query(), &q, &archive_with_labels(&[0; 5]), &RuleBasedProvider, &config).unwrap();
        assert!((v.p_q - 0.08).abs() < 1e-12);
        assert_eq!(v.predicted_label, 0);
        assert_eq!(v.token, VerdictToken::Success);
        assert_eq!(v.prompt.neighbors.len(), 5);

        // all unfavourable: 0.6*1 + 0.4*0.8
        let v = predict(&query(), &q, &archive_with_labels(&[1; 5]), &RuleBasedProvider, &config).unwrap();
        assert!((v.p_q - 0.92).abs() < 1e-12);
        assert_eq!(v.predicted_label, 1);

        // provider failure: UNPARSEABLE branch, p_llm = 0.8, neighbors all 0
        struct Broken;
        impl VerdictProvider for Broken {
            fn verdict(&self, _: &EvidencePrompt) -> Result<String> {
                Err(CoreError::Provider("synthetic outage".into()))
            }
            fn name(&self) -> &str {
                "broken"
            }
        }
        let v = predict(&query(), &q, &archive_with_labels(&[0; 5]), &Broken, &config).unwrap();
        assert_eq!(v.token, VerdictToken::Unparseable);
        assert!((v.p_q - 0.32).abs() < 1e-12);
        assert_eq!(v.predicted_label, 0);
        assert!(v.raw_response.contains("synthetic outage"));
    }

    #[test]
    fn predict_saturates_small_archives() {
        let config = OracleConfig::default();
        let q = unit(vec![1.0, 0.0, 0.0]);
        let v = predict(&query(), &q, &archive_with_labels(&[1, 0, 1]), &RuleBasedProvider, &config).unwrap();
        assert!((v.p_neighbor - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(v.prompt.neighbors.len(), 3);
    }

    #[test]
    fn external_provider_round_trips_through_a_mock_endpoint() {
        use std::net::TcpListener;
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 8192];
            let _ = stream.read(&mut buf).unwrap();
            let body = "SUCCESS: fine.";
            let resp = format!(
                "HTTP/1.1 200 OK\r\ncontent-length: {}\r\ncontent-type: text/plain\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
            String::from_utf8_lossy(&buf).to_string()
        });

        let provider = ExternalProvider::new(format!("http://{addr}/verdict"), Some("tok".into()));
        let prompt = prompt_with(34.0, vec![neighbor("a", 41.0, 0, 0.9)], 15.0);
        let raw = provider.verdict(&prompt).unwrap();
        assert_eq!(parse_verdict(&raw).0, VerdictToken::Success);

        let request = handle.join().unwrap();
        assert!(request.contains("max_new_tokens"));
        assert!(request.contains("authorization: Bearer tok") || request.contains("Authorization: Bearer tok"));
    }

    #[test]
    fn external_provider_failure_degrades_to_unparseable() {
        // a port with no listener: connection refused
        let provider = ExternalProvider::new("http://127.0.0.1:1/none".into(), None);
        let config = OracleConfig::default();
        let q = unit(vec![1.0, 0.0, 0.0]);
        let v = predict(&query(), &q, &archive_with_labels(&[0; 5]), &provider, &config).unwrap();
        assert_eq!(v.token, VerdictToken::Unparseable);
        assert!((v.p_q - 0.32).abs() < 1e-12);
    }

    #[test]
    fn verdict_log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verdicts.jsonl");
        let config = OracleConfig::default();
        let q = unit(vec![1.0, 0.0, 0.0]);
        let v1 = predict(&query(), &q, &archive_with_labels(&[0, 1, 0, 1, 0]), &RuleBasedProvider, &config).unwrap();
        let v2 = predict(&query(), &q, &archive_with_labels(&[1; 4]), &RuleBasedProvider, &config).unwrap();
        write_verdict_log(&path, &[v1.clone(), v2.clone()]).unwrap();
        let loaded = read_verdict_log(&path).unwrap();
        assert_eq!(loaded, vec![v1, v2]);
    }

    #[test]
    fn config_validation() {
        assert!(OracleConfig::default().validate().is_ok());
        assert!(OracleConfig { k: 0, ..OracleConfig::default() }.validate().is_err());
        assert!(OracleConfig { neighbor_weight: 1.5, ..OracleConfig::default() }
            .validate()
            .is_err());
        assert!(OracleConfig { p_success: 0.9, ..OracleConfig::default() }.validate().is_err());
        assert!(OracleConfig { age_gap: f64::INFINITY, ..OracleConfig::default() }
            .validate()
            .is_ok());
    }
}
