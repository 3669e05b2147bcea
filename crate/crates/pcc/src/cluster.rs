//! Self-refining category clustering and per-image cluster vectors.
//!
//! An LLM groups the dataset's category names into higher-level semantic
//! clusters ("cat" and "dog" both land in "animal" and "pet"). The grouping
//! loop re-prompts the model with its own previous answer until the answers
//! stabilize. Image-level label sets are then projected onto the cluster
//! vocabulary as binary presence vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PccError, Result};
use crate::llm::LlmGateway;

pub const CATEGORIES_PLACEHOLDER: &str = "{categories}";
pub const CLUSTERS_PLACEHOLDER: &str = "{clusters}";

/// Appended to the original prompt for the one automatic retry after an
/// unparseable reply. The suffix changes the cache key, so the retry is a
/// genuinely fresh request rather than a cache replay of the bad answer.
const FORMAT_REMINDER: &str = "\n\nReminder: reply with one line per category, \
    exactly in the form `category: tag, tag`. Do not add commentary.";

const DEFAULT_GEN_TEMPLATE: &str = "\
You are organizing object categories for an image recognition dataset.
Group the following categories into higher-level semantic clusters \
(examples of cluster tags: animal, vehicle, furniture). A category may \
belong to several clusters.

Categories: {categories}

Reply with one line per category, exactly in the form `category: tag, tag` \
and nothing else.";

const DEFAULT_REFINE_TEMPLATE: &str = "\
Here is a grouping of object categories into semantic clusters:

{clusters}

Review the grouping and improve it where needed: merge tags that mean the \
same thing, split tags that are too broad, keep tags short and lowercase. \
A category may belong to several clusters.

Reply with one line per category, exactly in the form `category: tag, tag` \
and nothing else.";

// ===========================================================================
// Domain types
// ===========================================================================

/// The dataset's foreground category names, in a fixed order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryList {
    names: Vec<String>,
}

impl CategoryList {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.iter().any(String::is_empty) {
            return Err(PccError::config("category names must be non-empty"));
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if !seen.insert(name.to_lowercase()) {
                return Err(PccError::config(format!("duplicate category name: {name}")));
            }
        }
        Ok(CategoryList { names })
    }

    pub fn from_strs(names: &[&str]) -> Result<Self> {
        CategoryList::new(names.iter().map(|s| s.to_string()).collect())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Canonical dataset spelling for a case-insensitive match, if any.
    pub fn canonical(&self, raw: &str) -> Option<&str> {
        let lowered = raw.to_lowercase();
        self.names
            .iter()
            .find(|n| n.to_lowercase() == lowered)
            .map(String::as_str)
    }

    fn render(&self) -> String {
        self.names.join(", ")
    }
}

/// Prompt skeletons for the initial grouping ask and the refinement ask.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub gen_template: String,
    pub refine_template: String,
}

impl PromptTemplates {
    pub fn new(gen_template: String, refine_template: String) -> Result<Self> {
        let templates = PromptTemplates { gen_template, refine_template };
        templates.validate()?;
        Ok(templates)
    }

    pub fn validate(&self) -> Result<()> {
        check_single_placeholder(&self.gen_template, CATEGORIES_PLACEHOLDER, "gen_template")?;
        check_single_placeholder(&self.refine_template, CLUSTERS_PLACEHOLDER, "refine_template")
    }

    pub fn load(gen_path: &Path, refine_path: &Path) -> Result<Self> {
        PromptTemplates::new(
            std::fs::read_to_string(gen_path)?,
            std::fs::read_to_string(refine_path)?,
        )
    }

    pub fn render_gen(&self, l: &CategoryList) -> String {
        self.gen_template.replace(CATEGORIES_PLACEHOLDER, &l.render())
    }

    pub fn render_refine(&self, z: &ClusterAssignment) -> String {
        self.refine_template.replace(CLUSTERS_PLACEHOLDER, &z.to_line_format())
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            gen_template: DEFAULT_GEN_TEMPLATE.into(),
            refine_template: DEFAULT_REFINE_TEMPLATE.into(),
        }
    }
}

fn check_single_placeholder(template: &str, placeholder: &str, what: &str) -> Result<()> {
    match template.matches(placeholder).count() {
        1 => Ok(()),
        n => Err(PccError::config(format!(
            "{what} must contain the placeholder {placeholder} exactly once (found {n})"
        ))),
    }
}

/// Category → cluster-tag sets, plus the derived tag vocabulary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Category name → set of cluster tags. Keys use the dataset's
    /// canonical spelling.
    pub mapping: BTreeMap<String, BTreeSet<String>>,
    /// Sorted union of every tag in `mapping`; cluster vectors index into
    /// this. Stored explicitly so the file format is self-describing, and
    /// re-derived on load to catch hand-edited drift.
    pub vocabulary: Vec<String>,
    /// Which refinement iterate produced this assignment.
    pub iteration_index: usize,
    /// True when the refinement loop hit its iteration cap without the
    /// answers stabilizing.
    pub stalled: bool,
}

impl ClusterAssignment {
    pub fn from_mapping(mapping: BTreeMap<String, BTreeSet<String>>) -> Self {
        let vocabulary = derive_vocabulary(&mapping);
        ClusterAssignment { mapping, vocabulary, iteration_index: 0, stalled: false }
    }

    /// Number of distinct cluster tags (the length of a cluster vector).
    pub fn num_clusters(&self) -> usize {
        self.vocabulary.len()
    }

    /// Check structural invariants and coverage of `l`.
    pub fn validate_complete(&self, l: &CategoryList) -> Result<()> {
        for name in l.names() {
            match self.mapping.get(name) {
                Some(tags) if !tags.is_empty() => {}
                Some(_) => {
                    return Err(PccError::format(format!(
                        "category {name} has an empty cluster-tag set"
                    )))
                }
                None => {
                    return Err(PccError::format(format!(
                        "category {name} missing from cluster assignment"
                    )))
                }
            }
        }
        if self.vocabulary != derive_vocabulary(&self.mapping) {
            return Err(PccError::format(
                "vocabulary does not match the tags present in the mapping",
            ));
        }
        Ok(())
    }

    /// Render as `category: tag, tag` lines (the wire format the prompts
    /// demand), categories in alphabetical order.
    pub fn to_line_format(&self) -> String {
        let mut out = String::new();
        for (category, tags) in &self.mapping {
            let tags: Vec<&str> = tags.iter().map(String::as_str).collect();
            out.push_str(category);
            out.push_str(": ");
            out.push_str(&tags.join(", "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let assignment: ClusterAssignment = serde_json::from_str(&text).map_err(|e| {
            PccError::format(format!("{}: bad cluster map: {e}", path.display()))
        })?;
        if assignment.vocabulary != derive_vocabulary(&assignment.mapping) {
            return Err(PccError::format(format!(
                "{}: vocabulary does not match mapping tags",
                path.display()
            )));
        }
        Ok(assignment)
    }
}

impl fmt::Display for ClusterAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_line_format())
    }
}

fn derive_vocabulary(mapping: &BTreeMap<String, BTreeSet<String>>) -> Vec<String> {
    let union: BTreeSet<&String> = mapping.values().flatten().collect();
    union.into_iter().cloned().collect()
}

/// When the refinement loop may stop.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StopCondition {
    /// Stop once this many consecutive iterates are pairwise equal.
    pub stability_window: usize,
    /// Hard cap on the refinement iterate index.
    pub max_iterations: usize,
}

impl Default for StopCondition {
    fn default() -> Self {
        StopCondition { stability_window: 2, max_iterations: 10 }
    }
}

impl StopCondition {
    pub fn new(stability_window: usize, max_iterations: usize) -> Result<Self> {
        let stop = StopCondition { stability_window, max_iterations };
        stop.validate()?;
        Ok(stop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stability_window < 1 || self.stability_window >= self.max_iterations {
            return Err(PccError::config(format!(
                "stop condition requires 1 <= stability_window < max_iterations \
                 (got {} and {})",
                self.stability_window, self.max_iterations
            )));
        }
        Ok(())
    }
}

/// Binary presence vector over a [`ClusterAssignment`]'s vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterVector {
    bits: Vec<u8>,
}

impl ClusterVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(PccError::config("cluster vector entries must be 0 or 1"));
        }
        Ok(ClusterVector { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }
}

// ===========================================================================
// Operations
// ===========================================================================

/// Parse `category: tag, tag` lines. Category names match the dataset list
/// case-insensitively; unknown categories are ignored; tags are trimmed and
/// lowercased. Returns the parsed assignment and the dataset categories the
/// response failed to cover.
pub fn parse_assignment(
    response: &str,
    l: &CategoryList,
) -> Result<(ClusterAssignment, Vec<String>)> {
    let mut mapping: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for raw_line in response.lines() {
        let line = raw_line
            .trim()
            .trim_start_matches(['-', '*', '•'])
            .trim();
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        let Some((head, tail)) = line.split_once(':') else {
            continue;
        };
        let Some(category) = l.canonical(head.trim()) else {
            continue;
        };
        let tags: BTreeSet<String> = tail
            .split(',')
            .map(|t| t.trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        if tags.is_empty() {
            continue;
        }
        mapping.entry(category.to_string()).or_default().extend(tags);
    }

    if mapping.is_empty() {
        return Err(PccError::parse(format!(
            "no dataset category found in response ({} lines scanned)",
            response.lines().count()
        )));
    }

    let unmatched = l
        .names()
        .iter()
        .filter(|name| !mapping.contains_key(*name))
        .cloned()
        .collect();
    Ok((ClusterAssignment::from_mapping(mapping), unmatched))
}

/// Set-equality per category; tag order, vocabulary order, iterate metadata
/// all irrelevant.
pub fn assignments_equal(a: &ClusterAssignment, b: &ClusterAssignment) -> bool {
    a.mapping == b.mapping
}

/// Run the self-refinement loop: generate an initial grouping from the
/// category list, then repeatedly ask the model to improve its own previous
/// answer. Stops as soon as the last `stability_window` iterates are
/// pairwise equal; gives up (with `stalled = true`) at `max_iterations`.
///
/// Categories the model drops are repaired to the singleton tag `misc`, so
/// the result always covers the full category list. One automatic retry with
/// a format reminder is issued for an unparseable reply.
pub fn generate_clusters(
    l: &CategoryList,
    gateway: &LlmGateway,
    templates: &PromptTemplates,
    stop: StopCondition,
) -> Result<ClusterAssignment> {
    if l.is_empty() {
        return Err(PccError::config("category list must not be empty"));
    }
    templates.validate()?;
    stop.validate()?;

    let mut iterates: Vec<ClusterAssignment> = Vec::new();

    let mut z = ask_and_repair(gateway, &templates.render_gen(l), l)?;
    z.iteration_index = 0;
    iterates.push(z);

    for t in 1..=stop.max_iterations {
        let prompt = templates.render_refine(iterates.last().expect("nonempty"));
        let mut z = ask_and_repair(gateway, &prompt, l)?;
        z.iteration_index = t;
        iterates.push(z);

        if stable_tail(&iterates, stop.stability_window) {
            return Ok(iterates.pop().expect("nonempty"));
        }
    }

    let mut last = iterates.pop().expect("nonempty");
    last.stalled = true;
    Ok(last)
}

fn stable_tail(iterates: &[ClusterAssignment], window: usize) -> bool {
    if iterates.len() < window {
        return false;
    }
    let tail = &iterates[iterates.len() - window..];
    tail.windows(2).all(|w| assignments_equal(&w[0], &w[1]))
}

fn ask_and_repair(
    gateway: &LlmGateway,
    prompt: &str,
    l: &CategoryList,
) -> Result<ClusterAssignment> {
    let parsed = match gateway.complete(prompt).and_then(|text| parse_assignment(&text, l)) {
        Ok(parsed) => parsed,
        Err(PccError::Parse(_)) => {
            let retry_prompt = format!("{prompt}{FORMAT_REMINDER}");
            let text = gateway.complete(&retry_prompt)?;
            parse_assignment(&text, l)?
        }
        Err(other) => return Err(other),
    };
    let (assignment, unmatched) = parsed;
    let mut mapping = assignment.mapping;
    for category in unmatched {
        mapping.insert(category, BTreeSet::from(["misc".to_string()]));
    }
    let repaired = ClusterAssignment::from_mapping(mapping);
    repaired.validate_complete(l)?;
    Ok(repaired)
}

/// Project an image's label set onto the cluster vocabulary: bit i is 1 iff
/// some label's tag set contains `vocabulary[i]`.
pub fn cluster_vector(image_labels: &[String], z: &ClusterAssignment) -> Result<ClusterVector> {
    let mut active: BTreeSet<&String> = BTreeSet::new();
    for label in image_labels {
        let tags = z.mapping.get(label).ok_or_else(|| {
            PccError::config(format!("image label {label} is not a known category"))
        })?;
        active.extend(tags.iter());
    }
    let bits = z
        .vocabulary
        .iter()
        .map(|tag| u8::from(active.contains(tag)))
        .collect();
    Ok(ClusterVector { bits })
}
