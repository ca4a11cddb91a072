//! Prompt construction for the five prompting methods and parsing of the
//! structured reply that the multi-chain method asks for.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{QuestionRecord, StrategyChain};

pub const SELECTED_MARKER: &str = "[SELECTED-STRATEGY-CHAIN]";
pub const REPLY_MARKER: &str = "[REPLY]";

pub const DEFAULT_TEMPLATE_SET: &str = "figure4-en";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    CoT,
    #[serde(rename = "MHS")]
    Mhs,
    #[serde(rename = "SC")]
    Sc,
    #[serde(rename = "DSC")]
    Dsc,
    #[serde(rename = "DSCs")]
    Dscs,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::CoT, Method::Mhs, Method::Sc, Method::Dsc, Method::Dscs];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::CoT => "CoT",
            Method::Mhs => "MHS",
            Method::Sc => "SC",
            Method::Dsc => "DSC",
            Method::Dscs => "DSCs",
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Method::CoT => "cot",
            Method::Mhs => "mhs",
            Method::Sc => "sc",
            Method::Dsc => "dsc",
            Method::Dscs => "dscs",
        }
    }

    /// Whether prompts for this method embed strategy chains.
    pub fn uses_chains(self) -> bool {
        matches!(self, Method::Sc | Method::Dsc | Method::Dscs)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method {s:?} (expected CoT, MHS, SC, DSC or DSCs)"))
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{method} expects {expected} strategy chain(s), got {got}")]
    ChainCount {
        method: Method,
        expected: &'static str,
        got: usize,
    },
    #[error("offered chains must be non-empty and pairwise distinct")]
    BadOfferedChains,
    #[error("question text contains the reserved marker {0}")]
    MarkerInQuestion(String),
    #[error("template {template}: {message}")]
    Template { template: String, message: String },
    #[error("unknown template set {0:?}")]
    UnknownTemplateSet(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplyError {
    #[error("reply is empty")]
    EmptyRaw,
    #[error("reply is missing the {0} marker")]
    MissingMarker(&'static str),
    #[error("selected chain {0:?} is not a bracketed strategy chain")]
    MalformedChain(String),
    #[error("selected chain {0} was not among the offered chains")]
    NotOffered(String),
    #[error("reply body is empty")]
    EmptyReply,
}

/// A named, versioned set of per-method templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    name: String,
    version: String,
    templates: BTreeMap<Method, String>,
}

const BUILTIN_SETS: [(&str, &str, [&str; 5]); 2] = [
    (
        "figure4-en",
        include_str!("../templates/figure4-en/VERSION"),
        [
            include_str!("../templates/figure4-en/cot.txt"),
            include_str!("../templates/figure4-en/mhs.txt"),
            include_str!("../templates/figure4-en/sc.txt"),
            include_str!("../templates/figure4-en/dsc.txt"),
            include_str!("../templates/figure4-en/dscs.txt"),
        ],
    ),
    (
        "figure4-zh",
        include_str!("../templates/figure4-zh/VERSION"),
        [
            include_str!("../templates/figure4-zh/cot.txt"),
            include_str!("../templates/figure4-zh/mhs.txt"),
            include_str!("../templates/figure4-zh/sc.txt"),
            include_str!("../templates/figure4-zh/dsc.txt"),
            include_str!("../templates/figure4-zh/dscs.txt"),
        ],
    ),
];

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z0-9_]+)\s*\}\}").unwrap())
}

impl TemplateSet {
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN_SETS.iter().map(|(n, _, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Result<Self, PromptError> {
        let (name, version, bodies) = BUILTIN_SETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| PromptError::UnknownTemplateSet(name.to_string()))?;
        let templates = Method::ALL
            .into_iter()
            .zip(bodies.iter())
            .map(|(m, b)| (m, b.to_string()))
            .collect();
        Self::new(name.to_string(), version.trim().to_string(), templates)
    }

    /// Loads `cot.txt`, `mhs.txt`, `sc.txt`, `dsc.txt`, `dscs.txt` and an
    /// optional `VERSION` file from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |file: &str| {
            let path = dir.join(file);
            std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let mut templates = BTreeMap::new();
        for method in Method::ALL {
            templates.insert(method, read(&format!("{}.txt", method.file_stem()))?);
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        let version = if dir.join("VERSION").exists() {
            read("VERSION")?.trim().to_string()
        } else {
            format!("{name}/unversioned")
        };
        Self::new(name, version, templates)
    }

    /// Builtin set name, or a template directory path.
    pub fn resolve(name_or_dir: &str) -> Result<Self, PromptError> {
        if Self::builtin_names().contains(&name_or_dir) {
            Self::builtin(name_or_dir)
        } else {
            Self::load_dir(Path::new(name_or_dir))
        }
    }

    pub fn new(
        name: String,
        version: String,
        templates: BTreeMap<Method, String>,
    ) -> Result<Self, PromptError> {
        for method in Method::ALL {
            let body = templates.get(&method).ok_or_else(|| PromptError::Template {
                template: format!("{name}/{method}"),
                message: "missing".into(),
            })?;
            check_template(method, body).map_err(|message| PromptError::Template {
                template: format!("{name}/{method}"),
                message,
            })?;
        }
        Ok(Self {
            name,
            version,
            templates,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn template(&self, method: Method) -> &str {
        &self.templates[&method]
    }
}

fn check_template(method: Method, body: &str) -> Result<(), String> {
    let mut names = BTreeSet::new();
    for cap in placeholder_re().captures_iter(body) {
        let name = cap[1].to_string();
        let known = matches!(name.as_str(), "question" | "description" | "chain_options")
            || chain_index(&name).is_some();
        if !known {
            return Err(format!("unknown placeholder {{{{{name}}}}}"));
        }
        names.insert(name);
    }
    if !names.contains("question") {
        return Err("missing {{question}}".into());
    }
    let chain_slots: Vec<usize> = names.iter().filter_map(|n| chain_index(n)).collect();
    match method {
        Method::CoT | Method::Mhs => {
            if !chain_slots.is_empty() || names.contains("chain_options") {
                return Err("chain placeholders are not allowed for this method".into());
            }
        }
        Method::Sc | Method::Dsc => {
            if chain_slots != [1] || names.contains("chain_options") {
                return Err("expects exactly the {{chain_1}} chain placeholder".into());
            }
        }
        Method::Dscs => {
            for marker in [SELECTED_MARKER, REPLY_MARKER] {
                if body.matches(marker).count() != 1 {
                    return Err(format!("must contain {marker} exactly once"));
                }
            }
            if !names.contains("chain_options") && chain_slots.is_empty() {
                return Err("expects {{chain_options}} or {{chain_N}} placeholders".into());
            }
        }
    }
    Ok(())
}

fn chain_index(name: &str) -> Option<usize> {
    name.strip_prefix("chain_")?.parse().ok().filter(|&i| i >= 1)
}

/// Label under which the i-th (1-based) candidate chain is offered.
pub fn option_label(i: usize) -> String {
    format!("[STRATEGY-CHAIN {i}]")
}

/// A rendered prompt plus what is needed to interpret its reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub method: Method,
    pub question_id: String,
    pub template_set: String,
    pub template_version: String,
    pub rendered: String,
    pub offered_chains: Vec<StrategyChain>,
}

/// Renders the prompt for `method`. CoT and MHS take no chains, SC and DSC
/// exactly one, DSCs at least two distinct ones.
pub fn build_prompt(
    templates: &TemplateSet,
    method: Method,
    question: &QuestionRecord,
    chains: &[StrategyChain],
) -> Result<PromptBundle, PromptError> {
    let arity = |expected| PromptError::ChainCount {
        method,
        expected,
        got: chains.len(),
    };
    match method {
        Method::CoT | Method::Mhs if !chains.is_empty() => return Err(arity("0")),
        Method::Sc | Method::Dsc if chains.len() != 1 => return Err(arity("1")),
        Method::Dscs if chains.len() < 2 => return Err(arity(">= 2")),
        _ => {}
    }
    let distinct: BTreeSet<_> = chains.iter().collect();
    if distinct.len() != chains.len() || chains.iter().any(|c| c.is_empty()) {
        return Err(PromptError::BadOfferedChains);
    }
    if method == Method::Dscs {
        for text in [&question.title, &question.description] {
            let lower = text.to_lowercase();
            for marker in [SELECTED_MARKER, REPLY_MARKER, "[STRATEGY-CHAIN"] {
                if lower.contains(&marker.to_lowercase()) {
                    return Err(PromptError::MarkerInQuestion(marker.to_string()));
                }
            }
        }
    }

    let template = templates.template(method);
    let mut missing = None;
    let rendered = placeholder_re()
        .replace_all(template, |cap: &regex::Captures| match &cap[1] {
            "question" => question.title.clone(),
            "description" => question.description.clone(),
            "chain_options" => chains
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{}: {c}", option_label(i + 1)))
                .collect::<Vec<_>>()
                .join("\n"),
            other => {
                let i = chain_index(other).expect("validated placeholder");
                match chains.get(i - 1) {
                    Some(c) => c.to_string(),
                    None => {
                        missing = Some(i);
                        String::new()
                    }
                }
            }
        })
        .into_owned();
    if let Some(i) = missing {
        return Err(PromptError::Template {
            template: format!("{}/{method}", templates.name),
            message: format!("references chain {i} but only {} offered", chains.len()),
        });
    }
    if method == Method::Dscs {
        let options = (1..=chains.len()).all(|i| rendered.matches(&option_label(i)).count() == 1);
        let uses_slots = template.contains("{{chain_options}}")
            || (1..=chains.len()).all(|i| template.contains(&format!("{{{{chain_{i}}}}}")));
        if !options && !uses_slots {
            return Err(PromptError::Template {
                template: format!("{}/{method}", templates.name),
                message: "does not present every offered chain".into(),
            });
        }
    }
    Ok(PromptBundle {
        method,
        question_id: question.id.clone(),
        template_set: templates.name.clone(),
        template_version: templates.version.clone(),
        rendered,
        offered_chains: chains.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedReply {
    pub selected_chain: Option<StrategyChain>,
    pub reply_text: String,
    pub raw: String,
}

/// The canonical well-formed reply for the multi-chain method.
pub fn render_wellformed(chain: &StrategyChain, reply: &str) -> String {
    format!("{SELECTED_MARKER}: {chain}\n{REPLY_MARKER}: {reply}")
}

fn selected_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\[SELECTED-STRATEGY-CHAIN\]\s*:?\s*").unwrap())
}

fn reply_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\[REPLY\]\s*:?\s*").unwrap())
}

fn option_ref_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\[STRATEGY-CHAIN\s*(\d+)\]$").unwrap())
}

/// Interprets an LLM reply to `bundle`.
///
/// For DSCs the chain after the selection marker must be one of the offered
/// chains, given either in bracketed form or as its option label
/// (`[STRATEGY-CHAIN 2]`); the reply body is everything after the reply
/// marker, trimmed. Markers match case-insensitively with an optional colon.
/// Other methods pass the raw text through.
pub fn parse_reply(bundle: &PromptBundle, raw: &str) -> Result<ParsedReply, ReplyError> {
    if raw.trim().is_empty() {
        return Err(ReplyError::EmptyRaw);
    }
    if bundle.method != Method::Dscs {
        return Ok(ParsedReply {
            selected_chain: None,
            reply_text: raw.to_string(),
            raw: raw.to_string(),
        });
    }
    let selected = selected_re()
        .find(raw)
        .ok_or(ReplyError::MissingMarker(SELECTED_MARKER))?;
    let after = &raw[selected.end()..];
    let reply = reply_re()
        .find(after)
        .ok_or(ReplyError::MissingMarker(REPLY_MARKER))?;
    let chain_text = after[..reply.start()].trim();
    let chain = match option_ref_re().captures(chain_text) {
        Some(cap) => {
            let i: usize = cap[1].parse().map_err(|_| ReplyError::MalformedChain(chain_text.into()))?;
            bundle
                .offered_chains
                .get(i.wrapping_sub(1))
                .cloned()
                .ok_or_else(|| ReplyError::NotOffered(chain_text.to_string()))?
        }
        None => {
            let chain = StrategyChain::parse_bracketed(chain_text)
                .map_err(|_| ReplyError::MalformedChain(chain_text.to_string()))?;
            if chain.is_empty() {
                return Err(ReplyError::MalformedChain(chain_text.to_string()));
            }
            if !bundle.offered_chains.contains(&chain) {
                return Err(ReplyError::NotOffered(chain.to_string()));
            }
            chain
        }
    };
    let body = after[reply.end()..].trim();
    if body.is_empty() {
        return Err(ReplyError::EmptyReply);
    }
    Ok(ParsedReply {
        selected_chain: Some(chain),
        reply_text: body.to_string(),
        raw: raw.to_string(),
    })
}
