//! Central-word extraction and target-text composition.
//!
//! The target text is the style text followed by the head noun of the source
//! phrase, e.g. `("red apple", "green")` gives `"green apple"`.

use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTriple {
    pub source: String,
    pub style: String,
    pub target: String,
}

/// Lowercases, folds whitespace, and trims punctuation from token edges.
pub fn normalize(text: &str) -> String {
    tokens(text).join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric() && c != '-' && c != '\'')
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

pub trait PhraseParser: Send + Sync {
    /// Head noun of a non-empty phrase.
    fn central_word(&self, text: &str) -> Result<String>;
}

const PREPOSITIONS: &[&str] = &[
    "of", "by", "with", "in", "on", "at", "from", "for", "under", "over", "near", "behind", "beside", "between",
    "into", "onto", "inside", "outside", "above", "below", "without", "like", "along", "across", "against",
    "around", "through", "toward", "towards", "upon", "within",
];

/// Words that modify a noun but never head a short object phrase.
const MODIFIERS: &[&str] = &[
    // determiners and quantifiers
    "a", "an", "the", "this", "that", "these", "those", "my", "your", "his", "her", "its", "our", "their", "some",
    "any", "each", "every", "one", "two", "three", "four", "five", "several", "many", "few",
    // colours
    "red", "green", "blue", "yellow", "orange", "purple", "violet", "pink", "brown", "black", "white", "gray",
    "grey", "golden", "silver", "beige", "cyan", "magenta", "teal", "turquoise", "crimson", "scarlet", "navy",
    "maroon", "ivory", "dark", "light", "pale", "bright",
    // size, age, shape
    "big", "small", "large", "little", "tiny", "huge", "giant", "tall", "short", "long", "wide", "narrow", "old",
    "new", "young", "round", "square", "flat", "thick", "thin", "fat",
    // materials and textures
    "wooden", "metallic", "plastic", "glass", "stone", "marble", "woolen", "leather", "paper", "steel", "iron",
    "brick", "concrete", "ceramic", "furry", "fluffy", "shiny", "rusty", "smooth", "rough", "soft", "hard",
    // other common attributives
    "fresh", "ripe", "rotten", "hot", "cold", "wet", "dry", "empty", "full", "open", "closed", "striped",
    "spotted", "checkered", "cute", "beautiful", "ugly", "pretty", "happy", "sad", "sliced", "toy", "baby",
];

/// Hermetic head finder: cut at the first preposition, then take the
/// rightmost word that is not a known modifier.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleParser;

impl PhraseParser for RuleParser {
    fn central_word(&self, text: &str) -> Result<String> {
        let toks = tokens(text);
        if toks.is_empty() {
            return Err(Error::RejectedInput("phrase must be non-empty".into()));
        }
        if toks.len() == 1 {
            return Ok(toks[0].clone());
        }
        let cut = toks
            .iter()
            .skip(1)
            .position(|t| PREPOSITIONS.contains(&t.as_str()))
            .map_or(toks.len(), |p| p + 1);
        let head = &toks[..cut];
        match head.iter().rev().find(|t| !MODIFIERS.contains(&t.as_str())) {
            Some(t) => Ok(t.clone()),
            None => {
                let last = head[head.len() - 1].clone();
                log::warn!("no noun found in '{text}', falling back to '{last}'");
                Ok(last)
            }
        }
    }
}

/// Adapter for an external dependency parser that reads text on stdin and
/// writes CoNLL-U on stdout. The root token is the head when it is a noun;
/// otherwise the last noun, otherwise the last token.
#[derive(Debug, Clone)]
pub struct ConlluParser {
    pub program: String,
    pub args: Vec<String>,
}

impl ConlluParser {
    pub fn new(command_line: &str) -> Result<Self> {
        let mut parts = command_line.split_whitespace().map(String::from);
        let program = parts
            .next()
            .ok_or_else(|| Error::config("parser command must not be empty"))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }

    pub fn head_from_conllu(conllu: &str) -> Option<String> {
        // (form, upos, head)
        let rows: Vec<(String, String, String)> = conllu
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .filter_map(|l| {
                let cols: Vec<&str> = l.split('\t').collect();
                // Multiword ranges ("1-2") and empty nodes ("1.1") carry no head.
                if cols.len() < 7 || !cols[0].chars().all(|c| c.is_ascii_digit()) {
                    return None;
                }
                Some((cols[1].to_lowercase(), cols[3].to_string(), cols[6].to_string()))
            })
            .collect();
        let is_noun = |u: &str| u == "NOUN" || u == "PROPN";
        rows.iter()
            .find(|r| r.2 == "0" && is_noun(&r.1))
            .or_else(|| rows.iter().rev().find(|r| is_noun(&r.1)))
            .or_else(|| rows.last())
            .map(|r| r.0.clone())
    }
}

impl PhraseParser for ConlluParser {
    fn central_word(&self, text: &str) -> Result<String> {
        let text = normalize(text);
        if text.is_empty() {
            return Err(Error::RejectedInput("phrase must be non-empty".into()));
        }
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start parser '{}': {e}", self.program)))?;
        if let Some(mut stdin) = child.stdin.take() {
            writeln!(stdin, "{text}")?;
        }
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(Error::Backend(format!(
                "parser exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        match Self::head_from_conllu(&String::from_utf8_lossy(&out.stdout)) {
            Some(h) => Ok(h),
            None => {
                let last = text.rsplit(' ').next().unwrap_or_default().to_string();
                log::warn!("parser returned no tokens for '{text}', falling back to '{last}'");
                Ok(last)
            }
        }
    }
}

/// Builds a parser from its config name: `rules` or `conllu:<command line>`.
pub fn parser_from_name(name: &str) -> Result<Box<dyn PhraseParser>> {
    match name.split_once(':') {
        None if name == "rules" => Ok(Box::new(RuleParser)),
        Some(("conllu", cmd)) => Ok(Box::new(ConlluParser::new(cmd)?)),
        _ => Err(Error::config(format!("unknown phrase parser '{name}'"))),
    }
}

pub fn central_word(text: &str) -> Result<String> {
    RuleParser.central_word(text)
}

pub fn compose_target_with(parser: &dyn PhraseParser, source: &str, style: &str) -> Result<TextTriple> {
    let style_n = normalize(style);
    if style_n.is_empty() {
        return Err(Error::RejectedInput("style text must be non-empty".into()));
    }
    let head = parser.central_word(source)?;
    Ok(TextTriple {
        source: normalize(source),
        target: format!("{style_n} {head}"),
        style: style_n,
    })
}

pub fn compose_target(source: &str, style: &str) -> Result<TextTriple> {
    compose_target_with(&RuleParser, source, style)
}
