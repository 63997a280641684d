//! The five generic news frames and the classification prompt built from them.
//!
//! A prompt is rendered in a fixed order: preamble, one definition block per
//! frame (in the template's frame order), the transcript block, and finally
//! the question. Rendering is a pure function of its inputs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::jsonl;

#[derive(Debug, Error)]
pub enum FramingError {
    #[error("unknown frame label {0:?}")]
    UnknownFrameLabel(String),
    #[error("no definition supplied for frame {0}")]
    MissingFrameDefinition(Frame),
    #[error("frame {0} defined more than once")]
    DuplicateFrameDefinition(Frame),
    #[error("definition text for frame {0} is empty")]
    EmptyDefinition(Frame),
    #[error("text to classify is empty")]
    EmptyText,
    #[error("frame order must list each of the five frames exactly once")]
    InvalidFrameOrder,
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),
    #[error(transparent)]
    Store(#[from] jsonl::StoreError),
    #[error("reading template {path}: {source}")]
    TemplateIo {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing template {path}: {source}")]
    TemplateParse {
        path: String,
        source: toml::de::Error,
    },
}

/// Generic frame typology used for both human and machine labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Frame {
    AttributionOfResponsibility,
    HumanInterest,
    Conflict,
    Morality,
    Economic,
}

impl Frame {
    /// Canonical listing order; also the default frame order.
    pub const ALL: [Frame; 5] = [
        Frame::AttributionOfResponsibility,
        Frame::HumanInterest,
        Frame::Conflict,
        Frame::Morality,
        Frame::Economic,
    ];

    /// Stable machine identifier used in every file format.
    pub fn id(self) -> &'static str {
        match self {
            Frame::AttributionOfResponsibility => "attribution_of_responsibility",
            Frame::HumanInterest => "human_interest",
            Frame::Conflict => "conflict",
            Frame::Morality => "morality",
            Frame::Economic => "economic",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Frame::AttributionOfResponsibility => "Attribution of responsibility",
            Frame::HumanInterest => "Human interest",
            Frame::Conflict => "Conflict",
            Frame::Morality => "Morality",
            Frame::Economic => "Economic",
        }
    }

    /// Lowercased strings a model answer token may be a prefix of.
    pub fn aliases(self) -> &'static [&'static str] {
        match self {
            Frame::AttributionOfResponsibility => &[
                "attribution",
                "responsibility",
                "attribution of responsibility",
            ],
            Frame::HumanInterest => &["human", "human interest"],
            Frame::Conflict => &["conflict"],
            Frame::Morality => &["morality", "moral"],
            Frame::Economic => &["economic", "economics", "economy"],
        }
    }

    /// Position in [`Frame::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Frame {
    type Err = FramingError;

    /// Accepts the identifier, the display label, or any alias, ignoring case
    /// and surrounding whitespace.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let needle = s.trim().to_lowercase();
        Frame::ALL
            .into_iter()
            .find(|f| {
                f.id() == needle
                    || f.label().to_lowercase() == needle
                    || f.aliases().contains(&needle.as_str())
            })
            .ok_or_else(|| FramingError::UnknownFrameLabel(s.to_string()))
    }
}

impl Serialize for Frame {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for Frame {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// A permutation of the five frames. Drives prompt layout, report column
/// order, and argmax tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameOrder([Frame; 5]);

impl FrameOrder {
    pub fn new(frames: [Frame; 5]) -> Result<Self, FramingError> {
        let mut seen = [false; 5];
        for f in frames {
            if std::mem::replace(&mut seen[f.index()], true) {
                return Err(FramingError::InvalidFrameOrder);
            }
        }
        Ok(Self(frames))
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self, FramingError> {
        let parsed = labels
            .iter()
            .map(|l| l.as_ref().parse())
            .collect::<Result<Vec<Frame>, _>>()?;
        let frames: [Frame; 5] = parsed
            .try_into()
            .map_err(|_| FramingError::InvalidFrameOrder)?;
        Self::new(frames)
    }

    pub fn frames(&self) -> &[Frame; 5] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = Frame> + '_ {
        self.0.iter().copied()
    }

    /// Rank of `frame` in this order (0 = first).
    pub fn rank(&self, frame: Frame) -> usize {
        self.0
            .iter()
            .position(|f| *f == frame)
            .unwrap_or(usize::MAX)
    }
}

impl Default for FrameOrder {
    fn default() -> Self {
        Self(Frame::ALL)
    }
}

impl Serialize for FrameOrder {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FrameOrder {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let labels = Vec::<String>::deserialize(deserializer)?;
        Self::from_labels(&labels).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDefinition {
    pub frame: Frame,
    pub definition_text: String,
}

/// The five standard definitions, in their conventional listing order.
pub fn default_frame_definitions() -> Vec<FrameDefinition> {
    const TEXTS: [(Frame, &str); 5] = [
        (
            Frame::AttributionOfResponsibility,
            "This frame presents an issue or problem in such a way as to attribute \
             responsibility for its cause or solution to either the government or to an \
             individual or group.",
        ),
        (
            Frame::HumanInterest,
            "This frame brings a human face or an emotional angle to the presentation of \
             an event, issue, or problem.",
        ),
        (
            Frame::Conflict,
            "This frame emphasizes conflict between individuals, groups, or institutions \
             as a means of capturing audience interest.",
        ),
        (
            Frame::Morality,
            "This frame puts the event, problem, or issue in the context of religious \
             tenets or moral prescriptions.",
        ),
        (
            Frame::Economic,
            "This frame reports an event, problem, or issue in terms of the consequences \
             it will have economically on an individual, group, institution, region, or \
             country.",
        ),
    ];
    TEXTS
        .iter()
        .map(|(frame, text)| FrameDefinition {
            frame: *frame,
            definition_text: (*text).to_string(),
        })
        .collect()
}

/// Reads a definitions override file (JSONL of `{frame, definition_text}`).
pub fn load_frame_definitions(path: &Path) -> Result<Vec<FrameDefinition>, FramingError> {
    let defs: Vec<FrameDefinition> = jsonl::read_all(path)?;
    check_definitions(&defs)?;
    Ok(defs)
}

/// Verifies the set covers every frame exactly once and returns the texts
/// indexed by [`Frame::index`].
pub fn check_definitions(defs: &[FrameDefinition]) -> Result<[&str; 5], FramingError> {
    let mut by_frame: [Option<&str>; 5] = [None; 5];
    for def in defs {
        if def.definition_text.trim().is_empty() {
            return Err(FramingError::EmptyDefinition(def.frame));
        }
        let slot = &mut by_frame[def.frame.index()];
        if slot.is_some() {
            return Err(FramingError::DuplicateFrameDefinition(def.frame));
        }
        *slot = Some(&def.definition_text);
    }
    let mut out = [""; 5];
    for frame in Frame::ALL {
        out[frame.index()] =
            by_frame[frame.index()].ok_or(FramingError::MissingFrameDefinition(frame))?;
    }
    Ok(out)
}

/// Prompt layout. Placeholders: `{label}` and `{definition}` in
/// `definition_block_format`, `{text}` in `text_block_format`, and the
/// optional `{labels}` (comma-separated display labels in frame order) in
/// `preamble` and `question`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub preamble: String,
    pub definition_block_format: String,
    pub text_block_format: String,
    pub question: String,
    pub frame_order: FrameOrder,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            preamble: "The following are definitions of five types of news frames.".into(),
            definition_block_format: "{label}: {definition}".into(),
            text_block_format: "Text:\n{text}".into(),
            question: "Among the following five frames \u{2014} {labels} \u{2014} which one is \
                       the most predominant in the text above? Answer with the frame name only."
                .into(),
            frame_order: FrameOrder::default(),
        }
    }
}

impl PromptTemplate {
    /// Parses a template override file. Missing keys keep their defaults.
    pub fn from_toml_str(src: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(src)
    }

    pub fn load(path: &Path) -> Result<Self, FramingError> {
        let display = path.display().to_string();
        let src = std::fs::read_to_string(path).map_err(|source| FramingError::TemplateIo {
            path: display.clone(),
            source,
        })?;
        let template = Self::from_toml_str(&src).map_err(|source| FramingError::TemplateParse {
            path: display,
            source,
        })?;
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), FramingError> {
        let count = |haystack: &str, needle: &str| haystack.matches(needle).count();
        if count(&self.definition_block_format, "{label}") == 0 {
            return Err(FramingError::InvalidTemplate(
                "definition_block_format must contain {label}".into(),
            ));
        }
        if count(&self.definition_block_format, "{definition}") != 1 {
            return Err(FramingError::InvalidTemplate(
                "definition_block_format must contain {definition} exactly once".into(),
            ));
        }
        if count(&self.text_block_format, "{text}") != 1 {
            return Err(FramingError::InvalidTemplate(
                "text_block_format must contain {text} exactly once".into(),
            ));
        }
        for (name, field) in [
            ("preamble", &self.preamble),
            ("definition_block_format", &self.definition_block_format),
            ("question", &self.question),
        ] {
            if field.contains("{text}") {
                return Err(FramingError::InvalidTemplate(format!(
                    "{name} must not contain {{text}}"
                )));
            }
        }
        Ok(())
    }
}

/// Renders the classification prompt for one transcript.
pub fn build_prompt(
    template: &PromptTemplate,
    definitions: &[FrameDefinition],
    text: &str,
) -> Result<String, FramingError> {
    template.validate()?;
    let texts = check_definitions(definitions)?;
    if text.trim().is_empty() {
        return Err(FramingError::EmptyText);
    }

    let labels = template
        .frame_order
        .iter()
        .map(Frame::label)
        .collect::<Vec<_>>()
        .join(", ");

    let mut out = String::new();
    if !template.preamble.is_empty() {
        out.push_str(&fill(&template.preamble, &[("labels", &labels)]));
        out.push_str("\n\n");
    }
    for frame in template.frame_order.iter() {
        out.push_str(&fill(
            &template.definition_block_format,
            &[
                ("label", frame.label()),
                ("definition", texts[frame.index()]),
            ],
        ));
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&fill(&template.text_block_format, &[("text", text)]));
    out.push_str("\n\n");
    out.push_str(&fill(&template.question, &[("labels", &labels)]));
    Ok(out)
}

/// Single-pass placeholder substitution; substituted values are never
/// rescanned, so braces inside a transcript are left alone.
fn fill(format: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(format.len());
    let mut rest = format;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let key = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (close, *v))
        });
        match replaced {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
