//! Prompt templates and their bit-exact rendering.
//!
//! Four prompt families exist: prior elicitation, answer extraction, context
//! summarization, and the main certainty-conditioned task. The main family
//! has one template per (reminder?, simplified-context?) combination. The
//! templates are shipped embedded and can be overridden from a directory for
//! prompt-variant studies; rendering substitutes each placeholder exactly
//! once and never re-scans substituted text, so braces inside user-supplied
//! values pass through literally.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::Certainty;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("certainty {0} does not round to an integer percent")]
    NonIntegerPercent(f64),
    #[error("mode requires a reminder but no reminder text was supplied")]
    MissingReminder,
    #[error("reminder text supplied but the mode has no reminder slot")]
    UnexpectedReminder,
    #[error("template `{template}` contains unfilled placeholder `{{{placeholder}}}`")]
    UnfilledPlaceholder {
        template: String,
        placeholder: String,
    },
    #[error("failed to read template `{name}`: {reason}")]
    TemplateRead { name: String, reason: String },
}

// ---------------------------------------------------------------------------
// Modes
// ---------------------------------------------------------------------------

/// Where the reminder line's text comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReminderSource {
    None,
    /// The model's own context-free answer.
    SelfPrior,
    /// An externally supplied alternative answer.
    ProvidedAlternative,
}

/// Whether the prior is elicited as a bare answer or with an explanation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReminderStyle {
    AnswerOnly,
    Explained,
}

/// How the retrieved context is presented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextForm {
    Original,
    /// "The answer is {extracted}" with a model-extracted answer.
    Simplified,
    /// A model-generated summary in place of the original context.
    Summarized,
    /// "The answer is {answer}" with the dataset's own context answer.
    ProvidedSimple,
}

impl ContextForm {
    /// True for the forms rendered through the simplified-context templates.
    pub fn uses_simple_template(self) -> bool {
        matches!(self, ContextForm::Simplified | ContextForm::ProvidedSimple)
    }
}

/// The experiment-mode toggles that select and parameterize templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMode {
    pub reminder: ReminderSource,
    pub reminder_style: ReminderStyle,
    pub context_form: ContextForm,
    /// Affects only which certainty value callers render; the template text
    /// is identical either way.
    pub recalibrated: bool,
}

impl PromptMode {
    pub fn baseline() -> Self {
        Self {
            reminder: ReminderSource::None,
            reminder_style: ReminderStyle::AnswerOnly,
            context_form: ContextForm::Original,
            recalibrated: false,
        }
    }

    pub fn full_strategy() -> Self {
        Self {
            reminder: ReminderSource::SelfPrior,
            reminder_style: ReminderStyle::AnswerOnly,
            context_form: ContextForm::Simplified,
            recalibrated: true,
        }
    }

    /// Compact toggle label, e.g. `remind+recal+simplify` or `baseline`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.reminder != ReminderSource::None {
            parts.push("remind");
        }
        if self.recalibrated {
            parts.push("recal");
        }
        if self.context_form != ContextForm::Original {
            parts.push("simplify");
        }
        if parts.is_empty() {
            "baseline".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

pub const TEMPLATE_NAMES: [&str; 7] = [
    "prior",
    "extract",
    "summarize",
    "main",
    "main_reminder",
    "main_simple",
    "main_reminder_simple",
];

/// The seven templates, embedded by default and overridable from a
/// directory holding `<name>.txt` files.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    prior: String,
    extract: String,
    summarize: String,
    main: String,
    main_reminder: String,
    main_simple: String,
    main_reminder_simple: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            prior: include_str!("templates/prior.txt").to_string(),
            extract: include_str!("templates/extract.txt").to_string(),
            summarize: include_str!("templates/summarize.txt").to_string(),
            main: include_str!("templates/main.txt").to_string(),
            main_reminder: include_str!("templates/main_reminder.txt").to_string(),
            main_simple: include_str!("templates/main_simple.txt").to_string(),
            main_reminder_simple: include_str!("templates/main_reminder_simple.txt").to_string(),
        }
    }
}

impl TemplateSet {
    /// Embedded defaults, with any `<name>.txt` present in `dir` replacing
    /// the corresponding template verbatim.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::default();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text =
                    std::fs::read_to_string(&path).map_err(|e| PromptError::TemplateRead {
                        name: name.to_string(),
                        reason: e.to_string(),
                    })?;
                *set.slot_mut(name) = text;
            }
        }
        Ok(set)
    }

    fn slot_mut(&mut self, name: &str) -> &mut String {
        match name {
            "prior" => &mut self.prior,
            "extract" => &mut self.extract,
            "summarize" => &mut self.summarize,
            "main" => &mut self.main,
            "main_reminder" => &mut self.main_reminder,
            "main_simple" => &mut self.main_simple,
            "main_reminder_simple" => &mut self.main_reminder_simple,
            other => unreachable!("unknown template `{other}`"),
        }
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        match name {
            "prior" => Some(&self.prior),
            "extract" => Some(&self.extract),
            "summarize" => Some(&self.summarize),
            "main" => Some(&self.main),
            "main_reminder" => Some(&self.main_reminder),
            "main_simple" => Some(&self.main_simple),
            "main_reminder_simple" => Some(&self.main_reminder_simple),
            _ => None,
        }
    }

    /// All templates as `(name, text)` pairs, e.g. for hashing into a run
    /// manifest.
    pub fn entries(&self) -> Vec<(&'static str, &str)> {
        TEMPLATE_NAMES
            .iter()
            .map(|&name| (name, self.get(name).expect("known name")))
            .collect()
    }

    fn main_template(&self, with_reminder: bool, simple: bool) -> (&'static str, &str) {
        match (with_reminder, simple) {
            (false, false) => ("main", self.main.as_str()),
            (true, false) => ("main_reminder", self.main_reminder.as_str()),
            (false, true) => ("main_simple", self.main_simple.as_str()),
            (true, true) => ("main_reminder_simple", self.main_reminder_simple.as_str()),
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// The values substituted into a rendered prompt. This record, not parsing
/// the text, is the authoritative way to recover what was filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilledRecord {
    pub question: String,
    pub context: Option<String>,
    pub certainty_percent: Option<u32>,
    pub reminder: Option<String>,
}

/// A fully rendered prompt plus its filled-placeholder record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub filled: FilledRecord,
}

/// Substitute placeholders in a single pass. Substituted values are emitted
/// verbatim and never re-scanned, so braces in values survive untouched.
fn fill(
    template_name: &str,
    template: &str,
    values: &BTreeMap<&str, &str>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if after[..close].chars().all(|c| c.is_ascii_lowercase() || c == '_') => {
                let name = &after[..close];
                match values.get(name) {
                    Some(value) => out.push_str(value),
                    None => {
                        return Err(PromptError::UnfilledPlaceholder {
                            template: template_name.to_string(),
                            placeholder: name.to_string(),
                        })
                    }
                }
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn require_non_empty(name: &'static str, value: &str) -> Result<(), PromptError> {
    if value.trim().is_empty() {
        Err(PromptError::EmptyField(name))
    } else {
        Ok(())
    }
}

/// Render the context-free prior-elicitation prompt.
pub fn render_prior(templates: &TemplateSet, question: &str) -> Result<RenderedPrompt, PromptError> {
    require_non_empty("question", question)?;
    let values = BTreeMap::from([("question", question)]);
    let text = fill("prior", &templates.prior, &values)?;
    Ok(RenderedPrompt {
        text,
        filled: FilledRecord {
            question: question.to_string(),
            context: None,
            certainty_percent: None,
            reminder: None,
        },
    })
}

/// Render the answer-extraction prompt.
pub fn render_extract(
    templates: &TemplateSet,
    question: &str,
    context: &str,
) -> Result<RenderedPrompt, PromptError> {
    require_non_empty("question", question)?;
    require_non_empty("context", context)?;
    let values = BTreeMap::from([("question", question), ("context", context)]);
    let text = fill("extract", &templates.extract, &values)?;
    Ok(RenderedPrompt {
        text,
        filled: FilledRecord {
            question: question.to_string(),
            context: Some(context.to_string()),
            certainty_percent: None,
            reminder: None,
        },
    })
}

/// Render the context-summarization prompt.
pub fn render_summarize(
    templates: &TemplateSet,
    question: &str,
    context: &str,
) -> Result<RenderedPrompt, PromptError> {
    require_non_empty("question", question)?;
    require_non_empty("context", context)?;
    let values = BTreeMap::from([("question", question), ("context", context)]);
    let text = fill("summarize", &templates.summarize, &values)?;
    Ok(RenderedPrompt {
        text,
        filled: FilledRecord {
            question: question.to_string(),
            context: Some(context.to_string()),
            certainty_percent: None,
            reminder: None,
        },
    })
}

/// Render the main certainty-conditioned task prompt.
///
/// `context_value` is what fills the context slot: the full context text for
/// the original and summarized forms, or the bare answer for the simplified
/// forms (whose templates already carry the "The answer is" framing). The
/// certainty must read as an integer percent; it is rendered twice, once in
/// the context-certainty line and once in the final instruction.
pub fn render_main(
    templates: &TemplateSet,
    question: &str,
    context_value: &str,
    certainty: Certainty,
    mode: PromptMode,
    reminder_text: Option<&str>,
) -> Result<RenderedPrompt, PromptError> {
    require_non_empty("question", question)?;
    require_non_empty("context", context_value)?;
    let percent = certainty
        .percent()
        .ok_or(PromptError::NonIntegerPercent(certainty.value()))?;
    let with_reminder = mode.reminder != ReminderSource::None;
    let reminder = match (with_reminder, reminder_text) {
        (true, Some(text)) => {
            require_non_empty("reminder", text)?;
            Some(text)
        }
        (true, None) => return Err(PromptError::MissingReminder),
        (false, Some(_)) => return Err(PromptError::UnexpectedReminder),
        (false, None) => None,
    };
    let simple = mode.context_form.uses_simple_template();
    let (name, template) = templates.main_template(with_reminder, simple);
    let percent_text = percent.to_string();
    let mut values = BTreeMap::from([
        ("question", question),
        ("certainty", percent_text.as_str()),
    ]);
    if simple {
        values.insert("answer", context_value);
    } else {
        values.insert("context", context_value);
    }
    if let Some(text) = reminder {
        values.insert("reminder", text);
    }
    let text = fill(name, template, &values)?;
    Ok(RenderedPrompt {
        text,
        filled: FilledRecord {
            question: question.to_string(),
            context: Some(context_value.to_string()),
            certainty_percent: Some(percent),
            reminder: reminder.map(str::to_string),
        },
    })
}
