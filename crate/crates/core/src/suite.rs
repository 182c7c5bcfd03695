//! Question datasets and the three task prompt sets rendered from them.
//!
//! A dataset is a JSON-lines file of multiple-choice questions. Each question
//! is rendered once per task kind through a versioned [`PromptTemplate`]; the
//! resulting [`PromptCase`]s are grouped into a [`TaskSuite`] that the runner
//! replays against every model.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SUITE_SCHEMA: &str = "suite/v1";
pub const TEMPLATES_SCHEMA: &str = "templates/v1";

const DEFAULT_TEMPLATES: &str = include_str!("../data/default_templates.json");

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("line {line}: duplicate question id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("question `{id}`: {message}")]
    InvalidQuestion { id: String, message: String },
    #[error("template for {expected} used to render {found}")]
    TemplateMismatch { expected: TaskKind, found: TaskKind },
    #[error("template `{version}`: {message}")]
    InvalidTemplate { version: String, message: String },
    #[error("unresolved placeholder `{{{name}}}` in template `{version}`")]
    UnresolvedPlaceholder { version: String, name: String },
    #[error("no task kinds requested")]
    NoTasks,
    #[error("no template configured for {0}")]
    MissingTemplate(TaskKind),
    #[error("unknown task `{0}` (expected one of: answer_choice, paraphrase, open_answer)")]
    UnknownTask(String),
    #[error("malformed document: {0}")]
    Document(String),
}

pub type Result<T, E = SuiteError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

/// One multiple-choice question as stored in a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub id: String,
    pub stem: String,
    pub choices: Vec<Choice>,
    #[serde(rename = "answer", default)]
    pub answer_key: Option<String>,
    #[serde(default)]
    pub topic: Option<String>,
}

impl Question {
    /// Checks labels are `a`, `b`, `c`, ... in order, the stem is nonempty and
    /// the answer key (if any) names one of the labels.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.stem.trim().is_empty() {
            return Err("empty stem".into());
        }
        if !(2..=26).contains(&self.choices.len()) {
            return Err(format!(
                "expected between 2 and 26 choices, found {}",
                self.choices.len()
            ));
        }
        for (i, choice) in self.choices.iter().enumerate() {
            let expected = expected_label(i);
            if choice.label != expected {
                return Err(format!(
                    "choice {} is labeled `{}`, expected `{}` (labels must be sequential from `a`)",
                    i + 1,
                    choice.label,
                    expected
                ));
            }
        }
        if let Some(key) = &self.answer_key {
            if !self.choices.iter().any(|c| &c.label == key) {
                return Err(format!("answer key `{key}` is not one of the choice labels"));
            }
        }
        Ok(())
    }
}

fn expected_label(index: usize) -> String {
    char::from(b'a' + index as u8).to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AnswerChoice,
    Paraphrase,
    OpenAnswer,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::AnswerChoice, TaskKind::Paraphrase, TaskKind::OpenAnswer];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::AnswerChoice => "answer_choice",
            TaskKind::Paraphrase => "paraphrase",
            TaskKind::OpenAnswer => "open_answer",
        }
    }

    fn uses_choices(self) -> bool {
        !matches!(self, TaskKind::Paraphrase)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = SuiteError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SuiteError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task_kind: TaskKind,
    pub system_text: String,
    pub user_pattern: String,
    pub version: String,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| SuiteError::InvalidTemplate {
            version: self.version.clone(),
            message,
        };
        if self.version.is_empty() {
            return Err(invalid("empty version".into()));
        }
        let names = placeholders(&self.user_pattern);
        if let Some(unknown) = names.iter().find(|n| !matches!(n.as_str(), "stem" | "choices")) {
            return Err(SuiteError::UnresolvedPlaceholder {
                version: self.version.clone(),
                name: unknown.clone(),
            });
        }
        if !names.contains("stem") {
            return Err(invalid("pattern lacks {stem}".into()));
        }
        match (self.task_kind.uses_choices(), names.contains("choices")) {
            (true, false) => Err(invalid(format!("{} pattern lacks {{choices}}", self.task_kind))),
            (false, true) => Err(invalid(format!("{} pattern must not use {{choices}}", self.task_kind))),
            _ => Ok(()),
        }
    }
}

/// Names of every `{identifier}` placeholder in a pattern.
fn placeholders(pattern: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    out.insert(name.to_string());
                }
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

/// Single-pass substitution so that braces inside question text are never
/// reinterpreted as placeholders.
fn substitute(pattern: &str, stem: &str, choices: &str) -> String {
    let mut out = String::with_capacity(pattern.len() + stem.len() + choices.len());
    let mut rest = pattern;
    loop {
        let next = ["{stem}", "{choices}"]
            .iter()
            .filter_map(|p| rest.find(p).map(|at| (at, *p)))
            .min();
        match next {
            Some((at, token)) => {
                out.push_str(&rest[..at]);
                out.push_str(if token == "{stem}" { stem } else { choices });
                rest = &rest[at + token.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

/// One choice per line, formatted `(a) text`.
pub fn format_choices(choices: &[Choice]) -> String {
    choices
        .iter()
        .map(|c| format!("({}) {}", c.label, c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCase {
    pub case_id: String,
    pub question_id: String,
    pub task_kind: TaskKind,
    pub messages: Vec<ChatMessage>,
    pub template_version: String,
}

impl PromptCase {
    /// All message contents joined by newlines; the text whose tokens are
    /// counted as request input.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn case_id(question_id: &str, kind: TaskKind) -> String {
    format!("{question_id}#{kind}")
}

pub fn render_prompt(q: &Question, kind: TaskKind, tpl: &PromptTemplate) -> Result<PromptCase> {
    if tpl.task_kind != kind {
        return Err(SuiteError::TemplateMismatch {
            expected: tpl.task_kind,
            found: kind,
        });
    }
    tpl.validate()?;
    let choices = if kind.uses_choices() {
        format_choices(&q.choices)
    } else {
        String::new()
    };
    let user = substitute(&tpl.user_pattern, &q.stem, &choices);
    let mut messages = Vec::with_capacity(2);
    if !tpl.system_text.is_empty() {
        messages.push(ChatMessage {
            role: Role::System,
            content: tpl.system_text.clone(),
        });
    }
    messages.push(ChatMessage {
        role: Role::User,
        content: user,
    });
    Ok(PromptCase {
        case_id: case_id(&q.id, kind),
        question_id: q.id.clone(),
        task_kind: kind,
        messages,
        template_version: tpl.version.clone(),
    })
}

#[derive(Debug, Deserialize)]
struct TemplateFile {
    schema: String,
    templates: Vec<PromptTemplate>,
}

pub type TemplateSet = BTreeMap<TaskKind, PromptTemplate>;

pub fn default_templates() -> TemplateSet {
    parse_templates(DEFAULT_TEMPLATES).expect("bundled templates are valid")
}

pub fn parse_templates(json: &str) -> Result<TemplateSet> {
    let file: TemplateFile =
        serde_json::from_str(json).map_err(|e| SuiteError::Document(e.to_string()))?;
    if file.schema != TEMPLATES_SCHEMA {
        return Err(SuiteError::Document(format!(
            "unsupported template schema `{}` (supported: {TEMPLATES_SCHEMA})",
            file.schema
        )));
    }
    let mut set = TemplateSet::new();
    for tpl in file.templates {
        tpl.validate()?;
        set.insert(tpl.task_kind, tpl);
    }
    Ok(set)
}

pub fn load_templates(path: &Path) -> Result<TemplateSet> {
    parse_templates(&read_to_string(path)?)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| SuiteError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_questions(path: &Path) -> Result<Vec<Question>> {
    parse_questions(&read_to_string(path)?)
}

/// Parses JSON-lines dataset text. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_questions(text: &str) -> Result<Vec<Question>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let q: Question = serde_json::from_str(line).map_err(|e| SuiteError::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        q.validate().map_err(|message| SuiteError::Record {
            line: line_no,
            message,
        })?;
        if !seen.insert(q.id.clone()) {
            return Err(SuiteError::DuplicateId {
                line: line_no,
                id: q.id,
            });
        }
        out.push(q);
    }
    Ok(out)
}

/// Canonical JSON-lines encoding of a question list, the inverse of
/// [`parse_questions`].
pub fn questions_to_jsonl(questions: &[Question]) -> String {
    let mut out = String::new();
    for q in questions {
        out.push_str(&serde_json::to_string(q).expect("questions serialize"));
        out.push('\n');
    }
    out
}

pub fn dataset_digest(questions: &[Question]) -> String {
    hex::encode(Sha256::digest(questions_to_jsonl(questions).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub schema: String,
    pub suite_id: String,
    pub created_at: String,
    pub tool_version: String,
    pub dataset_digest: String,
    pub question_count: usize,
    pub template_versions: BTreeMap<TaskKind, String>,
    pub cases: BTreeMap<TaskKind, Vec<PromptCase>>,
}

impl TaskSuite {
    pub fn total_cases(&self) -> usize {
        self.cases.values().map(Vec::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("suite serializes");
        fs::write(path, json + "\n").map_err(|source| SuiteError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let suite: TaskSuite = serde_json::from_str(&read_to_string(path)?)
            .map_err(|e| SuiteError::Document(e.to_string()))?;
        if suite.schema != SUITE_SCHEMA {
            return Err(SuiteError::Document(format!(
                "unsupported suite schema `{}` (supported: {SUITE_SCHEMA})",
                suite.schema
            )));
        }
        Ok(suite)
    }

    pub fn find_case(&self, case_id: &str) -> Option<&PromptCase> {
        self.cases.values().flatten().find(|c| c.case_id == case_id)
    }
}

pub fn build_suite(
    questions: &[Question],
    kinds: &BTreeSet<TaskKind>,
    templates: &TemplateSet,
) -> Result<TaskSuite> {
    if kinds.is_empty() {
        return Err(SuiteError::NoTasks);
    }
    let digest = dataset_digest(questions);
    let mut cases = BTreeMap::new();
    let mut template_versions = BTreeMap::new();
    for &kind in kinds {
        let tpl = templates.get(&kind).ok_or(SuiteError::MissingTemplate(kind))?;
        let rendered = questions
            .iter()
            .map(|q| render_prompt(q, kind, tpl))
            .collect::<Result<Vec<_>>>()?;
        template_versions.insert(kind, tpl.version.clone());
        cases.insert(kind, rendered);
    }
    let mut id_hasher = Sha256::new();
    id_hasher.update(digest.as_bytes());
    for (kind, version) in &template_versions {
        id_hasher.update(format!("|{kind}={version}").as_bytes());
    }
    Ok(TaskSuite {
        schema: SUITE_SCHEMA.to_string(),
        suite_id: hex::encode(&id_hasher.finalize()[..8]),
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        tool_version: crate::TOOL_VERSION.to_string(),
        dataset_digest: digest,
        question_count: questions.len(),
        template_versions,
        cases,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub duplicate_ids: Vec<String>,
    pub empty_stems: Vec<String>,
    pub answer_key_violations: Vec<String>,
    pub choice_violations: Vec<String>,
}

impl ValidationReport {
    pub fn issue_count(&self) -> usize {
        self.duplicate_ids.len()
            + self.empty_stems.len()
            + self.answer_key_violations.len()
            + self.choice_violations.len()
    }

    pub fn is_clean(&self) -> bool {
        self.issue_count() == 0
    }
}

pub fn validate_dataset(questions: &[Question]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    for q in questions {
        if !seen.insert(q.id.as_str()) {
            report.duplicate_ids.push(q.id.clone());
        }
        if q.stem.trim().is_empty() {
            report.empty_stems.push(q.id.clone());
        }
        if let Some(key) = &q.answer_key {
            if !q.choices.iter().any(|c| &c.label == key) {
                report.answer_key_violations.push(q.id.clone());
            }
        }
        let labels_ok = (2..=26).contains(&q.choices.len())
            && q.choices.iter().enumerate().all(|(i, c)| c.label == expected_label(i));
        if !labels_ok {
            report.choice_violations.push(q.id.clone());
        }
    }
    report
}
