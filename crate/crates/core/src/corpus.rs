//! Datasets, templates and rendering of examples into prompt text.
//!
//! A template has a query pattern (input up to the answer slot) and a demo
//! pattern that must start with the query pattern and carry the `{answer}`
//! placeholder after it. Rendering a labeled example through the demo pattern
//! therefore always equals the rendered query context followed by the answer
//! continuation, byte for byte.
//!
//! Placeholders are `{field}`; `{{` and `}}` produce literal braces.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ANSWER_SLOT: &str = "answer";

/// One corpus record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub fields: IndexMap<String, String>,
    #[serde(default)]
    pub label: Option<String>,
}

impl Example {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            fields: IndexMap::new(),
            label: None,
        }
    }

    pub fn with_field(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.fields.insert(name.into(), value.into());
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// All input fields joined by a space, in declaration order. Used as the
    /// retrieval text.
    pub fn input_text(&self) -> String {
        self.fields
            .values()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn field(&self, name: &str) -> Result<&str> {
        self.fields
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::MissingField {
                id: self.id.clone(),
                field: name.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Pattern {
    segments: Vec<Segment>,
}

impl Pattern {
    fn parse(text: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut chars = text.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    literal.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    literal.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some('{') | None => {
                                return Err(Error::Template(format!(
                                    "unterminated placeholder in {text:?}"
                                )))
                            }
                            Some(c) => name.push(c),
                        }
                    }
                    if name.is_empty() {
                        return Err(Error::Template(format!("empty placeholder in {text:?}")));
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Slot(name));
                }
                '}' => {
                    return Err(Error::Template(format!("stray `}}` in {text:?}")));
                }
                c => literal.push(c),
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self { segments })
    }

    fn slots(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(name) => Some(name.as_str()),
            Segment::Literal(_) => None,
        })
    }

    fn render(&self, ex: &Example, answer: Option<&str>) -> Result<String> {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Slot(name) if name == ANSWER_SLOT => match answer {
                    Some(a) => out.push_str(a),
                    None => return Err(Error::MissingLabel { id: ex.id.clone() }),
                },
                Segment::Slot(name) => out.push_str(ex.field(name)?),
            }
        }
        Ok(out)
    }
}

/// On-disk template layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TemplateFile {
    demo_pattern: String,
    query_pattern: String,
    #[serde(default)]
    verbalizer: Option<IndexMap<String, String>>,
    #[serde(default = "default_separator")]
    demo_separator: String,
}

fn default_separator() -> String {
    "\n".to_string()
}

/// Rendering rules turning an [`Example`] into demonstration and query text.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TemplateFile", into = "TemplateFile")]
pub struct TaskTemplate {
    demo_pattern: String,
    query_pattern: String,
    verbalizer: Option<IndexMap<String, String>>,
    demo_separator: String,
    query: Pattern,
    answer_suffix: Pattern,
    verbalized: IndexMap<String, Pattern>,
}

impl TryFrom<TemplateFile> for TaskTemplate {
    type Error = Error;

    fn try_from(file: TemplateFile) -> Result<Self> {
        TaskTemplate::new(
            file.demo_pattern,
            file.query_pattern,
            file.verbalizer,
            file.demo_separator,
        )
    }
}

impl From<TaskTemplate> for TemplateFile {
    fn from(t: TaskTemplate) -> Self {
        TemplateFile {
            demo_pattern: t.demo_pattern,
            query_pattern: t.query_pattern,
            verbalizer: t.verbalizer,
            demo_separator: t.demo_separator,
        }
    }
}

const BUILTIN_TEMPLATES: &[(&str, &str)] = &[
    ("sst2", include_str!("../templates/sst2.json")),
    ("sst5", include_str!("../templates/sst5.json")),
    ("snli", include_str!("../templates/snli.json")),
    ("mnli", include_str!("../templates/mnli.json")),
    ("qnli", include_str!("../templates/qnli.json")),
    ("trec", include_str!("../templates/trec.json")),
    ("agnews", include_str!("../templates/agnews.json")),
    ("cmsqa", include_str!("../templates/cmsqa.json")),
    (
        "flores-de-ru",
        include_str!("../templates/flores-de-ru.json"),
    ),
    ("squad_v2", include_str!("../templates/squad_v2.json")),
    ("samsum", include_str!("../templates/samsum.json")),
];

impl TaskTemplate {
    pub fn new(
        demo_pattern: impl Into<String>,
        query_pattern: impl Into<String>,
        verbalizer: Option<IndexMap<String, String>>,
        demo_separator: impl Into<String>,
    ) -> Result<Self> {
        let demo_pattern = demo_pattern.into();
        let query_pattern = query_pattern.into();
        let demo_separator = demo_separator.into();

        let suffix = demo_pattern
            .strip_prefix(query_pattern.as_str())
            .ok_or_else(|| {
                Error::Template(format!(
                "demo pattern {demo_pattern:?} does not start with query pattern {query_pattern:?}"
            ))
            })?;
        let query = Pattern::parse(&query_pattern)?;
        // Re-parse the demo pattern as a whole so a placeholder cannot straddle
        // the query/answer boundary.
        Pattern::parse(&demo_pattern)?;
        let answer_suffix = Pattern::parse(suffix)?;

        if query.slots().any(|s| s == ANSWER_SLOT) {
            return Err(Error::Template(
                "query pattern must not contain {answer}".into(),
            ));
        }
        if answer_suffix.slots().filter(|s| *s == ANSWER_SLOT).count() != 1 {
            return Err(Error::Template(
                "demo pattern must contain exactly one {answer} after the query pattern".into(),
            ));
        }

        let mut verbalized = IndexMap::new();
        if let Some(v) = &verbalizer {
            if v.is_empty() {
                return Err(Error::Template("verbalizer is empty".into()));
            }
            for (label, text) in v {
                let pattern = Pattern::parse(text)?;
                if pattern.slots().any(|s| s == ANSWER_SLOT) {
                    return Err(Error::Template(format!(
                        "verbalization for `{label}` must not contain {{answer}}"
                    )));
                }
                verbalized.insert(label.clone(), pattern);
            }
        }

        Ok(Self {
            demo_pattern,
            query_pattern,
            verbalizer,
            demo_separator,
            query,
            answer_suffix,
            verbalized,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// One of the shipped task templates, by name.
    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN_TEMPLATES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json(text).expect("shipped templates are valid"))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_TEMPLATES.iter().map(|(n, _)| *n)
    }

    pub fn separator(&self) -> &str {
        &self.demo_separator
    }

    pub fn demo_pattern(&self) -> &str {
        &self.demo_pattern
    }

    pub fn query_pattern(&self) -> &str {
        &self.query_pattern
    }

    pub fn is_classification(&self) -> bool {
        self.verbalizer.is_some()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.verbalized.keys().map(String::as_str)
    }

    /// Field names the template reads from an example.
    pub fn required_fields(&self) -> BTreeSet<String> {
        let mut fields: BTreeSet<String> = self
            .query
            .slots()
            .chain(self.answer_suffix.slots())
            .chain(self.verbalized.values().flat_map(Pattern::slots))
            .map(str::to_string)
            .collect();
        fields.remove(ANSWER_SLOT);
        fields
    }

    /// The label's answer text for `ex`: the verbalizer entry for
    /// classification, the raw label for generation.
    fn answer_value(&self, ex: &Example) -> Result<Option<String>> {
        let Some(label) = &ex.label else {
            return Ok(None);
        };
        if self.verbalizer.is_none() {
            return Ok(Some(label.clone()));
        }
        let pattern = self
            .verbalized
            .get(label)
            .ok_or_else(|| Error::MissingVerbalizer(label.clone()))?;
        pattern.render(ex, None).map(Some)
    }

    /// Input and answer rendered through the demo pattern.
    pub fn render_demo(&self, ex: &Example) -> Result<String> {
        let answer = self
            .answer_value(ex)?
            .ok_or_else(|| Error::MissingLabel { id: ex.id.clone() })?;
        let mut out = self.query.render(ex, None)?;
        out.push_str(&self.answer_suffix.render(ex, Some(&answer))?);
        Ok(out)
    }

    /// Splits an example into the query context and the answer continuation.
    /// The answer is empty when the example has no label.
    pub fn render_query(&self, ex: &Example) -> Result<(String, String)> {
        let context = self.query.render(ex, None)?;
        let answer = match self.answer_value(ex)? {
            Some(a) => self.answer_suffix.render(ex, Some(&a))?,
            None => String::new(),
        };
        Ok((context, answer))
    }

    /// Label keys with their unrendered answer continuations, in declaration
    /// order.
    pub fn verbalizations(&self) -> Result<Vec<(String, String)>> {
        let verbalizer = self
            .verbalizer
            .as_ref()
            .ok_or_else(|| Error::Template("generation template has no verbalizer".into()))?;
        Ok(verbalizer
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect())
    }

    /// Answer continuations for every label as they would follow the query
    /// context of `ex`. Differs from [`verbalizations`](Self::verbalizations)
    /// only when verbalizations reference example fields (multiple choice).
    pub fn verbalizations_for(&self, ex: &Example) -> Result<Vec<(String, String)>> {
        if self.verbalizer.is_none() {
            return Err(Error::Template(
                "generation template has no verbalizer".into(),
            ));
        }
        self.verbalized
            .iter()
            .map(|(label, pattern)| {
                let value = pattern.render(ex, None)?;
                let answer = self.answer_suffix.render(ex, Some(&value))?;
                Ok((label.clone(), answer))
            })
            .collect()
    }
}

/// Sidecar descriptor naming the template, label space and split files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Descriptor {
    pub name: String,
    pub task_kind: TaskKind,
    pub template: String,
    #[serde(default)]
    pub labels: Vec<String>,
    pub splits: Splits,
    /// Default shot count for this dataset, if it differs from the global one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_shot: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub train: PathBuf,
    pub test: PathBuf,
}

impl Descriptor {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub task_kind: TaskKind,
    pub labels: Vec<String>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub template: TaskTemplate,
    pub n_shot: Option<usize>,
    pub max_tokens: Option<usize>,
}

impl Dataset {
    /// Loads the dataset described by the descriptor file at `path`. Relative
    /// split and template paths resolve against the descriptor's directory;
    /// a template that is not a file is looked up among the shipped ones.
    pub fn load(path: &Path) -> Result<Self> {
        let descriptor = Descriptor::load(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::load_with(base, &descriptor)
    }

    pub fn load_with(base: &Path, descriptor: &Descriptor) -> Result<Self> {
        let template_path = base.join(&descriptor.template);
        let template = if template_path.is_file() {
            TaskTemplate::load(&template_path)?
        } else {
            TaskTemplate::builtin(&descriptor.template).ok_or_else(|| {
                Error::Dataset(format!(
                    "template `{}` is neither a file nor a shipped template",
                    descriptor.template
                ))
            })?
        };
        let train = read_jsonl(&base.join(&descriptor.splits.train))?;
        let test = read_jsonl(&base.join(&descriptor.splits.test))?;
        let dataset = Dataset {
            name: descriptor.name.clone(),
            task_kind: descriptor.task_kind,
            labels: descriptor.labels.clone(),
            train,
            test,
            template,
            n_shot: descriptor.n_shot,
            max_tokens: descriptor.max_tokens,
        };
        dataset.validate_split(&base.join(&descriptor.splits.train), &dataset.train)?;
        dataset.validate_split(&base.join(&descriptor.splits.test), &dataset.test)?;
        dataset.validate()?;
        Ok(dataset)
    }

    /// Checks record-level invariants, reporting the 1-based line of the
    /// first offending record.
    fn validate_split(&self, path: &Path, split: &[Example]) -> Result<()> {
        let required = self.template.required_fields();
        let labels: HashSet<&str> = self.labels.iter().map(String::as_str).collect();
        for (i, ex) in split.iter().enumerate() {
            let record_err = |message: String| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            if let Some(missing) = required.iter().find(|f| !ex.fields.contains_key(*f)) {
                return Err(record_err(format!(
                    "example `{}` is missing field `{missing}` required by the template",
                    ex.id
                )));
            }
            if self.task_kind == TaskKind::Classification {
                if let Some(label) = &ex.label {
                    if !labels.contains(label.as_str()) {
                        return Err(record_err(format!(
                            "label `{label}` is outside the declared label space"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks the dataset-level invariants.
    pub fn validate(&self) -> Result<()> {
        match self.task_kind {
            TaskKind::Classification => {
                if self.labels.is_empty() {
                    return Err(Error::Dataset(
                        "classification dataset declares no labels".into(),
                    ));
                }
                if !self.template.is_classification() {
                    return Err(Error::Dataset(
                        "classification dataset needs a template with a verbalizer".into(),
                    ));
                }
                let declared: BTreeSet<&str> = self.labels.iter().map(String::as_str).collect();
                let verbalized: BTreeSet<&str> = self.template.labels().collect();
                if declared != verbalized {
                    return Err(Error::Dataset(format!(
                        "verbalizer labels {verbalized:?} do not match label space {declared:?}"
                    )));
                }
                for ex in self.train.iter().chain(&self.test) {
                    if let Some(label) = &ex.label {
                        if !declared.contains(label.as_str()) {
                            return Err(Error::Dataset(format!(
                                "example `{}` has label `{label}` outside the label space",
                                ex.id
                            )));
                        }
                    }
                }
            }
            TaskKind::Generation => {
                if self.template.is_classification() {
                    return Err(Error::Dataset(
                        "generation dataset must not use a verbalizer template".into(),
                    ));
                }
            }
        }

        for (split, name) in [(&self.train, "train"), (&self.test, "test")] {
            let mut seen = HashSet::new();
            for ex in split {
                if !seen.insert(ex.id.as_str()) {
                    return Err(Error::Dataset(format!(
                        "duplicate id `{}` in {name} split",
                        ex.id
                    )));
                }
            }
        }
        let train_ids: HashSet<&str> = self.train.iter().map(|e| e.id.as_str()).collect();
        if let Some(ex) = self.test.iter().find(|e| train_ids.contains(e.id.as_str())) {
            return Err(Error::Dataset(format!(
                "id `{}` appears in both train and test",
                ex.id
            )));
        }

        let required = self.template.required_fields();
        for ex in self.train.iter().chain(&self.test) {
            if let Some(missing) = required.iter().find(|f| !ex.fields.contains_key(*f)) {
                return Err(Error::MissingField {
                    id: ex.id.clone(),
                    field: missing.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn train_example(&self, id: &str) -> Option<&Example> {
        self.train.iter().find(|e| e.id == id)
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("malformed record: {e}"),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for ex in examples {
        let line = serde_json::to_string(ex)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sst2() -> TaskTemplate {
        TaskTemplate::builtin("sst2").unwrap()
    }

    #[test]
    fn sst2_demo_rendering() {
        let ex = Example::new("1")
            .with_field("sentence", "great film")
            .with_label("positive");
        assert_eq!(
            sst2().render_demo(&ex).unwrap(),
            "Review: great film Sentiment: positive"
        );
    }

    #[test]
    fn sst2_query_split() {
        let ex = Example::new("1")
            .with_field("sentence", "great film")
            .with_label("positive");
        let (ctx, answer) = sst2().render_query(&ex).unwrap();
        assert_eq!(ctx, "Review: great film Sentiment:");
        assert_eq!(answer, " positive");
    }

    #[test]
    fn unlabeled_query_has_empty_answer() {
        let ex = Example::new("t").with_field("sentence", "bad plot");
        let (ctx, answer) = sst2().render_query(&ex).unwrap();
        assert_eq!(ctx, "Review: bad plot Sentiment:");
        assert_eq!(answer, "");
        assert!(matches!(
            sst2().render_demo(&ex),
            Err(Error::MissingLabel { .. })
        ));
    }

    #[test]
    fn empty_field_substitutes_empty() {
        let ex = Example::new("1")
            .with_field("sentence", "")
            .with_label("negative");
        assert_eq!(
            sst2().render_demo(&ex).unwrap(),
            "Review:  Sentiment: negative"
        );
    }

    #[test]
    fn missing_field_is_reported() {
        let ex = Example::new("1")
            .with_field("text", "x")
            .with_label("negative");
        match sst2().render_demo(&ex) {
            Err(Error::MissingField { field, .. }) => assert_eq!(field, "sentence"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_verbalizer_entry() {
        let ex = Example::new("1")
            .with_field("sentence", "x")
            .with_label("meh");
        assert!(matches!(
            sst2().render_demo(&ex),
            Err(Error::MissingVerbalizer(_))
        ));
    }

    #[test]
    fn qnli_entailment() {
        let t = TaskTemplate::builtin("qnli").unwrap();
        let ex = Example::new("q")
            .with_field("sentence", "<C>")
            .with_field("question", "<X>")
            .with_label("entailment");
        let (ctx, answer) = t.render_query(&ex).unwrap();
        assert_eq!(ctx, "<C> Can we know <X>?");
        assert_eq!(answer, " Yes.");
    }

    #[test]
    fn flores_generation_demo() {
        let t = TaskTemplate::builtin("flores-de-ru").unwrap();
        let ex = Example::new("f")
            .with_field("source", "Guten Morgen")
            .with_label("Доброе утро");
        assert_eq!(
            t.render_demo(&ex).unwrap(),
            "Translate from German to Russian:\nGerman: Guten Morgen Russian: Доброе утро"
        );
        assert!(t.verbalizations().is_err());
    }

    #[test]
    fn sst5_verbalizations_in_order() {
        let t = TaskTemplate::builtin("sst5").unwrap();
        let answers: Vec<String> = t
            .verbalizations()
            .unwrap()
            .into_iter()
            .map(|(_, a)| a)
            .collect();
        assert_eq!(answers, [" terrible", " bad", " okay", " good", " great"]);
        assert_eq!(sst2().verbalizations().unwrap().len(), 2);
    }

    #[test]
    fn multiple_choice_verbalizations_use_fields() {
        let t = TaskTemplate::builtin("cmsqa").unwrap();
        let ex = Example::new("c")
            .with_field("question", "Where do fish live?")
            .with_field("A", "water")
            .with_field("B", "trees")
            .with_field("C", "sky")
            .with_field("D", "sand")
            .with_field("E", "fire")
            .with_label("A");
        let verbs = t.verbalizations_for(&ex).unwrap();
        assert_eq!(verbs[0], ("A".to_string(), " water.".to_string()));
        let (ctx, answer) = t.render_query(&ex).unwrap();
        assert_eq!(format!("{ctx}{answer}"), t.render_demo(&ex).unwrap());
    }

    #[test]
    fn every_builtin_template_parses() {
        for name in TaskTemplate::builtin_names() {
            assert!(TaskTemplate::builtin(name).is_some(), "{name}");
        }
    }

    #[test]
    fn rejects_demo_not_extending_query() {
        let err = TaskTemplate::new("A {x}{answer}", "B {x}", None, "\n").unwrap_err();
        assert!(matches!(err, Error::Template(_)));
    }

    #[test]
    fn rejects_placeholder_straddling_boundary() {
        assert!(TaskTemplate::new("Q {x{answer}", "Q {x", None, "\n").is_err());
    }

    #[test]
    fn escaped_braces_render_literally() {
        let t = TaskTemplate::new("{{{x}}}:{answer}", "{{{x}}}:", None, "\n").unwrap();
        let ex = Example::new("1").with_field("x", "v").with_label("y");
        assert_eq!(t.render_demo(&ex).unwrap(), "{v}:y");
    }
}
