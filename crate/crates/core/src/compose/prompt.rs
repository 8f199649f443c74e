//! Few-shot prompt templates shipped as versioned JSON data files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CvrError, Result};

use super::canonicalize_text;

const TF_CVR_JSON: &str = include_str!("../../templates/tf_cvr.json");
const INSTRUCTION_JSON: &str = include_str!("../../templates/instruction_generation.json");
const TEMPORAL_JSON: &str = include_str!("../../templates/temporal_event_detection.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptField {
    pub key: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptExample {
    pub inputs: BTreeMap<String, String>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub version: String,
    pub task_preamble: String,
    pub fields: Vec<PromptField>,
    pub output_label: String,
    pub examples: Vec<PromptExample>,
}

impl PromptTemplate {
    /// Target-caption composition: source caption + instruction -> target caption.
    pub fn tf_cvr() -> Self {
        Self::builtin(TF_CVR_JSON)
    }

    /// Benchmark curation: source narration + target narration -> instruction.
    pub fn instruction_generation() -> Self {
        Self::builtin(INSTRUCTION_JSON)
    }

    /// Instruction classification: instruction -> "yes" (temporal) / "no".
    pub fn temporal_event_detection() -> Self {
        Self::builtin(TEMPORAL_JSON)
    }

    fn builtin(json: &str) -> Self {
        let t: PromptTemplate = serde_json::from_str(json).expect("bundled template parses");
        t.validate().expect("bundled template is valid");
        t
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CvrError::io(path, e))?;
        let t: PromptTemplate = serde_json::from_str(&text)
            .map_err(|e| CvrError::format(path, format!("line {}", e.line()), e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.template_id.trim().is_empty() || self.version.trim().is_empty() {
            return Err(CvrError::Config("template id and version must be set".into()));
        }
        if self.fields.is_empty() {
            return Err(CvrError::Config(format!(
                "template `{}` declares no input fields",
                self.template_id
            )));
        }
        if self.examples.is_empty() {
            return Err(CvrError::Config(format!(
                "template `{}` has no in-context examples",
                self.template_id
            )));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            for f in &self.fields {
                if !ex.inputs.contains_key(&f.key) {
                    return Err(CvrError::Config(format!(
                        "template `{}` example {i} lacks field `{}`",
                        self.template_id, f.key
                    )));
                }
            }
        }
        Ok(())
    }

    /// Preamble, then each example as labelled lines, then the query with an
    /// open output label. Blocks are separated by a blank line.
    pub fn render(&self, inputs: &BTreeMap<String, String>) -> Result<String> {
        let mut out = String::new();
        out.push_str(self.task_preamble.trim());
        for ex in &self.examples {
            out.push_str("\n\n");
            for f in &self.fields {
                out.push_str(&format!("{}: {}\n", f.label, ex.inputs[&f.key]));
            }
            out.push_str(&format!("{}: {}", self.output_label, ex.output));
        }
        out.push_str("\n\n");
        for f in &self.fields {
            let value = inputs.get(&f.key).ok_or_else(|| {
                CvrError::Config(format!(
                    "missing prompt input `{}` for template `{}`",
                    f.key, self.template_id
                ))
            })?;
            out.push_str(&format!("{}: {}\n", f.label, canonicalize_text(value)));
        }
        out.push_str(&format!("{}:", self.output_label));
        Ok(out)
    }

    /// The output of the in-context example whose inputs equal `inputs` after
    /// whitespace canonicalization.
    pub fn example_output(&self, inputs: &BTreeMap<String, String>) -> Option<&str> {
        self.examples
            .iter()
            .find(|ex| {
                self.fields.iter().all(|f| match inputs.get(&f.key) {
                    Some(v) => canonicalize_text(v) == canonicalize_text(&ex.inputs[&f.key]),
                    None => false,
                })
            })
            .map(|ex| ex.output.as_str())
    }
}

pub(crate) fn inputs<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_templates_load() {
        assert_eq!(PromptTemplate::tf_cvr().examples.len(), 15);
        assert_eq!(PromptTemplate::instruction_generation().examples.len(), 15);
        assert_eq!(PromptTemplate::temporal_event_detection().examples.len(), 10);
    }

    #[test]
    fn tf_cvr_examples_present() {
        let t = PromptTemplate::tf_cvr();
        let out = t.example_output(&inputs([
            ("caption", "#C C picks up the jug."),
            ("instruction", "The person is cleaning."),
        ]));
        assert_eq!(out, Some("#C C cleans the jug."));
        let out = t.example_output(&inputs([
            ("caption", "#C C pours the water in the shoe."),
            ("instruction", "Rinse it instead."),
        ]));
        assert_eq!(out, Some("#C C rinses the shoe."));
    }

    #[test]
    fn render_layout() {
        let t = PromptTemplate::tf_cvr();
        let p = t
            .render(&inputs([
                ("caption", "  #C C  opens the   door. "),
                ("instruction", "Close it."),
            ]))
            .unwrap();
        assert!(p.starts_with("I have a video."));
        assert!(p.contains(
            "\n\nSource Narration: #C C picks up the jug.\nInstruction: The person is cleaning.\nTarget Narration: #C C cleans the jug.\n\n"
        ));
        assert!(p.ends_with("\n\nSource Narration: #C C opens the door.\nInstruction: Close it.\nTarget Narration:"));
        // Deterministic.
        assert_eq!(
            p,
            t.render(&inputs([("caption", "#C C opens the door."), ("instruction", "Close it.")]))
                .unwrap()
        );
    }

    #[test]
    fn render_requires_all_fields() {
        let t = PromptTemplate::tf_cvr();
        assert!(t.render(&inputs([("caption", "x")])).is_err());
    }

    #[test]
    fn validation_rejects_empty_examples() {
        let mut t = PromptTemplate::tf_cvr();
        t.examples.clear();
        assert!(t.validate().is_err());
    }
}
