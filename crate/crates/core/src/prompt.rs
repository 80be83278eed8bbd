//! Prompt assembly.
//!
//! A prompt is a system message built from the enabled background components
//! (role, context, linguistic cues, in that order) and a user message holding
//! the formatted demonstrations, the question block and the target text.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Document;
use crate::gateway::{ChatRequest, ScoreRequest};

pub const ROLE: &str = "You are a medical expert in Alzheimer's disease.";

pub const CONTEXT: &str = "The Boston Cookie Theft picture description task is a well established speech assessment in Alzheimer's disease. During the task, participants are shown the picture and are asked to describe everything they see in the scene using as much time as they would like. The objects (also known as information units) in this picture includes: \"cookie\", \"girl\", \"boy\", \"woman\", \"jar\", \"stool\", \"plate\", \"dishcloth\", \"water\", \"window\", \"cupboard\", \"curtain\", \"dishes\", \"sink\".";

pub const LINGUISTIC: &str = "You analyze linguistic features in the patient's speech, such as lexical richness, syntactic complexity, grammatical correctness, information units, and semantic coherence. Based on the participant's description of the picture, provide an initial diagnosis of dementia patient (P) and healthy control (H).";

/// Question without reasoning cues.
pub const QUESTION: &str = "Given the text below, classify the participant as a dementia patient (P) or healthy control (H). Give a prediction with a probability.";

pub const COT: &str = "Given the text below, classify the participant as a dementia patient (P) or healthy control (H). First explain step-by-step and then give a prediction with a probability.";

pub const GUIDED_COT: &str = "Given the text below, classify the participant as a dementia patient (P) or healthy control (H). Please first reason from the following perspectives: (1) Vocabulary richness: such as the usage of different words; (2) Syntactic complexity: such as the length of the sentence and the number of subordinate clauses; (3) Information content: whether the participant describe most of the information units in the picture; (4) Semantic coherence: such as the usage of connectives and the change in description from one information unit to another; (5) Fluency and repetitiveness: whether the text is fluent with less repetitive sentences. Based on your reasoning, please give a prediction and the corresponding probability.";

const EXAMPLE_HEADER: &str = "Example:";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("target {0:?} also appears among the demonstrations")]
    TargetInDemos(String),
    #[error("cot and guided_cot are mutually exclusive")]
    ConflictingReasoning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentTexts {
    pub role: String,
    pub context: String,
    pub linguistic: String,
    pub question: String,
    pub cot: String,
    pub guided_cot: String,
}

impl Default for ComponentTexts {
    fn default() -> Self {
        ComponentTexts {
            role: ROLE.into(),
            context: CONTEXT.into(),
            linguistic: LINGUISTIC.into(),
            question: QUESTION.into(),
            cot: COT.into(),
            guided_cot: GUIDED_COT.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub role: bool,
    pub context: bool,
    pub linguistic: bool,
    pub cot: bool,
    pub guided_cot: bool,
    pub components: ComponentTexts,
}

impl PromptTemplate {
    pub fn new(role: bool, context: bool, linguistic: bool, cot: bool, guided_cot: bool) -> Self {
        PromptTemplate {
            role,
            context,
            linguistic,
            cot,
            guided_cot,
            components: ComponentTexts::default(),
        }
    }

    /// Role + Context + Linguistic with guided reasoning.
    pub fn full() -> Self {
        Self::new(true, true, true, false, true)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.cot && self.guided_cot {
            return Err(PromptError::ConflictingReasoning);
        }
        Ok(())
    }

    /// SHA-256 over the flags and every component text.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for flag in [
            self.role,
            self.context,
            self.linguistic,
            self.cot,
            self.guided_cot,
        ] {
            h.update([flag as u8]);
        }
        let c = &self.components;
        for text in [
            &c.role,
            &c.context,
            &c.linguistic,
            &c.question,
            &c.cot,
            &c.guided_cot,
        ] {
            h.update((text.len() as u64).to_le_bytes());
            h.update(text.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn system_text(&self) -> String {
        let c = &self.components;
        [
            (self.role, &c.role),
            (self.context, &c.context),
            (self.linguistic, &c.linguistic),
        ]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, t)| t.as_str())
        .collect::<Vec<_>>()
        .join("\n")
    }

    pub fn question_text(&self) -> &str {
        if self.guided_cot {
            &self.components.guided_cot
        } else if self.cot {
            &self.components.cot
        } else {
            &self.components.question
        }
    }
}

/// The seven component combinations of the prompt ablation, in row order.
pub fn ablation_grid() -> Vec<PromptTemplate> {
    vec![
        PromptTemplate::new(false, false, false, false, false),
        PromptTemplate::new(true, true, false, false, false),
        PromptTemplate::new(true, false, true, false, false),
        PromptTemplate::new(true, true, false, true, false),
        PromptTemplate::new(true, false, true, true, false),
        PromptTemplate::new(true, true, true, true, false),
        PromptTemplate::new(true, true, true, false, true),
    ]
}

/// `## Text: {text}\n## Answer: {answer}.`
pub fn format_demonstration(doc: &Document) -> String {
    format!("## Text: {}\n## Answer: {}.", doc.text, doc.label.answer())
}

fn format_target(doc: &Document) -> String {
    format!("## Text: {}\n## Answer:", doc.text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionKind {
    Background,
    Demonstration,
    Question,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSection {
    pub kind: SectionKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub system_text: String,
    pub user_text: String,
    pub demo_ids: Vec<String>,
    pub target_id: String,
    pub template_fingerprint: String,
    pub sections: Vec<PromptSection>,
}

impl PromptInstance {
    pub fn to_request(&self, run: usize) -> ChatRequest {
        ChatRequest {
            system: self.system_text.clone(),
            user: self.user_text.clone(),
            demo_ids: self.demo_ids.clone(),
            target_id: self.target_id.clone(),
            run,
        }
    }

    /// `[system]` / `[user]` rendering used for inspection and golden files.
    pub fn render(&self) -> String {
        format!(
            "[system]\n{}\n[user]\n{}\n",
            self.system_text, self.user_text
        )
    }
}

pub fn build_prompt(
    template: &PromptTemplate,
    demos: &[&Document],
    target: &Document,
) -> Result<PromptInstance, PromptError> {
    template.validate()?;
    if demos.iter().any(|d| d.id == target.id) {
        return Err(PromptError::TargetInDemos(target.id.clone()));
    }
    let system_text = template.system_text();
    let mut sections = Vec::with_capacity(demos.len() + 3);
    if !system_text.is_empty() {
        sections.push(PromptSection {
            kind: SectionKind::Background,
            text: system_text.clone(),
        });
    }
    for (i, demo) in demos.iter().enumerate() {
        let block = format_demonstration(demo);
        sections.push(PromptSection {
            kind: SectionKind::Demonstration,
            text: if i == 0 {
                format!("{EXAMPLE_HEADER}\n{block}")
            } else {
                block
            },
        });
    }
    sections.push(PromptSection {
        kind: SectionKind::Question,
        text: template.question_text().to_string(),
    });
    sections.push(PromptSection {
        kind: SectionKind::Target,
        text: format_target(target),
    });
    let user_text = sections
        .iter()
        .filter(|s| s.kind != SectionKind::Background)
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n");
    Ok(PromptInstance {
        system_text,
        user_text,
        demo_ids: demos.iter().map(|d| d.id.clone()).collect(),
        target_id: target.id.clone(),
        template_fingerprint: template.fingerprint(),
        sections,
    })
}

/// Prefix/continuation pair for scoring the target text after one demonstration.
pub fn continuation_request(demo: &Document, target: &Document) -> ScoreRequest {
    ScoreRequest {
        prefix: format!(
            "{EXAMPLE_HEADER}\n{}\n\n## Text: ",
            format_demonstration(demo)
        ),
        continuation: target.text.clone(),
        demo_ids: vec![demo.id.clone()],
        target_id: target.id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;

    #[test]
    fn demonstration_format() {
        let c = Document::new("c", "t", Label::Control);
        assert_eq!(
            format_demonstration(&c),
            "## Text: t\n## Answer: healthy control (H)."
        );
        let p = Document::new("p", "t", Label::Patient);
        assert!(format_demonstration(&p).ends_with("dementia patient (P)."));
    }

    #[test]
    fn minimal_prompt() {
        let t = Document::new("t", "words", Label::Patient);
        let p = build_prompt(&ablation_grid()[0], &[], &t).unwrap();
        assert_eq!(p.system_text, "");
        assert_eq!(
            p.user_text,
            format!("{QUESTION}\n\n## Text: words\n## Answer:")
        );
    }

    #[test]
    fn full_template_with_four_demos_has_seven_sections() {
        let docs: Vec<Document> = (0..4)
            .map(|i| Document::new(format!("d{i}"), format!("text {i}"), Label::ALL[i % 2]))
            .collect();
        let refs: Vec<&Document> = docs.iter().collect();
        let t = Document::new("t", "target", Label::Patient);
        let p = build_prompt(&PromptTemplate::full(), &refs, &t).unwrap();
        let kinds: Vec<SectionKind> = p.sections.iter().map(|s| s.kind).collect();
        use SectionKind::*;
        assert_eq!(
            kinds,
            vec![
                Background,
                Demonstration,
                Demonstration,
                Demonstration,
                Demonstration,
                Question,
                Target
            ]
        );
        assert_eq!(p.demo_ids, vec!["d0", "d1", "d2", "d3"]);
    }

    #[test]
    fn target_in_demos_rejected() {
        let t = Document::new("t", "x", Label::Patient);
        assert_eq!(
            build_prompt(&PromptTemplate::full(), &[&t], &t),
            Err(PromptError::TargetInDemos("t".into()))
        );
    }

    #[test]
    fn grid_rows() {
        let g = ablation_grid();
        assert_eq!(g.len(), 7);
        assert_eq!(g[0], PromptTemplate::new(false, false, false, false, false));
        assert_eq!(g[5], PromptTemplate::new(true, true, true, true, false));
        assert_eq!(g[6], PromptTemplate::full());
        assert!(g.iter().all(|t| t.validate().is_ok()));
    }

    #[test]
    fn fingerprint_tracks_overrides_and_flags() {
        let base = PromptTemplate::full();
        let mut edited = base.clone();
        edited.components.role = "You are a careful clinician.".into();
        assert_ne!(base.fingerprint(), edited.fingerprint());
        assert_ne!(base.fingerprint(), ablation_grid()[5].fingerprint());
        assert_eq!(base.fingerprint(), PromptTemplate::full().fingerprint());
        let both = PromptTemplate::new(true, true, true, true, true);
        assert_eq!(both.validate(), Err(PromptError::ConflictingReasoning));
    }
}
