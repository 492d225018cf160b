//! Editing prompt lists used by the success-rate metric.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::HashTokenizer;
use crate::error::{Error, Result};

pub const CLASS_PLACEHOLDER: &str = "<class>";
pub const PROMPT_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTarget {
    pub name: String,
    /// Text the judge checks the image against.
    pub descriptor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditingPrompt {
    /// Contains `* <class>` once.
    pub template: String,
    pub targets: Vec<EditTarget>,
}

impl EditingPrompt {
    pub fn render(&self, class_word: &str) -> String {
        self.template.replace(CLASS_PLACEHOLDER, class_word)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditingPromptList {
    pub id: String,
    pub prompts: Vec<EditingPrompt>,
}

fn target(name: &str, descriptor: &str) -> EditTarget {
    EditTarget {
        name: name.into(),
        descriptor: descriptor.into(),
    }
}

fn prompt(template: &str, targets: Vec<EditTarget>) -> EditingPrompt {
    EditingPrompt {
        template: template.into(),
        targets,
    }
}

impl EditingPromptList {
    pub fn default_list() -> Self {
        Self {
            id: "default-v1".into(),
            prompts: vec![
                prompt("a photo of * <class> wearing a red hat", vec![target("hat", "a red hat")]),
                prompt("a photo of * <class> on a green lawn", vec![target("lawn", "green grass")]),
                prompt("* <class> in a blue sweater", vec![target("sweater", "a blue sweater")]),
                prompt(
                    "* <class> with purple sunglasses on a beach",
                    vec![target("sunglasses", "purple sunglasses"), target("beach", "a sandy beach")],
                ),
                prompt("a painting of * <class> in the style of van gogh", vec![target("style", "a van gogh painting")]),
                prompt(
                    "* <class> in a yellow raincoat under heavy rain",
                    vec![target("raincoat", "a yellow raincoat"), target("rain", "heavy rain")],
                ),
                prompt("a pencil sketch of * <class>", vec![target("sketch", "a pencil sketch")]),
                prompt(
                    "* <class> with an orange scarf in the snow",
                    vec![target("scarf", "an orange scarf"), target("snow", "white snow")],
                ),
                prompt("* <class> as a marble statue", vec![target("statue", "a white marble statue")]),
                prompt(
                    "* <class> wearing a pink crown at night",
                    vec![target("crown", "a pink crown"), target("night", "a night sky")],
                ),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.len() != PROMPT_COUNT {
            return Err(Error::Config(format!(
                "prompt list `{}` has {} prompts; {PROMPT_COUNT} required",
                self.id,
                self.prompts.len()
            )));
        }
        for p in &self.prompts {
            if !(1..=2).contains(&p.targets.len()) {
                return Err(Error::Config(format!("`{}` needs one or two targets", p.template)));
            }
            if !p.template.contains(&format!("* {CLASS_PLACEHOLDER}")) {
                return Err(Error::Config(format!("`{}` lacks `* {CLASS_PLACEHOLDER}`", p.template)));
            }
            if p.targets.iter().any(|t| t.name.trim().is_empty() || t.descriptor.trim().is_empty()) {
                return Err(Error::Config(format!("`{}` has a target without descriptor", p.template)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let list: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        list.validate()?;
        Ok(list)
    }

    /// The entry whose rendering equals `prompt` after whitespace and case
    /// normalization.
    pub fn find(&self, prompt: &str, class_word: &str) -> Option<&EditingPrompt> {
        let norm = |s: &str| {
            s.split_whitespace()
                .map(HashTokenizer::normalize)
                .filter(|w| !w.is_empty())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let want = norm(prompt);
        self.prompts.iter().find(|p| norm(&p.render(class_word)) == want)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_list_is_valid() {
        let l = EditingPromptList::default_list();
        l.validate().unwrap();
        assert!(l.prompts.iter().any(|p| p.targets.len() == 2));
    }

    #[test]
    fn wrong_count_rejected() {
        let mut l = EditingPromptList::default_list();
        l.prompts.pop();
        assert!(l.validate().is_err());
    }

    #[test]
    fn finds_rendered_prompt() {
        let l = EditingPromptList::default_list();
        let p = l.find("A photo of *  face wearing a red hat.", "face").unwrap();
        assert_eq!(p.targets[0].name, "hat");
        assert!(l.find("a photo of * face", "face").is_none());
    }
}
