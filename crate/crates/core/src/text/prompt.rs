use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{category name}";

const BUILTIN: [&str; 4] = [
    "a photo of a {category name}.",
    "A caption describing a photo of a {category name}.",
    "What does a {category name} look like?",
    "What are useful visual features for distinguishing a {category name} in a photo?",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: u8,
    pub pattern: String,
}

impl PromptTemplate {
    /// One of the four shipped templates, `id` in `1..=4`.
    pub fn builtin(id: u8) -> Result<Self> {
        let pattern = BUILTIN
            .get(usize::from(id).wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("no prompt template {id} (1..=4)")))?;
        Ok(Self {
            id,
            pattern: pattern.to_string(),
        })
    }

    pub fn all() -> Vec<Self> {
        (1..=4).map(|i| Self::builtin(i).expect("builtin id")).collect()
    }

    /// Template 1 is a fixed caption and is used as-is, without querying a
    /// language model.
    pub fn is_fixed_caption(&self) -> bool {
        self.id == 1
    }
}

pub fn render_prompt(t: &PromptTemplate, category: &str) -> Result<String> {
    if category.trim().is_empty() {
        return Err(Error::InvalidArgument("category name is empty".into()));
    }
    if !t.pattern.contains(PLACEHOLDER) {
        return Err(Error::InvalidArgument(format!(
            "template {} has no `{PLACEHOLDER}` placeholder",
            t.id
        )));
    }
    Ok(t.pattern.replacen(PLACEHOLDER, category, 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_renders() {
        let r = |id, c| render_prompt(&PromptTemplate::builtin(id).unwrap(), c).unwrap();
        assert_eq!(r(4, "cat"), "What are useful visual features for distinguishing a cat in a photo?");
        assert_eq!(r(1, "suitcase"), "a photo of a suitcase.");
        assert_eq!(r(2, "dog"), "A caption describing a photo of a dog.");
        assert_eq!(r(3, "tree"), "What does a tree look like?");
    }

    #[test]
    fn errors() {
        assert!(PromptTemplate::builtin(0).is_err());
        assert!(PromptTemplate::builtin(5).is_err());
        let t = PromptTemplate { id: 9, pattern: "no slot".into() };
        assert!(render_prompt(&t, "cat").is_err());
        assert!(render_prompt(&PromptTemplate::builtin(1).unwrap(), " ").is_err());
    }

    #[test]
    fn substitutes_only_once() {
        let t = PromptTemplate { id: 9, pattern: "{category name} and {category name}".into() };
        assert_eq!(render_prompt(&t, "x").unwrap(), "x and {category name}");
    }
}
