//! Whitespace tokenizer and vocabulary built from taxonomy prompts.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::taxonomy::{render_prompt, HierLabel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Sorted distinct whitespace tokens of the given prompts.
    pub fn from_prompts<'a>(prompts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = prompts
            .into_iter()
            .flat_map(|p| p.split_whitespace().map(str::to_lowercase))
            .collect();
        set.into_iter().collect::<Vec<_>>().into()
    }

    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a HierLabel>) -> Self {
        let prompts: Vec<String> = labels.into_iter().map(render_prompt).collect();
        Self::from_prompts(prompts.iter().map(String::as_str))
    }

    /// One token per line.
    pub fn from_file_text(text: &str) -> Self {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect::<Vec<_>>()
            .into()
    }

    pub fn to_file_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>, ModelError> {
        let ids: Vec<usize> = prompt
            .split_whitespace()
            .map(|t| {
                let t = t.to_lowercase();
                self.index
                    .get(&t)
                    .copied()
                    .ok_or(ModelError::UnknownToken(t))
            })
            .collect::<Result<_, _>>()?;
        if ids.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::pathseg_labels;

    #[test]
    fn tokenizes_known_prompts() {
        let v = Vocab::from_labels(&pathseg_labels());
        let ids = v.tokenize("tissue-level gland in colon pathology.").unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(v.tokens()[ids[4]], "pathology.");
        assert!(matches!(
            v.tokenize("tissue-level unicorn in colon pathology."),
            Err(ModelError::UnknownToken(t)) if t == "unicorn"
        ));
        assert!(matches!(v.tokenize("   "), Err(ModelError::EmptyPrompt)));
        assert_eq!(Vocab::from_file_text(&v.to_file_text()), v);
    }
}
