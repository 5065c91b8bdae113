//! Query prompt construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The literal answer-format instruction every rendered prompt must carry;
/// the parser's bracket grammar is anchored to it.
pub const COORD_FORMAT: &str = "[x1, y1, x2, y2]";

const CATEGORY_SLOT: &str = "{category}";

const STANDARD_TEMPLATE: &str = "Please find the bounding box coordinates of the {category} in this image. When scanning the image to locate the {category}, look across the entire image and consider all visible human figures. Once you have found the {category}, determine their exact boundaries by identifying the left, right, top, and bottom boundaries. Please provide your reasoning process and give the final coordinates as [x1, y1, x2, y2] for the bounding box.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template must contain the literal coordinate format \"{COORD_FORMAT}\"")]
    MissingCoordFormat,
    #[error("template must contain the {CATEGORY_SLOT} placeholder")]
    MissingCategorySlot,
    #[error("category name must be non-empty")]
    EmptyCategory,
}

/// Prompt text with a `{category}` placeholder, rendered once per query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    template: String,
}

impl PromptTemplate {
    /// The stock person-detection prompt generalized over the category slot.
    pub fn standard() -> Self {
        Self {
            template: STANDARD_TEMPLATE.to_owned(),
        }
    }

    pub fn new(template: impl Into<String>) -> Result<Self, PromptError> {
        let template = template.into();
        if !template.contains(COORD_FORMAT) {
            return Err(PromptError::MissingCoordFormat);
        }
        if !template.contains(CATEGORY_SLOT) {
            return Err(PromptError::MissingCategorySlot);
        }
        Ok(Self { template })
    }

    pub fn text(&self) -> &str {
        &self.template
    }

    pub fn render(&self, category: &str) -> Result<String, PromptError> {
        let category = category.trim();
        if category.is_empty() {
            return Err(PromptError::EmptyCategory);
        }
        Ok(self.template.replace(CATEGORY_SLOT, category))
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::standard()
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = PromptError;
    fn try_from(s: String) -> Result<Self, PromptError> {
        Self::new(s)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.template
    }
}
