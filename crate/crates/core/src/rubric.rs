//! The two human-evaluation rubrics. Each has six criteria scored on an
//! integer 1-5 scale.

use core::fmt;
use core::str::FromStr;

use alloc::string::String;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rubric {
    /// Quality of a translated caption.
    Caption,
    /// Quality of an image generated from a prompt.
    Image,
}

/// `(id, column title)` in report column order.
const CAPTION_CRITERIA: [(&str, &str); 6] = [
    ("adequacy", "Adequacy"),
    ("fluency", "Fluency"),
    ("consistency", "Consistency"),
    ("relevance", "Relevance"),
    ("context", "Context"),
    ("appropriateness", "Appropriateness"),
];

const IMAGE_CRITERIA: [(&str, &str); 6] = [
    ("presence", "Presence"),
    ("localization", "Localization"),
    ("appropriateness", "Appropriateness"),
    ("aesthetics", "Aesthetics"),
    ("consistency", "Consistency"),
    ("cohesion", "Cohesion"),
];

pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 5;

impl Rubric {
    pub const ALL: [Rubric; 2] = [Rubric::Caption, Rubric::Image];

    pub fn as_str(self) -> &'static str {
        match self {
            Rubric::Caption => "caption",
            Rubric::Image => "image",
        }
    }

    fn table(self) -> &'static [(&'static str, &'static str); 6] {
        match self {
            Rubric::Caption => &CAPTION_CRITERIA,
            Rubric::Image => &IMAGE_CRITERIA,
        }
    }

    /// Criterion ids in column order.
    pub fn criteria(self) -> impl ExactSizeIterator<Item = &'static str> {
        self.table().iter().map(|(id, _)| *id)
    }

    /// Report column titles, parallel to [`Rubric::criteria`].
    pub fn titles(self) -> impl ExactSizeIterator<Item = &'static str> {
        self.table().iter().map(|(_, title)| *title)
    }

    pub fn criterion_index(self, criterion: &str) -> Option<usize> {
        self.table().iter().position(|(id, _)| *id == criterion)
    }

    pub fn has_criterion(self, criterion: &str) -> bool {
        self.criterion_index(criterion).is_some()
    }
}

impl fmt::Display for Rubric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown rubric {0:?} (expected caption or image)")]
pub struct UnknownRubric(pub String);

impl FromStr for Rubric {
    type Err = UnknownRubric;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "caption" => Ok(Rubric::Caption),
            "image" => Ok(Rubric::Image),
            other => Err(UnknownRubric(other.into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn column_shapes() {
        let caption: Vec<_> = Rubric::Caption.titles().collect();
        assert_eq!(caption, ["Adequacy", "Fluency", "Consistency", "Relevance", "Context", "Appropriateness"]);
        let image: Vec<_> = Rubric::Image.titles().collect();
        assert_eq!(image, ["Presence", "Localization", "Appropriateness", "Aesthetics", "Consistency", "Cohesion"]);
    }

    #[test]
    fn lookup() {
        assert_eq!(Rubric::Image.criterion_index("cohesion"), Some(5));
        assert!(!Rubric::Caption.has_criterion("cohesion"));
        assert_eq!("image".parse::<Rubric>().unwrap(), Rubric::Image);
        assert!("video".parse::<Rubric>().is_err());
    }
}
