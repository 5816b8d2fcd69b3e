//! The categorical attribute catalogue (25 values in 8 categories), worker
//! votes, and vote resolution: any "unknown" vote wins outright, otherwise
//! plurality, with ties resolved to unknown.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttributeError {
    #[error("unknown attribute category {0:?}")]
    UnknownCategory(String),
    #[error("value {value:?} is not in the {category:?} catalogue")]
    UnknownValue {
        category: AttributeCategory,
        value: String,
    },
    #[error("no votes for category {0:?}")]
    NoVotes(AttributeCategory),
}

/// The eight attribute classes, in canonical serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeCategory {
    Gender,
    Hair,
    UpperBody,
    LowerBody,
    Carrying,
    Age,
    Accessories,
    Location,
}

pub const CATEGORY_COUNT: usize = 8;

impl AttributeCategory {
    pub const ALL: [AttributeCategory; CATEGORY_COUNT] = [
        AttributeCategory::Gender,
        AttributeCategory::Hair,
        AttributeCategory::UpperBody,
        AttributeCategory::LowerBody,
        AttributeCategory::Carrying,
        AttributeCategory::Age,
        AttributeCategory::Accessories,
        AttributeCategory::Location,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    /// Catalogue values for this category, as single tokens (multi-word
    /// values joined with underscores).
    pub fn values(self) -> &'static [&'static str] {
        match self {
            AttributeCategory::Gender => &["male", "female"],
            AttributeCategory::Hair => &["long_hair", "short_hair", "bald"],
            AttributeCategory::UpperBody => &["shirt", "t_shirt", "suit"],
            AttributeCategory::LowerBody => &["jeans", "short", "skirt", "pant"],
            AttributeCategory::Carrying => &["backpack", "single_shoulder_bag", "handbag"],
            AttributeCategory::Age => &["baby", "teenage", "adult", "elderly"],
            AttributeCategory::Accessories => &["sunglasses", "head_phones", "hat"],
            AttributeCategory::Location => &["on_right_side", "on_left_side", "in_the_center"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeCategory::Gender => "gender",
            AttributeCategory::Hair => "hair",
            AttributeCategory::UpperBody => "upper_body",
            AttributeCategory::LowerBody => "lower_body",
            AttributeCategory::Carrying => "carrying",
            AttributeCategory::Age => "age",
            AttributeCategory::Accessories => "accessories",
            AttributeCategory::Location => "location",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, AttributeError> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| AttributeError::UnknownCategory(name.to_string()))
    }
}

pub const UNKNOWN_VOTE: &str = "unknown";

/// One resolved value (or unknown) per category.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttributeSet {
    values: [Option<String>; CATEGORY_COUNT],
}

impl AttributeSet {
    /// All categories unknown.
    pub fn unknown() -> Self {
        Self::default()
    }

    pub fn set(
        &mut self,
        category: AttributeCategory,
        value: &str,
    ) -> Result<(), AttributeError> {
        if !category.values().contains(&value) {
            return Err(AttributeError::UnknownValue {
                category,
                value: value.to_string(),
            });
        }
        self.values[category.index()] = Some(value.to_string());
        Ok(())
    }

    pub fn get(&self, category: AttributeCategory) -> Option<&str> {
        self.values[category.index()].as_deref()
    }

    /// Value tokens in canonical category order, `None` for unknown.
    pub fn ordered(&self) -> impl Iterator<Item = (AttributeCategory, Option<&str>)> {
        AttributeCategory::ALL
            .iter()
            .map(move |&c| (c, self.get(c)))
    }
}

/// Per-category worker selections; each selection is a catalogue value or
/// the literal `"unknown"`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttributeVotes(pub BTreeMap<String, Vec<String>>);

impl AttributeVotes {
    pub fn insert(&mut self, category: AttributeCategory, votes: &[&str]) {
        self.0.insert(
            category.name().to_string(),
            votes.iter().map(|s| s.to_string()).collect(),
        );
    }
}

/// Settles attribute votes per category: any unknown vote makes the
/// category unknown; otherwise the plurality value wins; a plurality tie
/// resolves to unknown. Categories with no vote list are a contract error.
pub fn resolve_attributes(votes: &AttributeVotes) -> Result<AttributeSet, AttributeError> {
    let mut resolved = AttributeSet::unknown();
    for (name, selections) in &votes.0 {
        let category = AttributeCategory::from_name(name)?;
        if selections.is_empty() {
            return Err(AttributeError::NoVotes(category));
        }
        let mut counts: Vec<(&str, usize)> = Vec::new();
        let mut any_unknown = false;
        for v in selections {
            if v == UNKNOWN_VOTE {
                any_unknown = true;
                break;
            }
            if !category.values().contains(&v.as_str()) {
                return Err(AttributeError::UnknownValue {
                    category,
                    value: v.clone(),
                });
            }
            match counts.iter_mut().find(|(val, _)| val == v) {
                Some((_, c)) => *c += 1,
                None => counts.push((v, 1)),
            }
        }
        if any_unknown {
            continue; // stays unknown regardless of the other selections
        }
        let best = counts.iter().map(|&(_, c)| c).max().unwrap();
        let winners: Vec<&str> = counts
            .iter()
            .filter(|&&(_, c)| c == best)
            .map(|&(v, _)| v)
            .collect();
        if winners.len() == 1 {
            resolved.set(category, winners[0])?;
        }
        // ties stay unknown
    }
    Ok(resolved)
}
