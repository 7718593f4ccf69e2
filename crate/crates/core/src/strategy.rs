use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    GenerateNew,
    MutateExisting,
    SemanticEquiv,
}

impl StrategyKind {
    /// Registration order; uniform strategy draws index into this array.
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::GenerateNew,
        StrategyKind::MutateExisting,
        StrategyKind::SemanticEquiv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::GenerateNew => "generate-new",
            StrategyKind::MutateExisting => "mutate-existing",
            StrategyKind::SemanticEquiv => "semantic-equiv",
        }
    }

    pub fn requires_example(self) -> bool {
        !matches!(self, StrategyKind::GenerateNew)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const GENERATE_NEW_INSTRUCTION: &str = "Please create a new program that uses the features described above.";
pub const MUTATE_EXISTING_INSTRUCTION: &str = "Please mutate the above example program to create a new program.";
pub const SEMANTIC_EQUIV_INSTRUCTION: &str =
    "Please rewrite the above example program into a semantically equivalent but syntactically different program.";

/// Per-target instruction wording. Unset fields fall back to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyInstructions {
    #[serde(default, rename = "generate-new", alias = "generate_new")]
    pub generate_new: Option<String>,
    #[serde(default, rename = "mutate-existing", alias = "mutate_existing")]
    pub mutate_existing: Option<String>,
    #[serde(default, rename = "semantic-equiv", alias = "semantic_equiv")]
    pub semantic_equiv: Option<String>,
}

impl StrategyInstructions {
    pub fn text(&self, kind: StrategyKind) -> &str {
        match kind {
            StrategyKind::GenerateNew => self.generate_new.as_deref().unwrap_or(GENERATE_NEW_INSTRUCTION),
            StrategyKind::MutateExisting => self.mutate_existing.as_deref().unwrap_or(MUTATE_EXISTING_INSTRUCTION),
            StrategyKind::SemanticEquiv => self.semantic_equiv.as_deref().unwrap_or(SEMANTIC_EQUIV_INSTRUCTION),
        }
    }

    pub fn strategy(&self, kind: StrategyKind) -> GenerationStrategy {
        GenerationStrategy {
            kind,
            instruction_text: self.text(kind).to_string(),
            requires_example: kind.requires_example(),
        }
    }

    /// The three registered strategies, in registration order.
    pub fn registry(&self) -> [GenerationStrategy; 3] {
        StrategyKind::ALL.map(|kind| self.strategy(kind))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationStrategy {
    pub kind: StrategyKind,
    pub instruction_text: String,
    pub requires_example: bool,
}
