//! System prompts for every analyzer module, kept as text assets so the
//! wording can be diffed and reviewed apart from the code.

use serde::{Deserialize, Serialize};

/// The six model-driven modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    ContentAnalysis,
    PlacementEvolution,
    GroupNaming,
    Reorganization,
    ContextUnderstanding,
    Chat,
}

impl Module {
    pub const ALL: [Module; 6] = [
        Module::ContentAnalysis,
        Module::PlacementEvolution,
        Module::GroupNaming,
        Module::Reorganization,
        Module::ContextUnderstanding,
        Module::Chat,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Module::ContentAnalysis => "content_analysis",
            Module::PlacementEvolution => "placement_evolution",
            Module::GroupNaming => "group_naming",
            Module::Reorganization => "reorganization",
            Module::ContextUnderstanding => "context_understanding",
            Module::Chat => "chat",
        }
    }

    pub fn from_key(key: &str) -> Option<Module> {
        Module::ALL.into_iter().find(|m| m.key() == key)
    }

    pub fn system_prompt(self) -> &'static str {
        match self {
            Module::ContentAnalysis => include_str!("../../prompts/content_analysis.txt"),
            Module::PlacementEvolution => include_str!("../../prompts/placement_evolution.txt"),
            Module::GroupNaming => include_str!("../../prompts/group_naming.txt"),
            Module::Reorganization => include_str!("../../prompts/reorganization.txt"),
            Module::ContextUnderstanding => include_str!("../../prompts/context_understanding.txt"),
            Module::Chat => include_str!("../../prompts/chat.txt"),
        }
    }

    /// Whether the module answers with a JSON document.
    pub fn returns_json(self) -> bool {
        self != Module::Chat
    }
}

impl std::fmt::Display for Module {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}
