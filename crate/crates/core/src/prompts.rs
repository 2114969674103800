//! Prompt template registry with `{{Slot}}` substitution.
//!
//! Template bodies ship as asset files and are embedded at compile time;
//! a directory of same-named `.txt` files can override them at runtime.
//! Slot names are kept verbatim from the source material, spelling
//! included (`{{Infomation}}`, `{{Categoryies}}`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("missing binding for slot \"{0}\"")]
    MissingSlot(String),
    #[error("binding \"{0}\" does not match any slot")]
    UnknownSlot(String),
    #[error("unterminated slot marker at byte {0}")]
    UnterminatedSlot(usize),
    #[error("cannot read template override: {0}")]
    Io(#[from] std::io::Error),
}

/// The six shipped templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateId {
    SemanticEnhancement,
    CategorySummary,
    DataClassification,
    FewShot,
    RefineSelect,
    PiaJudge,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::SemanticEnhancement,
        TemplateId::CategorySummary,
        TemplateId::DataClassification,
        TemplateId::FewShot,
        TemplateId::RefineSelect,
        TemplateId::PiaJudge,
    ];

    /// File stem used for asset shipping and directory overrides.
    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateId::SemanticEnhancement => "semantic_enhancement",
            TemplateId::CategorySummary => "category_summary",
            TemplateId::DataClassification => "data_classification",
            TemplateId::FewShot => "few_shot",
            TemplateId::RefineSelect => "refine_select",
            TemplateId::PiaJudge => "pia_judge",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateId::SemanticEnhancement => {
                include_str!("../assets/prompts/semantic_enhancement.txt")
            }
            TemplateId::CategorySummary => include_str!("../assets/prompts/category_summary.txt"),
            TemplateId::DataClassification => {
                include_str!("../assets/prompts/data_classification.txt")
            }
            TemplateId::FewShot => include_str!("../assets/prompts/few_shot.txt"),
            TemplateId::RefineSelect => include_str!("../assets/prompts/refine_select.txt"),
            TemplateId::PiaJudge => include_str!("../assets/prompts/pia_judge.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

/// A template body plus the slot names scanned from it.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
    pub slots: Vec<String>,
}

impl PromptTemplate {
    pub fn from_body(id: TemplateId, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        let mut slots = Vec::new();
        for piece in scan(&body)? {
            if let Piece::Slot(name) = piece {
                if !slots.iter().any(|s| s == name) {
                    slots.push(name.to_string());
                }
            }
        }
        Ok(PromptTemplate { id, body, slots })
    }

    /// Substitutes every slot. Bindings must cover exactly the template's
    /// slots; the output is byte-identical to the body outside slot spans.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, PromptError> {
        for key in bindings.keys() {
            if !self.slots.iter().any(|s| s == key) {
                return Err(PromptError::UnknownSlot(key.clone()));
            }
        }
        let mut out = String::with_capacity(self.body.len());
        for piece in scan(&self.body)? {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => match bindings.get(name) {
                    Some(value) => out.push_str(value),
                    None => return Err(PromptError::MissingSlot(name.to_string())),
                },
            }
        }
        Ok(out)
    }
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn scan(body: &str) -> Result<Vec<Piece<'_>>, PromptError> {
    let mut pieces = Vec::new();
    let mut rest = body;
    let mut offset = 0;
    while let Some(start) = rest.find("{{") {
        let end = rest[start..]
            .find("}}")
            .ok_or(PromptError::UnterminatedSlot(offset + start))?
            + start;
        pieces.push(Piece::Text(&rest[..start]));
        pieces.push(Piece::Slot(&rest[start + 2..end]));
        offset += end + 2;
        rest = &rest[end + 2..];
    }
    pieces.push(Piece::Text(rest));
    Ok(pieces)
}

/// Immutable registry of all six templates.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl TemplateRegistry {
    /// The compiled-in template set.
    pub fn builtin() -> Self {
        let templates = TemplateId::ALL
            .iter()
            .map(|&id| {
                let t = PromptTemplate::from_body(id, id.builtin_body())
                    .expect("builtin templates are well-formed");
                (id, t)
            })
            .collect();
        TemplateRegistry { templates }
    }

    /// Builtins with per-file overrides from `dir` (`<stem>.txt`).
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut registry = TemplateRegistry::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.file_stem()));
            if path.is_file() {
                let body = std::fs::read_to_string(&path)?;
                registry.templates.insert(id, PromptTemplate::from_body(id, body)?);
            }
        }
        Ok(registry)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    /// Renders a template in one call.
    pub fn render(
        &self,
        id: TemplateId,
        bindings: &BTreeMap<String, String>,
    ) -> Result<String, PromptError> {
        self.get(id).render(bindings)
    }
}

/// Convenience for building binding maps.
pub fn bindings<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_are_scanned_verbatim() {
        let reg = TemplateRegistry::builtin();
        assert_eq!(
            reg.get(TemplateId::SemanticEnhancement).slots,
            vec!["Infomation"]
        );
        assert_eq!(
            reg.get(TemplateId::DataClassification).slots,
            vec!["Description", "Categoryies"]
        );
        assert_eq!(
            reg.get(TemplateId::RefineSelect).slots,
            vec!["Description", "Diagram", "Name", "Nodes"]
        );
        assert_eq!(
            reg.get(TemplateId::FewShot).slots,
            vec!["Examples", "Description"]
        );
        assert_eq!(reg.get(TemplateId::PiaJudge).slots, vec!["Description", "Nodes"]);
    }

    #[test]
    fn render_substitutes_and_preserves_other_bytes() {
        let reg = TemplateRegistry::builtin();
        let body = &reg.get(TemplateId::SemanticEnhancement).body;
        let rendered = reg
            .render(TemplateId::SemanticEnhancement, &bindings([("Infomation", "x")]))
            .unwrap();
        assert_eq!(rendered, body.replace("{{Infomation}}", "x"));
        assert!(!rendered.contains("{{"));
    }

    #[test]
    fn missing_slot_is_reported_by_name() {
        let reg = TemplateRegistry::builtin();
        let err = reg
            .render(
                TemplateId::DataClassification,
                &bindings([("Description", "d")]),
            )
            .unwrap_err();
        assert!(matches!(err, PromptError::MissingSlot(name) if name == "Categoryies"));
    }

    #[test]
    fn unknown_binding_is_rejected() {
        let reg = TemplateRegistry::builtin();
        let err = reg
            .render(
                TemplateId::PiaJudge,
                &bindings([("Description", "d"), ("Nodes", "n"), ("Foo", "x")]),
            )
            .unwrap_err();
        assert!(matches!(err, PromptError::UnknownSlot(name) if name == "Foo"));
    }

    #[test]
    fn repeated_slot_renders_each_occurrence() {
        let t = PromptTemplate::from_body(TemplateId::FewShot, "a {{X}} b {{X}} c").unwrap();
        assert_eq!(t.slots, vec!["X"]);
        let out = t.render(&bindings([("X", "1")])).unwrap();
        assert_eq!(out, "a 1 b 1 c");
    }

    #[test]
    fn binding_values_are_not_rescanned() {
        let t = PromptTemplate::from_body(TemplateId::FewShot, "v: {{X}}").unwrap();
        let out = t.render(&bindings([("X", "{{Y}}")])).unwrap();
        assert_eq!(out, "v: {{Y}}");
    }

    #[test]
    fn directory_override_replaces_builtin() {
        let dir = std::env::temp_dir().join(format!("prompt_override_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("pia_judge.txt"), "custom {{Description}} {{Nodes}}").unwrap();
        let reg = TemplateRegistry::with_overrides(&dir).unwrap();
        assert!(reg.get(TemplateId::PiaJudge).body.starts_with("custom"));
        assert_eq!(
            reg.get(TemplateId::FewShot).body,
            TemplateRegistry::builtin().get(TemplateId::FewShot).body
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
