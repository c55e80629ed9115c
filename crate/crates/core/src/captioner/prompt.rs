use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Label;
use crate::error::{Error, Result};

pub const IMAGE_PLACEHOLDER: &str = "<image>";
pub const LABEL_PLACEHOLDER: &str = "<label>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSpec {
    pub system: String,
    pub user_template: String,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            system: "You are a wound care physician".into(),
            user_template:
                "<image> | The wound image was labeled as <label>. Please briefly describe the image in 1 sentence."
                    .into(),
        }
    }
}

impl PromptSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.user_template.contains(IMAGE_PLACEHOLDER) {
            return Err(Error::Template("user template lacks <image>"));
        }
        if !self.user_template.contains(LABEL_PLACEHOLDER) {
            return Err(Error::Template("user template lacks <label>"));
        }
        Ok(())
    }

    /// SHA-256 over system prompt and template.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system.as_bytes());
        h.update([0]);
        h.update(self.user_template.as_bytes());
        hex::encode(h.finalize())
    }
}

/// `(system, user)` with the label word substituted. The `<image>` marker is
/// left in place for the transport to replace with the attachment.
pub fn build_label_guided_prompt(label: Label, spec: &PromptSpec) -> Result<(String, String)> {
    spec.validate()?;
    Ok((spec.system.clone(), spec.user_template.replace(LABEL_PLACEHOLDER, label.as_str())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_label() {
        let spec = PromptSpec::default();
        let (sys, inf) = build_label_guided_prompt(Label::Infected, &spec).unwrap();
        assert_eq!(sys, "You are a wound care physician");
        assert!(inf.contains("labeled as infected"));
        assert!(inf.contains("Please briefly describe the image in 1 sentence."));
        let (_, uninf) = build_label_guided_prompt(Label::Uninfected, &spec).unwrap();
        assert_eq!(uninf.replace("uninfected", "infected"), inf);
    }

    #[test]
    fn missing_placeholder_is_rejected() {
        let spec = PromptSpec { user_template: "<image> describe it".into(), ..PromptSpec::default() };
        assert!(matches!(build_label_guided_prompt(Label::Infected, &spec), Err(Error::Template(_))));
    }
}
