//! Judge interface for the two reflective questions, and reply normalization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::taxonomy::{normalize_label, EmotionTaxonomy};

/// Asked about step 1 together with the image (or its surrogate).
pub const CONSISTENCY_PROMPT: &str = "Can the following text describe the image?";
/// Asked about steps 1 and 2.
pub const COHERENCE_PROMPT: &str = "Which emotion best describes the text above?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Yes,
    No,
}

/// A judged emotion, or the non-matching sentinel when the reply names no
/// taxonomy label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmotionVerdict {
    Label(String),
    Unmatched(String),
}

impl EmotionVerdict {
    pub fn label(&self) -> Option<&str> {
        match self {
            Self::Label(l) => Some(l),
            Self::Unmatched(_) => None,
        }
    }
}

/// What a judge sees of the scene. The oracle uses `triggers`; remote judges
/// use `caption` or `image_url`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneRef {
    pub id: String,
    #[serde(default)]
    pub triggers: Vec<String>,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub image_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JudgeError {
    #[error("judge called with an unexpected prompt: {0:?}")]
    WrongPrompt(String),
    #[error("judge unavailable after {attempts} attempt(s): {reason}")]
    Unavailable { attempts: usize, reason: String },
    #[error("judge reply could not be mapped to Yes/No: {0:?}")]
    Unparseable(String),
    #[error("judge misconfigured: {0}")]
    Config(String),
}

/// The reflective evaluator. Replies are non-differentiable scalars.
pub trait Judge: Send + Sync {
    fn judge_yes_no(
        &self,
        scene: &SceneRef,
        text: &str,
        prompt: &str,
    ) -> Result<Verdict, JudgeError>;

    fn judge_emotion(
        &self,
        text: &str,
        prompt: &str,
        taxonomy: &EmotionTaxonomy,
    ) -> Result<EmotionVerdict, JudgeError>;

    /// `false` makes the training engine serialize calls to this judge.
    fn is_concurrent(&self) -> bool {
        true
    }
}

impl<J: Judge + ?Sized> Judge for Box<J> {
    fn judge_yes_no(
        &self,
        scene: &SceneRef,
        text: &str,
        prompt: &str,
    ) -> Result<Verdict, JudgeError> {
        (**self).judge_yes_no(scene, text, prompt)
    }

    fn judge_emotion(
        &self,
        text: &str,
        prompt: &str,
        taxonomy: &EmotionTaxonomy,
    ) -> Result<EmotionVerdict, JudgeError> {
        (**self).judge_emotion(text, prompt, taxonomy)
    }

    fn is_concurrent(&self) -> bool {
        (**self).is_concurrent()
    }
}

pub fn judge_yes_no(
    judge: &dyn Judge,
    scene: &SceneRef,
    step1: &str,
    prompt: &str,
) -> Result<Verdict, JudgeError> {
    if prompt != CONSISTENCY_PROMPT {
        return Err(JudgeError::WrongPrompt(prompt.to_string()));
    }
    judge.judge_yes_no(scene, step1, prompt)
}

pub fn judge_emotion(
    judge: &dyn Judge,
    steps12: &str,
    prompt: &str,
    taxonomy: &EmotionTaxonomy,
) -> Result<EmotionVerdict, JudgeError> {
    if prompt != COHERENCE_PROMPT {
        return Err(JudgeError::WrongPrompt(prompt.to_string()));
    }
    let verdict = judge.judge_emotion(steps12, prompt, taxonomy)?;
    if let EmotionVerdict::Unmatched(reply) = &verdict {
        log::warn!(
            "judge emotion reply {reply:?} matches no label in {}",
            taxonomy.name
        );
    }
    Ok(verdict)
}

fn words(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.char_indices()
        .filter(|&(i, c)| {
            c.is_alphanumeric()
                && text[..i]
                    .chars()
                    .next_back()
                    .is_none_or(|p| !p.is_alphanumeric())
        })
        .map(move |(i, _)| {
            let end = text[i..]
                .find(|c: char| !c.is_alphanumeric())
                .map_or(text.len(), |e| i + e);
            (i, &text[i..end])
        })
}

/// Byte offset of the first whole-word occurrence of `needle` in `hay`.
fn find_word(hay: &str, needle: &str) -> Option<usize> {
    hay.match_indices(needle).map(|(i, _)| i).find(|&i| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + needle.len()..].chars().next();
        before.is_none_or(|c| !c.is_alphanumeric())
            && after.is_none_or(|c| !c.is_alphanumeric())
    })
}

/// Leading-token match, then whole-reply search. Both words present → No.
pub fn normalize_yes_no(reply: &str) -> Option<Verdict> {
    let lower = reply.to_lowercase();
    match words(&lower).next().map(|(_, w)| w) {
        Some("yes") => return Some(Verdict::Yes),
        Some("no") => return Some(Verdict::No),
        _ => {}
    }
    let has_yes = find_word(&lower, "yes").is_some();
    let has_no = find_word(&lower, "no").is_some();
    match (has_yes, has_no) {
        (_, true) => Some(Verdict::No),
        (true, false) => Some(Verdict::Yes),
        (false, false) => None,
    }
}

/// Exact canonical match first, else the label (or alias) named earliest in
/// the reply; longer surface forms win ties.
pub fn normalize_emotion(reply: &str, taxonomy: &EmotionTaxonomy) -> EmotionVerdict {
    if let Some(l) = taxonomy.canonicalize(reply) {
        return EmotionVerdict::Label(l.to_string());
    }
    let lower = reply.to_lowercase();
    let best = taxonomy
        .surface_forms()
        .into_iter()
        .filter_map(|(form, label)| find_word(&lower, &form).map(|pos| (pos, form.len(), label)))
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    match best {
        Some((_, _, label)) => EmotionVerdict::Label(label.to_string()),
        None => EmotionVerdict::Unmatched(normalize_label(reply)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yes_no_normalization() {
        assert_eq!(normalize_yes_no("yes, it does."), Some(Verdict::Yes));
        assert_eq!(normalize_yes_no("Yes."), Some(Verdict::Yes));
        assert_eq!(
            normalize_yes_no("No, the text mentions rain but the image shows a beach"),
            Some(Verdict::No)
        );
        assert_eq!(normalize_yes_no("I would say yes"), Some(Verdict::Yes));
        assert_eq!(normalize_yes_no("Hmm, yes and no"), Some(Verdict::No));
        assert_eq!(normalize_yes_no("I don't know"), None);
        assert_eq!(normalize_yes_no(""), None);
        assert_eq!(normalize_yes_no("**YES**"), Some(Verdict::Yes));
    }

    #[test]
    fn emotion_normalization() {
        let t = EmotionTaxonomy::builtin("emoset").unwrap();
        assert_eq!(
            normalize_emotion("The emotion is awe.", &t),
            EmotionVerdict::Label("awe".into())
        );
        assert_eq!(
            normalize_emotion("I think it's Excitement!", &t),
            EmotionVerdict::Label("excitement".into())
        );
        assert!(matches!(
            normalize_emotion("melancholy", &t),
            EmotionVerdict::Unmatched(_)
        ));
        assert_eq!(
            normalize_emotion("Fear, not awe", &t),
            EmotionVerdict::Label("fear".into())
        );
        assert_eq!(
            normalize_emotion("They look scared", &t),
            EmotionVerdict::Label("fear".into())
        );
        // "awesome" is not the word "awe"
        assert!(normalize_emotion("awesome", &t).label().is_none());
    }

    #[test]
    fn free_functions_enforce_prompts() {
        struct Never;
        impl Judge for Never {
            fn judge_yes_no(&self, _: &SceneRef, _: &str, _: &str) -> Result<Verdict, JudgeError> {
                Ok(Verdict::Yes)
            }
            fn judge_emotion(
                &self,
                _: &str,
                _: &str,
                _: &EmotionTaxonomy,
            ) -> Result<EmotionVerdict, JudgeError> {
                Ok(EmotionVerdict::Label("fear".into()))
            }
        }
        let t = EmotionTaxonomy::builtin("emoset").unwrap();
        let s = SceneRef::default();
        assert!(matches!(
            judge_yes_no(&Never, &s, "x", COHERENCE_PROMPT),
            Err(JudgeError::WrongPrompt(_))
        ));
        assert!(judge_emotion(&Never, "x", CONSISTENCY_PROMPT, &t).is_err());
        assert_eq!(
            judge_yes_no(&Never, &s, "x", CONSISTENCY_PROMPT),
            Ok(Verdict::Yes)
        );
    }
}
