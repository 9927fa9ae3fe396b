//! Candidate serialization (`<label [DESC] description [TYPE] t1, t2>`) and
//! the deterministic answer post-processor.

use super::{AnswerOutcome, CandidateEntity};
use crate::error::{Error, Result};

const DESC_TAG: &str = "[DESC]";
const TYPE_TAG: &str = "[TYPE]";
const TYPES_TAG: &str = "[TYPES]";
const NONE_DESC: &str = "None";

/// Class-id prefix for answers that match no candidate.
pub const UNMATCHED_PREFIX: &str = "unmatched:";

/// The textual part of a candidate, as recovered from its rendered form.
///
/// Rendered candidates carry no KG identifier, so parsing yields this and
/// [`CandidateText::with_id`] attaches one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateText {
    pub label: String,
    pub description: Option<String>,
    pub type_labels: Vec<String>,
}

impl CandidateText {
    pub fn with_id(self, entity_id: impl Into<String>) -> CandidateEntity {
        CandidateEntity {
            entity_id: entity_id.into(),
            label: self.label,
            description: self.description,
            type_labels: self.type_labels,
        }
    }
}

impl From<&CandidateEntity> for CandidateText {
    fn from(c: &CandidateEntity) -> Self {
        Self {
            label: c.label.clone(),
            description: c.description.clone(),
            type_labels: c.type_labels.clone(),
        }
    }
}

/// Emits the `[TYPE]` tag; absent descriptions render as `None`.
pub fn render_candidate(c: &CandidateEntity) -> String {
    format!(
        "<{} {} {} {} {}>",
        c.label,
        DESC_TAG,
        c.description.as_deref().unwrap_or(NONE_DESC),
        TYPE_TAG,
        c.type_labels.join(", ")
    )
}

/// Parses a rendered candidate. Accepts both `[TYPE]` and `[TYPES]`.
pub fn parse_candidate(s: &str) -> Result<CandidateText> {
    let malformed = |reason| Error::MalformedCandidate {
        input: s.to_owned(),
        reason,
    };
    let trimmed = s.trim();
    let inner = trimmed
        .strip_prefix('<')
        .and_then(|rest| rest.strip_suffix('>'))
        .ok_or_else(|| malformed("missing < > delimiters"))?;

    let desc_at = inner.find(DESC_TAG).ok_or_else(|| malformed("missing [DESC] tag"))?;
    let label = inner[..desc_at].trim();
    if label.is_empty() {
        return Err(malformed("empty label"));
    }
    let after_desc = &inner[desc_at + DESC_TAG.len()..];

    let (type_at, tag_len) = match (after_desc.find(TYPE_TAG), after_desc.find(TYPES_TAG)) {
        (Some(a), Some(b)) if b < a => (b, TYPES_TAG.len()),
        (Some(a), _) => (a, TYPE_TAG.len()),
        (None, Some(b)) => (b, TYPES_TAG.len()),
        (None, None) => return Err(malformed("missing [TYPE] tag")),
    };
    let description = after_desc[..type_at].trim();
    let description = (description != NONE_DESC).then(|| description.to_owned());
    let type_labels = after_desc[type_at + tag_len..]
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect();

    Ok(CandidateText {
        label: label.to_owned(),
        description,
        type_labels,
    })
}

/// Case-folds, collapses whitespace runs to one space and maps `[types]`
/// to `[type]`.
pub fn normalize_answer(s: &str) -> String {
    let folded = s.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.replace("[types]", "[type]")
}

/// Earliest occurrence of any needle in `haystack`; ties on position go to
/// the lower candidate index. Also reports whether two distinct entities
/// were found.
fn earliest_match<'a>(
    haystack: &str,
    needles: impl Iterator<Item = (usize, &'a str, String)>,
) -> Option<(usize, bool)> {
    let mut best: Option<(usize, usize, &str)> = None;
    let mut ambiguous = false;
    for (idx, id, needle) in needles {
        let Some(pos) = haystack.find(needle.as_str()) else {
            continue;
        };
        match best {
            None => best = Some((pos, idx, id)),
            Some((bpos, _, bid)) => {
                if bid != id {
                    ambiguous = true;
                }
                if pos < bpos {
                    best = Some((pos, idx, id));
                }
            }
        }
    }
    best.map(|(_, idx, _)| (idx, ambiguous))
}

/// Maps a raw answer to a candidate class.
///
/// Ladder: verbatim substring of a rendered candidate, then a normalized
/// substring match, otherwise a per-string `unmatched:` sentinel class.
pub fn extract_answer(
    answer_text: &str,
    candidates: &[CandidateEntity],
    gold_entity_id: &str,
) -> AnswerOutcome {
    let trimmed = answer_text.trim();
    let outcome = |idx: usize, verbatim: bool, ambiguous: bool| {
        let id = &candidates[idx].entity_id;
        AnswerOutcome {
            class_id: id.clone(),
            correct: id == gold_entity_id,
            matched_verbatim: verbatim,
            ambiguous,
        }
    };

    let verbatim = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.entity_id.as_str(), render_candidate(c)));
    if let Some((idx, ambiguous)) = earliest_match(trimmed, verbatim) {
        return outcome(idx, true, ambiguous);
    }

    let normalized = normalize_answer(trimmed);
    let loose = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.entity_id.as_str(), normalize_answer(&render_candidate(c))));
    if let Some((idx, ambiguous)) = earliest_match(&normalized, loose) {
        return outcome(idx, false, ambiguous);
    }

    let class_id = format!("{UNMATCHED_PREFIX}{normalized}");
    AnswerOutcome {
        correct: class_id == gold_entity_id,
        class_id,
        matched_verbatim: false,
        ambiguous: false,
    }
}
