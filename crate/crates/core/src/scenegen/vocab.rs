//! Closed attribute vocabulary and text labels.
//!
//! Every piece of text in the system — field conditioning, denoiser
//! conditioning, inversion targets — is a whitespace-separated sequence over
//! this fixed word list, so token ids are stable and there is no tokenizer
//! dependency. Id 0 is a reserved null word standing in for empty text.

use super::{Accent, SceneSpec};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Reserved word for empty/unconditioned text; always id 0.
pub const NULL_WORD: &str = "<null>";
pub const NULL_ID: usize = 0;

/// The nine base colors with their RGB values. Scenes draw both base and
/// accent colors from this palette, and label words are recovered from the
/// stored RGB by exact lookup.
pub const COLORS: [(&str, [f64; 3]); 9] = [
    ("red", [0.90, 0.12, 0.10]),
    ("green", [0.10, 0.75, 0.20]),
    ("blue", [0.15, 0.25, 0.90]),
    ("yellow", [0.92, 0.85, 0.10]),
    ("orange", [0.95, 0.55, 0.10]),
    ("purple", [0.55, 0.15, 0.70]),
    ("cyan", [0.10, 0.80, 0.85]),
    ("magenta", [0.90, 0.15, 0.80]),
    ("gray", [0.50, 0.50, 0.50]),
];

/// Shape words, indexed by `Primitive as usize`.
pub const PRIMITIVE_WORDS: [&str; 4] = ["cube", "sphere", "cylinder", "cone"];

/// Size words for thirds of the generated size range [0.3, 0.7].
pub const SIZE_WORDS: [&str; 3] = ["small", "medium", "large"];

/// Accent words, indexed by `Accent as usize`.
pub const ACCENT_WORDS: [&str; 3] = ["plain", "striped", "capped"];

/// The full vocabulary in id order: null, colors, shapes, sizes, accents.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec![NULL_WORD];
    v.extend(COLORS.iter().map(|(w, _)| *w));
    v.extend(PRIMITIVE_WORDS);
    v.extend(SIZE_WORDS);
    v.extend(ACCENT_WORDS);
    v
}

/// Id of a single word.
pub fn token_id(word: &str) -> Result<usize> {
    vocabulary()
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| Error::UnknownToken { token: word.into() })
}

/// Whitespace tokenization over the closed vocabulary. Empty text gives an
/// empty sequence; the null-token convention for empty text belongs to the
/// embedding layers, not here.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace().map(token_id).collect()
}

/// The size word for a circumradius, splitting [0.3, 0.7] into thirds.
pub fn size_word(size: f64) -> &'static str {
    if size < 0.3 + 0.4 / 3.0 {
        SIZE_WORDS[0]
    } else if size < 0.3 + 0.8 / 3.0 {
        SIZE_WORDS[1]
    } else {
        SIZE_WORDS[2]
    }
}

/// The accent word for an accent kind.
pub fn accent_word(accent: Accent) -> &'static str {
    ACCENT_WORDS[accent as usize]
}

/// The palette word for an RGB value; colors off the palette have no name
/// and are rejected.
pub fn color_word(rgb: &[f64; 3]) -> Result<&'static str> {
    COLORS
        .iter()
        .find(|(_, c)| c == rgb)
        .map(|(w, _)| *w)
        .ok_or_else(|| Error::InvalidArgument {
            op: "color_word",
            reason: format!("{rgb:?} is not a palette color"),
        })
}

/// Both label strings for a scene: coarse "color shape" and full
/// "color shape size accent".
pub fn scene_texts(spec: &SceneSpec) -> Result<(String, String)> {
    let color = color_word(&spec.base_color)?;
    let shape = spec.primitive.word();
    let coarse = format!("{color} {shape}");
    let full = format!(
        "{coarse} {} {}",
        size_word(spec.size),
        accent_word(spec.accent)
    );
    Ok((coarse, full))
}

/// The coarse attribute subsequence of a token sequence: color and shape
/// words in their original order, everything else dropped. This is how a
/// full prompt is reduced to the condition field's vocabulary subset.
pub fn coarse_subsequence(tokens: &[usize]) -> Vec<usize> {
    let colors = 1..1 + COLORS.len();
    let shapes = 1 + COLORS.len()..1 + COLORS.len() + PRIMITIVE_WORDS.len();
    tokens
        .iter()
        .copied()
        .filter(|t| colors.contains(t) || shapes.contains(t))
        .collect()
}

/// Token-id form of a scene's labels. The coarse sequence is a strict prefix
/// of the full one, hence a strict subsequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextLabel {
    pub coarse_tokens: Vec<usize>,
    pub full_tokens: Vec<usize>,
}

impl TextLabel {
    pub fn for_scene(spec: &SceneSpec) -> Result<TextLabel> {
        let (coarse, full) = scene_texts(spec)?;
        Ok(TextLabel {
            coarse_tokens: tokenize(&coarse)?,
            full_tokens: tokenize(&full)?,
        })
    }

    /// True when the coarse tokens appear in order within the full tokens
    /// and the two sequences differ.
    pub fn coarse_is_strict_subsequence(&self) -> bool {
        if self.coarse_tokens == self.full_tokens {
            return false;
        }
        let mut it = self.full_tokens.iter();
        self.coarse_tokens
            .iter()
            .all(|c| it.any(|f| f == c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::Primitive;

    #[test]
    fn vocabulary_is_fixed_and_unique() {
        let v = vocabulary();
        assert_eq!(v.len(), 20);
        assert_eq!(v[NULL_ID], NULL_WORD);
        let set: std::collections::BTreeSet<_> = v.iter().collect();
        assert_eq!(set.len(), v.len(), "duplicate words");
        for (i, w) in v.iter().enumerate() {
            assert_eq!(token_id(w).unwrap(), i);
        }
    }

    #[test]
    fn unknown_words_are_rejected_by_name() {
        let err = tokenize("red banana").unwrap_err();
        assert!(matches!(err, Error::UnknownToken { token } if token == "banana"));
    }

    #[test]
    fn labels_compose_and_nest() {
        let spec = SceneSpec {
            primitive: Primitive::Cube,
            base_color: COLORS[0].1,
            size: 0.32,
            accent: Accent::Stripe,
            accent_color: COLORS[2].1,
            density_inside: 8.0,
        };
        let (coarse, full) = scene_texts(&spec).unwrap();
        assert_eq!(coarse, "red cube");
        assert_eq!(full, "red cube small striped");
        let label = TextLabel::for_scene(&spec).unwrap();
        assert!(label.coarse_is_strict_subsequence());
        assert_eq!(label.coarse_tokens.len(), 2);
        assert_eq!(label.full_tokens.len(), 4);
    }

    #[test]
    fn coarse_subsequence_keeps_color_and_shape_words() {
        let full = tokenize("large red cube plain").unwrap();
        assert_eq!(
            coarse_subsequence(&full),
            tokenize("red cube").unwrap(),
            "order preserved, size and accent dropped"
        );
        assert!(coarse_subsequence(&[NULL_ID]).is_empty());
        assert!(coarse_subsequence(&[]).is_empty());
        // A scene's own labels agree with the filter.
        let spec = SceneSpec {
            primitive: Primitive::Cube,
            base_color: COLORS[0].1,
            size: 0.32,
            accent: Accent::Stripe,
            accent_color: COLORS[2].1,
            density_inside: 8.0,
        };
        let label = TextLabel::for_scene(&spec).unwrap();
        assert_eq!(coarse_subsequence(&label.full_tokens), label.coarse_tokens);
    }

    #[test]
    fn size_bands_split_the_range_in_thirds() {
        assert_eq!(size_word(0.30), "small");
        assert_eq!(size_word(0.43), "small");
        assert_eq!(size_word(0.44), "medium");
        assert_eq!(size_word(0.56), "medium");
        assert_eq!(size_word(0.57), "large");
        assert_eq!(size_word(0.70), "large");
    }

    #[test]
    fn off_palette_colors_have_no_word() {
        assert!(color_word(&[0.33, 0.44, 0.55]).is_err());
    }
}
