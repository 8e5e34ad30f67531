use std::fmt;
use std::sync::Arc;

/// Counts tokens for budget accounting and statistics.
///
/// Implementations must be deterministic and monotone over prefixes:
/// extending a string never lowers its count.
pub trait Tokenizer: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn count(&self, text: &str) -> usize;

    /// Length in bytes of the longest prefix of `text` holding at most
    /// `max_tokens` tokens. Always lands on a char boundary.
    fn prefix_len(&self, text: &str, max_tokens: usize) -> usize {
        if self.count(text) <= max_tokens {
            return text.len();
        }
        let bounds: Vec<usize> = text
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(text.len()))
            .collect();
        let (mut lo, mut hi) = (0usize, bounds.len() - 1);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if self.count(&text[..bounds[mid]]) <= max_tokens {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        bounds[lo]
    }
}

pub type SharedTokenizer = Arc<dyn Tokenizer>;

/// Default approximate tokenizer: every maximal run of word characters
/// (alphanumeric or `_`) is one token, every other non-whitespace char is
/// one token, whitespace separates.
#[derive(Debug, Default, Clone, Copy)]
pub struct ApproxTokenizer;

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

impl Tokenizer for ApproxTokenizer {
    fn name(&self) -> &str {
        "approx-word-punct"
    }

    fn count(&self, text: &str) -> usize {
        let mut n = 0;
        let mut in_word = false;
        for c in text.chars() {
            if is_word(c) {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }

    fn prefix_len(&self, text: &str, max_tokens: usize) -> usize {
        let mut n = 0;
        let mut in_word = false;
        for (i, c) in text.char_indices() {
            let starts_token = if is_word(c) {
                let s = !in_word;
                in_word = true;
                s
            } else {
                in_word = false;
                !c.is_whitespace()
            };
            if starts_token {
                if n == max_tokens {
                    return i;
                }
                n += 1;
            }
        }
        text.len()
    }
}

pub fn default_tokenizer() -> SharedTokenizer {
    Arc::new(ApproxTokenizer)
}

/// Cuts `text` so that the result, including `marker`, fits in `max_tokens`.
/// Returns the text unchanged when it already fits.
pub fn truncate_with_marker(
    tokenizer: &dyn Tokenizer,
    text: &str,
    max_tokens: usize,
    marker: &str,
) -> String {
    if tokenizer.count(text) <= max_tokens {
        return text.to_string();
    }
    let room = max_tokens.saturating_sub(tokenizer.count(marker));
    // Tokenizers without a clean split point may merge text and marker.
    let mut cut = tokenizer.prefix_len(text, room);
    let mut out = format!("{}{}", &text[..cut], marker);
    while tokenizer.count(&out) > max_tokens && cut > 0 {
        cut = tokenizer.prefix_len(text, tokenizer.count(&text[..cut]).saturating_sub(1));
        out = format!("{}{}", &text[..cut], marker);
    }
    out
}
