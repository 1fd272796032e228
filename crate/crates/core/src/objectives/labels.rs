use super::{ObjectiveError, Result};

pub const FIRST_CHAR_CLASSES: usize = 29;
pub const ASCII_CLASSES: usize = 5;

pub const DIGIT: u8 = 26;
pub const PUNCT: u8 = 27;
pub const OTHER: u8 = 28;

/// Class of a token's first character: `a..z → 0..25`, digits → 26,
/// ASCII punctuation → 27, anything else → 28. Case-folded first.
pub fn first_char_class(surface: &str) -> Result<u8> {
    let first = surface.chars().next().ok_or(ObjectiveError::EmptySurface)?;
    let folded = first.to_lowercase().next().unwrap_or(first);
    Ok(match folded {
        'a'..='z' => folded as u8 - b'a',
        '0'..='9' => DIGIT,
        c if c.is_ascii_punctuation() => PUNCT,
        _ => OTHER,
    })
}

/// Sum of the code points of every character, modulo 5.
pub fn ascii_class(surface: &str) -> Result<u8> {
    if surface.is_empty() {
        return Err(ObjectiveError::EmptySurface);
    }
    let sum: u64 = surface.chars().map(|c| c as u64).sum();
    Ok((sum % 5) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_char_examples() {
        assert_eq!(first_char_class("cat").unwrap(), 2);
        assert_eq!(first_char_class("Cat").unwrap(), 2);
        assert_eq!(first_char_class("42nd").unwrap(), DIGIT);
        assert_eq!(first_char_class("émigré").unwrap(), OTHER);
        assert_eq!(first_char_class("~").unwrap(), PUNCT);
        assert_eq!(first_char_class("zoo").unwrap(), 25);
        assert!(first_char_class("").is_err());
    }

    #[test]
    fn ascii_examples() {
        // 99 + 97 + 116 = 312
        assert_eq!(ascii_class("cat").unwrap(), 2);
        assert_eq!(ascii_class("a").unwrap(), 2);
        assert!(ascii_class("").is_err());
    }
}
