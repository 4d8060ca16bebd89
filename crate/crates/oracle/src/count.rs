//! Brute-force letter counting: the ground truth for the character-counting
//! subroutine.

pub fn oracle_count(text: &str, letter: char, case_sensitive: bool) -> usize {
    text.chars()
        .filter(|c| {
            if case_sensitive {
                *c == letter
            } else {
                c.to_lowercase().eq(letter.to_lowercase())
            }
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strawberry_has_three_rs() {
        assert_eq!(oracle_count("Strawberry", 'r', false), 3);
    }

    #[test]
    fn empty_text() {
        assert_eq!(oracle_count("", 'x', false), 0);
    }

    #[test]
    fn repeated_letter() {
        assert_eq!(oracle_count("rrr", 'r', true), 3);
    }

    #[test]
    fn case_sensitivity() {
        assert_eq!(oracle_count("Rr", 'r', true), 1);
        assert_eq!(oracle_count("Rr", 'r', false), 2);
    }
}
