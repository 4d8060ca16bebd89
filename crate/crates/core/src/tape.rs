//! Tapes and their cell alphabets.
//!
//! A tape is a one-sided unbounded array of symbols with a head position.
//! Reading past the written region yields the blank without changing the
//! tape, so two tapes are equal exactly when their written contents (with
//! trailing blanks stripped) and heads agree. Token ids are stored on the
//! token tape as `#` followed by the id's binary digits, most significant
//! first.

use serde::{Deserialize, Serialize};

/// One cell. Which variants a given tape may hold is fixed by its
/// [`Alphabet`]; the blank is shared by all tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Symbol {
    /// The blank cell.
    Blank,
    /// A raw text byte (input, output, and scratch character cells).
    Byte(u8),
    /// A binary digit, 0 or 1.
    Bit(u8),
    /// The `#` delimiter.
    Delim,
    /// A read-only model parameter (raw fixed-point value).
    Param(i32),
    /// A working value: activations, cached keys/values, stack frames.
    Cell(i32),
    /// A probability or logit entry (raw fixed-point value).
    Prob(i32),
}

/// Which symbol family a tape admits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alphabet {
    /// Tapes 1 and 7: text bytes.
    CharBytes,
    /// Tape 2: bits and `#` delimiters.
    BinaryDelim,
    /// Tape 3: the serialised vocabulary (delimited id inventory).
    VocabEntries,
    /// Tape 4: model parameter cells.
    ParameterCells,
    /// Tape 5: working cells, delimiters, and scratch bytes.
    WorkCells,
    /// Tape 6: probability/logit cells and row delimiters.
    ProbabilityCells,
}

impl Alphabet {
    /// Whether `sym` may appear on a tape with this alphabet.
    pub fn admits(self, sym: Symbol) -> bool {
        match (self, sym) {
            (_, Symbol::Blank) => true,
            (Alphabet::CharBytes, Symbol::Byte(_)) => true,
            (Alphabet::BinaryDelim, Symbol::Bit(b)) => b <= 1,
            (Alphabet::BinaryDelim, Symbol::Delim) => true,
            (Alphabet::VocabEntries, Symbol::Bit(b)) => b <= 1,
            (Alphabet::VocabEntries, Symbol::Delim) => true,
            (Alphabet::ParameterCells, Symbol::Param(_)) => true,
            (Alphabet::ParameterCells, Symbol::Delim) => true,
            (Alphabet::WorkCells, Symbol::Cell(_)) => true,
            (Alphabet::WorkCells, Symbol::Delim) => true,
            (Alphabet::WorkCells, Symbol::Byte(_)) => true,
            (Alphabet::ProbabilityCells, Symbol::Prob(_)) => true,
            (Alphabet::ProbabilityCells, Symbol::Delim) => true,
            _ => false,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TapeError {
    #[error("tape {tape}: symbol {sym:?} not in alphabet {alphabet:?}")]
    BadSymbol {
        tape: u8,
        alphabet: Alphabet,
        sym: Symbol,
    },
    #[error("tape {tape}: head would move left of cell 0")]
    HeadUnderflow { tape: u8 },
    #[error("tape {tape}: malformed token encoding at cell {cell}: {detail}")]
    Malformed {
        tape: u8,
        cell: usize,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tape {
    /// 1-based tape number, fixed by the machine layout.
    pub index: u8,
    pub alphabet: Alphabet,
    cells: Vec<Symbol>,
    pub head: usize,
}

impl Tape {
    pub fn new(index: u8, alphabet: Alphabet) -> Tape {
        Tape {
            index,
            alphabet,
            cells: Vec::new(),
            head: 0,
        }
    }

    /// Number of cells up to and including the last non-blank one.
    pub fn written_len(&self) -> usize {
        self.cells.len()
    }

    /// Read the cell at `pos`; positions beyond the written region are blank.
    pub fn read_at(&self, pos: usize) -> Symbol {
        self.cells.get(pos).copied().unwrap_or(Symbol::Blank)
    }

    /// Read the cell under the head.
    pub fn read(&self) -> Symbol {
        self.read_at(self.head)
    }

    /// Write `sym` at `pos`, extending with blanks as needed. Trailing
    /// blanks are stripped so equality ignores them.
    pub fn write_at(&mut self, pos: usize, sym: Symbol) -> Result<(), TapeError> {
        if !self.alphabet.admits(sym) {
            return Err(TapeError::BadSymbol {
                tape: self.index,
                alphabet: self.alphabet,
                sym,
            });
        }
        if pos >= self.cells.len() {
            self.cells.resize(pos + 1, Symbol::Blank);
        }
        self.cells[pos] = sym;
        while self.cells.last() == Some(&Symbol::Blank) {
            self.cells.pop();
        }
        Ok(())
    }

    /// Move the head by `delta` cells (negative = left).
    pub fn move_head(&mut self, delta: i64) -> Result<(), TapeError> {
        let next = self.head as i64 + delta;
        if next < 0 {
            return Err(TapeError::HeadUnderflow { tape: self.index });
        }
        self.head = next as usize;
        Ok(())
    }

    pub fn cells(&self) -> &[Symbol] {
        &self.cells
    }

    /// The text bytes on a character tape, stopping at the first blank.
    pub fn text_bytes(&self) -> Vec<u8> {
        self.cells
            .iter()
            .take_while(|s| !matches!(s, Symbol::Blank))
            .filter_map(|s| match s {
                Symbol::Byte(b) => Some(*b),
                _ => None,
            })
            .collect()
    }
}

/// The symbols encoding one token id: `#` then the binary digits of the id,
/// most significant bit first (id 0 is the single digit 0).
pub fn encode_token_id(id: u32) -> Vec<Symbol> {
    let mut out = vec![Symbol::Delim];
    let bits = 32 - id.leading_zeros();
    if bits == 0 {
        out.push(Symbol::Bit(0));
    } else {
        for i in (0..bits).rev() {
            out.push(Symbol::Bit(((id >> i) & 1) as u8));
        }
    }
    out
}

/// Append one token id at the tape's current end (first blank cell after
/// the content), leaving the head untouched. Bulk helper for setup code;
/// the machine itself writes the same cells one micro step at a time.
pub fn write_token_id(tape: &mut Tape, id: u32) -> Result<(), TapeError> {
    let mut pos = tape.written_len();
    for sym in encode_token_id(id) {
        tape.write_at(pos, sym)?;
        pos += 1;
    }
    Ok(())
}

/// Decode the token id whose `#` delimiter sits at cell `at`; returns the
/// id and the cell just past its last digit.
pub fn read_token_id(tape: &Tape, at: usize) -> Result<(u32, usize), TapeError> {
    if tape.read_at(at) != Symbol::Delim {
        return Err(TapeError::Malformed {
            tape: tape.index,
            cell: at,
            detail: "expected # delimiter".into(),
        });
    }
    let mut id: u32 = 0;
    let mut pos = at + 1;
    let mut digits = 0usize;
    while let Symbol::Bit(b) = tape.read_at(pos) {
        if digits == 32 {
            return Err(TapeError::Malformed {
                tape: tape.index,
                cell: pos,
                detail: "id wider than 32 bits".into(),
            });
        }
        id = (id << 1) | b as u32;
        pos += 1;
        digits += 1;
    }
    if digits == 0 {
        return Err(TapeError::Malformed {
            tape: tape.index,
            cell: pos,
            detail: "delimiter with no digits".into(),
        });
    }
    Ok((id, pos))
}

/// All token ids on the tape, in order.
pub fn read_all_token_ids(tape: &Tape) -> Result<Vec<u32>, TapeError> {
    let mut ids = Vec::new();
    let mut pos = 0usize;
    while pos < tape.written_len() {
        match tape.read_at(pos) {
            Symbol::Delim => {
                let (id, next) = read_token_id(tape, pos)?;
                ids.push(id);
                pos = next;
            }
            Symbol::Blank => break,
            other => {
                return Err(TapeError::Malformed {
                    tape: tape.index,
                    cell: pos,
                    detail: format!("expected # before {other:?}"),
                })
            }
        }
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn token_tape() -> Tape {
        Tape::new(2, Alphabet::BinaryDelim)
    }

    #[test]
    fn id_five_encodes_as_101() {
        assert_eq!(
            encode_token_id(5),
            vec![Symbol::Delim, Symbol::Bit(1), Symbol::Bit(0), Symbol::Bit(1)]
        );
    }

    #[test]
    fn id_zero_is_a_single_digit() {
        assert_eq!(encode_token_id(0), vec![Symbol::Delim, Symbol::Bit(0)]);
    }

    #[test]
    fn round_trip_several_ids() {
        let mut tape = token_tape();
        for id in [0u32, 5, 1, 300, u32::MAX] {
            write_token_id(&mut tape, id).unwrap();
        }
        assert_eq!(
            read_all_token_ids(&tape).unwrap(),
            vec![0, 5, 1, 300, u32::MAX]
        );
    }

    #[test]
    fn digits_without_delimiter_are_malformed() {
        let mut tape = token_tape();
        tape.write_at(0, Symbol::Bit(1)).unwrap();
        tape.write_at(1, Symbol::Bit(0)).unwrap();
        tape.write_at(2, Symbol::Bit(1)).unwrap();
        assert!(read_all_token_ids(&tape).is_err());
    }

    #[test]
    fn bare_delimiter_is_malformed() {
        let mut tape = token_tape();
        tape.write_at(0, Symbol::Delim).unwrap();
        assert!(read_token_id(&tape, 0).is_err());
    }

    #[test]
    fn alphabet_rejects_foreign_symbols() {
        let mut tape = token_tape();
        assert!(tape.write_at(0, Symbol::Param(3)).is_err());
        let mut chars = Tape::new(1, Alphabet::CharBytes);
        assert!(chars.write_at(0, Symbol::Delim).is_err());
        assert!(chars.write_at(0, Symbol::Byte(b'a')).is_ok());
    }

    #[test]
    fn reads_beyond_content_are_blank_and_preserve_equality() {
        let mut a = token_tape();
        let b = token_tape();
        assert_eq!(a.read_at(1000), Symbol::Blank);
        assert_eq!(a, b);
        // Writing a blank far out must not make the tapes unequal either.
        a.write_at(500, Symbol::Blank).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_cannot_go_negative() {
        let mut tape = token_tape();
        assert!(tape.move_head(-1).is_err());
        tape.move_head(3).unwrap();
        tape.move_head(-3).unwrap();
        assert_eq!(tape.head, 0);
    }
}
