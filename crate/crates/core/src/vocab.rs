//! Fixed 64-entry character vocabulary.
//!
//! Four special tokens (pad, bos, eos, unk) followed by a hand-picked
//! character set: lowercase letters, digits, space, the punctuation the task
//! generators use as field markers, and the uppercase range `A..J` for
//! case-flip tasks. Unknown characters encode to `UNK` rather than failing.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Characters for ids `4..64`, in id order.
const CHARS: &[char] = &[
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r',
    's', 't', 'u', 'v', 'w', 'x', 'y', 'z', // 4..30
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', // 30..40
    ' ', ':', '|', '#', '>', '=', '-', '.', // 40..48
    'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', // 48..58
    ',', ';', '+', '*', '/', '_', // 58..64
];

pub const SIZE: usize = 64;

const fn first_char_id() -> usize {
    4
}

/// Token id for one character; `None` if it is outside the vocabulary.
pub fn char_id(c: char) -> Option<usize> {
    CHARS.iter().position(|&x| x == c).map(|i| i + first_char_id())
}

/// Encodes a string, mapping unsupported characters to `UNK`.
pub fn encode(s: &str) -> Vec<usize> {
    s.chars().map(|c| char_id(c).unwrap_or(UNK)).collect()
}

/// Decodes ids back into text; special tokens are dropped.
pub fn decode(ids: &[usize]) -> String {
    ids.iter()
        .filter_map(|&id| {
            if id >= first_char_id() && id < SIZE {
                Some(CHARS[id - first_char_id()])
            } else {
                None
            }
        })
        .collect()
}
