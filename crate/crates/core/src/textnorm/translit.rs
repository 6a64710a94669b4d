use std::fmt;
use std::str::FromStr;

use unicode_general_category::{get_general_category, GeneralCategory};

/// An Indic script identified by its 128-codepoint Unicode block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScriptId {
    Devanagari,
    Kannada,
    Tamil,
    Telugu,
    Malayalam,
}

impl ScriptId {
    pub const ALL: [ScriptId; 5] = [
        ScriptId::Devanagari,
        ScriptId::Kannada,
        ScriptId::Tamil,
        ScriptId::Telugu,
        ScriptId::Malayalam,
    ];

    pub const BLOCK_LEN: u32 = 128;

    pub fn block_base(self) -> u32 {
        match self {
            ScriptId::Devanagari => 0x0900,
            ScriptId::Tamil => 0x0B80,
            ScriptId::Telugu => 0x0C00,
            ScriptId::Kannada => 0x0C80,
            ScriptId::Malayalam => 0x0D00,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScriptId::Devanagari => "devanagari",
            ScriptId::Kannada => "kannada",
            ScriptId::Tamil => "tamil",
            ScriptId::Telugu => "telugu",
            ScriptId::Malayalam => "malayalam",
        }
    }

    /// Offset of `c` inside this script's block, if it falls there.
    pub fn offset_of(self, c: char) -> Option<u32> {
        let cp = c as u32;
        let base = self.block_base();
        (base..base + Self::BLOCK_LEN).contains(&cp).then(|| cp - base)
    }

    /// The codepoint at `offset`, if it is assigned in this block.
    pub fn assigned_at(self, offset: u32) -> Option<char> {
        if offset >= Self::BLOCK_LEN {
            return None;
        }
        let c = char::from_u32(self.block_base() + offset)?;
        (get_general_category(c) != GeneralCategory::Unassigned).then_some(c)
    }
}

impl fmt::Display for ScriptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScriptId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "devanagari" | "deva" => Ok(ScriptId::Devanagari),
            "kannada" | "knda" => Ok(ScriptId::Kannada),
            "tamil" | "taml" => Ok(ScriptId::Tamil),
            "telugu" | "telu" => Ok(ScriptId::Telugu),
            "malayalam" | "mlym" => Ok(ScriptId::Malayalam),
            other => Err(format!("unknown script {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transliterated {
    pub text: String,
    /// In-block codepoints left unchanged because the target block has no
    /// assigned codepoint at the same offset.
    pub unmapped: usize,
}

/// Maps every codepoint of `from`'s block to the same offset in `to`'s
/// block. Everything else passes through.
pub fn transliterate(text: &str, from: ScriptId, to: ScriptId) -> Transliterated {
    if from == to {
        return Transliterated {
            text: text.to_string(),
            unmapped: 0,
        };
    }
    let mut unmapped = 0;
    let text = text
        .chars()
        .map(|c| match from.offset_of(c) {
            Some(offset) => to.assigned_at(offset).unwrap_or_else(|| {
                unmapped += 1;
                c
            }),
            None => c,
        })
        .collect();
    Transliterated { text, unmapped }
}

/// Maps Devanagari text back into `original`'s block.
pub fn detransliterate(text: &str, original: ScriptId) -> Transliterated {
    transliterate(text, ScriptId::Devanagari, original)
}
