use unicode_general_category::{get_general_category, GeneralCategory};

/// Whitespace-free tokens of one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedSentence {
    pub tokens: Vec<String>,
}

impl TokenizedSentence {
    pub fn new(tokens: Vec<String>) -> Self {
        debug_assert!(tokens.iter().all(|t| !t.is_empty() && !t.contains(char::is_whitespace)));
        Self { tokens }
    }

    /// Splits on whitespace without any punctuation handling.
    pub fn from_spaced(text: &str) -> Self {
        Self {
            tokens: text.split_whitespace().map(str::to_string).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

fn is_punct(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    ) || c == '\u{0964}'
        || c == '\u{0965}'
}

fn is_digit(c: char) -> bool {
    get_general_category(c) == GeneralCategory::DecimalNumber
}

/// Splits on whitespace and detaches punctuation, keeping decimal numbers
/// such as `12.5` as a single token.
pub fn tokenize(text: &str) -> TokenizedSentence {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            if !is_punct(c) {
                word.push(c);
                continue;
            }
            let decimal_point = c == '.'
                && i > 0
                && is_digit(chars[i - 1])
                && chars.get(i + 1).is_some_and(|&n| is_digit(n));
            if decimal_point {
                word.push(c);
                continue;
            }
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(c.to_string());
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    TokenizedSentence { tokens }
}

enum Attach {
    /// No space before the token.
    Left,
    /// No space after the token.
    Right,
    /// ASCII quote: opening and closing alternate.
    Quote,
    Free,
}

fn attachment(token: &str) -> Attach {
    let mut chars = token.chars();
    let (Some(c), None) = (chars.next(), chars.next()) else {
        return Attach::Free;
    };
    if c == '"' || c == '\'' {
        return Attach::Quote;
    }
    match get_general_category(c) {
        GeneralCategory::OpenPunctuation | GeneralCategory::InitialPunctuation => Attach::Right,
        GeneralCategory::ClosePunctuation | GeneralCategory::FinalPunctuation => Attach::Left,
        _ => match c {
            '¿' | '¡' => Attach::Right,
            '.' | ',' | ';' | ':' | '!' | '?' | '%' | '…' | '\u{0964}' | '\u{0965}' => Attach::Left,
            _ => Attach::Free,
        },
    }
}

/// Joins tokens with single spaces, then re-attaches punctuation: no space
/// before closing punctuation or danda and none after opening brackets.
pub fn detokenize(sentence: &TokenizedSentence) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    let mut quote_open = false;
    for token in &sentence.tokens {
        let (space_before, glue_after) = match attachment(token) {
            Attach::Left => (false, false),
            Attach::Right => (true, true),
            Attach::Quote => {
                quote_open = !quote_open;
                if quote_open {
                    (true, true)
                } else {
                    (false, false)
                }
            }
            Attach::Free => (true, false),
        };
        if !out.is_empty() && space_before && !glue_next {
            out.push(' ');
        }
        out.push_str(token);
        glue_next = glue_after;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s).tokens
    }

    #[test]
    fn punctuation_detached() {
        assert_eq!(toks("hello, world"), ["hello", ",", "world"]);
        assert_eq!(toks("(a)"), ["(", "a", ")"]);
    }

    #[test]
    fn numbers() {
        assert_eq!(toks("12.5"), ["12.5"]);
        assert_eq!(toks("costs 12.50."), ["costs", "12.50", "."]);
        assert_eq!(toks("१२.५"), ["१२.५"]);
        assert_eq!(toks("1234"), ["1234"]);
    }

    #[test]
    fn danda_is_final_token() {
        assert_eq!(toks("रामः वनं गच्छति।"), ["रामः", "वनं", "गच्छति", "।"]);
        assert_eq!(toks("अ॥"), ["अ", "॥"]);
    }

    #[test]
    fn detokenize_inverse() {
        let t = TokenizedSentence::new(vec!["hello".into(), ",".into(), "world".into()]);
        assert_eq!(detokenize(&t), "hello, world");
        assert_eq!(detokenize(&TokenizedSentence::default()), "");
        let s = "he said \"yes (maybe)\" and left।";
        assert_eq!(detokenize(&tokenize(s)), s);
    }

    proptest! {
        #[test]
        fn tokens_cover_non_whitespace(s in "[a-z0-9 .,()!?\u{0964}\u{0C95}-\u{0C99}-]{0,30}") {
            let t = tokenize(&s);
            prop_assert!(t.tokens.iter().all(|t| !t.is_empty() && !t.contains(char::is_whitespace)));
            let expected: String = s.chars().filter(|c| !c.is_whitespace()).collect();
            prop_assert_eq!(t.tokens.concat(), expected);
        }
    }
}
