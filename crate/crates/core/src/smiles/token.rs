use super::SmilesError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Atom,
    BracketAtom,
    Bond,
    RingBond,
    BranchOpen,
    BranchClose,
    Dot,
}

/// One lexical unit of a SMILES string together with its byte offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    pub position: usize,
}

impl Token {
    fn new(text: &str, kind: TokenKind, position: usize) -> Self {
        Token {
            text: text.to_string(),
            kind,
            position,
        }
    }
}

/// Splits a SMILES string into tokens by longest match.
///
/// Concatenating the returned token texts reproduces the input exactly.
pub fn tokenize(smiles: &str) -> Result<Vec<Token>, SmilesError> {
    if smiles.is_empty() {
        return Err(SmilesError::Empty);
    }
    if let Some(position) = smiles.bytes().position(|b| !b.is_ascii()) {
        return Err(SmilesError::NonAscii { position });
    }
    let bytes = smiles.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let (len, kind) = match c {
            b'[' => match bytes[i..].iter().position(|&b| b == b']') {
                Some(end) => (end + 1, TokenKind::BracketAtom),
                None => return Err(SmilesError::UnterminatedBracket { position: i }),
            },
            b'C' if bytes.get(i + 1) == Some(&b'l') => (2, TokenKind::Atom),
            b'B' if bytes.get(i + 1) == Some(&b'r') => (2, TokenKind::Atom),
            b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' => (1, TokenKind::Atom),
            b'b' | b'c' | b'n' | b'o' | b'p' | b's' => (1, TokenKind::Atom),
            b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => (1, TokenKind::Bond),
            b'0'..=b'9' => (1, TokenKind::RingBond),
            b'%' => {
                let two_digits = bytes.get(i + 1).is_some_and(u8::is_ascii_digit)
                    && bytes.get(i + 2).is_some_and(u8::is_ascii_digit);
                if !two_digits {
                    return Err(SmilesError::UnexpectedCharacter {
                        position: i,
                        ch: '%',
                    });
                }
                (3, TokenKind::RingBond)
            }
            b'(' => (1, TokenKind::BranchOpen),
            b')' => (1, TokenKind::BranchClose),
            b'.' => (1, TokenKind::Dot),
            other => {
                return Err(SmilesError::UnexpectedCharacter {
                    position: i,
                    ch: other as char,
                })
            }
        };
        tokens.push(Token::new(&smiles[i..i + len], kind, i));
        i += len;
    }
    Ok(tokens)
}

pub fn join_tokens(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.text.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(s: &str) -> Vec<String> {
        tokenize(s).unwrap().into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn simple_chain() {
        assert_eq!(texts("CCO"), ["C", "C", "O"]);
    }

    #[test]
    fn two_letter_halogen_wins() {
        assert_eq!(
            texts("Clc1ccccc1"),
            ["Cl", "c", "1", "c", "c", "c", "c", "c", "1"]
        );
        assert_eq!(texts("BrB"), ["Br", "B"]);
    }

    #[test]
    fn bracket_atom_is_one_token() {
        assert_eq!(texts("C(=O)[O-]"), ["C", "(", "=", "O", ")", "[O-]"]);
        let toks = tokenize("C(=O)[O-]").unwrap();
        assert_eq!(toks[5].kind, TokenKind::BracketAtom);
        assert_eq!(toks[5].position, 5);
    }

    #[test]
    fn percent_ring_bonds() {
        assert_eq!(texts("C%12CC%12"), ["C", "%12", "C", "C", "%12"]);
        assert!(matches!(
            tokenize("C%1"),
            Err(SmilesError::UnexpectedCharacter { position: 1, .. })
        ));
    }

    #[test]
    fn lexical_errors() {
        assert_eq!(
            tokenize("CCX"),
            Err(SmilesError::UnexpectedCharacter {
                position: 2,
                ch: 'X'
            })
        );
        assert_eq!(
            tokenize("CC[NH4+"),
            Err(SmilesError::UnterminatedBracket { position: 2 })
        );
        assert_eq!(tokenize(""), Err(SmilesError::Empty));
        assert!(matches!(tokenize("Cé"), Err(SmilesError::NonAscii { .. })));
    }

    #[test]
    fn stereo_tokens_lex_fine() {
        // rejected later by the parser, not the lexer
        assert_eq!(texts("F/C=C/F"), ["F", "/", "C", "=", "C", "/", "F"]);
    }
}
