use super::alphabet::SUPPORTED_SYMBOLS;
use super::SmilesError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmilesToken {
    pub kind: TokenKind,
    /// Byte offset of the first character.
    pub position: usize,
    /// Number of source characters covered.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Atom(AtomToken),
    Bond(BondSymbol),
    BranchOpen,
    BranchClose,
    /// Ring-closure label, `0..=99`.
    RingBond(u8),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtomToken {
    /// Element symbol as written; lowercase means aromatic.
    pub symbol: &'static str,
    /// Present for `[...]` atoms.
    pub bracket: Option<BracketAtom>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BracketAtom {
    pub isotope: Option<u16>,
    pub chirality: Option<String>,
    pub hydrogens: u8,
    pub charge: i8,
    pub class: Option<u16>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BondSymbol {
    Single,
    Double,
    Triple,
    Aromatic,
    /// `/`
    Up,
    /// `\`
    Down,
    /// `.`, no bond between components.
    Dot,
}

/// Splits a SMILES string into tokens. Every character is either consumed
/// by a token or reported with its offset.
pub fn tokenize(text: &str) -> Result<Vec<SmilesToken>, SmilesError> {
    if text.is_empty() {
        return Err(SmilesError::EmptyInput);
    }
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = match c {
            b'(' => {
                i += 1;
                TokenKind::BranchOpen
            }
            b')' => {
                i += 1;
                TokenKind::BranchClose
            }
            b'-' | b'=' | b'#' | b':' | b'/' | b'\\' | b'.' => {
                i += 1;
                TokenKind::Bond(match c {
                    b'-' => BondSymbol::Single,
                    b'=' => BondSymbol::Double,
                    b'#' => BondSymbol::Triple,
                    b':' => BondSymbol::Aromatic,
                    b'/' => BondSymbol::Up,
                    b'\\' => BondSymbol::Down,
                    _ => BondSymbol::Dot,
                })
            }
            b'0'..=b'9' => {
                i += 1;
                TokenKind::RingBond(c - b'0')
            }
            b'%' => {
                let digits = bytes.get(i + 1..i + 3);
                match digits {
                    Some([a, b]) if a.is_ascii_digit() && b.is_ascii_digit() => {
                        i += 3;
                        TokenKind::RingBond((a - b'0') * 10 + (b - b'0'))
                    }
                    _ => return Err(SmilesError::UnknownSymbol { position: i }),
                }
            }
            b'[' => {
                let (atom, next) = bracket_atom(bytes, i)?;
                i = next;
                TokenKind::Atom(atom)
            }
            _ => {
                let (symbol, width) =
                    organic_symbol(bytes, i).ok_or(SmilesError::UnknownSymbol { position: i })?;
                i += width;
                TokenKind::Atom(AtomToken {
                    symbol,
                    bracket: None,
                })
            }
        };
        tokens.push(SmilesToken {
            kind,
            position: start,
            len: i - start,
        });
    }
    Ok(tokens)
}

fn lookup(s: &[u8]) -> Option<&'static str> {
    SUPPORTED_SYMBOLS
        .iter()
        .copied()
        .find(|sym| sym.as_bytes() == s)
}

/// Bare organic-subset atom at `i`; two-letter symbols win.
fn organic_symbol(bytes: &[u8], i: usize) -> Option<(&'static str, usize)> {
    if let Some(two) = bytes.get(i..i + 2) {
        if let Some(sym) = lookup(two) {
            return Some((sym, 2));
        }
    }
    lookup(&bytes[i..i + 1]).map(|sym| (sym, 1))
}

fn read_number(bytes: &[u8], i: &mut usize) -> Option<u32> {
    let start = *i;
    while *i < bytes.len() && bytes[*i].is_ascii_digit() && *i - start < 4 {
        *i += 1;
    }
    if *i == start {
        return None;
    }
    std::str::from_utf8(&bytes[start..*i]).ok()?.parse().ok()
}

fn bracket_atom(bytes: &[u8], open: usize) -> Result<(AtomToken, usize), SmilesError> {
    let close = bytes[open..]
        .iter()
        .position(|&b| b == b']')
        .map(|p| open + p)
        .ok_or(SmilesError::UnterminatedBracketAtom { position: open })?;
    let body = &bytes[..close];
    let mut i = open + 1;
    let mut detail = BracketAtom {
        isotope: read_number(body, &mut i).map(|n| n as u16),
        ..BracketAtom::default()
    };

    // Element: uppercase + optional lowercase, or a single aromatic lowercase.
    let symbol = {
        let two = body.get(i..i + 2).and_then(lookup);
        match two {
            Some(sym) => {
                i += 2;
                sym
            }
            None => {
                let one = body.get(i..i + 1).and_then(lookup);
                match one {
                    Some(sym) => {
                        i += 1;
                        sym
                    }
                    None => return Err(SmilesError::UnknownSymbol { position: i }),
                }
            }
        }
    };
    // A following lowercase letter would make a different (unsupported) element.
    if body.get(i).is_some_and(|b| b.is_ascii_lowercase()) {
        return Err(SmilesError::UnknownSymbol { position: i });
    }

    if body.get(i) == Some(&b'@') {
        let start = i;
        while body.get(i) == Some(&b'@') {
            i += 1;
        }
        while body
            .get(i)
            .is_some_and(|b| b.is_ascii_uppercase() && *b != b'H')
        {
            i += 1;
        }
        read_number(body, &mut i);
        detail.chirality = Some(String::from_utf8_lossy(&body[start..i]).into_owned());
    }
    if body.get(i) == Some(&b'H') {
        i += 1;
        detail.hydrogens = read_number(body, &mut i).map_or(1, |n| n.min(9) as u8);
    }
    if let Some(&sign) = body.get(i).filter(|b| **b == b'+' || **b == b'-') {
        let unit: i8 = if sign == b'+' { 1 } else { -1 };
        i += 1;
        let mut magnitude = 1i8;
        if let Some(n) = read_number(body, &mut i) {
            magnitude = n.min(15) as i8;
        } else {
            while body.get(i) == Some(&sign) {
                magnitude += 1;
                i += 1;
            }
        }
        detail.charge = unit * magnitude;
    }
    if body.get(i) == Some(&b':') {
        i += 1;
        detail.class = Some(
            read_number(body, &mut i).ok_or(SmilesError::UnknownSymbol { position: i })? as u16,
        );
    }
    if i != close {
        return Err(SmilesError::UnknownSymbol { position: i });
    }
    Ok((
        AtomToken {
            symbol,
            bracket: Some(detail),
        },
        close + 1,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(s: &str) -> Vec<TokenKind> {
        tokenize(s).unwrap().into_iter().map(|t| t.kind).collect()
    }

    fn atom(symbol: &'static str) -> TokenKind {
        TokenKind::Atom(AtomToken {
            symbol,
            bracket: None,
        })
    }

    #[test]
    fn simple_streams() {
        assert_eq!(kinds("C"), vec![atom("C")]);
        assert_eq!(
            kinds("C=O"),
            vec![atom("C"), TokenKind::Bond(BondSymbol::Double), atom("O")]
        );
        assert_eq!(
            kinds("C1CC1"),
            vec![
                atom("C"),
                TokenKind::RingBond(1),
                atom("C"),
                atom("C"),
                TokenKind::RingBond(1)
            ]
        );
    }

    #[test]
    fn two_letter_halogens_and_percent_rings() {
        assert_eq!(kinds("ClCBr"), vec![atom("Cl"), atom("C"), atom("Br")]);
        assert_eq!(
            kinds("C%12C%12"),
            vec![
                atom("C"),
                TokenKind::RingBond(12),
                atom("C"),
                TokenKind::RingBond(12)
            ]
        );
    }

    #[test]
    fn bracket_atoms() {
        let t = tokenize("[nH]").unwrap();
        let TokenKind::Atom(a) = &t[0].kind else {
            panic!()
        };
        assert_eq!(a.symbol, "n");
        assert_eq!(a.bracket.as_ref().unwrap().hydrogens, 1);
        let t = tokenize("[13C@@H]").unwrap();
        let TokenKind::Atom(a) = &t[0].kind else {
            panic!()
        };
        let b = a.bracket.as_ref().unwrap();
        assert_eq!(b.isotope, Some(13));
        assert_eq!(b.chirality.as_deref(), Some("@@"));
        let t = tokenize("[N+]").unwrap();
        let TokenKind::Atom(a) = &t[0].kind else {
            panic!()
        };
        assert_eq!(a.bracket.as_ref().unwrap().charge, 1);
        let t = tokenize("[O--]").unwrap();
        let TokenKind::Atom(a) = &t[0].kind else {
            panic!()
        };
        assert_eq!(a.bracket.as_ref().unwrap().charge, -2);
    }

    #[test]
    fn errors_carry_positions() {
        assert_eq!(
            tokenize("CCX"),
            Err(SmilesError::UnknownSymbol { position: 2 })
        );
        assert_eq!(
            tokenize("C[CH3"),
            Err(SmilesError::UnterminatedBracketAtom { position: 1 })
        );
        assert_eq!(
            tokenize("C[Na]"),
            Err(SmilesError::UnknownSymbol { position: 3 })
        );
        assert_eq!(
            tokenize("C%1"),
            Err(SmilesError::UnknownSymbol { position: 1 })
        );
        assert_eq!(
            tokenize("C C"),
            Err(SmilesError::UnknownSymbol { position: 1 })
        );
        assert_eq!(tokenize(""), Err(SmilesError::EmptyInput));
        assert_eq!(
            tokenize("Cé"),
            Err(SmilesError::UnknownSymbol { position: 1 })
        );
    }

    #[test]
    fn spans_cover_the_input() {
        for s in [
            "CC(=O)Oc1ccccc1C(=O)O",
            "c1ccc2[nH]ccc2c1",
            "C%10CC%10",
            "[13CH3]/C=C\\C",
        ] {
            let toks = tokenize(s).unwrap();
            let rebuilt: String = toks
                .iter()
                .map(|t| &s[t.position..t.position + t.len])
                .collect();
            assert_eq!(rebuilt, s);
            assert!(toks.windows(2).all(|w| w[0].position < w[1].position));
        }
    }
}
