use crate::error::{Diagnostic, Pos};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    LBrace,
    RBrace,
    Colon,
    Str(String),
    /// Raw numeric text, validated by whoever consumes it.
    Num(String),
    Ident(String),
    Eof,
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub pos: Pos,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    pos: Pos,
}

impl Lexer<'_> {
    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.pos.line += 1;
            self.pos.col = 1;
        } else {
            self.pos.col += 1;
        }
        Some(c)
    }

    fn take_while(&mut self, out: &mut String, f: impl Fn(char) -> bool) {
        while let Some(c) = self.peek() {
            if !f(c) {
                break;
            }
            out.push(c);
            self.bump();
        }
    }

    fn string(&mut self, start: Pos) -> Result<String, Diagnostic> {
        let mut s = String::new();
        loop {
            let here = self.pos;
            match self.bump() {
                None | Some('\n') => return Err(Diagnostic::new(start, "unterminated string")),
                Some('"') => return Ok(s),
                Some('\\') => match self.bump() {
                    Some('"') => s.push('"'),
                    Some('\\') => s.push('\\'),
                    Some('n') => s.push('\n'),
                    Some('t') => s.push('\t'),
                    Some(c) => return Err(Diagnostic::new(here, format!("unknown escape `\\{c}`"))),
                    None => return Err(Diagnostic::new(start, "unterminated string")),
                },
                Some(c) => s.push(c),
            }
        }
    }

    fn number(&mut self, first: char, start: Pos) -> Result<String, Diagnostic> {
        let mut s = String::from(first);
        let digit = |c: char| c.is_ascii_digit();
        self.take_while(&mut s, digit);
        if self.peek() == Some('.') {
            s.push('.');
            self.bump();
            self.take_while(&mut s, digit);
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            s.push('e');
            self.bump();
            if let Some(c @ ('+' | '-')) = self.peek() {
                s.push(c);
                self.bump();
            }
            self.take_while(&mut s, digit);
        }
        if self.peek().is_some_and(|c| c.is_alphanumeric() || c == '_' || c == '.') {
            return Err(Diagnostic::new(start, "malformed number"));
        }
        if !s.chars().any(|c| c.is_ascii_digit()) || s.ends_with(['e', '+', '-']) {
            return Err(Diagnostic::new(start, format!("malformed number `{s}`")));
        }
        Ok(s)
    }
}

pub(crate) fn lex(src: &str) -> Result<Vec<Token>, Diagnostic> {
    let mut lx = Lexer {
        chars: src.chars().peekable(),
        pos: Pos { line: 1, col: 1 },
    };
    let mut out = Vec::new();
    loop {
        let pos = lx.pos;
        let Some(c) = lx.bump() else {
            out.push(Token { tok: Tok::Eof, pos });
            return Ok(out);
        };
        let tok = match c {
            c if c.is_whitespace() => continue,
            '#' => {
                while lx.peek().is_some_and(|c| c != '\n') {
                    lx.bump();
                }
                continue;
            }
            '{' => Tok::LBrace,
            '}' => Tok::RBrace,
            ':' => Tok::Colon,
            '"' => Tok::Str(lx.string(pos)?),
            c if c.is_ascii_digit() || matches!(c, '-' | '+' | '.') => Tok::Num(lx.number(c, pos)?),
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::from(c);
                lx.take_while(&mut s, |c| c.is_ascii_alphanumeric() || c == '_');
                Tok::Ident(s)
            }
            c => return Err(Diagnostic::new(pos, format!("unexpected character {c:?}"))),
        };
        out.push(Token { tok, pos });
    }
}
