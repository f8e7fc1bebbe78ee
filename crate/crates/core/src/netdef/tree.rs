//! Untyped syntax tree shared by `.net` and `.solver` files: a list of
//! `key: value...` and `key { ... }` entries.

use super::lexer::{lex, Tok, Token};
use crate::error::{Diagnostic, Pos};

const MAX_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ScalarKind {
    Str,
    Num,
    Ident,
}

#[derive(Debug, Clone)]
pub(crate) struct Scalar {
    pub kind: ScalarKind,
    pub text: String,
    pub pos: Pos,
}

#[derive(Debug, Clone)]
pub(crate) enum Value {
    /// One string or identifier, or one or more numbers.
    Scalars(Vec<Scalar>),
    Block(Vec<Entry>),
}

#[derive(Debug, Clone)]
pub(crate) struct Entry {
    pub key: String,
    pub pos: Pos,
    pub value: Value,
}

struct Parser {
    tokens: Vec<Token>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.at]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.at].clone();
        if self.at + 1 < self.tokens.len() {
            self.at += 1;
        }
        t
    }

    fn entries(&mut self, depth: usize, open: Option<Pos>) -> Result<Vec<Entry>, Diagnostic> {
        let mut out = Vec::new();
        loop {
            let t = self.next();
            let key = match t.tok {
                Tok::Ident(k) => k,
                Tok::RBrace if open.is_some() => return Ok(out),
                Tok::Eof => match open {
                    None => return Ok(out),
                    Some(p) => return Err(Diagnostic::new(p, "unclosed `{`")),
                },
                Tok::RBrace => return Err(Diagnostic::new(t.pos, "unmatched `}`")),
                other => return Err(Diagnostic::new(t.pos, format!("expected a key, found {}", describe(&other)))),
            };
            let sep = self.next();
            let value = match sep.tok {
                Tok::Colon => Value::Scalars(self.scalars(&key, sep.pos)?),
                Tok::LBrace => {
                    if depth >= MAX_DEPTH {
                        return Err(Diagnostic::new(sep.pos, "blocks nested too deeply"));
                    }
                    Value::Block(self.entries(depth + 1, Some(sep.pos))?)
                }
                other => {
                    return Err(Diagnostic::new(
                        sep.pos,
                        format!("expected `:` or `{{` after `{key}`, found {}", describe(&other)),
                    ))
                }
            };
            out.push(Entry { key, pos: t.pos, value });
        }
    }

    fn scalars(&mut self, key: &str, colon: Pos) -> Result<Vec<Scalar>, Diagnostic> {
        let t = self.next();
        let (kind, text) = match t.tok {
            Tok::Str(s) => (ScalarKind::Str, s),
            Tok::Ident(s) => (ScalarKind::Ident, s),
            Tok::Num(s) => (ScalarKind::Num, s),
            other => {
                return Err(Diagnostic::new(
                    if other == Tok::Eof { colon } else { t.pos },
                    format!("expected a value for `{key}`, found {}", describe(&other)),
                ))
            }
        };
        let numeric = kind == ScalarKind::Num;
        let mut out = vec![Scalar { kind, text, pos: t.pos }];
        if numeric {
            while let Tok::Num(s) = &self.peek().tok {
                let s = s.clone();
                let pos = self.next().pos;
                out.push(Scalar {
                    kind: ScalarKind::Num,
                    text: s,
                    pos,
                });
            }
        }
        Ok(out)
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::LBrace => "`{`".into(),
        Tok::RBrace => "`}`".into(),
        Tok::Colon => "`:`".into(),
        Tok::Str(s) => format!("string {s:?}"),
        Tok::Num(s) => format!("number `{s}`"),
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Eof => "end of input".into(),
    }
}

pub(crate) fn parse_tree(src: &str) -> Result<Vec<Entry>, Diagnostic> {
    let mut p = Parser {
        tokens: lex(src)?,
        at: 0,
    };
    p.entries(0, None)
}

/// Decodes UTF-8, reporting the position of the first invalid byte.
pub(crate) fn decode(bytes: &[u8]) -> Result<&str, Diagnostic> {
    std::str::from_utf8(bytes).map_err(|e| {
        let valid = std::str::from_utf8(&bytes[..e.valid_up_to()]).unwrap_or_default();
        let line = valid.matches('\n').count() + 1;
        let col = valid.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        Diagnostic::new(Pos { line, col }, "invalid UTF-8")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_blocks_and_lists() {
        let t = parse_tree("a: 1 2 3 b { c: \"x\" d { } } e: f").unwrap();
        assert_eq!(t.len(), 3);
        match &t[0].value {
            Value::Scalars(v) => assert_eq!(v.len(), 3),
            _ => panic!(),
        }
        match &t[1].value {
            Value::Block(v) => assert_eq!(v.len(), 2),
            _ => panic!(),
        }
    }

    #[test]
    fn structural_errors() {
        assert_eq!(parse_tree("a {\n b: 1").unwrap_err().pos, Pos { line: 1, col: 3 });
        assert_eq!(parse_tree("}").unwrap_err().message, "unmatched `}`");
        assert!(parse_tree("a:").is_err());
        assert!(parse_tree("a b").is_err());
        assert!(parse_tree(": 1").is_err());
        let deep = "a {".repeat(100);
        assert_eq!(parse_tree(&deep).unwrap_err().message, "blocks nested too deeply");
    }

    #[test]
    fn invalid_utf8_position() {
        let e = decode(b"ab\ncd\xff").unwrap_err();
        assert_eq!(e.pos, Pos { line: 2, col: 3 });
    }
}
