//! Typed access to the entries of one block, with unknown-key and
//! duplicate-key checking.

use super::tree::{Entry, Scalar, ScalarKind, Value};
use crate::error::{Diagnostic, Pos};

pub(crate) type DResult<T> = Result<T, Diagnostic>;

pub(crate) struct Fields<'a> {
    pub entries: &'a [Entry],
    /// Where the block starts, for "missing key" diagnostics.
    pub pos: Pos,
    /// Human name of the block, e.g. "conv block".
    pub what: String,
}

impl<'a> Fields<'a> {
    pub fn new(entries: &'a [Entry], pos: Pos, what: impl Into<String>) -> Self {
        Fields {
            entries,
            pos,
            what: what.into(),
        }
    }

    /// Rejects keys outside `single` and `repeated`, and repeats of keys in
    /// `single`.
    pub fn check(&self, single: &[&str], repeated: &[&str]) -> DResult<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if repeated.contains(&e.key.as_str()) {
                continue;
            }
            if !single.contains(&e.key.as_str()) {
                return Err(Diagnostic::new(e.pos, format!("unknown key `{}` in {}", e.key, self.what)));
            }
            if self.entries[..i].iter().any(|p| p.key == e.key) {
                return Err(Diagnostic::new(e.pos, format!("duplicate key `{}` in {}", e.key, self.what)));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&'a Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn all(&self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    pub fn missing(&self, key: &str) -> Diagnostic {
        Diagnostic::new(self.pos, format!("missing `{key}` in {}", self.what))
    }

    pub fn block(&self, key: &str) -> DResult<Option<(&'a [Entry], Pos)>> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => block_of(e).map(|b| Some((b, e.pos))),
        }
    }

    pub fn string(&self, key: &str) -> DResult<Option<(String, Pos)>> {
        self.get(key).map(string_of).transpose()
    }

    pub fn ident(&self, key: &str) -> DResult<Option<(String, Pos)>> {
        self.get(key).map(|e| single(e, ScalarKind::Ident, "a keyword")).transpose()
    }

    pub fn usize(&self, key: &str) -> DResult<Option<usize>> {
        self.get(key).map(|e| single(e, ScalarKind::Num, "a number").and_then(|(t, p)| int(&t, p))).transpose()
    }

    pub fn u64(&self, key: &str) -> DResult<Option<u64>> {
        self.get(key)
            .map(|e| {
                let (t, p) = single(e, ScalarKind::Num, "a number")?;
                t.parse::<u64>()
                    .map_err(|_| Diagnostic::new(p, format!("expected a non-negative integer, found `{t}`")))
            })
            .transpose()
    }

    pub fn real(&self, key: &str) -> DResult<Option<f64>> {
        self.get(key)
            .map(|e| single(e, ScalarKind::Num, "a number").and_then(|(t, p)| real(&t, p)))
            .transpose()
    }

    pub fn bool(&self, key: &str) -> DResult<Option<bool>> {
        self.get(key)
            .map(|e| {
                let (t, p) = single(e, ScalarKind::Ident, "`true` or `false`")?;
                match t.as_str() {
                    "true" => Ok(true),
                    "false" => Ok(false),
                    _ => Err(Diagnostic::new(p, format!("expected `true` or `false`, found `{t}`"))),
                }
            })
            .transpose()
    }

    /// All numbers given under `key`, across repeated entries.
    pub fn reals(&self, key: &'a str) -> DResult<Vec<f64>> {
        let mut out = Vec::new();
        for e in self.all(key) {
            for s in numbers(e)? {
                out.push(real(&s.text, s.pos)?);
            }
        }
        Ok(out)
    }

    pub fn usizes(&self, key: &str) -> DResult<Option<(Vec<usize>, Pos)>> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => {
                let v = numbers(e)?.iter().map(|s| int(&s.text, s.pos)).collect::<DResult<Vec<_>>>()?;
                Ok(Some((v, e.pos)))
            }
        }
    }
}

pub(crate) fn block_of(e: &Entry) -> DResult<&[Entry]> {
    match &e.value {
        Value::Block(b) => Ok(b),
        Value::Scalars(_) => Err(Diagnostic::new(e.pos, format!("`{}` must be a `{{ ... }}` block", e.key))),
    }
}

pub(crate) fn string_of(e: &Entry) -> DResult<(String, Pos)> {
    single(e, ScalarKind::Str, "a quoted string")
}

fn single(e: &Entry, kind: ScalarKind, what: &str) -> DResult<(String, Pos)> {
    match &e.value {
        Value::Scalars(v) if v.len() == 1 && v[0].kind == kind => Ok((v[0].text.clone(), v[0].pos)),
        Value::Scalars(v) => Err(Diagnostic::new(v[0].pos, format!("`{}` expects {what}", e.key))),
        Value::Block(_) => Err(Diagnostic::new(e.pos, format!("`{}` expects {what}, not a block", e.key))),
    }
}

fn numbers(e: &Entry) -> DResult<&[Scalar]> {
    match &e.value {
        Value::Scalars(v) if v[0].kind == ScalarKind::Num => Ok(v),
        Value::Scalars(v) => Err(Diagnostic::new(v[0].pos, format!("`{}` expects numbers", e.key))),
        Value::Block(_) => Err(Diagnostic::new(e.pos, format!("`{}` expects numbers, not a block", e.key))),
    }
}

fn int(t: &str, p: Pos) -> DResult<usize> {
    t.parse::<usize>()
        .map_err(|_| Diagnostic::new(p, format!("expected a non-negative integer, found `{t}`")))
}

fn real(t: &str, p: Pos) -> DResult<f64> {
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Diagnostic::new(p, format!("expected a finite number, found `{t}`"))),
    }
}
