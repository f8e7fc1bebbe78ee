//! Wiring validation and topological ordering.
//!
//! A layer whose single top equals its single bottom runs in place and
//! produces a new version of that blob. A bottom refers to the latest version
//! produced earlier in the file; a bottom naming a blob whose producer comes
//! later in the file refers to that blob's final version.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use super::NetDef;
use crate::error::{Diagnostic, Pos};
use crate::Result;

/// Where a bottom's data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Input(usize),
    Top { layer: usize, top: usize },
}

#[derive(Debug, Clone)]
pub struct Graph {
    /// `sources[layer][bottom]`.
    pub sources: Vec<Vec<Source>>,
    /// Execution order: producers before consumers, file order among ready
    /// layers.
    pub order: Vec<usize>,
}

impl Graph {
    /// Number of bottoms reading `source`, counting repeats.
    pub fn consumers(&self, source: Source) -> usize {
        self.sources.iter().flatten().filter(|&&s| s == source).count()
    }
}

/// Execution order of `def`'s layers (indices into `def.layers`).
pub fn toposort(def: &NetDef) -> Result<Vec<usize>> {
    Ok(def.validate()?.order)
}

pub(crate) fn resolve(def: &NetDef) -> Result<Graph, Diagnostic> {
    let layers = &def.layers;
    let mut names: HashMap<&str, usize> = HashMap::new();
    for (i, l) in layers.iter().enumerate() {
        if let Some(&first) = names.get(l.name.as_str()) {
            return Err(Diagnostic::new(
                l.pos(),
                format!("duplicate layer name `{}` (first defined at {})", l.name, layers[first].pos()),
            ));
        }
        names.insert(&l.name, i);
        check_arity(l)?;
    }

    // Base producer of each blob name; in-place layers only add versions.
    let mut base: HashMap<&str, (Source, Pos)> = HashMap::new();
    let mut claims: Vec<(&str, Source, Pos)> = Vec::new();
    for (k, input) in def.inputs.iter().enumerate() {
        claims.push((&input.name, Source::Input(k), input.pos));
    }
    for (i, l) in layers.iter().enumerate() {
        if !l.is_in_place() {
            for (t, top) in l.tops.iter().enumerate() {
                claims.push((top, Source::Top { layer: i, top: t }, l.top_pos(t)));
            }
        }
    }
    for (name, src, pos) in claims {
        if let Some((prev, _)) = base.get(name) {
            let by = match *prev {
                Source::Input(_) => "an input declaration".to_string(),
                Source::Top { layer, .. } => format!("layer `{}`", layers[layer].name),
            };
            return Err(Diagnostic::new(pos, format!("blob `{name}` is already produced by {by}")));
        }
        base.insert(name, (src, pos));
    }

    // In-place chains per blob name, in file order.
    let mut chains: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, l) in layers.iter().enumerate() {
        if !l.is_in_place() {
            continue;
        }
        let name = l.bottoms[0].as_str();
        match base.get(name) {
            None => return Err(dangling(name, l.bottom_pos(0))),
            Some((Source::Top { layer, .. }, _)) if *layer > i => {
                return Err(Diagnostic::new(
                    l.pos(),
                    format!(
                        "layer `{}` modifies `{name}` in place before its producer `{}`",
                        l.name, layers[*layer].name
                    ),
                ))
            }
            _ => chains.entry(name).or_default().push(i),
        }
    }

    let version_before = |name: &str, i: usize| -> Source {
        let (b, _) = base[name];
        let chain = chains.get(name).map(Vec::as_slice).unwrap_or(&[]);
        let forward = matches!(b, Source::Top { layer, .. } if layer > i);
        let last = if forward {
            chain.last()
        } else {
            chain.iter().rev().find(|&&c| c < i)
        };
        last.map_or(b, |&c| Source::Top { layer: c, top: 0 })
    };

    let mut sources = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let mut row = Vec::with_capacity(l.bottoms.len());
        for (j, b) in l.bottoms.iter().enumerate() {
            if !base.contains_key(b.as_str()) {
                return Err(dangling(b, l.bottom_pos(j)));
            }
            row.push(version_before(b, i));
        }
        sources.push(row);
    }

    // A version overwritten in place must have no other reader.
    for (i, l) in layers.iter().enumerate() {
        if !l.is_in_place() {
            continue;
        }
        let overwritten = sources[i][0];
        for (m, row) in sources.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                if m != i && s == overwritten {
                    return Err(Diagnostic::new(
                        layers[m].bottom_pos(j),
                        format!(
                            "layer `{}` reads `{}` which layer `{}` modifies in place",
                            layers[m].name, l.bottoms[0], l.name
                        ),
                    ));
                }
            }
        }
    }

    let order = kahn(def, &sources)?;
    Ok(Graph { sources, order })
}

fn dangling(name: &str, pos: Pos) -> Diagnostic {
    Diagnostic::new(pos, format!("bottom `{name}` is not produced by any layer or input"))
}

fn check_arity(l: &crate::layers::LayerSpec) -> Result<(), Diagnostic> {
    let a = l.kind.arity();
    let n = l.bottoms.len();
    if n < a.min_bottoms || a.max_bottoms.is_some_and(|m| n > m) {
        let want = match a.max_bottoms {
            Some(m) if m == a.min_bottoms => format!("{m}"),
            Some(m) => format!("{}..{m}", a.min_bottoms),
            None => format!("at least {}", a.min_bottoms),
        };
        return Err(Diagnostic::new(
            l.pos(),
            format!("{} layer `{}` takes {want} bottom(s), got {n}", l.kind, l.name),
        ));
    }
    if l.tops.len() != a.tops {
        return Err(Diagnostic::new(
            l.pos(),
            format!("{} layer `{}` produces {} top(s), got {}", l.kind, l.name, a.tops, l.tops.len()),
        ));
    }
    for (t, top) in l.tops.iter().enumerate() {
        if l.tops[..t].contains(top) {
            return Err(Diagnostic::new(l.top_pos(t), format!("top `{top}` listed twice")));
        }
        if !l.is_in_place() && l.bottoms.contains(top) {
            return Err(Diagnostic::new(
                l.top_pos(t),
                format!("{} layer `{}` cannot run in place on `{top}`", l.kind, l.name),
            ));
        }
    }
    if l.is_in_place() && !l.kind.allows_in_place() {
        return Err(Diagnostic::new(
            l.top_pos(0),
            format!("{} layer `{}` cannot run in place", l.kind, l.name),
        ));
    }
    Ok(())
}

fn kahn(def: &NetDef, sources: &[Vec<Source>]) -> Result<Vec<usize>, Diagnostic> {
    let n = def.layers.len();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, row) in sources.iter().enumerate() {
        for s in row {
            if let Source::Top { layer, .. } = *s {
                indegree[i] += 1;
                succ[layer].push(i);
            }
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    Err(cycle(def, sources, &indegree))
}

/// Describes one cycle among the layers left unordered.
fn cycle(def: &NetDef, sources: &[Vec<Source>], indegree: &[usize]) -> Diagnostic {
    let stuck = |i: usize| indegree[i] > 0;
    // Walk producer links backwards from a stuck layer until one repeats.
    let mut walk = vec![(0..def.layers.len()).find(|&i| stuck(i)).unwrap_or(0)];
    let mut edges: Vec<usize> = Vec::new();
    loop {
        let cur = *walk.last().unwrap_or(&0);
        let Some((j, prev)) = sources[cur].iter().enumerate().find_map(|(j, s)| match *s {
            Source::Top { layer, .. } if stuck(layer) => Some((j, layer)),
            _ => None,
        }) else {
            break;
        };
        edges.push(j);
        if let Some(at) = walk.iter().position(|&w| w == prev) {
            walk.drain(..at);
            edges.drain(..at);
            break;
        }
        walk.push(prev);
    }
    // walk[k] reads bottom edges[k] from walk[k + 1] (wrapping).
    let len = walk.len();
    let mut blobs: Vec<&str> = (0..len).rev().map(|k| def.layers[walk[k]].bottoms[edges[k]].as_str()).collect();
    blobs.push(blobs[0]);
    // Report at the edge that points backwards in the file.
    let k = (0..len)
        .find(|&k| walk[(k + 1) % len] >= walk[k])
        .unwrap_or(0);
    let layer = &def.layers[walk[k]];
    Diagnostic::new(
        layer.bottom_pos(edges[k]),
        format!("cycle through blobs {} (at layer `{}`)", blobs.join(" -> "), layer.name),
    )
}
