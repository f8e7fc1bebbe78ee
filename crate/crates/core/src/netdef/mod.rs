//! The `.net` and `.solver` definition languages.
//!
//! Both are sequences of `key: value` and `key { ... }` entries. Strings are
//! double-quoted, numbers and keywords bare, `#` starts a line comment.
//!
//! ```text
//! name: "tiny"
//! input { name: "x" shape: 1 1 1 2 }
//! layer {
//!   name: "act"
//!   kind: relu
//!   bottom: "x"
//!   top: "y"
//! }
//! ```
//!
//! Unknown keys are errors. Every error carries a line and column.

mod fields;
mod graph;
mod lexer;
mod solver;
mod tree;
mod write;

use std::path::Path;

pub use graph::{toposort, Graph, Source};
pub use solver::{parse_solverdef, LrPolicy, SolverDef};

use crate::error::{Diagnostic, Pos};
use crate::layers::*;
use crate::tensor::{Filler, Shape4};
use crate::{Error, Result};
use fields::{block_of, string_of, DResult, Fields};
use tree::{parse_tree, Entry};

/// A named blob supplied by the caller instead of a data layer.
#[derive(Debug, Clone)]
pub struct InputDecl {
    pub name: String,
    pub shape: Shape4,
    /// Multiplier applied to raw pixel bytes when images are fed to this
    /// input from an IDX file.
    pub scale: f64,
    pub pos: Pos,
}

impl PartialEq for InputDecl {
    fn eq(&self, o: &Self) -> bool {
        self.name == o.name && self.shape == o.shape && self.scale == o.scale
    }
}

impl InputDecl {
    pub fn new(name: impl Into<String>, shape: Shape4) -> Self {
        InputDecl {
            name: name.into(),
            shape,
            scale: 1.0,
            pos: Pos::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetDef {
    pub name: String,
    pub inputs: Vec<InputDecl>,
    /// Layers in file order.
    pub layers: Vec<LayerSpec>,
}

impl NetDef {
    /// Checks names, arities and wiring, and orders the layers.
    pub fn validate(&self) -> Result<Graph> {
        graph::resolve(self).map_err(Error::Parse)
    }

    /// Canonical text form: 2-space indentation, every field spelled out in
    /// declaration order, LF line endings.
    pub fn serialize(&self) -> String {
        write::netdef(self)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// The data layer's parameters, if the net has one.
    pub fn data_param(&self) -> Option<&DataParam> {
        self.layers.iter().find_map(|l| match &l.params {
            LayerParams::Data(p) => Some(p),
            _ => None,
        })
    }
}

pub fn parse_netdef(src: &str) -> Result<NetDef> {
    convert(src).map_err(Error::Parse)
}

/// Like [`parse_netdef`] for raw bytes; invalid UTF-8 is a positioned error.
pub fn parse_netdef_bytes(src: &[u8]) -> Result<NetDef> {
    parse_netdef(tree::decode(src).map_err(Error::Parse)?)
}

pub fn load_netdef(path: &Path) -> Result<NetDef> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_netdef_bytes(&bytes)
}

fn convert(src: &str) -> DResult<NetDef> {
    let tree = parse_tree(src)?;
    let top = Fields::new(&tree, Pos { line: 1, col: 1 }, "net definition");
    top.check(&["name"], &["input", "layer"])?;
    let mut def = NetDef {
        name: top.string("name")?.map(|(s, _)| s).unwrap_or_default(),
        ..NetDef::default()
    };
    for e in &tree {
        match e.key.as_str() {
            "input" => def.inputs.push(input_decl(e)?),
            "layer" => def.layers.push(layer(e)?),
            _ => {}
        }
    }
    graph::resolve(&def)?;
    Ok(def)
}

fn input_decl(e: &Entry) -> DResult<InputDecl> {
    let f = Fields::new(block_of(e)?, e.pos, "input");
    f.check(&["name", "shape", "scale"], &[])?;
    let (name, _) = f.string("name")?.ok_or_else(|| f.missing("name"))?;
    let (dims, pos) = f.usizes("shape")?.ok_or_else(|| f.missing("shape"))?;
    let [n, c, h, w] = dims[..] else {
        return Err(Diagnostic::new(pos, format!("`shape` needs 4 dimensions, got {}", dims.len())));
    };
    Ok(InputDecl {
        name,
        shape: Shape4::new(n, c, h, w),
        scale: f.real("scale")?.unwrap_or(1.0),
        pos: e.pos,
    })
}

fn layer(e: &Entry) -> DResult<LayerSpec> {
    let f = Fields::new(block_of(e)?, e.pos, "layer");
    let (kind_word, kind_pos) = f.ident("kind")?.ok_or_else(|| f.missing("kind"))?;
    let kind = LayerKind::from_keyword(&kind_word)
        .ok_or_else(|| Diagnostic::new(kind_pos, format!("unknown layer kind `{kind_word}`")))?;
    let block = kind.param_block();
    let mut single = vec!["name", "kind"];
    single.extend(block);
    let f = Fields {
        what: format!("{kind} layer"),
        ..f
    };
    f.check(&single, &["bottom", "top"])?;
    let (name, _) = f.string("name")?.ok_or_else(|| f.missing("name"))?;
    if name.is_empty() {
        return Err(Diagnostic::new(e.pos, "layer name must not be empty"));
    }
    let mut origin = Origin {
        layer: e.pos,
        ..Origin::default()
    };
    let mut bottoms = Vec::new();
    for b in f.all("bottom") {
        let (s, p) = string_of(b)?;
        bottoms.push(s);
        origin.bottoms.push(p);
    }
    let mut tops = Vec::new();
    for t in f.all("top") {
        let (s, p) = string_of(t)?;
        tops.push(s);
        origin.tops.push(p);
    }
    let params_block = match block {
        Some(key) => f.block(key)?.map(|(b, p)| Fields::new(b, p, format!("{key} block"))),
        None => None,
    };
    let needs = |key: &str| f.missing(key);
    let params = match (kind, params_block) {
        (LayerKind::Data, Some(b)) => LayerParams::Data(data_param(&b)?),
        (LayerKind::Convolution, Some(b)) => LayerParams::Conv(conv_param(&b)?),
        (LayerKind::Pooling, Some(b)) => LayerParams::Pool(pool_param(&b)?),
        (LayerKind::InnerProduct, Some(b)) => LayerParams::InnerProduct(ip_param(&b)?),
        (LayerKind::LRN, Some(b)) => LayerParams::Lrn(lrn_param(&b)?),
        (LayerKind::Eltwise, Some(b)) => LayerParams::Eltwise(eltwise_param(&b)?),
        (LayerKind::LRN | LayerKind::Eltwise, None) => LayerParams::None,
        (_, None) => match block {
            Some(key) => return Err(needs(key)),
            None => LayerParams::None,
        },
        (_, Some(_)) => unreachable!("kinds without a block reject it in check()"),
    };
    Ok(LayerSpec {
        name,
        kind,
        bottoms,
        tops,
        params,
        origin,
    })
}

/// Reads `key`, or `key_h` and `key_w`, falling back to `default`.
fn pair(f: &Fields, key: &str, default: Option<usize>) -> DResult<(usize, usize)> {
    let both = f.usize(key)?;
    let h = f.usize(&format!("{key}_h"))?;
    let w = f.usize(&format!("{key}_w"))?;
    if both.is_some() && (h.is_some() || w.is_some()) {
        return Err(Diagnostic::new(
            f.get(key).map_or(f.pos, |e| e.pos),
            format!("give either `{key}` or `{key}_h`/`{key}_w`, not both"),
        ));
    }
    let h = h.or(both).or(default).ok_or_else(|| f.missing(key))?;
    let w = w.or(both).or(default).ok_or_else(|| f.missing(key))?;
    Ok((h, w))
}

const PAIR_KEYS: [&str; 9] = [
    "kernel", "kernel_h", "kernel_w", "stride", "stride_h", "stride_w", "pad", "pad_h", "pad_w",
];

fn filler(f: &Fields, key: &str, default: Filler) -> DResult<Filler> {
    let Some((entries, pos)) = f.block(key)? else {
        return Ok(default);
    };
    let b = Fields::new(entries, pos, key);
    let (kind, kind_pos) = b.ident("kind")?.ok_or_else(|| b.missing("kind"))?;
    let filler = match kind.as_str() {
        "constant" => {
            b.check(&["kind", "value"], &[])?;
            Filler::Constant {
                value: b.real("value")?.unwrap_or(0.0),
            }
        }
        "uniform" => {
            b.check(&["kind", "min", "max"], &[])?;
            Filler::Uniform {
                min: b.real("min")?.unwrap_or(0.0),
                max: b.real("max")?.unwrap_or(1.0),
            }
        }
        "gaussian" => {
            b.check(&["kind", "mean", "std"], &[])?;
            Filler::Gaussian {
                mean: b.real("mean")?.unwrap_or(0.0),
                std: b.real("std")?.unwrap_or(1.0),
            }
        }
        "xavier" => {
            b.check(&["kind"], &[])?;
            Filler::Xavier
        }
        other => return Err(Diagnostic::new(kind_pos, format!("unknown filler kind `{other}`"))),
    };
    filler.validate().map_err(|e| Diagnostic::new(pos, e.to_string()))?;
    Ok(filler)
}

fn conv_param(f: &Fields) -> DResult<ConvParam> {
    let mut keys = vec!["num_output", "bias_term", "weight_filler", "bias_filler"];
    keys.extend(PAIR_KEYS);
    f.check(&keys, &[])?;
    let (kernel_h, kernel_w) = pair(f, "kernel", None)?;
    let (stride_h, stride_w) = pair(f, "stride", Some(1))?;
    let (pad_h, pad_w) = pair(f, "pad", Some(0))?;
    Ok(ConvParam {
        num_output: f.usize("num_output")?.ok_or_else(|| f.missing("num_output"))?,
        kernel_h,
        kernel_w,
        stride_h,
        stride_w,
        pad_h,
        pad_w,
        bias_term: f.bool("bias_term")?.unwrap_or(true),
        weight_filler: filler(f, "weight_filler", Filler::Xavier)?,
        bias_filler: filler(f, "bias_filler", Filler::Constant { value: 0.0 })?,
    })
}

fn pool_param(f: &Fields) -> DResult<PoolParam> {
    let mut keys = vec!["method"];
    keys.extend(PAIR_KEYS);
    f.check(&keys, &[])?;
    let method = match f.ident("method")? {
        None => PoolMethod::Max,
        Some((m, _)) if m == "max" => PoolMethod::Max,
        Some((m, _)) if m == "average" => PoolMethod::Average,
        Some((m, p)) => return Err(Diagnostic::new(p, format!("unknown pooling method `{m}`"))),
    };
    let (kernel_h, kernel_w) = pair(f, "kernel", None)?;
    let (stride_h, stride_w) = pair(f, "stride", Some(1))?;
    let (pad_h, pad_w) = pair(f, "pad", Some(0))?;
    Ok(PoolParam {
        method,
        kernel_h,
        kernel_w,
        stride_h,
        stride_w,
        pad_h,
        pad_w,
    })
}

fn ip_param(f: &Fields) -> DResult<InnerProductParam> {
    f.check(&["num_output", "bias_term", "weight_filler", "bias_filler"], &[])?;
    Ok(InnerProductParam {
        num_output: f.usize("num_output")?.ok_or_else(|| f.missing("num_output"))?,
        bias_term: f.bool("bias_term")?.unwrap_or(true),
        weight_filler: filler(f, "weight_filler", Filler::Xavier)?,
        bias_filler: filler(f, "bias_filler", Filler::Constant { value: 0.0 })?,
    })
}

fn lrn_param(f: &Fields) -> DResult<LrnParam> {
    f.check(&["local_size", "alpha", "beta", "k"], &[])?;
    let d = LrnParam::default();
    Ok(LrnParam {
        local_size: f.usize("local_size")?.unwrap_or(d.local_size),
        alpha: f.real("alpha")?.unwrap_or(d.alpha),
        beta: f.real("beta")?.unwrap_or(d.beta),
        k: f.real("k")?.unwrap_or(d.k),
    })
}

fn eltwise_param(f: &Fields) -> DResult<EltwiseParam> {
    f.check(&["op"], &["coeff"])?;
    let op = match f.ident("op")? {
        None => EltwiseOp::Sum,
        Some((o, p)) => match o.as_str() {
            "sum" => EltwiseOp::Sum,
            "product" => EltwiseOp::Product,
            "max" => EltwiseOp::Max,
            _ => return Err(Diagnostic::new(p, format!("unknown eltwise op `{o}`"))),
        },
    };
    Ok(EltwiseParam {
        op,
        coeffs: f.reals("coeff")?,
    })
}

fn data_param(f: &Fields) -> DResult<DataParam> {
    f.check(
        &[
            "source",
            "label_source",
            "test_source",
            "test_label_source",
            "batch_size",
            "test_batch_size",
            "channels",
            "height",
            "width",
            "scale",
            "mean_file",
            "shuffle",
        ],
        &[],
    )?;
    let req = |k: &str| f.usize(k).and_then(|v| v.ok_or_else(|| f.missing(k)));
    let batch_size = req("batch_size")?;
    Ok(DataParam {
        batch_size,
        test_batch_size: f.usize("test_batch_size")?.unwrap_or(batch_size),
        channels: req("channels")?,
        height: req("height")?,
        width: req("width")?,
        source: f.string("source")?.ok_or_else(|| f.missing("source"))?.0,
        label_source: f.string("label_source")?.ok_or_else(|| f.missing("label_source"))?.0,
        test_source: f.string("test_source")?.map(|s| s.0),
        test_label_source: f.string("test_label_source")?.map(|s| s.0),
        scale: f.real("scale")?.unwrap_or(1.0),
        mean_file: f.string("mean_file")?.map(|s| s.0),
        shuffle: f.bool("shuffle")?.unwrap_or(true),
    })
}
