//! Declarative layer configuration, as produced by the `.net` parser.

use std::fmt;

use crate::error::Pos;
use crate::tensor::Filler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Data,
    Convolution,
    Pooling,
    InnerProduct,
    ReLU,
    Sigmoid,
    LRN,
    Eltwise,
    SoftmaxLoss,
    HingeLoss,
    Accuracy,
    /// Internal fan-out copy inserted by the net builder; not part of the
    /// definition language.
    Split,
}

/// Allowed bottom/top counts for a kind. `None` as the max means unbounded.
#[derive(Debug, Clone, Copy)]
pub struct Arity {
    pub min_bottoms: usize,
    pub max_bottoms: Option<usize>,
    pub tops: usize,
}

impl LayerKind {
    pub const PARSEABLE: &'static [LayerKind] = &[
        LayerKind::Data,
        LayerKind::Convolution,
        LayerKind::Pooling,
        LayerKind::InnerProduct,
        LayerKind::ReLU,
        LayerKind::Sigmoid,
        LayerKind::LRN,
        LayerKind::Eltwise,
        LayerKind::SoftmaxLoss,
        LayerKind::HingeLoss,
        LayerKind::Accuracy,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            LayerKind::Data => "data",
            LayerKind::Convolution => "convolution",
            LayerKind::Pooling => "pooling",
            LayerKind::InnerProduct => "inner_product",
            LayerKind::ReLU => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::LRN => "lrn",
            LayerKind::Eltwise => "eltwise",
            LayerKind::SoftmaxLoss => "softmax_loss",
            LayerKind::HingeLoss => "hinge_loss",
            LayerKind::Accuracy => "accuracy",
            LayerKind::Split => "split",
        }
    }

    pub fn from_keyword(s: &str) -> Option<LayerKind> {
        LayerKind::PARSEABLE.iter().copied().find(|k| k.keyword() == s)
    }

    pub fn arity(self) -> Arity {
        let (min_bottoms, max_bottoms, tops) = match self {
            LayerKind::Data => (0, Some(0), 2),
            LayerKind::Eltwise => (2, None, 1),
            LayerKind::SoftmaxLoss | LayerKind::HingeLoss | LayerKind::Accuracy => (2, Some(2), 1),
            _ => (1, Some(1), 1),
        };
        Arity {
            min_bottoms,
            max_bottoms,
            tops,
        }
    }

    /// Name of the nested parameter block this kind accepts, if any.
    pub fn param_block(self) -> Option<&'static str> {
        match self {
            LayerKind::Data => Some("data"),
            LayerKind::Convolution => Some("conv"),
            LayerKind::Pooling => Some("pool"),
            LayerKind::InnerProduct => Some("inner_product"),
            LayerKind::LRN => Some("lrn"),
            LayerKind::Eltwise => Some("eltwise"),
            _ => None,
        }
    }

    pub fn allows_in_place(self) -> bool {
        matches!(self, LayerKind::ReLU | LayerKind::Sigmoid)
    }

    pub fn is_loss(self) -> bool {
        matches!(self, LayerKind::SoftmaxLoss | LayerKind::HingeLoss)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParam {
    pub num_output: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub bias_term: bool,
    pub weight_filler: Filler,
    pub bias_filler: Filler,
}

impl ConvParam {
    pub fn square(num_output: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvParam {
            num_output,
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
            bias_term: true,
            weight_filler: Filler::Xavier,
            bias_filler: Filler::Constant { value: 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMethod {
    Max,
    Average,
}

impl PoolMethod {
    pub fn keyword(self) -> &'static str {
        match self {
            PoolMethod::Max => "max",
            PoolMethod::Average => "average",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolParam {
    pub method: PoolMethod,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl PoolParam {
    pub fn square(method: PoolMethod, kernel: usize, stride: usize, pad: usize) -> Self {
        PoolParam {
            method,
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerProductParam {
    pub num_output: usize,
    pub bias_term: bool,
    pub weight_filler: Filler,
    pub bias_filler: Filler,
}

impl InnerProductParam {
    pub fn new(num_output: usize) -> Self {
        InnerProductParam {
            num_output,
            bias_term: true,
            weight_filler: Filler::Xavier,
            bias_filler: Filler::Constant { value: 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrnParam {
    pub local_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
}

impl Default for LrnParam {
    fn default() -> Self {
        LrnParam {
            local_size: 5,
            alpha: 1e-4,
            beta: 0.75,
            k: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EltwiseOp {
    #[default]
    Sum,
    Product,
    Max,
}

impl EltwiseOp {
    pub fn keyword(self) -> &'static str {
        match self {
            EltwiseOp::Sum => "sum",
            EltwiseOp::Product => "product",
            EltwiseOp::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EltwiseParam {
    pub op: EltwiseOp,
    /// Per-bottom coefficients for `sum`; empty means all ones.
    pub coeffs: Vec<f64>,
}

/// Where a data layer reads its batches from. Paths are resolved relative to
/// the definition file by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct DataParam {
    pub batch_size: usize,
    /// Batch size of the test net built from the same definition.
    pub test_batch_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub source: String,
    pub label_source: String,
    pub test_source: Option<String>,
    pub test_label_source: Option<String>,
    pub scale: f64,
    pub mean_file: Option<String>,
    pub shuffle: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Data(DataParam),
    Conv(ConvParam),
    Pool(PoolParam),
    InnerProduct(InnerProductParam),
    Lrn(LrnParam),
    Eltwise(EltwiseParam),
}

/// Source positions of a parsed layer. Ignored by equality so that a
/// re-parsed definition compares equal to the original.
#[derive(Debug, Clone, Default)]
pub struct Origin {
    pub layer: Pos,
    pub bottoms: Vec<Pos>,
    pub tops: Vec<Pos>,
}

impl PartialEq for Origin {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub bottoms: Vec<String>,
    pub tops: Vec<String>,
    pub params: LayerParams,
    pub origin: Origin,
}

impl LayerSpec {
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        bottoms: &[&str],
        tops: &[&str],
        params: LayerParams,
    ) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            bottoms: bottoms.iter().map(|s| s.to_string()).collect(),
            tops: tops.iter().map(|s| s.to_string()).collect(),
            params,
            origin: Origin::default(),
        }
    }

    pub fn pos(&self) -> Pos {
        self.origin.layer
    }

    pub fn bottom_pos(&self, i: usize) -> Pos {
        self.origin.bottoms.get(i).copied().unwrap_or(self.origin.layer)
    }

    pub fn top_pos(&self, i: usize) -> Pos {
        self.origin.tops.get(i).copied().unwrap_or(self.origin.layer)
    }

    pub fn is_in_place(&self) -> bool {
        self.bottoms.len() == 1 && self.tops.len() == 1 && self.bottoms[0] == self.tops[0]
    }
}
