//! Executable networks.
//!
//! [`Net::build`] instantiates a [`NetDef`]: it orders the layers, inserts a
//! split wherever one blob feeds several bottoms, infers every shape and
//! allocates every blob and parameter once. `forward` and `backward` then run
//! without allocating blob storage.

pub mod gradcheck;
mod weights;

use std::collections::HashMap;
use std::hash::Hasher;

pub(crate) use weights::Reader;
pub use weights::{WeightEntry, WeightsFile, SOLVER_MAGIC, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::backend::Mode;
use crate::layers::{accuracy, create_layer, Layer, LayerKind, LayerParams, LayerSpec, Split};
use crate::netdef::{NetDef, Source};
use crate::tensor::{Blob, Shape4};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// Replaces the batch size of every input declaration and data layer.
    pub batch: Option<usize>,
    /// Drives every parameter filler.
    pub seed: u64,
}

impl BuildOptions {
    pub fn seed(seed: u64) -> Self {
        BuildOptions { batch: None, seed }
    }
}

/// Parameter-filler seed of one layer: a mix of the net seed and the layer
/// name, so that renaming or inserting other layers leaves it unchanged.
pub fn layer_seed(net_seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = net_seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Node<T: Real> {
    name: String,
    kind: LayerKind,
    layer: Box<dyn Layer<T>>,
    bottoms: Vec<usize>,
    tops: Vec<usize>,
    in_place: bool,
    propagate: Vec<bool>,
    /// False for splits inserted by the builder.
    declared: bool,
}

/// What `copy_trained_layers` did, by layer name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    /// Layers with parameters that the weights file does not mention.
    pub initialized: Vec<String>,
    /// Layers whose shapes conflicted (permissive mode only).
    pub skipped: Vec<String>,
}

pub struct Net<T: Real = f32> {
    def: NetDef,
    options: BuildOptions,
    nodes: Vec<Node<T>>,
    blobs: Vec<Blob<T>>,
    names: Vec<String>,
    /// Slots written by the caller: input declarations, then data-layer tops.
    feeds: Vec<usize>,
    fed: Vec<bool>,
    outputs: Vec<usize>,
    losses: Vec<usize>,
    /// Scores and labels slots used for accuracy.
    scored: Option<(usize, usize)>,
    data_tops: Option<(usize, usize)>,
    forwarded: bool,
    mode: Mode,
}

impl<T: Real> Net<T> {
    pub fn build(def: &NetDef, options: &BuildOptions) -> Result<Self> {
        let graph = def.validate()?;
        let mut blobs: Vec<Blob<T>> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        let mut shapes: Vec<Shape4> = Vec::new();
        let mut slot_of: HashMap<Source, usize> = HashMap::new();
        let mut feeds = Vec::new();

        let new_slot = |name: &str, shape: Shape4, names: &mut Vec<String>, shapes: &mut Vec<Shape4>| {
            names.push(name.to_string());
            shapes.push(shape);
            names.len() - 1
        };

        for (k, input) in def.inputs.iter().enumerate() {
            let mut shape = input.shape;
            if let Some(b) = options.batch {
                shape.num = b;
            }
            if shape.is_empty() {
                return Err(Error::Shape(format!("input `{}` has an empty shape {shape}", input.name)));
            }
            let slot = new_slot(&input.name, shape, &mut names, &mut shapes);
            slot_of.insert(Source::Input(k), slot);
            feeds.push(slot);
        }

        // Fan-out copies: each multiply-read source gets a queue of split tops.
        let mut split_queue: HashMap<Source, (Vec<usize>, usize)> = HashMap::new();
        let mut nodes: Vec<Node<T>> = Vec::new();
        let mut needs_grad: Vec<bool> = vec![true; names.len()];

        let add_splits = |source: Source,
                          split_queue: &mut HashMap<Source, (Vec<usize>, usize)>,
                              nodes: &mut Vec<Node<T>>,
                              names: &mut Vec<String>,
                              shapes: &mut Vec<Shape4>,
                              needs_grad: &mut Vec<bool>,
                              slot_of: &HashMap<Source, usize>|
         -> Result<()> {
            let readers = graph.consumers(source);
            if readers < 2 {
                return Ok(());
            }
            let src = slot_of[&source];
            let base = names[src].clone();
            let mut layer: Box<dyn Layer<T>> = Box::new(Split::new(readers));
            let top_shapes = layer.setup(&[shapes[src]])?;
            let mut tops = Vec::with_capacity(readers);
            for (i, s) in top_shapes.into_iter().enumerate() {
                tops.push(new_slot(&format!("{base}_split_{i}"), s, names, shapes));
                needs_grad.push(needs_grad[src]);
            }
            nodes.push(Node {
                name: format!("{base}_split"),
                kind: LayerKind::Split,
                layer,
                bottoms: vec![src],
                propagate: vec![needs_grad[src]],
                tops: tops.clone(),
                in_place: false,
                declared: false,
            });
            split_queue.insert(source, (tops, 0));
            Ok(())
        };

        for k in 0..def.inputs.len() {
            add_splits(Source::Input(k), &mut split_queue, &mut nodes, &mut names, &mut shapes, &mut needs_grad, &slot_of)?;
        }

        let mut data_tops = None;
        for &i in &graph.order {
            let spec = &def.layers[i];
            let mut spec_params = spec.params.clone();
            if let (LayerParams::Data(p), Some(b)) = (&mut spec_params, options.batch) {
                p.batch_size = b;
            }
            let spec_local = LayerSpec {
                params: spec_params,
                ..spec.clone()
            };
            let mut layer = create_layer::<T>(&spec_local, layer_seed(options.seed, &spec.name))
                .map_err(|e| e.in_layer(&spec.name))?;

            let mut bottoms = Vec::with_capacity(spec.bottoms.len());
            for source in &graph.sources[i] {
                let slot = match split_queue.get_mut(source) {
                    Some((tops, next)) => {
                        *next += 1;
                        tops[*next - 1]
                    }
                    None => slot_of[source],
                };
                bottoms.push(slot);
            }
            let bottom_shapes: Vec<Shape4> = bottoms.iter().map(|&b| shapes[b]).collect();
            let top_shapes = layer.setup(&bottom_shapes).map_err(|e| e.in_layer(&spec.name))?;
            let in_place = spec.is_in_place();
            let has_params = !layer.params().is_empty();

            let mut propagate: Vec<bool> = bottoms.iter().map(|&b| needs_grad[b]).collect();
            if matches!(spec.kind, LayerKind::SoftmaxLoss | LayerKind::HingeLoss | LayerKind::Accuracy) {
                propagate[1] = false;
            }
            if spec.kind == LayerKind::Accuracy {
                propagate[0] = false;
            }
            let grad_out = has_params || propagate.iter().any(|&p| p);

            let mut tops = Vec::with_capacity(top_shapes.len());
            for (t, shape) in top_shapes.into_iter().enumerate() {
                if shape.is_empty() {
                    return Err(Error::layer(&spec.name, format!("produces an empty blob {shape}")));
                }
                let slot = if in_place {
                    let slot = bottoms[0];
                    if shapes[slot] != shape {
                        return Err(Error::layer(&spec.name, "in-place layer changes the blob shape"));
                    }
                    slot
                } else {
                    let slot = new_slot(&spec.tops[t], shape, &mut names, &mut shapes);
                    needs_grad.push(grad_out && spec.kind != LayerKind::Data);
                    slot
                };
                slot_of.insert(Source::Top { layer: i, top: t }, slot);
                tops.push(slot);
            }
            if spec.kind == LayerKind::Data {
                data_tops = Some((tops[0], tops[1]));
                feeds.extend(&tops);
            }
            nodes.push(Node {
                name: spec.name.clone(),
                kind: spec.kind,
                layer,
                bottoms,
                tops,
                in_place,
                propagate,
                declared: true,
            });
            for t in 0..spec.tops.len() {
                let source = Source::Top { layer: i, top: t };
                if !in_place || graph.consumers(source) > 1 {
                    add_splits(source, &mut split_queue, &mut nodes, &mut names, &mut shapes, &mut needs_grad, &slot_of)?;
                }
            }
        }

        let mut consumed = vec![false; names.len()];
        for n in &nodes {
            for &b in &n.bottoms {
                consumed[b] = true;
            }
        }
        let losses: Vec<usize> = nodes.iter().filter(|n| n.kind.is_loss()).map(|n| n.tops[0]).collect();
        let scored = nodes
            .iter()
            .find(|n| n.kind.is_loss())
            .or_else(|| nodes.iter().find(|n| n.kind == LayerKind::Accuracy))
            .map(|n| (n.bottoms[0], n.bottoms[1]));
        // A version overwritten in place is read only by the overwriting
        // layer, so a slot is an output exactly when its final version is
        // never read after being produced.
        let mut outputs = Vec::new();
        for slot in 0..names.len() {
            let last_writer = nodes.iter().rposition(|n| n.tops.contains(&slot));
            let read_after = match last_writer {
                Some(w) => nodes[w + 1..].iter().any(|n| n.bottoms.contains(&slot)),
                None => consumed[slot],
            };
            if !read_after {
                outputs.push(slot);
            }
        }

        for shape in &shapes {
            blobs.push(Blob::new(*shape)?);
        }
        let train = !losses.is_empty();
        for b in &mut blobs {
            b.data_mut();
            if train {
                b.diff_mut();
            }
        }
        for n in &mut nodes {
            for p in n.layer.params_mut() {
                p.data_mut();
                p.diff_mut();
            }
        }
        let fed = vec![false; feeds.len()];
        Ok(Net {
            def: def.clone(),
            options: options.clone(),
            nodes,
            blobs,
            names,
            feeds,
            fed,
            outputs,
            losses,
            scored,
            data_tops,
            forwarded: false,
            mode: Mode::Cpu,
        })
    }

    pub fn def(&self) -> &NetDef {
        &self.def
    }

    pub fn options(&self) -> &BuildOptions {
        &self.options
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn has_loss(&self) -> bool {
        !self.losses.is_empty()
    }

    /// Blob names in allocation order, including builder-inserted splits.
    pub fn blob_names(&self) -> Vec<&str> {
        self.names.iter().map(String::as_str).collect()
    }

    fn slot(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownBlob {
            name: name.to_string(),
            available: self.names.clone(),
        })
    }

    pub fn blob(&self, name: &str) -> Result<&Blob<T>> {
        Ok(&self.blobs[self.slot(name)?])
    }

    /// Writable access to a blob the caller must populate (an input
    /// declaration or a data-layer top). Marks it populated.
    pub fn input_mut(&mut self, name: &str) -> Result<&mut Blob<T>> {
        let slot = self.slot(name)?;
        let k = self
            .feeds
            .iter()
            .position(|&f| f == slot)
            .ok_or_else(|| Error::State(format!("`{name}` is computed by the net, not an input")))?;
        self.fed[k] = true;
        Ok(&mut self.blobs[slot])
    }

    pub fn set_input(&mut self, name: &str, values: &[T]) -> Result<()> {
        self.input_mut(name)?.set_data(values)
    }

    /// Names of the blobs the caller populates.
    pub fn input_names(&self) -> Vec<&str> {
        self.feeds.iter().map(|&s| self.names[s].as_str()).collect()
    }

    /// Shapes of the data layer's `(images, labels)` tops, if any.
    pub fn data_shapes(&self) -> Option<(Shape4, Shape4)> {
        self.data_tops.map(|(i, l)| (self.blobs[i].shape(), self.blobs[l].shape()))
    }

    /// Copies a batch into the data layer's tops.
    pub fn feed_data(&mut self, images: &[T], labels: &[T]) -> Result<()> {
        let (i, l) = self
            .data_tops
            .ok_or_else(|| Error::State("net has no data layer".into()))?;
        self.blobs[i].set_data(images)?;
        self.blobs[l].set_data(labels)?;
        for (k, &f) in self.feeds.iter().enumerate() {
            if f == i || f == l {
                self.fed[k] = true;
            }
        }
        Ok(())
    }

    /// Blobs that no layer reads: the net's results.
    pub fn outputs(&self) -> Vec<(&str, &Blob<T>)> {
        self.outputs.iter().map(|&s| (self.names[s].as_str(), &self.blobs[s])).collect()
    }

    /// Runs every layer in order and returns the summed loss (0 without loss
    /// layers).
    pub fn forward(&mut self) -> Result<T> {
        if let Some(k) = self.fed.iter().position(|f| !f) {
            return Err(Error::State(format!("input `{}` was never populated", self.names[self.feeds[k]])));
        }
        for i in 0..self.nodes.len() {
            self.forward_layer(i)?;
        }
        Ok(self.loss())
    }

    /// Summed loss of the last forward pass.
    pub fn loss(&self) -> T {
        self.losses.iter().map(|&s| self.blobs[s].data()[0]).sum()
    }

    /// Accuracy of the scores feeding the first loss (or accuracy) layer in
    /// the last forward pass.
    pub fn accuracy(&self) -> Option<Result<f64>> {
        self.scored.map(|(s, l)| accuracy(&self.blobs[s], &self.blobs[l]))
    }

    pub fn num_layers(&self) -> usize {
        self.nodes.len()
    }

    pub fn layer_name(&self, i: usize) -> &str {
        &self.nodes[i].name
    }

    pub fn layer_kind(&self, i: usize) -> LayerKind {
        self.nodes[i].kind
    }

    /// False for layers the builder inserted.
    pub fn layer_is_declared(&self, i: usize) -> bool {
        self.nodes[i].declared
    }

    pub fn forward_layer(&mut self, i: usize) -> Result<()> {
        let backend = self.mode.backend::<T>();
        let node = &mut self.nodes[i];
        let r = if node.in_place {
            node.layer.forward_in_place(backend, &mut self.blobs[node.tops[0]])
        } else {
            let mut tops: Vec<Blob<T>> = node.tops.iter().map(|&t| std::mem::take(&mut self.blobs[t])).collect();
            let r = {
                let bottoms: Vec<&Blob<T>> = node.bottoms.iter().map(|&b| &self.blobs[b]).collect();
                let mut top_refs: Vec<&mut Blob<T>> = tops.iter_mut().collect();
                node.layer.forward(backend, &bottoms, &mut top_refs)
            };
            for (&t, blob) in node.tops.iter().zip(tops) {
                self.blobs[t] = blob;
            }
            r
        };
        r.map_err(|e| e.in_layer(&node.name))?;
        if i + 1 == self.nodes.len() {
            self.forwarded = true;
        }
        Ok(())
    }

    /// Zeroes every blob diff and seeds the loss diffs with 1. Part of
    /// [`Net::backward`]; public for per-layer timing.
    pub fn prepare_backward(&mut self) -> Result<()> {
        if !self.forwarded {
            return Err(Error::State("backward called before forward".into()));
        }
        if self.losses.is_empty() {
            return Err(Error::State("net has no loss layer to differentiate".into()));
        }
        for b in &mut self.blobs {
            b.zero_diff();
        }
        for &s in &self.losses {
            self.blobs[s].diff_mut()[0] = T::one();
        }
        Ok(())
    }

    pub fn backward_layer(&mut self, i: usize) -> Result<()> {
        let backend = self.mode.backend::<T>();
        let node = &mut self.nodes[i];
        if !node.propagate.iter().any(|&p| p) && node.layer.params().is_empty() {
            return Ok(());
        }
        let r = if node.in_place {
            node.layer.backward_in_place(backend, &mut self.blobs[node.tops[0]])
        } else {
            let mut bottoms: Vec<Blob<T>> =
                node.bottoms.iter().map(|&b| std::mem::take(&mut self.blobs[b])).collect();
            let r = {
                let tops: Vec<&Blob<T>> = node.tops.iter().map(|&t| &self.blobs[t]).collect();
                let mut bottom_refs: Vec<&mut Blob<T>> = bottoms.iter_mut().collect();
                node.layer.backward(backend, &tops, &node.propagate, &mut bottom_refs)
            };
            for (&b, blob) in node.bottoms.iter().zip(bottoms) {
                self.blobs[b] = blob;
            }
            r
        };
        r.map_err(|e| e.in_layer(&node.name))
    }

    /// Back-propagates from the loss. Parameter diffs ACCUMULATE; zeroing
    /// them is the caller's job (see [`Net::zero_param_diffs`]).
    pub fn backward(&mut self) -> Result<()> {
        self.prepare_backward()?;
        for i in (0..self.nodes.len()).rev() {
            self.backward_layer(i)?;
        }
        Ok(())
    }

    pub fn zero_param_diffs(&mut self) {
        for n in &mut self.nodes {
            for p in n.layer.params_mut() {
                p.zero_diff();
            }
        }
    }

    /// Parameter blobs in layer order, weights before bias.
    pub fn params(&self) -> Vec<&Blob<T>> {
        self.nodes.iter().flat_map(|n| n.layer.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Blob<T>> {
        self.nodes.iter_mut().flat_map(|n| n.layer.params_mut().iter_mut()).collect()
    }

    /// `(layer name, blob index)` of each entry of [`Net::params`].
    pub fn param_ids(&self) -> Vec<(&str, usize)> {
        self.nodes
            .iter()
            .flat_map(|n| (0..n.layer.params().len()).map(move |k| (n.name.as_str(), k)))
            .collect()
    }

    /// Current parameters as a weights file.
    pub fn weights(&self) -> WeightsFile {
        let mut entries = Vec::new();
        for n in &self.nodes {
            for (k, p) in n.layer.params().iter().enumerate() {
                entries.push(WeightEntry {
                    layer: n.name.clone(),
                    index: k as u16,
                    shape: p.shape(),
                    data: p.data().iter().map(|&v| v.to_f32()).collect(),
                });
            }
        }
        WeightsFile { entries }
    }

    pub fn save_weights(&self, path: &std::path::Path) -> Result<()> {
        self.weights().save(path)
    }

    /// Replaces every parameter with the file's values. The file must
    /// describe exactly this net's parameters; on error nothing changes.
    pub fn load_weights(&mut self, w: &WeightsFile) -> Result<()> {
        let ids: Vec<(String, usize, Shape4)> = self
            .nodes
            .iter()
            .flat_map(|n| {
                n.layer
                    .params()
                    .iter()
                    .enumerate()
                    .map(move |(k, p)| (n.name.clone(), k, p.shape()))
            })
            .collect();
        for e in &w.entries {
            match ids.iter().find(|(l, k, _)| *l == e.layer && *k == e.index as usize) {
                None => {
                    return Err(Error::layer(
                        &e.layer,
                        format!("weights entry {} has no matching parameter in the net", e.index),
                    ))
                }
                Some((_, _, shape)) if *shape != e.shape => {
                    return Err(Error::layer(
                        &e.layer,
                        format!("parameter {} has shape {shape} but the weights have {}", e.index, e.shape),
                    ))
                }
                _ => {}
            }
        }
        for (l, k, _) in &ids {
            if w.get(l, *k as u16).is_none() {
                return Err(Error::layer(l, format!("weights file lacks parameter {k}")));
            }
        }
        for n in &mut self.nodes {
            for (k, p) in n.layer.params_mut().iter_mut().enumerate() {
                let e = w.get(&n.name, k as u16).expect("checked above");
                for (d, &v) in p.data_mut().iter_mut().zip(&e.data) {
                    *d = T::from_f32(v);
                }
            }
        }
        Ok(())
    }

    /// Initializes this net's layers from another model's weights by layer
    /// name. Layers the file does not mention keep their filler values.
    /// A named layer whose shapes differ is an error, or skipped when
    /// `permissive`. On error nothing changes.
    pub fn copy_trained_layers(&mut self, w: &WeightsFile, permissive: bool) -> Result<TransferReport> {
        let mut report = TransferReport::default();
        let mut plan = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let params = n.layer.params();
            if params.is_empty() || !n.declared {
                continue;
            }
            if !w.entries.iter().any(|e| e.layer == n.name) {
                report.initialized.push(n.name.clone());
                continue;
            }
            let mut conflict = None;
            for (k, p) in params.iter().enumerate() {
                match w.get(&n.name, k as u16) {
                    Some(e) if e.shape == p.shape() => {}
                    Some(e) => {
                        conflict = Some(format!("parameter {k} has shape {} but the weights have {}", p.shape(), e.shape))
                    }
                    None => conflict = Some(format!("weights file lacks parameter {k}")),
                }
                if conflict.is_some() {
                    break;
                }
            }
            match conflict {
                None => {
                    report.copied.push(n.name.clone());
                    plan.push(i);
                }
                Some(msg) if permissive => {
                    let _ = msg;
                    report.skipped.push(n.name.clone());
                }
                Some(msg) => return Err(Error::layer(&n.name, msg)),
            }
        }
        for i in plan {
            let n = &mut self.nodes[i];
            for (k, p) in n.layer.params_mut().iter_mut().enumerate() {
                let e = w.get(&n.name, k as u16).expect("planned");
                for (d, &v) in p.data_mut().iter_mut().zip(&e.data) {
                    *d = T::from_f32(v);
                }
            }
        }
        Ok(report)
    }

    /// Detached copy of a blob's data plane.
    pub fn extract_features(&self, name: &str) -> Result<Blob<T>> {
        let b = self.blob(name)?;
        Blob::from_data(b.shape(), b.data())
    }

    /// Replaces a declared layer by `f(layer)`; for instrumenting or
    /// deliberately breaking layers in tests.
    pub fn wrap_layer(&mut self, name: &str, f: impl FnOnce(Box<dyn Layer<T>>) -> Box<dyn Layer<T>>) -> Result<()> {
        let node = self
            .nodes
            .iter_mut()
            .find(|n| n.declared && n.name == name)
            .ok_or_else(|| Error::layer(name, "no such layer"))?;
        let placeholder: Box<dyn Layer<T>> = Box::new(Split::new(0));
        let inner = std::mem::replace(&mut node.layer, placeholder);
        node.layer = f(inner);
        Ok(())
    }

    /// The same net in another precision, with identical parameter values
    /// and populated inputs.
    pub fn convert<U: Real>(&self) -> Result<Net<U>> {
        let mut other = Net::<U>::build(&self.def, &self.options)?;
        for (dst, src) in other.params_mut().into_iter().zip(self.params()) {
            *dst = src.convert();
        }
        for (k, &slot) in self.feeds.iter().enumerate() {
            other.blobs[slot] = self.blobs[slot].convert();
            other.fed[k] = self.fed[k];
        }
        Ok(other)
    }

    /// Hash of every layer's branch decisions in the last forward pass.
    pub(crate) fn fingerprint(&self, h: &mut dyn Hasher) {
        for n in &self.nodes {
            n.layer.fingerprint(h);
        }
    }
}
